//! Tiny grayscale/RGB raster buffers and ink-drawing helpers.

use crate::geometry::{Point2D, Polyline, Quad};

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub w: usize,
    pub h: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn white(w: usize, h: usize) -> Self {
        Self { w, h, data: vec![255; w * h] }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn put(&mut self, x: i64, y: i64, v: u8) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            self.data[y as usize * self.w + x as usize] = v;
        }
    }

    /// Filled disk, for thick line strokes.
    pub fn stamp(&mut self, cx: f64, cy: f64, radius: f64, v: u8) {
        let r = radius.ceil() as i64;
        let (icx, icy) = (cx.round() as i64, cy.round() as i64);
        for dy in -r..=r {
            for dx in -r..=r {
                if (dx * dx + dy * dy) as f64 <= radius * radius {
                    self.put(icx + dx, icy + dy, v);
                }
            }
        }
    }

    /// Draw a polyline by dense sampling of its parallel coordinate.
    pub fn draw_polyline(&mut self, line: &Polyline, t0: f64, t1: f64, radius: f64, v: u8) {
        let steps = ((t1 - t0).abs().ceil() as usize).max(1);
        for s in 0..=steps {
            let t = t0 + (t1 - t0) * s as f64 / steps as f64;
            let p = line.axis.join(t, line.eval(t));
            self.stamp(p.x, p.y, radius, v);
        }
    }

    /// Fill a convex quad (inclusive edges).
    pub fn fill_quad(&mut self, q: &Quad, v: u8) {
        let (x0, y0, x1, y1) = q.bbox();
        for y in y0.floor() as i64..=y1.ceil() as i64 {
            for x in x0.floor() as i64..=x1.ceil() as i64 {
                if point_in_quad(Point2D::new(x as f64, y as f64), q) {
                    self.put(x, y, v);
                }
            }
        }
    }

    /// Fraction of ink (non-background) pixels, for tests.
    pub fn ink_fraction(&self) -> f64 {
        let ink = self.data.iter().filter(|&&v| v < 128).count();
        ink as f64 / self.data.len() as f64
    }

    /// Bilinear resize.
    pub fn resize(&self, nw: usize, nh: usize) -> GrayImage {
        let mut out = GrayImage::white(nw, nh);
        for oy in 0..nh {
            let fy = ((oy as f64 + 0.5) * self.h as f64 / nh as f64 - 0.5)
                .clamp(0.0, self.h as f64 - 1.0);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.h - 1);
            let wy = fy - y0 as f64;
            for ox in 0..nw {
                let fx = ((ox as f64 + 0.5) * self.w as f64 / nw as f64 - 0.5)
                    .clamp(0.0, self.w as f64 - 1.0);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.w - 1);
                let wx = fx - x0 as f64;
                let top = self.get(x0, y0) as f64 * (1.0 - wx) + self.get(x1, y0) as f64 * wx;
                let bot = self.get(x0, y1) as f64 * (1.0 - wx) + self.get(x1, y1) as f64 * wx;
                out.data[oy * nw + ox] = (top * (1.0 - wy) + bot * wy).round() as u8;
            }
        }
        out
    }

    /// Place this image into a white canvas of the given size (top-left).
    pub fn pad_to(&self, nw: usize, nh: usize) -> GrayImage {
        let mut out = GrayImage::white(nw, nh);
        for y in 0..self.h.min(nh) {
            let src = &self.data[y * self.w..y * self.w + self.w.min(nw)];
            out.data[y * nw..y * nw + src.len()].copy_from_slice(src);
        }
        out
    }
}

/// Inclusive point-in-convex-quad test (consistent winding assumed).
pub fn point_in_quad(p: Point2D, q: &Quad) -> bool {
    let c = q.corners();
    let mut sign = 0i8;
    for i in 0..4 {
        let a = c[i];
        let b = c[(i + 1) % 4];
        let cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
        let s = if cross > 1e-9 {
            1
        } else if cross < -1e-9 {
            -1
        } else {
            0
        };
        if s != 0 {
            if sign != 0 && s != sign {
                return false;
            }
            sign = s;
        }
    }
    true
}

#[derive(Clone)]
pub struct RgbImage {
    pub w: usize,
    pub h: usize,
    pub data: Vec<u8>, // RGB triplets
}

impl RgbImage {
    pub fn from_gray(g: &GrayImage) -> Self {
        let mut data = Vec::with_capacity(g.w * g.h * 3);
        for &v in &g.data {
            data.extend_from_slice(&[v, v, v]);
        }
        Self { w: g.w, h: g.h, data }
    }

    pub fn put(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            let i = (y as usize * self.w + x as usize) * 3;
            self.data[i..i + 3].copy_from_slice(&rgb);
        }
    }

    /// Solid or dashed polyline overlay.
    pub fn draw_polyline(&mut self, line: &Polyline, t0: f64, t1: f64, rgb: [u8; 3], dashed: bool) {
        let steps = ((t1 - t0).abs().ceil() as usize).max(1);
        for s in 0..=steps {
            if dashed && (s / 4) % 2 == 1 {
                continue;
            }
            let t = t0 + (t1 - t0) * s as f64 / steps as f64;
            let p = line.axis.join(t, line.eval(t));
            self.put(p.x.round() as i64, p.y.round() as i64, rgb);
        }
    }

    pub fn draw_quad(&mut self, q: &Quad, rgb: [u8; 3]) {
        let c = q.corners();
        for i in 0..4 {
            let (a, b) = (c[i], c[(i + 1) % 4]);
            let steps = ((b.x - a.x).abs() + (b.y - a.y).abs()).ceil() as usize + 1;
            for s in 0..=steps {
                let f = s as f64 / steps as f64;
                self.put(
                    (a.x + (b.x - a.x) * f).round() as i64,
                    (a.y + (b.y - a.y) * f).round() as i64,
                    rgb,
                );
            }
        }
    }
}
