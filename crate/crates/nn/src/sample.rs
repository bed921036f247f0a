//! Fused sampling ops: deformable attention aggregation, RoI align, and
//! sinusoidal position embeddings with coordinate gradients.

use crate::kernels;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

impl Tape {
    /// Deformable attention aggregation over a single-level value map.
    ///
    /// * `v`: [D, H, W] projected value features, D divisible by `heads`
    /// * `coords_x`, `coords_y`: [n, heads*S] sampling coordinates in feature
    ///   pixels, head-major (index h*S + s)
    /// * `weights`: [n, heads*S] attention weights (softmax over S per head)
    ///
    /// Output [n, D]: for head h and its channel slice, the weighted sum of
    /// bilinear samples. Out-of-map samples contribute zeros.
    pub fn deform_attend(
        &mut self,
        v: NodeId,
        coords_x: NodeId,
        coords_y: NodeId,
        weights: NodeId,
        heads: usize,
    ) -> NodeId {
        let vv = self.value(v).clone();
        let vx = self.value(coords_x).clone();
        let vy = self.value(coords_y).clone();
        let vw = self.value(weights).clone();
        let (d, h, w) = (vv.shape()[0], vv.shape()[1], vv.shape()[2]);
        assert_eq!(d % heads, 0);
        let dh = d / heads;
        let n = vx.shape()[0];
        let hs = vx.shape()[1];
        assert_eq!(hs % heads, 0);
        let s = hs / heads;
        assert_eq!(vy.shape(), vx.shape());
        assert_eq!(vw.shape(), vx.shape());

        let mut out = vec![0.0; n * d];
        for q in 0..n {
            for head in 0..heads {
                for samp in 0..s {
                    let idx = q * hs + head * s + samp;
                    let (px, py, wt) = (vx.data()[idx], vy.data()[idx], vw.data()[idx]);
                    if wt == 0.0 {
                        continue;
                    }
                    for c in 0..dh {
                        let ch = head * dh + c;
                        let plane = &vv.data()[ch * h * w..(ch + 1) * h * w];
                        out[q * d + ch] += wt * kernels::bilinear_at(plane, h, w, px, py).0;
                    }
                }
            }
        }
        self.push_with(
            Tensor::new(&[n, d], out),
            Box::new(move |g, sink| {
                let mut gv = vec![0.0; vv.numel()];
                let mut gx = vec![0.0; n * hs];
                let mut gy = vec![0.0; n * hs];
                let mut gw = vec![0.0; n * hs];
                for q in 0..n {
                    for head in 0..heads {
                        for samp in 0..s {
                            let idx = q * hs + head * s + samp;
                            let (px, py, wt) = (vx.data()[idx], vy.data()[idx], vw.data()[idx]);
                            for c in 0..dh {
                                let ch = head * dh + c;
                                let go = g.data()[q * d + ch];
                                if go == 0.0 {
                                    continue;
                                }
                                let plane = &vv.data()[ch * h * w..(ch + 1) * h * w];
                                let (val, ddx, ddy) = kernels::bilinear_at(plane, h, w, px, py);
                                gw[idx] += go * val;
                                gx[idx] += go * wt * ddx;
                                gy[idx] += go * wt * ddy;
                                kernels::bilinear_scatter(
                                    &mut gv[ch * h * w..(ch + 1) * h * w],
                                    h,
                                    w,
                                    px,
                                    py,
                                    go * wt,
                                );
                            }
                        }
                    }
                }
                sink.add_owned(v, gv);
                sink.add_owned(coords_x, gx);
                sink.add_owned(coords_y, gy);
                sink.add_owned(weights, gw);
            }),
        )
    }

    /// RoI align over a CHW feature map.
    ///
    /// Boxes are (x0, y0, x1, y1) in feature-pixel coordinates, treated as
    /// constants (no gradient to boxes). Each of the ph*pw bins is averaged
    /// over a 2x2 grid of bilinear samples. Output [n, C*ph*pw].
    pub fn roi_align(
        &mut self,
        x: NodeId,
        boxes: &[[f64; 4]],
        ph: usize,
        pw: usize,
    ) -> NodeId {
        let vx = self.value(x).clone();
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let n = boxes.len();
        let mut out = vec![0.0; n * c * ph * pw];
        let samples = sample_points(boxes, h, w, ph, pw);
        for (bi, pts) in samples.iter().enumerate() {
            for ch in 0..c {
                let plane = &vx.data()[ch * h * w..(ch + 1) * h * w];
                for (bin, bin_pts) in pts.chunks(4).enumerate() {
                    let mut acc = 0.0;
                    for &(px, py) in bin_pts {
                        acc += kernels::bilinear_at(plane, h, w, px, py).0;
                    }
                    out[(bi * c + ch) * ph * pw + bin] = acc * 0.25;
                }
            }
        }
        self.push_with(
            Tensor::new(&[n, c * ph * pw], out),
            Box::new(move |g, sink| {
                let mut gx = vec![0.0; vx.numel()];
                for (bi, pts) in samples.iter().enumerate() {
                    for ch in 0..c {
                        let gplane = &mut gx[ch * h * w..(ch + 1) * h * w];
                        for (bin, bin_pts) in pts.chunks(4).enumerate() {
                            let go = g.data()[(bi * c + ch) * ph * pw + bin] * 0.25;
                            if go == 0.0 {
                                continue;
                            }
                            for &(px, py) in bin_pts {
                                kernels::bilinear_scatter(gplane, h, w, px, py, go);
                            }
                        }
                    }
                }
                sink.add_owned(x, gx);
            }),
        )
    }

    /// Sinusoidal embedding of 2-D positions where x is fixed and y carries
    /// gradient. `xs` are constants in [0,1]; `y` is a [n,1] node in [0,1].
    /// Output [n, dim]: first half embeds y, second half embeds x (DETR
    /// layout). Pairs alternate sin/cos, so position 0 maps to (0, 1, ...).
    pub fn sine_embed_xy(&mut self, xs: &[f64], y: NodeId, dim: usize) -> NodeId {
        let vy = self.value(y).clone();
        let n = vy.shape()[0];
        assert_eq!(vy.numel(), n);
        assert_eq!(xs.len(), n);
        assert_eq!(dim % 4, 0, "embedding dim must be divisible by 4");
        let half = dim / 2;
        let freqs = sine_freqs(half);
        let mut out = vec![0.0; n * dim];
        for i in 0..n {
            let ya = vy.data()[i] * TWO_PI;
            let xa = xs[i] * TWO_PI;
            for (j, &f) in freqs.iter().enumerate() {
                out[i * dim + 2 * j] = (ya * f).sin();
                out[i * dim + 2 * j + 1] = (ya * f).cos();
                out[i * dim + half + 2 * j] = (xa * f).sin();
                out[i * dim + half + 2 * j + 1] = (xa * f).cos();
            }
        }
        self.push_with(
            Tensor::new(&[n, dim], out),
            Box::new(move |g, sink| {
                let mut gy = vec![0.0; n];
                for i in 0..n {
                    let ya = vy.data()[i] * TWO_PI;
                    for (j, &f) in freqs.iter().enumerate() {
                        let gs = g.data()[i * dim + 2 * j];
                        let gc = g.data()[i * dim + 2 * j + 1];
                        gy[i] += TWO_PI * f * ((ya * f).cos() * gs - (ya * f).sin() * gc);
                    }
                }
                sink.add_owned(y, gy);
            }),
        )
    }
}

const TWO_PI: f64 = std::f64::consts::TAU;

/// Frequencies for a `half`-dimensional sine embedding (interleaved
/// sin/cos pairs): 1 / 10000^(2j/half).
fn sine_freqs(half: usize) -> Vec<f64> {
    (0..half / 2).map(|j| 1.0 / 10000f64.powf(2.0 * j as f64 / half as f64)).collect()
}

/// 2x2 sample points per bin for each box, clamped to sane extents.
fn sample_points(
    boxes: &[[f64; 4]],
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
) -> Vec<Vec<(f64, f64)>> {
    boxes
        .iter()
        .map(|b| {
            let x0 = b[0].min(w as f64 - 1.0).max(0.0);
            let y0 = b[1].min(h as f64 - 1.0).max(0.0);
            let x1 = b[2].min(w as f64).max(x0);
            let y1 = b[3].min(h as f64).max(y0);
            // degenerate boxes collapse to a single sample location
            let bw = ((x1 - x0) / pw as f64).max(1e-6);
            let bh = ((y1 - y0) / ph as f64).max(1e-6);
            let mut pts = Vec::with_capacity(ph * pw * 4);
            for by in 0..ph {
                for bx in 0..pw {
                    for sy in 0..2 {
                        for sx in 0..2 {
                            let px = x0 + (bx as f64 + (sx as f64 + 0.5) / 2.0) * bw;
                            let py = y0 + (by as f64 + (sy as f64 + 0.5) / 2.0) * bh;
                            pts.push((px, py));
                        }
                    }
                }
            }
            pts
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roi_align_on_ramp_matches_analytic_mean() {
        // f(x,y) = x: the average over an axis-aligned box equals the
        // x-coordinate of the box center.
        let mut t = Tape::new();
        let xmap = Tensor::from_fn(&[1, 8, 8], |i| (i % 8) as f64);
        let x = t.leaf(xmap);
        let boxes = [[1.0, 2.0, 5.0, 6.0]];
        let r = t.roi_align(x, &boxes, 2, 2);
        let mean: f64 = t.value(r).iter().sum::<f64>() / 4.0;
        assert!((mean - 3.0).abs() < 1e-9, "mean {mean}");
    }

    #[test]
    fn sine_embed_at_zero_alternates() {
        let mut t = Tape::new();
        let y = t.constant(Tensor::new(&[1, 1], vec![0.0]));
        let e = t.sine_embed_xy(&[0.0], y, 8);
        let v = t.value(e);
        for j in 0..4 {
            assert_eq!(v.data()[2 * j], 0.0);
            assert_eq!(v.data()[2 * j + 1], 1.0);
        }
    }

    #[test]
    fn deform_zero_offset_single_point_is_plain_sample() {
        let mut t = Tape::new();
        let v = t.leaf(Tensor::from_fn(&[2, 4, 4], |i| i as f64));
        let cx = t.constant(Tensor::new(&[1, 2], vec![1.5, 1.5])); // 2 heads, S=1
        let cy = t.constant(Tensor::new(&[1, 2], vec![2.0, 2.0]));
        let w = t.constant(Tensor::new(&[1, 2], vec![1.0, 1.0]));
        let out = t.deform_attend(v, cx, cy, w, 2);
        let coords = t.constant(Tensor::new(&[1, 2], vec![1.5, 2.0]));
        let direct = t.bilinear_sample(v, coords);
        for (a, b) in t.value(out).iter().zip(t.value(direct).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
