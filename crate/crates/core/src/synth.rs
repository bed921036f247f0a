//! Synthetic annotated table images.
//!
//! Layout sampling, glyph-blob rendering, smooth warps, and the two
//! ground-truth separator derivation procedures (content-band for
//! axis-aligned layouts, line-sweep for distorted ones). Generation is
//! deterministic per seed and embarrassingly parallel across samples.

use crate::geometry::{
    build_grid, fixed_coords, resolve_merges, Axis, Point2D, Polyline, Quad, Separator,
    SeparatorSet, TableGrid,
};
use crate::raster::{point_in_quad, GrayImage};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("warp is not bijective on the image domain (min jacobian {0:.3})")]
    WarpNotBijective(f64),
    #[error("grid construction failed: {0}")]
    Grid(#[from] crate::geometry::GeometryError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Plain,
    Spans,
    Empties,
    Dense,
}

/// Probability that a spans-difficulty table contains spanning cells.
pub const SPAN_TABLE_PROB: f64 = 0.7;
/// Per-cell empty probability at empties difficulty.
pub const EMPTY_CELL_PROB: f64 = 0.18;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BorderStyle {
    Full,
    Partial,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanSpec {
    pub row: usize,
    pub col: usize,
    pub row_span: usize,
    pub col_span: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn quad(&self) -> Quad {
        Quad::from_bbox(self.x0, self.y0, self.x1, self.y1)
    }
    pub fn union(&self, o: &Rect) -> Rect {
        Rect {
            x0: self.x0.min(o.x0),
            y0: self.y0.min(o.y0),
            x1: self.x1.max(o.x1),
            y1: self.y1.max(o.y1),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TextLineSpec {
    /// Anchor basic cell (row, col).
    pub cell: (usize, usize),
    pub rect: Rect,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TableSpec {
    pub seed: u64,
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_heights: Vec<f64>,
    pub col_widths: Vec<f64>,
    pub margin: (f64, f64),
    pub spans: Vec<SpanSpec>,
    pub empty_cells: BTreeSet<(usize, usize)>,
    pub border_style: BorderStyle,
    pub text_lines: Vec<TextLineSpec>,
}

impl TableSpec {
    /// y of the boundary above row i (i ranges 0..=n_rows).
    pub fn row_edge(&self, i: usize) -> f64 {
        self.margin.1 + self.row_heights[..i].iter().sum::<f64>()
    }

    pub fn col_edge(&self, j: usize) -> f64 {
        self.margin.0 + self.col_widths[..j].iter().sum::<f64>()
    }

    pub fn cell_rect(&self, i: usize, j: usize) -> Rect {
        Rect {
            x0: self.col_edge(j),
            y0: self.row_edge(i),
            x1: self.col_edge(j + 1),
            y1: self.row_edge(i + 1),
        }
    }

    pub fn span_rect(&self, s: &SpanSpec) -> Rect {
        Rect {
            x0: self.col_edge(s.col),
            y0: self.row_edge(s.row),
            x1: self.col_edge(s.col + s.col_span),
            y1: self.row_edge(s.row + s.row_span),
        }
    }

    /// Span covering a basic cell, if any.
    pub fn span_of(&self, i: usize, j: usize) -> Option<&SpanSpec> {
        self.spans.iter().find(|s| {
            i >= s.row && i < s.row + s.row_span && j >= s.col && j < s.col + s.col_span
        })
    }

    pub fn is_non_spanning(&self, i: usize, j: usize) -> bool {
        self.span_of(i, j).is_none()
    }

    pub fn image_size(&self) -> (usize, usize) {
        let w = self.col_edge(self.n_cols) + self.margin.0;
        let h = self.row_edge(self.n_rows) + self.margin.1;
        (w.ceil() as usize, h.ceil() as usize)
    }
}

/// Deterministic layout sampling. Difficulty steers span probability,
/// empty-cell probability, and minimum row height.
pub fn sample_table_spec(seed: u64, difficulty: Difficulty) -> TableSpec {
    let mut rng = StdRng::seed_from_u64(seed);
    let (rows_lo, rows_hi, cols_lo, cols_hi) = match difficulty {
        Difficulty::Dense => (4, 7, 4, 7),
        _ => (2, 5, 2, 5),
    };
    let (rh_lo, rh_hi) = match difficulty {
        Difficulty::Dense => (20.0, 30.0),
        _ => (28.0, 46.0),
    };
    let (cw_lo, cw_hi) = match difficulty {
        Difficulty::Dense => (34.0, 56.0),
        _ => (46.0, 90.0),
    };
    let n_rows = rng.random_range(rows_lo..=rows_hi);
    let n_cols = rng.random_range(cols_lo..=cols_hi);
    let row_heights: Vec<f64> = (0..n_rows).map(|_| rng.random_range(rh_lo..rh_hi)).collect();
    let col_widths: Vec<f64> = (0..n_cols).map(|_| rng.random_range(cw_lo..cw_hi)).collect();
    let margin = (rng.random_range(14.0..26.0), rng.random_range(14.0..26.0));
    let border_style = match rng.random_range(0..3) {
        0 => BorderStyle::Full,
        1 => BorderStyle::Partial,
        _ => BorderStyle::None,
    };

    let mut spans: Vec<SpanSpec> = Vec::new();
    if difficulty == Difficulty::Spans && rng.random::<f64>() < SPAN_TABLE_PROB {
        let n_spans = rng.random_range(1..=2);
        for _ in 0..n_spans {
            for _attempt in 0..8 {
                let shapes = [(1, 2), (2, 1), (1, 3), (2, 2)];
                let (rs, cs) = shapes[rng.random_range(0..shapes.len())];
                if rs > n_rows || cs > n_cols {
                    continue;
                }
                let row = rng.random_range(0..=(n_rows - rs));
                let col = rng.random_range(0..=(n_cols - cs));
                let candidate = SpanSpec { row, col, row_span: rs, col_span: cs };
                let overlaps = spans.iter().any(|s| {
                    s.row < row + rs && row < s.row + s.row_span && s.col < col + cs
                        && col < s.col + s.col_span
                });
                if !overlaps {
                    spans.push(candidate);
                    break;
                }
            }
        }
    }

    let mut empty_cells = BTreeSet::new();
    if difficulty == Difficulty::Empties {
        for i in 0..n_rows {
            for j in 0..n_cols {
                if rng.random::<f64>() < EMPTY_CELL_PROB {
                    empty_cells.insert((i, j));
                }
            }
        }
        // keep at least one cell with content
        if empty_cells.len() == n_rows * n_cols {
            empty_cells.remove(&(0, 0));
        }
    }

    let mut spec = TableSpec {
        seed,
        n_rows,
        n_cols,
        row_heights,
        col_widths,
        margin,
        spans,
        empty_cells,
        border_style,
        text_lines: Vec::new(),
    };
    spec.text_lines = sample_text_lines(&spec, &mut rng);
    spec
}

fn sample_text_lines(spec: &TableSpec, rng: &mut StdRng) -> Vec<TextLineSpec> {
    let mut lines = Vec::new();
    let mut emit = |rng: &mut StdRng, anchor: (usize, usize), rect: Rect| {
        let inner_w = rect.x1 - rect.x0 - 8.0;
        let inner_h = rect.y1 - rect.y0 - 6.0;
        if inner_w < 12.0 || inner_h < 8.0 {
            return;
        }
        let line_h = rng.random_range(8.0..13.0f64).min(inner_h);
        let two = inner_h >= 2.0 * line_h + 4.0 && rng.random::<f64>() < 0.35;
        let n_lines = if two { 2 } else { 1 };
        let total_h = n_lines as f64 * line_h + (n_lines - 1) as f64 * 3.0;
        let mut y = rect.y0 + (rect.y1 - rect.y0 - total_h) / 2.0;
        for _ in 0..n_lines {
            let w = inner_w * rng.random_range(0.45..0.92);
            let x0 = rect.x0 + 4.0 + rng.random_range(0.0..(inner_w - w).max(0.01));
            lines.push(TextLineSpec {
                cell: anchor,
                rect: Rect { x0, y0: y, x1: x0 + w, y1: y + line_h },
            });
            y += line_h + 3.0;
        }
    };
    // spanning cells first (anchor owns the text over the whole span rect)
    for s in &spec.spans {
        emit(rng, (s.row, s.col), spec.span_rect(s));
    }
    for i in 0..spec.n_rows {
        for j in 0..spec.n_cols {
            if spec.span_of(i, j).is_some() || spec.empty_cells.contains(&(i, j)) {
                continue;
            }
            emit(rng, (i, j), spec.cell_rect(i, j));
        }
    }
    lines
}

// ---------------------------------------------------------------------------
// warp
// ---------------------------------------------------------------------------

/// Smooth displacement field: a control grid of 2-D displacements
/// interpolated with Catmull-Rom splines over the image domain.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Warp {
    pub grid_w: usize,
    pub grid_h: usize,
    /// (dx, dy) per control point, row-major.
    pub disp: Vec<(f64, f64)>,
    pub domain: (f64, f64),
}

impl Warp {
    pub fn identity(domain: (f64, f64), grid_w: usize, grid_h: usize) -> Self {
        Self { grid_w, grid_h, disp: vec![(0.0, 0.0); grid_w * grid_h], domain }
    }

    /// Random smooth warp with displacements up to `amplitude` pixels.
    pub fn random(seed: u64, amplitude: f64, domain: (f64, f64)) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let (gw, gh) = (5, 5);
        let disp = (0..gw * gh)
            .map(|_| {
                (
                    rng.random_range(-amplitude..amplitude) * 0.5,
                    rng.random_range(-amplitude..amplitude),
                )
            })
            .collect();
        Self { grid_w: gw, grid_h: gh, disp, domain }
    }

    fn control(&self, ix: isize, iy: isize) -> (f64, f64) {
        let x = ix.clamp(0, self.grid_w as isize - 1) as usize;
        let y = iy.clamp(0, self.grid_h as isize - 1) as usize;
        self.disp[y * self.grid_w + x]
    }

    /// Catmull-Rom interpolated displacement at an image point.
    pub fn displacement(&self, p: Point2D) -> (f64, f64) {
        let u = (p.x / self.domain.0).clamp(0.0, 1.0) * (self.grid_w as f64 - 1.0);
        let v = (p.y / self.domain.1).clamp(0.0, 1.0) * (self.grid_h as f64 - 1.0);
        let (iu, fv_u) = (u.floor() as isize, u - u.floor());
        let (iv, fv_v) = (v.floor() as isize, v - v.floor());
        let mut acc = (0.0, 0.0);
        let wx: Vec<f64> = (-1..=2).map(|k| catmull_rom_w(k, fv_u)).collect();
        let wy: Vec<f64> = (-1..=2).map(|k| catmull_rom_w(k, fv_v)).collect();
        for (kyi, wyv) in wy.iter().enumerate() {
            for (kxi, wxv) in wx.iter().enumerate() {
                let c = self.control(iu + kxi as isize - 1, iv + kyi as isize - 1);
                let w = wxv * wyv;
                acc.0 += w * c.0;
                acc.1 += w * c.1;
            }
        }
        acc
    }

    pub fn apply(&self, p: Point2D) -> Point2D {
        let (dx, dy) = self.displacement(p);
        Point2D::new(p.x + dx, p.y + dy)
    }

    /// Sampled Jacobian-determinant check of bijectivity.
    pub fn min_jacobian(&self) -> f64 {
        let n = 24;
        let h = 0.5;
        let mut min_det = f64::INFINITY;
        for iy in 0..=n {
            for ix in 0..=n {
                let p = Point2D::new(
                    self.domain.0 * ix as f64 / n as f64,
                    self.domain.1 * iy as f64 / n as f64,
                );
                let xp = self.apply(Point2D::new(p.x + h, p.y));
                let xm = self.apply(Point2D::new(p.x - h, p.y));
                let yp = self.apply(Point2D::new(p.x, p.y + h));
                let ym = self.apply(Point2D::new(p.x, p.y - h));
                let j11 = (xp.x - xm.x) / (2.0 * h);
                let j12 = (yp.x - ym.x) / (2.0 * h);
                let j21 = (xp.y - xm.y) / (2.0 * h);
                let j22 = (yp.y - ym.y) / (2.0 * h);
                min_det = min_det.min(j11 * j22 - j12 * j21);
            }
        }
        min_det
    }

    pub fn is_bijective(&self) -> bool {
        self.min_jacobian() > 0.05
    }

    /// Image of an axis-parallel straight line under the warp, resampled at
    /// the given parallel coordinates (bisection on the parallel coordinate
    /// of the warped curve).
    pub fn warp_line(&self, axis: Axis, cross: f64, targets: &[f64]) -> Polyline {
        let points = targets
            .iter()
            .map(|&t| {
                let par_of = |s: f64| {
                    let q = self.apply(axis.join(s, cross));
                    axis.split(q).0
                };
                let mut lo = t - 60.0;
                let mut hi = t + 60.0;
                // expand until the target is bracketed
                for _ in 0..8 {
                    if par_of(lo) <= t {
                        break;
                    }
                    lo -= 60.0;
                }
                for _ in 0..8 {
                    if par_of(hi) >= t {
                        break;
                    }
                    hi += 60.0;
                }
                for _ in 0..50 {
                    let mid = 0.5 * (lo + hi);
                    if par_of(mid) < t {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let s = 0.5 * (lo + hi);
                self.apply(axis.join(s, cross))
            })
            .collect();
        Polyline { points, axis }
    }
}

fn catmull_rom_w(k: i32, f: f64) -> f64 {
    // weights of the 4 neighbours at offset k in {-1,0,1,2}
    match k {
        -1 => 0.5 * (-f + 2.0 * f * f - f * f * f),
        0 => 0.5 * (2.0 - 5.0 * f * f + 3.0 * f * f * f),
        1 => 0.5 * (f + 4.0 * f * f - 3.0 * f * f * f),
        2 => 0.5 * (-f * f + f * f * f),
        _ => unreachable!(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SeparatorWidthMode {
    /// Band spans the content gap (minimum-bounding-box rule).
    Content,
    /// Fixed band width in pixels around the center line (WTW-style masks).
    Fixed(f64),
}

// ---------------------------------------------------------------------------
// ground-truth derivation
// ---------------------------------------------------------------------------

/// Pad applied to geometric boundaries when a row/column has no usable text.
const FALLBACK_PAD: f64 = 3.0;

/// Content-band ground truth for axis-aligned layouts: per table row the
/// minimum rectangle enclosing text of non-spanning cells; its edges become
/// the facing boundaries of the adjacent separators.
pub fn derive_gt_separators_axis_aligned(
    spec: &TableSpec,
    k_points: usize,
    width_mode: SeparatorWidthMode,
) -> (SeparatorSet, SeparatorSet) {
    let (w, h) = spec.image_size();
    let (wf, hf) = (w as f64, h as f64);

    let row_interval = |i: usize| -> (f64, f64) {
        let mut bbox: Option<(f64, f64)> = None;
        for line in &spec.text_lines {
            let (ci, cj) = line.cell;
            if ci == i && spec.is_non_spanning(ci, cj) {
                bbox = Some(match bbox {
                    None => (line.rect.y0, line.rect.y1),
                    Some((a, b)) => (a.min(line.rect.y0), b.max(line.rect.y1)),
                });
            }
        }
        bbox.unwrap_or((spec.row_edge(i) + FALLBACK_PAD, spec.row_edge(i + 1) - FALLBACK_PAD))
    };
    let col_interval = |j: usize| -> (f64, f64) {
        let mut bbox: Option<(f64, f64)> = None;
        for line in &spec.text_lines {
            let (ci, cj) = line.cell;
            if cj == j && spec.is_non_spanning(ci, cj) {
                bbox = Some(match bbox {
                    None => (line.rect.x0, line.rect.x1),
                    Some((a, b)) => (a.min(line.rect.x0), b.max(line.rect.x1)),
                });
            }
        }
        bbox.unwrap_or((spec.col_edge(j) + FALLBACK_PAD, spec.col_edge(j + 1) - FALLBACK_PAD))
    };

    let band = |axis: Axis, top_c: f64, bot_c: f64, center_geo: f64, extent: f64| -> Separator {
        match width_mode {
            SeparatorWidthMode::Content => {
                let center = 0.5 * (top_c + bot_c);
                Separator {
                    center: Polyline::straight(axis, center, extent),
                    top: Polyline::straight(axis, top_c, extent),
                    bottom: Polyline::straight(axis, bot_c, extent),
                    confidence: 1.0,
                }
            }
            SeparatorWidthMode::Fixed(wpx) => Separator {
                center: Polyline::straight(axis, center_geo, extent),
                top: Polyline::straight(axis, center_geo - wpx / 2.0, extent),
                bottom: Polyline::straight(axis, center_geo + wpx / 2.0, extent),
                confidence: 1.0,
            },
        }
    };

    let xs = fixed_coords(wf, k_points);
    let ys = fixed_coords(hf, k_points);
    let rows = (1..spec.n_rows)
        .map(|i| {
            let above = row_interval(i - 1);
            let below = row_interval(i);
            let s = band(Axis::Row, above.1, below.0, spec.row_edge(i), wf);
            Separator {
                center: s.center.resample(&xs),
                top: s.top.resample(&xs),
                bottom: s.bottom.resample(&xs),
                confidence: 1.0,
            }
        })
        .collect();
    let cols = (1..spec.n_cols)
        .map(|j| {
            let left = col_interval(j - 1);
            let right = col_interval(j);
            let s = band(Axis::Column, left.1, right.0, spec.col_edge(j), hf);
            Separator {
                center: s.center.resample(&ys),
                top: s.top.resample(&ys),
                bottom: s.bottom.resample(&ys),
                confidence: 1.0,
            }
        })
        .collect();
    (
        SeparatorSet { axis: Axis::Row, separators: rows },
        SeparatorSet { axis: Axis::Column, separators: cols },
    )
}

/// Line-sweep ground truth for distorted layouts: translate each labeled
/// center line outward in 1-pixel steps until it would touch a text box of
/// a non-spanning cell, keeping 1 pixel of clearance; cap at image borders.
pub fn derive_gt_separators_distorted(
    labeled_lines: &[Polyline],
    text_boxes: &[Quad],
    image_size: (usize, usize),
) -> SeparatorSet {
    let axis = labeled_lines.first().map_or(Axis::Row, |l| l.axis);
    let (w, h) = image_size;
    let cross_extent = match axis {
        Axis::Row => h as f64,
        Axis::Column => w as f64,
    };
    let par_extent = match axis {
        Axis::Row => w as f64,
        Axis::Column => h as f64,
    };

    let touches = |line: &Polyline| -> bool {
        let steps = par_extent.ceil() as usize;
        (0..=steps).any(|s| {
            let t = s as f64;
            let p = axis.join(t, line.eval(t));
            text_boxes.iter().any(|q| point_in_quad(p, q))
        })
    };

    let sweep = |center: &Polyline, dir: f64| -> Polyline {
        // max offset that keeps every knot inside the image
        let cap = center
            .points
            .iter()
            .map(|&p| {
                let c = axis.split(p).1;
                if dir < 0.0 {
                    c
                } else {
                    cross_extent - c
                }
            })
            .fold(f64::INFINITY, f64::min)
            .max(0.0)
            .floor();
        let mut free = 0.0;
        let mut m = 0.0;
        loop {
            let cand = center.translated(dir * m);
            if touches(&cand) {
                break;
            }
            free = m;
            if m >= cap {
                break;
            }
            m += 1.0;
        }
        if free == 0.0 {
            center.clone()
        } else if free >= cap {
            center.translated(dir * cap)
        } else {
            // 1 px clearance before the touching offset
            center.translated(dir * free)
        }
    };

    let separators = labeled_lines
        .iter()
        .map(|center| Separator {
            top: sweep(center, -1.0),
            bottom: sweep(center, 1.0),
            center: center.clone(),
            confidence: 1.0,
        })
        .collect();
    let mut set = SeparatorSet { axis, separators };
    set.separators.sort_by(|a, b| {
        let r = par_extent / 2.0;
        a.center.eval(r).partial_cmp(&b.center.eval(r)).unwrap()
    });
    set
}

// ---------------------------------------------------------------------------
// rendering
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct TextBox {
    pub quad: Quad,
    /// Index into the final-cell list of the ground-truth grid.
    pub cell: usize,
}

#[derive(Clone, Debug)]
pub struct AnnotatedSample {
    pub image: GrayImage,
    pub gt_row_seps: SeparatorSet,
    pub gt_col_seps: SeparatorSet,
    pub gt_grid: TableGrid,
    pub text_boxes: Vec<TextBox>,
    /// Per final cell: owns no text.
    pub cells_empty: Vec<bool>,
}

/// Number of polyline points stored per ground-truth line.
pub const GT_POINTS: usize = 15;

/// Rasterize a table spec and push all ground truth through the warp.
pub fn render_and_warp(spec: &TableSpec, warp: Option<&Warp>) -> Result<AnnotatedSample, SynthError> {
    render_with_options(spec, warp, GT_POINTS, SeparatorWidthMode::Content)
}

pub fn render_with_options(
    spec: &TableSpec,
    warp: Option<&Warp>,
    k_points: usize,
    width_mode: SeparatorWidthMode,
) -> Result<AnnotatedSample, SynthError> {
    if let Some(w) = warp {
        let det = w.min_jacobian();
        if det <= 0.05 {
            return Err(SynthError::WarpNotBijective(det));
        }
    }
    let (w, h) = spec.image_size();
    let (wf, hf) = (w as f64, h as f64);
    let mut rng = StdRng::seed_from_u64(spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));

    let map_pt = |p: Point2D| -> Point2D {
        match warp {
            Some(wp) => wp.apply(p),
            None => p,
        }
    };
    let map_quad = |q: &Quad| -> Quad {
        let c = q.corners();
        Quad([map_pt(c[0]), map_pt(c[1]), map_pt(c[2]), map_pt(c[3])])
    };
    let warp_straight = |axis: Axis, cross: f64, targets: &[f64]| -> Polyline {
        match warp {
            Some(wp) => wp.warp_line(axis, cross, targets),
            None => Polyline::straight(axis, cross, if axis == Axis::Row { wf } else { hf })
                .resample(targets),
        }
    };

    // ground truth: content bands in layout space, then warped
    let (rows_flat, cols_flat) = derive_gt_separators_axis_aligned(spec, k_points, width_mode);
    let xs = fixed_coords(wf, k_points);
    let ys = fixed_coords(hf, k_points);
    let warp_band = |s: &Separator, targets: &[f64]| -> Separator {
        let lift = |line: &Polyline| -> Polyline {
            let cross = line.axis.split(line.points[0]).1;
            warp_straight(line.axis, cross, targets)
        };
        Separator {
            center: lift(&s.center),
            top: lift(&s.top),
            bottom: lift(&s.bottom),
            confidence: 1.0,
        }
    };
    let gt_row_seps = SeparatorSet {
        axis: Axis::Row,
        separators: rows_flat.separators.iter().map(|s| warp_band(s, &xs)).collect(),
    };
    let gt_col_seps = SeparatorSet {
        axis: Axis::Column,
        separators: cols_flat.separators.iter().map(|s| warp_band(s, &ys)).collect(),
    };

    // grid with merges from spans
    let base = build_grid(&gt_row_seps, &gt_col_seps, (w, h))?;
    let mut decisions = Vec::new();
    for s in &spec.spans {
        for i in s.row..s.row + s.row_span {
            for j in s.col..s.col + s.col_span {
                if j + 1 < s.col + s.col_span {
                    decisions.push((((i, j), (i, j + 1)), true));
                }
                if i + 1 < s.row + s.row_span {
                    decisions.push((((i, j), (i + 1, j)), true));
                }
            }
        }
    }
    let gt_grid = resolve_merges(&base, &decisions);

    // rasterize
    let mut image = GrayImage::white(w, h);
    let ruled_row = |i: usize| -> bool {
        match spec.border_style {
            BorderStyle::Full => true,
            BorderStyle::Partial => i == 1, // header rule
            BorderStyle::None => false,
        }
    };
    let table_x = (spec.col_edge(0), spec.col_edge(spec.n_cols));
    let table_y = (spec.row_edge(0), spec.row_edge(spec.n_rows));
    let draw_row_line = |img: &mut GrayImage, y: f64| {
        let line = warp_straight(Axis::Row, y, &[table_x.0, (table_x.0 + table_x.1) / 2.0, table_x.1]);
        // draw densely between table edges
        let steps = (table_x.1 - table_x.0).ceil() as usize;
        for s in 0..=steps {
            let t = table_x.0 + s as f64;
            let p = map_pt(Point2D::new(t.min(table_x.1), y));
            img.stamp(p.x, p.y, 0.7, 20);
        }
        let _ = line;
    };
    let draw_col_line = |img: &mut GrayImage, x: f64| {
        let steps = (table_y.1 - table_y.0).ceil() as usize;
        for s in 0..=steps {
            let t = table_y.0 + s as f64;
            let p = map_pt(Point2D::new(x, t.min(table_y.1)));
            img.stamp(p.x, p.y, 0.7, 20);
        }
    };

    match spec.border_style {
        BorderStyle::Full => {
            for i in 0..=spec.n_rows {
                // spans suppress interior rules inside their rect; cheap
                // approximation: draw full rules, spans are rare and their
                // text remains the GT signal
                draw_row_line(&mut image, spec.row_edge(i));
            }
            for j in 0..=spec.n_cols {
                draw_col_line(&mut image, spec.col_edge(j));
            }
        }
        BorderStyle::Partial => {
            draw_row_line(&mut image, spec.row_edge(0));
            draw_row_line(&mut image, spec.row_edge(spec.n_rows));
            draw_col_line(&mut image, spec.col_edge(0));
            draw_col_line(&mut image, spec.col_edge(spec.n_cols));
            for i in 1..spec.n_rows {
                if ruled_row(i) {
                    draw_row_line(&mut image, spec.row_edge(i));
                }
            }
        }
        BorderStyle::None => {}
    }

    // glyph blobs: each text line becomes a few word-like filled quads
    let mut text_boxes = Vec::with_capacity(spec.text_lines.len());
    for line in &spec.text_lines {
        let r = &line.rect;
        let total_w = r.x1 - r.x0;
        let n_words = rng.random_range(1..=4usize).min((total_w / 14.0).max(1.0) as usize);
        let gap = 4.0;
        let word_w = (total_w - gap * (n_words as f64 - 1.0)) / n_words as f64;
        let mut x = r.x0;
        for _ in 0..n_words {
            let jitter = rng.random_range(0.0..2.0);
            let wq = Quad::from_bbox(x, r.y0 + jitter * 0.5, x + word_w, r.y1 - jitter * 0.5);
            let shade = rng.random_range(0..60u8);
            image.fill_quad(&map_quad(&wq), shade);
            x += word_w + gap;
        }
        let anchor_final = gt_grid.final_id(line.cell.0, line.cell.1);
        text_boxes.push(TextBox { quad: map_quad(&r.quad()), cell: anchor_final });
    }

    let mut cells_empty = vec![true; gt_grid.final_cells.len()];
    for tb in &text_boxes {
        cells_empty[tb.cell] = false;
    }

    Ok(AnnotatedSample { image, gt_row_seps, gt_col_seps, gt_grid, text_boxes, cells_empty })
}

// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarpLevel {
    None,
    Mild,
    Strong,
}

impl WarpLevel {
    pub fn amplitude(&self) -> f64 {
        match self {
            WarpLevel::None => 0.0,
            WarpLevel::Mild => 5.0,
            WarpLevel::Strong => 11.0,
        }
    }
}

/// One-call generation: spec + warp + render.
pub fn generate_sample(
    seed: u64,
    difficulty: Difficulty,
    warp_level: WarpLevel,
) -> Result<AnnotatedSample, SynthError> {
    let spec = sample_table_spec(seed, difficulty);
    let warp = match warp_level {
        WarpLevel::None => None,
        _ => {
            let (w, h) = spec.image_size();
            Some(Warp::random(seed ^ 0xA5A5_5A5A, warp_level.amplitude(), (w as f64, h as f64)))
        }
    };
    render_and_warp(&spec, warp.as_ref())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DifficultyChoice {
    Fixed(Difficulty),
    /// Alternate spans and empty-cell layouts.
    Mixed,
}

/// Deterministic dataset: sample i uses seed base_seed + i.
pub fn generate_dataset(
    n: usize,
    base_seed: u64,
    choice: DifficultyChoice,
    warp_level: WarpLevel,
) -> Result<Vec<AnnotatedSample>, SynthError> {
    (0..n)
        .map(|i| {
            let difficulty = match choice {
                DifficultyChoice::Fixed(d) => d,
                DifficultyChoice::Mixed => {
                    if i % 2 == 0 {
                        Difficulty::Spans
                    } else {
                        Difficulty::Empties
                    }
                }
            };
            generate_sample(base_seed + i as u64, difficulty, warp_level)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_sampling_is_deterministic() {
        let a = sample_table_spec(0, Difficulty::Plain);
        let b = sample_table_spec(0, Difficulty::Plain);
        assert_eq!(a.n_rows, b.n_rows);
        assert_eq!(a.row_heights, b.row_heights);
        assert_eq!(a.text_lines.len(), b.text_lines.len());
        assert!(a.spans.is_empty());
        assert!(a.empty_cells.is_empty());
    }

    #[test]
    fn span_frequency_matches_configured_probability() {
        let n = 1000;
        let with_spans = (0..n)
            .filter(|&s| !sample_table_spec(s, Difficulty::Spans).spans.is_empty())
            .count();
        let freq = with_spans as f64 / n as f64;
        // placement can fail only after 8 attempts on a tiny grid; allow 20%
        assert!(
            (freq - SPAN_TABLE_PROB).abs() <= 0.2 * SPAN_TABLE_PROB,
            "span frequency {freq} vs configured {SPAN_TABLE_PROB}"
        );
    }

    #[test]
    fn render_without_warp_is_straight() {
        let spec = sample_table_spec(3, Difficulty::Plain);
        let s = render_and_warp(&spec, None).unwrap();
        for sep in &s.gt_row_seps.separators {
            let ys: Vec<f64> = sep.center.points.iter().map(|p| p.y).collect();
            for v in &ys {
                assert!((v - ys[0]).abs() < 1e-9, "straight center line");
            }
            assert!(sep.is_ordered());
        }
        assert_eq!(s.gt_grid.n_rows, spec.n_rows);
        assert_eq!(s.gt_grid.n_cols, spec.n_cols);
    }

    #[test]
    fn identity_warp_equals_no_warp() {
        let spec = sample_table_spec(11, Difficulty::Spans);
        let (w, h) = spec.image_size();
        let idw = Warp::identity((w as f64, h as f64), 4, 4);
        let a = render_and_warp(&spec, None).unwrap();
        let b = render_and_warp(&spec, Some(&idw)).unwrap();
        assert_eq!(a.image.data, b.image.data);
        for (sa, sb) in a.gt_row_seps.separators.iter().zip(&b.gt_row_seps.separators) {
            for (pa, pb) in sa.center.points.iter().zip(&sb.center.points) {
                assert!((pa.x - pb.x).abs() < 1e-6 && (pa.y - pb.y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sinusoidal_warp_moves_gt_exactly() {
        let spec = sample_table_spec(5, Difficulty::Plain);
        let (w, h) = spec.image_size();
        // y-only displacement field, sinusoidal across x
        let (gw, gh) = (9, 3);
        let mut warp = Warp::identity((w as f64, h as f64), gw, gh);
        for gy in 0..gh {
            for gx in 0..gw {
                let u = gx as f64 / (gw as f64 - 1.0);
                warp.disp[gy * gw + gx] = (0.0, 10.0 * (std::f64::consts::TAU * u).sin());
            }
        }
        assert!(warp.is_bijective());
        let flat = render_and_warp(&spec, None).unwrap();
        let curved = render_and_warp(&spec, Some(&warp)).unwrap();
        for (sf, sc) in flat.gt_row_seps.separators.iter().zip(&curved.gt_row_seps.separators) {
            for (pf, pc) in sf.center.points.iter().zip(&sc.center.points) {
                let expect = warp.apply(*pf);
                assert!((pc.x - pf.x).abs() < 1e-6, "x fixed when dx = 0");
                assert!((pc.y - expect.y).abs() < 1e-6, "{} vs {}", pc.y, expect.y);
            }
        }
    }

    #[test]
    fn warp_preserves_cell_structure() {
        let spec = sample_table_spec(21, Difficulty::Spans);
        let (w, h) = spec.image_size();
        let warp = Warp::random(99, 6.0, (w as f64, h as f64));
        let flat = render_and_warp(&spec, None).unwrap();
        let curved = render_and_warp(&spec, Some(&warp)).unwrap();
        assert_eq!(flat.gt_grid.final_cells.len(), curved.gt_grid.final_cells.len());
        assert_eq!(flat.gt_grid.merge_map, curved.gt_grid.merge_map);
        for (a, b) in flat.gt_grid.final_cells.iter().zip(&curved.gt_grid.final_cells) {
            assert_eq!((a.row_span, a.col_span), (b.row_span, b.col_span));
        }
    }

    #[test]
    fn axis_aligned_bands_rule_example() {
        // two rows with text at y in [10,20] and [40,50]
        let mut spec = sample_table_spec(1, Difficulty::Plain);
        spec.n_rows = 2;
        spec.n_cols = 1;
        spec.row_heights = vec![30.0, 30.0];
        spec.col_widths = vec![100.0];
        spec.margin = (0.0, 0.0);
        spec.spans.clear();
        spec.empty_cells.clear();
        spec.text_lines = vec![
            TextLineSpec { cell: (0, 0), rect: Rect { x0: 10.0, y0: 10.0, x1: 90.0, y1: 20.0 } },
            TextLineSpec { cell: (1, 0), rect: Rect { x0: 10.0, y0: 40.0, x1: 90.0, y1: 50.0 } },
        ];
        let (rows, cols) = derive_gt_separators_axis_aligned(&spec, 15, SeparatorWidthMode::Content);
        assert_eq!(rows.len(), 1);
        assert_eq!(cols.len(), 0, "single column gives zero column separators");
        let s = &rows.separators[0];
        assert!((s.top.eval(50.0) - 20.0).abs() < 1e-9);
        assert!((s.bottom.eval(50.0) - 40.0).abs() < 1e-9);
        assert!((s.center.eval(50.0) - 30.0).abs() < 1e-9);
    }

    #[test]
    fn single_row_has_no_row_separators() {
        let mut spec = sample_table_spec(2, Difficulty::Plain);
        spec.n_rows = 1;
        spec.row_heights = vec![40.0];
        spec.text_lines.retain(|t| t.cell.0 == 0);
        let (rows, _) = derive_gt_separators_axis_aligned(&spec, 15, SeparatorWidthMode::Content);
        assert_eq!(rows.len(), 0);
    }

    #[test]
    fn bands_avoid_non_spanning_text() {
        for seed in 0..200u64 {
            let spec = sample_table_spec(seed, Difficulty::Spans);
            let (rows, cols) =
                derive_gt_separators_axis_aligned(&spec, 15, SeparatorWidthMode::Content);
            for line in &spec.text_lines {
                let (ci, cj) = line.cell;
                if !spec.is_non_spanning(ci, cj) {
                    continue;
                }
                let r = &line.rect;
                for sep in &rows.separators {
                    let band_top = sep.top.eval((r.x0 + r.x1) / 2.0);
                    let band_bot = sep.bottom.eval((r.x0 + r.x1) / 2.0);
                    let overlap = r.y0 < band_bot - 1e-9 && band_top < r.y1 - 1e-9;
                    assert!(!overlap, "seed {seed}: row band intersects text");
                }
                for sep in &cols.separators {
                    let band_l = sep.top.eval((r.y0 + r.y1) / 2.0);
                    let band_r = sep.bottom.eval((r.y0 + r.y1) / 2.0);
                    let overlap = r.x0 < band_r - 1e-9 && band_l < r.x1 - 1e-9;
                    assert!(!overlap, "seed {seed}: column band intersects text");
                }
            }
        }
    }

    #[test]
    fn gt_band_order_holds_on_generated_samples() {
        for seed in [0u64, 7, 13, 29] {
            for level in [WarpLevel::None, WarpLevel::Mild, WarpLevel::Strong] {
                let s = generate_sample(seed, Difficulty::Empties, level).unwrap();
                for sep in s.gt_row_seps.separators.iter().chain(&s.gt_col_seps.separators) {
                    assert!(sep.is_ordered(), "seed {seed} {level:?}");
                }
                for (tb, _) in s.text_boxes.iter().zip(0..) {
                    assert!(tb.cell < s.gt_grid.final_cells.len());
                }
                // every non-empty final cell owns at least one text box
                for (id, empty) in s.cells_empty.iter().enumerate() {
                    if !empty {
                        assert!(s.text_boxes.iter().any(|t| t.cell == id));
                    }
                }
            }
        }
    }

    #[test]
    fn sweep_derivation_examples() {
        // center line y=30, text above at y in [10,20], below at [44,54]
        let center = Polyline::straight(Axis::Row, 30.0, 100.0);
        let boxes = vec![
            Quad::from_bbox(10.0, 10.0, 90.0, 20.0),
            Quad::from_bbox(10.0, 44.0, 90.0, 54.0),
        ];
        let set = derive_gt_separators_distorted(&[center.clone()], &boxes, (100, 100));
        let s = &set.separators[0];
        assert!((s.top.eval(50.0) - 21.0).abs() < 1e-9, "top {}", s.top.eval(50.0));
        assert!((s.bottom.eval(50.0) - 43.0).abs() < 1e-9, "bottom {}", s.bottom.eval(50.0));

        // text touching the line already: boundary equals the center line
        let touching = vec![Quad::from_bbox(0.0, 25.0, 100.0, 35.0)];
        let set2 = derive_gt_separators_distorted(&[center.clone()], &touching, (100, 100));
        assert!((set2.separators[0].top.eval(50.0) - 30.0).abs() < 1e-9);
        assert!((set2.separators[0].bottom.eval(50.0) - 30.0).abs() < 1e-9);

        // no text below: bottom boundary capped at the image bottom
        let above_only = vec![Quad::from_bbox(10.0, 10.0, 90.0, 20.0)];
        let set3 = derive_gt_separators_distorted(&[center], &above_only, (100, 100));
        assert!((set3.separators[0].bottom.eval(50.0) - 100.0).abs() < 1e-9);
    }

    #[test]
    fn non_bijective_warp_rejected() {
        let spec = sample_table_spec(4, Difficulty::Plain);
        let (w, h) = spec.image_size();
        let mut warp = Warp::identity((w as f64, h as f64), 4, 4);
        // displacement comparable to the grid spacing folds the domain
        for d in warp.disp.iter_mut().skip(4).take(4) {
            *d = (0.0, -(h as f64));
        }
        assert!(!warp.is_bijective());
        assert!(matches!(
            render_and_warp(&spec, Some(&warp)),
            Err(SynthError::WarpNotBijective(_))
        ));
    }

    #[test]
    fn rendering_deterministic_and_inked() {
        let spec = sample_table_spec(8, Difficulty::Plain);
        let a = render_and_warp(&spec, None).unwrap();
        let b = render_and_warp(&spec, None).unwrap();
        assert_eq!(a.image.data, b.image.data);
        assert!(a.image.ink_fraction() > 0.01, "some ink present");
    }
}
