//! Axis-generic geometric primitives.
//!
//! Separators are triples of parallel curvilinear polylines (top boundary,
//! center line, bottom boundary). Intersecting row and column separator
//! sets yields a grid of basic cells; merge decisions regroup basic cells
//! into final (possibly spanning) cells.
//!
//! Conventions: image coordinates, y growing downward. For a column
//! separator "top" is the boundary with the smaller x (left) and "bottom"
//! the larger x (right); `eval` takes the axis-parallel coordinate and
//! returns the cross-axis one.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("image size must be positive, got {0}x{1}")]
    EmptyImage(usize, usize),
    #[error("separator set contains crossing center lines (indices {0} and {1}); prune first")]
    CrossingSeparators(usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
}

impl Point2D {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Row,
    Column,
}

impl Axis {
    /// Split a point into (parallel, cross) coordinates for this axis.
    pub fn split(&self, p: Point2D) -> (f64, f64) {
        match self {
            Axis::Row => (p.x, p.y),
            Axis::Column => (p.y, p.x),
        }
    }

    pub fn join(&self, parallel: f64, cross: f64) -> Point2D {
        match self {
            Axis::Row => Point2D::new(parallel, cross),
            Axis::Column => Point2D::new(cross, parallel),
        }
    }
}

/// The fixed parallel coordinates t_k = extent * k / (K+1), k = 1..=K.
pub fn fixed_coords(extent: f64, k: usize) -> Vec<f64> {
    (1..=k).map(|i| extent * i as f64 / (k as f64 + 1.0)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub points: Vec<Point2D>,
    pub axis: Axis,
}

impl Polyline {
    pub fn new(points: Vec<Point2D>, axis: Axis) -> Self {
        debug_assert!(!points.is_empty());
        Self { points, axis }
    }

    /// A straight line at constant cross-axis coordinate.
    pub fn straight(axis: Axis, cross: f64, extent: f64) -> Self {
        let points = vec![axis.join(0.0, cross), axis.join(extent, cross)];
        Self { points, axis }
    }

    /// Cross-axis coordinate at parallel coordinate `t`, linear between
    /// knots and linearly extrapolated from the end segments.
    pub fn eval(&self, t: f64) -> f64 {
        let pts = &self.points;
        if pts.len() == 1 {
            return self.axis.split(pts[0]).1;
        }
        let seg = |a: Point2D, b: Point2D, t: f64| -> f64 {
            let (ta, ca) = self.axis.split(a);
            let (tb, cb) = self.axis.split(b);
            if (tb - ta).abs() < 1e-12 {
                return 0.5 * (ca + cb);
            }
            ca + (cb - ca) * (t - ta) / (tb - ta)
        };
        let first_t = self.axis.split(pts[0]).0;
        if t <= first_t {
            return seg(pts[0], pts[1], t);
        }
        for w in pts.windows(2) {
            let (tb, _) = self.axis.split(w[1]);
            if t <= tb {
                return seg(w[0], w[1], t);
            }
        }
        seg(pts[pts.len() - 2], pts[pts.len() - 1], t)
    }

    /// Parallel coordinates of the knots.
    pub fn knots(&self) -> Vec<f64> {
        self.points.iter().map(|&p| self.axis.split(p).0).collect()
    }

    /// Resample at the given parallel coordinates.
    pub fn resample(&self, coords: &[f64]) -> Polyline {
        let points = coords.iter().map(|&t| self.axis.join(t, self.eval(t))).collect();
        Polyline { points, axis: self.axis }
    }

    /// Copy translated by `delta` along the cross axis.
    pub fn translated(&self, delta: f64) -> Polyline {
        let points = self
            .points
            .iter()
            .map(|&p| {
                let (t, c) = self.axis.split(p);
                self.axis.join(t, c + delta)
            })
            .collect();
        Polyline { points, axis: self.axis }
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.x.is_finite() && p.y.is_finite())
    }
}

/// Exact crossing test for two piecewise-linear functions of the same axis
/// over [0, extent]: evaluate the difference at every knot of either line
/// (plus the domain ends) and look for a strict sign change.
pub fn polylines_cross(a: &Polyline, b: &Polyline, extent: f64) -> bool {
    let mut ts: Vec<f64> = a
        .knots()
        .into_iter()
        .chain(b.knots())
        .chain([0.0, extent])
        .filter(|t| (0.0..=extent).contains(t))
        .collect();
    ts.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mut last_sign = 0i8;
    for &t in &ts {
        let d = a.eval(t) - b.eval(t);
        let sign = if d > 1e-9 {
            1
        } else if d < -1e-9 {
            -1
        } else {
            0
        };
        if sign != 0 {
            if last_sign != 0 && sign != last_sign {
                return true;
            }
            last_sign = sign;
        }
    }
    false
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Separator {
    pub center: Polyline,
    pub top: Polyline,
    pub bottom: Polyline,
    pub confidence: f64,
}

impl Separator {
    /// A zero-width straight separator (used for implicit image borders).
    pub fn border(axis: Axis, cross: f64, extent: f64) -> Self {
        let line = Polyline::straight(axis, cross, extent);
        Self { center: line.clone(), top: line.clone(), bottom: line, confidence: 1.0 }
    }

    /// Straight separator with a band of the given thickness.
    pub fn straight_band(axis: Axis, cross: f64, thickness: f64, extent: f64) -> Self {
        Self {
            center: Polyline::straight(axis, cross, extent),
            top: Polyline::straight(axis, cross - thickness / 2.0, extent),
            bottom: Polyline::straight(axis, cross + thickness / 2.0, extent),
            confidence: 1.0,
        }
    }

    /// Enforce top <= center <= bottom pointwise on shared knots.
    pub fn is_ordered(&self) -> bool {
        self.center.knots().iter().all(|&t| {
            let c = self.center.eval(t);
            self.top.eval(t) <= c + 1e-6 && c <= self.bottom.eval(t) + 1e-6
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeparatorSet {
    pub axis: Axis,
    pub separators: Vec<Separator>,
}

impl SeparatorSet {
    pub fn empty(axis: Axis) -> Self {
        Self { axis, separators: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.separators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.separators.is_empty()
    }
}

/// Sort raw separators by center position and greedily drop, in increasing
/// confidence order, any whose center line crosses a kept higher-confidence
/// one. The result is non-crossing.
pub fn sort_and_prune_separators(raw: Vec<Separator>, axis: Axis, extent: f64) -> SeparatorSet {
    let reference = extent / 2.0;
    let mut order: Vec<usize> = (0..raw.len()).collect();
    // descending confidence, original index breaks ties
    order.sort_by(|&a, &b| {
        raw[b].confidence.partial_cmp(&raw[a].confidence).unwrap().then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&j| !polylines_cross(&raw[i].center, &raw[j].center, extent)) {
            kept.push(i);
        }
    }
    let mut separators: Vec<Separator> = kept.into_iter().map(|i| raw[i].clone()).collect();
    separators.sort_by(|a, b| {
        a.center.eval(reference).partial_cmp(&b.center.eval(reference)).unwrap()
    });
    SeparatorSet { axis, separators }
}

/// Quadrilateral cell region, corners in tl, tr, br, bl order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quad(pub [Point2D; 4]);

impl Quad {
    pub fn corners(&self) -> &[Point2D; 4] {
        &self.0
    }

    /// Axis-aligned bounding box (x0, y0, x1, y1).
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        let xs = self.0.iter().map(|p| p.x);
        let ys = self.0.iter().map(|p| p.y);
        (
            xs.clone().fold(f64::INFINITY, f64::min),
            ys.clone().fold(f64::INFINITY, f64::min),
            xs.fold(f64::NEG_INFINITY, f64::max),
            ys.fold(f64::NEG_INFINITY, f64::max),
        )
    }

    pub fn center(&self) -> Point2D {
        let (x0, y0, x1, y1) = self.bbox();
        Point2D::new((x0 + x1) / 2.0, (y0 + y1) / 2.0)
    }

    pub fn from_bbox(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Quad([
            Point2D::new(x0, y0),
            Point2D::new(x1, y0),
            Point2D::new(x1, y1),
            Point2D::new(x0, y1),
        ])
    }
}

/// A final (possibly spanning) cell of the resolved grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinalCell {
    pub row: usize,
    pub col: usize,
    pub row_span: usize,
    pub col_span: usize,
    pub quad: Quad,
}

#[derive(Clone, Debug)]
pub struct TableGrid {
    pub n_rows: usize,
    pub n_cols: usize,
    /// Basic cell quads from separator center lines, row-major.
    pub cell_boxes: Vec<Quad>,
    /// Basic cell quads from facing boundary lines, row-major.
    pub shrunk_boxes: Vec<Quad>,
    /// Basic cell (i, j) -> final cell id.
    pub merge_map: Vec<usize>,
    pub final_cells: Vec<FinalCell>,
}

impl TableGrid {
    pub fn cell_box(&self, i: usize, j: usize) -> &Quad {
        &self.cell_boxes[i * self.n_cols + j]
    }

    pub fn shrunk_box(&self, i: usize, j: usize) -> &Quad {
        &self.shrunk_boxes[i * self.n_cols + j]
    }

    pub fn final_id(&self, i: usize, j: usize) -> usize {
        self.merge_map[i * self.n_cols + j]
    }
}

/// Intersection of a row-axis curve y = f(x) and a column-axis curve
/// x = g(y), by bisection on h(x) = x - g(f(x)). Both curves extrapolate
/// linearly, so a unique crossing exists for sane (non-steep) separators.
pub fn intersect_row_col(row: &Polyline, col: &Polyline, w: f64) -> Point2D {
    debug_assert_eq!(row.axis, Axis::Row);
    debug_assert_eq!(col.axis, Axis::Column);
    let h = |x: f64| x - col.eval(row.eval(x));
    let (mut lo, mut hi) = (0.0, w);
    let (hlo, hhi) = (h(lo), h(hi));
    if hlo >= 0.0 {
        return Point2D::new(lo, row.eval(lo));
    }
    if hhi <= 0.0 {
        return Point2D::new(hi, row.eval(hi));
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if h(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let x = 0.5 * (lo + hi);
    Point2D::new(x, row.eval(x))
}

fn check_non_crossing(set: &SeparatorSet, extent: f64) -> Result<(), GeometryError> {
    for i in 0..set.separators.len() {
        for j in i + 1..set.separators.len() {
            if polylines_cross(&set.separators[i].center, &set.separators[j].center, extent) {
                return Err(GeometryError::CrossingSeparators(i, j));
            }
        }
    }
    Ok(())
}

/// Build the basic-cell grid. Image borders act as implicit zero-width
/// separators, so the grid is (n_row_seps + 1) x (n_col_seps + 1). The
/// merge map starts as identity.
pub fn build_grid(
    row_seps: &SeparatorSet,
    col_seps: &SeparatorSet,
    image_size: (usize, usize),
) -> Result<TableGrid, GeometryError> {
    let (w, h) = image_size;
    if w == 0 || h == 0 {
        return Err(GeometryError::EmptyImage(w, h));
    }
    let (wf, hf) = (w as f64, h as f64);
    check_non_crossing(row_seps, wf)?;
    check_non_crossing(col_seps, hf)?;

    let n_rows = row_seps.len() + 1;
    let n_cols = col_seps.len() + 1;

    // Horizontal boundary curves for cell tops/bottoms: center and facing
    // boundary variants. Index i is the boundary above row i.
    let top_border = Separator::border(Axis::Row, 0.0, wf);
    let bottom_border = Separator::border(Axis::Row, hf, wf);
    let left_border = Separator::border(Axis::Column, 0.0, hf);
    let right_border = Separator::border(Axis::Column, wf, hf);

    let row_center = |i: usize| -> &Polyline {
        if i == 0 {
            &top_border.center
        } else if i == n_rows {
            &bottom_border.center
        } else {
            &row_seps.separators[i - 1].center
        }
    };
    // Facing boundary: above a row we take the bottom boundary of the
    // separator over it; below we take the top boundary of the one under.
    let row_facing_above = |i: usize| -> &Polyline {
        if i == 0 {
            &top_border.bottom
        } else {
            &row_seps.separators[i - 1].bottom
        }
    };
    let row_facing_below = |i: usize| -> &Polyline {
        if i == n_rows - 1 {
            &bottom_border.top
        } else {
            &row_seps.separators[i].top
        }
    };
    let col_center = |j: usize| -> &Polyline {
        if j == 0 {
            &left_border.center
        } else if j == n_cols {
            &right_border.center
        } else {
            &col_seps.separators[j - 1].center
        }
    };
    let col_facing_left = |j: usize| -> &Polyline {
        if j == 0 {
            &left_border.bottom
        } else {
            &col_seps.separators[j - 1].bottom
        }
    };
    let col_facing_right = |j: usize| -> &Polyline {
        if j == n_cols - 1 {
            &right_border.top
        } else {
            &col_seps.separators[j].top
        }
    };

    let mut cell_boxes = Vec::with_capacity(n_rows * n_cols);
    let mut shrunk_boxes = Vec::with_capacity(n_rows * n_cols);
    for i in 0..n_rows {
        for j in 0..n_cols {
            let tl = intersect_row_col(row_center(i), col_center(j), wf);
            let tr = intersect_row_col(row_center(i), col_center(j + 1), wf);
            let br = intersect_row_col(row_center(i + 1), col_center(j + 1), wf);
            let bl = intersect_row_col(row_center(i + 1), col_center(j), wf);
            cell_boxes.push(Quad([tl, tr, br, bl]));

            let stl = intersect_row_col(row_facing_above(i), col_facing_left(j), wf);
            let str_ = intersect_row_col(row_facing_above(i), col_facing_right(j), wf);
            let sbr = intersect_row_col(row_facing_below(i), col_facing_right(j), wf);
            let sbl = intersect_row_col(row_facing_below(i), col_facing_left(j), wf);
            shrunk_boxes.push(Quad([stl, str_, sbr, sbl]));
        }
    }

    let merge_map: Vec<usize> = (0..n_rows * n_cols).collect();
    let final_cells = final_cells_from_map(n_rows, n_cols, &merge_map, &cell_boxes);
    Ok(TableGrid { n_rows, n_cols, cell_boxes, shrunk_boxes, merge_map, final_cells })
}

/// Unordered pairs of 4-connected basic cells, each exactly once
/// (right and down neighbours).
pub fn adjacency_pairs(grid: &TableGrid) -> Vec<((usize, usize), (usize, usize))> {
    let mut pairs = Vec::new();
    for i in 0..grid.n_rows {
        for j in 0..grid.n_cols {
            if j + 1 < grid.n_cols {
                pairs.push(((i, j), (i, j + 1)));
            }
            if i + 1 < grid.n_rows {
                pairs.push(((i, j), (i + 1, j)));
            }
        }
    }
    pairs
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }
    fn find(&mut self, x: usize) -> usize {
        if self.parent[x] != x {
            let root = self.find(self.parent[x]);
            self.parent[x] = root;
        }
        self.parent[x]
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Apply merge decisions on top of the grid's current merge state.
/// Positive decisions union basic cells; components are then repaired to
/// their index-space bounding rectangles (repeated to a fixed point, since
/// a repair can swallow cells of another component).
pub fn resolve_merges(
    grid: &TableGrid,
    merge_decisions: &[(((usize, usize), (usize, usize)), bool)],
) -> TableGrid {
    let (n, m) = (grid.n_rows, grid.n_cols);
    let idx = |i: usize, j: usize| i * m + j;
    let mut uf = UnionFind::new(n * m);
    // seed with the existing merge state
    for i in 0..n {
        for j in 0..m {
            let fid = grid.merge_map[idx(i, j)];
            let anchor = grid.merge_map.iter().position(|&f| f == fid).unwrap();
            uf.union(anchor, idx(i, j));
        }
    }
    for &((a, b), positive) in merge_decisions {
        if positive {
            uf.union(idx(a.0, a.1), idx(b.0, b.1));
        }
    }
    // rectangle closure
    loop {
        let mut changed = false;
        let mut bounds: std::collections::HashMap<usize, (usize, usize, usize, usize)> =
            std::collections::HashMap::new();
        for i in 0..n {
            for j in 0..m {
                let r = uf.find(idx(i, j));
                let e = bounds.entry(r).or_insert((i, j, i, j));
                e.0 = e.0.min(i);
                e.1 = e.1.min(j);
                e.2 = e.2.max(i);
                e.3 = e.3.max(j);
            }
        }
        for (&root, &(r0, c0, r1, c1)) in &bounds {
            for i in r0..=r1 {
                for j in c0..=c1 {
                    if uf.find(idx(i, j)) != uf.find(root) {
                        uf.union(root, idx(i, j));
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut merge_map = vec![0usize; n * m];
    let mut next_id = 0usize;
    let mut root_to_id: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
    for i in 0..n {
        for j in 0..m {
            let r = uf.find(idx(i, j));
            let id = *root_to_id.entry(r).or_insert_with(|| {
                let id = next_id;
                next_id += 1;
                id
            });
            merge_map[idx(i, j)] = id;
        }
    }
    let final_cells = final_cells_from_map(n, m, &merge_map, &grid.cell_boxes);
    TableGrid {
        n_rows: n,
        n_cols: m,
        cell_boxes: grid.cell_boxes.clone(),
        shrunk_boxes: grid.shrunk_boxes.clone(),
        merge_map,
        final_cells,
    }
}

fn final_cells_from_map(
    n: usize,
    m: usize,
    merge_map: &[usize],
    cell_boxes: &[Quad],
) -> Vec<FinalCell> {
    let n_final = merge_map.iter().max().map_or(0, |&x| x + 1);
    let mut bounds = vec![(usize::MAX, usize::MAX, 0usize, 0usize); n_final];
    for i in 0..n {
        for j in 0..m {
            let id = merge_map[i * m + j];
            let b = &mut bounds[id];
            b.0 = b.0.min(i);
            b.1 = b.1.min(j);
            b.2 = b.2.max(i);
            b.3 = b.3.max(j);
        }
    }
    bounds
        .into_iter()
        .map(|(r0, c0, r1, c1)| {
            let tl = cell_boxes[r0 * m + c0].corners()[0];
            let tr = cell_boxes[r0 * m + c1].corners()[1];
            let br = cell_boxes[r1 * m + c1].corners()[2];
            let bl = cell_boxes[r1 * m + c0].corners()[3];
            FinalCell {
                row: r0,
                col: c0,
                row_span: r1 - r0 + 1,
                col_span: c1 - c0 + 1,
                quad: Quad([tl, tr, br, bl]),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sep(axis: Axis, cross: f64, thickness: f64, extent: f64) -> Separator {
        Separator::straight_band(axis, cross, thickness, extent)
    }

    #[test]
    fn grid_2x2_with_shrunk_boxes() {
        let rows = SeparatorSet { axis: Axis::Row, separators: vec![sep(Axis::Row, 50.0, 4.0, 100.0)] };
        let cols =
            SeparatorSet { axis: Axis::Column, separators: vec![sep(Axis::Column, 50.0, 4.0, 100.0)] };
        let grid = build_grid(&rows, &cols, (100, 100)).unwrap();
        assert_eq!((grid.n_rows, grid.n_cols), (2, 2));
        let (x0, y0, x1, y1) = grid.shrunk_box(0, 0).bbox();
        assert!((x0 - 0.0).abs() < 1e-9 && (y0 - 0.0).abs() < 1e-9);
        assert!((x1 - 48.0).abs() < 1e-9, "x1 {x1}");
        assert!((y1 - 48.0).abs() < 1e-9, "y1 {y1}");
        // center-line cell box reaches the separator center
        let (_, _, cx1, cy1) = grid.cell_box(0, 0).bbox();
        assert!((cx1 - 50.0).abs() < 1e-9 && (cy1 - 50.0).abs() < 1e-9);
    }

    #[test]
    fn grid_border_only() {
        let grid = build_grid(
            &SeparatorSet::empty(Axis::Row),
            &SeparatorSet::empty(Axis::Column),
            (64, 32),
        )
        .unwrap();
        assert_eq!((grid.n_rows, grid.n_cols), (1, 1));
        let (x0, y0, x1, y1) = grid.cell_box(0, 0).bbox();
        assert_eq!((x0, y0, x1, y1), (0.0, 0.0, 64.0, 32.0));
        assert_eq!(adjacency_pairs(&grid).len(), 0);
    }

    #[test]
    fn grid_empty_image_errors() {
        let r = build_grid(
            &SeparatorSet::empty(Axis::Row),
            &SeparatorSet::empty(Axis::Column),
            (0, 32),
        );
        assert!(r.is_err());
    }

    #[test]
    fn grid_crossing_errors() {
        let mut s1 = sep(Axis::Row, 40.0, 0.0, 100.0);
        s1.center.points[1].y = 80.0; // slanted
        let s2 = sep(Axis::Row, 60.0, 0.0, 100.0);
        let rows = SeparatorSet { axis: Axis::Row, separators: vec![s1, s2] };
        let r = build_grid(&rows, &SeparatorSet::empty(Axis::Column), (100, 100));
        assert!(matches!(r, Err(GeometryError::CrossingSeparators(_, _))));
    }

    #[test]
    fn adjacency_counts() {
        let rows = SeparatorSet {
            axis: Axis::Row,
            separators: vec![sep(Axis::Row, 30.0, 2.0, 100.0), sep(Axis::Row, 60.0, 2.0, 100.0)],
        };
        let cols = SeparatorSet {
            axis: Axis::Column,
            separators: vec![
                sep(Axis::Column, 25.0, 2.0, 100.0),
                sep(Axis::Column, 50.0, 2.0, 100.0),
                sep(Axis::Column, 75.0, 2.0, 100.0),
            ],
        };
        let grid = build_grid(&rows, &cols, (100, 100)).unwrap();
        assert_eq!((grid.n_rows, grid.n_cols), (3, 4));
        // 3*3 horizontal + 2*4 vertical
        assert_eq!(adjacency_pairs(&grid).len(), 17);

        let g22 = build_grid(
            &SeparatorSet { axis: Axis::Row, separators: vec![sep(Axis::Row, 50.0, 2.0, 100.0)] },
            &SeparatorSet {
                axis: Axis::Column,
                separators: vec![sep(Axis::Column, 50.0, 2.0, 100.0)],
            },
            (100, 100),
        )
        .unwrap();
        assert_eq!(adjacency_pairs(&g22).len(), 4);
    }

    #[test]
    fn merge_two_cells_in_row() {
        let grid = build_grid(
            &SeparatorSet { axis: Axis::Row, separators: vec![sep(Axis::Row, 50.0, 2.0, 100.0)] },
            &SeparatorSet {
                axis: Axis::Column,
                separators: vec![sep(Axis::Column, 50.0, 2.0, 100.0)],
            },
            (100, 100),
        )
        .unwrap();
        let merged = resolve_merges(&grid, &[((((0, 0)), ((0, 1))), true)]);
        assert_eq!(merged.final_cells.len(), 3);
        let spanning = merged
            .final_cells
            .iter()
            .find(|c| c.col_span == 2)
            .expect("one 1x2 spanning cell");
        assert_eq!((spanning.row, spanning.col, spanning.row_span), (0, 0, 1));
        // identity decisions change nothing
        let noop = resolve_merges(&grid, &[]);
        assert_eq!(noop.final_cells.len(), 4);
        assert_eq!(noop.merge_map, grid.merge_map);
    }

    #[test]
    fn l_shaped_component_repairs_to_rectangle() {
        let grid = build_grid(
            &SeparatorSet { axis: Axis::Row, separators: vec![sep(Axis::Row, 50.0, 2.0, 100.0)] },
            &SeparatorSet {
                axis: Axis::Column,
                separators: vec![sep(Axis::Column, 50.0, 2.0, 100.0)],
            },
            (100, 100),
        )
        .unwrap();
        // positive decisions forming an L: (0,0)-(0,1) and (0,0)-(1,0)
        let merged = resolve_merges(
            &grid,
            &[((((0, 0)), ((0, 1))), true), ((((0, 0)), ((1, 0))), true)],
        );
        assert_eq!(merged.final_cells.len(), 1, "repaired to the full 2x2 rectangle");
        assert_eq!(merged.final_cells[0].row_span, 2);
        assert_eq!(merged.final_cells[0].col_span, 2);
    }

    #[test]
    fn resolve_merges_idempotent() {
        let grid = build_grid(
            &SeparatorSet {
                axis: Axis::Row,
                separators: vec![sep(Axis::Row, 30.0, 2.0, 100.0), sep(Axis::Row, 60.0, 2.0, 100.0)],
            },
            &SeparatorSet {
                axis: Axis::Column,
                separators: vec![sep(Axis::Column, 50.0, 2.0, 100.0)],
            },
            (100, 100),
        )
        .unwrap();
        let once = resolve_merges(&grid, &[((((1, 0)), ((1, 1))), true)]);
        let twice = resolve_merges(&once, &[]);
        assert_eq!(once.merge_map, twice.merge_map);
        assert_eq!(once.final_cells.len(), twice.final_cells.len());
    }

    #[test]
    fn prune_keeps_higher_confidence_on_crossing()
    {
        let extent = 100.0;
        let mut a = sep(Axis::Row, 40.0, 2.0, extent);
        a.confidence = 0.9;
        a.center.points[1].y = 70.0;
        let mut b = sep(Axis::Row, 60.0, 2.0, extent);
        b.confidence = 0.6;
        let pruned = sort_and_prune_separators(vec![a, b], Axis::Row, extent);
        assert_eq!(pruned.len(), 1);
        assert!((pruned.separators[0].confidence - 0.9).abs() < 1e-12);

        // parallel separators are both kept and sorted by position
        let p1 = sep(Axis::Row, 70.0, 2.0, extent);
        let p2 = sep(Axis::Row, 20.0, 2.0, extent);
        let both = sort_and_prune_separators(vec![p1, p2], Axis::Row, extent);
        assert_eq!(both.len(), 2);
        assert!(both.separators[0].center.eval(50.0) < both.separators[1].center.eval(50.0));
    }

    #[test]
    fn fixed_coords_midpoint_is_center() {
        let xs = fixed_coords(160.0, 15);
        assert_eq!(xs.len(), 15);
        assert!((xs[7] - 80.0).abs() < 1e-12); // k=8 of 15 sits at W/2
    }
}
