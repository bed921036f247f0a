//! Cell adjacency relationship metric and text-to-cell assignment.
//!
//! Relations pair each non-empty cell with its nearest non-empty neighbour
//! to the right and below (blank cells are crossed). A predicted relation
//! counts when both endpoints map to ground-truth cells (content equality
//! or content-hull IoU, depending on mode) and the mapped relation exists.

use crate::geometry::{Point2D, Quad};
use std::collections::{BTreeSet, HashMap, HashSet};

// ---------------------------------------------------------------------------
// convex polygon helpers
// ---------------------------------------------------------------------------

pub fn polygon_area(p: &[Point2D]) -> f64 {
    if p.len() < 3 {
        return 0.0;
    }
    let mut a = 0.0;
    for i in 0..p.len() {
        let q = p[(i + 1) % p.len()];
        a += p[i].x * q.y - q.x * p[i].y;
    }
    a.abs() / 2.0
}

/// Sutherland-Hodgman clip of a convex polygon by a convex polygon.
pub fn convex_clip(subject: &[Point2D], clip: &[Point2D]) -> Vec<Point2D> {
    let mut output: Vec<Point2D> = subject.to_vec();
    let orient = {
        // signed area sign of the clip polygon decides the inside test
        let mut a = 0.0;
        for i in 0..clip.len() {
            let q = clip[(i + 1) % clip.len()];
            a += clip[i].x * q.y - q.x * clip[i].y;
        }
        if a >= 0.0 {
            1.0
        } else {
            -1.0
        }
    };
    for i in 0..clip.len() {
        if output.is_empty() {
            return output;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let inside = |p: Point2D| -> bool {
            orient * ((b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)) >= -1e-12
        };
        let cross = |p: Point2D, q: Point2D| -> Point2D {
            let d1 = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
            let d2 = (b.x - a.x) * (q.y - a.y) - (b.y - a.y) * (q.x - a.x);
            let t = d1 / (d1 - d2);
            Point2D::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y))
        };
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let p = input[j];
            let q = input[(j + 1) % input.len()];
            match (inside(p), inside(q)) {
                (true, true) => output.push(q),
                (true, false) => output.push(cross(p, q)),
                (false, true) => {
                    output.push(cross(p, q));
                    output.push(q);
                }
                (false, false) => {}
            }
        }
    }
    output
}

pub fn intersection_area(a: &[Point2D], b: &[Point2D]) -> f64 {
    polygon_area(&convex_clip(a, b))
}

pub fn polygon_iou(a: &[Point2D], b: &[Point2D]) -> f64 {
    let inter = intersection_area(a, b);
    let union = polygon_area(a) + polygon_area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Convex hull (Andrew monotone chain) of a point cloud.
pub fn convex_hull(points: &[Point2D]) -> Vec<Point2D> {
    let mut pts: Vec<Point2D> = points.to_vec();
    pts.sort_by(|a, b| a.x.partial_cmp(&b.x).unwrap().then(a.y.partial_cmp(&b.y).unwrap()));
    pts.dedup_by(|a, b| (a.x - b.x).abs() < 1e-12 && (a.y - b.y).abs() < 1e-12);
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: Point2D, a: Point2D, b: Point2D| -> f64 {
        (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
    };
    let mut lower: Vec<Point2D> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Point2D> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

// ---------------------------------------------------------------------------
// text assignment
// ---------------------------------------------------------------------------

/// Assign each text box to at most one cell: overlap fraction
/// area(text ∩ cell) / area(text) must exceed the limitation threshold
/// (strictly), highest fraction wins.
pub fn assign_text_to_cells(
    text_boxes: &[Quad],
    cell_boxes: &[Quad],
    limitation_threshold: f64,
) -> Vec<Option<usize>> {
    text_boxes
        .iter()
        .map(|t| {
            let tp = t.corners().to_vec();
            let ta = polygon_area(&tp);
            if ta <= 0.0 {
                return None;
            }
            let mut best: Option<(usize, f64)> = None;
            for (ci, c) in cell_boxes.iter().enumerate() {
                let frac = intersection_area(&tp, &c.corners().to_vec()) / ta;
                if frac > limitation_threshold {
                    let better = match best {
                        None => true,
                        Some((_, bf)) => frac > bf,
                    };
                    if better {
                        best = Some((ci, frac));
                    }
                }
            }
            best.map(|(ci, _)| ci)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// adjacency relations
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct EvalCell {
    pub row: usize,
    pub col: usize,
    pub row_span: usize,
    pub col_span: usize,
    /// Geometric cell region (used for text assignment).
    pub quad: Quad,
    /// Indices of assigned text lines.
    pub content: BTreeSet<usize>,
}

impl EvalCell {
    pub fn non_empty(&self) -> bool {
        !self.content.is_empty()
    }
}

/// Cells plus the grid extents they tile.
#[derive(Clone, Debug)]
pub struct EvalTable {
    pub n_rows: usize,
    pub n_cols: usize,
    pub cells: Vec<EvalCell>,
}

impl EvalTable {
    pub fn from_grid(grid: &crate::geometry::TableGrid, text_boxes: &[Quad], limitation: f64) -> Self {
        let quads: Vec<Quad> = grid.final_cells.iter().map(|c| c.quad).collect();
        let assignment = assign_text_to_cells(text_boxes, &quads, limitation);
        let mut cells: Vec<EvalCell> = grid
            .final_cells
            .iter()
            .map(|c| EvalCell {
                row: c.row,
                col: c.col,
                row_span: c.row_span,
                col_span: c.col_span,
                quad: c.quad,
                content: BTreeSet::new(),
            })
            .collect();
        for (ti, a) in assignment.iter().enumerate() {
            if let Some(ci) = a {
                cells[*ci].content.insert(ti);
            }
        }
        Self { n_rows: grid.n_rows, n_cols: grid.n_cols, cells }
    }

    /// Ground-truth variant: text ownership is already annotated.
    pub fn from_grid_with_content(
        grid: &crate::geometry::TableGrid,
        owned: &[(usize, usize)], // (text id, final cell id)
    ) -> Self {
        let mut cells: Vec<EvalCell> = grid
            .final_cells
            .iter()
            .map(|c| EvalCell {
                row: c.row,
                col: c.col,
                row_span: c.row_span,
                col_span: c.col_span,
                quad: c.quad,
                content: BTreeSet::new(),
            })
            .collect();
        for &(ti, ci) in owned {
            cells[ci].content.insert(ti);
        }
        Self { n_rows: grid.n_rows, n_cols: grid.n_cols, cells }
    }

    fn occupancy(&self) -> Vec<usize> {
        let mut occ = vec![usize::MAX; self.n_rows * self.n_cols];
        for (id, c) in self.cells.iter().enumerate() {
            for i in c.row..c.row + c.row_span {
                for j in c.col..c.col + c.col_span {
                    occ[i * self.n_cols + j] = id;
                }
            }
        }
        occ
    }

    /// Direction-labeled nearest-non-empty-neighbour relations
    /// (0 = horizontal, 1 = vertical), emitted right/down so each
    /// unordered pair appears once per direction.
    pub fn relations(&self) -> HashSet<(usize, usize, u8)> {
        let occ = self.occupancy();
        let mut rels = HashSet::new();
        for (id, c) in self.cells.iter().enumerate() {
            if !c.non_empty() {
                continue;
            }
            for r in c.row..c.row + c.row_span {
                let mut j = c.col + c.col_span;
                while j < self.n_cols {
                    let o = occ[r * self.n_cols + j];
                    if o == usize::MAX {
                        j += 1;
                        continue;
                    }
                    if self.cells[o].non_empty() {
                        rels.insert((id, o, 0u8));
                        break;
                    }
                    j = self.cells[o].col + self.cells[o].col_span;
                }
            }
            for cc in c.col..c.col + c.col_span {
                let mut i = c.row + c.row_span;
                while i < self.n_rows {
                    let o = occ[i * self.n_cols + cc];
                    if o == usize::MAX {
                        i += 1;
                        continue;
                    }
                    if self.cells[o].non_empty() {
                        rels.insert((id, o, 1u8));
                        break;
                    }
                    i = self.cells[o].row + self.cells[o].row_span;
                }
            }
        }
        rels
    }

    /// Content hull polygon per non-empty cell (cTDaR represents a cell by
    /// the convex hull of its assigned text).
    pub fn content_hulls(&self, text_boxes: &[Quad]) -> Vec<Option<Vec<Point2D>>> {
        self.cells
            .iter()
            .map(|c| {
                if c.content.is_empty() {
                    return None;
                }
                let pts: Vec<Point2D> = c
                    .content
                    .iter()
                    .flat_map(|&ti| text_boxes[ti].corners().to_vec())
                    .collect();
                Some(convex_hull(&pts))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchMode {
    /// Exact content-set equality (SciTSR-style evaluation).
    Content,
    /// Content-hull IoU at a threshold (cTDaR-style evaluation).
    Iou,
}

#[derive(Clone, Copy, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub correct: usize,
    pub predicted: usize,
    pub expected: usize,
}

fn prf(correct: usize, predicted: usize, expected: usize) -> PrecisionRecall {
    let precision = if predicted == 0 { 0.0 } else { correct as f64 / predicted as f64 };
    let recall = if expected == 0 {
        if predicted == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        correct as f64 / expected as f64
    };
    let f1 = if precision + recall <= 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    PrecisionRecall { precision, recall, f1, correct, predicted, expected }
}

/// Map predicted cells to GT cells, then score relation sets.
pub fn cell_adjacency_metric(
    pred: &EvalTable,
    gt: &EvalTable,
    mode: MatchMode,
    iou_threshold: f64,
    pred_texts: &[Quad],
    gt_texts: &[Quad],
) -> PrecisionRecall {
    let mut mapping: HashMap<usize, usize> = HashMap::new();
    match mode {
        MatchMode::Content => {
            let mut by_content: HashMap<&BTreeSet<usize>, usize> = HashMap::new();
            for (gi, g) in gt.cells.iter().enumerate() {
                if g.non_empty() {
                    by_content.insert(&g.content, gi);
                }
            }
            for (pi, p) in pred.cells.iter().enumerate() {
                if p.non_empty() {
                    if let Some(&gi) = by_content.get(&p.content) {
                        mapping.insert(pi, gi);
                    }
                }
            }
        }
        MatchMode::Iou => {
            let ph = pred.content_hulls(pred_texts);
            let gh = gt.content_hulls(gt_texts);
            let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
            for (pi, p) in ph.iter().enumerate() {
                let Some(p) = p else { continue };
                for (gi, g) in gh.iter().enumerate() {
                    let Some(g) = g else { continue };
                    let iou = polygon_iou(p, g);
                    if iou >= iou_threshold {
                        candidates.push((iou, pi, gi));
                    }
                }
            }
            candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let mut used_gt = HashSet::new();
            for (_, pi, gi) in candidates {
                if !mapping.contains_key(&pi) && !used_gt.contains(&gi) {
                    mapping.insert(pi, gi);
                    used_gt.insert(gi);
                }
            }
        }
    }

    let pred_rels = pred.relations();
    let gt_rels = gt.relations();
    let correct = pred_rels
        .iter()
        .filter(|(a, b, d)| {
            matches!(
                (mapping.get(a), mapping.get(b)),
                (Some(ga), Some(gb)) if gt_rels.contains(&(*ga, *gb, *d))
            )
        })
        .count();
    prf(correct, pred_rels.len(), gt_rels.len())
}
