//! Bipartite matching between detected reference points and ground-truth
//! separators: the prior-enhanced band-constrained strategy and the
//! original set-prediction costing as a config option.

use serde::{Deserialize, Serialize};

pub const INF_COST: f64 = 1e15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchingMode {
    PriorEnhanced,
    OriginalDetr,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    /// (prediction index, ground-truth index)
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_predictions: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

impl MatchResult {
    pub fn gt_of(&self, pred: usize) -> Option<usize> {
        self.pairs.iter().find(|(p, _)| *p == pred).map(|(_, g)| *g)
    }
}

/// Minimum-cost assignment (Jonker-Volgenant style shortest augmenting
/// paths). Returns, per row, the assigned column. Rectangular inputs are
/// fine; at most min(rows, cols) rows get a column.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<Option<usize>> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    if m == 0 {
        return vec![None; n];
    }
    if n > m {
        // transpose and invert the assignment
        let t: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| cost[i][j]).collect()).collect();
        let col_assign = hungarian(&t);
        let mut out = vec![None; n];
        for (j, a) in col_assign.iter().enumerate() {
            if let Some(i) = a {
                out[*i] = Some(j);
            }
        }
        return out;
    }
    // potentials over rows (u) and columns (v), 1-based with sentinel 0
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut p = vec![0usize; m + 1]; // p[j] = row matched to column j
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = Some(j - 1);
        }
    }
    out
}

/// Ground-truth separator band at the reference coordinate.
#[derive(Clone, Copy, Debug)]
pub struct GtBand {
    pub center: f64,
    pub top: f64,
    pub bottom: f64,
}

/// Prior-enhanced matching: the cost of (reference point, GT separator) is
/// their center distance when the point lies inside the GT band (closed
/// interval), INF otherwise. INF pairs are removed after assignment.
/// Equidistant ties resolve to the lower GT index.
pub fn prior_enhanced_match(reference_points: &[f64], gts: &[GtBand]) -> MatchResult {
    let cost: Vec<Vec<f64>> = reference_points
        .iter()
        .map(|&r| {
            gts.iter()
                .enumerate()
                .map(|(j, g)| {
                    if r >= g.top && r <= g.bottom {
                        (r - g.center).abs() + j as f64 * 1e-12
                    } else {
                        INF_COST
                    }
                })
                .collect()
        })
        .collect();
    assemble(hungarian(&cost), &cost, reference_points.len(), gts.len(), true)
}

/// Original set-prediction costing: classification term plus scaled L1
/// distance, every pairing admissible.
pub fn original_detr_match(
    reference_points: &[f64],
    scores: &[f64],
    gts: &[GtBand],
    extent: f64,
) -> MatchResult {
    let cost: Vec<Vec<f64>> = reference_points
        .iter()
        .zip(scores)
        .map(|(&r, &s)| {
            gts.iter()
                .map(|g| (1.0 - s) + 5.0 * (r - g.center).abs() / extent.max(1.0))
                .collect()
        })
        .collect();
    assemble(hungarian(&cost), &cost, reference_points.len(), gts.len(), false)
}

fn assemble(
    assign: Vec<Option<usize>>,
    cost: &[Vec<f64>],
    n_pred: usize,
    n_gt: usize,
    drop_inf: bool,
) -> MatchResult {
    let mut pairs = Vec::new();
    for (i, a) in assign.iter().enumerate() {
        if let Some(j) = a {
            if !drop_inf || cost[i][*j] < INF_COST / 2.0 {
                pairs.push((i, *j));
            }
        }
    }
    let matched_p: std::collections::HashSet<usize> = pairs.iter().map(|(p, _)| *p).collect();
    let matched_g: std::collections::HashSet<usize> = pairs.iter().map(|(_, g)| *g).collect();
    MatchResult {
        pairs,
        unmatched_predictions: (0..n_pred).filter(|p| !matched_p.contains(p)).collect(),
        unmatched_gts: (0..n_gt).filter(|g| !matched_g.contains(g)).collect(),
    }
}
