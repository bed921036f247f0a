//! Training loss formulas as pure functions.
//!
//! The tape-based training graph mirrors these exactly (asserted by a
//! consistency test); these are the reference definitions used by the
//! oracle tests and the loss log.

use serde::{Deserialize, Serialize};

use crate::matching::MatchingMode;

pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossConfig {
    /// Focal exponents of the reference-point loss.
    pub alpha: f64,
    pub beta: f64,
    /// Weight of the reference-point terms in the total loss.
    pub lambda: f64,
    pub matching: MatchingMode,
    /// Binary focal loss parameters for line classification.
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    /// Multipliers inside the per-layer line loss.
    pub cls_weight: f64,
    pub reg_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 4.0,
            lambda: 0.2,
            matching: MatchingMode::PriorEnhanced,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            cls_weight: 1.0,
            reg_weight: 5.0,
        }
    }
}

/// Gaussian score target, truncated at the separator band and adaptive to
/// its thickness: sigma_k = sqrt(w_k^2 / (2 ln 10)), so the value at
/// distance w_k from the center is exactly 0.1. Centers snap to the
/// nearest pixel so one pixel carries the exact positive target 1.0.
/// Overlapping bands combine by pointwise maximum.
pub fn gaussian_targets(gt_bands: &[(f64, f64)], len: usize) -> Vec<f64> {
    let mut target = vec![0.0f64; len];
    for &(center, thickness) in gt_bands {
        let w = thickness.max(1.0);
        let yk = center.round();
        let sigma_sq = w * w / (2.0 * 10f64.ln());
        for (i, t) in target.iter_mut().enumerate() {
            let d = i as f64 - yk;
            if d.abs() < w / 2.0 {
                let v = (-d * d / (2.0 * sigma_sq)).exp();
                if v > *t {
                    *t = v;
                }
            }
        }
    }
    target
}

/// Penalty-reduced focal loss over the score map (the CenterNet variant):
/// for target pixels (p* = 1) the term is (1-p)^alpha log p, elsewhere
/// (1-p*)^beta p^alpha log(1-p); summed, negated, divided by the number of
/// separators. Zero separators give loss 0.
pub fn reference_point_loss(p: &[f64], p_star: &[f64], n_separators: usize, alpha: f64, beta: f64) -> f64 {
    assert_eq!(p.len(), p_star.len());
    if n_separators == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for (&pi, &ti) in p.iter().zip(p_star) {
        let pc = pi.clamp(PROB_EPS, 1.0 - PROB_EPS);
        if ti >= 1.0 {
            acc += (1.0 - pc).powf(alpha) * pc.ln();
        } else {
            acc += (1.0 - ti).powf(beta) * pc.powf(alpha) * (1.0 - pc).ln();
        }
    }
    -acc / n_separators as f64
}

/// Binary focal term on a probability.
pub fn focal_binary(p: f64, positive: bool, gamma: f64, alpha: f64) -> f64 {
    let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if positive {
        -alpha * (1.0 - pc).powf(gamma) * pc.ln()
    } else {
        -(1.0 - alpha) * pc.powf(gamma) * (1.0 - pc).ln()
    }
}

/// One decoder layer's predictions for line-loss purposes.
#[derive(Clone, Debug)]
pub struct LayerLineData {
    /// Per separator, per point: query classification score in (0,1).
    pub query_scores: Vec<Vec<f64>>,
    /// Per separator, per point: predicted (center, top, bottom) in
    /// normalized cross-axis coordinates.
    pub pred_y: Vec<Vec<[f64; 3]>>,
    /// Per matched separator index: ground truth (center, top, bottom) at
    /// the same points, normalized. Parallel to `matched`.
    pub gt_y: Vec<Vec<[f64; 3]>>,
    /// (separator index, slot in gt_y) pairs.
    pub matched: Vec<(usize, usize)>,
}

/// Per-layer line loss: focal classification over every query (all queries
/// of a matched separator are positive) plus, for matched separators, the
/// mean absolute error over the 3*N_p regressed values scaled by
/// `reg_weight`. Layers are summed by the caller.
pub fn line_regression_loss_layer(data: &LayerLineData, cfg: &LossConfig) -> f64 {
    let matched_seps: std::collections::HashSet<usize> =
        data.matched.iter().map(|(s, _)| *s).collect();
    let mut cls = 0.0;
    for (s, scores) in data.query_scores.iter().enumerate() {
        let positive = matched_seps.contains(&s);
        for &p in scores {
            cls += focal_binary(p, positive, cfg.focal_gamma, cfg.focal_alpha);
        }
    }
    let mut reg = 0.0;
    for &(s, slot) in &data.matched {
        let preds = &data.pred_y[s];
        let gts = &data.gt_y[slot];
        debug_assert_eq!(preds.len(), gts.len());
        let mut abs = 0.0;
        for (p3, g3) in preds.iter().zip(gts) {
            for c in 0..3 {
                abs += (p3[c] - g3[c]).abs();
            }
        }
        reg += abs / (3.0 * preds.len() as f64);
    }
    cfg.cls_weight * cls + cfg.reg_weight * reg
}

/// Sum over decoder layers.
pub fn line_regression_loss(layers: &[LayerLineData], cfg: &LossConfig) -> f64 {
    layers.iter().map(|l| line_regression_loss_layer(l, cfg)).sum()
}

/// Mean binary cross-entropy over sampled cell pairs; empty set gives 0.
pub fn merge_loss(pair_scores: &[f64], pair_labels: &[bool]) -> f64 {
    assert_eq!(pair_scores.len(), pair_labels.len());
    if pair_scores.is_empty() {
        return 0.0;
    }
    let mut acc = 0.0;
    for (&p, &y) in pair_scores.iter().zip(pair_labels) {
        let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        acc += if y { -pc.ln() } else { -(1.0 - pc).ln() };
    }
    acc / pair_scores.len() as f64
}

/// Training stage: which loss components are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    ReferenceOnly = 1,
    WithLines = 2,
    Full = 3,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LossComponents {
    pub ref_row: f64,
    pub ref_col: f64,
    pub line_row: f64,
    pub line_col: f64,
    pub merge: f64,
}

/// lambda * (ref_row + ref_col) + line_row + line_col + merge, gated by
/// the active stage.
pub fn total_loss(c: &LossComponents, lambda: f64, stage: Stage) -> f64 {
    let mut total = lambda * (c.ref_row + c.ref_col);
    if stage >= Stage::WithLines {
        total += c.line_row + c.line_col;
    }
    if stage >= Stage::Full {
        total += c.merge;
    }
    total
}

/// OHEM: the `cap` highest-loss positives and `cap` highest-loss negatives
/// (fewer when unavailable). Ties break toward the lower index.
pub fn ohem_sample_pairs(pair_losses: &[f64], labels: &[bool], cap: usize) -> Vec<usize> {
    assert_eq!(pair_losses.len(), labels.len());
    let take = |want_positive: bool| -> Vec<usize> {
        let mut idx: Vec<usize> =
            (0..labels.len()).filter(|&i| labels[i] == want_positive).collect();
        idx.sort_by(|&a, &b| {
            pair_losses[b].partial_cmp(&pair_losses[a]).unwrap().then(a.cmp(&b))
        });
        idx.truncate(cap);
        idx
    };
    let mut out = take(true);
    out.extend(take(false));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_target_band_values() {
        // separator centered at pixel 50, thickness 8
        let t = gaussian_targets(&[(50.0, 8.0)], 100);
        assert!((t[50] - 1.0).abs() < 1e-12);
        assert_eq!(t[60], 0.0, "outside the band");
        // at the window edge (distance w/2) the value is 10^(-1/4)
        let edge = (-(4.0f64 * 4.0) / (2.0 * 8.0 * 8.0 / (2.0 * 10f64.ln()))).exp();
        assert!((edge - 10f64.powf(-0.25)).abs() < 1e-12);
        assert!((t[53] - (-(9.0) / (2.0 * 64.0 / (2.0 * 10f64.ln()))).exp()).abs() < 1e-12);
    }

    #[test]
    fn gaussian_value_at_thickness_distance_is_point_one() {
        // evaluate the closed form itself at distance w_k (outside the
        // truncation window, hence tested on the formula)
        let w: f64 = 6.0;
        let sigma_sq = w * w / (2.0 * 10f64.ln());
        let v = (-(w * w) / (2.0 * sigma_sq)).exp();
        assert!((v - 0.1).abs() < 1e-9);
    }

    #[test]
    fn overlapping_bands_take_max() {
        let a = gaussian_targets(&[(30.0, 10.0)], 64);
        let b = gaussian_targets(&[(34.0, 10.0)], 64);
        let both = gaussian_targets(&[(30.0, 10.0), (34.0, 10.0)], 64);
        for i in 0..64 {
            assert!((both[i] - a[i].max(b[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn reference_loss_examples() {
        // p = p* = 1 contributes zero
        let l = reference_point_loss(&[1.0 - 1e-12], &[1.0], 1, 2.0, 4.0);
        assert!(l.abs() < 1e-9, "{l}");
        // p* = 1, p = 0.5: (1-p)^2 * ln p = 0.25 * ln 0.5
        let l2 = reference_point_loss(&[0.5], &[1.0], 1, 2.0, 4.0);
        assert!((l2 - 0.25 * 0.5f64.ln().abs()).abs() < 1e-9, "{l2}");
        assert_eq!(reference_point_loss(&[0.3], &[0.0], 0, 2.0, 4.0), 0.0);
    }

    #[test]
    fn merge_loss_examples() {
        assert!(merge_loss(&[1.0, 0.0], &[true, false]) < 1e-6);
        let half = merge_loss(&[0.5, 0.5, 0.5], &[true, false, true]);
        assert!((half - 2f64.ln()).abs() < 1e-12);
        assert_eq!(merge_loss(&[], &[]), 0.0);
    }

    #[test]
    fn total_loss_stages() {
        let c = LossComponents { ref_row: 1.0, ref_col: 1.0, line_row: 1.0, line_col: 1.0, merge: 1.0 };
        assert!((total_loss(&c, 0.2, Stage::Full) - 3.4).abs() < 1e-12);
        assert!((total_loss(&c, 0.2, Stage::ReferenceOnly) - 0.4).abs() < 1e-12);
        assert!((total_loss(&c, 0.2, Stage::WithLines) - 2.4).abs() < 1e-12);
    }

    #[test]
    fn ohem_caps_and_tiebreaks() {
        // 10 positives, 200 negatives -> 10 + 64 selected
        let n = 210;
        let labels: Vec<bool> = (0..n).map(|i| i < 10).collect();
        let losses: Vec<f64> = (0..n).map(|i| (i * 7 % 13) as f64).collect();
        let sel = ohem_sample_pairs(&losses, &labels, 64);
        assert_eq!(sel.len(), 74);
        // equal losses select the lowest indices
        let flat = vec![1.0; 100];
        let all_neg = vec![false; 100];
        let sel2 = ohem_sample_pairs(&flat, &all_neg, 64);
        assert_eq!(sel2.len(), 64);
        assert_eq!(sel2[0], 0);
        assert_eq!(*sel2.last().unwrap(), 63);
    }

    #[test]
    fn line_loss_layer_shapes() {
        // one matched separator with 3 points -> reg term over 9 values
        let cfg = LossConfig { reg_weight: 1.0, ..Default::default() };
        let data = LayerLineData {
            query_scores: vec![vec![0.99, 0.99, 0.99]],
            pred_y: vec![vec![[0.5, 0.4, 0.6]; 3]],
            gt_y: vec![vec![[0.5, 0.4, 0.6]; 3]],
            matched: vec![(0, 0)],
        };
        let l = line_regression_loss_layer(&data, &cfg);
        // perfect regression: only the (tiny) focal term remains
        assert!(l < 1e-3, "{l}");
        let data_off = LayerLineData {
            pred_y: vec![vec![[0.6, 0.5, 0.7]; 3]],
            ..data.clone()
        };
        let l_off = line_regression_loss_layer(&data_off, &cfg);
        assert!((l_off - l - 0.1).abs() < 1e-9, "mean abs error adds 0.1");
    }
}
