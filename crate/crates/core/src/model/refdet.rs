//! Reference-point detection at the fixed coordinate x_tau.

use super::ModelError;
use rand::rngs::StdRng;
use tsrlab_nn::{Linear, NodeId, ParamStore, Tape};

pub struct ReferenceHead {
    score: Linear,
}

impl ReferenceHead {
    pub fn new(store: &mut ParamStore, rng: &mut StdRng, name: &str, c_in: usize) -> Self {
        Self { score: Linear::new(store, rng, &format!("{name}.s"), c_in, 1) }
    }

    /// Pre-sigmoid scores of the x_tau-th column of E' ([C', H, W8]),
    /// shape [H, 1]. Losses are built on these.
    pub fn column_logits(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        e_prime: NodeId,
        x_tau: usize,
    ) -> Result<NodeId, ModelError> {
        let shape = t.value(e_prime).shape().to_vec();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        if x_tau >= w {
            return Err(ModelError::ReferenceColumnOutOfRange(x_tau, w));
        }
        let col = t.slice_w(e_prime, x_tau, 1); // [C, H, 1]
        let as_1ch = t.reshape(col, &[1, c, h]);
        let tr = t.transpose_hw(as_1ch); // [1, H, C]
        let mat = t.reshape(tr, &[h, c]);
        Ok(self.score.forward(t, store, mat))
    }

    /// Sigmoid scores of the x_tau-th column of E' ([C', H, W8]) -> [H, 1].
    pub fn score_reference_column(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        e_prime: NodeId,
        x_tau: usize,
    ) -> Result<NodeId, ModelError> {
        let logits = self.column_logits(t, store, e_prime, x_tau)?;
        Ok(t.sigmoid(logits))
    }
}

/// Max-pool NMS (non-strict plateau keeping), top-k, then score filter.
/// Returns (index, score) sorted by index.
pub fn nms_and_select(
    scores: &[f64],
    window: usize,
    top_k: usize,
    threshold: f64,
) -> Vec<(usize, f64)> {
    let half = window / 2;
    let n = scores.len();
    let mut peaks: Vec<(usize, f64)> = (0..n)
        .filter(|&i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            let wmax = scores[lo..=hi].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            scores[i] >= wmax
        })
        .map(|i| (i, scores[i]))
        .collect();
    peaks.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    peaks.truncate(top_k);
    peaks.retain(|&(_, s)| s >= threshold);
    peaks.sort_by_key(|&(i, _)| i);
    peaks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, TsrModel};
    use tsrlab_nn::{Tape, Tensor};

    #[test]
    fn window_max_suppresses_neighbours() {
        let mut scores = vec![0.0; 32];
        scores[0] = 0.1;
        scores[1] = 0.9;
        scores[2] = 0.8;
        scores[3] = 0.1;
        let sel = nms_and_select(&scores, 7, 100, 0.05);
        // indices 0..=3 lose to 0.9 in their windows; plateaus of 0.0
        // further out survive NMS but fail the threshold
        assert_eq!(sel, vec![(1, 0.9)]);
    }

    #[test]
    fn threshold_drops_everything() {
        let scores = vec![0.04; 64];
        assert!(nms_and_select(&scores, 7, 100, 0.05).is_empty());
    }

    #[test]
    fn top_k_caps_isolated_peaks() {
        // 150 isolated peaks (spacing > window) with increasing scores
        let mut scores = vec![0.0; 150 * 8];
        for p in 0..150 {
            scores[p * 8 + 3] = 0.05 + p as f64 * 0.001;
        }
        let sel = nms_and_select(&scores, 7, 100, 0.05);
        assert_eq!(sel.len(), 100);
        // the kept ones are the 100 highest-scored, i.e. the last 100 peaks
        let min_kept = sel.iter().map(|&(_, s)| s).fold(f64::INFINITY, f64::min);
        assert!((min_kept - (0.05 + 50.0 * 0.001)).abs() < 1e-12);
    }

    #[test]
    fn score_column_shapes_and_zero_weights() {
        let model = TsrModel::new(
            ModelConfig {
                stem_channels: 4,
                stage_channels: [4, 6, 8, 8],
                blocks_per_stage: 1,
                p2_channels: 8,
                highres_channels: 8,
                dim: 16,
                heads: 2,
                ffn_dim: 32,
                cell_dim: 16,
                ..ModelConfig::desk()
            },
            5,
        )
        .unwrap();
        let mut t = Tape::new();
        let e_prime = t.constant(Tensor::from_fn(&[8, 256, 32], |i| (i % 5) as f64 * 0.1));
        let s = model
            .row_branch
            .ref_head
            .score_reference_column(&mut t, &model.store, e_prime, 16)
            .unwrap();
        assert_eq!(t.value(s).shape(), &[256, 1]);
        assert!(model
            .row_branch
            .ref_head
            .score_reference_column(&mut t, &model.store, e_prime, 32)
            .is_err());

        // zero weights and bias give sigmoid(0) = 0.5 everywhere
        let mut model0 = model;
        let wshape = model0.store.get(model0.row_branch.ref_head.score.w).shape().to_vec();
        model0.store.set(model0.row_branch.ref_head.score.w, Tensor::zeros(&wshape));
        let mut t0 = Tape::new();
        let e0 = t0.constant(Tensor::from_fn(&[8, 64, 8], |i| i as f64));
        let s0 = model0
            .row_branch
            .ref_head
            .score_reference_column(&mut t0, &model0.store, e0, 4)
            .unwrap();
        assert!(t0.value(s0).iter().all(|v| (v - 0.5).abs() < 1e-12));
    }
}
