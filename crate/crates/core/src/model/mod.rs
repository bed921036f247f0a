//! The split + merge model: CNN-FPN backbone, per-axis spatial-CNN
//! feature enhancement, reference-point detection, dynamic-query decoder,
//! and the relation-network cell merger.

pub mod backbone;
pub mod decoder;
pub mod merger;
pub mod refdet;
pub mod scnn;

use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tsrlab_nn::{ParamId, ParamStore};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input {0}x{1} not divisible by 32; pad first")]
    BadInputSize(usize, usize),
    #[error("growth schedule inconsistent: K={k} L={layers} (expected K = 4L - 5)")]
    GrowthMismatch { k: usize, layers: usize },
    #[error("reference column {0} out of feature width {1}")]
    ReferenceColumnOutOfRange(usize, usize),
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: usize,
    /// Channels of the shared P2 map.
    pub p2_channels: usize,
    /// Channels of the high-resolution projections E' / E''.
    pub highres_channels: usize,
    /// Query embedding dimension.
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Points per separation line.
    pub k_points: usize,
    /// Decoder layers; the growth schedule forces K = 4L - 5.
    pub layers: usize,
    /// Deformable sampling points per head.
    pub sampling_points: usize,
    pub class_threshold: f64,
    /// Cell feature dimension in the merger.
    pub cell_dim: usize,
    pub nms_window: usize,
    pub top_k: usize,
    pub score_threshold: f64,
    /// Convolution biases in the backbone (off for linearity tests).
    pub backbone_bias: bool,
}

impl ModelConfig {
    /// Paper-scale architecture.
    pub fn paper() -> Self {
        Self {
            stem_channels: 64,
            stage_channels: [64, 128, 256, 512],
            blocks_per_stage: 2,
            p2_channels: 64,
            highres_channels: 256,
            dim: 256,
            heads: 16,
            ffn_dim: 1024,
            k_points: 15,
            layers: 5,
            sampling_points: 4,
            class_threshold: 0.5,
            cell_dim: 512,
            nms_window: 7,
            top_k: 100,
            score_threshold: 0.05,
            backbone_bias: true,
        }
    }

    /// Small configuration for CPU-scale training from scratch.
    pub fn desk() -> Self {
        Self {
            stem_channels: 12,
            stage_channels: [16, 24, 32, 48],
            blocks_per_stage: 1,
            p2_channels: 32,
            highres_channels: 48,
            dim: 64,
            heads: 4,
            ffn_dim: 256,
            k_points: 15,
            layers: 5,
            sampling_points: 4,
            class_threshold: 0.5,
            cell_dim: 96,
            nms_window: 7,
            top_k: 100,
            score_threshold: 0.05,
            backbone_bias: true,
        }
    }

    /// Lightweight decoder variant (shorter lines, smaller queries).
    pub fn light() -> Self {
        Self { k_points: 11, layers: 4, dim: 128, heads: 8, ffn_dim: 512, ..Self::desk() }
    }

    /// Points visible to decoder layer l (1-based): 1, 3, then +4 each.
    pub fn np_at_layer(&self, l: usize) -> usize {
        match l {
            1 => 1,
            2 => 3,
            _ => 3 + 4 * (l - 2),
        }
    }

    pub fn np_sequence(&self) -> Vec<usize> {
        (1..=self.layers).map(|l| self.np_at_layer(l)).collect()
    }

    pub fn check_growth(&self) -> Result<(), ModelError> {
        if self.layers < 2 || self.np_at_layer(self.layers) != self.k_points {
            return Err(ModelError::GrowthMismatch { k: self.k_points, layers: self.layers });
        }
        Ok(())
    }
}

/// One axis branch: feature enhancement, projections, reference head,
/// decoder. The column branch runs on transposed features.
pub struct AxisBranch {
    pub scnn: scnn::ScnnModule,
    pub proj_ref: scnn::ProjectionHead,
    pub proj_attn: scnn::ProjectionHead,
    pub ref_head: refdet::ReferenceHead,
    pub decoder: decoder::Decoder,
}

pub struct TsrModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: backbone::Backbone,
    pub row_branch: AxisBranch,
    pub col_branch: AxisBranch,
    pub merger: merger::Merger,
    group_bounds: GroupBounds,
}

/// Parameter-id ranges per module, for stage gating.
struct GroupBounds {
    backbone_end: usize,
    stage1_end: usize,
    decoder_end: usize,
}

/// Which parameters each training stage updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Stage1Heads,
    Decoders,
    Merger,
}

impl TsrModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.check_growth()?;
        let mut store = ParamStore::new();
        let mut rng = StdRng::seed_from_u64(seed);
        let backbone = backbone::Backbone::new(&mut store, &mut rng, &config);
        let backbone_end = store.len();

        let make_stage1 = |store: &mut ParamStore, rng: &mut StdRng, name: &str| {
            (
                scnn::ScnnModule::new(store, rng, &format!("{name}.scnn"), config.p2_channels),
                scnn::ProjectionHead::new(
                    store,
                    rng,
                    &format!("{name}.proj_ref"),
                    config.p2_channels,
                    config.highres_channels,
                ),
                scnn::ProjectionHead::new(
                    store,
                    rng,
                    &format!("{name}.proj_attn"),
                    config.p2_channels,
                    config.highres_channels,
                ),
                refdet::ReferenceHead::new(
                    store,
                    rng,
                    &format!("{name}.ref"),
                    config.highres_channels,
                ),
            )
        };
        let (row_scnn, row_pr, row_pa, row_ref) = make_stage1(&mut store, &mut rng, "row");
        let (col_scnn, col_pr, col_pa, col_ref) = make_stage1(&mut store, &mut rng, "col");
        let stage1_end = store.len();

        let row_decoder = decoder::Decoder::new(&mut store, &mut rng, "row.dec", &config);
        let col_decoder = decoder::Decoder::new(&mut store, &mut rng, "col.dec", &config);
        let decoder_end = store.len();

        let merger = merger::Merger::new(&mut store, &mut rng, "merge", &config);

        Ok(Self {
            config,
            store,
            backbone,
            row_branch: AxisBranch {
                scnn: row_scnn,
                proj_ref: row_pr,
                proj_attn: row_pa,
                ref_head: row_ref,
                decoder: row_decoder,
            },
            col_branch: AxisBranch {
                scnn: col_scnn,
                proj_ref: col_pr,
                proj_attn: col_pa,
                ref_head: col_ref,
                decoder: col_decoder,
            },
            merger,
            group_bounds: GroupBounds { backbone_end, stage1_end, decoder_end },
        })
    }

    pub fn group_of(&self, id: ParamId) -> ParamGroup {
        if id.0 < self.group_bounds.backbone_end {
            ParamGroup::Backbone
        } else if id.0 < self.group_bounds.stage1_end {
            ParamGroup::Stage1Heads
        } else if id.0 < self.group_bounds.decoder_end {
            ParamGroup::Decoders
        } else {
            ParamGroup::Merger
        }
    }

    /// First backbone parameter (the stem kernel), for gradient probes.
    pub fn backbone_stem_weight(&self) -> ParamId {
        ParamId(0)
    }

    /// Parameters trainable at a stage (1, 2, 3).
    pub fn stage_params(&self, stage: crate::losses::Stage) -> Vec<ParamId> {
        use crate::losses::Stage;
        self.store
            .ids()
            .filter(|&id| match self.group_of(id) {
                ParamGroup::Backbone | ParamGroup::Stage1Heads => true,
                ParamGroup::Decoders => stage >= Stage::WithLines,
                ParamGroup::Merger => stage >= Stage::Full,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn growth_schedule_sequences() {
        let desk = ModelConfig::desk();
        assert_eq!(desk.np_sequence(), vec![1, 3, 7, 11, 15]);
        let light = ModelConfig::light();
        assert_eq!(light.np_sequence(), vec![1, 3, 7, 11]);
        assert!(desk.check_growth().is_ok());
        assert!(light.check_growth().is_ok());
        let bad = ModelConfig { k_points: 13, ..ModelConfig::desk() };
        assert!(bad.check_growth().is_err());
    }

    #[test]
    fn stage_param_gating() {
        let model = TsrModel::new(ModelConfig {
            stem_channels: 4,
            stage_channels: [4, 6, 8, 8],
            p2_channels: 8,
            highres_channels: 8,
            dim: 16,
            heads: 2,
            ffn_dim: 32,
            cell_dim: 16,
            ..ModelConfig::desk()
        }, 0)
        .unwrap();
        use crate::losses::Stage;
        let s1 = model.stage_params(Stage::ReferenceOnly).len();
        let s2 = model.stage_params(Stage::WithLines).len();
        let s3 = model.stage_params(Stage::Full).len();
        assert!(s1 < s2 && s2 < s3);
        assert_eq!(s3, model.store.len());
    }
}
