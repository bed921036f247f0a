//! Residual CNN backbone with an FPN top-down path producing the shared
//! stride-4 map P2. Width-configurable; trained from scratch.

use super::{ModelConfig, ModelError};
use rand::rngs::StdRng;
use tsrlab_nn::{Conv2d, NodeId, ParamStore, Tape, Tensor};

pub struct ResidualBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResidualBlock {
    fn new(store: &mut ParamStore, rng: &mut StdRng, name: &str, ch: usize, bias: bool) -> Self {
        Self {
            conv1: Conv2d::new(store, rng, &format!("{name}.c1"), ch, ch, (3, 3), (1, 1), (1, 1), bias),
            conv2: Conv2d::new(store, rng, &format!("{name}.c2"), ch, ch, (3, 3), (1, 1), (1, 1), bias),
        }
    }

    fn forward(&self, t: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let h = self.conv1.forward(t, store, x);
        let h = t.relu(h);
        let h = self.conv2.forward(t, store, h);
        let s = t.add(x, h);
        t.relu(s)
    }
}

struct Stage {
    down: Conv2d,
    blocks: Vec<ResidualBlock>,
}

pub struct Backbone {
    stem: Conv2d,
    stages: Vec<Stage>,
    laterals: Vec<Conv2d>,
    smooth: Conv2d,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, rng: &mut StdRng, cfg: &ModelConfig) -> Self {
        let bias = cfg.backbone_bias;
        let stem = Conv2d::new(store, rng, "bb.stem", 1, cfg.stem_channels, (3, 3), (2, 2), (1, 1), bias);
        let mut stages = Vec::new();
        let mut c_in = cfg.stem_channels;
        for (si, &c_out) in cfg.stage_channels.iter().enumerate() {
            let down = Conv2d::new(
                store,
                rng,
                &format!("bb.s{si}.down"),
                c_in,
                c_out,
                (3, 3),
                (2, 2),
                (1, 1),
                bias,
            );
            let blocks = (0..cfg.blocks_per_stage)
                .map(|bi| ResidualBlock::new(store, rng, &format!("bb.s{si}.b{bi}"), c_out, bias))
                .collect();
            stages.push(Stage { down, blocks });
            c_in = c_out;
        }
        let laterals = cfg
            .stage_channels
            .iter()
            .enumerate()
            .map(|(si, &c)| {
                Conv2d::new(store, rng, &format!("bb.lat{si}"), c, cfg.p2_channels, (1, 1), (1, 1), (0, 0), bias)
            })
            .collect();
        let smooth = Conv2d::new(
            store,
            rng,
            "bb.smooth",
            cfg.p2_channels,
            cfg.p2_channels,
            (3, 3),
            (1, 1),
            (1, 1),
            bias,
        );
        Self { stem, stages, laterals, smooth }
    }

    /// image: [1, H, W] with H, W divisible by 32 -> P2: [C, H/4, W/4].
    pub fn forward(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        image: NodeId,
    ) -> Result<NodeId, ModelError> {
        let shape = t.value(image).shape().to_vec();
        let (h, w) = (shape[1], shape[2]);
        if h % 32 != 0 || w % 32 != 0 {
            return Err(ModelError::BadInputSize(w, h));
        }
        let mut x = self.stem.forward(t, store, image);
        x = t.relu(x);
        let mut features = Vec::with_capacity(4);
        for stage in &self.stages {
            x = stage.down.forward(t, store, x);
            x = t.relu(x);
            for b in &stage.blocks {
                x = b.forward(t, store, x);
            }
            features.push(x);
        }
        // top-down: strides 32 -> 4
        let mut p = self.laterals[3].forward(t, store, features[3]);
        for i in (0..3).rev() {
            let lat = self.laterals[i].forward(t, store, features[i]);
            let up = t.upsample_bilinear(p, 2, 2);
            p = t.add(lat, up);
        }
        Ok(self.smooth.forward(t, store, p))
    }
}

/// Ink-normalized image tensor: background 0, full ink 1.
pub fn image_to_tensor(img: &crate::raster::GrayImage) -> Tensor {
    Tensor::new(
        &[1, img.h, img.w],
        img.data.iter().map(|&v| (255.0 - v as f64) / 255.0).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::model::TsrModel;

    fn tiny_config(bias: bool) -> ModelConfig {
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
            backbone_bias: bias,
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn p2_shape_is_quarter_resolution() {
        let model = TsrModel::new(tiny_config(true), 1).unwrap();
        let mut t = Tape::new();
        let img = t.constant(Tensor::zeros(&[1, 64, 96]));
        let p2 = model.backbone.forward(&mut t, &model.store, img).unwrap();
        assert_eq!(t.value(p2).shape(), &[8, 16, 24]);
    }

    #[test]
    fn non_divisible_input_errors() {
        let model = TsrModel::new(tiny_config(true), 1).unwrap();
        let mut t = Tape::new();
        let img = t.constant(Tensor::zeros(&[1, 60, 96]));
        assert!(matches!(
            model.backbone.forward(&mut t, &model.store, img),
            Err(ModelError::BadInputSize(96, 60))
        ));
    }

    #[test]
    fn zero_image_bias_free_gives_zero_p2() {
        let model = TsrModel::new(tiny_config(false), 1).unwrap();
        let mut t = Tape::new();
        let img = t.constant(Tensor::zeros(&[1, 64, 64]));
        let p2 = model.backbone.forward(&mut t, &model.store, img).unwrap();
        assert!(t.value(p2).max_abs() < 1e-12);
    }
}
