//! Spatial-CNN feature enhancement and the high-resolution projections.
//!
//! The row branch downsamples P2 along the width, then propagates context
//! across width slices with 9x1 convolutions, rightward then leftward:
//! slice_out[i] = slice[i] + conv(slice_out[i-1]). The column branch runs
//! the same code on transposed features.

use rand::rngs::StdRng;
use tsrlab_nn::{Conv2d, NodeId, ParamStore, Tape};

pub struct ScnnModule {
    pre: Conv2d,
    down_convs: Vec<Conv2d>,
    scnn_fwd: Conv2d,
    scnn_bwd: Conv2d,
}

impl ScnnModule {
    pub fn new(store: &mut ParamStore, rng: &mut StdRng, name: &str, ch: usize) -> Self {
        let pre = Conv2d::new(store, rng, &format!("{name}.pre"), ch, ch, (3, 3), (1, 1), (1, 1), true);
        let down_convs = (0..3)
            .map(|i| {
                Conv2d::new(store, rng, &format!("{name}.d{i}"), ch, ch, (3, 3), (1, 1), (1, 1), true)
            })
            .collect();
        // message-passing kernels start at zero so the initial SCNN pass is
        // the identity and training shapes the propagation
        let mut scnn_fwd =
            Conv2d::new(store, rng, &format!("{name}.fw"), ch, ch, (9, 1), (1, 1), (4, 0), true);
        let mut scnn_bwd =
            Conv2d::new(store, rng, &format!("{name}.bw"), ch, ch, (9, 1), (1, 1), (4, 0), true);
        for c in [&mut scnn_fwd, &mut scnn_bwd] {
            let shape = store.get(c.w).shape().to_vec();
            store.set(c.w, tsrlab_nn::Tensor::zeros(&shape));
        }
        Self { pre, down_convs, scnn_fwd, scnn_bwd }
    }

    /// [C, H4, W4] -> [C, H4, W4/8] with context propagated across slices.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, p2: NodeId) -> NodeId {
        let mut x = self.pre.forward(t, store, p2);
        for conv in &self.down_convs {
            x = t.maxpool2d(x, (1, 2), (1, 2));
            x = conv.forward(t, store, x);
            x = t.relu(x);
        }
        let w = t.value(x).shape()[2];
        // rightward pass
        let mut slices: Vec<NodeId> = (0..w).map(|i| t.slice_w(x, i, 1)).collect();
        for i in 1..w {
            let m = self.scnn_fwd.forward(t, store, slices[i - 1]);
            slices[i] = t.add(slices[i], m);
        }
        // leftward pass over the rightward output
        for i in (0..w.saturating_sub(1)).rev() {
            let m = self.scnn_bwd.forward(t, store, slices[i + 1]);
            slices[i] = t.add(slices[i], m);
        }
        t.concat_w(&slices)
    }
}

/// 1x1 conv + x4 bilinear upsampling to the high-resolution frame.
pub struct ProjectionHead {
    conv: Conv2d,
}

impl ProjectionHead {
    pub fn new(store: &mut ParamStore, rng: &mut StdRng, name: &str, c_in: usize, c_out: usize) -> Self {
        Self {
            conv: Conv2d::new(store, rng, &format!("{name}.c"), c_in, c_out, (1, 1), (1, 1), (0, 0), true),
        }
    }

    /// [C, H4, W32] -> [C', H, W8]
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, e: NodeId) -> NodeId {
        let x = self.conv.forward(t, store, e);
        t.upsample_bilinear(x, 4, 4)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, TsrModel};
    use tsrlab_nn::Tensor;

    fn tiny() -> TsrModel {
        TsrModel::new(
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
            3,
        )
        .unwrap()
    }

    #[test]
    fn scnn_shapes_and_projection() {
        let model = tiny();
        let mut t = Tape::new();
        // P2 for a 256x256 input is 64x64; E must be 64x8, E' 256x32
        let p2 = t.constant(Tensor::from_fn(&[8, 64, 64], |i| (i % 7) as f64 * 0.1));
        let e = model.row_branch.scnn.forward(&mut t, &model.store, p2);
        assert_eq!(t.value(e).shape(), &[8, 64, 8]);
        let ep = model.row_branch.proj_ref.forward(&mut t, &model.store, e);
        assert_eq!(t.value(ep).shape(), &[8, 256, 32]);
    }

    #[test]
    fn zero_kernels_make_scnn_identity() {
        // kernels are zero-initialized, so both passes must be identity
        // right after construction: output equals the downsampled input.
        let model = tiny();
        let mut t = Tape::new();
        let p2 = t.constant(Tensor::from_fn(&[8, 16, 32], |i| ((i * 13) % 5) as f64));
        let mut x = model.row_branch.scnn.pre.forward(&mut t, &model.store, p2);
        for conv in &model.row_branch.scnn.down_convs {
            x = t.maxpool2d(x, (1, 2), (1, 2));
            x = conv.forward(&mut t, &model.store, x);
            x = t.relu(x);
        }
        let full = model.row_branch.scnn.forward(&mut t, &model.store, p2);
        for (a, b) in t.value(x).iter().zip(t.value(full).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn impulse_reaches_last_slice_with_nonzero_kernel() {
        let mut model = tiny();
        // overwrite the forward kernel with small nonzero weights
        let shape = model.store.get(model.row_branch.scnn.scnn_fwd.w).shape().to_vec();
        model
            .store
            .set(model.row_branch.scnn.scnn_fwd.w, Tensor::full(&shape, 0.05));
        let mut t = Tape::new();
        // an input whose leftmost slice is hot after downsampling
        let p2 = t.constant(Tensor::from_fn(&[8, 16, 32], |i| if i % 32 < 8 { 1.0 } else { 0.0 }));
        let e = model.row_branch.scnn.forward(&mut t, &model.store, p2);
        let v = t.value(e);
        let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let mut last_slice_energy = 0.0;
        for ch in 0..c {
            for y in 0..h {
                last_slice_energy += v.at3(ch, y, w - 1).abs();
            }
        }
        assert!(last_slice_energy > 0.0, "rightward pass propagates to the last slice");
    }

    #[test]
    fn projection_heads_differ_and_constant_upsample() {
        let model = tiny();
        let mut t = Tape::new();
        let e = t.constant(Tensor::full(&[8, 16, 4], 2.5));
        let a = model.row_branch.proj_ref.forward(&mut t, &model.store, e);
        let b = model.row_branch.proj_attn.forward(&mut t, &model.store, e);
        let (va, vb) = (t.value(a).clone(), t.value(b).clone());
        assert!(va.iter().zip(vb.iter()).any(|(x, y)| (x - y).abs() > 1e-9), "independent heads");
        // constant input stays constant per channel through the upsample
        for ch in 0..8 {
            let first = va.at3(ch, 0, 0);
            for y in 0..va.shape()[1] {
                for x in 0..va.shape()[2] {
                    assert!((va.at3(ch, y, x) - first).abs() < 1e-9);
                }
            }
        }
    }
}
