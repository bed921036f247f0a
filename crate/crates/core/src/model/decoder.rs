//! Dynamic-query decoder: progressive separation-line regression.
//!
//! Queries are ordered point sets, one group per detected reference point.
//! Each layer runs factorized self-attention (intra-line, then inter-line
//! at equal point index), deformable cross-attention over the
//! high-resolution map, an FFN, sigmoid-space position refinement, and
//! line extension: +1 point per side after the first layer, +2 after the
//! following ones, so the point count walks 1, 3, 7, 11, ... K.

use super::ModelConfig;
use crate::geometry::{Axis, Polyline, Separator};
use rand::rngs::StdRng;
use tsrlab_nn::{bind, Conv2d, LayerNorm, Linear, Mlp, MultiHeadAttention, NodeId, ParamId, ParamStore, Tape, Tensor};

pub struct DecoderLayer {
    intra: MultiHeadAttention,
    inter: MultiHeadAttention,
    ln_intra: LayerNorm,
    ln_inter: LayerNorm,
    offset_head: Linear,
    weight_head: Linear,
    out_proj: Linear,
    ln_ca: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
    ln_ffn: LayerNorm,
}

impl DecoderLayer {
    fn new(store: &mut ParamStore, rng: &mut StdRng, name: &str, cfg: &ModelConfig) -> Self {
        let d = cfg.dim;
        let hs = cfg.heads * cfg.sampling_points;
        let layer = Self {
            intra: MultiHeadAttention::new(store, rng, &format!("{name}.intra"), d, cfg.heads),
            inter: MultiHeadAttention::new(store, rng, &format!("{name}.inter"), d, cfg.heads),
            ln_intra: LayerNorm::new(store, &format!("{name}.ln1"), d),
            ln_inter: LayerNorm::new(store, &format!("{name}.ln2"), d),
            offset_head: Linear::new(store, rng, &format!("{name}.off"), d, 2 * hs),
            weight_head: Linear::new(store, rng, &format!("{name}.aw"), d, hs),
            out_proj: Linear::new(store, rng, &format!("{name}.op"), d, d),
            ln_ca: LayerNorm::new(store, &format!("{name}.ln3"), d),
            ffn1: Linear::new(store, rng, &format!("{name}.f1"), d, cfg.ffn_dim),
            ffn2: Linear::new(store, rng, &format!("{name}.f2"), cfg.ffn_dim, d),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln4"), d),
        };
        // deformable init: zero offset weights, radial bias pattern; zero
        // attention-weight head so sampling starts uniform
        let wshape = store.get(layer.offset_head.w).shape().to_vec();
        store.set(layer.offset_head.w, Tensor::zeros(&wshape));
        let mut bias = vec![0.0; 2 * hs];
        for h in 0..cfg.heads {
            let angle = std::f64::consts::TAU * h as f64 / cfg.heads as f64;
            for s in 0..cfg.sampling_points {
                let r = (s + 1) as f64;
                bias[h * cfg.sampling_points + s] = angle.cos() * r;
                bias[hs + h * cfg.sampling_points + s] = angle.sin() * r;
            }
        }
        store.set(layer.offset_head.b, Tensor::new(&[2 * hs], bias));
        let awshape = store.get(layer.weight_head.w).shape().to_vec();
        store.set(layer.weight_head.w, Tensor::zeros(&awshape));
        layer
    }
}

pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    /// Value projection of E'' for deformable attention, shared by all
    /// layers of this branch.
    value_proj: Conv2d,
    /// Shared learnable content embedding (Eq. 1 style query init).
    pub content_embed: ParamId,
    /// Learnable extension ratio, initialized to 0.5.
    pub extension_t: ParamId,
    class_head: Linear,
    refine_head: Mlp,
    line_head: Mlp,
    cfg: DecoderDims,
}

#[derive(Clone, Copy)]
struct DecoderDims {
    dim: usize,
    heads: usize,
    sampling_points: usize,
    k_points: usize,
    n_layers: usize,
}

/// Per-layer outputs kept for the losses; node ids refer to the tape the
/// decode ran on.
pub struct LayerOutput {
    pub np: usize,
    /// 1-based point ids of each slot, ascending (mid = (K+1)/2).
    pub k_ids: Vec<usize>,
    /// [n,1] sigmoid classification per query.
    pub scores: NodeId,
    /// [n,1] pre-sigmoid classification, for the losses.
    pub class_logits: NodeId,
    /// [n,1] normalized cross-axis coordinates.
    pub center: NodeId,
    pub top: NodeId,
    pub bottom: NodeId,
    /// [n,1] refined query positions.
    pub positions: NodeId,
}

pub struct DecodeOutput {
    pub layers: Vec<LayerOutput>,
    pub n_sep: usize,
    /// Working frame (parallel extent, cross extent) in pixels.
    pub frame: (f64, f64),
}

impl DecodeOutput {
    pub fn np_sequence(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.np).collect()
    }
}

const POS_EPS: f64 = 1e-4;

impl Decoder {
    pub fn new(store: &mut ParamStore, rng: &mut StdRng, name: &str, cfg: &ModelConfig) -> Self {
        let layers = (0..cfg.layers)
            .map(|i| DecoderLayer::new(store, rng, &format!("{name}.l{i}"), cfg))
            .collect();
        let d = cfg.dim;
        Self {
            layers,
            value_proj: Conv2d::new(
                store,
                rng,
                &format!("{name}.vp"),
                cfg.highres_channels,
                d,
                (1, 1),
                (1, 1),
                (0, 0),
                true,
            ),
            content_embed: store.add(
                format!("{name}.ce"),
                tsrlab_nn::Tensor::from_fn(&[d], |_| crate::model::decoder::small_init(rng)),
            ),
            extension_t: store.add(format!("{name}.t"), Tensor::scalar_value(0.5)),
            class_head: Linear::new(store, rng, &format!("{name}.cls"), d, 1),
            refine_head: Mlp::new(store, rng, &format!("{name}.refine"), &[d, d, d, 1]),
            line_head: Mlp::new(store, rng, &format!("{name}.line"), &[d, d, d, 3]),
            cfg: DecoderDims {
                dim: d,
                heads: cfg.heads,
                sampling_points: cfg.sampling_points,
                k_points: cfg.k_points,
                n_layers: cfg.layers,
            },
        }
    }

    /// Parallel coordinate of point id k (1-based) in a frame of extent w.
    pub fn point_x(&self, k: usize, w: f64) -> f64 {
        w * k as f64 / (self.cfg.k_points as f64 + 1.0)
    }

    pub fn mid_id(&self) -> usize {
        (self.cfg.k_points + 1) / 2
    }

    /// Query init per Eq.-1 style: content embedding plus sinusoidal
    /// positional encoding of the normalized coordinates.
    fn embed(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        xs_norm: &[f64],
        y: NodeId,
    ) -> NodeId {
        let pe = t.sine_embed_xy(xs_norm, y, self.cfg.dim);
        let ce = bind(t, store, self.content_embed);
        t.add_bias(pe, ce)
    }

    /// Run the decoder over reference points (pixel indices on the cross
    /// axis at x_tau). `e2` is the [C', H, W/8] attention feature map and
    /// `frame` the (W, H) of the working image frame.
    pub fn decode(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        e2: NodeId,
        reference_points: &[usize],
        frame: (f64, f64),
        mut score_counter: Option<&mut usize>,
    ) -> DecodeOutput {
        let n_sep = reference_points.len();
        let mut out = DecodeOutput { layers: Vec::new(), n_sep, frame };
        if n_sep == 0 {
            return out;
        }
        let (w, h) = frame;
        let mid = self.mid_id();
        let mut k_ids = vec![mid];
        let x_norm = |k: usize| self.point_x(k, w) / w;
        let x_feat = |k: usize| self.point_x(k, w) / 8.0;

        let y0: Vec<f64> = reference_points.iter().map(|&i| i as f64 / h).collect();
        let mut positions = t.constant(Tensor::new(&[n_sep, 1], y0));
        let xs0: Vec<f64> = vec![x_norm(mid); n_sep];
        let mut q = self.embed(t, store, &xs0, positions);
        let v = self.value_proj.forward(t, store, e2);

        for (li, layer) in self.layers.iter().enumerate() {
            let np = k_ids.len();
            let n = n_sep * np;

            // factorized self-attention: intra-line then inter-line
            let intra_parts: Vec<NodeId> = (0..n_sep)
                .map(|j| {
                    let rows: Vec<usize> = (j * np..(j + 1) * np).collect();
                    let grp = t.select_rows(q, rows);
                    layer.intra.forward(t, store, grp, score_counter.as_deref_mut())
                })
                .collect();
            let intra = t.concat_rows(&intra_parts);
            let res = t.add(q, intra);
            q = layer.ln_intra.forward(t, store, res);

            let inter_parts: Vec<NodeId> = (0..np)
                .map(|s| {
                    let rows: Vec<usize> = (0..n_sep).map(|j| j * np + s).collect();
                    let grp = t.select_rows(q, rows);
                    layer.inter.forward(t, store, grp, score_counter.as_deref_mut())
                })
                .collect();
            let inter_cat = t.concat_rows(&inter_parts); // ordered (slot, sep)
            let perm: Vec<usize> = (0..n).map(|r| (r % np) * n_sep + r / np).collect();
            let inter = t.select_rows(inter_cat, perm);
            let res = t.add(q, inter);
            q = layer.ln_inter.forward(t, store, res);

            // deformable cross-attention over E''
            let hs = self.cfg.heads * self.cfg.sampling_points;
            let off = layer.offset_head.forward(t, store, q);
            let off_x = t.slice_cols(off, 0, hs);
            let off_y = t.slice_cols(off, hs, hs);
            let base_x: Vec<f64> = (0..n)
                .flat_map(|r| std::iter::repeat(x_feat(k_ids[r % np])).take(hs))
                .collect();
            let base_x = t.constant(Tensor::new(&[n, hs], base_x));
            let y_pix = t.scale(positions, h);
            let base_y = t.repeat_col(y_pix, hs);
            let cx = t.add(off_x, base_x);
            let cy = t.add(off_y, base_y);
            let w_raw = layer.weight_head.forward(t, store, q);
            let w_att = t.softmax_chunks(w_raw, self.cfg.sampling_points);
            let attended = t.deform_attend(v, cx, cy, w_att, self.cfg.heads);
            let ca = layer.out_proj.forward(t, store, attended);
            let res = t.add(q, ca);
            q = layer.ln_ca.forward(t, store, res);

            // FFN
            let f = layer.ffn1.forward(t, store, q);
            let f = t.relu(f);
            let f = layer.ffn2.forward(t, store, f);
            let res = t.add(q, f);
            q = layer.ln_ffn.forward(t, store, res);

            // sigmoid-space position refinement
            let dpy = self.refine_head.forward(t, store, q);
            let lg = t.logit_clamped(positions, POS_EPS);
            let sum = t.add(dpy, lg);
            positions = t.sigmoid(sum);

            // per-layer classification and 3-line regression
            let logits = self.class_head.forward(t, store, q);
            let scores = t.sigmoid(logits);
            let line3 = self.line_head.forward(t, store, q);
            let lg_ref = t.logit_clamped(positions, POS_EPS);
            let mut line_out = [0usize; 3];
            for (c, slot) in line_out.iter_mut().enumerate() {
                let delta = t.slice_cols(line3, c, 1);
                let s = t.add(delta, lg_ref);
                *slot = t.sigmoid(s);
            }
            out.layers.push(LayerOutput {
                np,
                k_ids: k_ids.clone(),
                scores,
                class_logits: logits,
                center: line_out[0],
                top: line_out[1],
                bottom: line_out[2],
                positions,
            });

            // line extension for the next layer
            if li + 1 < self.cfg.n_layers {
                let count = if li == 0 { 1 } else { 2 };
                let t_param = bind(t, store, self.extension_t);
                let mut pos_parts: Vec<NodeId> = Vec::with_capacity(3 * n_sep);
                let mut q_parts: Vec<NodeId> = Vec::with_capacity(3 * n_sep);
                let new_start_ids: Vec<usize> =
                    (1..=count).map(|d| k_ids[0] - d).rev().collect();
                let new_end_ids: Vec<usize> = (1..=count).map(|d| k_ids[np - 1] + d).collect();
                for j in 0..n_sep {
                    let base = j * np;
                    let (y_start, y_end) = if count == 1 {
                        // first layer: copy the endpoint coordinate
                        let s = t.select_rows(positions, vec![base]);
                        (s, s)
                    } else {
                        let p_start = t.select_rows(positions, vec![base]);
                        let p_start1 = t.select_rows(positions, vec![base + 1]);
                        let d_s = t.sub(p_start, p_start1);
                        let inc_s = t.mul_scalar_node(d_s, t_param);
                        let raw_s = t.add(p_start, inc_s);
                        let y_s = t.clamp(raw_s, 0.0, 1.0);
                        let p_end = t.select_rows(positions, vec![base + np - 1]);
                        let p_end1 = t.select_rows(positions, vec![base + np - 2]);
                        let d_e = t.sub(p_end, p_end1);
                        let inc_e = t.mul_scalar_node(d_e, t_param);
                        let raw_e = t.add(p_end, inc_e);
                        let y_e = t.clamp(raw_e, 0.0, 1.0);
                        (y_s, y_e)
                    };
                    let rep = vec![0usize; count];
                    let y_start_rows = t.select_rows(y_start, rep.clone());
                    let y_end_rows = t.select_rows(y_end, rep);
                    let xs_start: Vec<f64> = new_start_ids.iter().map(|&k| x_norm(k)).collect();
                    let xs_end: Vec<f64> = new_end_ids.iter().map(|&k| x_norm(k)).collect();
                    let q_start = self.embed(t, store, &xs_start, y_start_rows);
                    let q_end = self.embed(t, store, &xs_end, y_end_rows);
                    let old_rows: Vec<usize> = (base..base + np).collect();
                    let q_old = t.select_rows(q, old_rows.clone());
                    let pos_old = t.select_rows(positions, old_rows);
                    pos_parts.extend([y_start_rows, pos_old, y_end_rows]);
                    q_parts.extend([q_start, q_old, q_end]);
                }
                positions = t.concat_rows(&pos_parts);
                q = t.concat_rows(&q_parts);
                let mut ids = new_start_ids;
                ids.extend(&k_ids);
                ids.extend(&new_end_ids);
                k_ids = ids;
            }
        }
        out
    }

    /// Convert the final layer into separators (row-axis frame), keeping
    /// those whose mid-query confidence clears the threshold.
    pub fn final_separators(
        &self,
        t: &Tape,
        out: &DecodeOutput,
        threshold: f64,
    ) -> Vec<Separator> {
        let Some(last) = out.layers.last() else {
            return Vec::new();
        };
        let (w, h) = out.frame;
        let np = last.np;
        let mid_slot = np / 2;
        let scores = t.value(last.scores);
        let center = t.value(last.center);
        let top = t.value(last.top);
        let bottom = t.value(last.bottom);
        let mut seps = Vec::new();
        for j in 0..out.n_sep {
            let conf = scores.data()[j * np + mid_slot];
            if conf < threshold {
                continue;
            }
            let line = |vals: &tsrlab_nn::Tensor| -> Polyline {
                let points = (0..np)
                    .map(|s| {
                        let x = self.point_x(last.k_ids[s], w);
                        let y = vals.data()[j * np + s] * h;
                        crate::geometry::Point2D::new(x, y)
                    })
                    .collect();
                Polyline { points, axis: Axis::Row }
            };
            seps.push(Separator {
                center: line(center),
                top: line(top),
                bottom: line(bottom),
                confidence: conf,
            });
        }
        seps
    }
}

fn small_init(rng: &mut StdRng) -> f64 {
    tsrlab_nn::init::randn(rng) * 0.02
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, TsrModel};

    fn tiny_model() -> TsrModel {
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
                sampling_points: 2,
                ..ModelConfig::desk()
            },
            7,
        )
        .unwrap()
    }

    fn fake_e2(t: &mut Tape, h: usize, w8: usize) -> NodeId {
        t.constant(Tensor::from_fn(&[8, h, w8], |i| ((i * 31 % 17) as f64 - 8.0) * 0.05))
    }

    #[test]
    fn empty_reference_set_decodes_empty() {
        let model = tiny_model();
        let mut t = Tape::new();
        let e2 = fake_e2(&mut t, 64, 8);
        let out =
            model.row_branch.decoder.decode(&mut t, &model.store, e2, &[], (64.0, 64.0), None);
        assert_eq!(out.n_sep, 0);
        assert!(model.row_branch.decoder.final_separators(&t, &out, 0.5).is_empty());
    }

    #[test]
    fn np_sequence_grows_one_three_then_plus_four() {
        let model = tiny_model();
        let mut t = Tape::new();
        let e2 = fake_e2(&mut t, 64, 8);
        let out = model.row_branch.decoder.decode(
            &mut t,
            &model.store,
            e2,
            &[20, 40],
            (64.0, 64.0),
            None,
        );
        assert_eq!(out.np_sequence(), vec![1, 3, 7, 11, 15]);
        let last = out.layers.last().unwrap();
        assert_eq!(last.k_ids, (1..=15).collect::<Vec<_>>());
        // 3K values per separator at the final layer
        assert_eq!(t.value(last.center).numel() * 3, 2 * 45);
    }

    #[test]
    fn factorized_attention_score_count() {
        let model = tiny_model();
        let mut t = Tape::new();
        let e2 = fake_e2(&mut t, 64, 8);
        let mut count = 0usize;
        let refs = [10, 30, 50];
        model.row_branch.decoder.decode(
            &mut t,
            &model.store,
            e2,
            &refs,
            (64.0, 64.0),
            Some(&mut count),
        );
        // per layer: n_sep groups of np^2 + np groups of n_sep^2
        let expected: usize = ModelConfig::desk()
            .np_sequence()
            .iter()
            .map(|&np| 3 * np * np + np * 3 * 3)
            .sum();
        assert_eq!(count, expected);
    }

    #[test]
    fn identical_reference_points_get_identical_initial_embeddings() {
        let model = tiny_model();
        let mut t = Tape::new();
        let y = t.constant(Tensor::new(&[2, 1], vec![0.3, 0.3]));
        let e = model.row_branch.decoder.embed(&mut t, &model.store, &[0.5, 0.5], y);
        let v = t.value(e);
        for c in 0..v.shape()[1] {
            assert_eq!(v.at2(0, c), v.at2(1, c));
        }
    }

    #[test]
    fn refinement_formula_matches_closed_form() {
        // sigma(delta + logit(p)) with delta = logit(0.6) - logit(0.5)
        let mut t = Tape::new();
        let p = t.constant(Tensor::new(&[1, 1], vec![0.5]));
        let lg = t.logit_clamped(p, POS_EPS);
        let delta = t.constant(Tensor::new(&[1, 1], vec![0.405_465_108_108_164_4]));
        let s = t.add(delta, lg);
        let refined = t.sigmoid(s);
        assert!((t.value(refined).scalar() - 0.6).abs() < 1e-9);
        // zero delta keeps the position
        let zero = t.constant(Tensor::new(&[1, 1], vec![0.0]));
        let s2 = t.add(zero, lg);
        let same = t.sigmoid(s2);
        assert!((t.value(same).scalar() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn extension_extrapolates_and_clamps() {
        // py_end = 0.50, py_end-1 = 0.48, t = 0.5 -> new ends at 0.51
        let mut t = Tape::new();
        let p_end = t.constant(Tensor::new(&[1, 1], vec![0.50]));
        let p_end1 = t.constant(Tensor::new(&[1, 1], vec![0.48]));
        let tt = t.constant(Tensor::scalar_value(0.5));
        let d = t.sub(p_end, p_end1);
        let inc = t.mul_scalar_node(d, tt);
        let raw = t.add(p_end, inc);
        let y = t.clamp(raw, 0.0, 1.0);
        assert!((t.value(y).scalar() - 0.51).abs() < 1e-12);
        // beyond 1.0 clamps
        let p_hi = t.constant(Tensor::new(&[1, 1], vec![0.99]));
        let p_lo = t.constant(Tensor::new(&[1, 1], vec![0.5]));
        let d2 = t.sub(p_hi, p_lo);
        let inc2 = t.mul_scalar_node(d2, tt);
        let raw2 = t.add(p_hi, inc2);
        let y2 = t.clamp(raw2, 0.0, 1.0);
        assert!((t.value(y2).scalar() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn final_separator_confidence_gate() {
        let model = tiny_model();
        let mut t = Tape::new();
        let e2 = fake_e2(&mut t, 64, 8);
        let out = model.row_branch.decoder.decode(
            &mut t,
            &model.store,
            e2,
            &[16, 48],
            (64.0, 64.0),
            None,
        );
        let all = model.row_branch.decoder.final_separators(&t, &out, 0.0);
        assert_eq!(all.len(), 2);
        assert_eq!(all[0].center.points.len(), 15);
        let none = model.row_branch.decoder.final_separators(&t, &out, 1.1);
        assert!(none.is_empty());
    }
}
