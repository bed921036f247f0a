//! Central-difference gradient checking against the tape.

use crate::layers::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Result for a single probed coordinate.
#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub param: ParamId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Relative error with an absolute floor so near-zero pairs do not blow up.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Check d loss / d store[param][index] by central differences.
///
/// `loss_fn` must be a pure function of the store contents (fixed seeds,
/// fixed inputs). `analytic` is the gradient the tape produced.
pub fn probe(
    store: &mut ParamStore,
    param: ParamId,
    index: usize,
    analytic: f64,
    h: f64,
    loss_fn: &mut dyn FnMut(&ParamStore) -> f64,
) -> ProbeResult {
    let original = store.get(param).clone();
    let shape = original.shape().to_vec();

    let mut plus = original.data().to_vec();
    plus[index] += h;
    store.set(param, Tensor::new(&shape, plus));
    let lp = loss_fn(store);

    let mut minus = original.data().to_vec();
    minus[index] -= h;
    store.set(param, Tensor::new(&shape, minus));
    let lm = loss_fn(store);

    store.set(param, original);
    let numeric = (lp - lm) / (2.0 * h);
    ProbeResult { param, index, analytic, numeric, rel_err: rel_err(analytic, numeric) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{bind, Linear, Mlp, MultiHeadAttention, ParamStore};
    use crate::tape::Tape;
    use crate::tensor::Tensor;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    /// Gradcheck a scalar loss built by `build` over every parameter entry.
    fn check_all(store: &mut ParamStore, build: &mut dyn FnMut(&ParamStore, &mut Tape) -> usize) {
        let mut tape = Tape::new();
        let loss = build(store, &mut tape);
        let grads = tape.backward(loss);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let g = store.grad_of(&tape, &grads, id).map(|g| g.to_vec());
            let n = store.get(id).numel();
            for i in 0..n {
                let analytic = g.as_ref().map_or(0.0, |g| g[i]);
                let r = probe(store, id, i, analytic, 1e-5, &mut |s| {
                    let mut t = Tape::new();
                    let l = build(s, &mut t);
                    t.value(l).scalar()
                });
                assert!(
                    r.rel_err < 1e-4,
                    "param {:?} idx {}: analytic {} vs numeric {}",
                    id,
                    i,
                    r.analytic,
                    r.numeric
                );
            }
        }
    }

    #[test]
    fn gradcheck_mlp_with_sigmoid_loss() {
        let mut store = ParamStore::new();
        let mut rng = StdRng::seed_from_u64(11);
        let mlp = Mlp::new(&mut store, &mut rng, "m", &[3, 5, 2]);
        let x = Tensor::new(&[2, 3], vec![0.3, -0.2, 0.8, 1.1, 0.05, -0.4]);
        check_all(&mut store, &mut |s, t| {
            let xin = t.constant(x.clone());
            let y = mlp.forward(t, s, xin);
            let p = t.sigmoid(y);
            let lp = t.log(p);
            let neg = t.neg(lp);
            t.sum(neg)
        });
    }

    #[test]
    fn gradcheck_attention_block() {
        let mut store = ParamStore::new();
        let mut rng = StdRng::seed_from_u64(5);
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "a", 8, 2);
        let x = Tensor::from_fn(&[3, 8], |i| ((i * 37 % 11) as f64 - 5.0) * 0.1);
        check_all(&mut store, &mut |s, t| {
            let xin = t.constant(x.clone());
            let y = mha.forward(t, s, xin, None);
            let sq = t.mul(y, y);
            t.sum(sq)
        });
    }

    #[test]
    fn gradcheck_conv_pool_upsample_chain() {
        let mut store = ParamStore::new();
        let mut rng = StdRng::seed_from_u64(3);
        let conv = crate::layers::Conv2d::new(
            &mut store, &mut rng, "c", 2, 3, (3, 3), (1, 1), (1, 1), true,
        );
        let x = Tensor::from_fn(&[2, 6, 6], |i| ((i * 13 % 17) as f64 - 8.0) * 0.13);
        check_all(&mut store, &mut |s, t| {
            let xin = t.constant(x.clone());
            let y = conv.forward(t, s, xin);
            let r = t.relu(y);
            let p = t.maxpool2d(r, (1, 2), (1, 2));
            let u = t.upsample_bilinear(p, 2, 2);
            let sq = t.mul(u, u);
            t.sum(sq)
        });
    }

    #[test]
    fn gradcheck_layernorm_and_softmax() {
        let mut store = ParamStore::new();
        let mut rng = StdRng::seed_from_u64(9);
        let lin = Linear::new(&mut store, &mut rng, "l", 4, 4);
        let ln = crate::layers::LayerNorm::new(&mut store, "n", 4);
        let x = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.7).sin());
        check_all(&mut store, &mut |s, t| {
            let xin = t.constant(x.clone());
            let y = lin.forward(t, s, xin);
            let nrm = ln.forward(t, s, y);
            let sm = t.softmax_rows(nrm);
            let lg = t.log(sm);
            let neg = t.neg(lg);
            t.sum(neg)
        });
    }

    #[test]
    fn gradcheck_deform_attend_coords_and_values() {
        let mut store = ParamStore::new();
        let v = store.add("v", Tensor::from_fn(&[4, 5, 6], |i| ((i * 29 % 23) as f64) * 0.07));
        let cx = store.add("cx", Tensor::new(&[2, 4], vec![1.3, 2.7, 0.6, 3.2, 2.2, 1.1, 4.4, 0.3]));
        let cy = store.add("cy", Tensor::new(&[2, 4], vec![0.4, 2.2, 3.6, 1.1, 2.9, 0.7, 1.6, 3.3]));
        let wraw = store.add("w", Tensor::from_fn(&[2, 4], |i| (i as f64 * 0.31).cos()));
        check_all(&mut store, &mut |s, t| {
            let vn = bind(t, s, v);
            let cxn = bind(t, s, cx);
            let cyn = bind(t, s, cy);
            let wn = bind(t, s, wraw);
            let wsm = t.softmax_chunks(wn, 2); // 2 heads * 2 samples
            let out = t.deform_attend(vn, cxn, cyn, wsm, 2);
            let sq = t.mul(out, out);
            t.sum(sq)
        });
    }

    #[test]
    fn gradcheck_sine_embed_positions() {
        let mut store = ParamStore::new();
        let y = store.add("y", Tensor::new(&[3, 1], vec![0.21, 0.55, 0.83]));
        check_all(&mut store, &mut |s, t| {
            let yn = bind(t, s, y);
            let e = t.sine_embed_xy(&[0.1, 0.5, 0.9], yn, 16);
            let sq = t.mul(e, e);
            let sm = t.sum(sq);
            // mix in a sigmoid refinement step like the decoder does
            let lg = t.logit_clamped(yn, 1e-4);
            let shifted = t.add_scalar(lg, 0.3);
            let back = t.sigmoid(shifted);
            let sb = t.sum(back);
            t.add(sm, sb)
        });
    }

    #[test]
    fn gradcheck_roi_align() {
        let mut store = ParamStore::new();
        let xmap = store.add("p2", Tensor::from_fn(&[3, 6, 6], |i| ((i * 7 % 13) as f64) * 0.11));
        let boxes = [[0.7, 1.2, 4.3, 5.1], [2.0, 0.5, 5.5, 3.0]];
        check_all(&mut store, &mut |s, t| {
            let xn = bind(t, s, xmap);
            let r = t.roi_align(xn, &boxes, 2, 2);
            let sq = t.mul(r, r);
            t.sum(sq)
        });
    }
}
