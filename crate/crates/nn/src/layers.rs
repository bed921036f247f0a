//! Parameter store and layer building blocks.
//!
//! Layers hold `ParamId`s into a shared [`ParamStore`]; the forward methods
//! bind parameters onto a per-sample [`Tape`] and emit graph nodes. The
//! store is the single mutable object during training.

use crate::init;
use crate::tape::{Grads, NodeId, Tape};
use crate::tensor::Tensor;
use rand::rngs::StdRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(self.values[id.0].shape(), value.shape(), "param {}", self.names[id.0]);
        self.values[id.0] = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    /// Gradient of a bound parameter after `Tape::backward`, if it was
    /// reached by the sweep.
    pub fn grad_of<'g>(&self, tape: &Tape, grads: &'g Grads, id: ParamId) -> Option<&'g [f64]> {
        tape.param_node(id.0).and_then(|n| grads.get(n))
    }
}

/// Bind a parameter onto a tape (cached per tape).
pub fn bind(tape: &mut Tape, store: &ParamStore, id: ParamId) -> NodeId {
    tape.param(id.0, store.get(id))
}

// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
pub struct Linear {
    pub w: ParamId, // [in, out]
    pub b: ParamId, // [out]
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut StdRng, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), init::kaiming(rng, &[d_in, d_out], d_in));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[d_out]));
        Self { w, b }
    }

    /// x: [n, d_in] -> [n, d_out]
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let w = bind(t, store, self.w);
        let b = bind(t, store, self.b);
        let y = t.matmul(x, w);
        t.add_bias(y, b)
    }
}

#[derive(Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` = [in, hidden.., out]; ReLU between layers, none after the last.
    pub fn new(store: &mut ParamStore, rng: &mut StdRng, name: &str, dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(t, store, h);
            if i + 1 < self.layers.len() {
                h = t.relu(h);
            }
        }
        h
    }
}

#[derive(Clone, Copy)]
pub struct Conv2d {
    pub w: ParamId, // [out, in, kh, kw]
    pub b: Option<ParamId>,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut StdRng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        bias: bool,
    ) -> Self {
        let fan_in = c_in * k.0 * k.1;
        let w = store.add(format!("{name}.w"), init::kaiming(rng, &[c_out, c_in, k.0, k.1], fan_in));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[c_out])));
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let w = bind(t, store, self.w);
        let b = self.b.map(|b| bind(t, store, b));
        t.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gamma = store.add(format!("{name}.g"), Tensor::full(&[d], 1.0));
        let beta = store.add(format!("{name}.b"), Tensor::zeros(&[d]));
        Self { gamma, beta }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let g = bind(t, store, self.gamma);
        let b = bind(t, store, self.beta);
        t.layer_norm(x, g, b, 1e-5)
    }
}

/// Multi-head self-attention over one group of tokens.
#[derive(Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut StdRng, name: &str, dim: usize, heads: usize) -> Self {
        assert_eq!(dim % heads, 0);
        Self {
            wq: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            wk: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            wv: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            wo: Linear::new(store, rng, &format!("{name}.o"), dim, dim),
            heads,
            dim,
        }
    }

    /// Self-attention over x: [n, D]. When `score_counter` is given, the
    /// number of pairwise scores (n^2 per head group is counted once as n^2)
    /// is accumulated into it.
    pub fn forward(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        score_counter: Option<&mut usize>,
    ) -> NodeId {
        let n = t.value(x).shape()[0];
        if let Some(c) = score_counter {
            *c += n * n;
        }
        let dh = self.dim / self.heads;
        let q = self.wq.forward(t, store, x);
        let k = self.wk.forward(t, store, x);
        let v = self.wv.forward(t, store, x);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = t.slice_cols(q, h * dh, dh);
            let kh = t.slice_cols(k, h * dh, dh);
            let vh = t.slice_cols(v, h * dh, dh);
            let scores = t.matmul_nt(qh, kh);
            let scaled = t.scale(scores, 1.0 / (dh as f64).sqrt());
            let att = t.softmax_rows(scaled);
            outs.push(t.matmul(att, vh));
        }
        let merged = t.concat_cols(&outs);
        self.wo.forward(t, store, merged)
    }
}
