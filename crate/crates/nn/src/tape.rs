//! Reverse-mode autodiff tape.
//!
//! A `Tape` records one forward computation as a flat list of nodes in
//! topological order; `backward` walks it in reverse. Values are immutable
//! `Tensor`s, gradients are dense buffers keyed by node id. Graphs are
//! per-sample and short-lived; parameters enter a tape through
//! [`Tape::param`] so their gradients can be collected afterwards.

use crate::kernels;
use crate::tensor::Tensor;
use std::collections::HashMap;

pub type NodeId = usize;

pub(crate) type BackFn = Box<dyn Fn(&Tensor, &mut GradSink)>;

struct Node {
    value: Tensor,
    back: Option<BackFn>,
}

/// Accumulates gradient contributions during the backward sweep.
pub struct GradSink {
    grads: Vec<Option<Vec<f64>>>,
}

impl GradSink {
    pub fn add(&mut self, id: NodeId, contrib: &[f64]) {
        match &mut self.grads[id] {
            Some(g) => {
                debug_assert_eq!(g.len(), contrib.len());
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            slot => *slot = Some(contrib.to_vec()),
        }
    }

    pub fn add_owned(&mut self, id: NodeId, contrib: Vec<f64>) {
        match &mut self.grads[id] {
            Some(g) => {
                debug_assert_eq!(g.len(), contrib.len());
                for (a, b) in g.iter_mut().zip(&contrib) {
                    *a += b;
                }
            }
            slot => *slot = Some(contrib),
        }
    }
}

/// Result of a backward pass; gradient per node, where reached.
pub struct Grads {
    by_node: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.by_node.get(id).and_then(|g| g.as_deref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: HashMap<usize, NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, back: Option<BackFn>) -> NodeId {
        self.nodes.push(Node { value, back });
        self.nodes.len() - 1
    }

    pub(crate) fn push_with(&mut self, value: Tensor, back: BackFn) -> NodeId {
        self.push(value, Some(back))
    }

    /// A value that does not require gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, None)
    }

    /// A value whose gradient is wanted (parameters, gradcheck probes).
    /// The gradient is the identity map of the incoming cotangent.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Some(Box::new(|_, _| {})))
    }

    /// Bind a parameter (by external id) to this tape, once.
    pub fn param(&mut self, key: usize, value: &Tensor) -> NodeId {
        if let Some(&id) = self.param_nodes.get(&key) {
            return id;
        }
        let id = self.leaf(value.clone());
        self.param_nodes.insert(key, id);
        id
    }

    pub fn param_node(&self, key: usize) -> Option<NodeId> {
        self.param_nodes.get(&key).copied()
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: NodeId) -> Grads {
        assert_eq!(self.value(loss).numel(), 1, "backward() needs a scalar loss");
        let mut sink = GradSink { grads: vec![None; self.nodes.len()] };
        sink.grads[loss] = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            let Some(g) = sink.grads[id].take() else { continue };
            if let Some(back) = &self.nodes[id].back {
                // move the buffer into a tensor for the callback and
                // recover it afterwards (no closure retains the Arc)
                let gt = Tensor::new(self.nodes[id].value.shape(), g);
                back(&gt, &mut sink);
                sink.grads[id] = Some(gt.into_vec());
            } else {
                sink.grads[id] = Some(g);
            }
        }
        Grads { by_node: sink.grads }
    }

    // -- elementwise ---------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let out = Tensor::new(va.shape(), va.iter().zip(vb.iter()).map(|(x, y)| x + y).collect());
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.data());
                sink.add(b, g.data());
            })),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let out = Tensor::new(va.shape(), va.iter().zip(vb.iter()).map(|(x, y)| x - y).collect());
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.data());
                sink.add_owned(b, g.iter().map(|v| -v).collect());
            })),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let out = Tensor::new(va.shape(), va.iter().zip(vb.iter()).map(|(x, y)| x * y).collect());
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add_owned(a, g.iter().zip(vb.iter()).map(|(gv, y)| gv * y).collect());
                sink.add_owned(b, g.iter().zip(va.iter()).map(|(gv, x)| gv * x).collect());
            })),
        )
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = self.value(a);
        let out = Tensor::new(va.shape(), va.iter().map(|x| x * c).collect());
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add_owned(a, g.iter().map(|v| v * c).collect());
            })),
        )
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = self.value(a);
        let out = Tensor::new(va.shape(), va.iter().map(|x| x + c).collect());
        self.push(out, Some(Box::new(move |g, sink| sink.add(a, g.data()))))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a).clone();
        let out = Tensor::new(va.shape(), va.iter().map(|x| x.max(0.0)).collect());
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add_owned(
                    a,
                    g.iter().zip(va.iter()).map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 }).collect(),
                );
            })),
        )
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let sv: Vec<f64> = va.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        let out = Tensor::new(va.shape(), sv.clone());
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add_owned(a, g.iter().zip(&sv).map(|(gv, s)| gv * s * (1.0 - s)).collect());
            })),
        )
    }

    /// ln(1 + e^x), computed stably; gradient is sigmoid(x).
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a).clone();
        let out = Tensor::new(
            va.shape(),
            va.iter().map(|&x| x.max(0.0) + (-x.abs()).exp().ln_1p()).collect(),
        );
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add_owned(
                    a,
                    g.iter()
                        .zip(va.iter())
                        .map(|(gv, x)| gv / (1.0 + (-x).exp()))
                        .collect(),
                );
            })),
        )
    }

    /// ln(p / (1-p)) with the input clamped to [eps, 1-eps] first.
    /// The clamp gradient is pass-through inside the interval, zero outside.
    pub fn logit_clamped(&mut self, a: NodeId, eps: f64) -> NodeId {
        let va = self.value(a).clone();
        let pv: Vec<f64> = va.iter().map(|x| x.clamp(eps, 1.0 - eps)).collect();
        let out = Tensor::new(va.shape(), pv.iter().map(|p| (p / (1.0 - p)).ln()).collect());
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let gr: Vec<f64> = g
                    .iter()
                    .zip(va.iter())
                    .zip(&pv)
                    .map(|((gv, x), p)| {
                        if *x < eps || *x > 1.0 - eps {
                            0.0
                        } else {
                            gv / (p * (1.0 - p))
                        }
                    })
                    .collect();
                sink.add_owned(a, gr);
            })),
        )
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let va = self.value(a).clone();
        let out = Tensor::new(va.shape(), va.iter().map(|x| x.clamp(lo, hi)).collect());
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add_owned(
                    a,
                    g.iter()
                        .zip(va.iter())
                        .map(|(gv, x)| if *x >= lo && *x <= hi { *gv } else { 0.0 })
                        .collect(),
                );
            })),
        )
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a).clone();
        let out = Tensor::new(va.shape(), va.iter().map(|x| x.abs()).collect());
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add_owned(a, g.iter().zip(va.iter()).map(|(gv, x)| gv * x.signum()).collect());
            })),
        )
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a).clone();
        let out = Tensor::new(va.shape(), va.iter().map(|x| x.ln()).collect());
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add_owned(a, g.iter().zip(va.iter()).map(|(gv, x)| gv / x).collect());
            })),
        )
    }

    pub fn powf_const(&mut self, a: NodeId, p: f64) -> NodeId {
        let va = self.value(a).clone();
        let out = Tensor::new(va.shape(), va.iter().map(|x| x.powf(p)).collect());
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add_owned(
                    a,
                    g.iter().zip(va.iter()).map(|(gv, x)| gv * p * x.powf(p - 1.0)).collect(),
                );
            })),
        )
    }

    // -- reductions ----------------------------------------------------------

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let n = va.numel();
        let out = Tensor::scalar_value(va.iter().sum());
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add_owned(a, vec![g.scalar(); n]);
            })),
        )
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    // -- shape plumbing ------------------------------------------------------

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let out = self.value(a).reshape(shape);
        self.push(out, Some(Box::new(move |g, sink| sink.add(a, g.data()))))
    }

    /// Gather rows of a [n, d] matrix. Backward scatter-adds.
    pub fn select_rows(&mut self, a: NodeId, idx: Vec<usize>) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.shape().len(), 2);
        let (n, d) = (va.shape()[0], va.shape()[1]);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            assert!(i < n, "row index {} out of {}", i, n);
            data.extend_from_slice(&va.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(&[idx.len(), d], data);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut gr = vec![0.0; n * d];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..d {
                        gr[i * d + c] += g.data()[r * d + c];
                    }
                }
                sink.add_owned(a, gr);
            })),
        )
    }

    /// Concatenate [ni, d] matrices along rows.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let d = self.value(parts[0]).shape()[1];
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.shape().len(), 2);
            assert_eq!(v.shape()[1], d);
            sizes.push(v.shape()[0]);
            data.extend_from_slice(v.data());
        }
        let total: usize = sizes.iter().sum();
        let out = Tensor::new(&[total, d], data);
        let parts = parts.to_vec();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut off = 0;
                for (&p, &sz) in parts.iter().zip(&sizes) {
                    sink.add(p, &g.data()[off * d..(off + sz) * d]);
                    off += sz;
                }
            })),
        )
    }

    /// Columns [start, start+len) of a [n, d] matrix.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.shape().len(), 2);
        let (n, d) = (va.shape()[0], va.shape()[1]);
        assert!(start + len <= d);
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&va.data()[r * d + start..r * d + start + len]);
        }
        let out = Tensor::new(&[n, len], data);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut gr = vec![0.0; n * d];
                for r in 0..n {
                    gr[r * d + start..r * d + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                sink.add_owned(a, gr);
            })),
        )
    }

    /// Concatenate [n, di] matrices along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).shape()[0];
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).shape()[1]).collect();
        let d: usize = widths.iter().sum();
        let mut data = vec![0.0; n * d];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            assert_eq!(v.shape()[0], n);
            for r in 0..n {
                data[r * d + off..r * d + off + w].copy_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let out = Tensor::new(&[n, d], data);
        let parts = parts.to_vec();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let mut gr = vec![0.0; n * w];
                    for r in 0..n {
                        gr[r * w..(r + 1) * w]
                            .copy_from_slice(&g.data()[r * d + off..r * d + off + w]);
                    }
                    sink.add_owned(p, gr);
                    off += w;
                }
            })),
        )
    }

    /// Repeat a [n,1] column m times to [n,m].
    pub fn repeat_col(&mut self, a: NodeId, m: usize) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.shape().len(), 2);
        assert_eq!(va.shape()[1], 1);
        let n = va.shape()[0];
        let mut data = Vec::with_capacity(n * m);
        for r in 0..n {
            data.extend(std::iter::repeat(va.data()[r]).take(m));
        }
        let out = Tensor::new(&[n, m], data);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let gr: Vec<f64> =
                    (0..n).map(|r| g.data()[r * m..(r + 1) * m].iter().sum()).collect();
                sink.add_owned(a, gr);
            })),
        )
    }

    // -- linear algebra ------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        assert_eq!(va.shape().len(), 2);
        assert_eq!(vb.shape().len(), 2);
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let n = vb.shape()[1];
        assert_eq!(vb.shape()[0], k, "matmul inner dim");
        let mut out = vec![0.0; m * n];
        kernels::matmul(va.data(), vb.data(), m, k, n, &mut out);
        self.push(
            Tensor::new(&[m, n], out),
            Some(Box::new(move |g, sink| {
                // dA = G * B^T  (via matmul_nt)
                let mut ga = vec![0.0; m * k];
                kernels::matmul_nt(g.data(), vb.data(), m, n, k, &mut ga);
                sink.add_owned(a, ga);
                // dB = A^T * G
                let mut gb = vec![0.0; k * n];
                kernels::matmul_tn_acc_seq(va.data(), g.data(), m, k, n, &mut gb);
                sink.add_owned(b, gb);
            })),
        )
    }

    /// A[m,k] * B^T where B is [n,k].
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let n = vb.shape()[0];
        assert_eq!(vb.shape()[1], k, "matmul_nt inner dim");
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(va.data(), vb.data(), m, k, n, &mut out);
        self.push(
            Tensor::new(&[m, n], out),
            Some(Box::new(move |g, sink| {
                // dA = G * B
                let mut ga = vec![0.0; m * k];
                kernels::matmul(g.data(), vb.data(), m, n, k, &mut ga);
                sink.add_owned(a, ga);
                // dB = G^T * A
                let mut gb = vec![0.0; n * k];
                kernels::matmul_tn_acc_seq(g.data(), va.data(), m, n, k, &mut gb);
                sink.add_owned(b, gb);
            })),
        )
    }

    /// Broadcast-add a [d] bias over the rows of [n, d].
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(bias));
        let d = *va.shape().last().unwrap();
        assert_eq!(vb.numel(), d, "bias length");
        let n = va.numel() / d;
        let mut data = va.data().to_vec();
        for r in 0..n {
            for c in 0..d {
                data[r * d + c] += vb.data()[c];
            }
        }
        let out = Tensor::new(va.shape(), data);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a, g.data());
                let mut gb = vec![0.0; d];
                for r in 0..n {
                    for c in 0..d {
                        gb[c] += g.data()[r * d + c];
                    }
                }
                sink.add_owned(bias, gb);
            })),
        )
    }

    /// Multiply every element by a learnable scalar (a [1] node).
    pub fn mul_scalar_node(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let (va, vs) = (self.value(a).clone(), self.value(s));
        assert_eq!(vs.numel(), 1);
        let sv = vs.scalar();
        let out = Tensor::new(va.shape(), va.iter().map(|x| x * sv).collect());
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add_owned(a, g.iter().map(|v| v * sv).collect());
                let ds: f64 = g.iter().zip(va.iter()).map(|(gv, x)| gv * x).sum();
                sink.add_owned(s, vec![ds]);
            })),
        )
    }

    /// Softmax over consecutive chunks of each row of a [n, m] matrix
    /// (chunk == m gives a per-row softmax).
    pub fn softmax_chunks(&mut self, a: NodeId, chunk: usize) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.shape().len(), 2);
        let (n, m) = (va.shape()[0], va.shape()[1]);
        assert_eq!(m % chunk, 0, "chunk must divide row width");
        let mut sv = vec![0.0; n * m];
        for r in 0..n {
            for ch in (0..m).step_by(chunk) {
                let seg = &va.data()[r * m + ch..r * m + ch + chunk];
                let mx = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (i, &x) in seg.iter().enumerate() {
                    let e = (x - mx).exp();
                    sv[r * m + ch + i] = e;
                    z += e;
                }
                for v in &mut sv[r * m + ch..r * m + ch + chunk] {
                    *v /= z;
                }
            }
        }
        let out = Tensor::new(&[n, m], sv.clone());
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut gr = vec![0.0; n * m];
                for r in 0..n {
                    for ch in (0..m).step_by(chunk) {
                        let s = &sv[r * m + ch..r * m + ch + chunk];
                        let gg = &g.data()[r * m + ch..r * m + ch + chunk];
                        let dot: f64 = s.iter().zip(gg).map(|(x, y)| x * y).sum();
                        for i in 0..chunk {
                            gr[r * m + ch + i] = s[i] * (gg[i] - dot);
                        }
                    }
                }
                sink.add_owned(a, gr);
            })),
        )
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a).shape()[1];
        self.softmax_chunks(a, m)
    }

    /// LayerNorm over the last dimension with learnable gain/offset.
    pub fn layer_norm(&mut self, a: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let va = self.value(a).clone();
        let d = *va.shape().last().unwrap();
        let n = va.numel() / d;
        let vg = self.value(gamma).clone();
        let vb = self.value(beta);
        assert_eq!(vg.numel(), d);
        assert_eq!(vb.numel(), d);
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        for r in 0..n {
            let row = &va.data()[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                xhat[r * d + c] = (row[c] - mu) * is;
            }
        }
        let mut data = vec![0.0; n * d];
        for r in 0..n {
            for c in 0..d {
                data[r * d + c] = xhat[r * d + c] * vg.data()[c] + vb.data()[c];
            }
        }
        let out = Tensor::new(va.shape(), data);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut ga = vec![0.0; n * d];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for r in 0..n {
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut sum_gy = 0.0;
                    let mut sum_gy_xh = 0.0;
                    for c in 0..d {
                        let gy = grow[c] * vg.data()[c];
                        sum_gy += gy;
                        sum_gy_xh += gy * xh[c];
                        gg[c] += grow[c] * xh[c];
                        gb[c] += grow[c];
                    }
                    for c in 0..d {
                        let gy = grow[c] * vg.data()[c];
                        ga[r * d + c] =
                            inv_std[r] * (gy - sum_gy / d as f64 - xh[c] * sum_gy_xh / d as f64);
                    }
                }
                sink.add_owned(a, ga);
                sink.add_owned(gamma, gg);
                sink.add_owned(beta, gb);
            })),
        )
    }

    // -- conv / pool / resize --------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> NodeId {
        let vx = self.value(x).clone();
        let vw = self.value(w).clone();
        assert_eq!(vx.shape().len(), 3, "conv2d input CHW");
        assert_eq!(vw.shape().len(), 4, "conv2d weight OCKK");
        let spec = kernels::ConvSpec {
            c_in: vx.shape()[0],
            c_out: vw.shape()[0],
            h: vx.shape()[1],
            w: vx.shape()[2],
            kh: vw.shape()[2],
            kw: vw.shape()[3],
            sy: stride.0,
            sx: stride.1,
            py: pad.0,
            px: pad.1,
        };
        assert_eq!(vw.shape()[1], spec.c_in, "conv2d channel mismatch");
        let vb = b.map(|bid| self.value(bid).clone());
        if let Some(vb) = &vb {
            assert_eq!(vb.numel(), spec.c_out);
        }
        let (oh, ow) = (spec.out_h(), spec.out_w());
        let mut out = vec![0.0; spec.c_out * oh * ow];
        kernels::conv2d(vx.data(), vw.data(), vb.as_ref().map(|t| t.data()), &spec, &mut out);
        self.push(
            Tensor::new(&[spec.c_out, oh, ow], out),
            Some(Box::new(move |g, sink| {
                let mut gx = vec![0.0; vx.numel()];
                kernels::conv2d_bwd_input(g.data(), vw.data(), &spec, &mut gx);
                sink.add_owned(x, gx);
                let mut gw = vec![0.0; vw.numel()];
                let mut gb = b.map(|_| vec![0.0; spec.c_out]);
                kernels::conv2d_bwd_weight(vx.data(), g.data(), &spec, &mut gw, gb.as_deref_mut());
                sink.add_owned(w, gw);
                if let (Some(bid), Some(gb)) = (b, gb) {
                    sink.add_owned(bid, gb);
                }
            })),
        )
    }

    pub fn maxpool2d(&mut self, x: NodeId, k: (usize, usize), stride: (usize, usize)) -> NodeId {
        let vx = self.value(x);
        assert_eq!(vx.shape().len(), 3);
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let oh = (h - k.0) / stride.0 + 1;
        let ow = (w - k.1) / stride.1 + 1;
        let mut out = vec![f64::NEG_INFINITY; c * oh * ow];
        let mut arg = vec![0usize; c * oh * ow];
        for ch in 0..c {
            let xc = &vx.data()[ch * h * w..(ch + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = 0;
                    for ky in 0..k.0 {
                        for kx in 0..k.1 {
                            let iy = oy * stride.0 + ky;
                            let ix = ox * stride.1 + kx;
                            let v = xc[iy * w + ix];
                            if v > best {
                                best = v;
                                bi = iy * w + ix;
                            }
                        }
                    }
                    out[(ch * oh + oy) * ow + ox] = best;
                    arg[(ch * oh + oy) * ow + ox] = ch * h * w + bi;
                }
            }
        }
        let n_in = vx.numel();
        self.push(
            Tensor::new(&[c, oh, ow], out),
            Some(Box::new(move |g, sink| {
                let mut gx = vec![0.0; n_in];
                for (i, &src) in arg.iter().enumerate() {
                    gx[src] += g.data()[i];
                }
                sink.add_owned(x, gx);
            })),
        )
    }

    pub fn upsample_bilinear(&mut self, x: NodeId, sy: usize, sx: usize) -> NodeId {
        let vx = self.value(x);
        assert_eq!(vx.shape().len(), 3);
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let mut out = vec![0.0; c * h * sy * w * sx];
        kernels::upsample_bilinear(vx.data(), c, h, w, sy, sx, &mut out);
        let numel = vx.numel();
        self.push(
            Tensor::new(&[c, h * sy, w * sx], out),
            Some(Box::new(move |g, sink| {
                let mut gx = vec![0.0; numel];
                kernels::upsample_bilinear_bwd(g.data(), c, h, w, sy, sx, &mut gx);
                sink.add_owned(x, gx);
            })),
        )
    }

    /// Transpose the spatial dims of a CHW map: [C,H,W] -> [C,W,H].
    pub fn transpose_hw(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[(ch * w + xx) * h + y] = vx.data()[(ch * h + y) * w + xx];
                }
            }
        }
        self.push(
            Tensor::new(&[c, w, h], out),
            Some(Box::new(move |g, sink| {
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            gx[(ch * h + y) * w + xx] = g.data()[(ch * w + xx) * h + y];
                        }
                    }
                }
                sink.add_owned(x, gx);
            })),
        )
    }

    /// Broadcast [C,H,1] -> [C,H,w].
    pub fn broadcast_w(&mut self, x: NodeId, w: usize) -> NodeId {
        let vx = self.value(x);
        let (c, h, one) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        assert_eq!(one, 1);
        let mut out = Vec::with_capacity(c * h * w);
        for v in vx.iter() {
            out.extend(std::iter::repeat(*v).take(w));
        }
        self.push(
            Tensor::new(&[c, h, w], out),
            Some(Box::new(move |g, sink| {
                let gr: Vec<f64> =
                    (0..c * h).map(|i| g.data()[i * w..(i + 1) * w].iter().sum()).collect();
                sink.add_owned(x, gr);
            })),
        )
    }

    /// Broadcast [C,1,W] -> [C,h,W].
    pub fn broadcast_h(&mut self, x: NodeId, h: usize) -> NodeId {
        let vx = self.value(x);
        let (c, one, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        assert_eq!(one, 1);
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            let row = &vx.data()[ch * w..(ch + 1) * w];
            for _ in 0..h {
                out.extend_from_slice(row);
            }
        }
        self.push(
            Tensor::new(&[c, h, w], out),
            Some(Box::new(move |g, sink| {
                let mut gr = vec![0.0; c * w];
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            gr[ch * w + xx] += g.data()[(ch * h + y) * w + xx];
                        }
                    }
                }
                sink.add_owned(x, gr);
            })),
        )
    }

    /// Width slice of a CHW map: columns [start, start+len).
    pub fn slice_w(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let vx = self.value(x);
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        assert!(start + len <= w);
        let mut data = Vec::with_capacity(c * h * len);
        for ch in 0..c {
            for y in 0..h {
                let base = (ch * h + y) * w + start;
                data.extend_from_slice(&vx.data()[base..base + len]);
            }
        }
        self.push(
            Tensor::new(&[c, h, len], data),
            Some(Box::new(move |g, sink| {
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        let base = (ch * h + y) * w + start;
                        gx[base..base + len]
                            .copy_from_slice(&g.data()[(ch * h + y) * len..(ch * h + y + 1) * len]);
                    }
                }
                sink.add_owned(x, gx);
            })),
        )
    }

    /// Concatenate CHW maps along width.
    pub fn concat_w(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let (c, h) = {
            let v = self.value(parts[0]);
            (v.shape()[0], v.shape()[1])
        };
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).shape()[2]).collect();
        let w: usize = widths.iter().sum();
        let mut data = vec![0.0; c * h * w];
        let mut off = 0;
        for (&p, &pw) in parts.iter().zip(&widths) {
            let v = self.value(p);
            assert_eq!(v.shape()[0], c);
            assert_eq!(v.shape()[1], h);
            for ch in 0..c {
                for y in 0..h {
                    data[(ch * h + y) * w + off..(ch * h + y) * w + off + pw]
                        .copy_from_slice(&v.data()[(ch * h + y) * pw..(ch * h + y + 1) * pw]);
                }
            }
            off += pw;
        }
        let parts = parts.to_vec();
        self.push(
            Tensor::new(&[c, h, w], data),
            Some(Box::new(move |g, sink| {
                let mut off = 0;
                for (&p, &pw) in parts.iter().zip(&widths) {
                    let mut gp = vec![0.0; c * h * pw];
                    for ch in 0..c {
                        for y in 0..h {
                            gp[(ch * h + y) * pw..(ch * h + y + 1) * pw].copy_from_slice(
                                &g.data()[(ch * h + y) * w + off..(ch * h + y) * w + off + pw],
                            );
                        }
                    }
                    sink.add_owned(p, gp);
                    off += pw;
                }
            })),
        )
    }

    /// Concatenate CHW maps along the channel dimension.
    pub fn concat_c(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let (h, w) = {
            let v = self.value(parts[0]);
            (v.shape()[1], v.shape()[2])
        };
        let chans: Vec<usize> = parts.iter().map(|&p| self.value(p).shape()[0]).collect();
        let c: usize = chans.iter().sum();
        let mut data = Vec::with_capacity(c * h * w);
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.shape()[1], h);
            assert_eq!(v.shape()[2], w);
            data.extend_from_slice(v.data());
        }
        let parts = parts.to_vec();
        self.push(
            Tensor::new(&[c, h, w], data),
            Some(Box::new(move |g, sink| {
                let mut off = 0;
                for (&p, &pc) in parts.iter().zip(&chans) {
                    sink.add(p, &g.data()[off * h * w..(off + pc) * h * w]);
                    off += pc;
                }
            })),
        )
    }

    // -- sampling --------------------------------------------------------------

    /// Bilinearly sample a CHW map at `n` continuous points.
    /// `coords` is a [n,2] node of (x, y) in feature-pixel units; samples
    /// outside the map read zeros. Output [n, C]. Gradients flow to both the
    /// map and the coordinates.
    pub fn bilinear_sample(&mut self, x: NodeId, coords: NodeId) -> NodeId {
        let vx = self.value(x).clone();
        let vc = self.value(coords).clone();
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        assert_eq!(vc.shape().len(), 2);
        assert_eq!(vc.shape()[1], 2);
        let n = vc.shape()[0];
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let (px, py) = (vc.data()[i * 2], vc.data()[i * 2 + 1]);
            for ch in 0..c {
                let xc = &vx.data()[ch * h * w..(ch + 1) * h * w];
                out[i * c + ch] = kernels::bilinear_at(xc, h, w, px, py).0;
            }
        }
        self.push(
            Tensor::new(&[n, c], out),
            Some(Box::new(move |g, sink| {
                let mut gx = vec![0.0; vx.numel()];
                let mut gc = vec![0.0; n * 2];
                for i in 0..n {
                    let (px, py) = (vc.data()[i * 2], vc.data()[i * 2 + 1]);
                    for ch in 0..c {
                        let gv = g.data()[i * c + ch];
                        if gv == 0.0 {
                            continue;
                        }
                        let xc = &vx.data()[ch * h * w..(ch + 1) * h * w];
                        let (_, dx, dy) = kernels::bilinear_at(xc, h, w, px, py);
                        gc[i * 2] += gv * dx;
                        gc[i * 2 + 1] += gv * dy;
                        kernels::bilinear_scatter(
                            &mut gx[ch * h * w..(ch + 1) * h * w],
                            h,
                            w,
                            px,
                            py,
                            gv,
                        );
                    }
                }
                sink.add_owned(x, gx);
                sink.add_owned(coords, gc);
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_rule_through_mul_and_sum() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]));
        let b = t.leaf(Tensor::new(&[3], vec![4.0, 5.0, 6.0]));
        let p = t.mul(a, b);
        let loss = t.sum(p);
        assert_eq!(t.value(loss).scalar(), 32.0);
        let g = t.backward(loss);
        assert_eq!(g.get(a).unwrap(), &[4.0, 5.0, 6.0]);
        assert_eq!(g.get(b).unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::scalar_value(3.0));
        let s = t.add(a, a); // 2a
        let loss = t.sum(s);
        let g = t.backward(loss);
        assert_eq!(g.get(a).unwrap(), &[2.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(&[2, 3], vec![0.1, 1.0, -2.0, 5.0, 5.0, 5.0]));
        let s = t.softmax_rows(a);
        let v = t.value(s);
        assert!((v.data()[0..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((v.data()[3] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[4]));
        let s = t.sigmoid(a);
        assert!(t.value(s).iter().all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn logit_is_sigmoid_inverse() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(&[3], vec![0.2, 0.5, 0.9]));
        let l = t.logit_clamped(a, 1e-4);
        let s = t.sigmoid(l);
        for (x, y) in t.value(a).iter().zip(t.value(s).iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn select_rows_scatters_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(&[3, 2], vec![1., 2., 3., 4., 5., 6.]));
        let sel = t.select_rows(a, vec![2, 0, 2]);
        let loss = t.sum(sel);
        let g = t.backward(loss);
        assert_eq!(g.get(a).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(&[2, 2, 3], (0..12).map(|v| v as f64).collect()));
        let tr = t.transpose_hw(a);
        let back = t.transpose_hw(tr);
        assert_eq!(t.value(back).data(), t.value(a).data());
        assert_eq!(t.value(tr).shape(), &[2, 3, 2]);
    }
}
