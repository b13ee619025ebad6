//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its value. [`Graph::backward`] walks the tape in reverse and returns the
//! gradient of a scalar with respect to every node that needs one.

use std::collections::HashMap;

use super::kernels::{self, gemm, ConvGeom, Layout};
use super::{ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBcast(Var, Var),
    MulScalarVar(Var, Var),
    Scale(Var, f64),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMulNt(Var, Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Exp(Var),
    Log(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    ChwToTokens(Var),
    CatTokens(Var, Var),
    GatherTokens {
        x: Var,
        idx: Vec<usize>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
    Transpose(Var),
    Diag(Var),
    SumLast(Var),
    Sum(Var),
    Mean(Var),
    RowL2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'s> {
    nodes: Vec<Node>,
    store: Option<&'s ParamStore>,
    param_vars: HashMap<ParamId, Var>,
    leaf_params: HashMap<usize, ParamId>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s> Graph<'s> {
    /// Graph without parameters, for tests on raw inputs.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            param_vars: HashMap::new(),
            leaf_params: HashMap::new(),
        }
    }

    pub fn with_params(store: &'s ParamStore) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store.expect("graph has no parameter store")
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; gradients stop here.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input leaf that receives a gradient.
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf for a stored parameter; repeated requests share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store();
        store.mark_accessed(id);
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.param_vars.insert(id, v);
        self.leaf_params.insert(v.0, id);
        v
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.input(t)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).unwrap();
        let ng = self.ng(x);
        self.push(out, op, ng)
    }

    fn binary_same(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise op on mismatched shapes");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape(), data).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a + b` where `b` repeats over the leading elements of `a`
    /// (bias rows, position embeddings).
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let m = tb.numel();
        assert!(m > 0 && ta.numel() % m == 0, "add_bcast: {:?} + {:?}", ta.shape(), tb.shape());
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i % m])
            .collect();
        let out = Tensor::new(ta.shape(), data).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::AddBcast(a, b), ng)
    }

    /// `a * s` for a one-element `s`.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).numel(), 1);
        let sv = self.value(s).data()[0];
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| v * sv).collect()).unwrap();
        let ng = self.ng(a) || self.ng(s);
        self.push(out, Op::MulScalarVar(a, s), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |v| v * c, Op::Scale(a, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::log_sigmoid, Op::LogSigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    /// `x W + b` over the last axis; `W` is `in x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        let (din, dout) = (tw.shape()[0], tw.shape()[1]);
        let xs = tx.shape();
        assert_eq!(*xs.last().unwrap(), din, "linear: input width {xs:?} vs weight {:?}", tw.shape());
        let rows = tx.numel() / din;
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            let tb = self.value(b);
            assert_eq!(tb.numel(), dout);
            for r in out.chunks_mut(dout) {
                r.copy_from_slice(tb.data());
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(rows, din, dout, 1.0, tx.data(), Layout::rm(din), tw.data(), Layout::rm(dout), beta, &mut out, Layout::rm(dout));
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = dout;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor::new(&shape, out).unwrap(), Op::Linear { x, w, b }, ng)
    }

    /// `A B^T` for `A: m x k`, `B: n x k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let n = tb.shape()[0];
        assert_eq!(tb.shape()[1], k);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, ta.data(), Layout::rm(k), tb.data(), Layout::tr(k), 0.0, &mut out, Layout::rm(n));
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&[m, n], out).unwrap(), Op::MatMulNt(a, b), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let tx = self.value(x);
        let d = *tx.shape().last().unwrap();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(g.len(), d);
        let (mut out, _) = normalize_rows(tx.data(), d, eps);
        for r in out.chunks_mut(d) {
            for j in 0..d {
                r[j] = r[j] * g[j] + bt[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let t = Tensor::new(tx.shape(), out).unwrap();
        self.push(t, Op::LayerNorm { x, gamma, beta, eps }, ng)
    }

    fn rowwise(&mut self, x: Var, f: fn(&[f64], &mut [f64]), op: Op) -> Var {
        let tx = self.value(x);
        let d = *tx.shape().last().unwrap();
        let mut out = vec![0.0; tx.numel()];
        for (xr, yr) in tx.data().chunks(d).zip(out.chunks_mut(d)) {
            f(xr, yr);
        }
        let ng = self.ng(x);
        let t = Tensor::new(tx.shape(), out).unwrap();
        self.push(t, op, ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        self.rowwise(x, kernels::softmax_row, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        self.rowwise(x, kernels::log_softmax_row, Op::LogSoftmax(x))
    }

    /// Multi-head scaled dot-product self-attention without masking.
    /// `qkv` is `b x t x 3d` holding `[q | k | v]` per token; output `b x t x d`.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Var {
        let t = self.value(qkv);
        let (b, n, d3) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let d = d3 / 3;
        assert!(d3 % 3 == 0 && d % heads == 0, "attention: width {d3} with {heads} heads");
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut probs = vec![0.0; b * heads * n * n];
        let mut out = vec![0.0; b * n * d];
        let src = t.data();
        for bi in 0..b {
            let base = &src[bi * n * d3..(bi + 1) * n * d3];
            for h in 0..heads {
                let p = &mut probs[(bi * heads + h) * n * n..(bi * heads + h + 1) * n * n];
                let q = &base[h * hd..];
                let k = &base[d + h * hd..];
                let v = &base[2 * d + h * hd..];
                gemm(n, hd, n, scale, q, Layout::strided(d3), k, Layout::tr(d3), 0.0, p, Layout::rm(n));
                for row in p.chunks_mut(n) {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for e in row.iter_mut() {
                        *e = (*e - max).exp();
                        s += *e;
                    }
                    row.iter_mut().for_each(|e| *e /= s);
                }
                let o = &mut out[bi * n * d + h * hd..];
                gemm(n, n, hd, 1.0, p, Layout::rm(n), v, Layout::strided(d3), 0.0, o, Layout::strided(d));
            }
        }
        let ng = self.ng(qkv);
        self.push(Tensor::new(&[b, n, d], out).unwrap(), Op::Attention { qkv, heads, probs }, ng)
    }

    /// Attention probabilities saved by an [`Graph::attention`] node,
    /// laid out `b x heads x t x t`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// 2-D convolution (cross-correlation) with square kernels.
    /// `x: b x c x h x w`, `w: o x c x k x k`, `bias: o`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(bias));
        let (b, c, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (o, k) = (tw.shape()[0], tw.shape()[2]);
        assert_eq!(tw.shape()[1], c, "conv2d: channel mismatch");
        let geom = ConvGeom { c, h, w: wd, k, stride, pad };
        let (ho, wo) = geom.out_hw();
        let npos = ho * wo;
        let mut cols = vec![0.0; geom.col_rows() * npos];
        let mut out = vec![0.0; b * o * npos];
        for bi in 0..b {
            kernels::im2col(&tx.data()[bi * c * h * wd..(bi + 1) * c * h * wd], geom, &mut cols);
            let ob = &mut out[bi * o * npos..(bi + 1) * o * npos];
            for (oc, row) in ob.chunks_mut(npos).enumerate() {
                row.iter_mut().for_each(|v| *v = tb.data()[oc]);
            }
            gemm(o, geom.col_rows(), npos, 1.0, tw.data(), Layout::rm(geom.col_rows()), &cols, Layout::rm(npos), 1.0, ob, Layout::rm(npos));
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(bias);
        self.push(Tensor::new(&[b, o, ho, wo], out).unwrap(), Op::Conv2d { x, w, b: bias, geom }, ng)
    }

    /// `b x c x h x w` feature map to `b x (h w) x c` tokens.
    pub fn chw_to_tokens(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (b, c, hw) = (t.shape()[0], t.shape()[1], t.shape()[2] * t.shape()[3]);
        let mut out = vec![0.0; t.numel()];
        for bi in 0..b {
            for ci in 0..c {
                for p in 0..hw {
                    out[(bi * hw + p) * c + ci] = t.data()[(bi * c + ci) * hw + p];
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[b, hw, c], out).unwrap(), Op::ChwToTokens(x), ng)
    }

    /// Concatenates token sequences `b x ta x d` and `b x tb x d`; either side
    /// may have batch 1 and is then shared by every sample.
    pub fn cat_tokens(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ba, na, d) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (bb, nb) = (tb.shape()[0], tb.shape()[1]);
        assert_eq!(tb.shape()[2], d);
        let batch = ba.max(bb);
        assert!((ba == batch || ba == 1) && (bb == batch || bb == 1));
        let n = na + nb;
        let mut out = Vec::with_capacity(batch * n * d);
        for bi in 0..batch {
            let ia = if ba == 1 { 0 } else { bi };
            let ib = if bb == 1 { 0 } else { bi };
            out.extend_from_slice(&ta.data()[ia * na * d..(ia + 1) * na * d]);
            out.extend_from_slice(&tb.data()[ib * nb * d..(ib + 1) * nb * d]);
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&[batch, n, d], out).unwrap(), Op::CatTokens(a, b), ng)
    }

    /// Picks token `idx[i]` of sample `i`: `b x t x d -> b x d`.
    pub fn gather_tokens(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let t = self.value(x);
        let (b, n, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        assert_eq!(idx.len(), b);
        let mut out = Vec::with_capacity(b * d);
        for (bi, &i) in idx.iter().enumerate() {
            assert!(i < n);
            out.extend_from_slice(&t.data()[(bi * n + i) * d..(bi * n + i + 1) * d]);
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[b, d], out).unwrap(), Op::GatherTokens { x, idx }, ng)
    }

    /// Gathers leading-axis rows: `u x ... -> idx.len() x ...`.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let t = self.value(x);
        let u = t.shape()[0];
        let w = t.numel() / u;
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in &idx {
            assert!(i < u, "gather_rows: index {i} out of {u}");
            out.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        let ng = self.ng(x);
        self.push(Tensor::new(&shape, out).unwrap(), Op::GatherRows { x, idx }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape).expect("reshape");
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let out = (0..m * n).map(|i| t.data()[(i % m) * n + i / m]).collect();
        let ng = self.ng(x);
        self.push(Tensor::new(&[n, m], out).unwrap(), Op::Transpose(x), ng)
    }

    pub fn diag(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.shape()[0];
        assert_eq!(t.shape(), &[n, n]);
        let out = (0..n).map(|i| t.data()[i * n + i]).collect();
        let ng = self.ng(x);
        self.push(Tensor::new(&[n], out).unwrap(), Op::Diag(x), ng)
    }

    pub fn sum_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = *t.shape().last().unwrap();
        let out: Vec<f64> = t.data().chunks(d).map(|r| r.iter().sum()).collect();
        let shape = if t.shape().len() > 1 {
            t.shape()[..t.shape().len() - 1].to_vec()
        } else {
            vec![1]
        };
        let ng = self.ng(x);
        self.push(Tensor::new(&shape, out).unwrap(), Op::SumLast(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Scales each row (last axis) to unit Euclidean norm.
    pub fn row_l2_normalize(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = *t.shape().last().unwrap();
        let mut out = t.data().to_vec();
        let mut norms = Vec::with_capacity(t.numel() / d);
        for r in out.chunks_mut(d) {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let ng = self.ng(x);
        let t = Tensor::new(t.shape(), out).unwrap();
        self.push(t, Op::RowL2Normalize { x, norms }, ng)
    }

    /// Reverse pass from a one-element node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        let mut params = HashMap::new();
        for (&node, &pid) in &self.leaf_params {
            if let Some(g) = grads[node].take() {
                params.insert(pid, g);
            }
        }
        Gradients { nodes: grads, params }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.ng(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = self.acc(grads, v) {
                        add_into(g, gy);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(g) = self.acc(grads, *a) {
                    add_into(g, gy);
                }
                if let Some(g) = self.acc(grads, *b) {
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g -= d);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(g) = self.acc(grads, *a) {
                    for ((g, d), o) in g.iter_mut().zip(gy).zip(vb) {
                        *g += d * o;
                    }
                }
                if let Some(g) = self.acc(grads, *b) {
                    for ((g, d), o) in g.iter_mut().zip(gy).zip(va) {
                        *g += d * o;
                    }
                }
            }
            Op::AddBcast(a, b) => {
                if let Some(g) = self.acc(grads, *a) {
                    add_into(g, gy);
                }
                if let Some(g) = self.acc(grads, *b) {
                    let m = g.len();
                    for (j, d) in gy.iter().enumerate() {
                        g[j % m] += d;
                    }
                }
            }
            Op::MulScalarVar(a, s) => {
                let sv = self.value(*s).data()[0];
                if let Some(g) = self.acc(grads, *a) {
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g += d * sv);
                }
                let va = self.value(*a).data();
                if let Some(g) = self.acc(grads, *s) {
                    g[0] += gy.iter().zip(va).map(|(d, x)| d * x).sum::<f64>();
                }
            }
            Op::Scale(a, c) => {
                if let Some(g) = self.acc(grads, *a) {
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g += d * c);
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (din, dout) = (tw.shape()[0], tw.shape()[1]);
                let rows = tx.numel() / din;
                if let Some(g) = self.acc(grads, *x) {
                    gemm(rows, dout, din, 1.0, gy, Layout::rm(dout), tw.data(), Layout::tr(dout), 1.0, g, Layout::rm(din));
                }
                if let Some(g) = self.acc(grads, *w) {
                    gemm(din, rows, dout, 1.0, tx.data(), Layout::tr(din), gy, Layout::rm(dout), 1.0, g, Layout::rm(dout));
                }
                if let Some(b) = b {
                    if let Some(g) = self.acc(grads, *b) {
                        for r in gy.chunks(dout) {
                            add_into(g, r);
                        }
                    }
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                if let Some(g) = self.acc(grads, *a) {
                    gemm(m, n, k, 1.0, gy, Layout::rm(n), tb.data(), Layout::rm(k), 1.0, g, Layout::rm(k));
                }
                if let Some(g) = self.acc(grads, *b) {
                    gemm(n, m, k, 1.0, gy, Layout::tr(n), ta.data(), Layout::rm(k), 1.0, g, Layout::rm(k));
                }
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                if let Some(g) = self.acc(grads, *x) {
                    for ((g, d), v) in g.iter_mut().zip(gy).zip(vx) {
                        if *v > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                if let Some(g) = self.acc(grads, *x) {
                    for ((g, d), v) in g.iter_mut().zip(gy).zip(vx) {
                        *g += d * kernels::gelu_grad(*v);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(g) = self.acc(grads, *x) {
                    for ((g, d), s) in g.iter_mut().zip(gy).zip(y) {
                        *g += d * s * (1.0 - s);
                    }
                }
            }
            Op::LogSigmoid(x) => {
                let vx = self.value(*x).data();
                if let Some(g) = self.acc(grads, *x) {
                    for ((g, d), v) in g.iter_mut().zip(gy).zip(vx) {
                        *g += d * kernels::sigmoid(-v);
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(g) = self.acc(grads, *x) {
                    for ((g, d), e) in g.iter_mut().zip(gy).zip(y) {
                        *g += d * e;
                    }
                }
            }
            Op::Log(x) => {
                let vx = self.value(*x).data();
                if let Some(g) = self.acc(grads, *x) {
                    for ((g, d), v) in g.iter_mut().zip(gy).zip(vx) {
                        *g += d / v;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let gv = self.value(*gamma).data();
                let d = gv.len();
                let (xhat, rstd) = normalize_rows(self.value(*x).data(), d, *eps);
                if let Some(g) = self.acc(grads, *gamma) {
                    for (r, xr) in gy.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            g[j] += r[j] * xr[j];
                        }
                    }
                }
                if let Some(g) = self.acc(grads, *beta) {
                    for r in gy.chunks(d) {
                        add_into(g, r);
                    }
                }
                if let Some(g) = self.acc(grads, *x) {
                    for (((gr, dr), xr), rs) in g.chunks_mut(d).zip(gy.chunks(d)).zip(xhat.chunks(d)).zip(&rstd) {
                        let dxh: Vec<f64> = (0..d).map(|j| dr[j] * gv[j]).collect();
                        let m1 = dxh.iter().sum::<f64>() / d as f64;
                        let m2 = dxh.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gr[j] += rs * (dxh[j] - m1 - xr[j] * m2);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let d = *node.value.shape().last().unwrap();
                if let Some(g) = self.acc(grads, *x) {
                    for ((gr, dr), yr) in g.chunks_mut(d).zip(gy.chunks(d)).zip(y.chunks(d)) {
                        let dot: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let d = *node.value.shape().last().unwrap();
                if let Some(g) = self.acc(grads, *x) {
                    for ((gr, dr), yr) in g.chunks_mut(d).zip(gy.chunks(d)).zip(y.chunks(d)) {
                        let s: f64 = dr.iter().sum();
                        for j in 0..d {
                            gr[j] += dr[j] - yr[j].exp() * s;
                        }
                    }
                }
            }
            Op::Attention { qkv, heads, probs } => {
                let t = self.value(*qkv);
                let (b, n, d3) = (t.shape()[0], t.shape()[1], t.shape()[2]);
                let d = d3 / 3;
                let hd = d / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let src = t.data();
                let Some(g) = self.acc(grads, *qkv) else { return };
                let mut dp = vec![0.0; n * n];
                for bi in 0..b {
                    let base = &src[bi * n * d3..(bi + 1) * n * d3];
                    let go = &gy[bi * n * d..(bi + 1) * n * d];
                    let gb = &mut g[bi * n * d3..(bi + 1) * n * d3];
                    for h in 0..*heads {
                        let p = &probs[(bi * heads + h) * n * n..(bi * heads + h + 1) * n * n];
                        let dout = &go[h * hd..];
                        // dP = dO V^T
                        gemm(n, hd, n, 1.0, dout, Layout::strided(d), &base[2 * d + h * hd..], Layout::tr(d3), 0.0, &mut dp, Layout::rm(n));
                        // dV += P^T dO
                        gemm(n, n, hd, 1.0, p, Layout::tr(n), dout, Layout::strided(d), 1.0, &mut gb[2 * d + h * hd..], Layout::strided(d3));
                        for (dr, pr) in dp.chunks_mut(n).zip(p.chunks(n)) {
                            let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                            for (dv, pv) in dr.iter_mut().zip(pr) {
                                *dv = pv * (*dv - dot);
                            }
                        }
                        // dQ += scale dS K ; dK += scale dS^T Q
                        gemm(n, n, hd, scale, &dp, Layout::rm(n), &base[d + h * hd..], Layout::strided(d3), 1.0, &mut gb[h * hd..], Layout::strided(d3));
                        gemm(n, n, hd, scale, &dp, Layout::tr(n), &base[h * hd..], Layout::strided(d3), 1.0, &mut gb[d + h * hd..], Layout::strided(d3));
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let batch = tx.shape()[0];
                let o = tw.shape()[0];
                let (ho, wo) = geom.out_hw();
                let npos = ho * wo;
                let rows = geom.col_rows();
                let plane = geom.c * geom.h * geom.w;
                if let Some(g) = self.acc(grads, *b) {
                    for bi in 0..batch {
                        for oc in 0..o {
                            g[oc] += gy[(bi * o + oc) * npos..(bi * o + oc + 1) * npos].iter().sum::<f64>();
                        }
                    }
                }
                let need_w = self.ng(*w);
                let need_x = self.ng(*x);
                let mut cols = vec![0.0; rows * npos];
                if need_w {
                    let mut gw = vec![0.0; tw.numel()];
                    for bi in 0..batch {
                        kernels::im2col(&tx.data()[bi * plane..(bi + 1) * plane], *geom, &mut cols);
                        gemm(o, npos, rows, 1.0, &gy[bi * o * npos..(bi + 1) * o * npos], Layout::rm(npos), &cols, Layout::tr(npos), 1.0, &mut gw, Layout::rm(rows));
                    }
                    add_into(self.acc(grads, *w).unwrap(), &gw);
                }
                if need_x {
                    let mut gx = vec![0.0; tx.numel()];
                    for bi in 0..batch {
                        gemm(rows, o, npos, 1.0, tw.data(), Layout::tr(rows), &gy[bi * o * npos..(bi + 1) * o * npos], Layout::rm(npos), 0.0, &mut cols, Layout::rm(npos));
                        kernels::col2im(&cols, *geom, &mut gx[bi * plane..(bi + 1) * plane]);
                    }
                    add_into(self.acc(grads, *x).unwrap(), &gx);
                }
            }
            Op::ChwToTokens(x) => {
                let s = self.value(*x).shape();
                let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                if let Some(g) = self.acc(grads, *x) {
                    for bi in 0..b {
                        for ci in 0..c {
                            for p in 0..hw {
                                g[(bi * c + ci) * hw + p] += gy[(bi * hw + p) * c + ci];
                            }
                        }
                    }
                }
            }
            Op::CatTokens(a, b) => {
                let s = node.value.shape();
                let (batch, d) = (s[0], s[2]);
                let na = self.value(*a).shape()[1];
                let n = s[1];
                let nb = n - na;
                let ba = self.value(*a).shape()[0];
                let bb = self.value(*b).shape()[0];
                if let Some(g) = self.acc(grads, *a) {
                    for bi in 0..batch {
                        let ia = if ba == 1 { 0 } else { bi };
                        add_into(&mut g[ia * na * d..(ia + 1) * na * d], &gy[bi * n * d..(bi * n + na) * d]);
                    }
                }
                if let Some(g) = self.acc(grads, *b) {
                    for bi in 0..batch {
                        let ib = if bb == 1 { 0 } else { bi };
                        add_into(&mut g[ib * nb * d..(ib + 1) * nb * d], &gy[(bi * n + na) * d..(bi + 1) * n * d]);
                    }
                }
            }
            Op::GatherTokens { x, idx } => {
                let s = self.value(*x).shape();
                let (n, d) = (s[1], s[2]);
                if let Some(g) = self.acc(grads, *x) {
                    for (bi, &i) in idx.iter().enumerate() {
                        add_into(&mut g[(bi * n + i) * d..(bi * n + i + 1) * d], &gy[bi * d..(bi + 1) * d]);
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let t = self.value(*x);
                let w = t.numel() / t.shape()[0];
                if let Some(g) = self.acc(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut g[i * w..(i + 1) * w], &gy[r * w..(r + 1) * w]);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(g) = self.acc(grads, *x) {
                    add_into(g, gy);
                }
            }
            Op::Transpose(x) => {
                let s = self.value(*x).shape();
                let (m, n) = (s[0], s[1]);
                if let Some(g) = self.acc(grads, *x) {
                    for r in 0..m {
                        for c in 0..n {
                            g[r * n + c] += gy[c * m + r];
                        }
                    }
                }
            }
            Op::Diag(x) => {
                let n = node.value.numel();
                if let Some(g) = self.acc(grads, *x) {
                    for (i, d) in gy.iter().enumerate() {
                        g[i * n + i] += d;
                    }
                }
            }
            Op::SumLast(x) => {
                let d = *self.value(*x).shape().last().unwrap();
                if let Some(g) = self.acc(grads, *x) {
                    for (gr, dv) in g.chunks_mut(d).zip(gy) {
                        gr.iter_mut().for_each(|v| *v += dv);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(g) = self.acc(grads, *x) {
                    g.iter_mut().for_each(|v| *v += gy[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(g) = self.acc(grads, *x) {
                    let s = gy[0] / g.len() as f64;
                    g.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::RowL2Normalize { x, norms } => {
                let d = *node.value.shape().last().unwrap();
                if let Some(g) = self.acc(grads, *x) {
                    for (((gr, dr), yr), nrm) in g.chunks_mut(d).zip(gy.chunks(d)).zip(y.chunks(d)).zip(norms) {
                        let dot: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gr[j] += (dr[j] - yr[j] * dot) / nrm;
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// Per-row `(x - mean) / std` and the reciprocal standard deviations.
fn normalize_rows(x: &[f64], d: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut out = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(x.len() / d);
    for r in x.chunks(d) {
        let mean = r.iter().sum::<f64>() / d as f64;
        let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        out.extend(r.iter().map(|v| (v - mean) * rs));
        rstd.push(rs);
    }
    (out, rstd)
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Vec<f64>>,
}

impl Gradients {
    /// Gradient of a non-parameter node, if it needed one.
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0)?.as_deref()
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(k, v)| (*k, v.as_slice()))
    }
}
