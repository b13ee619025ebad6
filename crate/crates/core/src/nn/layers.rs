use super::{Graph, Init, ParamId, ParamStore, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, din: usize, dout: usize, bias: bool) -> Self {
        let w = store.add(format!("{name}.w"), init.trunc_normal(&[din, dout], INIT_STD), true);
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[dout]), true));
        Self { w, b, din, dout }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.linear(x, w, b)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.value_mut(self.w).data_mut().fill(0.0);
        if let Some(b) = self.b {
            store.value_mut(b).data_mut().fill(0.0);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0), false),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d]), false),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Pre-norm transformer block: self-attention and a GELU MLP, each behind a
/// residual connection.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d: usize, heads: usize, mlp_ratio: usize) -> Self {
        assert!(heads > 0 && d.is_multiple_of(heads), "width {d} not divisible by {heads} heads");
        let hidden = d * mlp_ratio;
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            qkv: Linear::new(store, init, &format!("{name}.attn.qkv"), d, 3 * d, true),
            proj: Linear::new(store, init, &format!("{name}.attn.proj"), d, d, true),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            fc1: Linear::new(store, init, &format!("{name}.mlp.fc1"), d, hidden, true),
            fc2: Linear::new(store, init, &format!("{name}.mlp.fc2"), hidden, d, true),
            heads,
        }
    }

    /// `b x t x d -> b x t x d`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        self.forward_traced(g, x).0
    }

    /// Forward pass that also returns the attention node, whose saved
    /// probabilities can be read with [`Graph::attention_probs`].
    pub fn forward_traced(&self, g: &mut Graph, x: Var) -> (Var, Var) {
        let h = self.ln1.forward(g, x);
        let qkv = self.qkv.forward(g, h);
        let att = g.attention(qkv, self.heads);
        let o = self.proj.forward(g, att);
        let x = g.add(x, o);
        let h = self.ln2.forward(g, x);
        let h = self.fc1.forward(g, h);
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h);
        (g.add(x, h), att)
    }

    /// Zeroes both residual-branch output projections, making the block the
    /// identity map.
    pub fn zero_outputs(&self, store: &mut ParamStore) {
        self.proj.zero(store);
        self.fc2.zero(store);
    }
}

/// Square-kernel convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        let fan_in = cin * kernel * kernel;
        Self {
            w: store.add(format!("{name}.w"), init.kaiming(&[cout, cin, kernel, kernel], fan_in), true),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[cout]), true),
            stride,
            pad,
            kernel,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }
}
