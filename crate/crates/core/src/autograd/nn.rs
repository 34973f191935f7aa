use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};

/// Affine map `x W + b` with `W: in×out`, `b: 1×out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / d_in as f64).sqrt();
        Self {
            weight: store.add_normal(format!("{name}.weight"), (d_in, d_out), std, rng),
            bias: store.add_zeros(format!("{name}.bias"), (1, d_out)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add_ones(format!("{name}.gain"), (1, d)),
            bias: store.add_zeros(format!("{name}.bias"), (1, d)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Two-layer GELU MLP.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Multi-head scaled dot-product attention with separate q/k/v/output maps.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && d % heads == 0, "d_model must divide into heads");
        Self {
            query: Linear::new(store, &format!("{name}.query"), d, d, rng),
            key: Linear::new(store, &format!("{name}.key"), d, d, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, rng),
            output: Linear::new(store, &format!("{name}.output"), d, d, rng),
            heads,
        }
    }

    /// `queries` attend over `context`; with `causal`, row i only sees
    /// context rows `0..=i` (self-attention use).
    pub fn forward(&self, g: &mut Graph, queries: Var, context: Var, causal: bool) -> Var {
        let q = self.query.forward(g, queries);
        let k = self.key.forward(g, context);
        let v = self.value.forward(g, context);
        let d = g.shape(q).1;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores, causal);
            outs.push(g.matmul(attn, vh));
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)
        };
        self.output.forward(g, merged)
    }
}
