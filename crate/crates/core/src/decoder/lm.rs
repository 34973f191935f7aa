use ndarray::{s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::datasets::{BOS, EOS};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub d_dec: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    /// Longest generated sequence, EOS included.
    pub max_len: usize,
}

/// Affine map from query states (`d_model`) into the decoder embedding space.
#[derive(Clone, Copy, Debug)]
pub struct PrefixProjection {
    pub proj: Linear,
}

impl PrefixProjection {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d_model: usize, d_dec: usize, rng: &mut R) -> Self {
        Self {
            proj: Linear::new(store, "prefix.proj", d_model, d_dec, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, h_q: Var) -> Var {
        self.proj.forward(g, h_q)
    }
}

#[derive(Clone, Copy, Debug)]
struct LmLayer {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

/// Pre-norm causal transformer LM. Prefix rows (if any) come first and carry
/// no position embedding; text positions start at 0 with BOS.
#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    layers: Vec<LmLayer>,
    final_ln: LayerNorm,
    head: Linear,
    pub config: DecoderConfig,
}

impl LanguageModel {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &DecoderConfig, rng: &mut R) -> Self {
        let d = cfg.d_dec;
        let layers = (0..cfg.num_layers)
            .map(|l| {
                let name = format!("lm.layers.{l}");
                LmLayer {
                    ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d),
                    attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, cfg.num_heads, rng),
                    ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d),
                    ffn: FeedForward::new(store, &format!("{name}.ffn"), d, cfg.ffn_mult * d, rng),
                }
            })
            .collect();
        Self {
            token_embedding: store.add_normal("lm.token_embedding", (cfg.vocab_size, d), 0.5, rng),
            position_embedding: store.add_normal("lm.position_embedding", (cfg.max_len + 1, d), 0.1, rng),
            layers,
            final_ln: LayerNorm::new(store, "lm.final_ln", d),
            head: Linear::new(store, "lm.head", d, cfg.vocab_size, rng),
            config: cfg.clone(),
        }
    }

    pub fn head(&self) -> Linear {
        self.head
    }

    pub fn final_ln(&self) -> LayerNorm {
        self.final_ln
    }

    fn check_inputs(&self, inputs: &[u32]) -> Result<()> {
        if inputs.is_empty() || inputs.len() > self.config.max_len + 1 {
            return Err(Error::LengthExceeded {
                len: inputs.len(),
                max_len: self.config.max_len,
            });
        }
        Ok(())
    }

    /// Logits for every text position of `[prefix ; inputs]`.
    pub fn logits(&self, g: &mut Graph, prefix: Option<Var>, inputs: &[u32]) -> Result<Var> {
        self.check_inputs(inputs)?;
        let ids: Vec<usize> = inputs.iter().map(|&t| t as usize).collect();
        let table = g.param(self.token_embedding);
        let emb = g.gather_rows(table, &ids);
        let pos_table = g.param(self.position_embedding);
        let pos = g.slice_rows(pos_table, 0, ids.len());
        let text = g.add(emb, pos);
        let (mut h, offset) = match prefix {
            Some(p) => {
                let rows = g.shape(p).0;
                (g.concat_rows(&[p, text]), rows)
            }
            None => (text, 0),
        };
        for layer in &self.layers {
            let x = layer.ln_attn.forward(g, h);
            let a = layer.attn.forward(g, x, x, true);
            h = g.add(h, a);
            let x = layer.ln_ffn.forward(g, h);
            let f = layer.ffn.forward(g, x);
            h = g.add(h, f);
        }
        if offset > 0 {
            h = g.slice_rows(h, offset, ids.len());
        }
        let h = self.final_ln.forward(g, h);
        Ok(self.head.forward(g, h))
    }

    /// Per-token log-probabilities of `tokens` (EOS-terminated) under teacher
    /// forcing, as a `1×n` row.
    pub fn token_logprobs(&self, g: &mut Graph, prefix: Option<Var>, tokens: &[u32]) -> Result<Var> {
        check_terminated(tokens, self.config.max_len)?;
        self.candidate_logprobs(g, prefix, tokens)
    }

    /// Like [`Self::token_logprobs`] but also accepts sequences cut at the
    /// length cap without EOS, as beam search may return them.
    pub fn candidate_logprobs(&self, g: &mut Graph, prefix: Option<Var>, tokens: &[u32]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::NotEosTerminated);
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::LengthExceeded {
                len: tokens.len(),
                max_len: self.config.max_len,
            });
        }
        let mut inputs = Vec::with_capacity(tokens.len());
        inputs.push(BOS);
        inputs.extend_from_slice(&tokens[..tokens.len() - 1]);
        let logits = self.logits(g, prefix, &inputs)?;
        let logp = g.log_softmax_rows(logits);
        let cols: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let picked = g.pick_per_row(logp, &cols);
        Ok(g.transpose(picked))
    }

    /// Summed log-probability of an EOS-terminated sequence.
    pub fn sequence_logprob_var(&self, g: &mut Graph, prefix: Option<Var>, tokens: &[u32]) -> Result<Var> {
        let lp = self.token_logprobs(g, prefix, tokens)?;
        Ok(g.sum_all(lp))
    }

    // ---- cached inference ------------------------------------------------

    /// Runs `[prefix ; BOS]` and returns a state ready to score the first token.
    pub fn start(&self, store: &ParamStore, prefix: Option<&Array2<f64>>) -> LmState {
        let d = self.config.d_dec;
        let mut state = LmState {
            keys: vec![Array2::zeros((0, d)); self.layers.len()],
            values: vec![Array2::zeros((0, d)); self.layers.len()],
            text_pos: 0,
            logprobs: Vec::new(),
        };
        let bos = self.embed_token(store, BOS, 0);
        let x = match prefix {
            Some(p) => ndarray::concatenate(Axis(0), &[p.view(), bos.view()]).expect("prefix width"),
            None => bos,
        };
        self.feed(store, &mut state, x);
        state
    }

    /// Appends `token` to a state and returns the successor state.
    pub fn advance(&self, store: &ParamStore, state: &LmState, token: u32) -> LmState {
        let mut next = state.clone();
        let x = self.embed_token(store, token, state.text_pos);
        self.feed(store, &mut next, x);
        next
    }

    fn embed_token(&self, store: &ParamStore, token: u32, pos: usize) -> Array2<f64> {
        let e = store.get(self.token_embedding).row(token as usize).to_owned();
        let p = store.get(self.position_embedding).row(pos.min(self.config.max_len)).to_owned();
        (e + p).insert_axis(Axis(0))
    }

    fn feed(&self, store: &ParamStore, state: &mut LmState, mut h: Array2<f64>) {
        for (l, layer) in self.layers.iter().enumerate() {
            let x = layer_norm(store, layer.ln_attn, &h);
            let a = cached_attention(store, &layer.attn, &x, &mut state.keys[l], &mut state.values[l]);
            h = h + a;
            let x = layer_norm(store, layer.ln_ffn, &h);
            let up = affine(store, layer.ffn.up, &x).mapv(gelu);
            h = h + affine(store, layer.ffn.down, &up);
        }
        let last = h.slice(s![h.nrows() - 1..h.nrows(), ..]).to_owned();
        let logits = affine(store, self.head, &layer_norm(store, self.final_ln, &last));
        state.logprobs = log_softmax(logits.row(0).as_slice().expect("contiguous"));
        state.text_pos += 1;
    }

    /// Summed log-probability via the cached path.
    pub fn sequence_logprob(&self, store: &ParamStore, prefix: Option<&Array2<f64>>, tokens: &[u32]) -> Result<f64> {
        check_terminated(tokens, self.config.max_len)?;
        let mut state = self.start(store, prefix);
        let mut total = 0.0;
        for (i, &t) in tokens.iter().enumerate() {
            total += state.logprobs[t as usize];
            if i + 1 < tokens.len() {
                state = self.advance(store, &state, t);
            }
        }
        Ok(total)
    }
}

pub(crate) fn check_terminated(tokens: &[u32], max_len: usize) -> Result<()> {
    if tokens.len() > max_len {
        return Err(Error::LengthExceeded {
            len: tokens.len(),
            max_len,
        });
    }
    if tokens.last() != Some(&EOS) || tokens[..tokens.len() - 1].contains(&EOS) {
        return Err(Error::NotEosTerminated);
    }
    Ok(())
}

/// Key/value cache plus the distribution over the next token.
#[derive(Clone, Debug)]
pub struct LmState {
    keys: Vec<Array2<f64>>,
    values: Vec<Array2<f64>>,
    text_pos: usize,
    pub logprobs: Vec<f64>,
}

fn affine(store: &ParamStore, l: Linear, x: &Array2<f64>) -> Array2<f64> {
    x.dot(store.get(l.weight)) + store.get(l.bias)
}

fn layer_norm(store: &ParamStore, ln: LayerNorm, x: &Array2<f64>) -> Array2<f64> {
    let gain = store.get(ln.gain);
    let bias = store.get(ln.bias);
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gain[[0, j]] + bias[[0, j]];
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub(crate) fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// Causal attention of the new rows `x` over the cache extended by them.
fn cached_attention(
    store: &ParamStore,
    mha: &MultiHeadAttention,
    x: &Array2<f64>,
    keys: &mut Array2<f64>,
    values: &mut Array2<f64>,
) -> Array2<f64> {
    let q = affine(store, mha.query, x);
    let k = affine(store, mha.key, x);
    let v = affine(store, mha.value, x);
    let start = keys.nrows();
    *keys = ndarray::concatenate(Axis(0), &[keys.view(), k.view()]).expect("key width");
    *values = ndarray::concatenate(Axis(0), &[values.view(), v.view()]).expect("value width");
    let d = q.ncols();
    let dh = d / mha.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut merged = Array2::zeros(q.dim());
    for h in 0..mha.heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let kh = keys.slice(cols);
        let vh = values.slice(cols);
        for i in 0..q.nrows() {
            let visible = start + i + 1;
            let qi = q.slice(s![i, h * dh..(h + 1) * dh]);
            let scores: Vec<f64> = (0..visible).map(|j| qi.dot(&kh.row(j)) * scale).collect();
            let w = log_softmax(&scores);
            let mut out = merged.slice_mut(s![i, h * dh..(h + 1) * dh]);
            for (j, lw) in w.iter().enumerate() {
                out.scaled_add(lw.exp(), &vh.row(j));
            }
        }
    }
    affine(store, mha.output, &merged)
}
