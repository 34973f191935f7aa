//! MCFormer and the Triplet Qformer.
//!
//! An MCFormer runs a stack of layers over a learnable query matrix. Each
//! layer applies self-attention (parameters shared with the text branch),
//! then N unshared cross-attention blocks, one per feature element, whose
//! outputs are summed:
//!
//! ```text
//! h_l   = h_in + SelfAttn(LN(h_in))
//! a_n   = MHA_n(query = h_l, key/value = H[n])
//! z     = LN(sum_n a_n + h_l)
//! h_out = z + FFN(z)
//! ```
//!
//! The text branch reuses the same self-attention weights with a causal mask,
//! followed by its own FFN. Text and queries never attend to each other.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::features::{FeatureBundle, GRID_ELEMENTS, REGION_ELEMENTS};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QformerConfig {
    pub d_model: usize,
    pub num_layers: usize,
    pub num_queries: usize,
    pub num_heads: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    /// Longest text-branch input, BOS and EOS included.
    pub max_text_len: usize,
}

#[derive(Clone, Debug)]
pub struct McFormerLayer {
    self_attn: MultiHeadAttention,
    img_ln_sa: LayerNorm,
    cross_attn: Vec<MultiHeadAttention>,
    cross_ln: LayerNorm,
    img_ffn: FeedForward,
    txt_ln_sa: LayerNorm,
    txt_ln_ffn: LayerNorm,
    txt_ffn: FeedForward,
}

/// Intermediates of one layer: `h_l` and the per-block cross outputs `a_n`.
#[derive(Clone, Debug)]
pub struct LayerInternals {
    pub h_l: Var,
    pub cross: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub h_out: Var,
    pub text_out: Option<Var>,
    pub internals: LayerInternals,
}

impl McFormerLayer {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &QformerConfig,
        num_elements: usize,
        rng: &mut R,
    ) -> Self {
        let d = cfg.d_model;
        let hidden = cfg.ffn_mult * d;
        Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, cfg.num_heads, rng),
            img_ln_sa: LayerNorm::new(store, &format!("{name}.img_ln_sa"), d),
            cross_attn: (0..num_elements)
                .map(|n| {
                    MultiHeadAttention::new(store, &format!("{name}.cross_attn.{n}"), d, cfg.num_heads, rng)
                })
                .collect(),
            cross_ln: LayerNorm::new(store, &format!("{name}.cross_ln"), d),
            img_ffn: FeedForward::new(store, &format!("{name}.img_ffn"), d, hidden, rng),
            txt_ln_sa: LayerNorm::new(store, &format!("{name}.txt_ln_sa"), d),
            txt_ln_ffn: LayerNorm::new(store, &format!("{name}.txt_ln_ffn"), d),
            txt_ffn: FeedForward::new(store, &format!("{name}.txt_ffn"), d, hidden, rng),
        }
    }

    /// Self-attention used by the image (query) branch.
    pub fn image_self_attention(&self) -> &MultiHeadAttention {
        &self.self_attn
    }

    /// Self-attention used by the text branch; the same parameter ids as the
    /// image branch.
    pub fn text_self_attention(&self) -> &MultiHeadAttention {
        &self.self_attn
    }

    pub fn cross_attention(&self) -> &[MultiHeadAttention] {
        &self.cross_attn
    }

    pub fn cross_attention_mut(&mut self) -> &mut [MultiHeadAttention] {
        &mut self.cross_attn
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        h_in: Var,
        features: &[Var],
        text_in: Option<Var>,
    ) -> Result<LayerOutput> {
        if features.len() != self.cross_attn.len() {
            return Err(Error::FeatureArityMismatch {
                expected: self.cross_attn.len(),
                found: features.len(),
            });
        }
        let x = self.img_ln_sa.forward(g, h_in);
        let sa = self.self_attn.forward(g, x, x, false);
        let h_l = g.add(h_in, sa);

        let cross: Vec<Var> = self
            .cross_attn
            .iter()
            .zip(features)
            .map(|(mha, &f)| mha.forward(g, h_l, f, false))
            .collect();
        let mut acc = h_l;
        for &a in &cross {
            acc = g.add(acc, a);
        }
        let z = self.cross_ln.forward(g, acc);
        let ff = self.img_ffn.forward(g, z);
        let h_out = g.add(z, ff);

        let text_out = text_in.map(|t| {
            let x = self.txt_ln_sa.forward(g, t);
            let sa = self.self_attn.forward(g, x, x, true);
            let t1 = g.add(t, sa);
            let x = self.txt_ln_ffn.forward(g, t1);
            let ff = self.txt_ffn.forward(g, x);
            g.add(t1, ff)
        });

        Ok(LayerOutput {
            h_out,
            text_out,
            internals: LayerInternals { h_l, cross },
        })
    }
}

/// Output of one MCFormer: its query states and optional text states.
#[derive(Clone, Debug)]
pub struct McFormerOutput {
    pub h_q: Var,
    pub h_w: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct McFormer {
    pub queries: ParamId,
    pub text_embedding: ParamId,
    pub text_position: ParamId,
    /// Pretraining heads: next-token prediction over text states and the
    /// matching logit over query rows.
    pub itg_head: Linear,
    pub itm_head: Linear,
    layers: Vec<McFormerLayer>,
    num_elements: usize,
    max_text_len: usize,
}

impl McFormer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &QformerConfig,
        num_elements: usize,
        rng: &mut R,
    ) -> Self {
        let d = cfg.d_model;
        Self {
            queries: store.add_normal(format!("{name}.queries"), (cfg.num_queries, d), 1.0, rng),
            text_embedding: store.add_normal(format!("{name}.text_embedding"), (cfg.vocab_size, d), 1.0, rng),
            text_position: store.add_normal(format!("{name}.text_position"), (cfg.max_text_len, d), 0.1, rng),
            layers: (0..cfg.num_layers)
                .map(|l| McFormerLayer::new(store, &format!("{name}.layers.{l}"), cfg, num_elements, rng))
                .collect(),
            itg_head: Linear::new(store, &format!("{name}.itg_head"), d, cfg.vocab_size, rng),
            itm_head: Linear::new(store, &format!("{name}.itm_head"), d, 1, rng),
            num_elements,
            max_text_len: cfg.max_text_len,
        }
    }

    pub fn num_elements(&self) -> usize {
        self.num_elements
    }

    pub fn layers(&self) -> &[McFormerLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [McFormerLayer] {
        &mut self.layers
    }

    /// Text-branch input: token embeddings plus positions.
    pub fn embed_text(&self, g: &mut Graph, tokens: &[u32]) -> Result<Var> {
        if tokens.is_empty() || tokens.len() > self.max_text_len {
            return Err(Error::LengthExceeded {
                len: tokens.len(),
                max_len: self.max_text_len,
            });
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let table = g.param(self.text_embedding);
        let emb = g.gather_rows(table, &ids);
        let pos_table = g.param(self.text_position);
        let pos = g.slice_rows(pos_table, 0, tokens.len());
        Ok(g.add(emb, pos))
    }

    pub fn forward(&self, g: &mut Graph, features: &[Var], text_in: Option<Var>) -> Result<McFormerOutput> {
        if features.len() != self.num_elements {
            return Err(Error::FeatureArityMismatch {
                expected: self.num_elements,
                found: features.len(),
            });
        }
        let mut h = g.param(self.queries);
        let mut t = text_in;
        for layer in &self.layers {
            let out = layer.forward(g, h, features, t)?;
            h = out.h_out;
            t = out.text_out;
        }
        Ok(McFormerOutput { h_q: h, h_w: t })
    }
}

/// Query outputs of both MCFormers; `h_q = [h_q_g ; h_q_r]`.
#[derive(Clone, Debug)]
pub struct QueryStates {
    pub h_q_g: Var,
    pub h_q_r: Var,
    pub h_q: Var,
    pub h_w_g: Option<Var>,
    pub h_w_r: Option<Var>,
}

/// Grid MCFormer (N = 3) and region MCFormer (N = 2); no shared parameters.
#[derive(Clone, Debug)]
pub struct TripletQformer {
    pub grid: McFormer,
    pub region: McFormer,
    pub config: QformerConfig,
}

impl TripletQformer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &QformerConfig, rng: &mut R) -> Self {
        Self {
            grid: McFormer::new(store, "qformer.grid", cfg, GRID_ELEMENTS, rng),
            region: McFormer::new(store, "qformer.region", cfg, REGION_ELEMENTS, rng),
            config: cfg.clone(),
        }
    }

    pub fn forward(&self, g: &mut Graph, bundle: &FeatureBundle, text: Option<&[u32]>) -> Result<QueryStates> {
        let (tg, tr) = match text {
            Some(tokens) => (
                Some(self.grid.embed_text(g, tokens)?),
                Some(self.region.embed_text(g, tokens)?),
            ),
            None => (None, None),
        };
        let grid = self.grid.forward(g, &bundle.grid, tg)?;
        let region = self.region.forward(g, &bundle.region, tr)?;
        let h_q = g.concat_rows(&[grid.h_q, region.h_q]);
        Ok(QueryStates {
            h_q_g: grid.h_q,
            h_q_r: region.h_q,
            h_q,
            h_w_g: grid.h_w,
            h_w_r: region.h_w,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{s, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn cfg(layers: usize) -> QformerConfig {
        QformerConfig {
            d_model: 8,
            num_layers: layers,
            num_queries: 3,
            num_heads: 2,
            ffn_mult: 2,
            vocab_size: 7,
            max_text_len: 6,
        }
    }

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || StandardNormal.sample(rng))
    }

    /// Randomize every parameter so LN gains/biases are exercised too.
    fn randomize(store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in store.ids().collect::<Vec<_>>() {
            let (r, c) = store.get(id).dim();
            let noise = randn(&mut rng, r, c) * 0.3;
            *store.get_mut(id) += &noise;
        }
    }

    // ---- explicit-loop oracle ---------------------------------------------

    type M = Vec<Vec<f64>>;

    fn to_m(a: &Array2<f64>) -> M {
        a.rows().into_iter().map(|r| r.to_vec()).collect()
    }

    fn affine(x: &M, w: &Array2<f64>, b: &Array2<f64>) -> M {
        x.iter()
            .map(|row| {
                (0..w.ncols())
                    .map(|j| {
                        let mut acc = b[[0, j]];
                        for (i, v) in row.iter().enumerate() {
                            acc += v * w[[i, j]];
                        }
                        acc
                    })
                    .collect()
            })
            .collect()
    }

    fn ln(x: &M, g: &Array2<f64>, b: &Array2<f64>) -> M {
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                row.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g[[0, j]] + b[[0, j]])
                    .collect()
            })
            .collect()
    }

    fn madd(a: &M, b: &M) -> M {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
            .collect()
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    fn mha(store: &ParamStore, m: &MultiHeadAttention, q_in: &M, kv: &M, causal: bool) -> M {
        let p = |id| store.get(id);
        let q = affine(q_in, p(m.query.weight), p(m.query.bias));
        let k = affine(kv, p(m.key.weight), p(m.key.bias));
        let v = affine(kv, p(m.value.weight), p(m.value.bias));
        let d = q[0].len();
        let dh = d / m.heads;
        let mut merged = vec![vec![0.0; d]; q.len()];
        for h in 0..m.heads {
            for i in 0..q.len() {
                let limit = if causal { i + 1 } else { k.len() };
                let mut scores = vec![0.0; limit];
                for j in 0..limit {
                    let mut dot = 0.0;
                    for c in h * dh..(h + 1) * dh {
                        dot += q[i][c] * k[j][c];
                    }
                    scores[j] = dot / (dh as f64).sqrt();
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for j in 0..limit {
                    let w = (scores[j] - mx).exp() / z;
                    for c in h * dh..(h + 1) * dh {
                        merged[i][c] += w * v[j][c];
                    }
                }
            }
        }
        affine(&merged, p(m.output.weight), p(m.output.bias))
    }

    fn ffn(store: &ParamStore, f: &FeedForward, x: &M) -> M {
        let h = affine(x, store.get(f.up.weight), store.get(f.up.bias));
        let h: M = h.into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
        affine(&h, store.get(f.down.weight), store.get(f.down.bias))
    }

    fn oracle_layer(store: &ParamStore, l: &McFormerLayer, h_in: &M, feats: &[M], text: Option<&M>) -> (M, Option<M>) {
        let x = ln(h_in, store.get(l.img_ln_sa.gain), store.get(l.img_ln_sa.bias));
        let h_l = madd(h_in, &mha(store, &l.self_attn, &x, &x, false));
        let mut acc = h_l.clone();
        for (m, f) in l.cross_attn.iter().zip(feats) {
            acc = madd(&acc, &mha(store, m, &h_l, f, false));
        }
        let z = ln(&acc, store.get(l.cross_ln.gain), store.get(l.cross_ln.bias));
        let h_out = madd(&z, &ffn(store, &l.img_ffn, &z));
        let t_out = text.map(|t| {
            let x = ln(t, store.get(l.txt_ln_sa.gain), store.get(l.txt_ln_sa.bias));
            let t1 = madd(t, &mha(store, &l.self_attn, &x, &x, true));
            let x = ln(&t1, store.get(l.txt_ln_ffn.gain), store.get(l.txt_ln_ffn.bias));
            madd(&t1, &ffn(store, &l.txt_ffn, &x))
        });
        (h_out, t_out)
    }

    fn max_diff(a: &Array2<f64>, b: &M) -> f64 {
        let mut m: f64 = 0.0;
        for (i, row) in b.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                m = m.max((a[[i, j]] - v).abs());
            }
        }
        m
    }

    // ---- tests ------------------------------------------------------------

    fn setup(layers: usize) -> (ParamStore, TripletQformer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = TripletQformer::new(&mut store, &cfg(layers), &mut rng);
        randomize(&mut store, 77);
        (store, q)
    }

    fn features(seed: u64, rows: &[usize]) -> Vec<Array2<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rows.iter().map(|&r| randn(&mut rng, r, 8)).collect()
    }

    #[test]
    fn layer_matches_loop_oracle() {
        let (store, q) = setup(1);
        let feats = features(1, &[2, 2, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h_in = randn(&mut rng, 3, 8);
        let text = randn(&mut rng, 4, 8);
        let mut g = Graph::new(&store);
        let fv: Vec<Var> = feats.iter().map(|f| g.input(f.clone())).collect();
        let hv = g.input(h_in.clone());
        let tv = g.input(text.clone());
        let layer = &q.grid.layers()[0];
        let out = layer.forward(&mut g, hv, &fv, Some(tv)).unwrap();
        let fm: Vec<M> = feats.iter().map(to_m).collect();
        let (oh, ot) = oracle_layer(&store, layer, &to_m(&h_in), &fm, Some(&to_m(&text)));
        assert!(max_diff(g.value(out.h_out), &oh) < 1e-5);
        assert!(max_diff(g.value(out.text_out.unwrap()), &ot.unwrap()) < 1e-5);
        assert_eq!(out.internals.cross.len(), 3);
    }

    #[test]
    fn zero_cross_output_reduces_to_ffn_of_ln_h_l() {
        let (mut store, q) = setup(1);
        let layer = &q.grid.layers()[0];
        for m in layer.cross_attention() {
            store.get_mut(m.output.weight).fill(0.0);
            store.get_mut(m.output.bias).fill(0.0);
        }
        let feats = features(2, &[2, 2, 2]);
        let mut g = Graph::new(&store);
        let fv: Vec<Var> = feats.iter().map(|f| g.input(f.clone())).collect();
        let h_in = g.param(q.grid.queries);
        let out = layer.forward(&mut g, h_in, &fv, None).unwrap();
        for &a in &out.internals.cross {
            assert!(g.value(a).iter().all(|&v| v == 0.0));
        }
        let z = layer.cross_ln.forward(&mut g, out.internals.h_l);
        let ff = layer.img_ffn.forward(&mut g, z);
        let expected = g.add(z, ff);
        assert_eq!(g.value(out.h_out), g.value(expected));
    }

    #[test]
    fn shapes_and_single_layer_equivalence() {
        let (store, q) = setup(1);
        let grid = features(4, &[2, 2, 2]);
        let region = features(5, &[5, 2]);
        let mut g = Graph::new(&store);
        let bundle = FeatureBundle {
            grid: grid.iter().map(|f| g.input(f.clone())).collect(),
            region: region.iter().map(|f| g.input(f.clone())).collect(),
        };
        let states = q.forward(&mut g, &bundle, None).unwrap();
        assert_eq!(g.shape(states.h_q), (6, 8));
        assert!(states.h_w_g.is_none() && states.h_w_r.is_none());
        let h0 = g.param(q.grid.queries);
        let single = q.grid.layers()[0].forward(&mut g, h0, &bundle.grid, None).unwrap();
        assert_eq!(g.value(single.h_out), g.value(states.h_q_g));
        // Composition oracle: h_q = [grid ; region].
        let hq = g.value(states.h_q).clone();
        assert_eq!(hq.slice(s![0..3, ..]), g.value(states.h_q_g));
        assert_eq!(hq.slice(s![3..6, ..]), g.value(states.h_q_r));
    }

    #[test]
    fn joint_permutation_of_elements_and_blocks_is_invariant() {
        let (store, mut q) = setup(2);
        let grid = features(6, &[2, 2, 2]);
        let base = {
            let mut g = Graph::new(&store);
            let fv: Vec<Var> = grid.iter().map(|f| g.input(f.clone())).collect();
            let out = q.grid.forward(&mut g, &fv, None).unwrap();
            g.value(out.h_q).clone()
        };
        let perm = [2usize, 0, 1];
        for layer in q.grid.layers_mut() {
            let orig = layer.cross_attention().to_vec();
            for (i, &p) in perm.iter().enumerate() {
                layer.cross_attention_mut()[i] = orig[p];
            }
        }
        let mut g = Graph::new(&store);
        let fv: Vec<Var> = perm.iter().map(|&p| g.input(grid[p].clone())).collect();
        let out = q.grid.forward(&mut g, &fv, None).unwrap();
        let diff = (g.value(out.h_q) - &base).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn arity_is_enforced() {
        let (store, q) = setup(1);
        let mut g = Graph::new(&store);
        let two: Vec<Var> = features(7, &[2, 2]).into_iter().map(|f| g.input(f)).collect();
        let three: Vec<Var> = features(8, &[2, 2, 2]).into_iter().map(|f| g.input(f)).collect();
        assert!(matches!(
            q.grid.forward(&mut g, &two, None),
            Err(Error::FeatureArityMismatch { expected: 3, found: 2 })
        ));
        assert!(matches!(
            q.region.forward(&mut g, &three, None),
            Err(Error::FeatureArityMismatch { expected: 2, found: 3 })
        ));
    }

    #[test]
    fn text_branch_is_causal() {
        let (store, q) = setup(2);
        let feats = features(9, &[2, 2, 2]);
        let run = |tokens: &[u32]| {
            let mut g = Graph::new(&store);
            let fv: Vec<Var> = feats.iter().map(|f| g.input(f.clone())).collect();
            let t = q.grid.embed_text(&mut g, tokens).unwrap();
            let out = q.grid.forward(&mut g, &fv, Some(t)).unwrap();
            g.value(out.h_w.unwrap()).clone()
        };
        let a = run(&[1, 4, 5, 6, 2]);
        let b = run(&[1, 4, 3, 3, 2]);
        assert_eq!(a.slice(s![0..2, ..]), b.slice(s![0..2, ..]));
        assert_ne!(a.slice(s![2..3, ..]), b.slice(s![2..3, ..]));
    }

    #[test]
    fn self_attention_is_shared_and_blocks_are_not() {
        let (store, q) = setup(2);
        for layer in q.grid.layers().iter().chain(q.region.layers()) {
            let (i, t) = (layer.image_self_attention(), layer.text_self_attention());
            assert_eq!(i.query.weight, t.query.weight);
            assert_eq!(i.output.bias, t.output.bias);
            let ids: Vec<_> = layer.cross_attention().iter().map(|m| m.query.weight).collect();
            let mut dedup = ids.clone();
            dedup.dedup();
            assert_eq!(ids, dedup);
        }
        assert_ne!(q.grid.queries, q.region.queries);
        assert!(store.name(q.grid.queries).starts_with("qformer.grid"));
    }
}
