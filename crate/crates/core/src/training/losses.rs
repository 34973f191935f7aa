use crate::autograd::nn::Linear;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};

use super::reward::RewardBundle;

/// `B×B` similarity matrix with `s[i][j] = max_q cos(Q_i[q], T_j) / τ`.
pub fn itc_similarity(g: &mut Graph, query_outs: &[Var], text_feats: &[Var], tau: f64) -> Result<Var> {
    let b = query_outs.len();
    if b < 2 || text_feats.len() != b {
        return Err(Error::BatchTooSmall(b.min(text_feats.len())));
    }
    let texts = g.concat_rows(text_feats);
    let texts = g.l2_normalize_rows(texts);
    let rows: Vec<Var> = query_outs
        .iter()
        .map(|&q| {
            let qn = g.l2_normalize_rows(q);
            let cos = g.matmul_t(qn, texts);
            g.max_rows(cos)
        })
        .collect();
    let s = g.concat_rows(&rows);
    Ok(g.scale(s, 1.0 / tau))
}

/// Mean of `-log softmax(row i)[i]` over the rows of a square matrix.
fn diagonal_nll(g: &mut Graph, logits: Var) -> Var {
    let n = g.shape(logits).0;
    let lp = g.log_softmax_rows(logits);
    let diag: Vec<usize> = (0..n).collect();
    let picked = g.pick_per_row(lp, &diag);
    let mean = g.mean_all(picked);
    g.scale(mean, -1.0)
}

/// Symmetric image-text contrastive loss.
pub fn itc_loss(g: &mut Graph, query_outs: &[Var], text_feats: &[Var], tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let s = itc_similarity(g, query_outs, text_feats, tau)?;
    let i2t = diagonal_nll(g, s);
    let st = g.transpose(s);
    let t2i = diagonal_nll(g, st);
    let sum = g.add(i2t, t2i);
    Ok(g.scale(sum, 0.5))
}

/// Next-token cross-entropy of `head` over text states `h_w` for the input
/// `[BOS, y…, EOS]`: row t predicts token t+1. Mean over predicted tokens.
pub fn itg_loss(g: &mut Graph, head: &Linear, h_w: Var, text_input: &[u32]) -> Result<Var> {
    let n = text_input.len();
    if n < 2 || g.shape(h_w).0 != n {
        return Err(Error::NotEosTerminated);
    }
    let states = g.slice_rows(h_w, 0, n - 1);
    let logits = head.forward(g, states);
    let lp = g.log_softmax_rows(logits);
    let targets: Vec<usize> = text_input[1..].iter().map(|&t| t as usize).collect();
    let picked = g.pick_per_row(lp, &targets);
    let mean = g.mean_all(picked);
    Ok(g.scale(mean, -1.0))
}

/// Matching logit: the head applied to each query row gated by the text
/// feature, mean-pooled over queries.
pub fn itm_logit(g: &mut Graph, head: &Linear, h_q: Var, text_feat: Var) -> Var {
    let gated = g.mul_row(h_q, text_feat);
    let per_query = head.forward(g, gated);
    g.mean_all(per_query)
}

/// Binary cross-entropy on a logit: `softplus(-z)` for a match,
/// `softplus(z)` for a mismatch.
pub fn bce_with_logit(g: &mut Graph, logit: Var, matched: bool) -> Var {
    let z = if matched { g.scale(logit, -1.0) } else { logit };
    g.softplus(z)
}

/// Matching loss over in-batch pairs: each sample with its own text
/// (positive) and with the text `shift` places further on (negative).
pub fn itm_loss(g: &mut Graph, head: &Linear, query_outs: &[Var], text_feats: &[Var], shift: usize) -> Result<Var> {
    let b = query_outs.len();
    if b < 2 || text_feats.len() != b {
        return Err(Error::BatchTooSmall(b.min(text_feats.len())));
    }
    let shift = 1 + (shift.max(1) - 1) % (b - 1);
    let mut terms = Vec::with_capacity(2 * b);
    for i in 0..b {
        let pos = itm_logit(g, head, query_outs[i], text_feats[i]);
        terms.push(bce_with_logit(g, pos, true));
        let neg = itm_logit(g, head, query_outs[i], text_feats[(i + shift) % b]);
        terms.push(bce_with_logit(g, neg, false));
    }
    let sum = g.add_scalars(&terms);
    Ok(g.scale(sum, 1.0 / terms.len() as f64))
}

/// `-(1/k) Σ_i (r_i - b) · log p(w_i)`; rewards are constants.
pub fn hcct_loss(g: &mut Graph, logps: &[Var], rewards: &RewardBundle) -> Result<Var> {
    let k = logps.len();
    if k < 2 {
        return Err(Error::BeamTooSmall(k));
    }
    if rewards.len() != k {
        return Err(Error::MismatchedLengths {
            candidates: k,
            references: rewards.len(),
        });
    }
    let terms: Vec<Var> = logps
        .iter()
        .zip(rewards.advantages())
        .map(|(&lp, adv)| g.scale(lp, -adv / k as f64))
        .collect();
    Ok(g.add_scalars(&terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::ParamStore;
    use crate::decoder::log_softmax;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || StandardNormal.sample(rng))
    }

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    /// Double-loop oracle for the contrastive loss.
    fn naive_itc(qs: &[Array2<f64>], ts: &[Vec<f64>], tau: f64) -> f64 {
        let b = qs.len();
        let s: Vec<Vec<f64>> = (0..b)
            .map(|i| {
                (0..b)
                    .map(|j| {
                        qs[i].rows().into_iter().map(|r| cos(r.as_slice().unwrap(), &ts[j])).fold(f64::NEG_INFINITY, f64::max)
                            / tau
                    })
                    .collect()
            })
            .collect();
        let mut i2t = 0.0;
        let mut t2i = 0.0;
        for i in 0..b {
            let row_lse = s[i].iter().map(|v| v.exp()).sum::<f64>().ln();
            i2t += row_lse - s[i][i];
            let col_lse = (0..b).map(|k| s[k][i].exp()).sum::<f64>().ln();
            t2i += col_lse - s[i][i];
        }
        0.5 * (i2t + t2i) / b as f64
    }

    #[test]
    fn itc_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let store = ParamStore::new();
        for b in [2, 3, 5] {
            let qs: Vec<Array2<f64>> = (0..b).map(|_| randn(&mut rng, 4, 6)).collect();
            let ts: Vec<Vec<f64>> = (0..b).map(|_| randn(&mut rng, 1, 6).into_raw_vec_and_offset().0).collect();
            let mut g = Graph::new(&store);
            let qv: Vec<Var> = qs.iter().map(|q| g.input(q.clone())).collect();
            let tv: Vec<Var> = ts.iter().map(|t| g.input(Array2::from_shape_vec((1, 6), t.clone()).unwrap())).collect();
            let l = itc_loss(&mut g, &qv, &tv, 0.3).unwrap();
            assert!((g.scalar(l) - naive_itc(&qs, &ts, 0.3)).abs() < 1e-6);
        }
    }

    #[test]
    fn itc_trivial_cases() {
        let store = ParamStore::new();
        // Identical features: uniform softmax.
        let mut g = Graph::new(&store);
        let q: Vec<Var> = (0..4).map(|_| g.input(Array2::from_elem((2, 3), 1.0))).collect();
        let t: Vec<Var> = (0..4).map(|_| g.input(Array2::from_elem((1, 3), 2.0))).collect();
        let l = itc_loss(&mut g, &q, &t, 0.1).unwrap();
        assert!((g.scalar(l) - 4f64.ln()).abs() < 1e-12);
        // Orthogonal matched pairs beat log 2.
        let e = |i: usize| {
            let mut a = Array2::zeros((1, 2));
            a[[0, i]] = 1.0;
            a
        };
        let q = vec![g.input(e(0)), g.input(e(1))];
        let t = vec![g.input(e(0)), g.input(e(1))];
        let l = itc_loss(&mut g, &q, &t, 1.0).unwrap();
        assert!(g.scalar(l) < 2f64.ln());
        assert!(matches!(itc_loss(&mut g, &q[..1], &t[..1], 1.0), Err(Error::BatchTooSmall(1))));
    }

    fn head(store: &mut ParamStore, d: usize, v: usize, seed: u64) -> Linear {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = Linear::new(store, "h", d, v, &mut rng);
        let noise = randn(&mut rng, 1, v);
        store.get_mut(l.bias).assign(&noise);
        l
    }

    #[test]
    fn itg_matches_per_position_oracle() {
        let mut store = ParamStore::new();
        let h = head(&mut store, 5, 7, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let hw = randn(&mut rng, 4, 5);
        let input = [1u32, 5, 6, 2];
        let mut g = Graph::new(&store);
        let hv = g.input(hw.clone());
        let l = itg_loss(&mut g, &h, hv, &input).unwrap();
        let logits = hw.dot(store.get(h.weight)) + store.get(h.bias);
        let mut want = 0.0;
        for t in 0..3 {
            let lp = log_softmax(logits.row(t).as_slice().unwrap());
            want -= lp[input[t + 1] as usize];
        }
        assert!((g.scalar(l) - want / 3.0).abs() < 1e-9);
    }

    #[test]
    fn itg_trivial_cases() {
        // Single-entry vocabulary: every prediction is certain.
        let mut store = ParamStore::new();
        let h1 = head(&mut store, 3, 1, 1);
        let mut g = Graph::new(&store);
        let hv = g.input(Array2::from_elem((3, 3), 0.7));
        let l = itg_loss(&mut g, &h1, hv, &[0, 0, 0]).unwrap();
        assert!(g.scalar(l).abs() < 1e-12);

        // Uniform logits over v entries: log v per token.
        let mut store = ParamStore::new();
        let hu = Linear::new(&mut store, "u", 3, 6, &mut ChaCha8Rng::seed_from_u64(0));
        store.get_mut(hu.weight).fill(0.0);
        let mut g = Graph::new(&store);
        let hv = g.input(Array2::from_elem((4, 3), 0.3));
        let l = itg_loss(&mut g, &hu, hv, &[1, 4, 5, 2]).unwrap();
        assert!((g.scalar(l) - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn itm_matches_manual_bce() {
        let mut store = ParamStore::new();
        let h = head(&mut store, 4, 1, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let qs: Vec<Array2<f64>> = (0..3).map(|_| randn(&mut rng, 2, 4)).collect();
        let ts: Vec<Array2<f64>> = (0..3).map(|_| randn(&mut rng, 1, 4)).collect();
        let mut g = Graph::new(&store);
        let qv: Vec<Var> = qs.iter().map(|q| g.input(q.clone())).collect();
        let tv: Vec<Var> = ts.iter().map(|t| g.input(t.clone())).collect();
        let l = itm_loss(&mut g, &h, &qv, &tv, 2).unwrap();
        let w = store.get(h.weight);
        let b = store.get(h.bias)[[0, 0]];
        let logit = |q: &Array2<f64>, t: &Array2<f64>| {
            let mut acc = 0.0;
            for r in 0..q.nrows() {
                let mut z = b;
                for c in 0..4 {
                    z += q[[r, c]] * t[[0, c]] * w[[c, 0]];
                }
                acc += z;
            }
            acc / q.nrows() as f64
        };
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let mut want = 0.0;
        for i in 0..3 {
            want -= sig(logit(&qs[i], &ts[i])).ln();
            want -= (1.0 - sig(logit(&qs[i], &ts[(i + 2) % 3]))).ln();
        }
        assert!((g.scalar(l) - want / 6.0).abs() < 1e-9);
    }

    #[test]
    fn bce_trivial_cases() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let z = g.input(Array2::zeros((1, 1)));
        for m in [true, false] {
            let l = bce_with_logit(&mut g, z, m);
            assert!((g.scalar(l) - 2f64.ln()).abs() < 1e-15);
        }
        let big = g.input(Array2::from_elem((1, 1), 60.0));
        let l = bce_with_logit(&mut g, big, true);
        assert!(g.scalar(l) < 1e-20);
    }

    #[test]
    fn hcct_hand_example() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let lps = [g.input(Array2::from_elem((1, 1), -1.0)), g.input(Array2::from_elem((1, 1), -2.0))];
        let l = hcct_loss(&mut g, &lps, &RewardBundle::from_rewards(&[1.0, 0.0])).unwrap();
        assert_eq!(g.scalar(l), -0.25);
        assert!(matches!(
            hcct_loss(&mut g, &lps[..1], &RewardBundle::from_rewards(&[1.0])),
            Err(Error::BeamTooSmall(1))
        ));
    }
}
