use std::cmp::Ordering;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::lm::{LanguageModel, LmState};
use crate::autograd::ParamStore;
use crate::datasets::{Vocab, EOS};
use crate::error::{Error, Result};

/// Anything that yields next-token log-probabilities over the full vocabulary.
pub trait StepModel {
    type State: Clone;
    fn start(&self) -> Self::State;
    fn logprobs<'s>(&self, state: &'s Self::State) -> &'s [f64];
    fn advance(&self, state: &Self::State, token: u32) -> Self::State;
}

/// The cached language model, optionally conditioned on a prefix.
pub struct LmStepper<'a> {
    pub lm: &'a LanguageModel,
    pub store: &'a ParamStore,
    pub prefix: Option<&'a Array2<f64>>,
}

impl StepModel for LmStepper<'_> {
    type State = LmState;

    fn start(&self) -> LmState {
        self.lm.start(self.store, self.prefix)
    }

    fn logprobs<'s>(&self, state: &'s LmState) -> &'s [f64] {
        &state.logprobs
    }

    fn advance(&self, state: &LmState, token: u32) -> LmState {
        self.lm.advance(self.store, state, token)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub max_len: usize,
    /// Rank by mean instead of summed log-probability.
    #[serde(default)]
    pub length_normalize: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_size: 5,
            max_len: 24,
            length_normalize: false,
        }
    }
}

/// One decoded sequence. `tokens` ends with EOS unless the length cap was hit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub tokens: Vec<u32>,
    pub text: String,
    pub token_logprobs: Vec<f64>,
    pub total_logprob: f64,
}

impl Candidate {
    pub fn finished(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }
}

#[derive(Clone)]
struct Hyp<S> {
    tokens: Vec<u32>,
    lps: Vec<f64>,
    total: f64,
    state: Option<S>,
}

fn rank_score(total: f64, len: usize, normalize: bool) -> f64 {
    if normalize {
        total / len.max(1) as f64
    } else {
        total
    }
}

/// Higher score first, then lexicographically smaller tokens.
fn order(a: (f64, &[u32]), b: (f64, &[u32])) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

/// Tokens the decoder may emit: EOS and every non-special word.
pub fn generatable_tokens(vocab_size: usize) -> Vec<u32> {
    std::iter::once(EOS)
        .chain((0..vocab_size as u32).filter(|&t| !Vocab::is_special(t)))
        .collect()
}

/// Beam search returning up to `beam_size` candidates, best first.
///
/// An EOS expansion enters the finished set only if it ranks within the top
/// `beam_size` expansions of its step; live hypotheses are the best non-EOS
/// expansions. Sequences still live at `max_len` are terminal as well.
pub fn beam_search<M: StepModel>(model: &M, vocab: &Vocab, cfg: &BeamConfig) -> Result<Vec<Candidate>> {
    if cfg.beam_size == 0 {
        return Err(Error::BeamTooSmall(cfg.beam_size));
    }
    let allowed = generatable_tokens(vocab.len());
    let norm = cfg.length_normalize;
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        lps: Vec::new(),
        total: 0.0,
        state: Some(model.start()),
    }];
    let mut finished: Vec<Hyp<M::State>> = Vec::new();
    let mut hit_cap = true;

    for _ in 0..cfg.max_len {
        let mut expansions: Vec<(usize, u32, f64, Vec<u32>)> = Vec::new();
        for (h, hyp) in live.iter().enumerate() {
            let lp = model.logprobs(hyp.state.as_ref().expect("live state"));
            for &t in &allowed {
                let mut toks = hyp.tokens.clone();
                toks.push(t);
                expansions.push((h, t, hyp.total + lp[t as usize], toks));
            }
        }
        expansions.sort_by(|a, b| {
            order(
                (rank_score(a.2, a.3.len(), norm), &a.3),
                (rank_score(b.2, b.3.len(), norm), &b.3),
            )
        });
        let mut next = Vec::with_capacity(cfg.beam_size);
        for (rank, (h, t, total, toks)) in expansions.into_iter().enumerate() {
            if rank >= cfg.beam_size && next.len() == cfg.beam_size {
                break;
            }
            let parent = &live[h];
            let lp = model.logprobs(parent.state.as_ref().expect("live state"))[t as usize];
            let mut lps = parent.lps.clone();
            lps.push(lp);
            if t == EOS {
                if rank < cfg.beam_size {
                    finished.push(Hyp {
                        tokens: toks,
                        lps,
                        total,
                        state: None,
                    });
                }
            } else if next.len() < cfg.beam_size {
                let state = model.advance(parent.state.as_ref().expect("live state"), t);
                next.push(Hyp {
                    tokens: toks,
                    lps,
                    total,
                    state: Some(state),
                });
            }
        }
        live = next;
        if live.is_empty() {
            hit_cap = false;
            break;
        }
        if !norm && finished.len() >= cfg.beam_size {
            let mut scores: Vec<f64> = finished.iter().map(|f| f.total).collect();
            scores.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
            let kth = scores[cfg.beam_size - 1];
            // Log-probabilities only decrease, so no live hypothesis can catch up.
            if live[0].total <= kth {
                hit_cap = false;
                break;
            }
        }
    }

    let mut pool = finished;
    if hit_cap {
        pool.extend(live);
    }
    pool.sort_by(|a, b| {
        order(
            (rank_score(a.total, a.tokens.len(), norm), &a.tokens),
            (rank_score(b.total, b.tokens.len(), norm), &b.tokens),
        )
    });
    pool.truncate(cfg.beam_size);
    Ok(pool
        .into_iter()
        .map(|h| Candidate {
            text: vocab.decode(&h.tokens),
            tokens: h.tokens,
            token_logprobs: h.lps,
            total_logprob: h.total,
        })
        .collect())
}

/// Repeated argmax (lowest id on ties) until EOS or `max_len` tokens.
pub fn greedy<M: StepModel>(model: &M, vocab: &Vocab, max_len: usize) -> Candidate {
    let allowed = generatable_tokens(vocab.len());
    let mut state = model.start();
    let mut tokens = Vec::new();
    let mut lps = Vec::new();
    for _ in 0..max_len {
        let lp = model.logprobs(&state);
        let mut best = allowed[0];
        for &t in &allowed {
            let (a, b) = (lp[t as usize], lp[best as usize]);
            if a > b || (a == b && t < best) {
                best = t;
            }
        }
        tokens.push(best);
        lps.push(lp[best as usize]);
        if best == EOS {
            break;
        }
        state = model.advance(&state, best);
    }
    Candidate {
        text: vocab.decode(&tokens),
        total_logprob: lps.iter().sum(),
        tokens,
        token_logprobs: lps,
    }
}
