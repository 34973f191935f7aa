//! CIDEr-D: TF-IDF weighted n-gram cosine similarity (n = 1..4) with count
//! clipping and a Gaussian length penalty, scaled by 10.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::tokenize::tokenize_for_metrics;
use crate::error::{Error, Result};

pub const MAX_N: usize = 4;
pub const DEFAULT_SIGMA: f64 = 6.0;

pub type NGram = Vec<String>;
type Counts = [BTreeMap<NGram, usize>; MAX_N];

/// n-gram counts of one token list for n = 1..=4 (index n - 1).
pub fn ngram_counts<S: AsRef<str>>(tokens: &[S]) -> Counts {
    let mut counts: Counts = Default::default();
    for (i, slot) in counts.iter_mut().enumerate() {
        let n = i + 1;
        if tokens.len() < n {
            continue;
        }
        for window in tokens.windows(n) {
            let gram: NGram = window.iter().map(|t| t.as_ref().to_owned()).collect();
            *slot.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CiderVariant {
    /// Count clipping and Gaussian length penalty.
    #[default]
    D,
    /// Unclipped cosine, no length penalty.
    Plain,
}

/// Document frequencies over a reference corpus, reusable across calls.
#[derive(Clone, Debug)]
pub struct CiderScorer {
    doc_freq: HashMap<NGram, usize>,
    num_docs: usize,
    sigma: f64,
    variant: CiderVariant,
}

struct Weighted {
    vec: [BTreeMap<NGram, f64>; MAX_N],
    sq_norm: [f64; MAX_N],
    len: usize,
}

impl CiderScorer {
    /// Builds the IDF table; each element of `reference_sets` is the set of
    /// references of one image and counts as one document.
    pub fn new<S: AsRef<str>>(reference_sets: &[Vec<S>]) -> Self {
        let mut doc_freq = HashMap::new();
        for refs in reference_sets {
            let mut seen: BTreeSet<NGram> = BTreeSet::new();
            for r in refs {
                let toks = tokenize_for_metrics(r.as_ref());
                for per_n in ngram_counts(&toks) {
                    seen.extend(per_n.into_keys());
                }
            }
            for gram in seen {
                *doc_freq.entry(gram).or_insert(0) += 1;
            }
        }
        Self {
            doc_freq,
            num_docs: reference_sets.len(),
            sigma: DEFAULT_SIGMA,
            variant: CiderVariant::D,
        }
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn with_variant(mut self, variant: CiderVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn num_docs(&self) -> usize {
        self.num_docs
    }

    pub fn doc_freq(&self, gram: &[&str]) -> usize {
        let key: NGram = gram.iter().map(|s| s.to_string()).collect();
        self.doc_freq.get(&key).copied().unwrap_or(0)
    }

    /// log(M / max(1, df))
    pub fn idf(&self, gram: &NGram) -> f64 {
        let df = self.doc_freq.get(gram).copied().unwrap_or(0).max(1) as f64;
        (self.num_docs as f64).ln() - df.ln()
    }

    fn weigh(&self, tokens: &[String]) -> Weighted {
        let counts = ngram_counts(tokens);
        let mut vec: [BTreeMap<NGram, f64>; MAX_N] = Default::default();
        let mut sq_norm = [0.0; MAX_N];
        for (n, per_n) in counts.into_iter().enumerate() {
            for (gram, tf) in per_n {
                let w = tf as f64 * self.idf(&gram);
                sq_norm[n] += w * w;
                vec[n].insert(gram, w);
            }
        }
        Weighted {
            vec,
            sq_norm,
            len: tokens.len(),
        }
    }

    fn similarity(&self, hyp: &Weighted, reference: &Weighted) -> [f64; MAX_N] {
        let delta = hyp.len as f64 - reference.len as f64;
        let penalty = match self.variant {
            CiderVariant::D => (-(delta * delta) / (2.0 * self.sigma * self.sigma)).exp(),
            CiderVariant::Plain => 1.0,
        };
        let mut val = [0.0; MAX_N];
        for n in 0..MAX_N {
            let mut dot = 0.0;
            for (gram, &h) in &hyp.vec[n] {
                if let Some(&r) = reference.vec[n].get(gram) {
                    dot += match self.variant {
                        CiderVariant::D => h.min(r) * r,
                        CiderVariant::Plain => h * r,
                    };
                }
            }
            let denom = (hyp.sq_norm[n] * reference.sq_norm[n]).sqrt();
            if denom != 0.0 {
                dot /= denom;
            }
            val[n] = dot * penalty;
        }
        val
    }

    /// Per-sample score: 10 · mean over n of the mean similarity over references.
    pub fn score<S: AsRef<str>>(&self, candidate: &str, references: &[S]) -> Result<f64> {
        if references.is_empty() {
            return Err(Error::EmptyReferences(candidate.to_owned()));
        }
        let hyp = self.weigh(&tokenize_for_metrics(candidate));
        let mut acc = [0.0; MAX_N];
        for r in references {
            let reference = self.weigh(&tokenize_for_metrics(r.as_ref()));
            let sim = self.similarity(&hyp, &reference);
            for n in 0..MAX_N {
                acc[n] += sim[n];
            }
        }
        let m = references.len() as f64;
        let mean = acc.iter().map(|v| v / m).sum::<f64>() / MAX_N as f64;
        Ok(10.0 * mean)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CiderResult {
    pub per_sample: Vec<f64>,
    pub corpus: f64,
}

/// Corpus CIDEr-D with document frequencies taken from `references`.
pub fn cider_d<S: AsRef<str>, R: AsRef<str>>(
    candidates: &[S],
    references: &[Vec<R>],
    sigma: f64,
) -> Result<CiderResult> {
    cider_with_variant(candidates, references, sigma, CiderVariant::D)
}

pub fn cider_with_variant<S: AsRef<str>, R: AsRef<str>>(
    candidates: &[S],
    references: &[Vec<R>],
    sigma: f64,
    variant: CiderVariant,
) -> Result<CiderResult> {
    if candidates.len() != references.len() {
        return Err(Error::MismatchedLengths {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if let Some(i) = references.iter().position(|r| r.is_empty()) {
        return Err(Error::EmptyReferences(format!("#{i}")));
    }
    let scorer = CiderScorer::new(references)
        .with_sigma(sigma)
        .with_variant(variant);
    let per_sample = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| scorer.score(c.as_ref(), r))
        .collect::<Result<Vec<_>>>()?;
    let corpus = if per_sample.is_empty() {
        0.0
    } else {
        per_sample.iter().sum::<f64>() / per_sample.len() as f64
    };
    Ok(CiderResult { per_sample, corpus })
}
