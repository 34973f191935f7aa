//! Corpus-level BLEU-4: uniform weights, clipped precision, brevity penalty
//! against the closest reference length.

use serde::{Deserialize, Serialize};

use super::cider::{ngram_counts, MAX_N};
use super::tokenize::tokenize_for_metrics;
use crate::error::{Error, Result};

/// Epsilon substituted for a zero match count when smoothing is on.
const SMOOTH_EPSILON: f64 = 0.1;

/// Sufficient statistics of one candidate; summing them over a corpus is all
/// corpus BLEU needs.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: [usize; MAX_N],
    pub totals: [usize; MAX_N],
    pub cand_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn compute<S: AsRef<str>>(candidate: &str, references: &[S]) -> Self {
        let cand = tokenize_for_metrics(candidate);
        let refs: Vec<Vec<String>> = references
            .iter()
            .map(|r| tokenize_for_metrics(r.as_ref()))
            .collect();
        let cand_counts = ngram_counts(&cand);
        let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r)).collect();

        let mut stats = BleuStats {
            cand_len: cand.len(),
            ref_len: closest_ref_len(cand.len(), &refs),
            ..Default::default()
        };
        for n in 0..MAX_N {
            for (gram, &count) in &cand_counts[n] {
                let max_ref = ref_counts
                    .iter()
                    .map(|rc| rc[n].get(gram).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                stats.matches[n] += count.min(max_ref);
                stats.totals[n] += count;
            }
        }
        stats
    }

    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..MAX_N {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.cand_len += other.cand_len;
        self.ref_len += other.ref_len;
    }

    pub fn score(&self, smoothing: bool) -> f64 {
        if self.cand_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..MAX_N {
            let total = self.totals[n];
            let matched = self.matches[n];
            if total == 0 || matched == 0 {
                if !smoothing || total == 0 {
                    return 0.0;
                }
                log_sum += (SMOOTH_EPSILON / total as f64).ln();
            } else {
                log_sum += (matched as f64 / total as f64).ln();
            }
        }
        let c = self.cand_len as f64;
        let r = self.ref_len as f64;
        let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        bp * (log_sum / MAX_N as f64).exp()
    }
}

/// Reference length closest to the candidate length; ties go to the shorter.
fn closest_ref_len(cand_len: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(cand_len), l))
        .unwrap_or(0)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct BleuOptions {
    pub smoothing: bool,
}

pub fn bleu4<S: AsRef<str>, R: AsRef<str>>(candidates: &[S], references: &[Vec<R>]) -> Result<f64> {
    bleu4_with(candidates, references, BleuOptions::default())
}

pub fn bleu4_with<S: AsRef<str>, R: AsRef<str>>(
    candidates: &[S],
    references: &[Vec<R>],
    options: BleuOptions,
) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::MismatchedLengths {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    let mut total = BleuStats::default();
    for (i, (c, r)) in candidates.iter().zip(references).enumerate() {
        if r.is_empty() {
            return Err(Error::EmptyReferences(format!("#{i}")));
        }
        total.add(&BleuStats::compute(c.as_ref(), r));
    }
    Ok(total.score(options.smoothing))
}
