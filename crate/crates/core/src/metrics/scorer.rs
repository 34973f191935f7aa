//! Image-conditioned, reference-aware caption scorers.
//!
//! A learned metric can be plugged in behind [`Scorer`]; the bundled
//! [`StubPolosScorer`] is a deterministic stand-in combining reference overlap
//! with the presence of the image side's ground-truth attribute words.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::tokenize::tokenize_for_metrics;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageSide {
    Target,
    Receptacle,
}

/// Ground-truth words visible in one image (color/material, category, room).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageAttributes {
    pub image_id: String,
    pub words: Vec<String>,
}

pub trait Scorer: Send + Sync {
    fn name(&self) -> &str;

    /// Score in `[0, 1]`.
    fn score(
        &self,
        candidate: &str,
        references: &[String],
        side: ImageSide,
        image: &ImageAttributes,
    ) -> Result<f64>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct StubPolosScorer;

pub const STUB_SCORER_NAME: &str = "stub";

impl Scorer for StubPolosScorer {
    fn name(&self) -> &str {
        STUB_SCORER_NAME
    }

    fn score(
        &self,
        candidate: &str,
        references: &[String],
        _side: ImageSide,
        image: &ImageAttributes,
    ) -> Result<f64> {
        stub_polos_score(candidate, references, image)
    }
}

/// `0.5 · max-over-references unigram F1 + 0.5 · attribute-word coverage`.
pub fn stub_polos_score(
    candidate: &str,
    references: &[String],
    image: &ImageAttributes,
) -> Result<f64> {
    if image.words.is_empty() {
        return Err(Error::MissingAttributes(image.image_id.clone()));
    }
    let cand = tokenize_for_metrics(candidate);
    let f1 = references
        .iter()
        .map(|r| unigram_f1(&cand, &tokenize_for_metrics(r)))
        .fold(0.0, f64::max);
    let present = image
        .words
        .iter()
        .filter(|w| {
            let attr = tokenize_for_metrics(w);
            !attr.is_empty() && attr.iter().all(|a| cand.contains(a))
        })
        .count();
    let coverage = present as f64 / image.words.len() as f64;
    Ok((0.5 * f1 + 0.5 * coverage).clamp(0.0, 1.0))
}

/// Clipped unigram F1; 0 when either side is empty or nothing overlaps.
pub fn unigram_f1(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut ref_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in reference {
        *ref_counts.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for t in candidate {
        if let Some(c) = ref_counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / candidate.len() as f64;
    let r = overlap as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Looks up a scorer by name; only `"stub"` ships with the crate.
pub fn scorer_by_name(name: &str) -> Result<Arc<dyn Scorer>> {
    match name {
        STUB_SCORER_NAME => Ok(Arc::new(StubPolosScorer)),
        other => Err(Error::ScorerUnavailable(other.to_owned())),
    }
}
