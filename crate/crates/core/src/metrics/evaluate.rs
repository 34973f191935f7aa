use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bleu::BleuStats;
use super::cider::{CiderScorer, DEFAULT_SIGMA};
use super::scorer::{ImageSide, Scorer};
use crate::datasets::{SamplePair, SceneIndex};
use crate::decoder::GenerationRecord;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: String,
    pub candidate: String,
    pub cider_d: f64,
    pub stub_target: f64,
    pub stub_receptacle: f64,
    pub bleu_stats: BleuStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub cider_d: f64,
    pub bleu4: f64,
    pub stub_target: f64,
    pub stub_receptacle: f64,
    pub per_sample: Vec<SampleScore>,
}

impl EvaluationReport {
    /// Corpus numbers rebuilt from the per-sample rows.
    pub fn reaggregate(rows: &[SampleScore]) -> (f64, f64, f64, f64) {
        let n = rows.len().max(1) as f64;
        let mut stats = BleuStats::default();
        for r in rows {
            stats.add(&r.bleu_stats);
        }
        (
            rows.iter().map(|r| r.cider_d).sum::<f64>() / n,
            stats.score(false),
            rows.iter().map(|r| r.stub_target).sum::<f64>() / n,
            rows.iter().map(|r| r.stub_receptacle).sum::<f64>() / n,
        )
    }
}

/// Scores the top candidate of each generation against the dataset
/// references. Target and receptacle scorer views are reported separately.
pub fn evaluate(
    dataset: &[SamplePair],
    generations: &[GenerationRecord],
    scenes: &SceneIndex,
    scorer: &dyn Scorer,
) -> Result<EvaluationReport> {
    let by_id: HashMap<&str, &GenerationRecord> = generations
        .iter()
        .map(|g| (g.sample_id.as_str(), g))
        .collect();
    let missing: Vec<String> = dataset
        .iter()
        .filter(|s| by_id.get(s.sample_id.as_str()).is_none_or(|g| g.candidates.is_empty()))
        .map(|s| s.sample_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::CoverageGap(missing));
    }

    let reference_sets: Vec<Vec<String>> = dataset.iter().map(|s| s.references.clone()).collect();
    let cider = CiderScorer::new(&reference_sets).with_sigma(DEFAULT_SIGMA);

    let per_sample = dataset
        .par_iter()
        .map(|sample| {
            let candidate = by_id[sample.sample_id.as_str()].candidates[0].text.clone();
            let target = scenes.attributes(&sample.target_image_id)?;
            let receptacle = scenes.attributes(&sample.receptacle_image_id)?;
            Ok(SampleScore {
                cider_d: cider.score(&candidate, &sample.references)?,
                stub_target: scorer.score(&candidate, &sample.references, ImageSide::Target, &target)?,
                stub_receptacle: scorer.score(
                    &candidate,
                    &sample.references,
                    ImageSide::Receptacle,
                    &receptacle,
                )?,
                bleu_stats: BleuStats::compute(&candidate, &sample.references),
                sample_id: sample.sample_id.clone(),
                candidate,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let (cider_d, bleu4, stub_target, stub_receptacle) = EvaluationReport::reaggregate(&per_sample);
    Ok(EvaluationReport {
        cider_d,
        bleu4,
        stub_target,
        stub_receptacle,
        per_sample,
    })
}
