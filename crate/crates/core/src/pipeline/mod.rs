//! File-level commands: data generation, stage training, generation,
//! evaluation and augmentation.

mod config;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{DataConfig, PathsConfig, RunConfig};

use crate::datasets::{
    check_image_ids, generate_synthetic_dataset, load_dataset, save_dataset, write_scene_sidecars, GeneratorConfig,
    SamplePair, SceneIndex, SplitRatios, SyntheticDataset, Vocab,
};
use crate::decoder::{BeamConfig, GeneratedText, GenerationRecord};
use crate::error::{Error, Result};
use crate::features::{write_feature_cache, FeatureBackend, FileCacheBackend, ProviderManifest, RawImageFeatures, SyntheticBackend};
use crate::metrics::{evaluate, scorer_by_name, tokenize_for_metrics, CiderScorer, EvaluationReport, Scorer, DEFAULT_SIGMA};
use crate::model::InstructionModel;
use crate::training::trainer::{pretrain_lm, train_stage};
use crate::training::{Checkpoint, HashCheck, LogRecord, RewardFunction, Stage, StageConfig, TrainingSample};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const SCENES_DIR: &str = "scenes";
pub const FEATURES_DIR: &str = "features";
pub const AUGMENTED_SUFFIX: &str = "-aug";

pub fn checkpoint_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("{stage}.ckpt.json"))
}

pub fn log_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("{stage}.log.jsonl"))
}

/// Writes `n` synthetic scenes to `out`: three dataset splits, scene
/// sidecars and a feature cache produced by the synthetic backend.
pub fn gen_data(out: &Path, n: usize, seed: u64, ratios: SplitRatios) -> Result<SyntheticDataset> {
    let generator = GeneratorConfig::default();
    let dataset = generate_synthetic_dataset(&generator, n, seed, ratios)?;
    fs::create_dir_all(out).map_err(Error::io(out))?;
    write_scene_sidecars(&dataset.scenes, &out.join(SCENES_DIR))?;
    let manifest = ProviderManifest::synthetic(generator.noun_phrases(), seed);
    let backend = SyntheticBackend::new(manifest, SceneIndex::new(dataset.scenes.clone()))?;
    write_feature_cache(&backend, &out.join(FEATURES_DIR))?;
    for (file, split) in [(TRAIN_FILE, &dataset.train), (VAL_FILE, &dataset.val), (TEST_FILE, &dataset.test)] {
        check_image_ids(split, |id| backend.contains(id))?;
        save_dataset(split, &out.join(file))?;
    }
    Ok(dataset)
}

/// Dataset, scenes and features of a `gen-data` directory.
pub struct DataContext {
    pub backend: FileCacheBackend,
    pub scenes: SceneIndex,
}

impl DataContext {
    pub fn open(data_dir: &Path) -> Result<Self> {
        Ok(Self {
            backend: FileCacheBackend::open(&data_dir.join(FEATURES_DIR))?,
            scenes: SceneIndex::load_dir(&data_dir.join(SCENES_DIR))?,
        })
    }

    /// Resolves features (shared across samples using the same image) and
    /// ground-truth attribute words.
    pub fn samples(&self, pairs: &[SamplePair]) -> Result<Vec<TrainingSample>> {
        check_image_ids(pairs, |id| self.backend.contains(id))?;
        let mut cache: HashMap<String, Arc<RawImageFeatures>> = HashMap::new();
        let mut fetch = |id: &str| -> Result<Arc<RawImageFeatures>> {
            if let Some(f) = cache.get(id) {
                return Ok(f.clone());
            }
            let f = Arc::new(self.backend.get_raw_features(id)?);
            cache.insert(id.to_string(), f.clone());
            Ok(f)
        };
        pairs
            .iter()
            .map(|p| {
                Ok(TrainingSample {
                    sample_id: p.sample_id.clone(),
                    target: fetch(&p.target_image_id)?,
                    receptacle: fetch(&p.receptacle_image_id)?,
                    references: p.references.clone(),
                    target_attributes: self.scenes.attributes(&p.target_image_id)?,
                    receptacle_attributes: self.scenes.attributes(&p.receptacle_image_id)?,
                })
            })
            .collect()
    }
}

/// Training pairs: the train split plus any extra datasets.
pub fn training_pairs(run: &RunConfig) -> Result<Vec<SamplePair>> {
    let mut pairs = load_dataset(&run.paths.data_dir.join(TRAIN_FILE))?;
    for extra in &run.paths.train_extra {
        pairs.extend(load_dataset(extra)?);
    }
    Ok(pairs)
}

/// Checkpoints in `dir`, sorted by file name. A missing directory is empty.
pub fn scan_checkpoints(dir: &Path) -> Result<Vec<(PathBuf, Checkpoint)>> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Ok(Vec::new());
    };
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(".ckpt.json")))
        .collect();
    paths.sort();
    paths.into_iter().map(|p| Checkpoint::load(&p).map(|c| (p, c))).collect()
}

/// The checkpoint a stage continues from. Only checkpoints that completed
/// no stage at or after `stage` qualify, so reruns start from the same
/// place; among those the one with the most completed stages wins.
pub fn select_start(checkpoints: &[(PathBuf, Checkpoint)], stage: Stage, searched: &Path) -> Result<Option<usize>> {
    let best = checkpoints
        .iter()
        .enumerate()
        .filter(|(_, (_, c))| c.completed_stages.iter().all(|&s| s < stage))
        .filter(|(_, (_, c))| stage.prerequisites().iter().all(|&p| c.has_completed(p)))
        .max_by_key(|(i, (_, c))| (c.completed_stages.len(), std::cmp::Reverse(*i)))
        .map(|(i, _)| i);
    if best.is_none() {
        if let Some(&needs) = stage
            .prerequisites()
            .iter()
            .rev()
            .find(|&&p| !checkpoints.iter().any(|(_, c)| c.has_completed(p)))
            .or(stage.prerequisites().last())
        {
            return Err(Error::MissingPrerequisite {
                stage: stage.to_string(),
                needs: needs.to_string(),
                searched: searched.display().to_string(),
            });
        }
    }
    Ok(best)
}

pub struct StageOutcome {
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
    pub started_from: Option<PathBuf>,
}

/// Mean of every logged quantity over the final epoch.
fn final_epoch_metrics(log: &[LogRecord]) -> BTreeMap<String, f64> {
    let Some(last) = log.last().map(|r| r.epoch) else {
        return BTreeMap::new();
    };
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in log.iter().filter(|r| r.epoch == last) {
        let reward = r.mean_reward.map(|v| ("mean_reward".to_string(), v));
        for (k, v) in r.losses.iter().map(|(k, v)| (k.clone(), *v)).chain(reward) {
            let e = sums.entry(k).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

fn write_log(log: &[LogRecord], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path).map_err(Error::io(path))?);
    for r in log {
        let line = serde_json::to_string(r).map_err(Error::json(path))?;
        writeln!(out, "{line}").map_err(Error::io(path))?;
    }
    out.flush().map_err(Error::io(path))
}

/// Runs one stage and writes `<stage>.ckpt.json` plus `<stage>.log.jsonl`.
pub fn train(run: &RunConfig, stage: Stage) -> Result<StageOutcome> {
    let cfg: &StageConfig = run.stage(stage);
    cfg.validate()?;
    let ckpt_dir = &run.paths.checkpoint_dir;
    let existing = scan_checkpoints(ckpt_dir)?;
    let start = select_start(&existing, stage, ckpt_dir)?;

    let data = DataContext::open(&run.paths.data_dir)?;
    let pairs = training_pairs(run)?;
    let samples = data.samples(&pairs)?;
    let seed = cfg.seed_or(run.seed);
    let hash = run.hash();

    let (mut model, mut completed, started_from) = match start {
        Some(i) => {
            let (path, ckpt) = &existing[i];
            if let HashCheck::Mismatch { .. } = ckpt.check_config_hash(&hash) {
                log::warn!("continuing from {} trained under a different config", path.display());
            }
            (ckpt.to_model()?, ckpt.completed_stages.clone(), Some(path.clone()))
        }
        None => {
            let vocab = Vocab::build(&pairs);
            let manifest = data.backend.manifest().clone();
            (InstructionModel::new(run.model.clone(), vocab, manifest, seed), Vec::new(), None)
        }
    };

    let log = match stage {
        Stage::PretrainLm => {
            let corpus: Vec<Vec<u32>> = pairs
                .iter()
                .flat_map(|p| p.references.iter().map(|r| model.target_tokens(r)))
                .collect();
            pretrain_lm(&mut model, &corpus, cfg, seed)?
        }
        Stage::Hccp => {
            let scorer = scorer_by_name(&run.scorer)?;
            let refs: Vec<Vec<String>> = pairs.iter().map(|p| p.references.clone()).collect();
            let cider = CiderScorer::new(&refs).with_sigma(DEFAULT_SIGMA);
            let reward = RewardFunction {
                scorer: scorer.as_ref(),
                cider: &cider,
                lambdas: cfg.lambdas,
            };
            train_stage(&mut model, cfg, &samples, Some(&reward), seed)?
        }
        Stage::Tqpp | Stage::Pdmp => train_stage(&mut model, cfg, &samples, None, seed)?,
    };

    completed.push(stage);
    completed.sort();
    completed.dedup();
    let checkpoint = Checkpoint::from_model(
        &model,
        stage,
        completed,
        cfg.epochs,
        hash,
        final_epoch_metrics(&log),
    );
    fs::create_dir_all(ckpt_dir).map_err(Error::io(ckpt_dir))?;
    let checkpoint_path = checkpoint_path(ckpt_dir, stage);
    let log_path = log_path(ckpt_dir, stage);
    write_log(&log, &log_path)?;
    checkpoint.save(&checkpoint_path)?;
    Ok(StageOutcome {
        checkpoint_path,
        log_path,
        checkpoint,
        log,
        started_from,
    })
}

/// Beam candidates for every pair, in dataset order.
pub fn generate_records(
    model: &InstructionModel,
    pairs: &[SamplePair],
    backend: &dyn FeatureBackend,
    beam: &BeamConfig,
    stage: &str,
    checkpoint: &str,
    config_hash: &str,
) -> Result<Vec<GenerationRecord>> {
    check_image_ids(pairs, |id| backend.contains(id))?;
    pairs
        .par_iter()
        .map(|p| {
            let target = backend.get_raw_features(&p.target_image_id)?;
            let receptacle = backend.get_raw_features(&p.receptacle_image_id)?;
            let candidates = model
                .generate(&target, &receptacle, beam)?
                .into_iter()
                .map(|c| GeneratedText {
                    text: c.text,
                    total_logprob: c.total_logprob,
                })
                .collect();
            Ok(GenerationRecord {
                sample_id: p.sample_id.clone(),
                candidates,
                stage: stage.to_string(),
                checkpoint: checkpoint.to_string(),
                config_hash: config_hash.to_string(),
            })
        })
        .collect()
}

/// Loads a checkpoint and generates for every pair of `dataset`.
pub fn generate(checkpoint: &Path, dataset: &Path, features: &Path, beam_size: usize) -> Result<Vec<GenerationRecord>> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.to_model()?;
    let backend = FileCacheBackend::open(features)?;
    let pairs = load_dataset(dataset)?;
    let beam = BeamConfig {
        beam_size,
        max_len: model.config.max_len,
        length_normalize: false,
    };
    generate_records(
        &model,
        &pairs,
        &backend,
        &beam,
        ckpt.stage.as_str(),
        &checkpoint.display().to_string(),
        &ckpt.config_hash,
    )
}

/// An evaluation report tagged with the configuration that produced the
/// generations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationOutput {
    pub config_hash: String,
    pub scorer: String,
    pub num_samples: usize,
    #[serde(flatten)]
    pub report: EvaluationReport,
}

pub fn evaluate_generations(
    pairs: &[SamplePair],
    generations: &[GenerationRecord],
    scenes: &SceneIndex,
    scorer: &dyn Scorer,
) -> Result<EvaluationOutput> {
    let report = evaluate(pairs, generations, scenes, scorer)?;
    let mut hashes: Vec<&str> = generations.iter().map(|g| g.config_hash.as_str()).collect();
    hashes.sort_unstable();
    hashes.dedup();
    Ok(EvaluationOutput {
        config_hash: hashes.join(","),
        scorer: scorer.name().to_string(),
        num_samples: pairs.len(),
        report,
    })
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(Error::io(parent))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(Error::json(path))?;
    fs::write(path, text + "\n").map_err(Error::io(path))
}

/// One new pair per input pair whose sole reference is the top beam
/// candidate; the output concatenates directly with the original dataset.
pub fn emit_augmented_dataset(
    model: &InstructionModel,
    pairs: &[SamplePair],
    backend: &dyn FeatureBackend,
    beam: &BeamConfig,
) -> Result<Vec<SamplePair>> {
    check_image_ids(pairs, |id| backend.contains(id))?;
    pairs
        .par_iter()
        .map(|p| {
            let target = backend.get_raw_features(&p.target_image_id)?;
            let receptacle = backend.get_raw_features(&p.receptacle_image_id)?;
            let top = model.generate(&target, &receptacle, beam)?.swap_remove(0);
            Ok(SamplePair {
                sample_id: format!("{}{AUGMENTED_SUFFIX}", p.sample_id),
                target_image_id: p.target_image_id.clone(),
                receptacle_image_id: p.receptacle_image_id.clone(),
                references: vec![top.text],
            })
        })
        .collect()
}

pub fn augment(checkpoint: &Path, dataset: &Path, features: &Path, beam_size: usize, out: &Path) -> Result<Vec<SamplePair>> {
    let model = Checkpoint::load(checkpoint)?.to_model()?;
    let backend = FileCacheBackend::open(features)?;
    let pairs = load_dataset(dataset)?;
    let beam = BeamConfig {
        beam_size,
        max_len: model.config.max_len,
        length_normalize: false,
    };
    let augmented = emit_augmented_dataset(&model, &pairs, &backend, &beam)?;
    save_dataset(&augmented, out)?;
    Ok(augmented)
}

/// Whether `candidate` equals some reference token for token.
pub fn exact_match(candidate: &str, references: &[String]) -> bool {
    let c = tokenize_for_metrics(candidate);
    references.iter().any(|r| tokenize_for_metrics(r) == c)
}

/// Fraction of samples whose greedy output exactly matches a reference.
pub fn greedy_exact_match(model: &InstructionModel, samples: &[TrainingSample]) -> Result<f64> {
    let hits = samples
        .par_iter()
        .map(|s| Ok(exact_match(&model.greedy(&s.target, &s.receptacle)?.text, &s.references)))
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len().max(1) as f64)
}
