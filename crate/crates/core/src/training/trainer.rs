use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Stage, StageConfig};
use super::losses::{hcct_loss, itc_loss, itc_similarity, itg_loss, itm_loss};
use super::optim::Adam;
use super::reward::{RewardBundle, RewardFunction};
use crate::autograd::{Gradients, Graph, ParamId, Var};
use crate::decoder::{BeamConfig, Candidate};
use crate::error::{Error, Result};
use crate::features::RawImageFeatures;
use crate::metrics::ImageAttributes;
use crate::model::{InstructionModel, FEATURE_PARAMS, LM_PARAMS, PREFIX_PARAMS, QFORMER_PARAMS};

/// One image pair with its features resolved and its references attached.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub sample_id: String,
    pub target: Arc<RawImageFeatures>,
    pub receptacle: Arc<RawImageFeatures>,
    pub references: Vec<String>,
    pub target_attributes: ImageAttributes,
    pub receptacle_attributes: ImageAttributes,
}

/// One line of a training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub step: usize,
    pub losses: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_reward: Option<f64>,
}

/// Parameters a stage may update.
pub fn trainable_params(model: &InstructionModel, stage: Stage, freeze_decoder: bool) -> Vec<ParamId> {
    let mut prefixes = match stage {
        Stage::PretrainLm => vec![LM_PARAMS],
        Stage::Tqpp => vec![FEATURE_PARAMS, QFORMER_PARAMS],
        Stage::Pdmp | Stage::Hccp => vec![FEATURE_PARAMS, QFORMER_PARAMS, PREFIX_PARAMS],
    };
    if matches!(stage, Stage::Pdmp | Stage::Hccp) && !freeze_decoder {
        prefixes.push(LM_PARAMS);
    }
    model.params.ids_with_prefix(&prefixes)
}

/// Sums per-item gradients in item order so results do not depend on
/// thread scheduling.
fn reduce(parts: Vec<Result<(f64, Gradients)>>) -> Result<(f64, Gradients)> {
    let mut total = 0.0;
    let mut grads = Gradients::default();
    for part in parts {
        let (v, g) = part?;
        total += v;
        grads.merge(&g);
    }
    Ok((total, grads))
}

// ---- TQPP ---------------------------------------------------------------

pub const TQPP_COMPONENTS: [&str; 6] = ["itc_grid", "itg_grid", "itm_grid", "itc_region", "itg_region", "itm_region"];

#[derive(Clone, Debug, PartialEq)]
pub struct TqppLosses {
    pub components: BTreeMap<String, f64>,
    pub total: f64,
}

/// Records the TQPP objective for `items` (sample, reference text) and
/// returns the total plus the six named components.
pub fn tqpp_graph(
    g: &mut Graph,
    model: &InstructionModel,
    items: &[(&TrainingSample, &str)],
    tau: f64,
    shift: usize,
) -> Result<(Var, Vec<(&'static str, Var)>)> {
    let mut per_block: [(Vec<Var>, Vec<Var>); 2] = Default::default();
    let mut itg: [Vec<Var>; 2] = Default::default();
    for (sample, text) in items {
        let input = model.text_input(text);
        let states = model.encode(g, &sample.target, &sample.receptacle, Some(&input))?;
        let blocks = [
            (states.h_q_g, states.h_w_g.expect("text branch"), &model.qformer.grid),
            (states.h_q_r, states.h_w_r.expect("text branch"), &model.qformer.region),
        ];
        for (b, (h_q, h_w, mc)) in blocks.into_iter().enumerate() {
            let last = g.shape(h_w).0 - 1;
            let feat = g.slice_rows(h_w, last, 1);
            per_block[b].0.push(h_q);
            per_block[b].1.push(feat);
            itg[b].push(itg_loss(g, &mc.itg_head, h_w, &input)?);
        }
    }
    let mut named = Vec::with_capacity(6);
    let heads = [&model.qformer.grid.itm_head, &model.qformer.region.itm_head];
    for b in 0..2 {
        let (q, t) = &per_block[b];
        let itc = itc_loss(g, q, t, tau)?;
        let itg_sum = g.add_scalars(&itg[b]);
        let itg_mean = g.scale(itg_sum, 1.0 / items.len() as f64);
        let itm = itm_loss(g, heads[b], q, t, shift)?;
        named.push((TQPP_COMPONENTS[3 * b], itc));
        named.push((TQPP_COMPONENTS[3 * b + 1], itg_mean));
        named.push((TQPP_COMPONENTS[3 * b + 2], itm));
    }
    let parts: Vec<Var> = named.iter().map(|(_, v)| *v).collect();
    let total = g.add_scalars(&parts);
    Ok((total, named))
}

/// Image-text similarity for every (pair i, text j), summed over the grid
/// and region blocks.
pub fn itc_similarity_matrix(model: &InstructionModel, items: &[(&TrainingSample, &str)], tau: f64) -> Result<Array2<f64>> {
    let mut g = Graph::with_trainable(&model.params, &[]);
    let mut q: [Vec<Var>; 2] = Default::default();
    let mut t: [Vec<Var>; 2] = Default::default();
    for (sample, text) in items {
        let input = model.text_input(text);
        let states = model.encode(&mut g, &sample.target, &sample.receptacle, Some(&input))?;
        for (b, (h_q, h_w)) in [
            (states.h_q_g, states.h_w_g.expect("text branch")),
            (states.h_q_r, states.h_w_r.expect("text branch")),
        ]
        .into_iter()
        .enumerate()
        {
            let last = g.shape(h_w).0 - 1;
            q[b].push(h_q);
            t[b].push(g.slice_rows(h_w, last, 1));
        }
    }
    let grid = itc_similarity(&mut g, &q[0], &t[0], tau)?;
    let region = itc_similarity(&mut g, &q[1], &t[1], tau)?;
    Ok(g.value(grid) + g.value(region))
}

/// Fraction of pairs whose own text scores strictly above every other text.
pub fn itc_alignment(model: &InstructionModel, items: &[(&TrainingSample, &str)], tau: f64) -> Result<f64> {
    let s = itc_similarity_matrix(model, items, tau)?;
    let n = s.nrows();
    let hits = (0..n)
        .filter(|&i| (0..n).all(|j| j == i || s[[i, i]] > s[[i, j]]))
        .count();
    Ok(hits as f64 / n as f64)
}

pub fn tqpp_objective(
    model: &InstructionModel,
    items: &[(&TrainingSample, &str)],
    tau: f64,
    shift: usize,
    trainable: &[ParamId],
) -> Result<(TqppLosses, Gradients)> {
    let mut g = Graph::with_trainable(&model.params, trainable);
    let (total, named) = tqpp_graph(&mut g, model, items, tau, shift)?;
    let losses = TqppLosses {
        components: named.iter().map(|(n, v)| (n.to_string(), g.scalar(*v))).collect(),
        total: g.scalar(total),
    };
    Ok((losses, g.backward(total)))
}

pub fn tqpp_step(
    model: &mut InstructionModel,
    opt: &mut Adam,
    items: &[(&TrainingSample, &str)],
    tau: f64,
    shift: usize,
) -> Result<TqppLosses> {
    let (losses, grads) = tqpp_objective(model, items, tau, shift, opt.trainable())?;
    opt.step(&mut model.params, &grads);
    Ok(losses)
}

// ---- PDMP ---------------------------------------------------------------

/// Summed token NLL of one reference given the image pair, and its length.
fn pdmp_pair(model: &InstructionModel, sample: &TrainingSample, text: &str, trainable: &[ParamId]) -> Result<(f64, usize, Gradients)> {
    let tokens = model.target_tokens(text);
    let mut g = Graph::with_trainable(&model.params, trainable);
    let prefix = model.prefix_var(&mut g, &sample.target, &sample.receptacle)?;
    let lp = model.lm.sequence_logprob_var(&mut g, Some(prefix), &tokens)?;
    let nll = g.scale(lp, -1.0);
    Ok((g.scalar(nll), tokens.len(), g.backward(nll)))
}

/// Mean token cross-entropy over every token of every pair.
pub fn pdmp_objective(
    model: &InstructionModel,
    pairs: &[(&TrainingSample, &str)],
    trainable: &[ParamId],
) -> Result<(f64, Gradients)> {
    let parts: Vec<Result<(f64, usize, Gradients)>> = pairs
        .par_iter()
        .map(|(s, t)| pdmp_pair(model, s, t, trainable))
        .collect();
    let mut tokens = 0usize;
    let mut folded = Vec::with_capacity(parts.len());
    for p in parts {
        let (v, n, g) = p?;
        tokens += n;
        folded.push(Ok((v, g)));
    }
    let (sum, mut grads) = reduce(folded)?;
    let scale = 1.0 / tokens.max(1) as f64;
    grads.scale(scale);
    Ok((sum * scale, grads))
}

pub fn pdmp_step(model: &mut InstructionModel, opt: &mut Adam, pairs: &[(&TrainingSample, &str)]) -> Result<f64> {
    let (loss, grads) = pdmp_objective(model, pairs, opt.trainable())?;
    opt.step(&mut model.params, &grads);
    Ok(loss)
}

// ---- HCCP ---------------------------------------------------------------

/// Beam candidates of one sample with their rewards.
#[derive(Clone, Debug)]
pub struct Rollout<'a> {
    pub sample: &'a TrainingSample,
    pub candidates: Vec<Candidate>,
    pub rewards: RewardBundle,
}

pub fn hccp_rollouts<'a>(
    model: &InstructionModel,
    samples: &[&'a TrainingSample],
    beam: &BeamConfig,
    reward: &RewardFunction,
) -> Result<Vec<Rollout<'a>>> {
    samples
        .par_iter()
        .map(|&sample| {
            let candidates = model.generate(&sample.target, &sample.receptacle, beam)?;
            let rows = candidates
                .iter()
                .map(|c| {
                    reward.compute_reward(
                        &c.text,
                        &sample.references,
                        &sample.target_attributes,
                        &sample.receptacle_attributes,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Rollout {
                sample,
                candidates,
                rewards: RewardBundle::new(rows),
            })
        })
        .collect()
}

/// Batch mean of the per-sample beam loss, with candidates held fixed.
pub fn hccp_objective(model: &InstructionModel, rollouts: &[Rollout], trainable: &[ParamId]) -> Result<(f64, Gradients)> {
    let scale = 1.0 / rollouts.len().max(1) as f64;
    let parts: Vec<Result<(f64, Gradients)>> = rollouts
        .par_iter()
        .map(|r| {
            let mut g = Graph::with_trainable(&model.params, trainable);
            let prefix = model.prefix_var(&mut g, &r.sample.target, &r.sample.receptacle)?;
            let logps = r
                .candidates
                .iter()
                .map(|c| {
                    let lp = model.lm.candidate_logprobs(&mut g, Some(prefix), &c.tokens)?;
                    Ok(g.sum_all(lp))
                })
                .collect::<Result<Vec<_>>>()?;
            let loss = hcct_loss(&mut g, &logps, &r.rewards)?;
            let loss = g.scale(loss, scale);
            Ok((g.scalar(loss), g.backward(loss)))
        })
        .collect();
    reduce(parts)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HccpStats {
    pub loss: f64,
    pub mean_reward: f64,
}

pub fn hccp_step(
    model: &mut InstructionModel,
    opt: &mut Adam,
    samples: &[&TrainingSample],
    beam: &BeamConfig,
    reward: &RewardFunction,
) -> Result<HccpStats> {
    let rollouts = hccp_rollouts(model, samples, beam, reward)?;
    let mean_reward = mean_beam_reward(&rollouts);
    let (loss, grads) = hccp_objective(model, &rollouts, opt.trainable())?;
    opt.step(&mut model.params, &grads);
    Ok(HccpStats { loss, mean_reward })
}

/// Mean over samples of the mean reward of each beam.
pub fn mean_beam_reward(rollouts: &[Rollout]) -> f64 {
    rollouts.iter().map(|r| r.rewards.mean_reward()).sum::<f64>() / rollouts.len().max(1) as f64
}

// ---- language-model pretraining ------------------------------------------

/// Mean token NLL of the LM alone over EOS-terminated sequences.
pub fn lm_objective(model: &InstructionModel, corpus: &[&[u32]], trainable: &[ParamId]) -> Result<(f64, Gradients)> {
    let tokens: usize = corpus.iter().map(|s| s.len()).sum();
    let scale = 1.0 / tokens.max(1) as f64;
    let parts: Vec<Result<(f64, Gradients)>> = corpus
        .par_iter()
        .map(|seq| {
            let mut g = Graph::with_trainable(&model.params, trainable);
            let lp = model.lm.sequence_logprob_var(&mut g, None, seq)?;
            let loss = g.scale(lp, -scale);
            Ok((g.scalar(loss), g.backward(loss)))
        })
        .collect();
    reduce(parts)
}

/// Trains the language model alone on EOS-terminated token sequences.
/// Returns the mean training loss of each epoch.
pub fn pretrain_lm(model: &mut InstructionModel, corpus: &[Vec<u32>], cfg: &StageConfig, seed: u64) -> Result<Vec<LogRecord>> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut opt = Adam::new(&model.params, trainable_params(model, Stage::PretrainLm, false), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&[u32]> = chunk.iter().map(|&i| corpus[i].as_slice()).collect();
            let (loss, grads) = lm_objective(model, &batch, opt.trainable())?;
            opt.step(&mut model.params, &grads);
            log.push(record(Stage::PretrainLm, epoch, step, [("lm".to_string(), loss)].into(), None));
            step += 1;
        }
    }
    Ok(log)
}

fn record(stage: Stage, epoch: usize, step: usize, losses: BTreeMap<String, f64>, mean_reward: Option<f64>) -> LogRecord {
    LogRecord {
        stage,
        epoch,
        step,
        losses,
        mean_reward,
    }
}

// ---- stage driver ---------------------------------------------------------

/// Splits shuffled indices into batches, folding a trailing singleton into
/// the previous batch (contrastive losses need two samples).
fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

/// Runs all epochs of a TQPP, PDMP or HCCP stage over `samples`.
pub fn train_stage(
    model: &mut InstructionModel,
    cfg: &StageConfig,
    samples: &[TrainingSample],
    reward: Option<&RewardFunction>,
    seed: u64,
) -> Result<Vec<LogRecord>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut opt = Adam::new(
        &model.params,
        trainable_params(model, cfg.stage, cfg.freeze_decoder),
        cfg.learning_rate,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = Vec::new();
    let mut step = 0;
    let beam = BeamConfig {
        beam_size: cfg.beam_size,
        max_len: model.config.max_len,
        length_normalize: false,
    };
    // PDMP trains on every (sample, reference) pair.
    let pairs: Vec<(&TrainingSample, &str)> = samples
        .iter()
        .flat_map(|s| s.references.iter().map(move |r| (s, r.as_str())))
        .collect();
    for epoch in 0..cfg.epochs {
        match cfg.stage {
            Stage::Tqpp => {
                if samples.len() < 2 {
                    return Err(Error::BatchTooSmall(samples.len()));
                }
                let mut order: Vec<usize> = (0..samples.len()).collect();
                order.shuffle(&mut rng);
                for batch in batches(&order, cfg.batch_size) {
                    let items: Vec<(&TrainingSample, &str)> = batch
                        .iter()
                        .map(|&i| {
                            let s = &samples[i];
                            (s, s.references[rng.random_range(0..s.references.len())].as_str())
                        })
                        .collect();
                    let shift = rng.random_range(1..items.len());
                    let losses = tqpp_step(model, &mut opt, &items, cfg.temperature, shift)?;
                    let mut named = losses.components;
                    named.insert("total".into(), losses.total);
                    log.push(record(Stage::Tqpp, epoch, step, named, None));
                    step += 1;
                }
            }
            Stage::Pdmp => {
                let mut order: Vec<usize> = (0..pairs.len()).collect();
                order.shuffle(&mut rng);
                for chunk in order.chunks(cfg.batch_size) {
                    let batch: Vec<(&TrainingSample, &str)> = chunk.iter().map(|&i| pairs[i]).collect();
                    let loss = pdmp_step(model, &mut opt, &batch)?;
                    log.push(record(Stage::Pdmp, epoch, step, [("ce".to_string(), loss)].into(), None));
                    step += 1;
                }
            }
            Stage::Hccp => {
                let reward = reward.ok_or_else(|| Error::ScorerUnavailable("no reward function".into()))?;
                let mut order: Vec<usize> = (0..samples.len()).collect();
                order.shuffle(&mut rng);
                for chunk in order.chunks(cfg.batch_size) {
                    let batch: Vec<&TrainingSample> = chunk.iter().map(|&i| &samples[i]).collect();
                    let stats = hccp_step(model, &mut opt, &batch, &beam, reward)?;
                    log.push(record(
                        Stage::Hccp,
                        epoch,
                        step,
                        [("hcct".to_string(), stats.loss)].into(),
                        Some(stats.mean_reward),
                    ));
                    step += 1;
                }
            }
            Stage::PretrainLm => {
                return Err(Error::Config("pretrain-lm runs through pretrain_lm".into()));
            }
        }
        log::info!("{} epoch {} done ({} steps)", cfg.stage, epoch, step);
    }
    Ok(log)
}
