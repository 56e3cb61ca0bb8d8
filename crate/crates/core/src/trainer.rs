//! Training orchestration: mixed-text batch assembly, the optimization
//! loop with decoupled weight decay and a warmup+cosine schedule,
//! temperature clamping, checkpointing, and a line-delimited metrics log.
//!
//! A run is a pure function of (config, corpus, seed): batches derive their
//! randomness from (seed, step, slot), so resumed training reproduces an
//! uninterrupted run step for step.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{self, DatasetError, ShardManifest, Strictness};
use crate::evaluator::{evaluate_suite, EvalError, EvalReport, EvalSuite};
use crate::loss::{
    clip_loss, hni_loss, stc_loss_masked, total_loss, LossBreakdown, LossError, LossWeights,
};
use crate::model::{
    backward_batch, bin, forward_batch, init_params, BatchInputs, Dims, ModelError, ModelParams,
    ParamGrads,
};
use crate::rng;
use crate::textkit::{
    encode_multihot, sample_negative_texts, sample_training_text, SamplingConfig, TextError,
    TokenizerSpec,
};
use crate::types::{validate_sample, MultiHotLabel, Sample, TagVocabulary};

const CHECKPOINT_MAGIC: &[u8; 4] = b"GCLP";
pub const CHECKPOINT_VERSION: u32 = 1;

const SALT_PICK: u64 = 0xb1;
const SALT_TEXT: u64 = 0xb2;
const SALT_NEG: u64 = 0xb3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("corpus has {got} samples but the batch size is {batch}")]
    CorpusTooSmall { got: usize, batch: usize },
    #[error("corpus is inconsistent with the tag vocabulary: corpus K {vocab_k}, config K {cfg_k}")]
    VocabMismatch { vocab_k: usize, cfg_k: usize },
    #[error("sample {id} is invalid: {detail}")]
    InvalidSample { id: String, detail: String },
    #[error("non-finite loss at step {step}; batch ids: {ids:?}")]
    NonFiniteLoss { step: u64, ids: Vec<String> },
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: String, detail: String },
    #[error("checkpoint version {found} does not match supported version {supported}")]
    CheckpointVersion { found: u32, supported: u32 },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Optimizer {
    #[serde(rename = "adamw")]
    AdamW,
    #[serde(rename = "sgd")]
    Sgd,
}

impl std::str::FromStr for Optimizer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adamw" => Ok(Optimizer::AdamW),
            "sgd" => Ok(Optimizer::Sgd),
            other => Err(format!("unknown optimizer {other:?} (expected adamw or sgd)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Constant,
}

impl std::str::FromStr for Schedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cosine" => Ok(Schedule::Cosine),
            "constant" => Ok(Schedule::Constant),
            other => Err(format!("unknown schedule {other:?} (expected cosine or constant)")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: Optimizer,
    pub lr_schedule: Schedule,
    /// Linear warmup steps; defaults to 5% of the schedule.
    pub warmup_steps: Option<u64>,
    pub sampling: SamplingConfig,
    pub weights: LossWeights,
    pub seed: u64,
    pub eval_every: u64,
    pub checkpoint_every: Option<u64>,
    pub dims: Dims,
    pub token_budget: usize,
    /// Update only the classifier head, leaving both towers and the
    /// temperature fixed.
    pub freeze_towers: bool,
    /// Normalize the hard-negative loss by the gated-in count instead of
    /// the batch size.
    pub hni_gated_mean: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            steps: 8000,
            learning_rate: 3e-3,
            weight_decay: 1e-4,
            optimizer: Optimizer::AdamW,
            lr_schedule: Schedule::Cosine,
            warmup_steps: None,
            sampling: SamplingConfig::default(),
            weights: LossWeights::default(),
            seed: 0,
            eval_every: 1000,
            checkpoint_every: None,
            dims: Dims::default(),
            token_budget: crate::textkit::DEFAULT_TOKEN_BUDGET,
            freeze_towers: false,
            hni_gated_mean: false,
        }
    }
}

impl TrainConfig {
    pub fn warmup(&self) -> u64 {
        self.warmup_steps.unwrap_or(self.steps / 20)
    }

    /// Learning rate at a (0-based) step.
    pub fn lr_at(&self, step: u64) -> f64 {
        let warmup = self.warmup();
        if warmup > 0 && step < warmup {
            return self.learning_rate * (step + 1) as f64 / warmup as f64;
        }
        match self.lr_schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => {
                let total = self.steps.saturating_sub(warmup).max(1) as f64;
                let t = step.saturating_sub(warmup) as f64;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t / total).cos())
            }
        }
    }
}

/// Mutable training state: parameters, optimizer moments, and the step
/// counter. The RNG state is (seed, step) by construction.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub m: ParamGrads,
    pub v: ParamGrads,
    pub step: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(params: ModelParams, seed: u64) -> Self {
        let m = ParamGrads::zeros_like(&params);
        let v = ParamGrads::zeros_like(&params);
        TrainState { params, m, v, step: 0, seed }
    }
}

/// One assembled batch: model inputs plus labels and per-sample masks.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: BatchInputs,
    pub labels: Vec<MultiHotLabel>,
    /// Rows that carry real tag annotations (refined samples).
    pub stc_mask: Vec<bool>,
    pub ids: Vec<String>,
    /// Samples skipped for hard-negative supervision (unrefined or empty
    /// negative pool).
    pub hni_skipped: usize,
}

/// Assembles the batch for `step`: per sample a mixed-ratio text draw,
/// hard negatives when available, and the multi-hot tag label (all-zero and
/// masked out for unrefined samples). Fully determined by (seed, step).
pub fn make_batch(
    corpus: &[Sample],
    cfg: &TrainConfig,
    spec: &TokenizerSpec,
    vocab: &TagVocabulary,
    step: u64,
) -> Result<Batch, TrainError> {
    if corpus.len() < cfg.batch_size {
        return Err(TrainError::CorpusTooSmall { got: corpus.len(), batch: cfg.batch_size });
    }
    let mut pick_rng = rng::stream(rng::mix(cfg.seed, &[SALT_PICK, step]));
    let picks = rand::seq::index::sample(&mut pick_rng, corpus.len(), cfg.batch_size);
    let mut batch = Batch {
        inputs: BatchInputs::default(),
        labels: Vec::with_capacity(cfg.batch_size),
        stc_mask: Vec::with_capacity(cfg.batch_size),
        ids: Vec::with_capacity(cfg.batch_size),
        hni_skipped: 0,
    };
    for (slot, idx) in picks.iter().enumerate() {
        let sample = &corpus[idx];
        let mut text_rng = rng::stream(rng::mix(cfg.seed, &[SALT_TEXT, step, slot as u64]));
        let text = sample_training_text(sample, spec, &cfg.sampling, &mut text_rng);
        let negatives = if sample.description_set.is_some() {
            let mut neg_rng = rng::stream(rng::mix(cfg.seed, &[SALT_NEG, step, slot as u64]));
            match sample_negative_texts(sample, spec, &cfg.sampling, &mut neg_rng) {
                Ok(draw) => draw.texts,
                Err(TextError::EmptyNegativePool { .. }) => {
                    batch.hni_skipped += 1;
                    Vec::new()
                }
                Err(e) => return Err(e.into()),
            }
        } else {
            batch.hni_skipped += 1;
            Vec::new()
        };
        let refined = sample.description_set.is_some();
        let label = match &sample.description_set {
            Some(ds) => encode_multihot(&ds.pos_tags, vocab),
            None => MultiHotLabel::zeros(vocab.k()),
        };
        batch.inputs.images.push(sample.image_features.clone());
        batch.inputs.texts.push(text.tokens);
        batch.inputs.neg_texts.push(negatives);
        batch.labels.push(label);
        batch.stc_mask.push(refined);
        batch.ids.push(sample.id.clone());
    }
    Ok(batch)
}

fn optimizer_update(state: &mut TrainState, grads: &ParamGrads, cfg: &TrainConfig, lr: f64) {
    let freeze = cfg.freeze_towers;
    // Tower arrays are the first five in the fixed ordering; the classifier
    // head is the last four.
    const TOWER_ARRAYS: usize = 5;
    match cfg.optimizer {
        Optimizer::Sgd => {
            for (ai, ((p, decay), (g, _))) in state
                .params
                .arrays_mut()
                .into_iter()
                .zip(grads.arrays())
                .enumerate()
            {
                if freeze && ai < TOWER_ARRAYS {
                    continue;
                }
                for (pv, gv) in p.iter_mut().zip(g) {
                    let wd = if decay { cfg.weight_decay * *pv } else { 0.0 };
                    *pv -= lr * (gv + wd);
                }
            }
            if !freeze {
                state.params.log_temp -= lr * grads.log_temp;
            }
        }
        Optimizer::AdamW => {
            let b1: f64 = 0.9;
            let b2: f64 = 0.999;
            let eps = 1e-8;
            let t = (state.step + 1) as f64;
            let bc1 = 1.0 - b1.powf(t);
            let bc2 = 1.0 - b2.powf(t);
            {
                let params = state.params.arrays_mut();
                let ms = state.m.arrays_mut();
                let vs = state.v.arrays_mut();
                for (ai, (((p, decay), (m, _)), ((v, _), (g, _)))) in params
                    .into_iter()
                    .zip(ms)
                    .zip(vs.into_iter().zip(grads.arrays()))
                    .enumerate()
                {
                    if freeze && ai < TOWER_ARRAYS {
                        continue;
                    }
                    for i in 0..p.len() {
                        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        let wd = if decay { cfg.weight_decay * p[i] } else { 0.0 };
                        p[i] -= lr * (mhat / (vhat.sqrt() + eps) + wd);
                    }
                }
            }
            if !freeze {
                let g = grads.log_temp;
                state.m.log_temp = b1 * state.m.log_temp + (1.0 - b1) * g;
                state.v.log_temp = b2 * state.v.log_temp + (1.0 - b2) * g * g;
                let mhat = state.m.log_temp / bc1;
                let vhat = state.v.log_temp / bc2;
                state.params.log_temp -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
    state.params.clamp_scale();
}

/// One optimization step on an assembled batch: forward, all loss terms,
/// backward, optimizer update, temperature clamp.
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    batch: &Batch,
) -> Result<LossBreakdown, TrainError> {
    let fwd = forward_batch(&state.params, &batch.inputs)?;
    let clip = clip_loss(&fwd.x, &fwd.y, fwd.scale)?;
    let hni = if batch.inputs.neg_texts.iter().any(|r| !r.is_empty()) {
        let hni = if cfg.hni_gated_mean {
            crate::loss::hni_loss_gated_mean(&fwd.x, &fwd.y, &fwd.yneg, fwd.scale)?
        } else {
            hni_loss(&fwd.x, &fwd.y, &fwd.yneg, fwd.scale)?
        };
        Some(hni)
    } else {
        None
    };
    let stc = stc_loss_masked(&fwd.z, &batch.labels, &batch.stc_mask)?;
    let breakdown = total_loss(&clip, hni.as_ref(), Some(&stc), cfg.weights);
    if !breakdown.l_total.is_finite() {
        return Err(TrainError::NonFiniteLoss { step: state.step, ids: batch.ids.clone() });
    }
    let grads = backward_batch(&state.params, &batch.inputs, &fwd, &breakdown.grads);
    let lr = cfg.lr_at(state.step);
    optimizer_update(state, &grads, cfg, lr);
    state.step += 1;
    Ok(breakdown)
}

/// One line of the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub l_i2t: f64,
    pub l_t2i: f64,
    pub l_hni: f64,
    pub l_cls: f64,
    pub l_total: f64,
    pub gate_fraction: f64,
    pub lr: f64,
    pub temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub final_eval: Option<EvalReport>,
}

/// Runs the full schedule over a corpus manifest, logging one metrics line
/// per step (with evaluation results folded in every `eval_every` steps)
/// and writing the final checkpoint. Pass `resume_from` to continue an
/// interrupted run; the metrics log is then appended, and the combined log
/// equals an uninterrupted run's.
pub fn train(
    cfg: &TrainConfig,
    manifest: &ShardManifest,
    vocab: &TagVocabulary,
    spec: &TokenizerSpec,
    eval_suite: Option<&EvalSuite>,
    out_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    if cfg.dims.k != vocab.k() {
        return Err(TrainError::VocabMismatch { vocab_k: vocab.k(), cfg_k: cfg.dims.k });
    }
    let corpus = dataset::read_all(manifest, Strictness::Strict)?;
    for s in &corpus {
        let violations = validate_sample(s, cfg.dims.d_in);
        if !violations.is_empty() {
            return Err(TrainError::InvalidSample {
                id: s.id.clone(),
                detail: violations
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join("; "),
            });
        }
    }
    fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let checkpoint_path = out_dir.join("checkpoint.bin");

    let mut state = match resume_from {
        Some(path) => load_checkpoint(path)?,
        None => TrainState::new(init_params(cfg.dims, spec.len(), cfg.seed), cfg.seed),
    };
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(resume_from.is_some())
        .write(true)
        .truncate(resume_from.is_none())
        .open(&metrics_path)?;

    let mut final_eval = None;
    while state.step < cfg.steps {
        let batch = make_batch(&corpus, cfg, spec, vocab, state.step)?;
        let breakdown = train_step(&mut state, cfg, &batch)?;
        let step = state.step; // 1-based after the update
        let eval = if step % cfg.eval_every == 0 || step == cfg.steps {
            match eval_suite {
                Some(suite) => {
                    let report = evaluate_suite(&state.params, spec, suite, &[1, 5])?;
                    final_eval = Some(report.clone());
                    Some(report)
                }
                None => None,
            }
        } else {
            None
        };
        let record = MetricsRecord {
            step,
            l_i2t: breakdown.l_i2t,
            l_t2i: breakdown.l_t2i,
            l_hni: breakdown.l_hni,
            l_cls: breakdown.l_cls,
            l_total: breakdown.l_total,
            gate_fraction: breakdown.gate_fraction,
            lr: cfg.lr_at(step - 1),
            temperature: 1.0 / state.params.scale(),
            eval,
        };
        let line = serde_json::to_string(&record).expect("metrics serialize");
        metrics.write_all(line.as_bytes())?;
        metrics.write_all(b"\n")?;
        if let Some(every) = cfg.checkpoint_every {
            if step % every == 0 && step != cfg.steps {
                save_checkpoint(&state, &out_dir.join(format!("checkpoint-{step:07}.bin")))?;
            }
        }
    }
    metrics.flush()?;
    save_checkpoint(&state, &checkpoint_path)?;
    Ok(TrainOutcome { state, metrics_path, checkpoint_path, final_eval })
}

/// Versioned binary checkpoint with an integrity checksum; write-then-read
/// is bit-exact for parameters, moments, step, and seed.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<(), TrainError> {
    let mut payload = Vec::new();
    bin::write_params(&mut payload, &state.params);
    for grads in [&state.m, &state.v] {
        for (a, _) in grads.arrays() {
            bin::put_slice(&mut payload, a);
        }
        bin::put_f64(&mut payload, grads.log_temp);
    }
    bin::put_u64(&mut payload, state.step);
    bin::put_u64(&mut payload, state.seed);

    let mut buf = Vec::with_capacity(payload.len() + 16);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    bin::put_u32(&mut buf, CHECKPOINT_VERSION);
    buf.extend_from_slice(&payload);
    bin::put_u64(&mut buf, rng::fnv1a(&payload));
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState, TrainError> {
    let err = |detail: &str| TrainError::Checkpoint {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };
    let buf = fs::read(path)?;
    if buf.len() < 16 || &buf[..4] != CHECKPOINT_MAGIC {
        return Err(err("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::CheckpointVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let payload = &buf[8..buf.len() - 8];
    let stored = u64::from_le_bytes(buf[buf.len() - 8..].try_into().unwrap());
    if rng::fnv1a(payload) != stored {
        return Err(err("integrity checksum mismatch"));
    }
    let mut reader = bin::Reader::new(payload);
    let params = bin::read_params(&mut reader)
        .map_err(|e| err(&format!("parameters: {e}")))?;
    let mut m = ParamGrads::zeros_like(&params);
    let mut v = ParamGrads::zeros_like(&params);
    for grads in [&mut m, &mut v] {
        for (a, _) in grads.arrays_mut() {
            let read = reader.slice().map_err(|e| err(&format!("moments: {e}")))?;
            if read.len() != a.len() {
                return Err(err("moment shape mismatch"));
            }
            a.copy_from_slice(&read);
        }
        grads.log_temp = reader.f64().map_err(|e| err(&format!("moments: {e}")))?;
    }
    let step = reader.u64().map_err(|e| err(&format!("step: {e}")))?;
    let seed = reader.u64().map_err(|e| err(&format!("seed: {e}")))?;
    if !reader.done() {
        return Err(err("trailing bytes"));
    }
    Ok(TrainState { params, m, v, step, seed })
}

/// Loads just the parameters from a checkpoint, for evaluation.
pub fn load_params(path: &Path) -> Result<ModelParams, TrainError> {
    Ok(load_checkpoint(path)?.params)
}
