//! Layered configuration: built-in defaults, then the optional TOML config
//! file, then command-line flags. The fully resolved configuration is
//! echoed on stderr and written next to every output directory.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use grainclip::captioner::CaptionerConfig;
use grainclip::model::Dims;
use grainclip::synth::{EvalSizes, WorldConfig};
use grainclip::textkit::Strategy;
use grainclip::trainer::{Optimizer, Schedule, TrainConfig};

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub dims: DimsFile,
    pub synth: SynthFile,
    pub refine: RefineFile,
    pub train: TrainFile,
    pub ablate: AblateFile,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DimsFile {
    pub d_in: Option<usize>,
    pub d: Option<usize>,
    pub d_tok: Option<usize>,
    pub h: Option<usize>,
    pub k: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthFile {
    pub n_samples: Option<usize>,
    pub n_concepts: Option<usize>,
    pub attrs_per_concept: Option<usize>,
    pub attrs_per_sample: Option<usize>,
    pub noise_sigma: Option<f64>,
    pub attr_scale: Option<f64>,
    pub refined_fraction: Option<f64>,
    pub records_per_shard: Option<usize>,
    pub eval_classification: Option<usize>,
    pub eval_retrieval: Option<usize>,
    pub eval_discrimination: Option<usize>,
    pub neg_swap: Option<grainclip::synth::SwapRule>,
    pub instance_tokens: Option<bool>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineFile {
    pub endpoint_url: Option<String>,
    pub model_name: Option<String>,
    pub max_retries: Option<u32>,
    pub timeout_secs: Option<u64>,
    pub workers: Option<usize>,
    pub temperature: Option<f64>,
    pub backoff_base_ms: Option<u64>,
    pub max_failure_fraction: Option<f64>,
    pub records_per_shard: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub batch_size: Option<usize>,
    pub steps: Option<u64>,
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub optimizer: Option<Optimizer>,
    pub lr_schedule: Option<Schedule>,
    pub warmup_steps: Option<u64>,
    pub eval_every: Option<u64>,
    pub checkpoint_every: Option<u64>,
    pub mix_ratio: Option<f64>,
    pub strategy: Option<Strategy>,
    pub n_neg: Option<usize>,
    pub neg_descriptions_only: Option<bool>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub token_budget: Option<usize>,
    pub freeze_towers: Option<bool>,
    pub hni_gated_mean: Option<bool>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateFile {
    pub seeds: Option<Vec<u64>>,
    pub steps: Option<u64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("reading config file {}", p.display()))?;
                toml::from_str(&text)
                    .with_context(|| format!("parsing config file {}", p.display()))
            }
        }
    }

    pub fn dims(&self) -> Dims {
        let d = Dims::default();
        Dims {
            d_in: self.dims.d_in.unwrap_or(d.d_in),
            d: self.dims.d.unwrap_or(d.d),
            d_tok: self.dims.d_tok.unwrap_or(d.d_tok),
            h: self.dims.h.unwrap_or(d.h),
            k: self.dims.k.unwrap_or(d.k),
        }
    }

    pub fn world_config(&self, seed: u64) -> WorldConfig {
        let w = WorldConfig::default();
        WorldConfig {
            seed,
            n_concepts: self.synth.n_concepts.unwrap_or(w.n_concepts),
            attrs_per_concept: self.synth.attrs_per_concept.unwrap_or(w.attrs_per_concept),
            attrs_per_sample: self.synth.attrs_per_sample.unwrap_or(w.attrs_per_sample),
            d_in: self.dims.d_in.unwrap_or(w.d_in),
            noise_sigma: self.synth.noise_sigma.unwrap_or(w.noise_sigma),
            attr_scale: self.synth.attr_scale.unwrap_or(w.attr_scale),
            max_pairwise_cosine: w.max_pairwise_cosine,
            neg_swap: self.synth.neg_swap.unwrap_or(w.neg_swap),
            instance_tokens: self.synth.instance_tokens.unwrap_or(w.instance_tokens),
        }
    }

    pub fn eval_sizes(&self) -> EvalSizes {
        let e = EvalSizes::default();
        EvalSizes {
            classification: self.synth.eval_classification.unwrap_or(e.classification),
            retrieval: self.synth.eval_retrieval.unwrap_or(e.retrieval),
            discrimination: self.synth.eval_discrimination.unwrap_or(e.discrimination),
        }
    }

    pub fn captioner_config(&self, seed: u64) -> CaptionerConfig {
        let c = CaptionerConfig::default();
        CaptionerConfig {
            endpoint_url: self.refine.endpoint_url.clone(),
            model_name: self.refine.model_name.clone().unwrap_or(c.model_name),
            max_retries: self.refine.max_retries.unwrap_or(c.max_retries),
            timeout_secs: self.refine.timeout_secs.unwrap_or(c.timeout_secs),
            concurrency: self.refine.workers.unwrap_or(c.concurrency),
            temperature: self.refine.temperature.unwrap_or(c.temperature),
            backoff_base_ms: self.refine.backoff_base_ms.unwrap_or(c.backoff_base_ms),
            max_failure_fraction: self
                .refine
                .max_failure_fraction
                .unwrap_or(c.max_failure_fraction),
            seed,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = TrainConfig::default();
        let mut cfg = TrainConfig {
            batch_size: self.train.batch_size.unwrap_or(t.batch_size),
            steps: self.train.steps.unwrap_or(t.steps),
            learning_rate: self.train.learning_rate.unwrap_or(t.learning_rate),
            weight_decay: self.train.weight_decay.unwrap_or(t.weight_decay),
            optimizer: self.train.optimizer.unwrap_or(t.optimizer),
            lr_schedule: self.train.lr_schedule.unwrap_or(t.lr_schedule),
            warmup_steps: self.train.warmup_steps.or(t.warmup_steps),
            sampling: t.sampling,
            weights: t.weights,
            seed,
            eval_every: self.train.eval_every.unwrap_or(t.eval_every),
            checkpoint_every: self.train.checkpoint_every.or(t.checkpoint_every),
            dims: self.dims(),
            token_budget: self.train.token_budget.unwrap_or(t.token_budget),
            freeze_towers: self.train.freeze_towers.unwrap_or(t.freeze_towers),
            hni_gated_mean: self.train.hni_gated_mean.unwrap_or(t.hni_gated_mean),
        };
        cfg.sampling.seed = seed;
        if let Some(v) = self.train.mix_ratio {
            cfg.sampling.mix_ratio = v;
        }
        if let Some(v) = self.train.strategy {
            cfg.sampling.strategy = v;
        }
        if let Some(v) = self.train.n_neg {
            cfg.sampling.n_neg = v;
        }
        if let Some(v) = self.train.neg_descriptions_only {
            cfg.sampling.neg_descriptions_only = v;
        }
        if let Some(v) = self.train.alpha {
            cfg.weights.alpha = v;
        }
        if let Some(v) = self.train.beta {
            cfg.weights.beta = v;
        }
        cfg
    }
}

/// Echoes the resolved configuration for a run on stderr and writes it next
/// to the run's outputs when an output directory exists.
pub fn echo_resolved<T: Serialize>(resolved: &T, seed: u64, out_dir: Option<&Path>) -> Result<()> {
    let text = toml::to_string_pretty(resolved).context("serializing resolved config")?;
    eprintln!("# resolved configuration (seed = {seed})");
    eprintln!("{text}");
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("resolved-config.toml"), format!("# seed = {seed}\n{text}"))?;
    }
    Ok(())
}
