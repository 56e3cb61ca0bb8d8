//! Single batch-mode entrypoint wiring the pipeline together: synthetic
//! data generation, caption refinement, corpus statistics, vocabulary
//! construction, training, evaluation, similarity scoring, and ablation
//! sweeps. Exit codes: 0 success, 1 usage error, 2 runtime failure.

mod config;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use grainclip::ablate::{run_ablation, AblateParam};
use grainclip::captioner::refine_dataset;
use grainclip::dataset::{self, ShardManifest, Strictness};
use grainclip::evaluator::{emit_report, evaluate_suite, similarity_score, EvalSuite};
use grainclip::synth::{generate_dataset_shards, generate_eval_suite, generate_world};
use grainclip::textkit::{build_vocab, load_tag_vocab, save_tag_vocab, TokenizerSpec};
use grainclip::trainer::{load_params, train, TrainConfig};
use grainclip::types::validate_sample;

use config::{echo_resolved, FileConfig};

#[derive(Parser, Debug)]
#[command(
    name = "grainclip",
    about = "Image-text dataset refinement and multi-grained contrastive training",
    version
)]
struct Cli {
    /// TOML config file; command-line flags override its values
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Run seed [default: 0]
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic concept world: training shards, tokenizer, tag
    /// vocabulary and a held-out evaluation suite
    Synth(SynthArgs),
    /// Attach description sets to a corpus via the captioner pipeline
    Refine(RefineArgs),
    /// Corpus statistics: length histograms, tag frequencies, refined share
    Stats(StatsArgs),
    /// Build the top-K tag vocabulary from a corpus
    BuildVocab(BuildVocabArgs),
    /// Train the dual encoder with contrastive, hard-negative and tag losses
    Train(TrainArgs),
    /// Evaluate a checkpoint on an evaluation suite
    Eval(EvalArgs),
    /// Score image-text cosine similarity over a corpus
    Score(ScoreArgs),
    /// Sweep one hyperparameter over a grid of values and tabulate metrics
    Ablate(AblateArgs),
    /// Print records and validation results from a corpus
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory (world.json, train/, eval/, tokens.tsv, tags.tsv)
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Training samples to generate [default: 2000]
    #[arg(long)]
    n_samples: Option<usize>,
    /// Number of concepts [default: 8]
    #[arg(long)]
    n_concepts: Option<usize>,
    /// Attribute tokens per concept [default: 8]
    #[arg(long)]
    attrs_per_concept: Option<usize>,
    /// Attributes drawn per sample [default: 3]
    #[arg(long)]
    attrs_per_sample: Option<usize>,
    /// Per-coordinate gaussian feature noise [default: 0.05]
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Norm of each attribute offset [default: 0.5]
    #[arg(long)]
    attr_scale: Option<f64>,
    /// Share of samples carrying description sets [default: 1.0]
    #[arg(long)]
    refined_fraction: Option<f64>,
    /// Records per shard file [default: 1000]
    #[arg(long)]
    records_per_shard: Option<usize>,
    /// Classification items in the eval suite [default: 200]
    #[arg(long)]
    eval_classification: Option<usize>,
    /// Retrieval pairs in the eval suite [default: 200]
    #[arg(long)]
    eval_retrieval: Option<usize>,
    /// Discrimination triples in the eval suite [default: 200]
    #[arg(long)]
    eval_discrimination: Option<usize>,
}

#[derive(Args, Debug)]
struct RefineArgs {
    /// Input shard manifest
    #[arg(long, value_name = "MANIFEST")]
    input: PathBuf,
    /// Output directory for refined shards
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Chat-completions-style endpoint URL; omitted = deterministic mock
    #[arg(long)]
    endpoint: Option<String>,
    /// Model name sent to the endpoint [default: mock]
    #[arg(long)]
    model: Option<String>,
    /// Worker pool size [default: 4]
    #[arg(long)]
    workers: Option<usize>,
    /// Retries per sample after the first attempt [default: 3]
    #[arg(long)]
    max_retries: Option<u32>,
    /// Request timeout in seconds [default: 30]
    #[arg(long)]
    timeout_secs: Option<u64>,
    /// Sampling temperature sent to the endpoint [default: 0.2]
    #[arg(long)]
    temperature: Option<f64>,
    /// Abort when the failed fraction exceeds this [default: 0.05]
    #[arg(long)]
    max_failure_fraction: Option<f64>,
    /// Records per output shard [default: 1000]
    #[arg(long)]
    records_per_shard: Option<usize>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    /// Input shard manifest
    #[arg(long, value_name = "MANIFEST")]
    input: PathBuf,
    /// Tokenizer vocabulary file; omitted = derive from the corpus
    #[arg(long, value_name = "FILE")]
    tokenizer: Option<PathBuf>,
    /// Tag frequencies to report [default: 20]
    #[arg(long)]
    top_n: Option<usize>,
    /// Also write the report to this file
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BuildVocabArgs {
    /// Input shard manifest
    #[arg(long, value_name = "MANIFEST")]
    input: PathBuf,
    /// Vocabulary size K (clamped to the distinct tag count) [default: 64]
    #[arg(long)]
    k: Option<usize>,
    /// Output tag vocabulary file (tag<TAB>count per line)
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct TrainFlags {
    /// Batch size [default: 64]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Optimization steps [default: 1500]
    #[arg(long)]
    steps: Option<u64>,
    /// Peak learning rate [default: 0.003]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Decoupled weight decay [default: 0.0001]
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Optimizer: adamw or sgd [default: adamw]
    #[arg(long)]
    optimizer: Option<String>,
    /// Learning-rate schedule: cosine or constant [default: cosine]
    #[arg(long)]
    lr_schedule: Option<String>,
    /// Linear warmup steps [default: 5% of steps]
    #[arg(long)]
    warmup_steps: Option<u64>,
    /// Evaluate every N steps [default: 500]
    #[arg(long)]
    eval_every: Option<u64>,
    /// Mixing ratio r: probability of training on an enriched text
    /// [default: 0.75]
    #[arg(long)]
    mix_ratio: Option<f64>,
    /// Enriched-text strategy: random_segment, full_long, short_tags or
    /// raw_only [default: random_segment]
    #[arg(long)]
    strategy: Option<String>,
    /// Hard negatives per sample N- [default: 1]
    #[arg(long)]
    n_neg: Option<usize>,
    /// Hard-negative identification weight alpha [default: 0.5]
    #[arg(long)]
    alpha: Option<f64>,
    /// Short-tag classification weight beta [default: 10]
    #[arg(long)]
    beta: Option<f64>,
    /// Token budget per training text [default: 77]
    #[arg(long)]
    token_budget: Option<usize>,
}

impl TrainFlags {
    fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = &self.optimizer {
            cfg.optimizer = v.parse().map_err(|e: String| anyhow::anyhow!(e))?;
        }
        if let Some(v) = &self.lr_schedule {
            cfg.lr_schedule = v.parse().map_err(|e: String| anyhow::anyhow!(e))?;
        }
        if let Some(v) = self.warmup_steps {
            cfg.warmup_steps = Some(v);
        }
        if let Some(v) = self.eval_every {
            cfg.eval_every = v;
        }
        if let Some(v) = self.mix_ratio {
            cfg.sampling.mix_ratio = v;
        }
        if let Some(v) = &self.strategy {
            cfg.sampling.strategy = v.parse().map_err(|e: String| anyhow::anyhow!(e))?;
        }
        if let Some(v) = self.n_neg {
            cfg.sampling.n_neg = v;
        }
        if let Some(v) = self.alpha {
            cfg.weights.alpha = v;
        }
        if let Some(v) = self.beta {
            cfg.weights.beta = v;
        }
        if let Some(v) = self.token_budget {
            cfg.token_budget = v;
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training corpus manifest
    #[arg(long, value_name = "MANIFEST")]
    corpus: PathBuf,
    /// Tokenizer vocabulary file
    #[arg(long, value_name = "FILE")]
    tokenizer: PathBuf,
    /// Tag vocabulary file from build-vocab (fixes K)
    #[arg(long, value_name = "FILE")]
    vocab: PathBuf,
    /// Output directory (metrics.jsonl, checkpoint.bin)
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Evaluation suite file for periodic evaluation
    #[arg(long, value_name = "FILE")]
    suite: Option<PathBuf>,
    /// Resume from a checkpoint
    #[arg(long, value_name = "FILE")]
    resume: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Evaluation suite file
    #[arg(long, value_name = "FILE")]
    suite: PathBuf,
    /// Tokenizer vocabulary file
    #[arg(long, value_name = "FILE")]
    tokenizer: PathBuf,
    /// Recall cutoffs [default: 1,5]
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// Write the report to this file
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Token budget per text [default: 77]
    #[arg(long)]
    token_budget: Option<usize>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// Checkpoint to score with
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Corpus manifest providing (image, text) pairs
    #[arg(long, value_name = "MANIFEST")]
    corpus: PathBuf,
    /// Tokenizer vocabulary file
    #[arg(long, value_name = "FILE")]
    tokenizer: PathBuf,
    /// Which text to score against the image: raw, detailed or both
    /// [default: both]
    #[arg(long)]
    text: Option<String>,
    /// Token budget per text [default: 77]
    #[arg(long)]
    token_budget: Option<usize>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Training corpus manifest
    #[arg(long, value_name = "MANIFEST")]
    corpus: PathBuf,
    /// Tokenizer vocabulary file
    #[arg(long, value_name = "FILE")]
    tokenizer: PathBuf,
    /// Tag vocabulary file
    #[arg(long, value_name = "FILE")]
    vocab: PathBuf,
    /// Evaluation suite file
    #[arg(long, value_name = "FILE")]
    suite: PathBuf,
    /// Output directory for per-cell runs and the table
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Parameter to sweep: mix_ratio, alpha, beta, k, n_neg or strategy
    #[arg(long)]
    param: String,
    /// Comma-separated grid values
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
    /// Comma-separated seeds [default: 0,1,2]
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args, Debug)]
struct InspectArgs {
    /// Input shard manifest
    #[arg(long, value_name = "MANIFEST")]
    input: PathBuf,
    /// Records to print [default: 5]
    #[arg(long)]
    limit: Option<usize>,
    /// Feature dimension to validate against [default: 64]
    #[arg(long)]
    d_in: Option<usize>,
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err:#}");
            2
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    match cli.command {
        Command::Synth(args) => run_synth(args, &file, seed),
        Command::Refine(args) => run_refine(args, &file, seed),
        Command::Stats(args) => run_stats(args, &file, seed),
        Command::BuildVocab(args) => run_build_vocab(args, &file, seed),
        Command::Train(args) => run_train(args, &file, seed),
        Command::Eval(args) => run_eval(args, &file, seed),
        Command::Score(args) => run_score(args, &file, seed),
        Command::Ablate(args) => run_ablate(args, &file, seed),
        Command::Inspect(args) => run_inspect(args, &file, seed),
    }
}

fn load_tokenizer(path: &Path, budget: usize) -> Result<TokenizerSpec> {
    TokenizerSpec::load(path, budget)
        .with_context(|| format!("loading tokenizer {}", path.display()))
}

fn run_synth(args: SynthArgs, file: &FileConfig, seed: u64) -> Result<()> {
    let mut world_cfg = file.world_config(seed);
    if let Some(v) = args.n_concepts {
        world_cfg.n_concepts = v;
    }
    if let Some(v) = args.attrs_per_concept {
        world_cfg.attrs_per_concept = v;
    }
    if let Some(v) = args.attrs_per_sample {
        world_cfg.attrs_per_sample = v;
    }
    if let Some(v) = args.noise_sigma {
        world_cfg.noise_sigma = v;
    }
    if let Some(v) = args.attr_scale {
        world_cfg.attr_scale = v;
    }
    let n_samples = args.n_samples.or(file.synth.n_samples).unwrap_or(2000);
    let refined_fraction = args.refined_fraction.or(file.synth.refined_fraction).unwrap_or(1.0);
    let records_per_shard =
        args.records_per_shard.or(file.synth.records_per_shard).unwrap_or(1000);
    let mut sizes = file.eval_sizes();
    if let Some(v) = args.eval_classification {
        sizes.classification = v;
    }
    if let Some(v) = args.eval_retrieval {
        sizes.retrieval = v;
    }
    if let Some(v) = args.eval_discrimination {
        sizes.discrimination = v;
    }
    let dims = file.dims();

    #[derive(Serialize)]
    struct Resolved<'a> {
        seed: u64,
        n_samples: usize,
        refined_fraction: f64,
        records_per_shard: usize,
        world: &'a grainclip::synth::WorldConfig,
        eval: grainclip::synth::EvalSizes,
    }

    let world = generate_world(world_cfg)?;
    echo_resolved(
        &Resolved {
            seed,
            n_samples,
            refined_fraction,
            records_per_shard,
            world: &world.config,
            eval: sizes,
        },
        seed,
        Some(&args.out),
    )?;

    world.save(&args.out.join("world.json"))?;
    let manifest = generate_dataset_shards(
        &world,
        n_samples,
        refined_fraction,
        seed,
        &args.out.join("train"),
        records_per_shard,
    )?;
    let vocab = build_vocab(&manifest, dims.k)?;
    save_tag_vocab(&vocab, &args.out.join("tags.tsv"))?;
    let eval_dir = args.out.join("eval");
    std::fs::create_dir_all(&eval_dir)?;
    let suite = generate_eval_suite(&world, sizes, seed, &eval_dir, records_per_shard)?;
    suite.save(&eval_dir.join("suite.json"))?;

    // The tokenizer must cover instance words from both the training corpus
    // and the held-out suite, so build it over their union.
    let train_samples = dataset::read_all(&manifest, Strictness::Strict)?;
    let eval_manifest = ShardManifest::load(&eval_dir.join("features/manifest.json"))?;
    let eval_samples = dataset::read_all(&eval_manifest, Strictness::Strict)?;
    let tokenizer = TokenizerSpec::from_samples(
        train_samples.iter().chain(eval_samples.iter()),
        grainclip::textkit::DEFAULT_TOKEN_BUDGET,
    );
    tokenizer.save(&args.out.join("tokens.tsv"))?;

    println!("world: {}", args.out.join("world.json").display());
    println!("train manifest: {} ({} records)", args.out.join("train/manifest.json").display(), manifest.total_records);
    println!("tokenizer: {} ({} tokens)", args.out.join("tokens.tsv").display(), tokenizer.len());
    println!("tag vocabulary: {} (K={})", args.out.join("tags.tsv").display(), vocab.k());
    println!("eval suite: {}", eval_dir.join("suite.json").display());
    Ok(())
}

fn run_refine(args: RefineArgs, file: &FileConfig, seed: u64) -> Result<()> {
    let mut cfg = file.captioner_config(seed);
    if args.endpoint.is_some() {
        cfg.endpoint_url = args.endpoint.clone();
    }
    if let Some(v) = args.model {
        cfg.model_name = v;
    }
    if let Some(v) = args.workers {
        cfg.concurrency = v;
    }
    if let Some(v) = args.max_retries {
        cfg.max_retries = v;
    }
    if let Some(v) = args.timeout_secs {
        cfg.timeout_secs = v;
    }
    if let Some(v) = args.temperature {
        cfg.temperature = v;
    }
    if let Some(v) = args.max_failure_fraction {
        cfg.max_failure_fraction = v;
    }
    let records_per_shard =
        args.records_per_shard.or(file.refine.records_per_shard).unwrap_or(1000);

    #[derive(Serialize)]
    struct Resolved<'a> {
        seed: u64,
        records_per_shard: usize,
        captioner: &'a grainclip::captioner::CaptionerConfig,
    }
    echo_resolved(
        &Resolved { seed, records_per_shard, captioner: &cfg },
        seed,
        Some(&args.out),
    )?;

    let manifest = ShardManifest::load(&args.input)?;
    let (out_manifest, summary) = refine_dataset(&cfg, &manifest, &args.out, records_per_shard)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    println!("refined manifest: {} ({} records)", args.out.join("manifest.json").display(), out_manifest.total_records);
    Ok(())
}

fn run_stats(args: StatsArgs, file: &FileConfig, seed: u64) -> Result<()> {
    let budget = file.train.token_budget.unwrap_or(grainclip::textkit::DEFAULT_TOKEN_BUDGET);
    let manifest = ShardManifest::load(&args.input)?;
    let tokenizer = match &args.tokenizer {
        Some(path) => load_tokenizer(path, budget)?,
        None => {
            let samples = dataset::read_all(&manifest, Strictness::SkipAndReport)?;
            TokenizerSpec::from_samples(samples.iter(), budget)
        }
    };
    #[derive(Serialize)]
    struct Resolved {
        seed: u64,
        top_n: usize,
    }
    let top_n = args.top_n.unwrap_or(20);
    echo_resolved(&Resolved { seed, top_n }, seed, None)?;
    let report = dataset::compute_stats(&manifest, &tokenizer, top_n)?;
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &args.out {
        std::fs::write(out, format!("{text}\n"))?;
    }
    println!("{text}");
    Ok(())
}

fn run_build_vocab(args: BuildVocabArgs, file: &FileConfig, seed: u64) -> Result<()> {
    let k = args.k.or(file.dims.k).unwrap_or(grainclip::model::Dims::default().k);
    #[derive(Serialize)]
    struct Resolved {
        seed: u64,
        k: usize,
    }
    echo_resolved(&Resolved { seed, k }, seed, None)?;
    let manifest = ShardManifest::load(&args.input)?;
    let vocab = build_vocab(&manifest, k)?;
    save_tag_vocab(&vocab, &args.out)?;
    println!("wrote {} tags to {}", vocab.k(), args.out.display());
    Ok(())
}

fn resolved_train_config(
    flags: &TrainFlags,
    file: &FileConfig,
    seed: u64,
    vocab_k: usize,
) -> Result<TrainConfig> {
    let mut cfg = file.train_config(seed);
    flags.apply(&mut cfg)?;
    cfg.dims.k = vocab_k;
    Ok(cfg)
}

fn run_train(args: TrainArgs, file: &FileConfig, seed: u64) -> Result<()> {
    let vocab = load_tag_vocab(&args.vocab)?;
    let cfg = resolved_train_config(&args.flags, file, seed, vocab.k())?;
    echo_resolved(&cfg, seed, Some(&args.out))?;
    let tokenizer = load_tokenizer(&args.tokenizer, cfg.token_budget)?;
    let manifest = ShardManifest::load(&args.corpus)?;
    let suite = match &args.suite {
        Some(path) => Some(EvalSuite::load(path)?),
        None => None,
    };
    let outcome = train(
        &cfg,
        &manifest,
        &vocab,
        &tokenizer,
        suite.as_ref(),
        &args.out,
        args.resume.as_deref(),
    )?;
    println!("metrics: {}", outcome.metrics_path.display());
    println!("checkpoint: {}", outcome.checkpoint_path.display());
    if let Some(report) = &outcome.final_eval {
        println!("final aggregate: {:.4}", report.aggregate);
    }
    Ok(())
}

fn run_eval(args: EvalArgs, file: &FileConfig, seed: u64) -> Result<()> {
    let budget = args
        .token_budget
        .or(file.train.token_budget)
        .unwrap_or(grainclip::textkit::DEFAULT_TOKEN_BUDGET);
    let ks = args.ks.clone().unwrap_or_else(|| vec![1, 5]);
    #[derive(Serialize)]
    struct Resolved<'a> {
        seed: u64,
        ks: &'a [usize],
        token_budget: usize,
    }
    echo_resolved(&Resolved { seed, ks: &ks, token_budget: budget }, seed, None)?;
    let params = load_params(&args.checkpoint)?;
    let tokenizer = load_tokenizer(&args.tokenizer, budget)?;
    let suite = EvalSuite::load(&args.suite)?;
    let report = evaluate_suite(&params, &tokenizer, &suite, &ks)?;
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &args.out {
        emit_report(&report, out)?;
    }
    println!("{text}");
    Ok(())
}

fn run_score(args: ScoreArgs, file: &FileConfig, seed: u64) -> Result<()> {
    let budget = args
        .token_budget
        .or(file.train.token_budget)
        .unwrap_or(grainclip::textkit::DEFAULT_TOKEN_BUDGET);
    let mode = args.text.as_deref().unwrap_or("both");
    if !["raw", "detailed", "both"].contains(&mode) {
        bail!("--text must be raw, detailed or both, got {mode:?}");
    }
    #[derive(Serialize)]
    struct Resolved<'a> {
        seed: u64,
        text: &'a str,
        token_budget: usize,
    }
    echo_resolved(&Resolved { seed, text: mode, token_budget: budget }, seed, None)?;
    let params = load_params(&args.checkpoint)?;
    let tokenizer = load_tokenizer(&args.tokenizer, budget)?;
    let manifest = ShardManifest::load(&args.corpus)?;
    let samples = dataset::read_all(&manifest, Strictness::Strict)?;

    #[derive(Serialize)]
    struct Score {
        n: usize,
        mean: f64,
        std: f64,
    }
    let mut output = serde_json::Map::new();
    if mode == "raw" || mode == "both" {
        let pairs: Vec<(Vec<f64>, String)> = samples
            .iter()
            .map(|s| (s.image_features.clone(), s.raw_caption.clone()))
            .collect();
        let (mean, std) = similarity_score(&params, &tokenizer, &pairs)?;
        output.insert(
            "raw".into(),
            serde_json::to_value(Score { n: pairs.len(), mean, std })?,
        );
    }
    if mode == "detailed" || mode == "both" {
        let pairs: Vec<(Vec<f64>, String)> = samples
            .iter()
            .filter_map(|s| {
                s.description_set
                    .as_ref()
                    .map(|ds| (s.image_features.clone(), ds.detailed.clone()))
            })
            .collect();
        if !pairs.is_empty() {
            let (mean, std) = similarity_score(&params, &tokenizer, &pairs)?;
            output.insert(
                "detailed".into(),
                serde_json::to_value(Score { n: pairs.len(), mean, std })?,
            );
        }
    }
    println!("{}", serde_json::to_string_pretty(&output)?);
    Ok(())
}

fn run_ablate(args: AblateArgs, file: &FileConfig, seed: u64) -> Result<()> {
    let param: AblateParam = args.param.parse().map_err(|e: String| anyhow::anyhow!(e))?;
    if args.values.is_empty() {
        bail!("--values must list at least one value");
    }
    let seeds = args
        .seeds
        .clone()
        .or_else(|| file.ablate.seeds.clone())
        .unwrap_or_else(|| vec![0, 1, 2]);
    let vocab = load_tag_vocab(&args.vocab)?;
    let mut cfg = resolved_train_config(&args.flags, file, seed, vocab.k())?;
    if args.flags.steps.is_none() {
        if let Some(steps) = file.ablate.steps {
            cfg.steps = steps;
        }
    }

    #[derive(Serialize)]
    struct Resolved<'a> {
        seed: u64,
        param: &'a str,
        values: &'a [String],
        seeds: &'a [u64],
        train: &'a TrainConfig,
    }
    echo_resolved(
        &Resolved { seed, param: &args.param, values: &args.values, seeds: &seeds, train: &cfg },
        seed,
        Some(&args.out),
    )?;

    let tokenizer = load_tokenizer(&args.tokenizer, cfg.token_budget)?;
    let manifest = ShardManifest::load(&args.corpus)?;
    let suite = EvalSuite::load(&args.suite)?;
    let table = run_ablation(
        &cfg,
        &manifest,
        &vocab,
        &tokenizer,
        &suite,
        param,
        &args.values,
        &seeds,
        &args.out,
    )?;
    std::fs::write(
        args.out.join("table.json"),
        format!("{}\n", serde_json::to_string_pretty(&table)?),
    )?;
    let text = table.render_text();
    std::fs::write(args.out.join("table.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn run_inspect(args: InspectArgs, file: &FileConfig, seed: u64) -> Result<()> {
    let d_in = args.d_in.or(file.dims.d_in).unwrap_or(grainclip::model::Dims::default().d_in);
    #[derive(Serialize)]
    struct Resolved {
        seed: u64,
        d_in: usize,
    }
    echo_resolved(&Resolved { seed, d_in }, seed, None)?;
    let limit = args.limit.unwrap_or(5);
    let manifest = ShardManifest::load(&args.input)?;
    let mut shown = 0usize;
    let mut total = 0usize;
    let mut invalid = 0usize;
    for sample in dataset::read_shards(&manifest, Strictness::SkipAndReport) {
        let sample = sample?;
        total += 1;
        let violations = validate_sample(&sample, d_in);
        if !violations.is_empty() {
            invalid += 1;
        }
        if shown < limit {
            println!("{}", serde_json::to_string_pretty(&sample)?);
            for v in &violations {
                println!("  violation: {v}");
            }
            shown += 1;
        }
    }
    println!("{total} records, {invalid} with violations (validated at d_in={d_in})");
    Ok(())
}
