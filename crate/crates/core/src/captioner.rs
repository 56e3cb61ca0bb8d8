//! Caption refinement: builds prompts for a vision-language captioner,
//! parses its structured replies into description sets, and runs the
//! dataset-wide refinement pipeline over a worker pool.
//!
//! The captioner itself is pluggable: a chat-completions-style HTTP endpoint
//! or a deterministic mock that stands in for the fine-tuned model during
//! development and tests.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{self, DatasetError, ShardManifest, Strictness};
use crate::rng;
use crate::textkit::word_tokens;
use crate::types::{normalize_tags, DescriptionSet, Sample};

/// Environment variable holding the bearer token for remote endpoints.
pub const API_TOKEN_ENV: &str = "GRAINCLIP_API_TOKEN";

/// Instruction given to the captioner for every request.
pub const INSTRUCTION: &str = "Given an image-text pair crawled from the Internet, please assign the text information as a reference, generate more detailed descriptions for the image. If the given text and image has conflicts, please prioritize the image when generating information. The output should be in ENGLISH.";

/// The machine-readable reply format the captioner must emit.
pub const OUTPUT_CONTRACT: &str = "Reply with a single JSON object with exactly these keys: \"detailed_description\" (string), \"negative_description\" (string), \"positive_tags\" (array of strings), \"negative_tags\" (array of strings).";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseReplyError {
    #[error("reply is not a JSON object: {0}")]
    InvalidJson(String),
    #[error("reply is missing key {0:?}")]
    MissingKey(&'static str),
    #[error("reply key {0:?} has the wrong type")]
    WrongType(&'static str),
    #[error("reply component {0:?} is empty")]
    EmptyComponent(&'static str),
    #[error("tag {0:?} appears in both positive_tags and negative_tags")]
    OverlappingTags(String),
}

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("endpoint returned status {status}: {body}")]
    HttpStatus { status: u16, body: String },
    #[error("malformed endpoint response: {0}")]
    MalformedResponse(String),
    #[error(transparent)]
    Reply(#[from] ParseReplyError),
    #[error("no exemplars configured")]
    NoExemplars,
    #[error("failure fraction {got:.3} exceeds the configured limit {limit:.3}")]
    FailureQuota { got: f64, limit: f64 },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Prompt skeleton: the fixed instruction plus the reply contract. Slots for
/// the exemplar pair and the target caption are filled per request.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub instruction_text: String,
    pub output_contract: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            instruction_text: INSTRUCTION.to_string(),
            output_contract: OUTPUT_CONTRACT.to_string(),
        }
    }
}

impl PromptTemplate {
    /// A valid template always renders the canonical instruction verbatim.
    pub fn is_valid(&self) -> bool {
        self.instruction_text.contains(INSTRUCTION)
    }
}

/// One in-context example: a raw caption and the serialized reply the
/// captioner should have produced for it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExemplarPair {
    pub input_caption: String,
    pub exemplar_output: String,
}

impl ExemplarPair {
    pub fn from_set(input_caption: &str, set: &DescriptionSet) -> Self {
        ExemplarPair {
            input_caption: input_caption.to_string(),
            exemplar_output: serialize_description_set(set),
        }
    }

    pub fn is_valid(&self) -> bool {
        parse_reply(&self.exemplar_output).is_ok()
    }
}

/// Two hand-written exemplars used when the caller supplies none.
pub fn default_exemplars() -> Vec<ExemplarPair> {
    vec![
        ExemplarPair::from_set(
            "vintage bike against wall",
            &DescriptionSet {
                detailed: "an old steel bicycle with a worn leather saddle leans against a \
                           cracked brick wall. the front basket holds a folded newspaper; \
                           paint flakes from the frame near the chain guard."
                    .into(),
                negative: "an old steel bicycle with a worn leather saddle leans against a \
                           cracked concrete wall. the front basket holds a folded newspaper; \
                           paint flakes from the frame near the chain guard."
                    .into(),
                pos_tags: vec!["bicycle".into(), "brick wall".into(), "basket".into()],
                neg_tags: vec!["concrete wall".into()],
            },
        ),
        ExemplarPair::from_set(
            "IMG_2043.jpg sunset pier",
            &DescriptionSet {
                detailed: "a wooden pier stretches into calm water under an orange sunset. \
                           two gulls rest on the railing; the planks reflect warm light \
                           toward the shore."
                    .into(),
                negative: "a wooden pier stretches into calm water under an orange sunrise. \
                           two gulls rest on the railing; the planks reflect warm light \
                           toward the shore."
                    .into(),
                pos_tags: vec!["pier".into(), "sunset".into(), "water".into()],
                neg_tags: vec!["sunrise".into()],
            },
        ),
    ]
}

/// Deterministic prompt assembly: instruction, contract, the exemplar
/// input/output pair, then the target caption. The image travels separately
/// as a request attachment.
pub fn build_prompt(template: &PromptTemplate, exemplar: &ExemplarPair, target_caption: &str) -> String {
    format!(
        "{}\n\n{}\n\nHere are several examples: Input: '{}', Output: '{}'. Current input: text '{}' with the attached image, please output:",
        template.instruction_text,
        template.output_contract,
        exemplar.input_caption,
        exemplar.exemplar_output,
        target_caption
    )
}

/// The four-key reply object; `parse_reply` is its inverse.
pub fn serialize_description_set(set: &DescriptionSet) -> String {
    serde_json::json!({
        "detailed_description": set.detailed,
        "negative_description": set.negative,
        "positive_tags": set.pos_tags,
        "negative_tags": set.neg_tags,
    })
    .to_string()
}

fn extract_str(
    obj: &serde_json::Map<String, serde_json::Value>,
    key: &'static str,
) -> Result<String, ParseReplyError> {
    let v = obj.get(key).ok_or(ParseReplyError::MissingKey(key))?;
    let s = v.as_str().ok_or(ParseReplyError::WrongType(key))?;
    if s.trim().is_empty() {
        return Err(ParseReplyError::EmptyComponent(key));
    }
    Ok(s.to_string())
}

fn extract_tags(
    obj: &serde_json::Map<String, serde_json::Value>,
    key: &'static str,
) -> Result<Vec<String>, ParseReplyError> {
    let v = obj.get(key).ok_or(ParseReplyError::MissingKey(key))?;
    let arr = v.as_array().ok_or(ParseReplyError::WrongType(key))?;
    let mut out = Vec::with_capacity(arr.len());
    for item in arr {
        let s = item.as_str().ok_or(ParseReplyError::WrongType(key))?;
        out.push(s.to_string());
    }
    Ok(out)
}

/// Extracts the structured four-component object from a captioner reply,
/// normalizing tags to canonical form. Tolerates prose around the JSON
/// object but not a missing or malformed one.
pub fn parse_reply(reply_text: &str) -> Result<DescriptionSet, ParseReplyError> {
    let candidate = match serde_json::from_str::<serde_json::Value>(reply_text.trim()) {
        Ok(v) => v,
        Err(_) => {
            let start = reply_text.find('{');
            let end = reply_text.rfind('}');
            let (s, e) = match (start, end) {
                (Some(s), Some(e)) if e > s => (s, e),
                _ => return Err(ParseReplyError::InvalidJson("no object found".into())),
            };
            serde_json::from_str(&reply_text[s..=e])
                .map_err(|e| ParseReplyError::InvalidJson(e.to_string()))?
        }
    };
    let obj = candidate
        .as_object()
        .ok_or_else(|| ParseReplyError::InvalidJson("top-level value is not an object".into()))?;
    let detailed = extract_str(obj, "detailed_description")?;
    let negative = extract_str(obj, "negative_description")?;
    let pos_tags = normalize_tags(&extract_tags(obj, "positive_tags")?);
    let neg_tags = normalize_tags(&extract_tags(obj, "negative_tags")?);
    let pos: HashSet<&String> = pos_tags.iter().collect();
    if let Some(t) = neg_tags.iter().find(|t| pos.contains(t)) {
        return Err(ParseReplyError::OverlappingTags(t.clone()));
    }
    Ok(DescriptionSet { detailed, negative, pos_tags, neg_tags })
}

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "of", "on", "in", "at", "to", "and", "or", "with", "is", "are", "was",
    "were", "it", "this", "that", "for", "by", "from", "over", "under",
];

const REPLACEMENTS: &[&str] = &[
    "violet", "amber", "copper", "ivory", "saffron", "cobalt", "russet", "teal", "umber",
    "coral", "onyx", "pewter",
];

fn is_stopword(w: &str) -> bool {
    STOPWORDS.contains(&w)
}

/// Deterministic stand-in for the fine-tuned captioner. Expands the raw
/// caption to at least four times its token length, derives the negative
/// description by substituting one content word, and uses the caption's
/// content words as positive tags. A pure function of
/// (sample id, raw caption, seed).
pub fn mock_refine(sample: &Sample, seed: u64) -> DescriptionSet {
    let caption = sample.raw_caption.trim().to_lowercase();
    let words = word_tokens(&caption);
    let mut content: Vec<String> = Vec::new();
    let mut seen = HashSet::new();
    for w in &words {
        if !is_stopword(w) && seen.insert(w.clone()) {
            content.push(w.clone());
        }
    }
    if content.is_empty() {
        content = if words.is_empty() { vec!["image".to_string()] } else { words.clone() };
    }

    let mut draw = rng::stream(rng::mix_str(seed, &sample.id, &[rng::fnv1a(caption.as_bytes())]));
    let target_idx = draw.gen_range(0..content.len());
    let target = content[target_idx].clone();
    let start = draw.gen_range(0..REPLACEMENTS.len());
    let replacement = (0..REPLACEMENTS.len())
        .map(|k| REPLACEMENTS[(start + k) % REPLACEMENTS.len()])
        .find(|r| !words.iter().any(|w| w == r))
        .unwrap_or("unusual")
        .to_string();

    let target_tokens = (4 * words.len()).max(16);
    let render = |map: &dyn Fn(&str) -> String| -> String {
        let mapped_caption =
            words.iter().map(|w| map(w)).collect::<Vec<_>>().join(" ");
        let mut text = String::new();
        let mut tokens = 0usize;
        let mut round = 0usize;
        while tokens < target_tokens {
            let w1 = map(&content[round % content.len()]);
            let w2 = map(&content[(round + 1) % content.len()]);
            let sentence = match round % 4 {
                0 => format!("the image shows {mapped_caption}."),
                1 => format!("a closer look reveals {w1} and {w2};"),
                2 => format!("the {w1} stands out clearly against the background."),
                _ => format!("every part of {mapped_caption} remains visible!"),
            };
            tokens += word_tokens(&sentence).len();
            if !text.is_empty() {
                text.push(' ');
            }
            text.push_str(&sentence);
            round += 1;
        }
        text
    };

    let identity = |w: &str| w.to_string();
    let substitute = |w: &str| {
        if w == target {
            replacement.clone()
        } else {
            w.to_string()
        }
    };
    DescriptionSet {
        detailed: render(&identity),
        negative: render(&substitute),
        pos_tags: normalize_tags(&content),
        neg_tags: vec![replacement],
    }
}

/// Captioner client settings: endpoint selection, retry policy, worker
/// count, and the failure quota above which a refinement run aborts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptionerConfig {
    pub endpoint_url: Option<String>,
    pub model_name: String,
    pub max_retries: u32,
    pub timeout_secs: u64,
    pub concurrency: usize,
    pub temperature: f64,
    /// Base of the exponential retry backoff; doubles per attempt, capped
    /// at 32x.
    pub backoff_base_ms: u64,
    /// Abort when more than this fraction of samples fail after retries.
    pub max_failure_fraction: f64,
    pub seed: u64,
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        CaptionerConfig {
            endpoint_url: None,
            model_name: "mock".into(),
            max_retries: 3,
            timeout_secs: 30,
            concurrency: 4,
            temperature: 0.2,
            backoff_base_ms: 1000,
            max_failure_fraction: 0.05,
            seed: 0,
        }
    }
}

/// A refinement backend. Implementations must be safe to call from several
/// worker threads at once.
pub trait Captioner: Send + Sync {
    fn refine(&self, sample: &Sample, prompt: &str) -> Result<DescriptionSet, CaptionError>;

    /// Delay before retry `attempt` (1-based). Exponential with a 32x cap.
    fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64 << attempt.min(5).saturating_sub(1);
        Duration::from_millis(1000 * factor.min(32))
    }
}

/// Deterministic in-process captioner.
pub struct MockCaptioner {
    pub seed: u64,
}

impl Captioner for MockCaptioner {
    fn refine(&self, sample: &Sample, _prompt: &str) -> Result<DescriptionSet, CaptionError> {
        Ok(mock_refine(sample, self.seed))
    }

    fn backoff(&self, _attempt: u32) -> Duration {
        Duration::ZERO
    }
}

/// Client for a chat-completions-style endpoint. The request carries the
/// prompt as a user message and the image features as an attachment field;
/// the reply must contain the four-key object as assistant text.
pub struct HttpCaptioner {
    cfg: CaptionerConfig,
    url: String,
    agent: ureq::Agent,
    token: Option<String>,
}

impl HttpCaptioner {
    pub fn new(cfg: CaptionerConfig) -> Result<Self, CaptionError> {
        let url = cfg
            .endpoint_url
            .clone()
            .ok_or_else(|| CaptionError::Transport("no endpoint_url configured".into()))?;
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build();
        let token = std::env::var(API_TOKEN_ENV).ok();
        Ok(HttpCaptioner { cfg, url, agent, token })
    }
}

impl Captioner for HttpCaptioner {
    fn refine(&self, sample: &Sample, prompt: &str) -> Result<DescriptionSet, CaptionError> {
        let body = serde_json::json!({
            "model": self.cfg.model_name,
            "temperature": self.cfg.temperature,
            "messages": [{
                "role": "user",
                "content": prompt,
                "attachment": {
                    "kind": "image_features",
                    "values": sample.image_features,
                },
            }],
        });
        let mut req = self.agent.post(&self.url).set("Content-Type", "application/json");
        if let Some(token) = &self.token {
            req = req.set("Authorization", &format!("Bearer {token}"));
        }
        let response = match req.send_json(body) {
            Ok(r) => r,
            Err(ureq::Error::Status(status, r)) => {
                let body = r.into_string().unwrap_or_default();
                return Err(CaptionError::HttpStatus { status, body });
            }
            Err(e) => return Err(CaptionError::Transport(e.to_string())),
        };
        let value: serde_json::Value = response
            .into_json()
            .map_err(|e| CaptionError::MalformedResponse(e.to_string()))?;
        let content = value["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| {
                CaptionError::MalformedResponse("missing choices[0].message.content".into())
            })?;
        Ok(parse_reply(content)?)
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64 << attempt.min(6).saturating_sub(1);
        Duration::from_millis(self.cfg.backoff_base_ms.saturating_mul(factor.min(32)))
    }
}

/// Outcome counts for one refinement run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineSummary {
    pub total: u64,
    pub succeeded: u64,
    pub failed: u64,
    /// Total retry attempts across all samples.
    pub retries: u64,
    pub failed_ids: Vec<String>,
}

const EXEMPLAR_SALT: u64 = 0x5e7e;

fn pick_exemplar<'a>(
    exemplars: &'a [ExemplarPair],
    seed: u64,
    sample_id: &str,
) -> &'a ExemplarPair {
    let mut draw = rng::stream(rng::mix_str(seed, sample_id, &[EXEMPLAR_SALT]));
    &exemplars[draw.gen_range(0..exemplars.len())]
}

/// Attaches a description set to every input sample, preserving input order
/// regardless of worker interleaving. Samples that still fail after
/// `max_retries` are flagged in the summary and pass through unchanged, so
/// output cardinality always equals input cardinality.
pub fn refine_dataset(
    cfg: &CaptionerConfig,
    input: &ShardManifest,
    out_dir: &Path,
    records_per_shard: usize,
) -> Result<(ShardManifest, RefineSummary), CaptionError> {
    match &cfg.endpoint_url {
        Some(_) => {
            let client = HttpCaptioner::new(cfg.clone())?;
            refine_dataset_with(cfg, &client, input, out_dir, records_per_shard)
        }
        None => {
            let client = MockCaptioner { seed: cfg.seed };
            refine_dataset_with(cfg, &client, input, out_dir, records_per_shard)
        }
    }
}

/// Same as [`refine_dataset`] with an explicit backend; used directly by
/// tests to inject faults.
pub fn refine_dataset_with(
    cfg: &CaptionerConfig,
    captioner: &dyn Captioner,
    input: &ShardManifest,
    out_dir: &Path,
    records_per_shard: usize,
) -> Result<(ShardManifest, RefineSummary), CaptionError> {
    let template = PromptTemplate::default();
    let exemplars = default_exemplars();
    let samples = dataset::read_all(input, Strictness::SkipAndReport)?;
    let n = samples.len();

    struct Outcome {
        set: Option<DescriptionSet>,
        attempts: u32,
    }

    let run_one = |sample: &Sample| -> Outcome {
        let exemplar = pick_exemplar(&exemplars, cfg.seed, &sample.id);
        let prompt = build_prompt(&template, exemplar, &sample.raw_caption);
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            match captioner.refine(sample, &prompt) {
                Ok(set) => return Outcome { set: Some(set), attempts },
                Err(err) => {
                    if attempts > cfg.max_retries {
                        log::warn!("sample {}: giving up after {attempts} attempts: {err}", sample.id);
                        return Outcome { set: None, attempts };
                    }
                    std::thread::sleep(captioner.backoff(attempts));
                }
            }
        }
    };

    let workers = cfg.concurrency.max(1).min(n.max(1));
    let mut outcomes: Vec<Option<Outcome>> = (0..n).map(|_| None).collect();
    if workers <= 1 {
        for (i, sample) in samples.iter().enumerate() {
            outcomes[i] = Some(run_one(sample));
        }
    } else {
        let (task_tx, task_rx) = mpsc::channel::<usize>();
        let task_rx = Arc::new(Mutex::new(task_rx));
        let (result_tx, result_rx) = mpsc::channel::<(usize, Outcome)>();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                let task_rx = Arc::clone(&task_rx);
                let result_tx = result_tx.clone();
                let samples = &samples;
                let run_one = &run_one;
                scope.spawn(move || loop {
                    let idx = match task_rx.lock().expect("task queue").recv() {
                        Ok(i) => i,
                        Err(_) => break,
                    };
                    let outcome = run_one(&samples[idx]);
                    if result_tx.send((idx, outcome)).is_err() {
                        break;
                    }
                });
            }
            drop(result_tx);
            for i in 0..n {
                task_tx.send(i).expect("workers alive");
            }
            drop(task_tx);
            for (idx, outcome) in result_rx {
                outcomes[idx] = Some(outcome);
            }
        });
    }

    let mut summary = RefineSummary {
        total: n as u64,
        succeeded: 0,
        failed: 0,
        retries: 0,
        failed_ids: Vec::new(),
    };
    let mut refined = Vec::with_capacity(n);
    for (sample, outcome) in samples.into_iter().zip(outcomes) {
        let outcome = outcome.expect("all indices processed");
        summary.retries += (outcome.attempts - 1) as u64;
        match outcome.set {
            Some(set) => {
                summary.succeeded += 1;
                refined.push(Sample { description_set: Some(set), ..sample });
            }
            None => {
                summary.failed += 1;
                summary.failed_ids.push(sample.id.clone());
                refined.push(sample);
            }
        }
    }
    if n > 0 {
        let frac = summary.failed as f64 / n as f64;
        if frac > cfg.max_failure_fraction {
            return Err(CaptionError::FailureQuota { got: frac, limit: cfg.max_failure_fraction });
        }
    }
    let manifest = dataset::write_shards(refined, out_dir, records_per_shard)?;
    Ok((manifest, summary))
}

/// Writes one conversation record per (sample, description set) pair:
/// the rendered prompt as the user turn, the serialized set as the
/// assistant turn. This is the corpus a supervised fine-tuning run of an
/// open captioner would consume.
pub fn export_sft_corpus(
    template: &PromptTemplate,
    exemplars: &[ExemplarPair],
    seed: u64,
    pairs: impl IntoIterator<Item = (Sample, DescriptionSet)>,
    out_path: &Path,
) -> Result<u64, CaptionError> {
    if exemplars.is_empty() {
        return Err(CaptionError::NoExemplars);
    }
    let file = fs::File::create(out_path)?;
    let mut writer = BufWriter::new(file);
    let mut count = 0u64;
    for (sample, set) in pairs {
        let exemplar = pick_exemplar(exemplars, seed, &sample.id);
        let record = serde_json::json!({
            "user": build_prompt(template, exemplar, &sample.raw_caption),
            "assistant": serialize_description_set(&set),
        });
        writer.write_all(record.to_string().as_bytes())?;
        writer.write_all(b"\n")?;
        count += 1;
    }
    writer.flush()?;
    Ok(count)
}
