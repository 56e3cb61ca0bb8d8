//! Zero-shot classification via class prompts, bidirectional retrieval
//! recall, hard-negative discrimination over positive/negative text pairs,
//! and pair similarity scoring, with a deterministic report file.
//!
//! Tie rules are fixed: classification argmax breaks ties toward the lowest
//! class index, retrieval ranking breaks score ties by candidate index, and
//! a discrimination tie counts as incorrect.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{self, DatasetError, ShardManifest, Strictness};
use crate::linalg::dot;
use crate::model::{encode_image, encode_text, ModelError, ModelParams};
use crate::textkit::{tokenize, TokenizerSpec};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const SUITE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation suite has no tasks")]
    EmptySuite,
    #[error("classification task {task:?} needs at least 2 classes")]
    TooFewClasses { task: String },
    #[error("classification task {task:?}: label {label} out of range for {classes} classes")]
    LabelOutOfRange { task: String, label: usize, classes: usize },
    #[error("retrieval needs at least {needed} pairs, got {got}")]
    TooFewPairs { needed: usize, got: usize },
    #[error("suite references unknown sample id {0:?}")]
    UnknownSample(String),
    #[error("suite file {path}: {detail}")]
    SuiteFile { path: String, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub prompts: Vec<String>,
}

/// A labeled zero-shot classification task.
#[derive(Debug, Clone)]
pub struct ClassificationTask {
    pub name: String,
    pub classes: Vec<ClassSpec>,
    pub items: Vec<(Vec<f64>, usize)>,
}

#[derive(Debug, Clone)]
pub struct RetrievalPair {
    pub features: Vec<f64>,
    pub caption: String,
}

#[derive(Debug, Clone)]
pub struct DiscriminationTriple {
    pub features: Vec<f64>,
    pub positive: String,
    pub negative: String,
}

/// In-memory evaluation suite with features resolved.
#[derive(Debug, Clone, Default)]
pub struct EvalSuite {
    pub classification: Vec<ClassificationTask>,
    pub retrieval: Vec<RetrievalPair>,
    pub discrimination: Vec<DiscriminationTriple>,
}

// --- on-disk representation: tasks reference feature records by sample id ---

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassificationTaskFile {
    pub name: String,
    pub classes: Vec<ClassSpec>,
    pub items: Vec<ClassItemFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassItemFile {
    pub id: String,
    pub label: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalItemFile {
    pub id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscriminationItemFile {
    pub id: String,
    pub positive: String,
    pub negative: String,
}

/// Suite file: task lists plus a relative path to the shard manifest that
/// holds the referenced feature records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSuiteFile {
    pub schema_version: u32,
    pub features_manifest: String,
    pub classification: Vec<ClassificationTaskFile>,
    pub retrieval: Vec<RetrievalItemFile>,
    pub discrimination: Vec<DiscriminationItemFile>,
}

impl EvalSuiteFile {
    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let mut text = serde_json::to_string_pretty(self).expect("suite serializes");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = fs::read_to_string(path)?;
        let file: EvalSuiteFile = serde_json::from_str(&text).map_err(|e| EvalError::SuiteFile {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        if file.schema_version != SUITE_SCHEMA_VERSION {
            return Err(EvalError::SuiteFile {
                path: path.display().to_string(),
                detail: format!("unsupported schema version {}", file.schema_version),
            });
        }
        Ok(file)
    }
}

impl EvalSuite {
    /// Loads a suite file and resolves sample references against its
    /// feature manifest.
    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let file = EvalSuiteFile::load(path)?;
        let root = path.parent().unwrap_or_else(|| Path::new("."));
        let manifest = ShardManifest::load(&root.join(&file.features_manifest))?;
        let mut by_id: HashMap<String, crate::types::Sample> = HashMap::new();
        for sample in dataset::read_shards(&manifest, Strictness::Strict) {
            let sample = sample?;
            by_id.insert(sample.id.clone(), sample);
        }
        let features = |id: &str| -> Result<Vec<f64>, EvalError> {
            by_id
                .get(id)
                .map(|s| s.image_features.clone())
                .ok_or_else(|| EvalError::UnknownSample(id.to_string()))
        };
        let mut suite = EvalSuite::default();
        for task in file.classification {
            let mut items = Vec::with_capacity(task.items.len());
            for item in task.items {
                items.push((features(&item.id)?, item.label));
            }
            suite.classification.push(ClassificationTask {
                name: task.name,
                classes: task.classes,
                items,
            });
        }
        for item in file.retrieval {
            let s = by_id
                .get(&item.id)
                .ok_or_else(|| EvalError::UnknownSample(item.id.clone()))?;
            suite
                .retrieval
                .push(RetrievalPair { features: s.image_features.clone(), caption: s.raw_caption.clone() });
        }
        for item in file.discrimination {
            suite.discrimination.push(DiscriminationTriple {
                features: features(&item.id)?,
                positive: item.positive,
                negative: item.negative,
            });
        }
        Ok(suite)
    }
}

fn embed_text(
    params: &ModelParams,
    spec: &TokenizerSpec,
    text: &str,
) -> Result<Vec<f64>, ModelError> {
    let mut tokens = tokenize(spec, text);
    if tokens.is_empty() {
        tokens.push(spec.unk_id);
    }
    tokens.truncate(spec.token_budget);
    encode_text(params, &tokens)
}

/// Class embedding = normalized mean of the class's prompt embeddings;
/// prediction = argmax cosine with ties to the lowest class index.
pub fn zero_shot_classify(
    params: &ModelParams,
    spec: &TokenizerSpec,
    task: &ClassificationTask,
) -> Result<f64, EvalError> {
    if task.classes.len() < 2 {
        return Err(EvalError::TooFewClasses { task: task.name.clone() });
    }
    let mut class_embeds = Vec::with_capacity(task.classes.len());
    for class in &task.classes {
        let mut mean = vec![0.0; params.dims.d];
        for prompt in &class.prompts {
            let e = embed_text(params, spec, prompt)?;
            crate::linalg::axpy(1.0, &e, &mut mean);
        }
        let inv = 1.0 / class.prompts.len().max(1) as f64;
        mean.iter_mut().for_each(|v| *v *= inv);
        let n = crate::linalg::norm(&mean);
        if n > 0.0 {
            mean.iter_mut().for_each(|v| *v /= n);
        }
        class_embeds.push(mean);
    }
    let mut correct = 0usize;
    for (features, label) in &task.items {
        if *label >= task.classes.len() {
            return Err(EvalError::LabelOutOfRange {
                task: task.name.clone(),
                label: *label,
                classes: task.classes.len(),
            });
        }
        let image = encode_image(params, features)?;
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for (k, ce) in class_embeds.iter().enumerate() {
            let score = dot(&image, ce);
            if score > best_score {
                best_score = score;
                best = k;
            }
        }
        if best == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / task.items.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub ks: Vec<usize>,
    pub image_to_text: Vec<f64>,
    pub text_to_image: Vec<f64>,
}

impl RetrievalMetrics {
    pub fn at(&self, k: usize) -> Option<(f64, f64)> {
        self.ks
            .iter()
            .position(|&x| x == k)
            .map(|i| (self.image_to_text[i], self.text_to_image[i]))
    }
}

/// Rank of the true candidate among all candidates: candidates scoring
/// strictly higher always rank first; equal scores at a lower index also
/// rank first.
fn rank_of(scores: &[f64], true_idx: usize) -> usize {
    let t = scores[true_idx];
    scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > t || (s == t && i < true_idx))
        .count()
}

/// R@K in both directions over cosine similarities.
pub fn retrieval_eval(
    params: &ModelParams,
    spec: &TokenizerSpec,
    pairs: &[RetrievalPair],
    ks: &[usize],
) -> Result<RetrievalMetrics, EvalError> {
    let max_k = ks.iter().copied().max().unwrap_or(1);
    if pairs.len() < max_k {
        return Err(EvalError::TooFewPairs { needed: max_k, got: pairs.len() });
    }
    let n = pairs.len();
    let images: Vec<Vec<f64>> = pairs
        .iter()
        .map(|p| encode_image(params, &p.features))
        .collect::<Result<_, _>>()?;
    let texts: Vec<Vec<f64>> = pairs
        .iter()
        .map(|p| embed_text(params, spec, &p.caption))
        .collect::<Result<_, _>>()?;
    let mut i2t_ranks = Vec::with_capacity(n);
    let mut t2i_ranks = Vec::with_capacity(n);
    for i in 0..n {
        let scores: Vec<f64> = texts.iter().map(|t| dot(&images[i], t)).collect();
        i2t_ranks.push(rank_of(&scores, i));
        let scores: Vec<f64> = images.iter().map(|im| dot(&texts[i], im)).collect();
        t2i_ranks.push(rank_of(&scores, i));
    }
    let recall = |ranks: &[usize], k: usize| {
        ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64
    };
    Ok(RetrievalMetrics {
        ks: ks.to_vec(),
        image_to_text: ks.iter().map(|&k| recall(&i2t_ranks, k)).collect(),
        text_to_image: ks.iter().map(|&k| recall(&t2i_ranks, k)).collect(),
    })
}

/// Correct iff the positive text is strictly closer than the negative.
pub fn discrimination_eval(
    params: &ModelParams,
    spec: &TokenizerSpec,
    triples: &[DiscriminationTriple],
) -> Result<f64, EvalError> {
    if triples.is_empty() {
        return Err(EvalError::EmptySuite);
    }
    let mut correct = 0usize;
    for t in triples {
        let image = encode_image(params, &t.features)?;
        let pos = dot(&image, &embed_text(params, spec, &t.positive)?);
        let neg = dot(&image, &embed_text(params, spec, &t.negative)?);
        if pos > neg {
            correct += 1;
        }
    }
    Ok(correct as f64 / triples.len() as f64)
}

/// Mean and population standard deviation of pair cosine similarities.
pub fn similarity_score(
    params: &ModelParams,
    spec: &TokenizerSpec,
    pairs: &[(Vec<f64>, String)],
) -> Result<(f64, f64), EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptySuite);
    }
    let mut sims = Vec::with_capacity(pairs.len());
    for (features, text) in pairs {
        let image = encode_image(params, features)?;
        let t = embed_text(params, spec, text)?;
        sims.push(dot(&image, &t));
    }
    let mean = sims.iter().sum::<f64>() / sims.len() as f64;
    let var = sims.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / sims.len() as f64;
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub name: String,
    pub accuracy: f64,
}

/// Full evaluation report; `aggregate` is the unweighted mean of the
/// accuracy-type metrics (classification accuracies, R@1 both directions,
/// discrimination accuracy).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub classification: Vec<ClassificationResult>,
    pub retrieval: Option<RetrievalMetrics>,
    pub discrimination_accuracy: Option<f64>,
    pub similarity_mean: Option<f64>,
    pub similarity_std: Option<f64>,
    pub aggregate: f64,
}

fn aggregate_of(
    classification: &[ClassificationResult],
    retrieval: &Option<RetrievalMetrics>,
    discrimination: &Option<f64>,
) -> Result<f64, EvalError> {
    let mut metrics: Vec<f64> = classification.iter().map(|c| c.accuracy).collect();
    if let Some(r) = retrieval {
        if let Some((i2t, t2i)) = r.at(1) {
            metrics.push(i2t);
            metrics.push(t2i);
        }
    }
    if let Some(d) = discrimination {
        metrics.push(*d);
    }
    if metrics.is_empty() {
        return Err(EvalError::EmptySuite);
    }
    Ok(metrics.iter().sum::<f64>() / metrics.len() as f64)
}

/// Runs every task in the suite.
pub fn evaluate_suite(
    params: &ModelParams,
    spec: &TokenizerSpec,
    suite: &EvalSuite,
    ks: &[usize],
) -> Result<EvalReport, EvalError> {
    if suite.classification.is_empty() && suite.retrieval.is_empty() && suite.discrimination.is_empty()
    {
        return Err(EvalError::EmptySuite);
    }
    let mut classification = Vec::new();
    for task in &suite.classification {
        classification.push(ClassificationResult {
            name: task.name.clone(),
            accuracy: zero_shot_classify(params, spec, task)?,
        });
    }
    let retrieval = if suite.retrieval.is_empty() {
        None
    } else {
        Some(retrieval_eval(params, spec, &suite.retrieval, ks)?)
    };
    let discrimination_accuracy = if suite.discrimination.is_empty() {
        None
    } else {
        Some(discrimination_eval(params, spec, &suite.discrimination)?)
    };
    let (similarity_mean, similarity_std) = if suite.retrieval.is_empty() {
        (None, None)
    } else {
        let pairs: Vec<(Vec<f64>, String)> = suite
            .retrieval
            .iter()
            .map(|p| (p.features.clone(), p.caption.clone()))
            .collect();
        let (m, s) = similarity_score(params, spec, &pairs)?;
        (Some(m), Some(s))
    };
    let aggregate = aggregate_of(&classification, &retrieval, &discrimination_accuracy)?;
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        classification,
        retrieval,
        discrimination_accuracy,
        similarity_mean,
        similarity_std,
        aggregate,
    })
}

/// Deterministic structured report file.
pub fn emit_report(report: &EvalReport, path: &Path) -> Result<(), EvalError> {
    if report.classification.is_empty()
        && report.retrieval.is_none()
        && report.discrimination_accuracy.is_none()
    {
        return Err(EvalError::EmptySuite);
    }
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
