//! Hyperparameter sweep harness: trains one model per (value, seed) cell of
//! a single-parameter grid and tabulates the evaluation metrics, mirroring
//! the mixing-ratio / loss-weight / vocabulary-size ablation tables.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::ShardManifest;
use crate::evaluator::{EvalReport, EvalSuite};
use crate::textkit::{build_vocab, Strategy};
use crate::trainer::{train, TrainConfig, TrainError};
use crate::types::TagVocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblateParam {
    MixRatio,
    Alpha,
    Beta,
    K,
    NNeg,
    Strategy,
}

impl std::str::FromStr for AblateParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mix_ratio" => Ok(AblateParam::MixRatio),
            "alpha" => Ok(AblateParam::Alpha),
            "beta" => Ok(AblateParam::Beta),
            "k" => Ok(AblateParam::K),
            "n_neg" => Ok(AblateParam::NNeg),
            "strategy" => Ok(AblateParam::Strategy),
            other => Err(format!(
                "unknown ablation parameter {other:?} (expected mix_ratio, alpha, beta, k, n_neg, strategy)"
            )),
        }
    }
}

impl std::fmt::Display for AblateParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AblateParam::MixRatio => "mix_ratio",
            AblateParam::Alpha => "alpha",
            AblateParam::Beta => "beta",
            AblateParam::K => "k",
            AblateParam::NNeg => "n_neg",
            AblateParam::Strategy => "strategy",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub std: f64,
}

fn summarize(values: &[f64]) -> MetricSummary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MetricSummary { mean, std }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    pub classification: MetricSummary,
    pub retrieval_i2t: MetricSummary,
    pub retrieval_t2i: MetricSummary,
    pub discrimination: MetricSummary,
    pub aggregate: MetricSummary,
    pub reports: Vec<EvalReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub param: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Plain-text table, one row per swept value.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<14} {:>18} {:>18} {:>18} {:>18} {:>18}\n",
            self.param, "classification", "R@1 img->txt", "R@1 txt->img", "discrimination",
            "aggregate"
        ));
        for row in &self.rows {
            let cell = |m: &MetricSummary| format!("{:.4} ±{:.4}", m.mean, m.std);
            out.push_str(&format!(
                "{:<14} {:>18} {:>18} {:>18} {:>18} {:>18}\n",
                row.value,
                cell(&row.classification),
                cell(&row.retrieval_i2t),
                cell(&row.retrieval_t2i),
                cell(&row.discrimination),
                cell(&row.aggregate),
            ));
        }
        out
    }
}

fn apply_value(cfg: &mut TrainConfig, param: AblateParam, value: &str) -> Result<(), TrainError> {
    let bad = |detail: String| TrainError::Checkpoint { path: String::new(), detail };
    match param {
        AblateParam::MixRatio => {
            cfg.sampling.mix_ratio =
                value.parse().map_err(|e| bad(format!("bad mix_ratio {value:?}: {e}")))?;
        }
        AblateParam::Alpha => {
            cfg.weights.alpha =
                value.parse().map_err(|e| bad(format!("bad alpha {value:?}: {e}")))?;
        }
        AblateParam::Beta => {
            cfg.weights.beta =
                value.parse().map_err(|e| bad(format!("bad beta {value:?}: {e}")))?;
        }
        AblateParam::NNeg => {
            cfg.sampling.n_neg =
                value.parse().map_err(|e| bad(format!("bad n_neg {value:?}: {e}")))?;
        }
        AblateParam::K => {} // handled by rebuilding the vocabulary
        AblateParam::Strategy => {
            cfg.sampling.strategy = value
                .parse::<Strategy>()
                .map_err(|e| bad(e))?;
        }
    }
    Ok(())
}

fn metric_of(report: &EvalReport) -> (f64, f64, f64, f64, f64) {
    let classification = if report.classification.is_empty() {
        0.0
    } else {
        report.classification.iter().map(|c| c.accuracy).sum::<f64>()
            / report.classification.len() as f64
    };
    let (r1_i2t, r1_t2i) = report
        .retrieval
        .as_ref()
        .and_then(|r| r.at(1))
        .unwrap_or((0.0, 0.0));
    let discrimination = report.discrimination_accuracy.unwrap_or(0.0);
    (classification, r1_i2t, r1_t2i, discrimination, report.aggregate)
}

/// Trains one model per (value, seed) and summarizes the evaluation
/// metrics, mean and sample standard deviation over seeds.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    base: &TrainConfig,
    manifest: &ShardManifest,
    vocab: &TagVocabulary,
    spec: &crate::textkit::TokenizerSpec,
    suite: &EvalSuite,
    param: AblateParam,
    values: &[String],
    seeds: &[u64],
    work_dir: &Path,
) -> Result<AblationTable, TrainError> {
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let mut cls = Vec::new();
        let mut i2t = Vec::new();
        let mut t2i = Vec::new();
        let mut disc = Vec::new();
        let mut agg = Vec::new();
        let mut reports = Vec::new();
        for &seed in seeds {
            let mut cfg = base.clone();
            apply_value(&mut cfg, param, value)?;
            cfg.seed = seed;
            cfg.sampling.seed = seed;
            let vocab_cell;
            let vocab_ref = if param == AblateParam::K {
                let k: usize = value.parse().map_err(|e| TrainError::Checkpoint {
                    path: String::new(),
                    detail: format!("bad k {value:?}: {e}"),
                })?;
                vocab_cell = build_vocab(manifest, k)?;
                cfg.dims.k = vocab_cell.k();
                &vocab_cell
            } else {
                vocab
            };
            let cell_dir = work_dir.join(format!("{param}-{value}-seed{seed}"));
            let outcome = train(&cfg, manifest, vocab_ref, spec, Some(suite), &cell_dir, None)?;
            let report = outcome.final_eval.expect("suite provided");
            let (c, i, t, d, a) = metric_of(&report);
            cls.push(c);
            i2t.push(i);
            t2i.push(t);
            disc.push(d);
            agg.push(a);
            reports.push(report);
        }
        rows.push(AblationRow {
            value: value.clone(),
            classification: summarize(&cls),
            retrieval_i2t: summarize(&i2t),
            retrieval_t2i: summarize(&t2i),
            discrimination: summarize(&disc),
            aggregate: summarize(&agg),
            reports,
        });
    }
    Ok(AblationTable { param: param.to_string(), seeds: seeds.to_vec(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summaries_and_param_parsing() {
        let s = summarize(&[0.5, 0.7, 0.6]);
        assert!((s.mean - 0.6).abs() < 1e-12);
        assert!((s.std - 0.1).abs() < 1e-12);
        assert_eq!(summarize(&[0.4]).std, 0.0);

        assert_eq!("mix_ratio".parse::<AblateParam>().unwrap(), AblateParam::MixRatio);
        assert!("nope".parse::<AblateParam>().is_err());
    }

    #[test]
    fn table_renders_every_row() {
        let row = AblationRow {
            value: "0.75".into(),
            classification: MetricSummary { mean: 0.9, std: 0.01 },
            retrieval_i2t: MetricSummary { mean: 0.8, std: 0.02 },
            retrieval_t2i: MetricSummary { mean: 0.7, std: 0.0 },
            discrimination: MetricSummary { mean: 0.6, std: 0.05 },
            aggregate: MetricSummary { mean: 0.75, std: 0.01 },
            reports: vec![],
        };
        let table = AblationTable { param: "mix_ratio".into(), seeds: vec![0], rows: vec![row] };
        let text = table.render_text();
        assert!(text.contains("mix_ratio"));
        assert!(text.contains("0.75"));
        assert!(text.lines().count() == 2);
    }
}
