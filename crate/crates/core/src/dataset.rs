//! Line-delimited shard files, the manifest that indexes them, and corpus
//! statistics reports.
//!
//! One record per line: a JSON object with keys `id`, `image_features`,
//! `raw_caption` and optional `description_set`. Sharding is deterministic:
//! record `i` goes to shard `i / records_per_shard`, so output bytes are a
//! pure function of input order.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::textkit::{tokenize, TokenizerSpec};
use crate::types::{normalize_tag, Sample};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {detail}")]
    MalformedRecord { path: String, line: usize, detail: String },
    #[error("manifest {path}: {detail}")]
    Manifest { path: String, detail: String },
    #[error("records_per_shard must be at least 1")]
    ZeroShardSize,
    #[error("unsupported schema version {found} (supported: {supported})")]
    SchemaVersion { found: u32, supported: u32 },
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShardEntry {
    pub path: String,
    pub records: u64,
}

/// Index of an on-disk corpus: ordered shard files plus record counts.
/// Shard paths are stored relative to the manifest location.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShardManifest {
    pub schema_version: u32,
    pub shards: Vec<ShardEntry>,
    pub total_records: u64,
    #[serde(skip)]
    root: PathBuf,
}

impl ShardManifest {
    pub fn shard_paths(&self) -> impl Iterator<Item = PathBuf> + '_ {
        self.shards.iter().map(|s| self.root.join(&s.path))
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut manifest: ShardManifest =
            serde_json::from_str(&text).map_err(|e| DatasetError::Manifest {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(DatasetError::SchemaVersion {
                found: manifest.schema_version,
                supported: SCHEMA_VERSION,
            });
        }
        let sum: u64 = manifest.shards.iter().map(|s| s.records).sum();
        if sum != manifest.total_records {
            return Err(DatasetError::Manifest {
                path: path.display().to_string(),
                detail: format!(
                    "total_records {} does not match per-shard sum {}",
                    manifest.total_records, sum
                ),
            });
        }
        manifest.root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| io_err(path, e))
    }
}

/// How `read_shards` treats malformed lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strictness {
    /// Abort with the shard path and line number. Default for training runs.
    Strict,
    /// Log, count, and continue. Default for refinement runs.
    SkipAndReport,
}

/// Streaming reader over all shards in manifest order, then line order.
pub struct ShardReader {
    shards: Vec<PathBuf>,
    strictness: Strictness,
    shard_idx: usize,
    line_no: usize,
    current: Option<BufReader<fs::File>>,
    skipped: usize,
}

impl ShardReader {
    /// Malformed lines skipped so far (SkipAndReport mode only).
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    fn open_next(&mut self) -> Result<bool, DatasetError> {
        if self.shard_idx >= self.shards.len() {
            return Ok(false);
        }
        let path = &self.shards[self.shard_idx];
        let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
        self.current = Some(BufReader::new(file));
        self.line_no = 0;
        Ok(true)
    }
}

impl Iterator for ShardReader {
    type Item = Result<Sample, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if self.current.is_none() {
                match self.open_next() {
                    Ok(true) => {}
                    Ok(false) => return None,
                    Err(e) => {
                        self.shard_idx = self.shards.len();
                        return Some(Err(e));
                    }
                }
            }
            let reader = self.current.as_mut().expect("reader open");
            let mut line = String::new();
            match reader.read_line(&mut line) {
                Ok(0) => {
                    self.current = None;
                    self.shard_idx += 1;
                    continue;
                }
                Ok(_) => {}
                Err(e) => {
                    let path = self.shards[self.shard_idx].clone();
                    self.shard_idx = self.shards.len();
                    return Some(Err(io_err(&path, e)));
                }
            }
            self.line_no += 1;
            let trimmed = line.trim_end_matches(['\n', '\r']);
            if trimmed.is_empty() {
                continue;
            }
            match serde_json::from_str::<Sample>(trimmed) {
                Ok(sample) => return Some(Ok(sample)),
                Err(e) => {
                    let path = self.shards[self.shard_idx].display().to_string();
                    let err = DatasetError::MalformedRecord {
                        path: path.clone(),
                        line: self.line_no,
                        detail: e.to_string(),
                    };
                    match self.strictness {
                        Strictness::Strict => {
                            self.shard_idx = self.shards.len();
                            return Some(Err(err));
                        }
                        Strictness::SkipAndReport => {
                            log::warn!("skipping malformed record: {err}");
                            self.skipped += 1;
                            continue;
                        }
                    }
                }
            }
        }
    }
}

/// Samples in shard order, then line order.
pub fn read_shards(manifest: &ShardManifest, strictness: Strictness) -> ShardReader {
    ShardReader {
        shards: manifest.shard_paths().collect(),
        strictness,
        shard_idx: 0,
        line_no: 0,
        current: None,
        skipped: 0,
    }
}

/// Convenience: collect the whole corpus.
pub fn read_all(
    manifest: &ShardManifest,
    strictness: Strictness,
) -> Result<Vec<Sample>, DatasetError> {
    read_shards(manifest, strictness).collect()
}

/// Writes samples to `shard-NNNNN.jsonl` files under `out_dir` plus a
/// `manifest.json`, and returns the manifest.
pub fn write_shards(
    samples: impl IntoIterator<Item = Sample>,
    out_dir: &Path,
    records_per_shard: usize,
) -> Result<ShardManifest, DatasetError> {
    if records_per_shard == 0 {
        return Err(DatasetError::ZeroShardSize);
    }
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut shards: Vec<ShardEntry> = Vec::new();
    let mut writer: Option<BufWriter<fs::File>> = None;
    let mut total = 0u64;
    for (i, sample) in samples.into_iter().enumerate() {
        if i % records_per_shard == 0 {
            if let Some(mut w) = writer.take() {
                w.flush().map_err(|e| io_err(out_dir, e))?;
            }
            let name = format!("shard-{:05}.jsonl", shards.len());
            let path = out_dir.join(&name);
            let file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
            writer = Some(BufWriter::new(file));
            shards.push(ShardEntry { path: name, records: 0 });
        }
        let w = writer.as_mut().expect("writer open");
        let line = serde_json::to_string(&sample).expect("sample serializes");
        w.write_all(line.as_bytes()).map_err(|e| io_err(out_dir, e))?;
        w.write_all(b"\n").map_err(|e| io_err(out_dir, e))?;
        shards.last_mut().expect("shard entry").records += 1;
        total += 1;
    }
    if let Some(mut w) = writer.take() {
        w.flush().map_err(|e| io_err(out_dir, e))?;
    }
    let manifest = ShardManifest {
        schema_version: SCHEMA_VERSION,
        shards,
        total_records: total,
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Token-length histogram: width-8 buckets over 0..512 plus one overflow
/// bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bucket_width: usize,
    pub buckets: Vec<u64>,
    pub total: u64,
}

impl Histogram {
    pub fn new() -> Self {
        Histogram { bucket_width: 8, buckets: vec![0; 512 / 8 + 1], total: 0 }
    }

    pub fn add(&mut self, token_len: usize) {
        let idx = (token_len / self.bucket_width).min(self.buckets.len() - 1);
        self.buckets[idx] += 1;
        self.total += 1;
    }
}

impl Default for Histogram {
    fn default() -> Self {
        Self::new()
    }
}

/// Corpus statistics: length distributions for captions and detailed
/// descriptions, tag frequencies, and the refined share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub n_samples: u64,
    pub n_refined: u64,
    pub refined_fraction: f64,
    pub mean_caption_len: f64,
    pub mean_detailed_len: f64,
    /// mean detailed length over mean caption length; None when unrefined.
    pub detailed_caption_ratio: Option<f64>,
    pub caption_token_lengths: Histogram,
    pub detailed_token_lengths: Histogram,
    pub tag_frequency_top: Vec<(String, u64)>,
    pub mean_pos_tags: f64,
    pub mean_neg_tags: f64,
}

/// Single-threaded exact recount over the corpus.
pub fn compute_stats(
    manifest: &ShardManifest,
    spec: &TokenizerSpec,
    top_n: usize,
) -> Result<StatsReport, DatasetError> {
    let mut caption_hist = Histogram::new();
    let mut detailed_hist = Histogram::new();
    let mut caption_tokens = 0u64;
    let mut detailed_tokens = 0u64;
    let mut n_samples = 0u64;
    let mut n_refined = 0u64;
    let mut pos_tag_count = 0u64;
    let mut neg_tag_count = 0u64;
    let mut tag_counts: HashMap<String, u64> = HashMap::new();
    for sample in read_shards(manifest, Strictness::Strict) {
        let sample = sample?;
        n_samples += 1;
        let clen = tokenize(spec, &sample.raw_caption).len();
        caption_hist.add(clen);
        caption_tokens += clen as u64;
        if let Some(ds) = &sample.description_set {
            n_refined += 1;
            let dlen = tokenize(spec, &ds.detailed).len();
            detailed_hist.add(dlen);
            detailed_tokens += dlen as u64;
            pos_tag_count += ds.pos_tags.len() as u64;
            neg_tag_count += ds.neg_tags.len() as u64;
            for tag in &ds.pos_tags {
                let n = normalize_tag(tag);
                if !n.is_empty() {
                    *tag_counts.entry(n).or_insert(0) += 1;
                }
            }
        }
    }
    let mut top: Vec<(String, u64)> = tag_counts.into_iter().collect();
    top.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    top.truncate(top_n);
    let mean_caption_len =
        if n_samples > 0 { caption_tokens as f64 / n_samples as f64 } else { 0.0 };
    let mean_detailed_len =
        if n_refined > 0 { detailed_tokens as f64 / n_refined as f64 } else { 0.0 };
    Ok(StatsReport {
        n_samples,
        n_refined,
        refined_fraction: if n_samples > 0 { n_refined as f64 / n_samples as f64 } else { 0.0 },
        mean_caption_len,
        mean_detailed_len,
        detailed_caption_ratio: if n_refined > 0 && mean_caption_len > 0.0 {
            Some(mean_detailed_len / mean_caption_len)
        } else {
            None
        },
        caption_token_lengths: caption_hist,
        detailed_token_lengths: detailed_hist,
        tag_frequency_top: top,
        mean_pos_tags: if n_refined > 0 { pos_tag_count as f64 / n_refined as f64 } else { 0.0 },
        mean_neg_tags: if n_refined > 0 { neg_tag_count as f64 / n_refined as f64 } else { 0.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::DescriptionSet;
    use proptest::prelude::*;

    fn sample(i: usize, refined: bool) -> Sample {
        Sample {
            id: format!("s{i}"),
            image_features: vec![i as f64, 0.5],
            raw_caption: format!("caption number {i}"),
            description_set: refined.then(|| DescriptionSet {
                detailed: format!(
                    "a long detailed description of item {i} with many extra words here."
                ),
                negative: format!("a wrong description of item {i}."),
                pos_tags: vec!["cat".into(), format!("tag{}", i % 3)],
                neg_tags: vec!["dog-like".into()],
            }),
        }
    }

    #[test]
    fn shard_count_follows_integer_division() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<Sample> = (0..5).map(|i| sample(i, false)).collect();
        let manifest = write_shards(samples, dir.path(), 2).unwrap();
        assert_eq!(manifest.shards.len(), 3);
        assert_eq!(
            manifest.shards.iter().map(|s| s.records).collect::<Vec<_>>(),
            vec![2, 2, 1]
        );
        assert_eq!(manifest.total_records, 5);
    }

    #[test]
    fn empty_input_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_shards(Vec::new(), dir.path(), 4).unwrap();
        assert_eq!(manifest.shards.len(), 0);
        assert_eq!(manifest.total_records, 0);
        let back = ShardManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(read_all(&back, Strictness::Strict).unwrap().len(), 0);
    }

    #[test]
    fn write_then_read_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<Sample> = (0..7).map(|i| sample(i, i % 2 == 0)).collect();
        let manifest = write_shards(samples.clone(), dir.path(), 3).unwrap();
        let back = read_all(&manifest, Strictness::Strict).unwrap();
        assert_eq!(back, samples);
    }

    #[test]
    fn writing_twice_is_byte_identical() {
        let samples: Vec<Sample> = (0..5).map(|i| sample(i, true)).collect();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        write_shards(samples.clone(), dir_a.path(), 2).unwrap();
        write_shards(samples, dir_b.path(), 2).unwrap();
        for name in ["shard-00000.jsonl", "shard-00001.jsonl", "shard-00002.jsonl"] {
            let a = fs::read(dir_a.path().join(name)).unwrap();
            let b = fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
    }

    #[test]
    fn strict_mode_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_shards((0..3).map(|i| sample(i, false)), dir.path(), 8).unwrap();
        let shard = dir.path().join("shard-00000.jsonl");
        let mut text = fs::read_to_string(&shard).unwrap();
        text.push_str("{\"id\": \"truncated\"\n");
        fs::write(&shard, text).unwrap();

        let err = read_all(&manifest, Strictness::Strict).unwrap_err();
        match err {
            DatasetError::MalformedRecord { line, .. } => assert_eq!(line, 4),
            other => panic!("unexpected error {other:?}"),
        }

        let mut reader = read_shards(&manifest, Strictness::SkipAndReport);
        let good: Vec<_> = reader.by_ref().collect::<Result<_, _>>().unwrap();
        assert_eq!(good.len(), 3);
        assert_eq!(reader.skipped(), 1);
    }

    #[test]
    fn missing_shard_is_fatal_in_both_modes() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_shards((0..2).map(|i| sample(i, false)), dir.path(), 1).unwrap();
        fs::remove_file(dir.path().join("shard-00001.jsonl")).unwrap();
        for mode in [Strictness::Strict, Strictness::SkipAndReport] {
            let result = read_all(&manifest, mode);
            assert!(matches!(result, Err(DatasetError::Io { .. })));
        }
    }

    #[test]
    fn stats_means_and_tags() {
        let dir = tempfile::tempdir().unwrap();
        let a = Sample {
            id: "a".into(),
            image_features: vec![0.0],
            raw_caption: "one two three".into(),
            description_set: None,
        };
        let b = Sample {
            id: "b".into(),
            image_features: vec![0.0],
            raw_caption: "one two three four five".into(),
            description_set: None,
        };
        let manifest = write_shards(vec![a, b], dir.path(), 10).unwrap();
        let spec = TokenizerSpec::from_texts(["one two three four five"], 77);
        let report = compute_stats(&manifest, &spec, 5).unwrap();
        assert_eq!(report.n_samples, 2);
        assert!((report.mean_caption_len - 4.0).abs() < 1e-12);
        assert_eq!(report.refined_fraction, 0.0);
        assert_eq!(report.caption_token_lengths.total, 2);

        // Tag counting: {cat:3, dog:2, car:1}, top 2.
        let dir = tempfile::tempdir().unwrap();
        let mk = |id: &str, tags: &[&str]| Sample {
            id: id.into(),
            image_features: vec![0.0],
            raw_caption: "x".into(),
            description_set: Some(DescriptionSet {
                detailed: "a detailed text.".into(),
                negative: "a negative text.".into(),
                pos_tags: tags.iter().map(|t| t.to_string()).collect(),
                neg_tags: vec![],
            }),
        };
        let samples = vec![
            mk("1", &["cat", "dog"]),
            mk("2", &["cat", "dog"]),
            mk("3", &["cat", "car"]),
        ];
        let manifest = write_shards(samples, dir.path(), 10).unwrap();
        let report = compute_stats(&manifest, &spec, 2).unwrap();
        assert_eq!(
            report.tag_frequency_top,
            vec![("cat".to_string(), 3), ("dog".to_string(), 2)]
        );
    }

    #[test]
    fn four_x_ratio_corpus_reports_four() {
        // Every detailed description has exactly 4x the caption tokens.
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<Sample> = (0..10)
            .map(|i| {
                let base = 3 + (i % 4);
                let caption = vec!["word"; base].join(" ");
                let detailed = format!("{}.", vec!["word"; base * 4].join(" "));
                Sample {
                    id: format!("r{i}"),
                    image_features: vec![0.0],
                    raw_caption: caption,
                    description_set: Some(DescriptionSet {
                        detailed,
                        negative: "other words here.".into(),
                        pos_tags: vec!["word".into()],
                        neg_tags: vec![],
                    }),
                }
            })
            .collect();
        let manifest = write_shards(samples, dir.path(), 100).unwrap();
        let spec = TokenizerSpec::from_texts(["word"], 77);
        let report = compute_stats(&manifest, &spec, 1).unwrap();
        let ratio = report.detailed_caption_ratio.unwrap();
        assert!((ratio - 4.0).abs() < 1e-12, "ratio {ratio}");
        assert_eq!(report.detailed_token_lengths.total, report.n_refined);
    }

    proptest! {
        #[test]
        fn round_trip_arbitrary_corpora(
            n in 0usize..40,
            per_shard in 1usize..7,
            refined_mask in proptest::collection::vec(any::<bool>(), 40),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let samples: Vec<Sample> =
                (0..n).map(|i| sample(i, refined_mask[i])).collect();
            let manifest = write_shards(samples.clone(), dir.path(), per_shard).unwrap();
            prop_assert_eq!(manifest.total_records as usize, n);
            let back = read_all(&manifest, Strictness::Strict).unwrap();
            prop_assert_eq!(back, samples);
        }
    }
}
