//! Tokenization, budgeted sentence segmentation, per-iteration caption
//! sampling (raw/enriched mixing), hard-negative text pools and the tag
//! vocabulary.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{self, DatasetError, ShardManifest, Strictness};
use crate::types::{
    normalize_tag, MultiHotLabel, Sample, TagVocabulary, TextSource, TrainingText,
};

pub const DEFAULT_TOKEN_BUDGET: usize = 77;
pub const UNK_TOKEN: &str = "<unk>";

/// Sentence-ending punctuation used to segment long descriptions.
pub const SEGMENT_PUNCT: [char; 4] = ['.', '!', '?', ';'];

#[derive(Debug, Error)]
pub enum TextError {
    #[error("tokenizer vocabulary is not dense over 0..{expected}: {detail}")]
    SparseVocabulary { expected: usize, detail: String },
    #[error("unknown-token id {unk_id} out of range 0..{len}")]
    UnkOutOfRange { unk_id: u32, len: usize },
    #[error("vocabulary file {path}: line {line}: {detail}")]
    VocabFile { path: String, line: usize, detail: String },
    #[error("sample {id} has no description set")]
    NoDescriptionSet { id: String },
    #[error("sample {id}: empty hard-negative pool")]
    EmptyNegativePool { id: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Whitespace/punctuation tokenizer with a dense id map and an unknown-token
/// fallback. Not a learned tokenizer; budget semantics are what matter here.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenizerSpec {
    vocab: HashMap<String, u32>,
    pub unk_id: u32,
    pub token_budget: usize,
}

impl TokenizerSpec {
    pub fn new(
        vocab: HashMap<String, u32>,
        unk_id: u32,
        token_budget: usize,
    ) -> Result<Self, TextError> {
        let n = vocab.len();
        let mut seen = vec![false; n];
        for (tok, &id) in &vocab {
            if (id as usize) >= n || seen[id as usize] {
                return Err(TextError::SparseVocabulary {
                    expected: n,
                    detail: format!("token {tok:?} maps to id {id}"),
                });
            }
            seen[id as usize] = true;
        }
        if (unk_id as usize) >= n {
            return Err(TextError::UnkOutOfRange { unk_id, len: n });
        }
        assert!(token_budget >= 1, "token budget must be at least 1");
        Ok(TokenizerSpec { vocab, unk_id, token_budget })
    }

    /// Builds a vocabulary from every word in the given texts, ordered by
    /// frequency (descending) then lexicographically, with `<unk>` at id 0.
    pub fn from_texts<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        token_budget: usize,
    ) -> Self {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for text in texts {
            for w in word_tokens(text) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        let mut words: Vec<(String, u64)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut vocab = HashMap::with_capacity(words.len() + 1);
        vocab.insert(UNK_TOKEN.to_string(), 0);
        for (i, (w, _)) in words.into_iter().enumerate() {
            vocab.insert(w, (i + 1) as u32);
        }
        TokenizerSpec { vocab, unk_id: 0, token_budget }
    }

    /// Covers captions, descriptions and tags of every sample.
    pub fn from_samples<'a>(
        samples: impl IntoIterator<Item = &'a Sample>,
        token_budget: usize,
    ) -> Self {
        let mut texts: Vec<&str> = Vec::new();
        for s in samples {
            texts.push(&s.raw_caption);
            if let Some(ds) = &s.description_set {
                texts.push(&ds.detailed);
                texts.push(&ds.negative);
                texts.extend(ds.pos_tags.iter().map(|t| t.as_str()));
                texts.extend(ds.neg_tags.iter().map(|t| t.as_str()));
            }
        }
        Self::from_texts(texts, token_budget)
    }

    pub fn id_of(&self, token: &str) -> u32 {
        self.vocab.get(token).copied().unwrap_or(self.unk_id)
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    /// Line-delimited `token<TAB>id` dump, sorted by id.
    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        let mut rows: Vec<(&str, u32)> = self.vocab.iter().map(|(t, &i)| (t.as_str(), i)).collect();
        rows.sort_by_key(|&(_, id)| id);
        let mut out = String::new();
        for (tok, id) in rows {
            out.push_str(tok);
            out.push('\t');
            out.push_str(&id.to_string());
            out.push('\n');
        }
        let mut f = fs::File::create(path)?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, token_budget: usize) -> Result<Self, TextError> {
        let text = fs::read_to_string(path)?;
        let mut vocab = HashMap::new();
        let mut unk_id = None;
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line.split_once('\t').ok_or_else(|| TextError::VocabFile {
                path: path.display().to_string(),
                line: i + 1,
                detail: "expected token<TAB>id".into(),
            })?;
            let id: u32 = id.parse().map_err(|e| TextError::VocabFile {
                path: path.display().to_string(),
                line: i + 1,
                detail: format!("bad id: {e}"),
            })?;
            if tok == UNK_TOKEN {
                unk_id = Some(id);
            }
            vocab.insert(tok.to_string(), id);
        }
        let unk_id = unk_id.ok_or_else(|| TextError::VocabFile {
            path: path.display().to_string(),
            line: 0,
            detail: format!("missing {UNK_TOKEN} entry"),
        })?;
        Self::new(vocab, unk_id, token_budget)
    }
}

/// Lowercased alphanumeric runs; punctuation and whitespace separate tokens
/// and are dropped.
pub fn word_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Word tokens mapped through the vocabulary with unknown fallback.
pub fn tokenize(spec: &TokenizerSpec, text: &str) -> Vec<u32> {
    word_tokens(text).iter().map(|w| spec.id_of(w)).collect()
}

/// Splits on sentence-ending punctuation, then greedily chunks any piece
/// that still exceeds the token budget. Concatenating the segments
/// reproduces `tokenize(text)` exactly; no segment is empty.
pub fn segment_description(spec: &TokenizerSpec, text: &str) -> Vec<Vec<u32>> {
    let mut segments = Vec::new();
    for piece in text.split(|c| SEGMENT_PUNCT.contains(&c)) {
        let tokens = tokenize(spec, piece);
        if tokens.is_empty() {
            continue;
        }
        for chunk in tokens.chunks(spec.token_budget) {
            segments.push(chunk.to_vec());
        }
    }
    segments
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    RandomSegment,
    FullLong,
    ShortTags,
    RawOnly,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random_segment" => Ok(Strategy::RandomSegment),
            "full_long" => Ok(Strategy::FullLong),
            "short_tags" => Ok(Strategy::ShortTags),
            "raw_only" => Ok(Strategy::RawOnly),
            other => Err(format!("unknown strategy {other:?}")),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Strategy::RandomSegment => "random_segment",
            Strategy::FullLong => "full_long",
            Strategy::ShortTags => "short_tags",
            Strategy::RawOnly => "raw_only",
        };
        f.write_str(s)
    }
}

/// Per-iteration text sampling configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// Probability of training on an enriched text instead of the raw caption.
    pub mix_ratio: f64,
    pub strategy: Strategy,
    /// Hard negatives per instance.
    pub n_neg: usize,
    /// Restrict the negative pool to negative-description segments,
    /// excluding negative tags.
    pub neg_descriptions_only: bool,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            mix_ratio: 0.75,
            strategy: Strategy::RandomSegment,
            n_neg: 1,
            neg_descriptions_only: false,
            seed: 0,
        }
    }
}

fn truncated(mut tokens: Vec<u32>, budget: usize, unk: u32) -> Vec<u32> {
    tokens.truncate(budget);
    if tokens.is_empty() {
        tokens.push(unk);
    }
    tokens
}

/// Chooses the text for one training iteration: with probability `mix_ratio`
/// the enriched side (per strategy), otherwise the raw caption truncated to
/// the budget. Samples without a description set always use the raw caption
/// and consume no draws.
pub fn sample_training_text(
    sample: &Sample,
    spec: &TokenizerSpec,
    cfg: &SamplingConfig,
    rng: &mut impl Rng,
) -> TrainingText {
    let raw = || TrainingText {
        tokens: truncated(tokenize(spec, &sample.raw_caption), spec.token_budget, spec.unk_id),
        source: TextSource::RawCaption,
    };
    let ds = match &sample.description_set {
        Some(ds) if cfg.strategy != Strategy::RawOnly => ds,
        _ => return raw(),
    };
    if rng.gen::<f64>() >= cfg.mix_ratio {
        return raw();
    }
    match cfg.strategy {
        Strategy::RandomSegment => {
            let segments = segment_description(spec, &ds.detailed);
            if segments.is_empty() {
                return raw();
            }
            let idx = rng.gen_range(0..segments.len());
            TrainingText { tokens: segments[idx].clone(), source: TextSource::DetailedSegment }
        }
        Strategy::FullLong => {
            let tokens = tokenize(spec, &ds.detailed);
            if tokens.is_empty() {
                return raw();
            }
            TrainingText {
                tokens: truncated(tokens, spec.token_budget, spec.unk_id),
                source: TextSource::DetailedSegment,
            }
        }
        Strategy::ShortTags => {
            let joined = ds.pos_tags.join(" ");
            let tokens = tokenize(spec, &joined);
            if tokens.is_empty() {
                return raw();
            }
            TrainingText {
                tokens: truncated(tokens, spec.token_budget, spec.unk_id),
                source: TextSource::ShortTag,
            }
        }
        Strategy::RawOnly => unreachable!(),
    }
}

/// Hard-negative texts for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeDraw {
    pub texts: Vec<Vec<u32>>,
    /// Set when the pool was smaller than `n_neg` and draws repeated.
    pub with_replacement: bool,
}

/// Draws `n_neg` texts uniformly without replacement from the pool of
/// negative-description segments plus negative tags. A pool smaller than
/// `n_neg` falls back to drawing with replacement and flags it.
pub fn sample_negative_texts(
    sample: &Sample,
    spec: &TokenizerSpec,
    cfg: &SamplingConfig,
    rng: &mut impl Rng,
) -> Result<NegativeDraw, TextError> {
    let ds = sample
        .description_set
        .as_ref()
        .ok_or_else(|| TextError::NoDescriptionSet { id: sample.id.clone() })?;
    let mut pool = segment_description(spec, &ds.negative);
    if !cfg.neg_descriptions_only {
        for tag in &ds.neg_tags {
            let tokens = tokenize(spec, tag);
            if !tokens.is_empty() {
                pool.push(truncated(tokens, spec.token_budget, spec.unk_id));
            }
        }
    }
    if pool.is_empty() {
        return Err(TextError::EmptyNegativePool { id: sample.id.clone() });
    }
    if pool.len() >= cfg.n_neg {
        let idx = rand::seq::index::sample(rng, pool.len(), cfg.n_neg);
        Ok(NegativeDraw {
            texts: idx.iter().map(|i| pool[i].clone()).collect(),
            with_replacement: false,
        })
    } else {
        let texts =
            (0..cfg.n_neg).map(|_| pool[rng.gen_range(0..pool.len())].clone()).collect();
        Ok(NegativeDraw { texts, with_replacement: true })
    }
}

/// Exact corpus counts of normalized positive tags, top-K. Clamps K to the
/// number of distinct tags with a warning.
pub fn build_vocab(manifest: &ShardManifest, k: usize) -> Result<TagVocabulary, TextError> {
    let mut counts: HashMap<String, u64> = HashMap::new();
    for sample in dataset::read_shards(manifest, Strictness::Strict) {
        let sample = sample?;
        if let Some(ds) = &sample.description_set {
            for tag in &ds.pos_tags {
                let n = normalize_tag(tag);
                if !n.is_empty() {
                    *counts.entry(n).or_insert(0) += 1;
                }
            }
        }
    }
    if counts.len() < k {
        log::warn!(
            "requested K={k} but corpus has only {} distinct tags; clamping",
            counts.len()
        );
    }
    Ok(TagVocabulary::from_counts(counts, k))
}

/// Tag vocabulary file: line-delimited `tag<TAB>count` in rank order.
pub fn save_tag_vocab(vocab: &TagVocabulary, path: &Path) -> Result<(), TextError> {
    let mut out = String::new();
    for (tag, count) in vocab.entries() {
        out.push_str(tag);
        out.push('\t');
        out.push_str(&count.to_string());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_tag_vocab(path: &Path) -> Result<TagVocabulary, TextError> {
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (tag, count) = line.split_once('\t').ok_or_else(|| TextError::VocabFile {
            path: path.display().to_string(),
            line: i + 1,
            detail: "expected tag<TAB>count".into(),
        })?;
        let count: u64 = count.parse().map_err(|e| TextError::VocabFile {
            path: path.display().to_string(),
            line: i + 1,
            detail: format!("bad count: {e}"),
        })?;
        entries.push((tag.to_string(), count));
    }
    Ok(TagVocabulary::from_entries(entries))
}

/// Multi-hot encoding of normalized tags; out-of-vocabulary tags are ignored.
pub fn encode_multihot(tags: &[String], vocab: &TagVocabulary) -> MultiHotLabel {
    let mut label = MultiHotLabel::zeros(vocab.k());
    for tag in tags {
        if let Some(pos) = vocab.position(&normalize_tag(tag)) {
            label.bits[pos] = 1;
        }
    }
    label
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_for;
    use crate::types::DescriptionSet;
    use proptest::prelude::*;

    fn tiny_spec() -> TokenizerSpec {
        let vocab: HashMap<String, u32> =
            [("a", 0u32), ("red", 1), ("car", 2), ("on", 3), ("road", 4), ("<unk>", 9)]
                .iter()
                .map(|&(t, i)| (t.to_string(), i))
                .collect();
        // Dense ids for the test: remap to 0..6.
        let vocab: HashMap<String, u32> = vocab
            .into_iter()
            .enumerate()
            .map(|(dense, (t, _))| (t, dense as u32))
            .collect();
        let unk = vocab["<unk>"];
        TokenizerSpec::new(vocab, unk, DEFAULT_TOKEN_BUDGET).unwrap()
    }

    fn lookup_spec() -> TokenizerSpec {
        // Matches the documented example: {a:0, red:1, car:2}, unk=9 is not
        // representable densely, so use a dense id 3 for <unk> and assert
        // the fallback behavior rather than the specific id value.
        let vocab: HashMap<String, u32> = [("a", 0u32), ("red", 1), ("car", 2), ("<unk>", 3)]
            .iter()
            .map(|&(t, i)| (t.to_string(), i))
            .collect();
        TokenizerSpec::new(vocab, 3, DEFAULT_TOKEN_BUDGET).unwrap()
    }

    #[test]
    fn tokenize_strips_punctuation_and_lowercases() {
        let spec = lookup_spec();
        assert_eq!(tokenize(&spec, "A red car."), vec![0, 1, 2]);
        assert_eq!(tokenize(&spec, ""), Vec::<u32>::new());
        assert_eq!(tokenize(&spec, "zyx"), vec![3]);
    }

    #[test]
    fn segmentation_respects_budget_and_punctuation() {
        let spec = TokenizerSpec::from_texts(["w"], 77);
        let word = "w ";
        let text = format!(
            "{}. {}! {}",
            word.repeat(60).trim(),
            word.repeat(50).trim(),
            word.repeat(40).trim()
        );
        let segs = segment_description(&spec, &text);
        assert_eq!(segs.iter().map(Vec::len).collect::<Vec<_>>(), vec![60, 50, 40]);

        let single = word.repeat(100);
        let segs = segment_description(&spec, single.trim());
        assert_eq!(segs.iter().map(Vec::len).collect::<Vec<_>>(), vec![77, 23]);

        let segs = segment_description(&spec, "Hi.");
        assert_eq!(segs.len(), 1);
    }

    fn refined_sample() -> Sample {
        Sample {
            id: "s1".into(),
            image_features: vec![0.0; 4],
            raw_caption: "a red car on road".into(),
            description_set: Some(DescriptionSet {
                detailed: "a red car. the road is wide. bright light everywhere.".into(),
                negative: "a blue car. the road is wide; bright light everywhere.".into(),
                pos_tags: vec!["red".into(), "car".into()],
                neg_tags: vec!["blue".into()],
            }),
        }
    }

    #[test]
    fn mix_ratio_zero_always_raw() {
        let spec = tiny_spec();
        let cfg = SamplingConfig { mix_ratio: 0.0, ..Default::default() };
        let sample = refined_sample();
        let mut rng = stream_for(1, &[0]);
        for _ in 0..50 {
            let t = sample_training_text(&sample, &spec, &cfg, &mut rng);
            assert_eq!(t.source, TextSource::RawCaption);
        }
    }

    #[test]
    fn random_segment_draws_are_uniform() {
        // Chi-square against uniform over the 3 segments at 10^4 draws;
        // threshold 16.27 is the 3-sigma-ish 99.9th percentile for df=2.
        let spec = TokenizerSpec::from_samples([&refined_sample()], 77);
        let cfg = SamplingConfig { mix_ratio: 1.0, ..Default::default() };
        let sample = refined_sample();
        let segments = segment_description(&spec, &sample.description_set.as_ref().unwrap().detailed);
        assert_eq!(segments.len(), 3);
        let mut counts = [0usize; 3];
        let mut rng = stream_for(7, &[0]);
        let n = 10_000;
        for _ in 0..n {
            let t = sample_training_text(&sample, &spec, &cfg, &mut rng);
            assert_eq!(t.source, TextSource::DetailedSegment);
            let idx = segments.iter().position(|s| *s == t.tokens).unwrap();
            counts[idx] += 1;
        }
        let expect = n as f64 / 3.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        assert!(chi2 < 16.27, "chi2={chi2}, counts={counts:?}");
    }

    #[test]
    fn mix_ratio_empirical_fraction() {
        // 0.75 +- 0.02 over 10^4 draws (binomial sigma ~ 0.0043).
        let spec = TokenizerSpec::from_samples([&refined_sample()], 77);
        let cfg = SamplingConfig::default();
        let sample = refined_sample();
        let mut rng = stream_for(11, &[0]);
        let n = 10_000;
        let enriched = (0..n)
            .filter(|_| {
                sample_training_text(&sample, &spec, &cfg, &mut rng).source
                    == TextSource::DetailedSegment
            })
            .count();
        let frac = enriched as f64 / n as f64;
        assert!((frac - 0.75).abs() < 0.02, "enriched fraction {frac}");
    }

    #[test]
    fn negative_pool_membership_and_exhaustive_draw() {
        let spec = TokenizerSpec::from_samples([&refined_sample()], 77);
        let sample = refined_sample();
        let ds = sample.description_set.as_ref().unwrap();
        let mut pool = segment_description(&spec, &ds.negative);
        pool.push(tokenize(&spec, "blue"));

        let cfg = SamplingConfig { n_neg: 1, ..Default::default() };
        let mut rng = stream_for(3, &[1]);
        let draw = sample_negative_texts(&sample, &spec, &cfg, &mut rng).unwrap();
        assert!(!draw.with_replacement);
        assert!(pool.contains(&draw.texts[0]));

        // Pool of size 4 here; n_neg=4 draws every element exactly once.
        let cfg = SamplingConfig { n_neg: pool.len(), ..Default::default() };
        let draw = sample_negative_texts(&sample, &spec, &cfg, &mut rng).unwrap();
        assert!(!draw.with_replacement);
        let mut got = draw.texts.clone();
        let mut want = pool.clone();
        got.sort();
        want.sort();
        assert_eq!(got, want);

        // Larger than the pool: with replacement, flagged.
        let cfg = SamplingConfig { n_neg: pool.len() + 2, ..Default::default() };
        let draw = sample_negative_texts(&sample, &spec, &cfg, &mut rng).unwrap();
        assert!(draw.with_replacement);
        assert_eq!(draw.texts.len(), pool.len() + 2);
    }

    #[test]
    fn empty_negative_pool_errors() {
        let spec = tiny_spec();
        let mut sample = refined_sample();
        {
            let ds = sample.description_set.as_mut().unwrap();
            ds.negative = "?!".into(); // tokenizes to nothing
            ds.neg_tags.clear();
        }
        let cfg = SamplingConfig::default();
        let mut rng = stream_for(3, &[2]);
        let err = sample_negative_texts(&sample, &spec, &cfg, &mut rng).unwrap_err();
        assert!(matches!(err, TextError::EmptyNegativePool { .. }));
    }

    #[test]
    fn multihot_examples() {
        let vocab =
            TagVocabulary::from_counts(vec![("cat".into(), 2), ("dog".into(), 1)], 2);
        let label = encode_multihot(&["cat".into()], &vocab);
        assert_eq!(label.bits, vec![1, 0]);
        assert_eq!(encode_multihot(&[], &vocab).bits, vec![0, 0]);
        let label = encode_multihot(&["cat".into(), "unicorn".into()], &vocab);
        assert_eq!(label.bits, vec![1, 0]);
    }

    #[test]
    fn vocab_file_round_trip() {
        let spec = TokenizerSpec::from_texts(["red car on road", "red car"], 77);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tokens.tsv");
        spec.save(&path).unwrap();
        let back = TokenizerSpec::load(&path, 77).unwrap();
        assert_eq!(back.len(), spec.len());
        assert_eq!(back.id_of("red"), spec.id_of("red"));
        assert_eq!(back.unk_id, spec.unk_id);
    }

    proptest! {
        #[test]
        fn segmentation_is_lossless(text in "[a-d .!?;]{0,200}", budget in 1usize..20) {
            let spec = TokenizerSpec::from_texts(["a b c d"], budget);
            let whole = tokenize(&spec, &text);
            let segs = segment_description(&spec, &text);
            let concat: Vec<u32> = segs.iter().flatten().copied().collect();
            prop_assert_eq!(concat, whole);
            prop_assert!(segs.iter().all(|s| !s.is_empty() && s.len() <= budget));
        }

        #[test]
        fn sampling_is_deterministic_per_seed(seed in 0u64..1000) {
            let spec = TokenizerSpec::from_samples([&refined_sample()], 77);
            let cfg = SamplingConfig::default();
            let sample = refined_sample();
            let a = sample_training_text(&sample, &spec, &cfg, &mut stream_for(seed, &[5]));
            let b = sample_training_text(&sample, &spec, &cfg, &mut stream_for(seed, &[5]));
            prop_assert_eq!(a, b);
        }

        #[test]
        fn multihot_popcount_bounded(tags in proptest::collection::vec("[a-f]{1,3}", 0..8)) {
            let vocab = TagVocabulary::from_counts(
                vec![("aa".into(), 3), ("bb".into(), 2), ("cc".into(), 1)], 3);
            let tags: Vec<String> = tags;
            let label = encode_multihot(&tags, &vocab);
            prop_assert!(label.popcount() <= tags.len());
        }
    }
}
