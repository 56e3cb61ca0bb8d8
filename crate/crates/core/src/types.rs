//! Shared domain types: samples, description sets, tag vocabularies and the
//! validation rules every downstream stage assumes.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

/// One image-text record. Images are precomputed feature vectors of a fixed
/// run-level dimension; pixels are out of scope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub image_features: Vec<f64>,
    pub raw_caption: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub description_set: Option<DescriptionSet>,
}

/// The four-component refinement output: long positive and negative
/// descriptions plus short positive and negative tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionSet {
    pub detailed: String,
    pub negative: String,
    pub pos_tags: Vec<String>,
    pub neg_tags: Vec<String>,
}

/// Canonical tag form: lowercase, trimmed, internal whitespace collapsed.
/// Applied before any dedup or counting.
pub fn normalize_tag(tag: &str) -> String {
    let mut out = String::with_capacity(tag.len());
    let mut pending_space = false;
    for part in tag.split_whitespace() {
        if pending_space {
            out.push(' ');
        }
        for c in part.chars() {
            out.extend(c.to_lowercase());
        }
        pending_space = true;
    }
    out
}

/// Normalize then dedup, preserving first-occurrence order.
pub fn normalize_tags(tags: &[String]) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for t in tags {
        let n = normalize_tag(t);
        if !n.is_empty() && seen.insert(n.clone()) {
            out.push(n);
        }
    }
    out
}

/// A single invariant violation; `field` names the offending field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl DescriptionSet {
    /// Collects invariant violations: non-empty descriptions, canonical
    /// non-duplicate tags, disjoint positive/negative tag sets.
    pub fn violations(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        if self.detailed.trim().is_empty() {
            v.push(Violation { field: "detailed", message: "empty detailed description".into() });
        }
        if self.negative.trim().is_empty() {
            v.push(Violation { field: "negative", message: "empty negative description".into() });
        }
        check_tags(&self.pos_tags, "pos_tags", &mut v);
        check_tags(&self.neg_tags, "neg_tags", &mut v);
        let pos: HashSet<_> = self.pos_tags.iter().map(|t| normalize_tag(t)).collect();
        for t in &self.neg_tags {
            if pos.contains(&normalize_tag(t)) {
                v.push(Violation {
                    field: "neg_tags",
                    message: format!("tag {t:?} appears in both pos_tags and neg_tags"),
                });
            }
        }
        v
    }
}

fn check_tags(tags: &[String], field: &'static str, v: &mut Vec<Violation>) {
    let mut seen = HashSet::new();
    for t in tags {
        if t.is_empty() {
            v.push(Violation { field, message: "empty tag".into() });
            continue;
        }
        if *t != normalize_tag(t) {
            v.push(Violation { field, message: format!("tag {t:?} is not in canonical form") });
        }
        if !seen.insert(normalize_tag(t)) {
            v.push(Violation { field, message: format!("duplicate tag {t:?}") });
        }
    }
}

/// Checks every `Sample` invariant for feature dimension `d_in`.
/// Violations are data, not failures: the result lists them all.
pub fn validate_sample(s: &Sample, d_in: usize) -> Vec<Violation> {
    let mut v = Vec::new();
    if s.id.trim().is_empty() {
        v.push(Violation { field: "id", message: "empty id".into() });
    }
    if s.image_features.len() != d_in {
        v.push(Violation {
            field: "image_features",
            message: format!("expected {} entries, got {}", d_in, s.image_features.len()),
        });
    }
    if !crate::linalg::all_finite(&s.image_features) {
        v.push(Violation { field: "image_features", message: "non-finite entry".into() });
    }
    if s.raw_caption.trim().is_empty() {
        v.push(Violation { field: "raw_caption", message: "empty caption".into() });
    }
    if let Some(ds) = &s.description_set {
        v.extend(ds.violations());
    }
    v
}

/// Top-K tag vocabulary, frequency-descending with lexicographic tie-break.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagVocabulary {
    entries: Vec<(String, u64)>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl TagVocabulary {
    /// Builds from raw counts, keeping the top `k` (clamped to the number of
    /// distinct tags by the caller's contract).
    pub fn from_counts(counts: impl IntoIterator<Item = (String, u64)>, k: usize) -> Self {
        let mut entries: Vec<(String, u64)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        entries.truncate(k);
        Self::from_entries(entries)
    }

    pub fn from_entries(entries: Vec<(String, u64)>) -> Self {
        let index = entries.iter().enumerate().map(|(i, (t, _))| (t.clone(), i)).collect();
        TagVocabulary { entries, index }
    }

    pub fn k(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[(String, u64)] {
        &self.entries
    }

    pub fn position(&self, normalized_tag: &str) -> Option<usize> {
        self.index.get(normalized_tag).copied()
    }

    /// Rebuild the index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.entries.iter().enumerate().map(|(i, (t, _))| (t.clone(), i)).collect();
    }
}

/// Multi-hot tag label of vocabulary length K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiHotLabel {
    pub bits: Vec<u8>,
}

impl MultiHotLabel {
    pub fn zeros(k: usize) -> Self {
        MultiHotLabel { bits: vec![0; k] }
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }
}

/// Where a training text came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextSource {
    RawCaption,
    DetailedSegment,
    ShortTag,
}

/// A tokenized per-iteration caption choice, at most `token_budget` long.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingText {
    pub tokens: Vec<u32>,
    pub source: TextSource,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn well_formed(d_in: usize) -> Sample {
        Sample {
            id: "s0".into(),
            image_features: vec![0.5; d_in],
            raw_caption: "a red car".into(),
            description_set: Some(DescriptionSet {
                detailed: "a long description of a red car on a road".into(),
                negative: "a long description of a blue car on a road".into(),
                pos_tags: vec!["red".into(), "car".into()],
                neg_tags: vec!["blue".into()],
            }),
        }
    }

    #[test]
    fn accepts_well_formed_sample() {
        assert!(validate_sample(&well_formed(16), 16).is_empty());
    }

    #[test]
    fn rejects_empty_caption() {
        let mut s = well_formed(16);
        s.raw_caption = "   ".into();
        let v = validate_sample(&s, 16);
        assert!(v.iter().any(|x| x.field == "raw_caption"), "{v:?}");
    }

    #[test]
    fn rejects_nan_feature() {
        let mut s = well_formed(16);
        s.image_features[3] = f64::NAN;
        let v = validate_sample(&s, 16);
        assert!(v.iter().any(|x| x.field == "image_features"), "{v:?}");
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let s = well_formed(16);
        let v = validate_sample(&s, 32);
        assert!(v.iter().any(|x| x.field == "image_features"));
    }

    #[test]
    fn rejects_overlapping_tags() {
        let mut s = well_formed(8);
        s.description_set.as_mut().unwrap().neg_tags.push("red".into());
        let v = validate_sample(&s, 8);
        assert!(v.iter().any(|x| x.field == "neg_tags"));
    }

    #[test]
    fn tag_normalization_rules() {
        assert_eq!(normalize_tag("  Red   Car "), "red car");
        assert_eq!(normalize_tag("CAT"), "cat");
        let tags = vec!["Cat ".to_string(), "cat".to_string(), "".to_string()];
        assert_eq!(normalize_tags(&tags), vec!["cat".to_string()]);
    }

    #[test]
    fn vocabulary_orders_by_frequency_then_tag() {
        let v = TagVocabulary::from_counts(
            vec![("dog".into(), 3), ("cat".into(), 3), ("car".into(), 1)],
            2,
        );
        assert_eq!(v.entries(), &[("cat".into(), 3), ("dog".into(), 3)]);
        assert_eq!(v.position("dog"), Some(1));
        assert_eq!(v.position("car"), None);
    }

    #[test]
    fn sample_round_trips_through_json() {
        let s = well_formed(4);
        let text = serde_json::to_string(&s).unwrap();
        let back: Sample = serde_json::from_str(&text).unwrap();
        assert_eq!(s, back);
        // Unrefined samples omit the description_set key entirely.
        let bare = Sample { description_set: None, ..well_formed(4) };
        let text = serde_json::to_string(&bare).unwrap();
        assert!(!text.contains("description_set"));
        assert_eq!(serde_json::from_str::<Sample>(&text).unwrap(), bare);
    }
}
