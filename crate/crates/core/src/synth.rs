//! Synthetic concept world: unit-norm concept latents with disjoint
//! attribute vocabularies, image features built from latent + attribute
//! offsets + gaussian noise, captions naming the concept and its attribute
//! combination, and description sets whose hard negatives swap exactly one
//! attribute for another concept's. Ground truth is known everywhere, so
//! the world doubles as the oracle for the evaluator and trainer.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{self, DatasetError, ShardManifest};
use crate::evaluator::{
    ClassItemFile, ClassSpec, ClassificationTaskFile, DiscriminationItemFile, EvalSuiteFile,
    RetrievalItemFile, SUITE_SCHEMA_VERSION,
};
use crate::linalg::{dot, norm};
use crate::rng;
use crate::textkit::TokenizerSpec;
use crate::types::{DescriptionSet, Sample};

pub const WORLD_SCHEMA_VERSION: u32 = 1;

const SALT_WORLD: u64 = 0x57_0a;
const SALT_TRAIN: u64 = 0x57_0b;
const SALT_EVAL: u64 = 0x57_0c;

const CONCEPT_WORDS: &[&str] = &[
    "falcon", "maple", "harbor", "lantern", "meadow", "compass", "violin", "glacier", "beacon",
    "orchard", "saddle", "turbine", "mosaic", "ember", "fjord", "prairie",
];

const ATTR_WORDS: &[&str] = &[
    "crimson", "cobalt", "ivory", "slate", "emerald", "copper", "onyx", "pearl", "russet",
    "teal", "saffron", "indigo", "umber", "coral", "jade", "sienna", "lilac", "maroon", "ochre",
    "plum", "sage", "tawny", "azure", "bronze", "carmine", "fawn", "garnet", "hazel", "iris",
    "jet", "khaki", "mauve", "navy", "olive", "peach", "quartz", "rose", "sand", "topaz",
    "violet", "wheat", "amber", "blush", "cedar", "dove", "flint", "grape", "honey", "ink",
    "lime", "mint", "opal", "pine", "rust", "silver", "smoke", "snow", "steel", "straw",
    "thistle", "tide", "walnut", "wine", "wool",
];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(
        "could not place {concepts} latents with pairwise cosine < {limit} after {attempts} \
         attempts; try a larger feature dimension"
    )]
    RejectionFailed { concepts: usize, limit: f64, attempts: usize },
    #[error("need at least {needed} distinct captions for the retrieval suite, found {found}; \
             increase attrs_per_concept")]
    NotEnoughDistinctCaptions { needed: usize, found: usize },
    #[error("{0} must be at least 2")]
    TooSmall(&'static str),
    #[error("attrs_per_sample {per_sample} exceeds attrs_per_concept {per_concept}")]
    TooManyAttrsPerSample { per_sample: usize, per_concept: usize },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where the hard-negative attribute swap draws its replacement from.
/// Same-concept swaps are the subtle ones: the replacement is plausible for
/// the concept family, so concept identity alone cannot reject it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapRule {
    SameConcept,
    OtherConcept,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_concepts: usize,
    pub attrs_per_concept: usize,
    pub attrs_per_sample: usize,
    pub d_in: usize,
    pub noise_sigma: f64,
    /// Norm of each attribute offset added to the concept latent.
    pub attr_scale: f64,
    /// Rejection ceiling for pairwise latent cosine.
    pub max_pairwise_cosine: f64,
    #[serde(default = "default_swap_rule")]
    pub neg_swap: SwapRule,
    /// Append a unique instance word to each raw caption, modeling the junk
    /// identifiers of web alt-text. In-batch ranking then stops supervising
    /// fine attribute distinctions once instance words are memorized, which
    /// is exactly the gap the hard-negative loss closes.
    #[serde(default = "default_true")]
    pub instance_tokens: bool,
}

fn default_swap_rule() -> SwapRule {
    SwapRule::SameConcept
}

fn default_true() -> bool {
    true
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 0,
            n_concepts: 8,
            attrs_per_concept: 8,
            attrs_per_sample: 3,
            d_in: 64,
            noise_sigma: 0.05,
            attr_scale: 0.5,
            max_pairwise_cosine: 0.5,
            neg_swap: SwapRule::SameConcept,
            instance_tokens: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Concept {
    pub name: String,
    pub latent: Vec<f64>,
    pub attrs: Vec<String>,
    pub attr_offsets: Vec<Vec<f64>>,
}

/// Fully materialized world descriptor; serializing it records every
/// generator parameter and latent for reproducibility.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptWorld {
    pub schema_version: u32,
    pub config: WorldConfig,
    pub concepts: Vec<Concept>,
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller; keeps the dependency surface to `rand` itself.
    loop {
        let u1: f64 = rng.gen();
        if u1 > 1e-12 {
            let u2: f64 = rng.gen();
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

fn unit_gaussian_vec(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        let n = norm(&v);
        if n > 1e-9 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

/// Builds the concept world: rejection-sampled unit latents, disjoint
/// attribute token sets, and per-attribute offset directions. Deterministic
/// per seed.
pub fn generate_world(config: WorldConfig) -> Result<ConceptWorld, SynthError> {
    if config.n_concepts < 2 {
        return Err(SynthError::TooSmall("n_concepts"));
    }
    if config.attrs_per_concept < 2 {
        return Err(SynthError::TooSmall("attrs_per_concept"));
    }
    if config.attrs_per_sample > config.attrs_per_concept {
        return Err(SynthError::TooManyAttrsPerSample {
            per_sample: config.attrs_per_sample,
            per_concept: config.attrs_per_concept,
        });
    }
    let mut r = rng::stream_for(config.seed, &[SALT_WORLD]);

    let concept_names: Vec<String> = (0..config.n_concepts)
        .map(|i| {
            CONCEPT_WORDS
                .get(i)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("genus{i}"))
        })
        .collect();
    let total_attrs = config.n_concepts * config.attrs_per_concept;
    let attr_names: Vec<String> = (0..total_attrs)
        .map(|i| {
            ATTR_WORDS
                .get(i)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("trait{i}"))
        })
        .collect();

    let mut latents: Vec<Vec<f64>> = Vec::with_capacity(config.n_concepts);
    let max_attempts = 1000 * config.n_concepts;
    let mut attempts = 0;
    while latents.len() < config.n_concepts {
        attempts += 1;
        if attempts > max_attempts {
            return Err(SynthError::RejectionFailed {
                concepts: config.n_concepts,
                limit: config.max_pairwise_cosine,
                attempts,
            });
        }
        let candidate = unit_gaussian_vec(&mut r, config.d_in);
        if latents.iter().all(|l| dot(l, &candidate) < config.max_pairwise_cosine) {
            latents.push(candidate);
        }
    }

    let concepts = concept_names
        .into_iter()
        .zip(latents)
        .enumerate()
        .map(|(c, (name, latent))| {
            let attrs: Vec<String> = (0..config.attrs_per_concept)
                .map(|a| attr_names[c * config.attrs_per_concept + a].clone())
                .collect();
            let attr_offsets = (0..config.attrs_per_concept)
                .map(|_| {
                    unit_gaussian_vec(&mut r, config.d_in)
                        .into_iter()
                        .map(|v| v * config.attr_scale)
                        .collect()
                })
                .collect();
            Concept { name, latent, attrs, attr_offsets }
        })
        .collect();

    Ok(ConceptWorld { schema_version: WORLD_SCHEMA_VERSION, config, concepts })
}

impl ConceptWorld {
    pub fn save(&self, path: &Path) -> Result<(), SynthError> {
        let mut text = serde_json::to_string_pretty(self).expect("world serializes");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text).map_err(std::io::Error::other)?)
    }

    /// Tokenizer over every word the world can emit, including prompt and
    /// template filler words.
    pub fn tokenizer(&self, token_budget: usize) -> TokenizerSpec {
        let mut texts: Vec<String> = Vec::new();
        texts.push(TEMPLATE_WORDS.join(" "));
        for c in &self.concepts {
            texts.push(c.name.clone());
            texts.extend(c.attrs.iter().cloned());
        }
        TokenizerSpec::from_texts(texts.iter().map(|s| s.as_str()), token_budget)
    }
}

/// Every non-concept, non-attribute word used by captions, descriptions and
/// evaluation prompts.
const TEMPLATE_WORDS: &[&str] = &[
    "a", "photo", "of", "with", "and", "this", "image", "shows", "captured", "in", "fine",
    "detail", "it", "clearly", "features", "elements", "there", "is", "also", "texture", "near",
    "the", "center", "hint", "marks", "edge", "frame", "overall", "fills", "most", "view",
    "sits", "light", "falls", "evenly", "across", "scene", "frames", "against", "plain",
    "background",
];

const FILLER_TEMPLATES: &[&str] = &[
    "the {} sits near the center of the frame.",
    "light falls evenly across the {}.",
    "the scene frames the {} against a plain background.",
];

struct DrawnSample {
    concept: usize,
    attr_idx: Vec<usize>,
    features: Vec<f64>,
}

fn draw_sample(world: &ConceptWorld, rng: &mut impl Rng) -> DrawnSample {
    let cfg = &world.config;
    let concept = rng.gen_range(0..world.concepts.len());
    let idx = rand::seq::index::sample(rng, cfg.attrs_per_concept, cfg.attrs_per_sample);
    let mut attr_idx: Vec<usize> = idx.iter().collect();
    attr_idx.sort_unstable();
    let c = &world.concepts[concept];
    let mut features = c.latent.clone();
    for &a in &attr_idx {
        crate::linalg::axpy(1.0, &c.attr_offsets[a], &mut features);
    }
    for f in &mut features {
        *f += cfg.noise_sigma * gaussian(rng);
    }
    DrawnSample { concept, attr_idx, features }
}

fn caption_of(world: &ConceptWorld, s: &DrawnSample) -> String {
    let c = &world.concepts[s.concept];
    let attrs: Vec<&str> = s.attr_idx.iter().map(|&a| c.attrs[a].as_str()).collect();
    match attrs.len() {
        0 => format!("a photo of a {}", c.name),
        1 => format!("a photo of a {} with {}", c.name, attrs[0]),
        _ => format!(
            "a photo of a {} with {} and {}",
            c.name,
            attrs[..attrs.len() - 1].join(" "),
            attrs[attrs.len() - 1]
        ),
    }
}

fn attr_sentence(slot: usize, attr: &str) -> String {
    match slot % 3 {
        0 => format!("it clearly features {attr} elements."),
        1 => format!("there is also {attr} texture near the center."),
        _ => format!("a hint of {attr} marks the edge of the frame."),
    }
}

/// Sentence list for the detailed description: a concept intro, one
/// sentence per attribute (each attribute appears exactly once), a concept
/// outro, and concept-bearing filler until the text reaches four times the
/// caption length.
fn description_sentences(world: &ConceptWorld, s: &DrawnSample, caption_tokens: usize) -> Vec<String> {
    let c = &world.concepts[s.concept];
    let mut sentences = vec![format!("this image shows a {} captured in fine detail.", c.name)];
    for (slot, &a) in s.attr_idx.iter().enumerate() {
        sentences.push(attr_sentence(slot, &c.attrs[a]));
    }
    sentences.push(format!("overall the {} fills most of the view.", c.name));
    let count_tokens = |ss: &[String]| -> usize {
        ss.iter().map(|s| crate::textkit::word_tokens(s).len()).sum()
    };
    let mut filler = 0usize;
    while count_tokens(&sentences) < 4 * caption_tokens {
        let template = FILLER_TEMPLATES[filler % FILLER_TEMPLATES.len()];
        sentences.push(template.replace("{}", &c.name));
        filler += 1;
    }
    sentences
}

/// The hard negative deviates in every sentence, so each of its segments is
/// a genuine negative for the image: attribute sentences swap their
/// attribute for one the image does not carry (by default a spare attribute
/// of the same concept, so concept identity cannot reject it), and
/// concept-bearing sentences swap the concept. Negative tags collect the
/// swapped-in labels.
fn description_set_of(
    world: &ConceptWorld,
    s: &DrawnSample,
    caption: &str,
    rng: &mut impl Rng,
) -> (DescriptionSet, usize) {
    let c = &world.concepts[s.concept];
    let caption_tokens = crate::textkit::word_tokens(caption).len();
    let sentences = description_sentences(world, s, caption_tokens);

    let wrong_concept = {
        let mut other = rng.gen_range(0..world.concepts.len() - 1);
        if other >= s.concept {
            other += 1;
        }
        other
    };
    let spares: Vec<usize> = (0..world.config.attrs_per_concept)
        .filter(|a| !s.attr_idx.contains(a))
        .collect();
    let replacement_for = |slot: usize, rng: &mut dyn rand::RngCore| -> String {
        match world.config.neg_swap {
            SwapRule::SameConcept if !spares.is_empty() => {
                c.attrs[spares[(slot + rng.gen_range(0..spares.len())) % spares.len()]].clone()
            }
            _ => {
                let w = &world.concepts[wrong_concept];
                w.attrs[rng.gen_range(0..world.config.attrs_per_concept)].clone()
            }
        }
    };

    fn swap_word(sentence: &str, from: &str, to: &str) -> String {
        sentence
            .split(' ')
            .map(|w| {
                let core = w.trim_end_matches(['.', '!', '?', ';']);
                if core == from {
                    format!("{}{}", to, &w[core.len()..])
                } else {
                    w.to_string()
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    let mut neg_tags = vec![world.concepts[wrong_concept].name.clone()];
    let mut neg_sentences = Vec::with_capacity(sentences.len());
    let wrong_name = &world.concepts[wrong_concept].name;
    for (idx, sentence) in sentences.iter().enumerate() {
        let attr_slot = idx.checked_sub(1).filter(|slot| *slot < s.attr_idx.len());
        match attr_slot {
            Some(slot) => {
                let victim = &c.attrs[s.attr_idx[slot]];
                let replacement = replacement_for(slot, rng);
                neg_sentences.push(swap_word(sentence, victim, &replacement));
                if !neg_tags.contains(&replacement) {
                    neg_tags.push(replacement);
                }
            }
            None => {
                neg_sentences.push(swap_word(sentence, &c.name, wrong_name));
            }
        }
    }
    // Evaluation triples pair an attribute sentence with its swapped twin.
    let victim_slot = rng.gen_range(0..s.attr_idx.len());
    let swapped_sentence = 1 + victim_slot;

    let mut pos_tags = vec![c.name.clone()];
    pos_tags.extend(s.attr_idx.iter().map(|&a| c.attrs[a].clone()));
    let set = DescriptionSet {
        detailed: sentences.join(" "),
        negative: neg_sentences.join(" "),
        pos_tags,
        neg_tags,
    };
    (set, swapped_sentence)
}

struct Generated {
    sample: Sample,
    concept: usize,
    attr_idx: Vec<usize>,
    set: DescriptionSet,
    swapped_sentence: usize,
}

fn make_sample(world: &ConceptWorld, id: String, refined: bool, rng: &mut impl Rng) -> Generated {
    let drawn = draw_sample(world, rng);
    let mut caption = caption_of(world, &drawn);
    if world.config.instance_tokens {
        // One vocabulary word per sample, e.g. "train000123".
        caption.push(' ');
        caption.push_str(&id.replace('-', ""));
    }
    let (set, swapped_sentence) = description_set_of(world, &drawn, &caption, rng);
    let sample = Sample {
        id,
        image_features: drawn.features,
        raw_caption: caption,
        description_set: refined.then(|| set.clone()),
    };
    Generated { sample, concept: drawn.concept, attr_idx: drawn.attr_idx, set, swapped_sentence }
}

/// Generates `n` samples; a `refined_fraction` share carries description
/// sets. Pure function of (world, n, fraction, seed).
pub fn generate_dataset(
    world: &ConceptWorld,
    n: usize,
    refined_fraction: f64,
    seed: u64,
) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let mut r = rng::stream_for(seed ^ world.config.seed, &[SALT_TRAIN, i as u64]);
            let refined = r.gen::<f64>() < refined_fraction;
            make_sample(world, format!("train-{i:06}"), refined, &mut r).sample
        })
        .collect()
}

/// Writes the generated dataset as shard files and returns the manifest.
pub fn generate_dataset_shards(
    world: &ConceptWorld,
    n: usize,
    refined_fraction: f64,
    seed: u64,
    out_dir: &Path,
    records_per_shard: usize,
) -> Result<ShardManifest, SynthError> {
    let samples = generate_dataset(world, n, refined_fraction, seed);
    Ok(dataset::write_shards(samples, out_dir, records_per_shard)?)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalSizes {
    pub classification: usize,
    pub retrieval: usize,
    pub discrimination: usize,
}

impl Default for EvalSizes {
    fn default() -> Self {
        EvalSizes { classification: 200, retrieval: 200, discrimination: 200 }
    }
}

/// Held-out evaluation suite: classification items labeled by concept,
/// retrieval pairs with pairwise-distinct captions, and discrimination
/// triples pairing the detailed-description sentence that carries the
/// attribute swap with its hard-negative counterpart. Sample ids never
/// collide with training ids, and the features live in their own shards
/// under `out_dir`.
pub fn generate_eval_suite(
    world: &ConceptWorld,
    sizes: EvalSizes,
    seed: u64,
    out_dir: &Path,
    records_per_shard: usize,
) -> Result<EvalSuiteFile, SynthError> {
    let pool = sizes.classification + 6 * sizes.retrieval + sizes.discrimination;
    let mut generated = Vec::with_capacity(pool);
    for i in 0..pool {
        let mut r = rng::stream_for(seed ^ world.config.seed, &[SALT_EVAL, i as u64]);
        generated.push(make_sample(world, format!("eval-{i:06}"), true, &mut r));
    }

    let classes: Vec<ClassSpec> = world
        .concepts
        .iter()
        .map(|c| ClassSpec {
            name: c.name.clone(),
            prompts: vec![format!("a photo of {}", c.name)],
        })
        .collect();
    let classification = ClassificationTaskFile {
        name: "concepts".into(),
        classes,
        items: generated
            .iter()
            .take(sizes.classification)
            .map(|g| ClassItemFile { id: g.sample.id.clone(), label: g.concept })
            .collect(),
    };

    // Retrieval pairs must be pairwise distinguishable: dedup on the
    // semantic content (concept plus attribute combination).
    let mut retrieval = Vec::with_capacity(sizes.retrieval);
    let mut seen_combos = std::collections::HashSet::new();
    for g in generated.iter().skip(sizes.classification) {
        if retrieval.len() == sizes.retrieval {
            break;
        }
        if seen_combos.insert((g.concept, g.attr_idx.clone())) {
            retrieval.push(RetrievalItemFile { id: g.sample.id.clone() });
        }
    }
    if retrieval.len() < sizes.retrieval {
        return Err(SynthError::NotEnoughDistinctCaptions {
            needed: sizes.retrieval,
            found: retrieval.len(),
        });
    }

    let discrimination: Vec<DiscriminationItemFile> = generated
        .iter()
        .rev()
        .take(sizes.discrimination)
        .map(|g| {
            let pos: Vec<&str> = g.set.detailed.split(". ").collect();
            let neg: Vec<&str> = g.set.negative.split(". ").collect();
            DiscriminationItemFile {
                id: g.sample.id.clone(),
                positive: pos[g.swapped_sentence].trim_end_matches('.').to_string(),
                negative: neg[g.swapped_sentence].trim_end_matches('.').to_string(),
            }
        })
        .collect();

    let manifest_dir = out_dir.join("features");
    dataset::write_shards(generated.into_iter().map(|g| g.sample), &manifest_dir, records_per_shard)?;
    Ok(EvalSuiteFile {
        schema_version: SUITE_SCHEMA_VERSION,
        features_manifest: "features/manifest.json".into(),
        classification: vec![classification],
        retrieval,
        discrimination,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::EvalSuite;
    use crate::textkit::word_tokens;
    use crate::types::validate_sample;

    fn small_world(seed: u64) -> ConceptWorld {
        generate_world(WorldConfig { seed, ..Default::default() }).unwrap()
    }

    #[test]
    fn world_is_deterministic_per_seed() {
        let a = small_world(3);
        let b = small_world(3);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = small_world(4);
        assert_ne!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&c).unwrap()
        );
    }

    #[test]
    fn latents_respect_rejection_ceiling() {
        let world = generate_world(WorldConfig {
            seed: 7,
            n_concepts: 2,
            d_in: 64,
            ..Default::default()
        })
        .unwrap();
        let cos = dot(&world.concepts[0].latent, &world.concepts[1].latent);
        assert!(cos < 0.5, "cosine {cos}");
        for c in &world.concepts {
            assert!((norm(&c.latent) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn attribute_sets_are_disjoint() {
        let world = small_world(0);
        let mut seen = std::collections::HashSet::new();
        for c in &world.concepts {
            for a in &c.attrs {
                assert!(seen.insert(a.clone()), "attribute {a} reused");
            }
        }
    }

    #[test]
    fn samples_validate_and_expand_four_x() {
        let world = small_world(1);
        let samples = generate_dataset(&world, 50, 1.0, 9);
        assert_eq!(samples.len(), 50);
        for s in &samples {
            assert!(validate_sample(s, world.config.d_in).is_empty(), "{:?}", s.id);
            let ds = s.description_set.as_ref().unwrap();
            let clen = word_tokens(&s.raw_caption).len();
            let dlen = word_tokens(&ds.detailed).len();
            assert!(dlen >= 4 * clen, "{dlen} < 4 * {clen}");
        }
    }

    #[test]
    fn negative_swaps_exactly_one_token() {
        let world = small_world(2);
        let samples = generate_dataset(&world, 30, 1.0, 5);
        for s in &samples {
            let ds = s.description_set.as_ref().unwrap();
            let pos = word_tokens(&ds.detailed);
            let neg = word_tokens(&ds.negative);
            assert_eq!(pos.len(), neg.len());
            let diffs: Vec<(usize, &String, &String)> = pos
                .iter()
                .zip(&neg)
                .enumerate()
                .filter(|(_, (a, b))| a != b)
                .map(|(i, (a, b))| (i, a, b))
                .collect();
            assert_eq!(diffs.len(), 1, "expected one swapped token in {:?}", s.id);
            let (_, original, swapped) = diffs[0];
            assert_eq!(&ds.neg_tags, &vec![swapped.clone()]);
            assert!(ds.pos_tags.contains(original));
        }
    }

    #[test]
    fn refined_fraction_is_respected() {
        let world = small_world(3);
        let samples = generate_dataset(&world, 800, 0.5, 1);
        let refined = samples.iter().filter(|s| s.description_set.is_some()).count();
        let frac = refined as f64 / samples.len() as f64;
        assert!((frac - 0.5).abs() < 0.06, "refined fraction {frac}");
        let all = generate_dataset(&world, 100, 1.0, 1);
        assert!(all.iter().all(|s| s.description_set.is_some()));
    }

    #[test]
    fn generation_is_pure() {
        let world = small_world(4);
        let a = generate_dataset(&world, 20, 0.7, 2);
        let b = generate_dataset(&world, 20, 0.7, 2);
        assert_eq!(a, b);
        let c = generate_dataset(&world, 20, 0.7, 3);
        assert_ne!(a, c);
    }

    #[test]
    fn nearest_latent_oracle_is_near_perfect_at_sigma_point_one() {
        // The learning task must be solvable before trainer thresholds mean
        // anything: the Bayes-style nearest-latent classifier stays above
        // 0.99 at the largest supported noise level.
        let world = generate_world(WorldConfig {
            seed: 11,
            noise_sigma: 0.1,
            ..Default::default()
        })
        .unwrap();
        let mut correct = 0usize;
        let n = 2000;
        for i in 0..n {
            let mut r = rng::stream_for(1234, &[SALT_TRAIN, i as u64]);
            let drawn = draw_sample(&world, &mut r);
            let pred = (0..world.concepts.len())
                .max_by(|&a, &b| {
                    dot(&world.concepts[a].latent, &drawn.features)
                        .partial_cmp(&dot(&world.concepts[b].latent, &drawn.features))
                        .unwrap()
                })
                .unwrap();
            if pred == drawn.concept {
                correct += 1;
            }
        }
        let acc = correct as f64 / n as f64;
        assert!(acc > 0.99, "oracle accuracy {acc}");
    }

    #[test]
    fn eval_suite_sizes_and_disjoint_ids() {
        let world = small_world(5);
        let dir = tempfile::tempdir().unwrap();
        let sizes = EvalSizes { classification: 40, retrieval: 50, discrimination: 30 };
        let suite_file = generate_eval_suite(&world, sizes, 77, dir.path(), 100).unwrap();
        assert_eq!(suite_file.classification[0].items.len(), 40);
        assert_eq!(suite_file.retrieval.len(), 50);
        assert_eq!(suite_file.discrimination.len(), 30);
        for item in &suite_file.retrieval {
            assert!(item.id.starts_with("eval-"));
        }

        let suite_path = dir.path().join("suite.json");
        suite_file.save(&suite_path).unwrap();
        let suite = EvalSuite::load(&suite_path).unwrap();
        assert_eq!(suite.classification[0].items.len(), 40);
        assert_eq!(suite.retrieval.len(), 50);
        // Distinct captions for retrieval.
        let mut caps = std::collections::HashSet::new();
        for p in &suite.retrieval {
            assert!(caps.insert(p.caption.clone()), "duplicate caption {:?}", p.caption);
        }
        // Triples differ in exactly one token.
        for t in &suite.discrimination {
            let pos = word_tokens(&t.positive);
            let neg = word_tokens(&t.negative);
            assert_eq!(pos.len(), neg.len());
            let diff = pos.iter().zip(&neg).filter(|(a, b)| a != b).count();
            assert_eq!(diff, 1, "triple must differ in one token: {t:?}");
        }
    }

    #[test]
    fn world_round_trips_through_file() {
        let world = small_world(6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("world.json");
        world.save(&path).unwrap();
        let back = ConceptWorld::load(&path).unwrap();
        assert_eq!(
            serde_json::to_string(&world).unwrap(),
            serde_json::to_string(&back).unwrap()
        );
    }

    #[test]
    fn tokenizer_covers_generated_text() {
        // World-level tokenizer covers everything when instance words are
        // off; with instance words the corpus-derived tokenizer covers them.
        let world = generate_world(WorldConfig {
            seed: 7,
            instance_tokens: false,
            ..Default::default()
        })
        .unwrap();
        let spec = world.tokenizer(77);
        let samples = generate_dataset(&world, 20, 1.0, 3);
        for s in samples {
            let ds = s.description_set.unwrap();
            for text in [&s.raw_caption, &ds.detailed, &ds.negative] {
                for tok in crate::textkit::tokenize(&spec, text) {
                    assert_ne!(tok, spec.unk_id, "unk in {text:?}");
                }
            }
        }

        let world = small_world(7);
        let samples = generate_dataset(&world, 20, 1.0, 3);
        let spec = crate::textkit::TokenizerSpec::from_samples(samples.iter(), 77);
        for s in &samples {
            assert!(s.raw_caption.contains(&s.id.replace('-', "")));
            for tok in crate::textkit::tokenize(&spec, &s.raw_caption) {
                assert_ne!(tok, spec.unk_id);
            }
        }
    }
}
