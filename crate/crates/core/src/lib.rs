//! Desk-scale image-text dataset refinement and contrastive training.
//!
//! The pipeline turns raw image-text records into multi-grained bidirectional
//! description sets (long positive/negative descriptions plus short
//! positive/negative tags), then trains a small dual encoder with three
//! supervision signals: bidirectional contrastive alignment, gated
//! hard-negative identification, and multi-label short-tag classification.
//! A synthetic concept world and a retrieval/classification evaluator make
//! every mechanism measurable without web-scale data.

pub mod ablate;
pub mod captioner;
pub mod dataset;
pub mod evaluator;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod rng;
pub mod synth;
pub mod textkit;
pub mod trainer;
pub mod types;

pub use types::{DescriptionSet, MultiHotLabel, Sample, TagVocabulary, TextSource, TrainingText};
