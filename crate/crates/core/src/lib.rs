//! Context-aware micro-classifier orchestration over precomputed embedding
//! datasets.
//!
//! The crate covers the full offline/online pipeline for running small
//! per-context classifiers ("micro-classifiers") on embedded devices:
//!
//! * [`dataset`] — ingestion and validation of embedding datasets, one
//!   matrix per (configuration, split), plus a deterministic Gaussian
//!   synthesizer for desk-scale experiments.
//! * [`similarity`] — pairwise class similarity (cosine of class mean
//!   embeddings) and the `(mean, std)` context representation.
//! * [`heads`] — two-layer classification + change-regression heads over
//!   frozen embeddings, trained with seeded mini-batch SGD, with a finite
//!   difference gradient check.
//! * [`predictor`] — the kNN configuration predictor: combination
//!   enumeration, per-combination oracle search, similarity-directed
//!   sampling and expanding-k majority voting.
//! * [`selection`] — budget-limited micro-classifier set selection:
//!   expected-FLOPs ranking, two-stage greedy replacement, top-K frequency
//!   selection and storage accounting.
//! * [`switching`] — runtime context management: change detection, hybrid
//!   context switching, LFU head caching and the local-only fallback.
//! * [`simulator`] — deterministic trace-driven evaluation with integer
//!   nanosecond latency accounting in cloud-assisted or local mode.
//!
//! All randomness is funneled through seeded ChaCha8 generators (see
//! [`rng`]), so every operation is reproducible bit-for-bit given a seed.

pub mod dataset;
pub mod heads;
pub mod predictor;
pub mod rng;
pub mod selection;
pub mod similarity;
pub mod simulator;
pub mod switching;

pub use dataset::{ConfigDescriptor, EmbeddingDataset, Manifest};
pub use heads::{HeadHyperparams, MicroClassifier, PredictionOutcome};
pub use predictor::ConfigPredictor;
pub use similarity::{ContextRepresentation, SimilarityMatrix};
pub use simulator::{SimConfig, SimulationReport};
