//! Toolkit for semantically-coherent multimodal in-context-learning (ICL) data.
//!
//! The pipeline runs in a fixed order:
//!
//! 1. [`ingest`] normalizes source annotations into [`model::Record`]s.
//! 2. [`sampler`] splits partitions image-disjointly and draws coherent k-shot groups
//!    and evaluation [`model::Episode`]s.
//! 3. [`instruct`] turns records into open-QA, multiple-choice and captioning
//!    [`model::Shot`]s and assembles multi-turn [`model::Conversation`]s.
//! 4. [`mix`] composes a training corpus from concept × format pools.
//! 5. [`layout`] compiles conversations into token layouts with completion-only masks.
//! 6. [`eval`] renders episodes, talks to an inference endpoint and scores the answers.
//!
//! Numeric code that deals in ratios and likelihoods is generic over [`Scalar`];
//! the aliases below pin the `f64` instantiation used by the CLI.

pub mod eval;
pub mod ingest;
pub mod instruct;
pub mod jsonl;
pub mod layout;
pub mod mix;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod scalar;

pub use scalar::Scalar;

/// Version of the toolkit, reported by `--version`.
pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

pub type MixSpec = mix::MixSpec<f64>;
pub type MixSpec32 = mix::MixSpec<f32>;
pub type AuditReport = mix::AuditReport<f64>;
pub type RunReport = eval::RunReport<f64>;
pub type TaskScore = eval::TaskScore<f64>;
