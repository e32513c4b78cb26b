//! Claim-level diversity measurement for text generators.
//!
//! The pipeline turns free-text generator outputs into atomic claims,
//! groups claims into meaning classes by mutual entailment, and scores each
//! (generator, topic, setting) cell with coverage-rarefied Hill-Shannon
//! diversity. Generators are compared by Jensen-Shannon divergence over a
//! joint clustering, and representativeness is measured against reference
//! claim sets.
//!
//! Data-parallel loops (similarity scans, resampling, per-cell work) run on
//! rayon when the `parallel` feature is enabled (the default) and fall back
//! to sequential iteration otherwise. See [`exec::Execution`].

pub mod backend;
pub mod clustering;
pub mod corpus;
pub mod domain;
pub mod exec;
pub mod io;
pub mod manifest;
pub mod oracle;
pub mod pipeline;
pub mod report;
pub mod represent;
pub mod retrieval;
pub mod seed;
pub mod stats;

pub use domain::{
    AbundanceVector, BackendDescriptor, BackendKind, Claim, DiversityReport, GenerationSetting,
    MeaningClassTable, PromptTemplate, ResponseRecord, ResponseRef, Topic,
};
pub use exec::Execution;

/// Version of the JSONL record schemas written by this crate.
pub const SCHEMA_VERSION: &str = "1";
