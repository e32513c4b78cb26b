//! Diversity estimation: Hill numbers, sample coverage, coverage-based
//! rarefaction, Jensen-Shannon divergence and percentile bootstrap.

mod bootstrap;
pub mod compare;
mod coverage;
mod divergence;
mod hill;
mod rarefaction;

pub use bootstrap::{bootstrap_ci, bootstrap_ci_with, percentile};
pub use compare::{jsd_matrix, jsd_matrix_with, CompareError, GeneratorClaims, JsdMatrix};
pub use coverage::{coverage, coverage_from_counts, Coverage};
pub use divergence::jsd;
pub use hill::{hill_diversity, hsd};
pub use rarefaction::{
    rarefied_hsd, rarefy_to_coverage, rarefy_to_coverage_with, RarefactionPlan, RarefiedHsd,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("abundance vector is empty")]
    EmptyAbundance,
    #[error("Hill order must be finite")]
    InvalidOrder,
    #[error("target coverage {target} exceeds the sample's coverage {full}")]
    TargetUnreachable { target: f64, full: f64 },
    #[error("invalid rarefaction plan: {0}")]
    InvalidPlan(String),
    #[error("invalid distribution: {0}")]
    DistributionInvalid(String),
    #[error("no values to resample")]
    EmptyValues,
}
