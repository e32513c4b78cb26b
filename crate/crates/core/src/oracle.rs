//! Synthetic claim populations with known class distributions.
//!
//! Samples carry a hidden class tag (`[[k<class>]]`) that the mock backends
//! read back, so the whole pipeline can be checked against ground truth.

use rand::distributions::{Distribution, WeightedIndex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

pub const DEFAULT_TAG_SYNTAX: &str = "Statement {variant} holds for class {class} [[k{class}]].";

#[derive(Debug, Error, PartialEq)]
pub enum PopulationError {
    #[error("population needs at least one class")]
    NoClasses,
    #[error("probabilities must be finite, non-negative and sum to 1 (sum = {0})")]
    BadProbabilities(f64),
    #[error("tag syntax must contain `{{class}}`")]
    BadTagSyntax,
}

/// Class distribution family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    Uniform { classes: usize },
    /// `p_i ∝ i^-exponent`, `i = 1..=classes`.
    Zipf { classes: usize, exponent: f64 },
    /// `p_i ∝ ratio^i`, `i = 0..classes`.
    Geometric { classes: usize, ratio: f64 },
    Explicit { probabilities: Vec<f64> },
}

impl Family {
    pub fn probabilities(&self) -> Result<Vec<f64>, PopulationError> {
        let weights: Vec<f64> = match self {
            Family::Uniform { classes } => vec![1.0; *classes],
            Family::Zipf { classes, exponent } => {
                (1..=*classes).map(|i| (i as f64).powf(-exponent)).collect()
            }
            Family::Geometric { classes, ratio } => (0..*classes).map(|i| ratio.powi(i as i32)).collect(),
            Family::Explicit { probabilities } => {
                let s: f64 = probabilities.iter().sum();
                if probabilities.iter().any(|p| !p.is_finite() || *p < 0.0) || (s - 1.0).abs() > 1e-9 {
                    return Err(PopulationError::BadProbabilities(s));
                }
                probabilities.clone()
            }
        };
        if weights.is_empty() {
            return Err(PopulationError::NoClasses);
        }
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(PopulationError::BadProbabilities(total));
        }
        Ok(weights.iter().map(|w| w / total).collect())
    }

    /// Deterministic sampler over class indices.
    pub fn sampler(&self) -> Result<WeightedIndex<f64>, PopulationError> {
        let p = self.probabilities()?;
        WeightedIndex::new(&p).map_err(|_| PopulationError::BadProbabilities(p.iter().sum()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    #[serde(flatten)]
    pub family: Family,
    pub n_samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tag_syntax")]
    pub tag_syntax: String,
}

fn default_tag_syntax() -> String {
    DEFAULT_TAG_SYNTAX.to_string()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationSample {
    pub claims: Vec<String>,
    /// Hidden class of each claim.
    pub classes: Vec<usize>,
    pub distribution: Vec<f64>,
}

/// Renders one tagged claim. `{class}` and `{variant}` are substituted.
pub fn render_tagged(tag_syntax: &str, class: usize, variant: u64) -> String {
    tag_syntax.replace("{class}", &class.to_string()).replace("{variant}", &variant.to_string())
}

/// Draws `n_samples` i.i.d. classes and renders each as a tagged claim.
pub fn sample_population(spec: &PopulationSpec) -> Result<PopulationSample, PopulationError> {
    if !spec.tag_syntax.contains("{class}") {
        return Err(PopulationError::BadTagSyntax);
    }
    let distribution = spec.family.probabilities()?;
    let sampler = spec.family.sampler()?;
    let mut rng = seed::rng(spec.seed);
    let mut claims = Vec::with_capacity(spec.n_samples);
    let mut classes = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let class = sampler.sample(&mut rng);
        classes.push(class);
        claims.push(render_tagged(&spec.tag_syntax, class, i as u64));
    }
    Ok(PopulationSample { claims, classes, distribution })
}

/// exp of the exact Shannon entropy (nats) of the distribution.
pub fn true_hsd(distribution: &[f64]) -> f64 {
    let h: f64 = distribution.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    h.exp()
}

/// Probability mass of the observed classes.
pub fn true_coverage(distribution: &[f64], observed: impl IntoIterator<Item = usize>) -> f64 {
    let mut seen = std::collections::BTreeSet::new();
    observed.into_iter().filter(|c| seen.insert(*c)).map(|c| distribution[c]).sum()
}
