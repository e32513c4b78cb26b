use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{coverage_from_counts, hsd, StatsError};
use crate::domain::AbundanceVector;
use crate::exec::Execution;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RarefactionPlan {
    pub target_coverage: f64,
    pub resamples: u32,
    pub seed: u64,
}

impl RarefactionPlan {
    pub fn new(target_coverage: f64, seed: u64) -> Self {
        RarefactionPlan { target_coverage, resamples: 100, seed }
    }

    fn validate(&self) -> Result<(), StatsError> {
        if !(self.target_coverage > 0.0 && self.target_coverage <= 1.0) {
            return Err(StatsError::InvalidPlan(format!("target coverage {} not in (0, 1]", self.target_coverage)));
        }
        if self.resamples == 0 {
            return Err(StatsError::InvalidPlan("resamples must be >= 1".into()));
        }
        Ok(())
    }
}

/// Slack allowed between the target and the full sample's coverage.
const TARGET_SLACK: f64 = 1e-9;

pub fn rarefy_to_coverage(labels: &[usize], plan: &RarefactionPlan) -> Result<Vec<AbundanceVector>, StatsError> {
    rarefy_to_coverage_with(labels, plan, Execution::default())
}

/// Downsamples a labelled sample to a target coverage.
///
/// `labels` holds the meaning class of each claim. Each of the
/// `plan.resamples` repetitions permutes the claims with its own seed and
/// keeps the shortest prefix whose estimated coverage reaches the target.
/// A target equal to (or within 1e-9 above) the full sample's coverage
/// yields the full abundance vector.
pub fn rarefy_to_coverage_with(
    labels: &[usize],
    plan: &RarefactionPlan,
    exec: Execution,
) -> Result<Vec<AbundanceVector>, StatsError> {
    plan.validate()?;
    let full = AbundanceVector::from_labels(labels);
    if full.is_empty() {
        return Err(StatsError::EmptyAbundance);
    }
    let full_cov = coverage_from_counts(full.n(), full.f1(), full.f2()).value;
    if plan.target_coverage > full_cov + TARGET_SLACK {
        return Err(StatsError::TargetUnreachable { target: plan.target_coverage, full: full_cov });
    }
    if plan.target_coverage >= full_cov {
        return Ok(vec![full; plan.resamples as usize]);
    }

    // dense class indices so counts can live in a flat array
    let mut dense = std::collections::HashMap::new();
    let classes: Vec<usize> = labels
        .iter()
        .map(|l| {
            let next = dense.len();
            *dense.entry(*l).or_insert(next)
        })
        .collect();
    let num_classes = dense.len();

    Ok(exec.map_range(plan.resamples as usize, |r| {
        let mut order: Vec<usize> = (0..classes.len()).collect();
        order.shuffle(&mut seed::rng(seed::sub_seed(plan.seed, r as u64)));
        let mut counts = vec![0u64; num_classes];
        let (mut f1, mut f2) = (0u64, 0u64);
        for (taken, &idx) in order.iter().enumerate() {
            let c = &mut counts[classes[idx]];
            match *c {
                0 => f1 += 1,
                1 => {
                    f1 -= 1;
                    f2 += 1
                }
                2 => f2 -= 1,
                _ => {}
            }
            *c += 1;
            if coverage_from_counts(taken as u64 + 1, f1, f2).value >= plan.target_coverage {
                break;
            }
        }
        AbundanceVector::from_counts_lossy(counts)
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RarefiedHsd {
    pub mean: f64,
    /// Sample standard deviation over resamples; 0 for a single resample.
    pub sd: f64,
    pub values: Vec<f64>,
}

/// Mean and spread of HSD over rarefied samples.
pub fn rarefied_hsd(samples: &[AbundanceVector]) -> Result<RarefiedHsd, StatsError> {
    if samples.is_empty() {
        return Err(StatsError::EmptyValues);
    }
    let values = samples.iter().map(hsd).collect::<Result<Vec<_>, _>>()?;
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let sd = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
    };
    Ok(RarefiedHsd { mean, sd, values })
}
