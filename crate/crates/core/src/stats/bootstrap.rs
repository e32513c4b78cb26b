use rand::Rng;

use super::StatsError;
use crate::exec::Execution;
use crate::seed;

/// Linear-interpolated quantile of sorted data, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

pub fn bootstrap_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Result<(f64, f64), StatsError> {
    bootstrap_ci_with(values, resamples, level, seed, Execution::default())
}

/// Percentile bootstrap interval for the mean.
///
/// Draws `resamples` samples with replacement of size `values.len()`, each
/// with its own derived seed, and returns the `(1-level)/2` and
/// `1-(1-level)/2` quantiles of the resampled means.
pub fn bootstrap_ci_with(
    values: &[f64],
    resamples: usize,
    level: f64,
    seed: u64,
    exec: Execution,
) -> Result<(f64, f64), StatsError> {
    if values.is_empty() || resamples == 0 {
        return Err(StatsError::EmptyValues);
    }
    let n = values.len();
    let mut means = exec.map_range(resamples, |b| {
        let mut rng = seed::rng(seed::sub_seed(seed, b as u64));
        (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64
    });
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((percentile(&means, tail), percentile(&means, 1.0 - tail)))
}
