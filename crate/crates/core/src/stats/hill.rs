use super::StatsError;
use crate::domain::AbundanceVector;

/// Hill diversity `(Σ p_i (1/p_i)^l)^(1/l)` with free parameter `l`.
///
/// `l = 0` is the Shannon limit `exp(-Σ p_i ln p_i)`; `l = 1` gives richness
/// and `l = -1` inverse Simpson. Near zero the power form is evaluated as
/// `exp(ln_1p(Σ p_i expm1(-l ln p_i)) / l)` to avoid cancellation.
pub fn hill_diversity(v: &AbundanceVector, order: f64) -> Result<f64, StatsError> {
    if v.is_empty() {
        return Err(StatsError::EmptyAbundance);
    }
    if !order.is_finite() {
        return Err(StatsError::InvalidOrder);
    }
    let p = v.probabilities();
    if order == 0.0 {
        let h: f64 = p.iter().map(|&pi| -pi * pi.ln()).sum();
        return Ok(h.exp());
    }
    let s: f64 = p.iter().map(|&pi| pi * (-order * pi.ln()).exp_m1()).sum();
    Ok((s.ln_1p() / order).exp())
}

/// Hill-Shannon diversity: e raised to the entropy in nats.
pub fn hsd(v: &AbundanceVector) -> Result<f64, StatsError> {
    hill_diversity(v, 0.0)
}
