use super::StatsError;

fn validate(p: &[f64], name: &str) -> Result<(), StatsError> {
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(StatsError::DistributionInvalid(format!("{name} has negative or non-finite entries")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(StatsError::DistributionInvalid(format!("{name} sums to {s}")));
    }
    Ok(())
}

fn xlogx_over(x: f64, m: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * (x / m).ln()
    }
}

/// Jensen-Shannon divergence in nats, in `[0, ln 2]`.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64, StatsError> {
    if p.len() != q.len() {
        return Err(StatsError::DistributionInvalid(format!("support sizes differ: {} vs {}", p.len(), q.len())));
    }
    validate(p, "p")?;
    validate(q, "q")?;
    let total: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            0.5 * (xlogx_over(a, m) + xlogx_over(b, m))
        })
        .sum();
    Ok(total.clamp(0.0, std::f64::consts::LN_2))
}
