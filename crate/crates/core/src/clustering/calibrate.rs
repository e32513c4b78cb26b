use serde::{Deserialize, Serialize};

use super::{run, ClusterError, ClusterParams, ClusterState};
use crate::backend::{EmbeddingVector, Entailer};
use crate::domain::Claim;
use crate::exec::Execution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalCalibration {
    /// `histogram[r]` counts joins whose winning candidate had rank `r + 1`.
    pub histogram: Vec<u64>,
    pub joined: u64,
    /// Smallest depth whose cumulative share of joins reaches the target.
    pub recommended_n: Option<usize>,
}

/// Clusters a sample with retrieval depth `max_n` and reports where in the
/// similarity ranking the winning candidate sat.
pub fn calibrate_retrieval_depth(
    claims: &[Claim],
    embeddings: &[EmbeddingVector],
    entailer: &dyn Entailer,
    max_n: usize,
    target_mass: f64,
    exec: Execution,
) -> Result<RetrievalCalibration, ClusterError> {
    if claims.is_empty() {
        return Ok(RetrievalCalibration { histogram: Vec::new(), joined: 0, recommended_n: None });
    }
    let params = ClusterParams { max_retrieval: max_n, ..ClusterParams::default() };
    let mut ranks = Vec::new();
    run(claims, embeddings, entailer, &params, ClusterState::default(), exec, Some(&mut ranks))?;
    let mut histogram = vec![0u64; max_n];
    for r in &ranks {
        histogram[r - 1] += 1;
    }
    let joined = ranks.len() as u64;
    let mut cumulative = 0;
    let recommended_n = histogram.iter().position(|&h| {
        cumulative += h;
        cumulative as f64 >= target_mass * joined as f64
    });
    let recommended_n = if joined == 0 { None } else { recommended_n.map(|i| i + 1) };
    Ok(RetrievalCalibration { histogram, joined, recommended_n })
}
