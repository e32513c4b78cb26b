//! Online mutual-entailment clustering with similarity-limited retrieval,
//! and the DBSCAN split of oversized clusters.
//!
//! Claims are visited in their persisted order. Claim `j` is compared only
//! with the `max_retrieval` earlier claims closest to it by cosine
//! similarity; it joins the cluster of the best mutually entailing
//! candidate (score = product of the two directional entailment
//! probabilities, ties to the lowest cluster id) or founds a new cluster.

mod calibrate;
mod dbscan;
mod topn;

pub use calibrate::{calibrate_retrieval_depth, RetrievalCalibration};
pub use dbscan::{dbscan, split_large_clusters, SplitAudit};
pub use topn::{nearest, top_n, EmbeddingMatrix};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{mutual_entailment, BackendError, EmbeddingVector, Entailer};
use crate::domain::{Claim, DomainError, MeaningClassTable};
use crate::exec::Execution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterParams {
    pub max_retrieval: usize,
    pub split_threshold: usize,
    /// Cosine distance.
    pub dbscan_eps: f64,
    pub dbscan_min_pts: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams { max_retrieval: 6, split_threshold: 50, dbscan_eps: 0.2, dbscan_min_pts: 3 }
    }
}

impl ClusterParams {
    pub fn validate(&self) -> Result<(), ClusterError> {
        let bad = |m: &str| Err(ClusterError::InvalidParams(m.to_string()));
        if self.max_retrieval == 0 {
            return bad("max_retrieval must be >= 1");
        }
        if !(self.dbscan_eps > 0.0 && self.dbscan_eps < 2.0) {
            return bad("dbscan_eps must lie in (0, 2)");
        }
        if self.dbscan_min_pts == 0 {
            return bad("dbscan_min_pts must be >= 1");
        }
        if self.split_threshold < self.dbscan_min_pts {
            return bad("split_threshold must be >= dbscan_min_pts");
        }
        Ok(())
    }
}

/// Progress of one clustering run: the claims seen so far and their labels.
///
/// Embeddings are not stored; a resumed run recomputes them from the same
/// inputs and checks that `claim_ids` is a prefix of the claim order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClusterState {
    pub claim_ids: Vec<String>,
    pub labels: Vec<usize>,
    pub next_cluster_id: usize,
}

impl ClusterState {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn push(&mut self, id: &str, label: usize) {
        self.claim_ids.push(id.to_string());
        self.labels.push(label);
        self.next_cluster_id = self.next_cluster_id.max(label + 1);
    }

    pub fn to_table(&self) -> Result<MeaningClassTable, DomainError> {
        MeaningClassTable::from_labels(&self.claim_ids, &self.labels)
    }
}

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("entailment backend failed after {} claims: {source}", checkpoint.len())]
    Backend {
        source: BackendError,
        /// Everything clustered before the failure; pass to
        /// [`cluster_claims_resume`].
        checkpoint: Box<ClusterState>,
    },
    #[error("{claims} claims but {embeddings} embeddings")]
    Misaligned { claims: usize, embeddings: usize },
    #[error("checkpoint does not match the claim order at position {0}")]
    CheckpointMismatch(usize),
    #[error("invalid cluster parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

pub fn cluster_claims(
    claims: &[Claim],
    embeddings: &[EmbeddingVector],
    entailer: &dyn Entailer,
    params: &ClusterParams,
) -> Result<MeaningClassTable, ClusterError> {
    cluster_claims_resume(claims, embeddings, entailer, params, ClusterState::default(), Execution::default())
}

/// Continues a run from `state` (empty for a fresh run).
pub fn cluster_claims_resume(
    claims: &[Claim],
    embeddings: &[EmbeddingVector],
    entailer: &dyn Entailer,
    params: &ClusterParams,
    state: ClusterState,
    exec: Execution,
) -> Result<MeaningClassTable, ClusterError> {
    let state = run(claims, embeddings, entailer, params, state, exec, None)?;
    Ok(state.to_table()?)
}

/// Shared driver. When `trace` is given, the 1-based similarity rank of the
/// winning candidate is recorded for every claim that joined a cluster.
pub(crate) fn run(
    claims: &[Claim],
    embeddings: &[EmbeddingVector],
    entailer: &dyn Entailer,
    params: &ClusterParams,
    mut state: ClusterState,
    exec: Execution,
    mut trace: Option<&mut Vec<usize>>,
) -> Result<ClusterState, ClusterError> {
    params.validate()?;
    if claims.len() != embeddings.len() {
        return Err(ClusterError::Misaligned { claims: claims.len(), embeddings: embeddings.len() });
    }
    if state.len() > claims.len() {
        return Err(ClusterError::CheckpointMismatch(claims.len()));
    }
    if let Some(pos) = state.claim_ids.iter().zip(claims).position(|(id, c)| *id != c.id) {
        return Err(ClusterError::CheckpointMismatch(pos));
    }
    let matrix = EmbeddingMatrix::new(embeddings);
    for j in state.len()..claims.len() {
        if j == 0 {
            state.push(&claims[0].id, 0);
            continue;
        }
        let candidates = top_n(&matrix, j, params.max_retrieval, exec);
        let claim = claims[j].text.as_str();
        let probes = exec.map_slice(&candidates, |&(k, _)| mutual_entailment(entailer, &claims[k].text, claim));
        let mut best: Option<(f64, usize, usize)> = None;
        for (rank, (probe, &(k, _))) in probes.into_iter().zip(&candidates).enumerate() {
            let score = match probe {
                Ok(Some(s)) => s,
                Ok(None) => continue,
                Err(source) => return Err(ClusterError::Backend { source, checkpoint: Box::new(state) }),
            };
            let label = state.labels[k];
            let better = match best {
                None => true,
                Some((s, l, _)) => score > s || (score == s && label < l),
            };
            if better {
                best = Some((score, label, rank + 1));
            }
        }
        match best {
            Some((_, label, rank)) => {
                state.push(&claims[j].id, label);
                if let Some(t) = trace.as_deref_mut() {
                    t.push(rank);
                }
            }
            None => {
                let fresh = state.next_cluster_id;
                state.push(&claims[j].id, fresh);
            }
        }
    }
    Ok(state)
}
