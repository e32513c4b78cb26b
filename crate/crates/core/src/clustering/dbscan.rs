use serde::{Deserialize, Serialize};

use super::{ClusterError, ClusterParams, EmbeddingMatrix};
use crate::backend::{dot, EmbeddingVector};
use crate::domain::MeaningClassTable;
use crate::exec::Execution;

/// DBSCAN over rows of `m` with cosine distance. Returns one label per
/// row; `None` marks noise. Clusters are numbered in discovery order.
pub fn dbscan(m: &EmbeddingMatrix, eps: f64, min_pts: usize, exec: Execution) -> Vec<Option<usize>> {
    let len = m.len();
    let neighbors: Vec<Vec<usize>> = exec.map_range(len, |i| {
        (0..len).filter(|&k| 1.0 - dot(m.row(i), m.row(k)) <= eps).collect()
    });
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();
    let mut labels = vec![None; len];
    let mut next = 0;
    for start in 0..len {
        if labels[start].is_some() || !core[start] {
            continue;
        }
        labels[start] = Some(next);
        let mut stack = vec![start];
        while let Some(p) = stack.pop() {
            for &q in &neighbors[p] {
                if labels[q].is_none() {
                    labels[q] = Some(next);
                    if core[q] {
                        stack.push(q);
                    }
                }
            }
        }
        next += 1;
    }
    labels
}

/// One oversized cluster and what it was split into.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAudit {
    /// Id before splitting.
    pub cluster_id: usize,
    pub size: u64,
    /// Ids after splitting, dense sub-clusters first, then noise singletons.
    pub into: Vec<usize>,
    pub noise: u64,
}

/// Runs DBSCAN inside every cluster larger than `split_threshold`; dense
/// components become classes and noise points become singletons. Smaller
/// clusters pass through. Ids are re-densified by first appearance.
///
/// `embeddings` must align with `table.assignments`.
pub fn split_large_clusters(
    table: &MeaningClassTable,
    embeddings: &[EmbeddingVector],
    params: &ClusterParams,
    exec: Execution,
) -> Result<(MeaningClassTable, Vec<SplitAudit>), ClusterError> {
    params.validate()?;
    if embeddings.len() != table.assignments.len() {
        return Err(ClusterError::Misaligned { claims: table.assignments.len(), embeddings: embeddings.len() });
    }
    let labels = table.labels();
    let oversized: Vec<usize> =
        (0..table.num_clusters()).filter(|&c| table.counts[c] > params.split_threshold as u64).collect();
    let members: Vec<Vec<usize>> =
        oversized.iter().map(|&c| (0..labels.len()).filter(|&i| labels[i] == c).collect()).collect();
    let parts = exec.map_slice(&members, |idx| {
        let sub: Vec<EmbeddingVector> = idx.iter().map(|&i| embeddings[i].clone()).collect();
        dbscan(&EmbeddingMatrix::new(&sub), params.dbscan_eps, params.dbscan_min_pts, Execution::Sequential)
    });

    // raw ids: untouched clusters keep theirs, pieces get fresh ones above
    let mut raw = labels.clone();
    let mut fresh = table.num_clusters();
    let mut pieces: Vec<(usize, Vec<usize>, u64)> = Vec::new();
    for ((&c, idx), sub) in oversized.iter().zip(&members).zip(&parts) {
        let dense_parts = sub.iter().flatten().max().map_or(0, |m| m + 1);
        let base = fresh;
        fresh += dense_parts;
        let mut noise = 0;
        let mut noise_ids = Vec::new();
        for (&i, l) in idx.iter().zip(sub) {
            raw[i] = match l {
                Some(l) => base + l,
                None => {
                    noise += 1;
                    noise_ids.push(fresh);
                    fresh += 1;
                    fresh - 1
                }
            };
        }
        let mut ids: Vec<usize> = (base..base + dense_parts).collect();
        ids.extend(noise_ids);
        pieces.push((c, ids, noise));
    }
    let ids: Vec<&str> = table.assignments.iter().map(|a| a.claim_id.as_str()).collect();
    let out = MeaningClassTable::from_labels(&ids, &raw)?;

    // translate raw piece ids to the re-densified ones for the audit trail
    let mut dense_of = std::collections::HashMap::new();
    for (r, a) in raw.iter().zip(&out.assignments) {
        dense_of.insert(*r, a.cluster_id);
    }
    let audit = pieces
        .into_iter()
        .map(|(c, ids, noise)| SplitAudit {
            cluster_id: c,
            size: table.counts[c],
            into: ids.iter().map(|r| dense_of[r]).collect(),
            noise,
        })
        .collect();
    Ok((out, audit))
}
