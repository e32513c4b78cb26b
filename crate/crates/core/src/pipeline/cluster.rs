use std::collections::HashSet;
use std::fs;

use serde::{Deserialize, Serialize};

use super::{
    group_cells, CellKey, Pipeline, PipelineError, SharedAppender, Stage, StageSummary, CLAIMS, CLUSTERS,
    CLUSTER_CHECKPOINTS, CLUSTER_META, CLUSTER_PROGRESS,
};
use crate::backend::embed_all;
use crate::clustering::{cluster_claims_resume, split_large_clusters, ClusterError, ClusterParams, ClusterState, SplitAudit};
use crate::domain::{Claim, ClusterAssignment};
use crate::io::{self, IoError};
use crate::seed;

/// Clustering outcome of one cell; one line of `cluster_progress.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterCellMeta {
    #[serde(flatten)]
    pub cell: CellKey,
    pub claims: u64,
    pub clusters: usize,
    pub counts: Vec<u64>,
    pub splits: Vec<SplitAudit>,
}

/// Contents of `cluster_meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMeta {
    pub params: ClusterParams,
    pub cells: Vec<ClusterCellMeta>,
}

impl Pipeline {
    pub(super) fn cluster(&self, summary: &mut StageSummary) -> Result<(), PipelineError> {
        let params = &self.manifest.cluster;
        let cells = group_cells(io::read_jsonl(&self.path(CLAIMS))?);
        let done: HashSet<CellKey> =
            io::read_jsonl::<ClusterCellMeta>(&self.path(CLUSTER_PROGRESS))?.into_iter().map(|m| m.cell).collect();
        let pending: Vec<(&CellKey, &Vec<Claim>)> = cells.iter().filter(|(k, _)| !done.contains(k)).collect();
        summary.row("cells", cells.len());
        summary.row("already clustered", cells.len() - pending.len());

        let ckpt_dir = self.path(CLUSTER_CHECKPOINTS);
        let assignments = SharedAppender::open(&self.path(CLUSTERS))?;
        let progress = SharedAppender::open(&self.path(CLUSTER_PROGRESS))?;
        let results = self.options.exec.map_slice(&pending, |(cell, claims)| {
            let ckpt = ckpt_dir.join(format!("{}.json", seed::short_id(&[&cell.to_string()])));
            let state: ClusterState = if ckpt.exists() { io::read_json(&ckpt)? } else { ClusterState::default() };
            let texts: Vec<String> = claims.iter().map(|c| c.text.clone()).collect();
            let embeddings = match embed_all(self.backends.embedder.as_ref(), &texts) {
                Ok(e) => e,
                Err(e) => {
                    self.fail(Stage::Cluster, cell, e.code(), e);
                    return Ok::<_, IoError>(None);
                }
            };
            let exec = self.options.exec;
            let table = match cluster_claims_resume(claims, &embeddings, self.backends.entailer.as_ref(), params, state, exec)
            {
                Ok(t) => t,
                Err(ClusterError::Backend { source, checkpoint }) => {
                    fs::create_dir_all(&ckpt_dir)
                        .map_err(|e| IoError::Io { path: ckpt_dir.clone(), source: e })?;
                    io::write_json(&ckpt, &*checkpoint)?;
                    self.fail(
                        Stage::Cluster,
                        cell,
                        source.code(),
                        format!("{source} (checkpoint after {} claims)", checkpoint.len()),
                    );
                    return Ok(None);
                }
                Err(e) => {
                    self.fail(Stage::Cluster, cell, "Cluster", e);
                    return Ok(None);
                }
            };
            let (table, splits) = match split_large_clusters(&table, &embeddings, params, exec) {
                Ok(r) => r,
                Err(e) => {
                    self.fail(Stage::Cluster, cell, "Split", e);
                    return Ok(None);
                }
            };
            assignments.append_all(&table.assignments)?;
            let meta = ClusterCellMeta {
                cell: (*cell).clone(),
                claims: table.n,
                clusters: table.num_clusters(),
                counts: table.counts.clone(),
                splits,
            };
            progress.append(&meta)?;
            if ckpt.exists() {
                fs::remove_file(&ckpt).map_err(|e| IoError::Io { path: ckpt.clone(), source: e })?;
            }
            Ok(Some(meta))
        });
        let mut clustered = 0;
        let mut splits = 0;
        for r in results {
            if let Some(meta) = r? {
                clustered += 1;
                splits += meta.splits.len();
            }
        }
        drop(assignments);
        drop(progress);
        let _ = fs::remove_dir(&ckpt_dir);

        io::normalize_jsonl(&self.path(CLUSTERS), |a: &ClusterAssignment| a.claim_id.clone())?;
        let cells_meta = io::normalize_jsonl(&self.path(CLUSTER_PROGRESS), |m: &ClusterCellMeta| m.cell.clone())?;
        let total_clusters: usize = cells_meta.iter().map(|m| m.clusters).sum();
        io::write_json(&self.path(CLUSTER_META), &ClusterMeta { params: params.clone(), cells: cells_meta })?;
        summary.row("cells clustered", clustered);
        summary.row("clusters split", splits);
        summary.row("meaning classes total", total_clusters);
        Ok(())
    }
}
