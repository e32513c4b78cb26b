use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Pipeline, PipelineError, Stage, StageSummary, CLAIMS, JSD_MATRIX};
use crate::domain::{Claim, GenerationSetting};
use crate::io;
use crate::stats::{jsd_matrix_with, GeneratorClaims};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicJsd {
    pub topic_id: String,
    /// Generator ids, in matrix order.
    pub labels: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
}

/// Contents of `jsd_matrix.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsdReport {
    pub run_id: String,
    pub config_hash: String,
    pub setting: GenerationSetting,
    pub topics: Vec<TopicJsd>,
}

impl Pipeline {
    /// Pairwise JSD between generators' IFT claims, one joint clustering per
    /// topic. Topics already in `jsd_matrix.json` are kept as they are.
    pub(super) fn compare(&self, summary: &mut StageSummary) -> Result<(), PipelineError> {
        let claims: Vec<Claim> = io::read_jsonl(&self.path(CLAIMS))?;
        let path = self.path(JSD_MATRIX);
        let mut report = if path.exists() {
            io::read_json(&path)?
        } else {
            JsdReport {
                run_id: self.manifest.run_id.clone(),
                config_hash: self.manifest.config_hash(),
                setting: GenerationSetting::Ift,
                topics: Vec::new(),
            }
        };
        let mut by_topic: BTreeMap<&str, BTreeMap<&str, Vec<Claim>>> = BTreeMap::new();
        for c in &claims {
            if c.response_ref.setting == report.setting {
                by_topic
                    .entry(&c.topic_id)
                    .or_default()
                    .entry(&c.response_ref.generator_id)
                    .or_default()
                    .push(c.clone());
            }
        }
        let pending: Vec<(&str, Vec<GeneratorClaims>)> = by_topic
            .into_iter()
            .filter(|(t, _)| !report.topics.iter().any(|x| x.topic_id == *t))
            .map(|(t, gens)| {
                let sets = gens.into_iter().map(|(id, claims)| GeneratorClaims { id: id.to_string(), claims }).collect();
                (t, sets)
            })
            .collect();
        summary.row("topics already compared", report.topics.len());

        let mut skipped = 0;
        for (topic_id, sets) in pending {
            if sets.len() < 2 {
                log::info!("topic {topic_id}: fewer than two generators with {} claims, skipped", report.setting);
                skipped += 1;
                continue;
            }
            let (embedder, entailer) = (self.backends.embedder.as_ref(), self.backends.entailer.as_ref());
            match jsd_matrix_with(&sets, embedder, entailer, &self.manifest.cluster, self.options.exec) {
                Ok(m) => report.topics.push(TopicJsd { topic_id: topic_id.into(), labels: m.labels, matrix: m.matrix }),
                Err(e) => self.fail(Stage::Compare, topic_id, "Compare", e),
            }
            report.topics.sort_by(|a, b| a.topic_id.cmp(&b.topic_id));
            io::write_json(&path, &report)?;
        }
        if !path.exists() {
            io::write_json(&path, &report)?;
        }
        summary.row("topics compared", report.topics.len());
        summary.row("topics skipped", skipped);
        Ok(())
    }
}
