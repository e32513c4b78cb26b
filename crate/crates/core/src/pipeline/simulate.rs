use serde::{Deserialize, Serialize};

use super::{claim_sort_key, Pipeline, PipelineError, Stage, StageSummary, CLAIMS, RESPONSES, TRUTH};
use crate::domain::{Claim, GenerationSetting, ResponseRef};
use crate::io;
use crate::oracle::{sample_population, true_coverage, true_hsd};

/// Prompt id stamped on simulated claims.
pub const SIMULATED_PROMPT_ID: &str = "simulated";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthCell {
    pub generator_id: String,
    pub topic_id: String,
    pub n_samples: usize,
    pub seed: u64,
    pub distribution: Vec<f64>,
    pub true_hsd: f64,
    /// Probability mass of the classes that were drawn.
    pub true_coverage: f64,
}

/// Contents of `truth.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationTruth {
    pub run_id: String,
    pub cells: Vec<TruthCell>,
}

impl Pipeline {
    /// Writes oracle claims for every (simulated generator, topic) in place
    /// of generation and decomposition.
    pub(super) fn simulate(&self, summary: &mut StageSummary) -> Result<(), PipelineError> {
        let m = &self.manifest;
        if m.simulation.is_empty() {
            return Err(PipelineError::Config("manifest has no `simulation` entries".into()));
        }
        if self.path(RESPONSES).exists() {
            return Err(PipelineError::Config(format!(
                "{} holds generated responses; simulate into a fresh run directory",
                self.dir.display()
            )));
        }
        let mut claims = Vec::new();
        let mut cells = Vec::new();
        for g in &m.simulation {
            for topic in &m.topics {
                let mut spec = g.population.clone();
                spec.seed = self.cell_seed(Stage::Simulate, &format!("{}/{}/{}", g.generator_id, topic.id, spec.seed));
                let sample = match sample_population(&spec) {
                    Ok(s) => s,
                    Err(e) => return Err(PipelineError::Config(format!("simulation {}: {e}", g.generator_id))),
                };
                let r = ResponseRef {
                    generator_id: g.generator_id.clone(),
                    prompt_id: Some(SIMULATED_PROMPT_ID.into()),
                    setting: GenerationSetting::Ift,
                    seed: spec.seed,
                };
                claims.extend(sample.claims.into_iter().enumerate().map(|(i, text)| Claim {
                    id: Claim::make_id(&topic.id, &r, 0, i as u32),
                    topic_id: topic.id.clone(),
                    response_ref: r.clone(),
                    chunk_index: 0,
                    line_index: i as u32,
                    text,
                }));
                cells.push(TruthCell {
                    generator_id: g.generator_id.clone(),
                    topic_id: topic.id.clone(),
                    n_samples: spec.n_samples,
                    seed: spec.seed,
                    true_hsd: true_hsd(&sample.distribution),
                    true_coverage: true_coverage(&sample.distribution, sample.classes.iter().copied()),
                    distribution: sample.distribution,
                });
            }
        }
        claims.sort_by_key(claim_sort_key);
        io::write_jsonl(&self.path(CLAIMS), &claims)?;
        io::write_json(&self.path(TRUTH), &SimulationTruth { run_id: m.run_id.clone(), cells })?;
        summary.row("simulated cells", m.simulation.len() * m.topics.len());
        summary.row("claims written", claims.len());
        Ok(())
    }
}
