use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{claim_sort_key, Pipeline, PipelineError, SharedAppender, Stage, StageSummary, CLAIMS, DECOMPOSE_PROGRESS, RESPONSES};
use crate::corpus::{decompose_response, DecompositionPromptId};
use crate::domain::ResponseRecord;
use crate::io;

/// Written after all claims of a response are appended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct DecomposeProgress {
    response_key: String,
    prompt: DecompositionPromptId,
    claims: usize,
    degenerate_chunks: Vec<u32>,
}

impl Pipeline {
    pub(super) fn decompose(&self, summary: &mut StageSummary) -> Result<(), PipelineError> {
        let prompt = self.options.decomposition_prompt.unwrap_or(self.manifest.decomposition_prompt);
        let responses: Vec<ResponseRecord> = io::read_jsonl(&self.path(RESPONSES))?;
        let done: HashSet<String> = io::read_jsonl::<DecomposeProgress>(&self.path(DECOMPOSE_PROGRESS))?
            .into_iter()
            .map(|p| p.response_key)
            .collect();
        let pending: Vec<&ResponseRecord> = responses.iter().filter(|r| !done.contains(&r.key())).collect();
        summary.row("decomposition prompt", prompt);
        summary.row("responses", responses.len());
        summary.row("already decomposed", responses.len() - pending.len());

        let claims_out = SharedAppender::open(&self.path(CLAIMS))?;
        let progress_out = SharedAppender::open(&self.path(DECOMPOSE_PROGRESS))?;
        let results = self.options.exec.map_slice(&pending, |resp| {
            let key = resp.key();
            let label = format!("{}/{}/{}/{}", resp.generator_id, resp.topic_id, resp.setting, resp.seed);
            let Some(topic) = self.manifest.topic(&resp.topic_id) else {
                self.fail(Stage::Decompose, label, "UnknownTopic", format!("topic `{}` is not in the manifest", resp.topic_id));
                return Ok((0, 0));
            };
            let seed = self.cell_seed(Stage::Decompose, &key);
            match decompose_response(self.backends.decomposer.as_ref(), resp, topic, prompt, seed) {
                Ok(d) => {
                    claims_out.append_all(&d.claims)?;
                    let degenerate = d.degenerate_chunks.len();
                    progress_out.append(&DecomposeProgress {
                        response_key: key,
                        prompt,
                        claims: d.claims.len(),
                        degenerate_chunks: d.degenerate_chunks,
                    })?;
                    Ok((d.claims.len(), degenerate))
                }
                Err(e) => {
                    self.fail(Stage::Decompose, label, e.code(), e);
                    Ok((0, 0))
                }
            }
        });
        let (mut new_claims, mut degenerate) = (0, 0);
        for r in results {
            let (c, d) = r.map_err(PipelineError::Io)?;
            new_claims += c;
            degenerate += d;
        }
        drop(claims_out);
        drop(progress_out);

        let claims = io::normalize_jsonl(&self.path(CLAIMS), claim_sort_key)?;
        io::normalize_jsonl(&self.path(DECOMPOSE_PROGRESS), |p: &DecomposeProgress| p.response_key.clone())?;
        summary.row("claims written", new_claims);
        summary.row("claims total", claims.len());
        summary.row("degenerate chunks", degenerate);
        Ok(())
    }
}

