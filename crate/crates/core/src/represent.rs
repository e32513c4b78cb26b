//! Matching generated claims against reference claim sets, and HSD over
//! the matched subset.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{embed_all, mutual_entailment, BackendError, Embedder, Entailer};
use crate::clustering::{nearest, EmbeddingMatrix};
use crate::domain::{AbundanceVector, Claim, DiversityReport, GenerationSetting, MeaningClassTable};
use crate::exec::Execution;
use crate::stats::{coverage, hsd};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceClaim {
    pub id: String,
    pub topic_id: String,
    /// BCP-47 tag.
    pub language: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub reference_claim_id: String,
    pub generated_claim_id: String,
    pub cosine: f64,
    pub mutual_entailment: bool,
    pub language: String,
}

#[derive(Debug, Error)]
pub enum RepresentError {
    #[error("no reference claims")]
    NoReferences,
    #[error("no generated claims outside the RAG setting")]
    NoGenerated,
    #[error("embedding backend is monolingual but references are in {found} while generated claims are in {generated}")]
    Monolingual { generated: String, found: String },
    #[error("matching failed after {} references: {source}", completed_refs.len())]
    Backend {
        source: BackendError,
        /// Matches of every reference that finished before the failure.
        completed: Vec<MatchRecord>,
        completed_refs: Vec<String>,
    },
}

impl From<BackendError> for RepresentError {
    fn from(source: BackendError) -> Self {
        RepresentError::Backend { source, completed: Vec::new(), completed_refs: Vec::new() }
    }
}

fn primary_subtag(tag: &str) -> String {
    tag.split(['-', '_']).next().unwrap_or(tag).to_ascii_lowercase()
}

/// For each reference claim, retrieves the `top_k` most similar generated
/// claims and keeps the mutually entailing pairs. RAG claims are ignored.
/// Output is sorted by (reference id, generated id).
pub fn match_claims(
    references: &[ReferenceClaim],
    generated: &[Claim],
    generated_language: &str,
    embedder: &dyn Embedder,
    entailer: &dyn Entailer,
    top_k: usize,
    exec: Execution,
) -> Result<Vec<MatchRecord>, RepresentError> {
    if references.is_empty() {
        return Err(RepresentError::NoReferences);
    }
    let generated: Vec<&Claim> =
        generated.iter().filter(|c| c.response_ref.setting != GenerationSetting::Rag).collect();
    if generated.is_empty() {
        return Err(RepresentError::NoGenerated);
    }
    if !embedder.multilingual() {
        let want = primary_subtag(generated_language);
        if let Some(r) = references.iter().find(|r| primary_subtag(&r.language) != want) {
            return Err(RepresentError::Monolingual {
                generated: generated_language.into(),
                found: r.language.clone(),
            });
        }
    }
    let gen_texts: Vec<String> = generated.iter().map(|c| c.text.clone()).collect();
    let gen_matrix = EmbeddingMatrix::new(&embed_all(embedder, &gen_texts)?);
    let ref_texts: Vec<String> = references.iter().map(|r| r.text.clone()).collect();
    let ref_emb = embed_all(embedder, &ref_texts)?;

    let per_ref = exec.map_range(references.len(), |i| {
        let r = &references[i];
        let mut found = Vec::new();
        for (k, cosine) in nearest(&gen_matrix, ref_emb[i].values(), generated.len(), top_k, Execution::Sequential) {
            if mutual_entailment(entailer, &r.text, &generated[k].text)?.is_some() {
                found.push(MatchRecord {
                    reference_claim_id: r.id.clone(),
                    generated_claim_id: generated[k].id.clone(),
                    cosine,
                    mutual_entailment: true,
                    language: r.language.clone(),
                });
            }
        }
        Ok::<_, BackendError>(found)
    });

    let mut out = Vec::new();
    let mut completed_refs = Vec::new();
    let mut failure = None;
    for (r, res) in references.iter().zip(per_ref) {
        match res {
            Ok(found) => {
                out.extend(found);
                completed_refs.push(r.id.clone());
            }
            Err(e) => failure = failure.or(Some(e)),
        }
    }
    out.sort_by(|a, b| {
        (&a.reference_claim_id, &a.generated_claim_id).cmp(&(&b.reference_claim_id, &b.generated_claim_id))
    });
    match failure {
        Some(source) => Err(RepresentError::Backend { source, completed: out, completed_refs }),
        None => Ok(out),
    }
}

/// HSD restricted to generated claims matched by at least one reference
/// in `language`. Each matched claim counts once however many references
/// matched it.
pub fn minimal_representativeness_hsd(
    table: &MeaningClassTable,
    matches: &[MatchRecord],
    language: &str,
    generator_id: &str,
    topic_id: &str,
    setting: GenerationSetting,
) -> DiversityReport {
    let matched: HashSet<&str> =
        matches.iter().filter(|m| m.language == language).map(|m| m.generated_claim_id.as_str()).collect();
    let labels: Vec<usize> = table
        .assignments
        .iter()
        .filter(|a| matched.contains(a.claim_id.as_str()))
        .map(|a| a.cluster_id)
        .collect();
    let v = AbundanceVector::from_labels(&labels);
    let mut report = DiversityReport {
        generator_id: generator_id.into(),
        topic_id: topic_id.into(),
        setting,
        n: v.n(),
        num_classes: v.num_classes() as u64,
        f1: v.f1(),
        f2: v.f2(),
        coverage: 0.0,
        hsd: 0.0,
        ci_low: None,
        ci_high: None,
        rarefied_to_coverage: None,
        hsd_unrarefied: 0.0,
        hsd_sd: None,
        resamples: None,
        seed: None,
        flags: Vec::new(),
    };
    if v.is_empty() {
        report.flags.push("Empty".into());
        return report;
    }
    let cov = coverage(&v);
    if !cov.defined {
        report.flags.push("CoverageUndefined".into());
    }
    report.coverage = cov.value;
    report.hsd = hsd(&v).expect("non-empty");
    report.hsd_unrarefied = report.hsd;
    report
}
