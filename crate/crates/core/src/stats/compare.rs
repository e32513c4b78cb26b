//! Cross-generator comparison over one joint clustering.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{jsd, StatsError};
use crate::backend::{embed_all, BackendError, Embedder, Entailer};
use crate::clustering::{cluster_claims_resume, split_large_clusters, ClusterError, ClusterParams, ClusterState};
use crate::domain::Claim;
use crate::exec::Execution;

/// Claims of one generator for a single topic.
#[derive(Debug, Clone)]
pub struct GeneratorClaims {
    pub id: String,
    pub claims: Vec<Claim>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsdMatrix {
    pub labels: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Debug, Error)]
pub enum CompareError {
    #[error("need at least two generators, got {0}")]
    TooFewGenerators(usize),
    #[error("generator {0} has no claims")]
    EmptyGenerator(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

pub fn jsd_matrix(
    sets: &[GeneratorClaims],
    embedder: &dyn Embedder,
    entailer: &dyn Entailer,
    params: &ClusterParams,
) -> Result<JsdMatrix, CompareError> {
    jsd_matrix_with(sets, embedder, entailer, params, Execution::default())
}

/// Pools every generator's claims (interleaved round-robin so no generator
/// is always clustered first), clusters them jointly, and compares the
/// generators' class distributions pairwise.
pub fn jsd_matrix_with(
    sets: &[GeneratorClaims],
    embedder: &dyn Embedder,
    entailer: &dyn Entailer,
    params: &ClusterParams,
    exec: Execution,
) -> Result<JsdMatrix, CompareError> {
    if sets.len() < 2 {
        return Err(CompareError::TooFewGenerators(sets.len()));
    }
    if let Some(empty) = sets.iter().find(|s| s.claims.is_empty()) {
        return Err(CompareError::EmptyGenerator(empty.id.clone()));
    }
    let mut pooled = Vec::new();
    let mut owner = Vec::new();
    let longest = sets.iter().map(|s| s.claims.len()).max().unwrap_or(0);
    for i in 0..longest {
        for (g, set) in sets.iter().enumerate() {
            if let Some(c) = set.claims.get(i) {
                pooled.push(c.clone());
                owner.push(g);
            }
        }
    }
    let texts: Vec<String> = pooled.iter().map(|c| c.text.clone()).collect();
    let embeddings = embed_all(embedder, &texts)?;
    let table = cluster_claims_resume(&pooled, &embeddings, entailer, params, ClusterState::default(), exec)?;
    let (table, _) = split_large_clusters(&table, &embeddings, params, exec)?;

    let k = table.num_clusters();
    let mut dists = vec![vec![0.0; k]; sets.len()];
    for (a, &g) in table.assignments.iter().zip(&owner) {
        dists[g][a.cluster_id] += 1.0;
    }
    for (d, set) in dists.iter_mut().zip(sets) {
        let n = set.claims.len() as f64;
        d.iter_mut().for_each(|x| *x /= n);
    }
    let mut matrix = vec![vec![0.0; sets.len()]; sets.len()];
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            let d = jsd(&dists[i], &dists[j])?;
            matrix[i][j] = d;
            matrix[j][i] = d;
        }
    }
    Ok(JsdMatrix { labels: sets.iter().map(|s| s.id.clone()).collect(), matrix })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::{MockEmbedder, MockEntailer, MockSpec};
    use crate::domain::{GenerationSetting, ResponseRef};

    fn claims_for(generator: &str, classes: &[usize]) -> GeneratorClaims {
        let r = ResponseRef {
            generator_id: generator.into(),
            prompt_id: Some("p".into()),
            setting: GenerationSetting::Ift,
            seed: 0,
        };
        let claims = classes
            .iter()
            .enumerate()
            .map(|(i, &c)| Claim {
                id: Claim::make_id("t", &r, 0, i as u32),
                topic_id: "t".into(),
                response_ref: r.clone(),
                chunk_index: 0,
                line_index: i as u32,
                text: format!("Fact {i} about class {c} [[k{c}]]."),
            })
            .collect();
        GeneratorClaims { id: generator.into(), claims }
    }

    fn backends() -> (MockEmbedder, MockEntailer) {
        (MockEmbedder::new(MockSpec::default()), MockEntailer::new(MockSpec::default()))
    }

    #[test]
    fn identical_streams() {
        let classes: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let (e, n) = backends();
        let m = jsd_matrix(&[claims_for("a", &classes), claims_for("b", &classes)], &e, &n, &ClusterParams::default())
            .unwrap();
        assert!(m.matrix[0][1].abs() < 1e-9);
    }

    #[test]
    fn disjoint_classes() {
        let (e, n) = backends();
        let a: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let b: Vec<usize> = (0..30).map(|i| 3 + i % 3).collect();
        let m = jsd_matrix(&[claims_for("a", &a), claims_for("b", &b)], &e, &n, &ClusterParams::default()).unwrap();
        assert!((m.matrix[0][1] - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn three_generators_shape() {
        let (e, n) = backends();
        let sets = [
            claims_for("a", &[0, 1, 2, 0]),
            claims_for("b", &[1, 2, 3]),
            claims_for("c", &[0, 0, 0, 5, 6]),
        ];
        let m = jsd_matrix(&sets, &e, &n, &ClusterParams::default()).unwrap();
        assert_eq!(m.labels, vec!["a", "b", "c"]);
        for i in 0..3 {
            assert_eq!(m.matrix[i][i], 0.0);
            for j in 0..3 {
                assert_eq!(m.matrix[i][j], m.matrix[j][i]);
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        let (e, n) = backends();
        assert!(matches!(
            jsd_matrix(&[claims_for("a", &[0])], &e, &n, &ClusterParams::default()),
            Err(CompareError::TooFewGenerators(1))
        ));
        assert!(matches!(
            jsd_matrix(&[claims_for("a", &[0]), claims_for("b", &[])], &e, &n, &ClusterParams::default()),
            Err(CompareError::EmptyGenerator(_))
        ));
    }
}
