use crate::backend::{dot, EmbeddingVector};
use crate::exec::Execution;

/// Row-major copy of a set of unit vectors for fast similarity scans.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    data: Vec<f32>,
    dim: usize,
}

impl EmbeddingMatrix {
    pub fn new(vectors: &[EmbeddingVector]) -> Self {
        let dim = vectors.first().map_or(0, |v| v.dim());
        let mut data = Vec::with_capacity(vectors.len() * dim);
        for v in vectors {
            data.extend_from_slice(v.values());
        }
        EmbeddingMatrix { data, dim }
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn cosine(&self, i: usize, j: usize) -> f64 {
        dot(self.row(i), self.row(j))
    }
}

/// Rows per parallel task in the similarity scan.
const SCAN_BLOCK: usize = 512;

/// The `n` rows before `j` most similar to row `j`, best first, as
/// `(row, cosine)`. Equal similarities rank the earlier row first.
pub fn top_n(m: &EmbeddingMatrix, j: usize, n: usize, exec: Execution) -> Vec<(usize, f64)> {
    nearest(m, m.row(j), j, n, exec)
}

/// The `n` rows among the first `limit` most similar to `query`, ranked as
/// in [`top_n`].
pub fn nearest(m: &EmbeddingMatrix, query: &[f32], limit: usize, n: usize, exec: Execution) -> Vec<(usize, f64)> {
    if n == 0 {
        return Vec::new();
    }
    let scan = |start: usize| {
        let mut best = Vec::with_capacity(n + 1);
        for k in start..(start + SCAN_BLOCK).min(limit) {
            insert(&mut best, (k, dot(query, m.row(k))), n);
        }
        best
    };
    let blocks = limit.div_ceil(SCAN_BLOCK);
    let exec = if blocks > 1 { exec } else { Execution::Sequential };
    let partial = exec.map_range(blocks, |b| scan(b * SCAN_BLOCK));
    let mut best = Vec::with_capacity(n + 1);
    for cand in partial.into_iter().flatten() {
        insert(&mut best, cand, n);
    }
    best
}

fn ranks_before(a: (usize, f64), b: (usize, f64)) -> bool {
    a.1 > b.1 || (a.1 == b.1 && a.0 < b.0)
}

fn insert(best: &mut Vec<(usize, f64)>, cand: (usize, f64), n: usize) {
    if best.len() == n && !ranks_before(cand, best[n - 1]) {
        return;
    }
    let pos = best.iter().position(|&b| ranks_before(cand, b)).unwrap_or(best.len());
    best.insert(pos, cand);
    best.truncate(n);
}
