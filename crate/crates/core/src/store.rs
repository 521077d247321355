//! Exact cosine-similarity retrieval over the explanation embeddings of
//! every loaded SAE.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, l2_norm, Matrix};

/// Explanation embeddings for one SAE, one row per feature.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    pub sae_id: String,
    pub layer_index: usize,
    matrix: Matrix,
    norms: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(sae_id: impl Into<String>, layer_index: usize, matrix: Matrix) -> Result<Self> {
        let sae_id = sae_id.into();
        matrix.ensure_finite(&format!("embeddings of {sae_id}"))?;
        let norms: Vec<f32> = matrix.iter_rows().map(l2_norm).collect();
        if let Some(row) = norms.iter().position(|n| *n == 0.0) {
            return Err(Error::InvalidInput(format!("embedding row {row} of {sae_id} is zero")));
        }
        Ok(EmbeddingMatrix {
            sae_id,
            layer_index,
            matrix,
            norms,
        })
    }

    pub fn n_features(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn row(&self, feature_id: usize) -> &[f32] {
        self.matrix.row(feature_id)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    /// Cosine similarity of `query` (with precomputed norm) to every row.
    fn scores<'a>(&'a self, query: &'a [f32], query_norm: f32) -> impl Iterator<Item = f32> + 'a {
        self.matrix
            .iter_rows()
            .zip(&self.norms)
            .map(move |(row, n)| (dot(row, query) / (n * query_norm)).clamp(-1.0, 1.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityHit {
    pub sae_id: String,
    pub feature_id: usize,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Scope {
    All,
    Sae(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// Number of scores binned.
    pub n_scored: usize,
    pub min: f32,
    pub max: f32,
    /// `n_bins + 1` uniform edges from `min` to `max`.
    pub edges: Vec<f32>,
    pub counts: Vec<usize>,
}

/// Immutable collection of per-SAE embedding matrices, ordered by `sae_id`.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingStore {
    saes: Vec<EmbeddingMatrix>,
}

/// Heap entry ordered so that the *worst* hit is the heap maximum.
struct Ranked {
    score: f32,
    sae: usize,
    feature: usize,
}

impl Ranked {
    /// Better hits compare as `Less`.
    fn rank_cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then(self.sae.cmp(&other.sae))
            .then(self.feature.cmp(&other.feature))
    }
}

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.rank_cmp(other) == Ordering::Equal
    }
}
impl Eq for Ranked {}
impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank_cmp(other)
    }
}

impl EmbeddingStore {
    pub fn new(mut saes: Vec<EmbeddingMatrix>) -> Result<Self> {
        saes.sort_by(|a, b| a.sae_id.cmp(&b.sae_id));
        if let Some(w) = saes.windows(2).find(|w| w[0].sae_id == w[1].sae_id) {
            return Err(Error::InvalidInput(format!("duplicate SAE id {}", w[0].sae_id)));
        }
        if let Some(first) = saes.first() {
            if let Some(bad) = saes.iter().find(|s| s.dim() != first.dim()) {
                return Err(Error::shape(
                    format!("embedding width of {}", bad.sae_id),
                    first.dim(),
                    bad.dim(),
                ));
            }
        }
        Ok(EmbeddingStore { saes })
    }

    pub fn saes(&self) -> &[EmbeddingMatrix] {
        &self.saes
    }

    pub fn get(&self, sae_id: &str) -> Option<&EmbeddingMatrix> {
        self.saes.iter().find(|s| s.sae_id == sae_id)
    }

    pub fn total_features(&self) -> usize {
        self.saes.iter().map(EmbeddingMatrix::n_features).sum()
    }

    pub fn dim(&self) -> Option<usize> {
        self.saes.first().map(EmbeddingMatrix::dim)
    }

    fn prepare_query(&self, query: &[f32]) -> Result<f32> {
        let dim = self.dim().ok_or(Error::EmptyStore)?;
        if self.total_features() == 0 {
            return Err(Error::EmptyStore);
        }
        if query.len() != dim {
            return Err(Error::shape("query embedding", dim, query.len()));
        }
        let n = l2_norm(query);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::InvalidInput("query embedding must be finite and nonzero".into()));
        }
        Ok(n)
    }

    /// Scores of every feature in scope, grouped by SAE in store order.
    pub fn all_scores(&self, query: &[f32], scope: &Scope) -> Result<Vec<(usize, Vec<f32>)>> {
        let qn = self.prepare_query(query)?;
        let selected: Vec<usize> = match scope {
            Scope::All => (0..self.saes.len()).collect(),
            Scope::Sae(id) => vec![self
                .saes
                .iter()
                .position(|s| &s.sae_id == id)
                .ok_or_else(|| Error::NotFound(format!("SAE {id}")))?],
        };
        Ok(selected
            .into_iter()
            .map(|i| (i, self.saes[i].scores(query, qn).collect()))
            .collect())
    }

    /// The `k` most similar features, best first; ties go to the smaller
    /// `(sae_id, feature_id)`.
    pub fn top_k_features(&self, query: &[f32], k: usize, scope: &Scope) -> Result<Vec<SimilarityHit>> {
        if k == 0 {
            return Err(Error::InvalidInput("K must be >= 1".into()));
        }
        let mut heap: BinaryHeap<Ranked> = BinaryHeap::with_capacity(k + 1);
        for (sae, scores) in self.all_scores(query, scope)? {
            for (feature, score) in scores.into_iter().enumerate() {
                let cand = Ranked { score, sae, feature };
                if heap.len() < k {
                    heap.push(cand);
                } else if let Some(worst) = heap.peek() {
                    if cand < *worst {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
        }
        Ok(heap
            .into_sorted_vec()
            .into_iter()
            .map(|r| SimilarityHit {
                sae_id: self.saes[r.sae].sae_id.clone(),
                feature_id: r.feature,
                score: r.score,
            })
            .collect())
    }

    /// Histogram of the scores of the `n_top` best-matching features.
    pub fn similarity_histogram(&self, query: &[f32], n_top: usize, n_bins: usize) -> Result<Histogram> {
        if n_bins == 0 {
            return Err(Error::InvalidInput("n_bins must be >= 1".into()));
        }
        let hits = self.top_k_features(query, n_top.max(1), &Scope::All)?;
        let scores: Vec<f32> = hits.iter().map(|h| h.score).collect();
        Ok(histogram(&scores, n_bins))
    }
}

pub fn histogram(scores: &[f32], n_bins: usize) -> Histogram {
    let min = scores.iter().copied().fold(f32::INFINITY, f32::min);
    let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let (min, max) = if scores.is_empty() { (0.0, 0.0) } else { (min, max) };
    let width = (max - min) / n_bins as f32;
    let edges = (0..=n_bins)
        .map(|i| if i == n_bins { max } else { min + width * i as f32 })
        .collect();
    let mut counts = vec![0usize; n_bins];
    for s in scores {
        let bin = if max > min {
            (((s - min) / (max - min)) * n_bins as f32) as usize
        } else {
            0
        };
        counts[bin.min(n_bins - 1)] += 1;
    }
    Histogram {
        n_scored: scores.len(),
        min,
        max,
        edges,
        counts,
    }
}
