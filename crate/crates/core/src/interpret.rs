//! Instance-level interpretation of one feature: stratified segment
//! sampling, the activation-similarity matrix, anomaly flags and
//! max-activation token statistics.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, RwLock};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{cosine_similarity, embed_text, TextEmbedder};
use crate::error::{Error, Result};

pub const DEFAULT_THETA: f64 = 0.3;
pub const DEFAULT_BINS: usize = 8;
pub const DEFAULT_PER_BIN: usize = 5;

/// A tokenized text segment annotated with one feature's activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub feature_id: usize,
    pub segment_id: u64,
    pub tokens: Vec<String>,
    pub token_ids: Vec<u32>,
    pub activations: Vec<f32>,
    pub max_activation: f32,
    pub max_index: usize,
    pub text: String,
}

impl SegmentRecord {
    /// Builds a record, deriving the max statistics (first index wins ties).
    pub fn new(feature_id: usize, segment_id: u64, tokens: Vec<String>, token_ids: Vec<u32>, activations: Vec<f32>, text: String) -> Result<Self> {
        let (max_index, max_activation) = peak(&activations)
            .ok_or_else(|| Error::InvalidInput(format!("segment {segment_id} has no tokens")))?;
        let rec = SegmentRecord { feature_id, segment_id, tokens, token_ids, activations, max_activation, max_index, text };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.activations.len();
        if n == 0 || self.tokens.len() != n || self.token_ids.len() != n {
            return Err(Error::InvalidInput(format!(
                "segment {}: {} tokens, {} ids, {} activations",
                self.segment_id,
                self.tokens.len(),
                self.token_ids.len(),
                n
            )));
        }
        if !self.activations.iter().all(|a| a.is_finite()) {
            return Err(Error::NonFinite(format!("segment {} activations", self.segment_id)));
        }
        if peak(&self.activations) != Some((self.max_index, self.max_activation)) {
            return Err(Error::InvalidInput(format!("segment {}: max statistics disagree with activations", self.segment_id)));
        }
        Ok(())
    }
}

fn peak(values: &[f32]) -> Option<(usize, f32)> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best
}

/// Descending activation, then ascending segment id.
fn by_activation_desc(a: &SegmentRecord, b: &SegmentRecord) -> Ordering {
    b.max_activation
        .partial_cmp(&a.max_activation)
        .unwrap_or(Ordering::Equal)
        .then(a.segment_id.cmp(&b.segment_id))
}

/// Splits segments into `n_bins` equal-count quantile bins by max activation
/// and draws up to `per_bin` from each with a seeded generator. The global
/// top segment is always included and uses one slot of its bin's quota.
/// Output is ordered by descending activation.
pub fn stratified_sample(segments: &[SegmentRecord], n_bins: usize, per_bin: usize, seed: u64) -> Vec<SegmentRecord> {
    if segments.is_empty() {
        return Vec::new();
    }
    let n_bins = n_bins.max(1);
    let mut ordered: Vec<&SegmentRecord> = segments.iter().collect();
    ordered.sort_by(|a, b| by_activation_desc(b, a));
    let n = ordered.len();
    let mut picked: Vec<&SegmentRecord> = Vec::new();
    if n <= n_bins * per_bin {
        picked.clone_from(&ordered);
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in 0..n_bins {
            let (lo, hi) = (b * n / n_bins, (b + 1) * n / n_bins);
            let bin = &ordered[lo..hi];
            if b + 1 == n_bins {
                // The global top is the last element of the highest bin.
                let (top, rest) = bin.split_last().expect("highest bin is non-empty");
                picked.push(top);
                let take = per_bin.saturating_sub(1).min(rest.len());
                picked.extend(sample(&mut rng, rest.len(), take).into_iter().map(|i| rest[i]));
            } else {
                let take = per_bin.min(bin.len());
                picked.extend(sample(&mut rng, bin.len(), take).into_iter().map(|i| bin[i]));
            }
        }
    }
    if picked.is_empty() {
        picked.push(ordered[n - 1]);
    }
    let mut out: Vec<SegmentRecord> = picked.into_iter().cloned().collect();
    out.sort_by(by_activation_desc);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    #[serde(rename = "diagonal")]
    Diagonal,
    /// Fires strongly but reads unlike the explanation.
    #[serde(rename = "high-act/low-sim")]
    HighActLowSim,
    #[serde(rename = "low-act/high-sim")]
    LowActHighSim,
}

impl Region {
    pub fn classify(activation_rank: usize, similarity_rank: usize, n: usize, theta: f64) -> Region {
        if discrepancy(activation_rank, similarity_rank, n).abs() <= theta {
            Region::Diagonal
        } else if activation_rank < similarity_rank {
            Region::HighActLowSim
        } else {
            Region::LowActHighSim
        }
    }
}

/// `(activation_rank - similarity_rank) / n`.
pub fn discrepancy(activation_rank: usize, similarity_rank: usize, n: usize) -> f64 {
    (activation_rank as f64 - similarity_rank as f64) / n.max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub segment_id: u64,
    /// 1-based rank by descending similarity.
    pub similarity_rank: usize,
    /// 1-based rank by descending max activation.
    pub activation_rank: usize,
    pub similarity: f32,
    pub max_activation: f32,
    pub region: Region,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    /// In input order.
    pub cells: Vec<MatrixCell>,
    pub warnings: Vec<String>,
}

/// Read-through cache of segment text embeddings keyed by
/// `(feature id, segment id)`.
#[derive(Debug, Default)]
pub struct SegmentEmbeddingCache {
    map: RwLock<HashMap<(usize, u64), Arc<Vec<f32>>>>,
}

impl SegmentEmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_embed(&self, segment: &SegmentRecord, embedder: &dyn TextEmbedder) -> Result<Arc<Vec<f32>>> {
        let key = (segment.feature_id, segment.segment_id);
        if let Some(v) = self.map.read().expect("cache lock").get(&key) {
            return Ok(v.clone());
        }
        let v = Arc::new(embed_text(embedder, &segment.text)?);
        self.map.write().expect("cache lock").entry(key).or_insert(v.clone());
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// 1-based ranks of `values` sorted descending, ties by ascending id.
pub fn descending_ranks(values: &[f32], ids: &[u64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(Ordering::Equal)
            .then(ids[a].cmp(&ids[b]))
    });
    let mut ranks = vec![0; values.len()];
    for (r, &i) in order.iter().enumerate() {
        ranks[i] = r + 1;
    }
    ranks
}

/// Ranks segments by similarity of their text to the explanation and by
/// max activation, and tags each with its region.
pub fn activation_similarity_matrix(
    explanation_embedding: &[f32],
    segments: &[SegmentRecord],
    embedder: &dyn TextEmbedder,
    cache: Option<&SegmentEmbeddingCache>,
    theta: f64,
) -> Result<SimilarityMatrix> {
    let mut warnings = Vec::new();
    let mut kept: Vec<(&SegmentRecord, f32)> = Vec::with_capacity(segments.len());
    for seg in segments {
        let emb = match cache {
            Some(c) => c.get_or_embed(seg, embedder),
            None => embed_text(embedder, &seg.text).map(Arc::new),
        };
        let sim = emb.and_then(|e| cosine_similarity(&e, explanation_embedding));
        match sim {
            Ok(s) => kept.push((seg, s)),
            Err(e) if e.is_retryable() || matches!(e, Error::InvalidInput(_) | Error::Shape { .. }) => {
                tracing::warn!(segment = seg.segment_id, "segment skipped: {e}");
                warnings.push(format!("segment {} skipped: {e}", seg.segment_id));
            }
            Err(e) => return Err(e),
        }
    }
    let ids: Vec<u64> = kept.iter().map(|(s, _)| s.segment_id).collect();
    let sims: Vec<f32> = kept.iter().map(|(_, s)| *s).collect();
    let acts: Vec<f32> = kept.iter().map(|(s, _)| s.max_activation).collect();
    let sim_rank = descending_ranks(&sims, &ids);
    let act_rank = descending_ranks(&acts, &ids);
    let n = kept.len();
    let cells = kept
        .iter()
        .enumerate()
        .map(|(i, (seg, sim))| MatrixCell {
            segment_id: seg.segment_id,
            similarity_rank: sim_rank[i],
            activation_rank: act_rank[i],
            similarity: *sim,
            max_activation: seg.max_activation,
            region: Region::classify(act_rank[i], sim_rank[i], n, theta),
        })
        .collect();
    Ok(SimilarityMatrix { cells, warnings })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anomaly {
    pub segment_id: u64,
    pub region: Region,
    /// `|activation_rank - similarity_rank| / n`.
    pub discrepancy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub theta: f64,
    /// Largest discrepancy first, ties by segment id.
    pub flagged: Vec<Anomaly>,
}

pub fn detect_anomalies(cells: &[MatrixCell], theta: f64) -> AnomalyReport {
    let n = cells.len();
    let mut flagged: Vec<Anomaly> = cells
        .iter()
        .filter_map(|c| {
            let d = discrepancy(c.activation_rank, c.similarity_rank, n).abs();
            (d > theta).then(|| Anomaly {
                segment_id: c.segment_id,
                region: Region::classify(c.activation_rank, c.similarity_rank, n, theta),
                discrepancy: d,
            })
        })
        .collect();
    flagged.sort_by(|a, b| {
        b.discrepancy
            .partial_cmp(&a.discrepancy)
            .unwrap_or(Ordering::Equal)
            .then(a.segment_id.cmp(&b.segment_id))
    });
    AnomalyReport { theta, flagged }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenStat {
    pub token: String,
    pub count: usize,
    pub max_activation: f32,
}

/// Tallies each segment's max-activation token, over `selection` (segment
/// ids) when given. Sorted by count, then activation, both descending.
pub fn max_activation_token_stats(segments: &[SegmentRecord], selection: Option<&[u64]>) -> Vec<TokenStat> {
    let mut tally: BTreeMap<&str, (usize, f32)> = BTreeMap::new();
    for seg in segments {
        if selection.is_some_and(|sel| !sel.contains(&seg.segment_id)) {
            continue;
        }
        let entry = tally.entry(seg.tokens[seg.max_index].as_str()).or_insert((0, f32::NEG_INFINITY));
        entry.0 += 1;
        entry.1 = entry.1.max(seg.max_activation);
    }
    let mut stats: Vec<TokenStat> = tally
        .into_iter()
        .map(|(token, (count, max_activation))| TokenStat { token: token.to_string(), count, max_activation })
        .collect();
    stats.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then(b.max_activation.partial_cmp(&a.max_activation).unwrap_or(Ordering::Equal))
            .then(a.token.cmp(&b.token))
    });
    stats
}
