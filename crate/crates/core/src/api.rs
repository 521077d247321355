//! Request and response types of the explorer API and the operations
//! behind them. The HTTP service and the command line both call into
//! [`Explorer`], so their JSON output is the same.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::atlas::{HslColor, TopicTerm, Zoom};
use crate::embed::embed_text;
use crate::error::Error;
use crate::interpret::{
    activation_similarity_matrix, detect_anomalies, max_activation_token_stats, stratified_sample, AnomalyReport,
    MatrixCell, SegmentEmbeddingCache, SegmentRecord, TokenStat, DEFAULT_BINS, DEFAULT_PER_BIN, DEFAULT_THETA,
};
use crate::lab::{co_activated_features, probe_input, steer_generate, CoActivationSet, ProbeResult, SteeringBranch, DEFAULT_STRENGTHS};
use crate::model::GenerationSettings;
use crate::pack::{FeaturePack, PackRegistry};
use crate::retrieval::{
    layer_relevance_distribution, rank_from_counts, rewrite_query, ActiveText, LayerCounts, QueryRewriter, SaeRanking,
    DEFAULT_K_SET,
};
use crate::store::{Histogram, Scope, SimilarityHit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplorerConfig {
    pub top_k: usize,
    pub histogram_top: usize,
    pub histogram_bins: usize,
    pub k_set: Vec<usize>,
    /// Features highlighted in the atlas and used to place the query pin.
    pub highlight_top: usize,
    pub vocab_top: usize,
    pub sample_bins: usize,
    pub sample_per_bin: usize,
    pub theta: f64,
    pub seed: u64,
    pub coactivation_top: usize,
    pub max_new_tokens: usize,
}

impl Default for ExplorerConfig {
    fn default() -> Self {
        ExplorerConfig {
            top_k: 20,
            histogram_top: 2000,
            histogram_bins: 20,
            k_set: DEFAULT_K_SET.to_vec(),
            highlight_top: 50,
            vocab_top: 10,
            sample_bins: DEFAULT_BINS,
            sample_per_bin: DEFAULT_PER_BIN,
            theta: DEFAULT_THETA,
            seed: 42,
            coactivation_top: 10,
            max_new_tokens: 12,
        }
    }
}

/// Machine-readable error carried by every 4xx response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub detail: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: u16,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: u16, code: &str, message: impl Into<String>) -> Self {
        ApiError { status, body: ErrorBody { code: code.into(), message: message.into(), detail: None } }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(400, "invalid_input", message)
    }

    pub fn with_detail(mut self, detail: serde_json::Value) -> Self {
        self.body.detail = Some(detail);
        self
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}: {}", self.status, self.body.code, self.body.message)
    }
}

impl std::error::Error for ApiError {}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::InvalidInput(_) => ApiError::new(400, "invalid_input", message),
            Error::ContextOverflow { needed, max_context } => ApiError::new(400, "context_overflow", message)
                .with_detail(serde_json::json!({ "needed": needed, "max_context": max_context })),
            Error::OutOfRange { what, index, limit } => {
                let (status, code) = if what.starts_with("feature") { (404, "feature_not_found") } else { (400, "out_of_range") };
                ApiError::new(status, code, message)
                    .with_detail(serde_json::json!({ "what": what, "index": index, "limit": limit }))
            }
            Error::NotFound(_) => ApiError::new(404, "not_found", message),
            Error::Remote(_) => ApiError::new(502, "remote_unavailable", message),
            Error::EmptyStore => ApiError::new(503, "empty_store", message),
            _ => ApiError::new(500, "internal", message),
        }
    }
}

pub type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub packs: usize,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeSummary {
    pub sae_id: String,
    pub layer_index: usize,
    pub n_features: usize,
    pub d_model: usize,
    pub activation: String,
    pub provenance: String,
    pub format_version: u32,
    /// Present when the listing was requested with a query.
    pub relevance: Option<SaeRanking>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeList {
    pub query: Option<String>,
    pub saes: Vec<SaeSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub text: String,
    /// Run the query with the rewriter's suggestion instead of the raw text.
    #[serde(default)]
    pub use_suggestion: bool,
    #[serde(default)]
    pub top_k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureHit {
    pub sae_id: String,
    pub layer_index: usize,
    pub feature_id: usize,
    pub score: f32,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    /// Stable id of the active text's embedding.
    pub query_id: String,
    pub raw_text: String,
    pub suggestion: String,
    pub active: ActiveText,
    pub active_text: String,
    pub embedder: String,
    /// Similarity histogram of the active text's top features.
    pub histogram: Histogram,
    /// Same histogram for the text that is not active, for comparison.
    pub alternative_histogram: Histogram,
    pub layer_counts: Vec<LayerCounts>,
    pub rankings: Vec<SaeRanking>,
    pub top_hits: Vec<FeatureHit>,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterView {
    pub id: usize,
    pub level: usize,
    pub parent: Option<usize>,
    pub size: usize,
    pub centroid: Option<[f32; 2]>,
    pub topics: Vec<TopicTerm>,
    pub color: Option<String>,
    pub hsl: Option<HslColor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasCell {
    pub q: i64,
    pub r: i64,
    pub center: [f64; 2],
    pub count: usize,
    pub dominant_cluster: usize,
    pub color: String,
    pub members: Vec<usize>,
    /// Members that are among the query's highlighted features.
    pub highlighted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryHighlight {
    pub text: String,
    /// Best-matching features of this SAE, best first.
    pub feature_ids: Vec<usize>,
    pub scores: Vec<f32>,
    /// Similarity-weighted centroid of the highlighted features.
    pub pin: [f32; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasResponse {
    pub sae_id: String,
    pub zoom: Zoom,
    pub cluster_level: usize,
    pub n_clusters: usize,
    pub cell_size: f64,
    pub origin: [f64; 2],
    pub cells: Vec<AtlasCell>,
    pub clusters: Vec<ClusterView>,
    pub palette_fallback: bool,
    pub highlight: Option<QueryHighlight>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScoreView {
    pub token: String,
    pub token_id: u32,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabProjectionView {
    pub top: Vec<TokenScoreView>,
    pub bottom: Vec<TokenScoreView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureResponse {
    pub sae_id: String,
    pub layer_index: usize,
    pub feature_id: usize,
    pub explanation: String,
    pub coords: [f32; 2],
    /// Node id holding the feature at each cluster level, coarsest first.
    pub cluster_path: Vec<usize>,
    pub color: Option<String>,
    pub vocab_projection: VocabProjectionView,
    pub matrix: Vec<MatrixCell>,
    pub matrix_warnings: Vec<String>,
    pub anomalies: AnomalyReport,
    /// Over the selected segments, or all sampled segments.
    pub token_stats: Vec<TokenStat>,
    pub selection: Option<Vec<u64>>,
    pub segments: Vec<SegmentRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoactivateRequest {
    pub text: String,
    pub anchors: Vec<usize>,
    #[serde(default)]
    pub top_n: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerRequest {
    pub prompt: String,
    #[serde(default)]
    pub strengths: Option<Vec<f32>>,
    #[serde(default)]
    pub settings: Option<GenerationSettings>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerResponse {
    pub sae_id: String,
    pub feature_id: usize,
    pub prompt: String,
    pub settings: GenerationSettings,
    /// Unsteered generation.
    pub baseline: SteeringBranch,
    pub branches: Vec<SteeringBranch>,
}

/// FNV-1a over the embedder name and text, as a stable id.
fn query_id(embedder: &str, text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in embedder.bytes().chain([0u8]).chain(text.bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("q-{h:016x}")
}

fn require_text(text: &str, what: &str) -> ApiResult<()> {
    if text.trim().is_empty() {
        Err(ApiError::new(400, "empty_text", format!("{what} must not be empty")))
    } else {
        Ok(())
    }
}

pub struct Explorer {
    pub registry: PackRegistry,
    pub config: ExplorerConfig,
    rewriter: Box<dyn QueryRewriter>,
    segment_cache: SegmentEmbeddingCache,
}

impl Explorer {
    pub fn new(registry: PackRegistry, rewriter: Box<dyn QueryRewriter>, config: ExplorerConfig) -> Self {
        Explorer { registry, config, rewriter, segment_cache: SegmentEmbeddingCache::new() }
    }

    fn pack(&self, sae_id: &str) -> ApiResult<&FeaturePack> {
        self.registry
            .pack(sae_id)
            .map_err(|_| ApiError::new(404, "sae_not_found", format!("no SAE with id {sae_id:?}")))
    }

    fn feature_pack(&self, sae_id: &str, feature_id: usize) -> ApiResult<&FeaturePack> {
        let pack = self.pack(sae_id)?;
        pack.check_feature(feature_id)?;
        Ok(pack)
    }

    fn embed(&self, text: &str) -> ApiResult<Vec<f32>> {
        Ok(embed_text(self.registry.embedder.as_ref(), text)?)
    }

    pub fn health(&self) -> Health {
        Health {
            status: "ok".into(),
            packs: self.registry.packs.len(),
            diagnostics: self.registry.diagnostics.clone(),
        }
    }

    pub fn saes(&self, query: Option<&str>) -> ApiResult<SaeList> {
        let rankings = match query {
            Some(q) => {
                require_text(q, "query")?;
                let emb = self.embed(q)?;
                let counts = layer_relevance_distribution(&self.registry.store, &emb, &self.config.k_set)?;
                Some(rank_from_counts(&counts))
            }
            None => None,
        };
        let saes = self
            .registry
            .packs
            .iter()
            .map(|p| SaeSummary {
                sae_id: p.sae_id().to_string(),
                layer_index: p.manifest.layer_index,
                n_features: p.n_features(),
                d_model: p.manifest.d_model,
                activation: p.manifest.activation.clone(),
                provenance: p.manifest.provenance.clone(),
                format_version: p.manifest.format_version,
                relevance: rankings
                    .as_ref()
                    .and_then(|r| r.iter().find(|r| r.sae_id == p.sae_id()).cloned()),
            })
            .collect();
        Ok(SaeList { query: query.map(str::to_string), saes })
    }

    pub fn query(&self, req: &QueryRequest) -> ApiResult<QueryResponse> {
        let start = Instant::now();
        require_text(&req.text, "query text")?;
        let raw_text = req.text.trim().to_string();
        let suggestion = rewrite_query(self.rewriter.as_ref(), &raw_text)?;
        let (active, active_text, other_text) = if req.use_suggestion {
            (ActiveText::Optimized, suggestion.clone(), raw_text.clone())
        } else {
            (ActiveText::Raw, raw_text.clone(), suggestion.clone())
        };
        let store = &self.registry.store;
        let emb = self.embed(&active_text)?;
        let other = self.embed(&other_text)?;
        let histogram = store.similarity_histogram(&emb, self.config.histogram_top, self.config.histogram_bins)?;
        let alternative_histogram =
            store.similarity_histogram(&other, self.config.histogram_top, self.config.histogram_bins)?;
        let layer_counts = layer_relevance_distribution(store, &emb, &self.config.k_set)?;
        let rankings = rank_from_counts(&layer_counts);
        let top_k = req.top_k.unwrap_or(self.config.top_k);
        let top_hits = store
            .top_k_features(&emb, top_k, &Scope::All)?
            .into_iter()
            .map(|h| self.hit(h))
            .collect::<ApiResult<Vec<_>>>()?;
        Ok(QueryResponse {
            query_id: query_id(self.registry.embedder.name(), &active_text),
            raw_text,
            suggestion,
            active,
            active_text,
            embedder: self.registry.embedder.name().to_string(),
            histogram,
            alternative_histogram,
            layer_counts,
            rankings,
            top_hits,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    fn hit(&self, h: SimilarityHit) -> ApiResult<FeatureHit> {
        let pack = self.pack(&h.sae_id)?;
        Ok(FeatureHit {
            layer_index: pack.manifest.layer_index,
            explanation: pack.explanations[h.feature_id].clone(),
            sae_id: h.sae_id,
            feature_id: h.feature_id,
            score: h.score,
        })
    }

    pub fn atlas(&self, sae_id: &str, zoom: Zoom, query: Option<&str>, k: Option<usize>) -> ApiResult<AtlasResponse> {
        let pack = self.pack(sae_id)?;
        let derived = pack.derived()?;
        let level = derived
            .hexbins
            .get(&zoom)
            .ok_or_else(|| ApiError::new(404, "not_found", format!("no hexbins for zoom {}", zoom.as_str())))?;
        let tree = &derived.clusters;
        let highlight = match query {
            Some(q) => {
                require_text(q, "query")?;
                let emb = self.embed(q)?;
                let k = k.unwrap_or(self.config.highlight_top).max(1);
                let hits = self.registry.store.top_k_features(&emb, k, &Scope::Sae(sae_id.to_string()))?;
                let weights: Vec<f64> = hits.iter().map(|h| (h.score as f64).max(0.0)).collect();
                let total: f64 = weights.iter().sum();
                let mut pin = [0.0f64; 2];
                for (h, w) in hits.iter().zip(&weights) {
                    let w = if total > 0.0 { w / total } else { 1.0 / hits.len() as f64 };
                    pin[0] += w * derived.layout.get(h.feature_id, 0) as f64;
                    pin[1] += w * derived.layout.get(h.feature_id, 1) as f64;
                }
                Some(QueryHighlight {
                    text: q.to_string(),
                    feature_ids: hits.iter().map(|h| h.feature_id).collect(),
                    scores: hits.iter().map(|h| h.score).collect(),
                    pin: [pin[0] as f32, pin[1] as f32],
                })
            }
            None => None,
        };
        let highlighted: std::collections::HashSet<usize> =
            highlight.iter().flat_map(|h| h.feature_ids.iter().copied()).collect();
        let cells = level
            .cells
            .iter()
            .map(|c| AtlasCell {
                q: c.q,
                r: c.r,
                center: c.center,
                count: c.count,
                dominant_cluster: c.dominant_cluster,
                color: c.color.to_hex(),
                highlighted: c.members.iter().filter(|m| highlighted.contains(m)).count(),
                members: c.members.clone(),
            })
            .collect();
        let clusters: Vec<ClusterView> = tree
            .level_nodes(level.cluster_level)
            .map(|n| ClusterView {
                id: n.id,
                level: n.level,
                parent: n.parent,
                size: n.members.len(),
                centroid: n.centroid,
                topics: n.topics.clone(),
                color: n.color.map(|c| c.to_hex()),
                hsl: n.color,
            })
            .collect();
        Ok(AtlasResponse {
            sae_id: sae_id.to_string(),
            zoom,
            cluster_level: level.cluster_level,
            n_clusters: clusters.len(),
            cell_size: level.cell_size,
            origin: level.origin,
            cells,
            clusters,
            palette_fallback: tree.palette_fallback.get(level.cluster_level).copied().unwrap_or(false),
            highlight,
        })
    }

    pub fn feature(&self, sae_id: &str, feature_id: usize, selection: Option<&[u64]>) -> ApiResult<FeatureResponse> {
        let pack = self.feature_pack(sae_id, feature_id)?;
        let derived = pack.derived()?;
        let tree = &derived.clusters;
        let model = &self.registry.model;
        let projection = pack.sae.vocabulary_projection(feature_id, &model.weights.unembedding, self.config.vocab_top)?;
        let view = |scores: &[crate::sae::TokenScore]| -> Vec<TokenScoreView> {
            scores
                .iter()
                .map(|s| TokenScoreView {
                    token: model.tokenizer.token(s.token_id).unwrap_or("<unk>").to_string(),
                    token_id: s.token_id,
                    score: s.score,
                })
                .collect()
        };
        let stored: Vec<SegmentRecord> = pack.segments_for(feature_id).into_iter().cloned().collect();
        let sampled = stratified_sample(&stored, self.config.sample_bins, self.config.sample_per_bin, self.config.seed);
        let explanation = pack.explanations[feature_id].clone();
        let (matrix, matrix_warnings, anomalies) = if sampled.is_empty() {
            (Vec::new(), vec!["no stored segments for this feature".to_string()], detect_anomalies(&[], self.config.theta))
        } else {
            let expl = self.embed(&explanation)?;
            let m = activation_similarity_matrix(
                &expl,
                &sampled,
                self.registry.embedder.as_ref(),
                Some(&self.segment_cache),
                self.config.theta,
            )?;
            let report = detect_anomalies(&m.cells, self.config.theta);
            (m.cells, m.warnings, report)
        };
        let token_stats = max_activation_token_stats(&sampled, selection);
        let cluster_path: Vec<usize> = tree.assignment.iter().map(|a| a[feature_id]).collect();
        let color = cluster_path.last().and_then(|&id| tree.node(id).color).map(|c| c.to_hex());
        Ok(FeatureResponse {
            sae_id: sae_id.to_string(),
            layer_index: pack.manifest.layer_index,
            feature_id,
            explanation,
            coords: [derived.layout.get(feature_id, 0), derived.layout.get(feature_id, 1)],
            cluster_path,
            color,
            vocab_projection: VocabProjectionView { top: view(&projection.top), bottom: view(&projection.bottom) },
            matrix,
            matrix_warnings,
            anomalies,
            token_stats,
            selection: selection.map(<[u64]>::to_vec),
            segments: sampled,
        })
    }

    pub fn probe(&self, sae_id: &str, feature_id: usize, req: &ProbeRequest) -> ApiResult<ProbeResult> {
        let pack = self.feature_pack(sae_id, feature_id)?;
        require_text(&req.text, "probe text")?;
        Ok(probe_input(&self.registry.model, &pack.sae, feature_id, &req.text)?)
    }

    pub fn coactivate(&self, sae_id: &str, feature_id: usize, req: &CoactivateRequest) -> ApiResult<CoActivationSet> {
        let pack = self.feature_pack(sae_id, feature_id)?;
        require_text(&req.text, "probe text")?;
        let top_n = req.top_n.unwrap_or(self.config.coactivation_top);
        let coords = pack.derived().ok().map(|d| &d.layout);
        Ok(co_activated_features(&self.registry.model, &pack.sae, feature_id, &req.text, &req.anchors, top_n, coords)?)
    }

    pub fn steer(&self, sae_id: &str, feature_id: usize, req: &SteerRequest) -> ApiResult<SteerResponse> {
        let pack = self.feature_pack(sae_id, feature_id)?;
        require_text(&req.prompt, "prompt")?;
        let strengths = req.strengths.clone().unwrap_or_else(|| DEFAULT_STRENGTHS.to_vec());
        let settings = req
            .settings
            .unwrap_or(GenerationSettings { max_new_tokens: self.config.max_new_tokens, ..Default::default() });
        let model = &self.registry.model;
        let branches = steer_generate(model, &pack.sae, feature_id, &req.prompt, &strengths, &settings)?;
        let prompt_ids = model.tokenizer.encode(&req.prompt)?;
        let ids = model.weights.generate(&prompt_ids, &settings, &[])?;
        let baseline = SteeringBranch {
            strength: 0.0,
            tokens: model.tokenizer.decode_tokens(&ids),
            text: model.tokenizer.decode(&ids),
            token_ids: ids,
        };
        Ok(SteerResponse {
            sae_id: sae_id.to_string(),
            feature_id,
            prompt: req.prompt.clone(),
            settings,
            baseline,
            branches,
        })
    }
}
