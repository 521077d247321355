//! Concept queries: rewriting, per-layer relevance counts and the
//! multi-threshold AvgRank recommendation of SAEs.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::embed::{bearer, http_agent};
use crate::error::{Error, Result};
use crate::store::{EmbeddingStore, Scope};

pub const DEFAULT_K_SET: [usize; 3] = [10, 100, 1000];

pub trait QueryRewriter: Send + Sync {
    fn name(&self) -> &str;
    fn rewrite(&self, raw_text: &str) -> Result<String>;
}

/// Rewrites with the fixed template
/// `words related to {X} and its associations with {expansions}`, drawing
/// expansions from a term lexicon.
#[derive(Debug, Clone, Default)]
pub struct LexiconRewriter {
    entries: HashMap<String, Vec<String>>,
}

const BUNDLED_LEXICON: &str = include_str!("../assets/lexicon.txt");

impl LexiconRewriter {
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_LEXICON).expect("bundled lexicon parses")
    }

    /// Parses `term: a, b, c` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (term, rest) = line
                .split_once(':')
                .ok_or_else(|| Error::InvalidInput(format!("lexicon line {}: missing ':'", n + 1)))?;
            let expansions = rest
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            entries.insert(term.trim().to_lowercase(), expansions);
        }
        Ok(LexiconRewriter { entries })
    }

    pub fn with_entry(mut self, term: &str, expansions: &[&str]) -> Self {
        self.entries.insert(
            term.to_lowercase(),
            expansions.iter().map(|s| s.to_string()).collect(),
        );
        self
    }
}

impl QueryRewriter for LexiconRewriter {
    fn name(&self) -> &str {
        "lexicon"
    }

    fn rewrite(&self, raw_text: &str) -> Result<String> {
        let term = raw_text.trim();
        if term.is_empty() {
            return Err(Error::InvalidInput("query text is empty".into()));
        }
        match self.entries.get(&term.to_lowercase()) {
            Some(exp) if !exp.is_empty() => Ok(format!(
                "words related to {term} and its associations with {}",
                exp.join(", ")
            )),
            _ => Ok(format!("words related to {term}")),
        }
    }
}

/// Chat-completions client that asks a remote LLM for a refined query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteRewriterConfig {
    pub endpoint: String,
    pub model: String,
    /// `{query}` is replaced with the raw query text.
    pub prompt_template: String,
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    30
}

pub struct RemoteRewriter {
    config: RemoteRewriterConfig,
    agent: ureq::Agent,
}

impl RemoteRewriter {
    pub fn new(config: RemoteRewriterConfig) -> Self {
        let agent = http_agent(config.timeout_secs);
        RemoteRewriter { config, agent }
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Serialize, Deserialize)]
struct ChatMessage {
    role: String,
    content: String,
}

impl QueryRewriter for RemoteRewriter {
    fn name(&self) -> &str {
        &self.config.model
    }

    fn rewrite(&self, raw_text: &str) -> Result<String> {
        let prompt = self.config.prompt_template.replace("{query}", raw_text.trim());
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": [ChatMessage { role: "user".into(), content: prompt }],
        });
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(auth) = bearer(&self.config.api_key_env)? {
            req = req.header("Authorization", &auth);
        }
        let resp: ChatResponse = req
            .send_json(&body)
            .map_err(|e| Error::Remote(format!("rewrite request failed: {e}")))?
            .body_mut()
            .read_json()
            .map_err(|e| Error::Remote(format!("rewrite response unreadable: {e}")))?;
        resp.choices
            .into_iter()
            .next()
            .map(|c| c.message.content.trim().to_string())
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::Remote("rewrite response had no content".into()))
    }
}

/// Rewrites `raw_text`, falling back to the raw text when the rewriter fails.
pub fn rewrite_query(rewriter: &dyn QueryRewriter, raw_text: &str) -> Result<String> {
    if raw_text.trim().is_empty() {
        return Err(Error::InvalidInput("query text is empty".into()));
    }
    match rewriter.rewrite(raw_text) {
        Ok(s) => Ok(s),
        Err(e) => {
            tracing::warn!(rewriter = rewriter.name(), error = %e, "query rewrite failed; using raw text");
            Ok(raw_text.trim().to_string())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActiveText {
    Raw,
    Optimized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptQuery {
    pub raw_text: String,
    pub optimized_text: Option<String>,
    pub active: ActiveText,
    #[serde(skip)]
    pub embedding: Vec<f32>,
}

impl ConceptQuery {
    pub fn active_text(&self) -> &str {
        match (self.active, &self.optimized_text) {
            (ActiveText::Optimized, Some(t)) => t,
            _ => &self.raw_text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KCount {
    pub k: usize,
    pub count: usize,
}

/// How many of one SAE's features fall inside each global Top-K.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCounts {
    pub sae_id: String,
    pub layer_index: usize,
    pub counts: Vec<KCount>,
}

pub fn layer_relevance_distribution(
    store: &EmbeddingStore,
    query: &[f32],
    k_set: &[usize],
) -> Result<Vec<LayerCounts>> {
    if k_set.is_empty() || k_set.contains(&0) {
        return Err(Error::InvalidInput("K set must be non-empty with K >= 1".into()));
    }
    let k_max = *k_set.iter().max().expect("non-empty");
    let hits = store.top_k_features(query, k_max, &Scope::All)?;
    let index: HashMap<&str, usize> = store
        .saes()
        .iter()
        .enumerate()
        .map(|(i, s)| (s.sae_id.as_str(), i))
        .collect();
    let mut out: Vec<LayerCounts> = store
        .saes()
        .iter()
        .map(|s| LayerCounts {
            sae_id: s.sae_id.clone(),
            layer_index: s.layer_index,
            counts: k_set.iter().map(|&k| KCount { k, count: 0 }).collect(),
        })
        .collect();
    for (pos, hit) in hits.iter().enumerate() {
        let sae = index[hit.sae_id.as_str()];
        for kc in out[sae].counts.iter_mut() {
            if pos < kc.k {
                kc.count += 1;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankAtK {
    pub k: usize,
    pub count: usize,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeRanking {
    pub sae_id: String,
    pub layer_index: usize,
    pub per_k: Vec<RankAtK>,
    pub avg_rank: f64,
    /// 0-based position in the recommended order.
    pub position: usize,
}

/// Competition ranking ("1, 1, 3") of counts, larger counts first.
pub fn competition_ranks(counts: &[usize]) -> Vec<usize> {
    counts
        .iter()
        .map(|c| 1 + counts.iter().filter(|o| *o > c).count())
        .collect()
}

pub fn avg_rank(ranks: &[usize]) -> f64 {
    ranks.iter().sum::<usize>() as f64 / ranks.len() as f64
}

/// Ranks SAEs from per-K counts: each K ranks SAEs by count, AvgRank is the
/// mean of those ranks, and the result is sorted by AvgRank then layer.
pub fn rank_from_counts(layers: &[LayerCounts]) -> Vec<SaeRanking> {
    let n_k = layers.first().map_or(0, |l| l.counts.len());
    let ranks_per_k: Vec<Vec<usize>> = (0..n_k)
        .map(|ki| {
            let counts: Vec<usize> = layers.iter().map(|l| l.counts[ki].count).collect();
            competition_ranks(&counts)
        })
        .collect();
    let mut out: Vec<SaeRanking> = layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let per_k: Vec<RankAtK> = l
                .counts
                .iter()
                .enumerate()
                .map(|(ki, kc)| RankAtK {
                    k: kc.k,
                    count: kc.count,
                    rank: ranks_per_k[ki][i],
                })
                .collect();
            let ranks: Vec<usize> = per_k.iter().map(|r| r.rank).collect();
            SaeRanking {
                sae_id: l.sae_id.clone(),
                layer_index: l.layer_index,
                avg_rank: avg_rank(&ranks),
                per_k,
                position: 0,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        a.avg_rank
            .total_cmp(&b.avg_rank)
            .then(a.layer_index.cmp(&b.layer_index))
            .then(a.sae_id.cmp(&b.sae_id))
    });
    for (i, r) in out.iter_mut().enumerate() {
        r.position = i;
    }
    out
}

pub fn rank_saes(store: &EmbeddingStore, query: &[f32], k_set: &[usize]) -> Result<Vec<SaeRanking>> {
    if store.saes().is_empty() {
        return Err(Error::EmptyStore);
    }
    Ok(rank_from_counts(&layer_relevance_distribution(store, query, k_set)?))
}
