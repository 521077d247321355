//! Offline derivation of a pack's atlas artifacts.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::atlas::{
    assign_colors, build_cluster_tree, clamp_level_sizes, compute_layout, hexbin::hexbin_for_tree, ColorConfig,
    LayoutConfig, StopWords, Zoom, DEFAULT_LEVEL_SIZES,
};
use crate::embed::{embed_text, TextEmbedder};
use crate::error::{Error, Result};
use crate::pack::{write_derived, write_json, Derived, FeaturePack, PackManifest, MANIFEST_FILE};
use crate::tensor::Matrix;

pub const TOPIC_TERMS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecomputeConfig {
    pub layout: LayoutConfig,
    pub level_sizes: Vec<usize>,
    pub colors: ColorConfig,
    /// Overrides the layout and color seeds; the manifest seed is used when unset.
    pub seed: Option<u64>,
}

impl Default for PrecomputeConfig {
    fn default() -> Self {
        PrecomputeConfig {
            layout: LayoutConfig::default(),
            level_sizes: DEFAULT_LEVEL_SIZES.to_vec(),
            colors: ColorConfig::default(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecomputeReport {
    pub sae_id: String,
    pub n_features: usize,
    pub level_sizes: Vec<usize>,
    pub palette_fallback: Vec<bool>,
    pub warnings: Vec<String>,
}

pub fn embed_explanations(explanations: &[String], embedder: &dyn TextEmbedder) -> Result<Matrix> {
    let rows = explanations
        .iter()
        .map(|t| embed_text(embedder, t))
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(&rows)
}

/// Builds every derived artifact from explanation texts.
pub fn derive(explanations: &[String], embedder: &dyn TextEmbedder, config: &PrecomputeConfig, seed: u64) -> Result<(Derived, Vec<String>)> {
    let n = explanations.len();
    let mut warnings = Vec::new();
    if n < 3 {
        return Err(Error::InvalidInput(format!("{n} features are too few for an atlas")));
    }
    let embeddings = embed_explanations(explanations, embedder)?;

    let mut layout_cfg = LayoutConfig { seed, ..config.layout.clone() };
    if n < layout_cfg.n_neighbors + 1 {
        warnings.push(format!("only {n} features: n_neighbors reduced from {} to {}", layout_cfg.n_neighbors, n - 1));
        layout_cfg.n_neighbors = n - 1;
    }
    let layout = compute_layout(&embeddings, &layout_cfg)?;
    warnings.extend(layout.warnings.iter().cloned());

    let (sizes, clamp_warning) = clamp_level_sizes(n, &config.level_sizes);
    if let Some(w) = clamp_warning {
        tracing::warn!("{w}");
        warnings.push(w);
    }
    let mut tree = build_cluster_tree(&embeddings, &sizes)?;
    tree.set_centroids(&layout.coords);
    tree.set_topics(explanations, &StopWords::bundled(), TOPIC_TERMS)?;
    let palette = assign_colors(&tree, &ColorConfig { seed, ..config.colors.clone() });
    for (level, fell_back) in palette.fallback.iter().enumerate() {
        if *fell_back {
            warnings.push(format!("color constraint unmet on level {level}; fallback palette used"));
        }
    }
    tree.set_palette(&palette);
    tree.warnings = warnings.clone();

    let mut hexbins = BTreeMap::new();
    for zoom in Zoom::ALL {
        hexbins.insert(zoom, hexbin_for_tree(&layout.coords, &tree, zoom)?);
    }
    Ok((Derived { embeddings, layout: layout.coords, clusters: tree, hexbins }, warnings))
}

/// Computes and writes the derived artifacts of the pack in `dir`.
/// Re-running with the same inputs rewrites identical files.
pub fn precompute_pack(dir: impl AsRef<Path>, config: &PrecomputeConfig) -> Result<PrecomputeReport> {
    let dir = dir.as_ref();
    let pack = FeaturePack::load(dir)?;
    let seed = config.seed.unwrap_or(pack.manifest.seed);
    let embedder = pack.manifest.embedder.build();
    let (derived, warnings) = derive(&pack.explanations, embedder.as_ref(), config, seed)?;
    write_derived(dir, &derived)?;
    let manifest = PackManifest { precompute_warnings: warnings.clone(), ..pack.manifest.clone() };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(PrecomputeReport {
        sae_id: manifest.sae_id,
        n_features: pack.n_features(),
        level_sizes: derived.clusters.level_sizes.clone(),
        palette_fallback: derived.clusters.palette_fallback.clone(),
        warnings,
    })
}
