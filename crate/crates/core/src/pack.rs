//! On-disk FeaturePack bundles and the registry that serves them.
//!
//! A pack directory holds:
//!
//! ```text
//! manifest.json        identity, dimensions, embedder, provenance
//! sae/                 SAE weight matrices
//! explanations.jsonl   {"feature_id", "text"} per feature
//! segments.jsonl       one SegmentRecord per (feature, segment)
//! embeddings.bin       explanation embeddings, n_features x d_embed   (derived)
//! layout.bin           2D coordinates, n_features x 2                 (derived)
//! clusters.json        ClusterTree with topics and colors            (derived)
//! hexbins_{zoom}.json  HexBinLevel for far, mid and near             (derived)
//! ```
//!
//! A packs directory holds a `model/` bundle plus one subdirectory per pack.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::atlas::{check_nesting, ClusterTree, HexBinLevel, Zoom};
use crate::embed::{HashingEmbedder, RemoteEmbedder, RemoteEmbedderConfig, TextEmbedder};
use crate::error::{Error, Result};
use crate::interpret::SegmentRecord;
use crate::model::{load_bundle, Model};
use crate::sae::SaeWeights;
use crate::store::{EmbeddingMatrix, EmbeddingStore};
use crate::tensor::Matrix;

pub const PACK_FORMAT: &str = "saeatlas-pack";
pub const PACK_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAE_DIR: &str = "sae";
pub const EXPLANATIONS_FILE: &str = "explanations.jsonl";
pub const SEGMENTS_FILE: &str = "segments.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const LAYOUT_FILE: &str = "layout.bin";
pub const CLUSTERS_FILE: &str = "clusters.json";
pub const MODEL_DIR: &str = "model";

pub fn hexbin_file(zoom: Zoom) -> String {
    format!("hexbins_{}.json", zoom.as_str())
}

/// Which text embedder produced (and must embed queries for) a pack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderSpec {
    Hashing { dim: usize, seed: u64 },
    Remote(RemoteEmbedderConfig),
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        let h = HashingEmbedder::default();
        EmbedderSpec::Hashing { dim: h.dim, seed: h.seed }
    }
}

impl EmbedderSpec {
    pub fn build(&self) -> Box<dyn TextEmbedder> {
        match self {
            EmbedderSpec::Hashing { dim, seed } => Box::new(HashingEmbedder { dim: *dim, seed: *seed }),
            EmbedderSpec::Remote(cfg) => Box::new(RemoteEmbedder::new(cfg.clone())),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            EmbedderSpec::Hashing { dim, .. } => *dim,
            EmbedderSpec::Remote(cfg) => cfg.dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackManifest {
    pub format: String,
    pub format_version: u32,
    pub sae_id: String,
    pub layer_index: usize,
    pub d_model: usize,
    pub n_features: usize,
    /// `relu` or `jumprelu`.
    pub activation: String,
    pub embedder: EmbedderSpec,
    pub provenance: String,
    pub seed: u64,
    /// Warnings recorded by the precompute step.
    #[serde(default)]
    pub precompute_warnings: Vec<String>,
}

impl PackManifest {
    pub fn new(sae_id: &str, sae: &SaeWeights, embedder: EmbedderSpec, provenance: &str, seed: u64) -> Self {
        PackManifest {
            format: PACK_FORMAT.into(),
            format_version: PACK_VERSION,
            sae_id: sae_id.into(),
            layer_index: sae.layer_index,
            d_model: sae.d_model(),
            n_features: sae.n_features(),
            activation: sae.activation.name().into(),
            embedder,
            provenance: provenance.into(),
            seed,
            precompute_warnings: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub feature_id: usize,
    pub text: String,
}

/// Everything derived by the precompute step.
#[derive(Debug)]
pub struct Derived {
    pub embeddings: Matrix,
    pub layout: Matrix,
    pub clusters: ClusterTree,
    pub hexbins: BTreeMap<Zoom, HexBinLevel>,
}

#[derive(Debug)]
pub struct FeaturePack {
    pub dir: PathBuf,
    pub manifest: PackManifest,
    pub sae: SaeWeights,
    pub explanations: Vec<String>,
    pub segments: Vec<SegmentRecord>,
    segments_by_feature: Vec<Vec<usize>>,
    pub derived: Option<Derived>,
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::json(format!("{} line {}", path.display(), i + 1), e)))
        .collect()
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| Error::json(path.display().to_string(), e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the non-derived part of a pack, replacing any derived files.
pub fn write_base_pack(
    dir: &Path,
    manifest: &PackManifest,
    sae: &SaeWeights,
    explanations: &[String],
    segments: &[SegmentRecord],
) -> Result<()> {
    if explanations.len() != sae.n_features() {
        return Err(Error::shape("explanations", sae.n_features(), explanations.len()));
    }
    fs::create_dir_all(dir.join(SAE_DIR)).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(MANIFEST_FILE), manifest)?;
    sae.save(&dir.join(SAE_DIR))?;
    let records: Vec<ExplanationRecord> = explanations
        .iter()
        .enumerate()
        .map(|(feature_id, text)| ExplanationRecord { feature_id, text: text.clone() })
        .collect();
    write_jsonl(&dir.join(EXPLANATIONS_FILE), &records)?;
    write_jsonl(&dir.join(SEGMENTS_FILE), segments)?;
    for name in [EMBEDDINGS_FILE, LAYOUT_FILE, CLUSTERS_FILE] {
        remove_if_present(&dir.join(name))?;
    }
    for zoom in Zoom::ALL {
        remove_if_present(&dir.join(hexbin_file(zoom)))?;
    }
    Ok(())
}

fn remove_if_present(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(Error::io(path, e)),
        _ => Ok(()),
    }
}

pub fn write_derived(dir: &Path, derived: &Derived) -> Result<()> {
    derived.embeddings.write(dir.join(EMBEDDINGS_FILE))?;
    derived.layout.write(dir.join(LAYOUT_FILE))?;
    write_json(&dir.join(CLUSTERS_FILE), &derived.clusters)?;
    for (zoom, level) in &derived.hexbins {
        write_json(&dir.join(hexbin_file(*zoom)), level)?;
    }
    Ok(())
}

impl FeaturePack {
    /// Loads and cross-validates a pack. Derived artifacts are loaded when
    /// `embeddings.bin` exists; once present they must all be consistent.
    pub fn load(dir: impl AsRef<Path>) -> Result<FeaturePack> {
        let dir = dir.as_ref().to_path_buf();
        let manifest: PackManifest = read_json(&dir.join(MANIFEST_FILE))?;
        if manifest.format != PACK_FORMAT || manifest.format_version != PACK_VERSION {
            return Err(Error::format(
                dir.join(MANIFEST_FILE),
                format!("unsupported pack format {} v{}", manifest.format, manifest.format_version),
            ));
        }
        let sae = SaeWeights::load(&dir.join(SAE_DIR), manifest.layer_index, &manifest.activation)?;
        if sae.d_model() != manifest.d_model || sae.n_features() != manifest.n_features {
            return Err(Error::shape(
                "SAE weights vs manifest",
                format!("{}x{}", manifest.n_features, manifest.d_model),
                format!("{}x{}", sae.n_features(), sae.d_model()),
            ));
        }
        let n = manifest.n_features;

        let records: Vec<ExplanationRecord> = read_jsonl(&dir.join(EXPLANATIONS_FILE))?;
        let mut explanations: Vec<Option<String>> = vec![None; n];
        for r in records {
            let slot = explanations
                .get_mut(r.feature_id)
                .ok_or(Error::OutOfRange { what: "explanation feature id", index: r.feature_id, limit: n })?;
            if slot.replace(r.text).is_some() {
                return Err(Error::InvalidInput(format!("duplicate explanation for feature {}", r.feature_id)));
            }
        }
        let explanations: Vec<String> = explanations
            .into_iter()
            .enumerate()
            .map(|(f, t)| t.ok_or_else(|| Error::NotFound(format!("explanation for feature {f}"))))
            .collect::<Result<_>>()?;

        let segments: Vec<SegmentRecord> = read_jsonl(&dir.join(SEGMENTS_FILE))?;
        let mut segments_by_feature = vec![Vec::new(); n];
        for (i, s) in segments.iter().enumerate() {
            s.validate()?;
            segments_by_feature
                .get_mut(s.feature_id)
                .ok_or(Error::OutOfRange { what: "segment feature id", index: s.feature_id, limit: n })?
                .push(i);
        }

        let derived = if dir.join(EMBEDDINGS_FILE).exists() {
            Some(load_derived(&dir, &manifest)?)
        } else {
            None
        };
        Ok(FeaturePack { dir, manifest, sae, explanations, segments, segments_by_feature, derived })
    }

    pub fn sae_id(&self) -> &str {
        &self.manifest.sae_id
    }

    pub fn n_features(&self) -> usize {
        self.manifest.n_features
    }

    pub fn segments_for(&self, feature_id: usize) -> Vec<&SegmentRecord> {
        self.segments_by_feature
            .get(feature_id)
            .map(|ix| ix.iter().map(|&i| &self.segments[i]).collect())
            .unwrap_or_default()
    }

    pub fn derived(&self) -> Result<&Derived> {
        self.derived
            .as_ref()
            .ok_or_else(|| Error::NotFound(format!("pack {} has not been precomputed", self.sae_id())))
    }

    pub fn check_feature(&self, feature_id: usize) -> Result<()> {
        if feature_id >= self.n_features() {
            return Err(Error::OutOfRange { what: "feature", index: feature_id, limit: self.n_features() });
        }
        Ok(())
    }
}

fn load_derived(dir: &Path, manifest: &PackManifest) -> Result<Derived> {
    let n = manifest.n_features;
    let embeddings = Matrix::map(dir.join(EMBEDDINGS_FILE))?;
    embeddings.ensure_shape("embeddings", n, manifest.embedder.dim())?;
    embeddings.ensure_finite("embeddings")?;
    let layout = Matrix::read(dir.join(LAYOUT_FILE))?;
    layout.ensure_shape("layout", n, 2)?;
    layout.ensure_finite("layout")?;
    let clusters: ClusterTree = read_json(&dir.join(CLUSTERS_FILE))?;
    if clusters.n_features != n {
        return Err(Error::shape("cluster tree features", n, clusters.n_features));
    }
    check_nesting(&clusters)?;
    if let Some(node) = clusters.nodes.iter().find(|c| c.color.is_none()) {
        return Err(Error::InvalidInput(format!("cluster {} has no color", node.id)));
    }
    let mut hexbins = BTreeMap::new();
    for zoom in Zoom::ALL {
        let level: HexBinLevel = read_json(&dir.join(hexbin_file(zoom)))?;
        if level.total_count() != n {
            return Err(Error::shape(format!("hexbin counts at {}", zoom.as_str()), n, level.total_count()));
        }
        hexbins.insert(zoom, level);
    }
    Ok(Derived { embeddings, layout, clusters, hexbins })
}

/// Loaded model plus every valid, precomputed pack, keyed by SAE id.
pub struct PackRegistry {
    pub dir: PathBuf,
    pub model: Model,
    /// Sorted by SAE id.
    pub packs: Vec<FeaturePack>,
    pub store: EmbeddingStore,
    pub embedder_spec: EmbedderSpec,
    pub embedder: Box<dyn TextEmbedder>,
    /// Why packs were skipped.
    pub diagnostics: Vec<String>,
}

impl std::fmt::Debug for PackRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PackRegistry")
            .field("dir", &self.dir)
            .field("packs", &self.packs.iter().map(|p| p.sae_id()).collect::<Vec<_>>())
            .field("diagnostics", &self.diagnostics)
            .finish()
    }
}

/// Loads the model bundle and all valid packs below `dir`. Invalid packs
/// are skipped and reported in `diagnostics`; zero valid packs is an error.
pub fn load_packs(dir: impl AsRef<Path>) -> Result<PackRegistry> {
    let dir = dir.as_ref().to_path_buf();
    if !dir.is_dir() {
        return Err(Error::NotFound(format!("packs directory {}", dir.display())));
    }
    let model = load_bundle(dir.join(MODEL_DIR))?;
    let mut entries: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join(MANIFEST_FILE).exists())
        .collect();
    entries.sort();

    let mut diagnostics = Vec::new();
    let mut packs: Vec<FeaturePack> = Vec::new();
    for path in entries {
        let loaded = FeaturePack::load(&path).and_then(|p| {
            if p.derived.is_none() {
                return Err(Error::NotFound("derived artifacts (run precompute)".into()));
            }
            if p.manifest.layer_index >= model.config().n_layers || p.manifest.d_model != model.config().d_model {
                return Err(Error::InvalidInput(format!(
                    "SAE at layer {} with width {} does not fit the model",
                    p.manifest.layer_index, p.manifest.d_model
                )));
            }
            if packs.iter().any(|q| q.sae_id() == p.sae_id()) {
                return Err(Error::InvalidInput(format!("duplicate SAE id {}", p.sae_id())));
            }
            if let Some(first) = packs.first() {
                if first.manifest.embedder != p.manifest.embedder {
                    return Err(Error::InvalidInput("embedder differs from the other packs".into()));
                }
            }
            Ok(p)
        });
        match loaded {
            Ok(p) => packs.push(p),
            Err(e) => {
                tracing::warn!(pack = %path.display(), "skipping pack: {e}");
                diagnostics.push(format!("{}: {e}", path.display()));
            }
        }
    }
    if packs.is_empty() {
        return Err(Error::NotFound(format!(
            "no valid packs in {}{}",
            dir.display(),
            if diagnostics.is_empty() { String::new() } else { format!(" ({})", diagnostics.join("; ")) }
        )));
    }
    packs.sort_by(|a, b| a.sae_id().cmp(b.sae_id()));
    let matrices = packs
        .iter()
        .map(|p| {
            // A second read-only mapping of the same file; no copy.
            let m = Matrix::map(p.dir.join(EMBEDDINGS_FILE))?;
            EmbeddingMatrix::new(p.sae_id(), p.manifest.layer_index, m)
        })
        .collect::<Result<Vec<_>>>()?;
    let store = EmbeddingStore::new(matrices)?;
    let embedder_spec = packs[0].manifest.embedder.clone();
    let embedder = embedder_spec.build();
    Ok(PackRegistry { dir, model, packs, store, embedder_spec, embedder, diagnostics })
}

impl PackRegistry {
    pub fn pack(&self, sae_id: &str) -> Result<&FeaturePack> {
        self.packs
            .binary_search_by(|p| p.sae_id().cmp(sae_id))
            .map(|i| &self.packs[i])
            .map_err(|_| Error::NotFound(format!("SAE {sae_id:?}")))
    }
}
