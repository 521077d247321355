//! Turns raw inputs (model bundle, SAE weights, explanations, text
//! segments) into a FeaturePack.

use std::cmp::Ordering;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interpret::SegmentRecord;
use crate::model::{load_bundle, Model};
use crate::pack::{read_json, read_jsonl, write_base_pack, EmbedderSpec, ExplanationRecord, PackManifest};
use crate::sae::SaeWeights;

/// Segments kept per feature: the strongest ones plus an even spread over
/// the remaining segments on which the feature fires at all.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentQuota {
    pub top: usize,
    pub spread: usize,
}

impl Default for SegmentQuota {
    fn default() -> Self {
        SegmentQuota { top: 24, spread: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSegment {
    pub segment_id: u64,
    pub text: String,
}

/// Paths are resolved relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestManifest {
    pub sae_id: String,
    pub model: PathBuf,
    pub sae_weights: PathBuf,
    pub layer_index: usize,
    #[serde(default = "default_activation")]
    pub activation: String,
    /// JSONL of `{"feature_id", "text"}`.
    pub explanations: PathBuf,
    /// JSONL of raw `{"segment_id", "text"}` lines, or fully annotated
    /// segment records.
    pub segments: PathBuf,
    #[serde(default)]
    pub embedder: EmbedderSpec,
    pub output: PathBuf,
    #[serde(default)]
    pub provenance: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub quota: SegmentQuota,
}

fn default_activation() -> String {
    "relu".into()
}

impl IngestManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<IngestManifest> {
        let path = path.as_ref();
        let mut m: IngestManifest = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut m.model, &mut m.sae_weights, &mut m.explanations, &mut m.segments, &mut m.output] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(m)
    }

    fn check_inputs_exist(&self) -> Result<()> {
        for (what, p) in [
            ("model bundle", &self.model),
            ("SAE weights", &self.sae_weights),
            ("explanations", &self.explanations),
            ("segments", &self.segments),
        ] {
            if !p.exists() {
                return Err(Error::NotFound(format!("{what} at {}", p.display())));
            }
        }
        Ok(())
    }
}

/// Runs every segment through the model and SAE and keeps, per feature,
/// the segments chosen by `quota`. Segments longer than the model context
/// are truncated.
pub fn annotate_segments(model: &Model, sae: &SaeWeights, raw: &[RawSegment], quota: SegmentQuota) -> Result<Vec<SegmentRecord>> {
    let n_features = sae.n_features();
    let max_context = model.config().max_context;
    // Per segment: token ids and the activation matrix (positions x features).
    let mut encoded: Vec<(Vec<u32>, Vec<Vec<f32>>)> = Vec::with_capacity(raw.len());
    for seg in raw {
        let mut ids = model.tokenizer.encode(&seg.text)?;
        if ids.len() > max_context {
            tracing::warn!(segment = seg.segment_id, "segment truncated to {max_context} tokens");
            ids.truncate(max_context);
        }
        let trace = model.weights.forward_with_trace(&ids)?;
        let acts = sae.feature_activation_over_trace(&trace)?;
        encoded.push((ids, acts.into_iter().map(|a| a.values).collect()));
    }
    let mut out = Vec::new();
    for f in 0..n_features {
        let mut ranked: Vec<(usize, f32)> = encoded
            .iter()
            .enumerate()
            .map(|(i, (_, rows))| (i, rows.iter().map(|r| r[f]).fold(f32::NEG_INFINITY, f32::max)))
            .collect();
        ranked.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then(raw[a.0].segment_id.cmp(&raw[b.0].segment_id))
        });
        let top = quota.top.min(ranked.len());
        let mut chosen: Vec<usize> = ranked[..top].iter().map(|r| r.0).collect();
        let rest: Vec<usize> = ranked[top..].iter().filter(|r| r.1 > 0.0).map(|r| r.0).collect();
        let take = quota.spread.min(rest.len());
        for j in 0..take {
            chosen.push(rest[j * rest.len() / take]);
        }
        for i in chosen {
            let (ids, rows) = &encoded[i];
            out.push(SegmentRecord::new(
                f,
                raw[i].segment_id,
                model.tokenizer.decode_tokens(ids),
                ids.clone(),
                rows.iter().map(|r| r[f]).collect(),
                raw[i].text.clone(),
            )?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub sae_id: String,
    pub output: PathBuf,
    pub n_features: usize,
    pub n_segment_records: usize,
}

/// Reads a segments file that holds either raw segments or annotated
/// records; the first non-empty line decides.
fn read_segments(path: &Path) -> Result<Result<Vec<SegmentRecord>, Vec<RawSegment>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let annotated = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .map(|l| l.contains("\"activations\""))
        .unwrap_or(false);
    if annotated {
        Ok(Ok(read_jsonl(path)?))
    } else {
        Ok(Err(read_jsonl(path)?))
    }
}

pub fn ingest(manifest: &IngestManifest) -> Result<IngestReport> {
    manifest.check_inputs_exist()?;
    let model = load_bundle(&manifest.model)?;
    let sae = SaeWeights::load(&manifest.sae_weights, manifest.layer_index, &manifest.activation)?;
    sae.validate()?;
    if sae.d_model() != model.config().d_model {
        return Err(Error::shape("SAE width vs model", model.config().d_model, sae.d_model()));
    }
    if manifest.layer_index >= model.config().n_layers {
        return Err(Error::OutOfRange { what: "SAE layer", index: manifest.layer_index, limit: model.config().n_layers });
    }
    let records: Vec<ExplanationRecord> = read_jsonl(&manifest.explanations)?;
    let mut explanations = vec![None; sae.n_features()];
    for r in records {
        let limit = explanations.len();
        *explanations
            .get_mut(r.feature_id)
            .ok_or(Error::OutOfRange { what: "explanation feature id", index: r.feature_id, limit })? = Some(r.text);
    }
    let explanations: Vec<String> = explanations
        .into_iter()
        .enumerate()
        .map(|(f, t)| t.ok_or_else(|| Error::NotFound(format!("explanation for feature {f}"))))
        .collect::<Result<_>>()?;
    let segments = match read_segments(&manifest.segments)? {
        Ok(annotated) => annotated,
        Err(raw) => annotate_segments(&model, &sae, &raw, manifest.quota)?,
    };
    let pack_manifest = PackManifest::new(&manifest.sae_id, &sae, manifest.embedder.clone(), &manifest.provenance, manifest.seed);
    write_base_pack(&manifest.output, &pack_manifest, &sae, &explanations, &segments)?;
    Ok(IngestReport {
        sae_id: manifest.sae_id.clone(),
        output: manifest.output.clone(),
        n_features: sae.n_features(),
        n_segment_records: segments.len(),
    })
}
