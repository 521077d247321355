//! Validation tools: probe text for a feature's per-token activations,
//! find features that co-activate on chosen tokens, and compare
//! generations steered at several strengths.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GenerationSettings, Model, SteeringHook};
use crate::sae::SaeWeights;
use crate::tensor::Matrix;

pub const DEFAULT_STRENGTHS: [f32; 5] = [-10.0, -5.0, 0.0, 5.0, 10.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub feature_id: usize,
    pub tokens: Vec<String>,
    pub token_ids: Vec<u32>,
    pub activations: Vec<f32>,
    /// First position holding the largest activation.
    pub peak_index: usize,
}

/// All feature activations at every position of `text`, one row per token.
pub fn encode_text(model: &Model, sae: &SaeWeights, text: &str) -> Result<(Vec<u32>, Vec<Vec<f32>>)> {
    if text.trim().is_empty() {
        return Err(Error::InvalidInput("probe text is empty".into()));
    }
    let ids = model.tokenizer.encode(text)?;
    let trace = model.weights.forward_with_trace(&ids)?;
    let acts = sae.feature_activation_over_trace(&trace)?;
    Ok((ids, acts.into_iter().map(|a| a.values).collect()))
}

fn check_feature(sae: &SaeWeights, feature_id: usize) -> Result<()> {
    if feature_id >= sae.n_features() {
        return Err(Error::OutOfRange { what: "feature", index: feature_id, limit: sae.n_features() });
    }
    Ok(())
}

pub fn probe_input(model: &Model, sae: &SaeWeights, feature_id: usize, text: &str) -> Result<ProbeResult> {
    check_feature(sae, feature_id)?;
    let (token_ids, rows) = encode_text(model, sae, text)?;
    let activations: Vec<f32> = rows.iter().map(|r| r[feature_id]).collect();
    let peak_index = crate::model::argmax(&activations);
    Ok(ProbeResult {
        feature_id,
        tokens: model.tokenizer.decode_tokens(&token_ids),
        token_ids,
        activations,
        peak_index,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoActivatedFeature {
    pub feature_id: usize,
    /// Mean activation over the anchor positions.
    pub activation: f32,
    /// Atlas position, when a layout is available.
    pub coords: Option<[f32; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoActivationSet {
    pub target_feature: usize,
    pub tokens: Vec<String>,
    pub anchors: Vec<usize>,
    /// Descending activation, ties by feature id.
    pub features: Vec<CoActivatedFeature>,
}

/// Ranks all other features by their mean activation over `anchors`.
pub fn co_activated_features(
    model: &Model,
    sae: &SaeWeights,
    target_feature: usize,
    text: &str,
    anchors: &[usize],
    top_n: usize,
    coords: Option<&Matrix>,
) -> Result<CoActivationSet> {
    check_feature(sae, target_feature)?;
    if anchors.is_empty() {
        return Err(Error::InvalidInput("at least one anchor position is required".into()));
    }
    let (ids, rows) = encode_text(model, sae, text)?;
    if let Some(&bad) = anchors.iter().find(|&&a| a >= rows.len()) {
        return Err(Error::OutOfRange { what: "anchor position", index: bad, limit: rows.len() });
    }
    let n = sae.n_features();
    let mut mean = vec![0.0f32; n];
    for &a in anchors {
        for (m, v) in mean.iter_mut().zip(&rows[a]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= anchors.len() as f32);
    let mut order: Vec<usize> = (0..n).filter(|&f| f != target_feature).collect();
    order.sort_by(|&a, &b| mean[b].partial_cmp(&mean[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    order.truncate(top_n);
    let features = order
        .into_iter()
        .map(|f| CoActivatedFeature {
            feature_id: f,
            activation: mean[f],
            coords: coords.filter(|c| f < c.rows()).map(|c| [c.get(f, 0), c.get(f, 1)]),
        })
        .collect();
    Ok(CoActivationSet {
        target_feature,
        tokens: model.tokenizer.decode_tokens(&ids),
        anchors: anchors.to_vec(),
        features,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringBranch {
    pub strength: f32,
    pub token_ids: Vec<u32>,
    /// One entry per generated step.
    pub tokens: Vec<String>,
    pub text: String,
}

/// One generation per strength, each steering the feature's decoder
/// direction at the SAE's layer.
pub fn steer_generate(
    model: &Model,
    sae: &SaeWeights,
    feature_id: usize,
    prompt: &str,
    strengths: &[f32],
    settings: &GenerationSettings,
) -> Result<Vec<SteeringBranch>> {
    if strengths.is_empty() {
        return Err(Error::InvalidInput("at least one steering strength is required".into()));
    }
    if let Some(s) = strengths.iter().find(|s| !s.is_finite()) {
        return Err(Error::InvalidInput(format!("steering strength {s} is not finite")));
    }
    let vector = sae.steering_vector(feature_id, false)?;
    let prompt_ids = model.tokenizer.encode(prompt)?;
    strengths
        .iter()
        .map(|&strength| {
            let hook = SteeringHook { layer_index: sae.layer_index, vector: vector.clone(), strength };
            let token_ids = model.weights.generate(&prompt_ids, settings, std::slice::from_ref(&hook))?;
            Ok(SteeringBranch {
                strength,
                tokens: model.tokenizer.decode_tokens(&token_ids),
                text: model.tokenizer.decode(&token_ids),
                token_ids,
            })
        })
        .collect()
}
