//! Sparse autoencoder weights and the maps between residual space and
//! feature space.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ResidualTrace;
use crate::tensor::{l2_norm, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub enum ActivationFn {
    Relu,
    /// `z = pre` where `pre > threshold[i]`, else 0. Thresholds are >= 0.
    JumpRelu { thresholds: Vec<f32> },
}

impl ActivationFn {
    pub fn name(&self) -> &'static str {
        match self {
            ActivationFn::Relu => "relu",
            ActivationFn::JumpRelu { .. } => "jumprelu",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeWeights {
    /// Residual layer (post-block) this SAE reads.
    pub layer_index: usize,
    /// `n_features x d_model`
    pub w_enc: Matrix,
    pub b_enc: Vec<f32>,
    /// `n_features x d_model`, one decoder row per feature.
    pub w_dec: Matrix,
    pub b_dec: Vec<f32>,
    pub activation: ActivationFn,
}

/// Feature activations for one token position.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureActivationVector {
    pub layer: usize,
    pub position: usize,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token_id: u32,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VocabProjection {
    pub feature_id: usize,
    /// `W_u · W_dec[feature]`, one score per vocabulary entry.
    pub scores: Vec<f32>,
    /// Highest scores first.
    pub top: Vec<TokenScore>,
    /// Lowest scores first.
    pub bottom: Vec<TokenScore>,
}

impl SaeWeights {
    pub fn n_features(&self) -> usize {
        self.w_enc.rows()
    }

    pub fn d_model(&self) -> usize {
        self.w_enc.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = self.w_enc.shape();
        self.w_dec.ensure_shape("W_dec", n, d)?;
        if self.b_enc.len() != n {
            return Err(Error::shape("b_enc", n, self.b_enc.len()));
        }
        if self.b_dec.len() != d {
            return Err(Error::shape("b_dec", d, self.b_dec.len()));
        }
        if n <= d {
            return Err(Error::InvalidInput(format!(
                "SAE must be overcomplete: {n} features for d_model {d}"
            )));
        }
        if let ActivationFn::JumpRelu { thresholds } = &self.activation {
            if thresholds.len() != n {
                return Err(Error::shape("JumpReLU thresholds", n, thresholds.len()));
            }
            if thresholds.iter().any(|t| !(*t >= 0.0)) {
                return Err(Error::InvalidInput("JumpReLU thresholds must be >= 0".into()));
            }
        }
        self.w_enc.ensure_finite("W_enc")?;
        self.w_dec.ensure_finite("W_dec")?;
        if !self.b_enc.iter().chain(&self.b_dec).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("SAE biases".into()));
        }
        Ok(())
    }

    fn check_feature(&self, feature_id: usize) -> Result<()> {
        if feature_id < self.n_features() {
            Ok(())
        } else {
            Err(Error::OutOfRange {
                what: "feature id",
                index: feature_id,
                limit: self.n_features(),
            })
        }
    }

    /// `z = f(W_enc · x + b_enc)`
    pub fn encode(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.d_model() {
            return Err(Error::shape("SAE input", self.d_model(), x.len()));
        }
        let mut z = self.w_enc.matvec(x);
        for (i, (v, b)) in z.iter_mut().zip(&self.b_enc).enumerate() {
            let pre = *v + b;
            *v = match &self.activation {
                ActivationFn::Relu => pre.max(0.0),
                ActivationFn::JumpRelu { thresholds } => {
                    if pre > thresholds[i] && pre > 0.0 {
                        pre
                    } else {
                        0.0
                    }
                }
            };
        }
        Ok(z)
    }

    /// `x̂ = Σ_i z_i · W_dec[i] + b_dec`
    pub fn decode(&self, z: &[f32]) -> Result<Vec<f32>> {
        if z.len() != self.n_features() {
            return Err(Error::shape("feature vector", self.n_features(), z.len()));
        }
        let mut x = self.b_dec.clone();
        for (zi, row) in z.iter().zip(self.w_dec.iter_rows()) {
            if *zi != 0.0 {
                for (a, w) in x.iter_mut().zip(row) {
                    *a += zi * w;
                }
            }
        }
        Ok(x)
    }

    /// Encodes the residual at this SAE's layer for every position of a trace.
    pub fn feature_activation_over_trace(
        &self,
        trace: &ResidualTrace,
    ) -> Result<Vec<FeatureActivationVector>> {
        if self.layer_index >= trace.n_layers() {
            return Err(Error::OutOfRange {
                what: "SAE layer",
                index: self.layer_index,
                limit: trace.n_layers(),
            });
        }
        (0..trace.seq_len())
            .map(|position| {
                Ok(FeatureActivationVector {
                    layer: self.layer_index,
                    position,
                    values: self.encode(trace.residual(self.layer_index, position))?,
                })
            })
            .collect()
    }

    /// Decoder row of a feature, optionally scaled to unit L2 norm.
    pub fn steering_vector(&self, feature_id: usize, normalize: bool) -> Result<Vec<f32>> {
        self.check_feature(feature_id)?;
        let row = self.w_dec.row(feature_id);
        if !normalize {
            return Ok(row.to_vec());
        }
        let n = l2_norm(row);
        if n == 0.0 {
            return Err(Error::InvalidInput(format!("decoder row {feature_id} is zero")));
        }
        Ok(row.iter().map(|v| v / n).collect())
    }

    /// Scores every vocabulary token by `W_u · W_dec[feature]` and returns
    /// the `k` highest and `k` lowest.
    pub fn vocabulary_projection(
        &self,
        feature_id: usize,
        unembedding: &Matrix,
        k: usize,
    ) -> Result<VocabProjection> {
        self.check_feature(feature_id)?;
        if k == 0 {
            return Err(Error::InvalidInput("k must be >= 1".into()));
        }
        if unembedding.cols() != self.d_model() {
            return Err(Error::shape("unembedding width", self.d_model(), unembedding.cols()));
        }
        let scores = unembedding.matvec(self.w_dec.row(feature_id));
        let mut order: Vec<u32> = (0..scores.len() as u32).collect();
        order.sort_by(|&a, &b| {
            scores[b as usize]
                .partial_cmp(&scores[a as usize])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        let k = k.min(order.len());
        let entry = |id: u32| TokenScore {
            token_id: id,
            score: scores[id as usize],
        };
        let top = order[..k].iter().map(|&i| entry(i)).collect();
        let bottom = order[order.len() - k..].iter().rev().map(|&i| entry(i)).collect();
        Ok(VocabProjection {
            feature_id,
            scores,
            top,
            bottom,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.w_enc.write(dir.join("w_enc.bin"))?;
        Matrix::row_vector(self.b_enc.clone()).write(dir.join("b_enc.bin"))?;
        self.w_dec.write(dir.join("w_dec.bin"))?;
        Matrix::row_vector(self.b_dec.clone()).write(dir.join("b_dec.bin"))?;
        if let ActivationFn::JumpRelu { thresholds } = &self.activation {
            Matrix::row_vector(thresholds.clone()).write(dir.join("threshold.bin"))?;
        }
        Ok(())
    }

    /// Reads weights written by [`SaeWeights::save`]. `activation` is
    /// `"relu"` or `"jumprelu"` (the latter reads `threshold.bin`).
    pub fn load(dir: &Path, layer_index: usize, activation: &str) -> Result<Self> {
        let w_enc = Matrix::read(dir.join("w_enc.bin"))?;
        let n = w_enc.rows();
        let d = w_enc.cols();
        let vec = |name: &str, len: usize| -> Result<Vec<f32>> {
            let m = Matrix::read(dir.join(name))?;
            m.ensure_shape(name, 1, len)?;
            Ok(m.into_vec())
        };
        let activation = match activation {
            "relu" => ActivationFn::Relu,
            "jumprelu" => ActivationFn::JumpRelu {
                thresholds: vec("threshold.bin", n)?,
            },
            other => {
                return Err(Error::format(dir, format!("unknown activation function {other:?}")))
            }
        };
        let sae = SaeWeights {
            layer_index,
            b_enc: vec("b_enc.bin", n)?,
            w_dec: Matrix::read(dir.join("w_dec.bin"))?,
            b_dec: vec("b_dec.bin", d)?,
            w_enc,
            activation,
        };
        sae.validate()?;
        Ok(sae)
    }
}
