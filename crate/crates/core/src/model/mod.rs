//! A small pre-norm decoder-only transformer with residual-stream access.
//!
//! Each block computes
//!
//! ```text
//! x = x + attn(ln1(x))
//! x = x + mlp(ln2(x))
//! x = x + Σ strength · vector      (steering hooks registered on this layer)
//! ```
//!
//! and the post-block residual `x` is what [`ResidualTrace`] records and what
//! SAEs read. Logits are `W_u · ln_final(x_last_layer)`.

mod bundle;
pub mod tokenizer;

pub use bundle::{load_bundle, load_model, save_bundle};
pub use tokenizer::Tokenizer;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, Matrix};

pub const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_context: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_context", self.max_context),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::InvalidInput(format!("model config: {name} must be >= 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidInput(format!(
                "model config: d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<f32>,
    pub bias: Vec<f32>,
}

impl LayerNorm {
    pub fn identity(d: usize) -> Self {
        LayerNorm {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }

    pub fn apply(&self, x: &[f32]) -> Vec<f32> {
        let n = x.len() as f32;
        let mean = x.iter().sum::<f32>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        x.iter()
            .zip(self.gain.iter().zip(&self.bias))
            .map(|(v, (g, b))| (v - mean) * inv * g + b)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    /// Query, key, value and output projections, each `d_model x d_model`.
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ln2: LayerNorm,
    /// `d_mlp x d_model`
    pub w_in: Matrix,
    pub b_in: Vec<f32>,
    /// `d_model x d_mlp`
    pub w_out: Matrix,
    pub b_out: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// `vocab_size x d_model`
    pub token_embedding: Matrix,
    /// `max_context x d_model`
    pub position_embedding: Matrix,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
    /// Unembedding `W_u`, `vocab_size x d_model`.
    pub unembedding: Matrix,
}

impl ModelWeights {
    /// Checks every shape against the config and rejects non-finite values.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let d = c.d_model;
        self.token_embedding
            .ensure_shape("token embedding", c.vocab_size, d)?;
        self.position_embedding
            .ensure_shape("position embedding", c.max_context, d)?;
        self.unembedding.ensure_shape("unembedding W_u", c.vocab_size, d)?;
        if self.blocks.len() != c.n_layers {
            return Err(Error::shape("block count", c.n_layers, self.blocks.len()));
        }
        check_ln("ln_final", &self.ln_final, d)?;
        for (l, b) in self.blocks.iter().enumerate() {
            check_ln(&format!("block {l} ln1"), &b.ln1, d)?;
            check_ln(&format!("block {l} ln2"), &b.ln2, d)?;
            for (name, m) in [("w_q", &b.w_q), ("w_k", &b.w_k), ("w_v", &b.w_v), ("w_o", &b.w_o)] {
                m.ensure_shape(&format!("block {l} {name}"), d, d)?;
            }
            b.w_in.ensure_shape(&format!("block {l} w_in"), c.d_mlp, d)?;
            b.w_out.ensure_shape(&format!("block {l} w_out"), d, c.d_mlp)?;
            check_len(&format!("block {l} b_in"), &b.b_in, c.d_mlp)?;
            check_len(&format!("block {l} b_out"), &b.b_out, d)?;
        }
        self.token_embedding.ensure_finite("token embedding")?;
        self.position_embedding.ensure_finite("position embedding")?;
        self.unembedding.ensure_finite("unembedding")?;
        for (l, b) in self.blocks.iter().enumerate() {
            let mats = [&b.w_q, &b.w_k, &b.w_v, &b.w_o, &b.w_in, &b.w_out];
            let vecs = [
                &b.ln1.gain, &b.ln1.bias, &b.ln2.gain, &b.ln2.bias, &b.b_in, &b.b_out,
            ];
            if !mats.iter().all(|m| m.is_finite()) || !vecs.iter().all(|v| v.iter().all(|x| x.is_finite())) {
                return Err(Error::NonFinite(format!("block {l}")));
            }
        }
        if !self.ln_final.gain.iter().chain(&self.ln_final.bias).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("ln_final".into()));
        }
        Ok(())
    }
}

fn check_len(what: &str, v: &[f32], n: usize) -> Result<()> {
    if v.len() == n {
        Ok(())
    } else {
        Err(Error::shape(what, n, v.len()))
    }
}

fn check_ln(what: &str, ln: &LayerNorm, d: usize) -> Result<()> {
    check_len(&format!("{what} gain"), &ln.gain, d)?;
    check_len(&format!("{what} bias"), &ln.bias, d)
}

/// Model weights together with the vocabulary they were trained on.
#[derive(Debug, Clone)]
pub struct Model {
    pub weights: ModelWeights,
    pub tokenizer: Tokenizer,
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.weights.config
    }
}

/// Adds `strength * vector` to every position's post-block residual at
/// `layer_index`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringHook {
    pub layer_index: usize,
    pub vector: Vec<f32>,
    pub strength: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Decoding {
    Greedy,
    Sample { temperature: f32, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationSettings {
    pub max_new_tokens: usize,
    #[serde(default = "default_decoding")]
    pub decoding: Decoding,
}

fn default_decoding() -> Decoding {
    Decoding::Greedy
}

impl Default for GenerationSettings {
    fn default() -> Self {
        GenerationSettings {
            max_new_tokens: 12,
            decoding: Decoding::Greedy,
        }
    }
}

/// Post-block residuals for every layer and position, plus final logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTrace {
    /// One `seq_len x d_model` matrix per layer.
    pub residuals: Vec<Matrix>,
    /// `seq_len x vocab_size`
    pub logits: Matrix,
}

impl ResidualTrace {
    pub fn n_layers(&self) -> usize {
        self.residuals.len()
    }

    pub fn seq_len(&self) -> usize {
        self.logits.rows()
    }

    pub fn residual(&self, layer: usize, position: usize) -> &[f32] {
        self.residuals[layer].row(position)
    }
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn softmax_in_place(v: &mut [f32]) {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

impl Block {
    fn forward(&self, cfg: &ModelConfig, x: &mut [Vec<f32>]) {
        let t_len = x.len();
        let d_head = cfg.d_head();
        let scale = 1.0 / (d_head as f32).sqrt();

        let normed: Vec<Vec<f32>> = x.iter().map(|r| self.ln1.apply(r)).collect();
        let q: Vec<Vec<f32>> = normed.iter().map(|h| self.w_q.matvec(h)).collect();
        let k: Vec<Vec<f32>> = normed.iter().map(|h| self.w_k.matvec(h)).collect();
        let v: Vec<Vec<f32>> = normed.iter().map(|h| self.w_v.matvec(h)).collect();

        let mut scores = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let mut mixed = vec![0.0f32; cfg.d_model];
            for head in 0..cfg.n_heads {
                let span = head * d_head..(head + 1) * d_head;
                scores.clear();
                scores.extend(
                    (0..=t).map(|s| dot(&q[t][span.clone()], &k[s][span.clone()]) * scale),
                );
                softmax_in_place(&mut scores);
                for (s, p) in scores.iter().enumerate() {
                    for (m, vv) in mixed[span.clone()].iter_mut().zip(&v[s][span.clone()]) {
                        *m += p * vv;
                    }
                }
            }
            self.w_o.matvec_add(&mixed, &mut x[t]);
        }

        for row in x.iter_mut() {
            let h = self.ln2.apply(row);
            let mut hidden = self.w_in.matvec(&h);
            for (a, b) in hidden.iter_mut().zip(&self.b_in) {
                *a = gelu(*a + b);
            }
            self.w_out.matvec_add(&hidden, row);
            for (a, b) in row.iter_mut().zip(&self.b_out) {
                *a += b;
            }
        }
    }
}

impl ModelWeights {
    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_context {
            return Err(Error::ContextOverflow {
                needed: tokens.len(),
                max_context: self.config.max_context,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::OutOfRange {
                what: "token id",
                index: bad as usize,
                limit: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn check_hooks(&self, hooks: &[SteeringHook]) -> Result<()> {
        for h in hooks {
            if h.layer_index >= self.config.n_layers {
                return Err(Error::OutOfRange {
                    what: "hook layer",
                    index: h.layer_index,
                    limit: self.config.n_layers,
                });
            }
            if h.vector.len() != self.config.d_model {
                return Err(Error::shape("steering vector", self.config.d_model, h.vector.len()));
            }
        }
        Ok(())
    }

    /// Runs the blocks, calling `record` with each layer's post-hook residual.
    fn run(
        &self,
        tokens: &[u32],
        hooks: &[SteeringHook],
        mut record: impl FnMut(usize, &[Vec<f32>]),
    ) -> Vec<Vec<f32>> {
        let mut x: Vec<Vec<f32>> = tokens
            .iter()
            .enumerate()
            .map(|(pos, &tok)| {
                self.token_embedding
                    .row(tok as usize)
                    .iter()
                    .zip(self.position_embedding.row(pos))
                    .map(|(a, b)| a + b)
                    .collect()
            })
            .collect();
        let deltas = self.hook_deltas(hooks);
        for (layer, block) in self.blocks.iter().enumerate() {
            block.forward(&self.config, &mut x);
            if let Some(delta) = &deltas[layer] {
                for row in x.iter_mut() {
                    for (a, d) in row.iter_mut().zip(delta) {
                        // Skipping exact zeros keeps the residual bitwise
                        // unchanged when hooks cancel or have zero strength.
                        if *d != 0.0 {
                            *a += d;
                        }
                    }
                }
            }
            record(layer, &x);
        }
        x
    }

    /// Sums all hooks on each layer into one additive delta.
    fn hook_deltas(&self, hooks: &[SteeringHook]) -> Vec<Option<Vec<f32>>> {
        let mut deltas: Vec<Option<Vec<f32>>> = vec![None; self.config.n_layers];
        for hook in hooks {
            let delta = deltas[hook.layer_index].get_or_insert_with(|| vec![0.0; self.config.d_model]);
            for (a, v) in delta.iter_mut().zip(&hook.vector) {
                *a += hook.strength * v;
            }
        }
        deltas
    }

    pub fn logits_for(&self, residual: &[f32]) -> Vec<f32> {
        self.unembedding.matvec(&self.ln_final.apply(residual))
    }

    pub fn forward_with_trace(&self, tokens: &[u32]) -> Result<ResidualTrace> {
        self.forward_hooked(tokens, &[])
    }

    pub fn forward_hooked(&self, tokens: &[u32], hooks: &[SteeringHook]) -> Result<ResidualTrace> {
        self.check_tokens(tokens)?;
        self.check_hooks(hooks)?;
        let d = self.config.d_model;
        let mut residuals = Vec::with_capacity(self.config.n_layers);
        let x = self.run(tokens, hooks, |_, x| {
            let flat: Vec<f32> = x.iter().flatten().copied().collect();
            residuals.push(Matrix::new(x.len(), d, flat).expect("residual shape"));
        });
        let logits: Vec<f32> = x.iter().flat_map(|r| self.logits_for(r)).collect();
        Ok(ResidualTrace {
            residuals,
            logits: Matrix::new(tokens.len(), self.config.vocab_size, logits)?,
        })
    }

    /// Logits at the final position only.
    pub fn next_token_logits(&self, tokens: &[u32], hooks: &[SteeringHook]) -> Result<Vec<f32>> {
        self.check_tokens(tokens)?;
        self.check_hooks(hooks)?;
        let x = self.run(tokens, hooks, |_, _| {});
        Ok(self.logits_for(x.last().expect("non-empty")))
    }

    /// Autoregressive continuation of `prompt`. Hooks are applied at every
    /// position on every step, prompt included. Returns only the new tokens.
    pub fn generate(
        &self,
        prompt: &[u32],
        settings: &GenerationSettings,
        hooks: &[SteeringHook],
    ) -> Result<Vec<u32>> {
        self.check_tokens(prompt)?;
        self.check_hooks(hooks)?;
        let needed = prompt.len() + settings.max_new_tokens;
        if needed > self.config.max_context {
            return Err(Error::ContextOverflow {
                needed,
                max_context: self.config.max_context,
            });
        }
        let mut rng = match settings.decoding {
            Decoding::Sample { temperature, seed } => {
                if !(temperature > 0.0 && temperature.is_finite()) {
                    return Err(Error::InvalidInput("temperature must be positive".into()));
                }
                Some(ChaCha8Rng::seed_from_u64(seed))
            }
            Decoding::Greedy => None,
        };
        let mut seq = prompt.to_vec();
        for _ in 0..settings.max_new_tokens {
            let logits = self.next_token_logits(&seq, hooks)?;
            let next = match (settings.decoding, rng.as_mut()) {
                (Decoding::Sample { temperature, .. }, Some(rng)) => {
                    let mut p: Vec<f32> = logits.iter().map(|l| l / temperature).collect();
                    softmax_in_place(&mut p);
                    WeightedIndex::new(&p)
                        .map_err(|e| Error::InvalidInput(format!("sampling failed: {e}")))?
                        .sample(rng) as u32
                }
                _ => argmax(&logits) as u32,
            };
            seq.push(next);
        }
        Ok(seq.split_off(prompt.len()))
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
