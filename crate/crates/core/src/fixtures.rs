//! Deterministic toy fixtures: a small transformer over a topical corpus,
//! three trained SAEs with a few hand-set features, and packs built through
//! the regular ingest and precompute paths.
//!
//! Output layout under `out`:
//!
//! ```text
//! packs/model/            model bundle
//! packs/toy-l{1,2,3}/     precomputed packs
//! raw/corpus.jsonl        raw segments
//! raw/toy-l*/             SAE weights, explanations and ingest manifests
//! training_log.json
//! expectations.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{ingest, IngestManifest, RawSegment, SegmentQuota};
use crate::model::tokenizer::UNK;
use crate::model::{save_bundle, Block, LayerNorm, Model, ModelConfig, ModelWeights, Tokenizer};
use crate::pack::{read_json, write_json, write_jsonl, EmbedderSpec, ExplanationRecord, MODEL_DIR};
use crate::precompute::{precompute_pack, PrecomputeConfig};
use crate::sae::{ActivationFn, SaeWeights};
use crate::tensor::{dot, normalized, Matrix};

pub const DEFAULT_SEED: u64 = 42;
pub const PACKS_DIR: &str = "packs";
pub const RAW_DIR: &str = "raw";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const EXPECTATIONS_FILE: &str = "expectations.json";
pub const TRAINING_LOG_FILE: &str = "training_log.json";
pub const DEAD_FEATURE_TEXT: &str = "rarely active feature with no clear pattern";
pub const STEERING_STRENGTHS: [f32; 3] = [-8.0, 0.0, 8.0];

const N_LAYERS: usize = 4;
const D_MODEL: usize = 32;
const N_HEADS: usize = 4;
const D_MLP: usize = 64;
const VOCAB: usize = 256;
const MAX_CONTEXT: usize = 64;
const N_FEATURES: usize = 128;
const SAE_LAYERS: [usize; 3] = [1, 2, 3];
const SEGMENTS_PER_TOPIC: usize = 44;
const FACTORY_PLANT_SEGMENTS: usize = 3;
const PINNED_GAIN: f32 = 2.5;
const PINNED_DECODER_SCALE: f32 = 1.0;
const STEER_PROMPTS: usize = 20;
const STEER_NEW_TOKENS: usize = 8;

struct Topic {
    phrase: &'static str,
    nouns: &'static [&'static str],
    verbs: &'static [&'static str],
    adjs: &'static [&'static str],
}

const TOPICS: [Topic; 11] = [
    Topic {
        phrase: "plants and gardening",
        nouns: &["plant", "tree", "seed", "leaf", "flower", "root", "garden", "soil", "branch", "forest", "moss", "vine"],
        verbs: &["grows", "blooms", "sprouts", "wilts", "needs"],
        adjs: &["green", "tall", "wild"],
    },
    Topic {
        phrase: "factories and heavy industry",
        nouns: &["factory", "machine", "worker", "engine", "furnace", "steel", "coal", "turbine", "warehouse", "smoke"],
        verbs: &["builds", "produces", "burns", "powers"],
        adjs: &["industrial", "heavy", "electric", "power"],
    },
    Topic {
        phrase: "comic book superheroes",
        nouns: &["batman", "superman", "hero", "joker", "gotham", "cape", "mask", "villain", "sidekick", "justice"],
        verbs: &["fights", "saves", "rescues", "fight", "defeats"],
        adjs: &["brave", "masked", "heroic"],
    },
    Topic {
        phrase: "magic and wizards",
        nouns: &["wizard", "spell", "wand", "potion", "dragon", "castle", "witch", "scroll", "rune", "sorcerer"],
        verbs: &["casts", "brews", "enchants", "summons"],
        adjs: &["magic", "enchanted", "ancient"],
    },
    Topic {
        phrase: "outer space and astronomy",
        nouns: &["rocket", "moon", "star", "planet", "orbit", "astronaut", "galaxy", "comet", "telescope", "satellite", "mars"],
        verbs: &["launches", "orbits", "explores"],
        adjs: &["distant", "lunar", "cosmic"],
    },
    Topic {
        phrase: "sports and competition",
        nouns: &["ball", "team", "goal", "player", "match", "coach", "stadium", "league", "referee", "trophy"],
        verbs: &["scores", "kicks", "wins", "trains"],
        adjs: &["fast", "winning", "athletic"],
    },
    Topic {
        phrase: "food and cooking",
        nouns: &["bread", "cheese", "soup", "apple", "kitchen", "salt", "sugar", "pie", "honey", "spoon", "cook"],
        verbs: &["bakes", "eats", "cooks", "tastes"],
        adjs: &["tasty", "sweet", "hot"],
    },
    Topic {
        phrase: "emotions and feelings",
        nouns: &["joy", "fear", "love", "hope", "anger", "sadness", "friend", "heart"],
        verbs: &["feels", "smiles", "cries", "laughs"],
        adjs: &["happy", "sad", "angry", "lonely", "proud", "calm"],
    },
    Topic {
        phrase: "the sea and ships",
        nouns: &["sea", "wave", "fish", "whale", "ship", "sailor", "tide", "coral", "shore", "harbor", "anchor", "island", "reef"],
        verbs: &["swims", "sails", "drifts"],
        adjs: &["salty", "deep", "blue"],
    },
    Topic {
        phrase: "music and instruments",
        nouns: &["song", "guitar", "drum", "piano", "melody", "band", "concert", "rhythm", "violin", "chorus"],
        verbs: &["sings", "plays", "strums", "hums"],
        adjs: &["loud", "musical", "soft"],
    },
    Topic {
        phrase: "weather conditions",
        nouns: &["rain", "snow", "wind", "storm", "cloud", "thunder", "fog", "lightning", "frost", "breeze"],
        verbs: &["falls", "blows", "rumbles"],
        adjs: &["sunny", "cold", "warm", "stormy"],
    },
];

const FUNCTION_WORDS: [&str; 22] = [
    "the", "a", "and", "of", "in", "to", "is", "on", "with", "at", "by", "from", "it", "they", "then", "near", "big",
    "small", "old", "new", ".", ",",
];
const GENERAL_ADJS: [&str; 4] = ["big", "small", "old", "new"];
const INDUSTRY: usize = 1;
const HEROES: usize = 2;

const TEMPLATES: [&str; 5] = [
    "the {A} {N} {V} the {N} .",
    "a {N} {V} near the {N} .",
    "the {N} and the {N} {V} in the {N} .",
    "then the {N} {V} with a {A} {N} .",
    "it is a {A} {N} , and the {N} {V} .",
];

const PLANT_EXPLANATION: &str = "plants, trees and flowers growing in a garden";
const HERO_EXPLANATION: &str = "superhero names such as batman, superman and hero";
const COMPANION_EXPLANATION: &str = "comic book stories about heroes, villains and gotham";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRef {
    pub sae_id: String,
    pub feature_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeExpectation {
    pub sae_id: String,
    pub feature_id: usize,
    pub text: String,
    pub peak_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoActivationExpectation {
    pub sae_id: String,
    pub target: usize,
    pub text: String,
    pub anchors: Vec<usize>,
    pub top_n: usize,
    /// Must appear among the co-activated features.
    pub companion: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringExpectation {
    pub sae_id: String,
    pub feature_id: usize,
    /// Top token of the feature's vocabulary projection.
    pub target_token: String,
    pub target_token_id: u32,
    pub strengths: Vec<f32>,
    pub prompts: Vec<String>,
    pub max_new_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyExpectation {
    pub sae_id: String,
    pub feature_id: usize,
    /// Segments using the word in its industrial sense.
    pub off_sense_segments: Vec<u64>,
    /// The off-sense segment with the highest activation.
    pub planted_segment: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionBound {
    pub sae_id: String,
    pub layer_index: usize,
    pub mse_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expectations {
    pub seed: u64,
    pub sae_ids: Vec<String>,
    pub plant: FeatureRef,
    pub hero: FeatureRef,
    pub companion: FeatureRef,
    pub probe: ProbeExpectation,
    pub coactivation: CoActivationExpectation,
    pub steering: SteeringExpectation,
    pub anomaly: AnomalyExpectation,
    pub reconstruction: Vec<ReconstructionBound>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean squared error per element over the epoch, measured on each
    /// minibatch before its update.
    pub mse: f64,
    pub l0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeTrainingLog {
    pub sae_id: String,
    pub layer_index: usize,
    pub epochs: Vec<EpochLog>,
    /// Last epoch's error with 2% headroom.
    pub mse_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub unembedding_loss: Vec<f64>,
    pub saes: Vec<SaeTrainingLog>,
}

pub fn packs_dir(out: &Path) -> PathBuf {
    out.join(PACKS_DIR)
}

pub fn sae_id_for_layer(layer: usize) -> String {
    format!("toy-l{layer}")
}

struct Vocabulary {
    words: Vec<String>,
    /// Topics each token belongs to; function words and padding have none.
    topics: Vec<Vec<usize>>,
}

fn add_word(vocab: &mut Vocabulary, w: &str, topic: Option<usize>) {
    if let Some(i) = vocab.words.iter().position(|x| x == w) {
        if let Some(t) = topic {
            if !vocab.topics[i].contains(&t) {
                vocab.topics[i].push(t);
            }
        }
    } else {
        vocab.words.push(w.to_string());
        vocab.topics.push(topic.into_iter().collect());
    }
}

fn build_vocabulary() -> Vocabulary {
    let mut vocab = Vocabulary { words: vec![UNK.to_string()], topics: vec![Vec::new()] };
    for w in FUNCTION_WORDS {
        add_word(&mut vocab, w, None);
    }
    for (t, topic) in TOPICS.iter().enumerate() {
        for w in topic.nouns.iter().chain(topic.verbs).chain(topic.adjs) {
            add_word(&mut vocab, w, Some(t));
        }
    }
    // "plant" is shared between gardens and factories.
    add_word(&mut vocab, "plant", Some(INDUSTRY));
    let mut i = 0;
    while vocab.words.len() < VOCAB {
        add_word(&mut vocab, &format!("rsv{i:03}"), None);
        i += 1;
    }
    vocab
}

fn unit_normal(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    normalized(&(0..d).map(|_| normal.sample(rng)).collect::<Vec<_>>())
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> Matrix {
    let normal = Normal::new(0.0f32, scale).expect("normal");
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

/// Token embeddings are built from a per-topic direction plus a per-token
/// direction, so tokens of one topic share a subspace.
fn build_model_skeleton(vocab: &Vocabulary, rng: &mut ChaCha8Rng) -> Result<Model> {
    let config = ModelConfig {
        n_layers: N_LAYERS,
        d_model: D_MODEL,
        n_heads: N_HEADS,
        d_mlp: D_MLP,
        vocab_size: VOCAB,
        max_context: MAX_CONTEXT,
    };
    let topic_dirs: Vec<Vec<f32>> = (0..TOPICS.len()).map(|_| unit_normal(rng, D_MODEL)).collect();
    let mut emb = Vec::with_capacity(VOCAB);
    for topics in &vocab.topics {
        let own = unit_normal(rng, D_MODEL);
        let mut v: Vec<f32> = own.iter().map(|x| 0.6 * x).collect();
        for &t in topics {
            for (a, b) in v.iter_mut().zip(&topic_dirs[t]) {
                *a += 0.8 * b;
            }
        }
        emb.push(normalized(&v));
    }
    let ws = 1.0 / (D_MODEL as f32).sqrt();
    let blocks = (0..N_LAYERS)
        .map(|_| Block {
            ln1: LayerNorm::identity(D_MODEL),
            w_q: random_matrix(rng, D_MODEL, D_MODEL, 0.5 * ws),
            w_k: random_matrix(rng, D_MODEL, D_MODEL, 0.5 * ws),
            w_v: random_matrix(rng, D_MODEL, D_MODEL, 0.3 * ws),
            w_o: random_matrix(rng, D_MODEL, D_MODEL, 0.3 * ws),
            ln2: LayerNorm::identity(D_MODEL),
            w_in: random_matrix(rng, D_MLP, D_MODEL, 0.5 * ws),
            b_in: vec![0.0; D_MLP],
            w_out: random_matrix(rng, D_MODEL, D_MLP, 0.3 / (D_MLP as f32).sqrt()),
            b_out: vec![0.0; D_MODEL],
        })
        .collect();
    let weights = ModelWeights {
        config,
        token_embedding: Matrix::from_rows(&emb)?,
        position_embedding: random_matrix(rng, MAX_CONTEXT, D_MODEL, 0.05),
        blocks,
        ln_final: LayerNorm::identity(D_MODEL),
        unembedding: Matrix::zeros(VOCAB, D_MODEL),
    };
    weights.validate()?;
    Ok(Model { weights, tokenizer: Tokenizer::new(vocab.words.clone())? })
}

fn fill_template(template: &str, topic: &Topic, rng: &mut ChaCha8Rng) -> String {
    template
        .split(' ')
        .map(|slot| match slot {
            "{N}" => *topic.nouns.choose(rng).expect("nouns"),
            "{V}" => *topic.verbs.choose(rng).expect("verbs"),
            "{A}" => {
                if rng.random_bool(0.5) {
                    *topic.adjs.choose(rng).expect("adjs")
                } else {
                    *GENERAL_ADJS.choose(rng).expect("adjs")
                }
            }
            w => w,
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn sentence(topic: &Topic, rng: &mut ChaCha8Rng) -> String {
    fill_template(TEMPLATES.choose(rng).expect("templates"), topic, rng)
}

struct Corpus {
    segments: Vec<RawSegment>,
    off_sense: Vec<u64>,
}

fn build_corpus(rng: &mut ChaCha8Rng) -> Corpus {
    let mut texts: Vec<(String, bool)> = Vec::new();
    for (t, topic) in TOPICS.iter().enumerate() {
        for _ in 0..SEGMENTS_PER_TOPIC {
            let n = rng.random_range(2..=3);
            let mut parts = Vec::with_capacity(n);
            if t == HEROES && rng.random_bool(0.4) {
                let v = topic.verbs.choose(rng).expect("verbs");
                let n = topic.nouns.choose(rng).expect("nouns");
                parts.push(format!("batman and superman {v} the {n} in gotham ."));
            }
            while parts.len() < n {
                parts.push(sentence(topic, rng));
            }
            texts.push((parts.join(" "), false));
        }
    }
    let industry = &TOPICS[INDUSTRY];
    for _ in 0..FACTORY_PLANT_SEGMENTS {
        let v = industry.verbs.choose(rng).expect("verbs");
        let n = industry.nouns.choose(rng).expect("nouns");
        let text = format!(
            "the power plant {v} the {n} . {} the plant is a {} factory .",
            sentence(industry, rng),
            industry.adjs.choose(rng).expect("adjs")
        );
        texts.push((text, true));
    }
    texts.shuffle(rng);
    let mut off_sense = Vec::new();
    let segments = texts
        .into_iter()
        .enumerate()
        .map(|(i, (text, off))| {
            if off {
                off_sense.push(i as u64);
            }
            RawSegment { segment_id: i as u64, text }
        })
        .collect();
    Corpus { segments, off_sense }
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
    lr: f32,
}

impl Adam {
    fn new(n: usize, lr: f32) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr }
    }

    fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        const B1: f32 = 0.9;
        const B2: f32 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grads[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grads[i] * grads[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

/// Residual rows for every position of every segment, per layer, plus
/// the token ids.
struct Activations {
    tokens: Vec<Vec<u32>>,
    /// `layers[l]` has one row per corpus position, segments concatenated.
    layers: Vec<Vec<Vec<f32>>>,
}

fn collect_activations(model: &Model, segments: &[RawSegment]) -> Result<Activations> {
    let mut tokens = Vec::with_capacity(segments.len());
    let mut layers = vec![Vec::new(); model.config().n_layers];
    for seg in segments {
        let ids = model.tokenizer.encode(&seg.text)?;
        let trace = model.weights.forward_with_trace(&ids)?;
        for (l, rows) in layers.iter_mut().enumerate() {
            for p in 0..ids.len() {
                rows.push(trace.residual(l, p).to_vec());
            }
        }
        tokens.push(ids);
    }
    Ok(Activations { tokens, layers })
}

/// Softmax regression of the next token on the final normalized residual.
fn train_unembedding(model: &mut Model, acts: &Activations, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let last = acts.layers.len() - 1;
    let mut samples: Vec<(Vec<f32>, u32)> = Vec::new();
    let mut offset = 0;
    for ids in &acts.tokens {
        for p in 0..ids.len().saturating_sub(1) {
            samples.push((model.weights.ln_final.apply(&acts.layers[last][offset + p]), ids[p + 1]));
        }
        offset += ids.len();
    }
    let (v, d) = (VOCAB, D_MODEL);
    let mut w = random_matrix(rng, v, d, 0.01).into_vec();
    let mut adam = Adam::new(w.len(), 0.02);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut losses = Vec::new();
    for _ in 0..6 {
        order.shuffle(rng);
        let mut total = 0.0f64;
        for batch in order.chunks(64) {
            let mut grad = vec![0.0f32; w.len()];
            for &i in batch {
                let (h, y) = &samples[i];
                let mut logits: Vec<f32> = (0..v).map(|t| dot(&w[t * d..(t + 1) * d], h)).collect();
                let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0;
                for l in logits.iter_mut() {
                    *l = (*l - max).exp();
                    sum += *l;
                }
                total -= ((logits[*y as usize] / sum) as f64).ln();
                for (t, p) in logits.iter().enumerate() {
                    let g = p / sum - if t == *y as usize { 1.0 } else { 0.0 };
                    if g.abs() > 1e-7 {
                        for (gw, x) in grad[t * d..(t + 1) * d].iter_mut().zip(h) {
                            *gw += g * x;
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f32;
            grad.iter_mut().for_each(|g| *g *= scale);
            adam.step(&mut w, &grad);
        }
        losses.push(total / samples.len() as f64);
    }
    // Inputs are always zero-mean after the final norm, so the mean of each
    // row never affects logits; removing it keeps W_u · v meaningful for
    // directions that are not zero-mean.
    for row in w.chunks_mut(d) {
        let mean = row.iter().sum::<f32>() / d as f32;
        row.iter_mut().for_each(|x| *x -= mean);
    }
    model.weights.unembedding = Matrix::new(v, d, w).expect("unembedding shape");
    losses
}

struct Pinned {
    feature_id: usize,
    direction: Vec<f32>,
    threshold: f32,
}

/// A hand-set feature that fires where `positions` fire: encoder
/// `gain * u`, bias placing the threshold at a fraction of the median
/// projection, decoder `scale * u`.
fn pinned_feature(rows: &[Vec<f32>], mean: &[f32], positions: &[usize], feature_id: usize) -> Result<Pinned> {
    if positions.is_empty() {
        return Err(Error::InvalidInput("pinned feature has no positions".into()));
    }
    let d = mean.len();
    let mut m = vec![0.0f32; d];
    for &p in positions {
        for (a, b) in m.iter_mut().zip(&rows[p]) {
            *a += b / positions.len() as f32;
        }
    }
    let diff: Vec<f32> = m.iter().zip(mean).map(|(a, b)| a - b).collect();
    let u = normalized(&diff);
    let mut proj: Vec<f32> = positions
        .iter()
        .map(|&p| rows[p].iter().zip(mean).zip(&u).map(|((x, mu), w)| (x - mu) * w).sum())
        .collect();
    proj.sort_by(|a, b| a.total_cmp(b));
    let threshold = 0.6 * proj[proj.len() / 2];
    Ok(Pinned { feature_id, direction: u, threshold })
}

struct TrainedSae {
    sae: SaeWeights,
    log: SaeTrainingLog,
}

fn train_sae(
    sae_id: &str,
    layer: usize,
    rows: &[Vec<f32>],
    pinned: &[Pinned],
    rng: &mut ChaCha8Rng,
) -> TrainedSae {
    let (n, d) = (N_FEATURES, D_MODEL);
    let mut mean = vec![0.0f32; d];
    for r in rows {
        for (a, b) in mean.iter_mut().zip(r) {
            *a += b / rows.len() as f32;
        }
    }
    let mut w_dec = vec![0.0f32; n * d];
    for f in 0..n {
        let r = &rows[rng.random_range(0..rows.len())];
        let centered: Vec<f32> = r.iter().zip(&mean).map(|(a, b)| a - b).collect();
        w_dec[f * d..(f + 1) * d].copy_from_slice(&normalized(&centered));
    }
    let mut w_enc: Vec<f32> = w_dec.iter().map(|v| 0.5 * v).collect();
    let mut b_enc = vec![0.0f32; n];
    let mut b_dec = mean.clone();
    let mut frozen = vec![false; n];
    for p in pinned {
        let f = p.feature_id;
        frozen[f] = true;
        for i in 0..d {
            w_enc[f * d + i] = PINNED_GAIN * p.direction[i];
            w_dec[f * d + i] = PINNED_DECODER_SCALE * p.direction[i];
        }
        b_enc[f] = -PINNED_GAIN * (dot(&p.direction, &mean) + p.threshold);
    }

    let lambda = 0.02f32;
    let mut opt_enc = Adam::new(n * d, 2e-3);
    let mut opt_benc = Adam::new(n, 2e-3);
    let mut opt_dec = Adam::new(n * d, 2e-3);
    let mut opt_bdec = Adam::new(d, 2e-3);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut epochs = Vec::new();
    for epoch in 0..8 {
        order.shuffle(rng);
        let (mut sq, mut l0) = (0.0f64, 0.0f64);
        for batch in order.chunks(64) {
            let mut g_enc = vec![0.0f32; n * d];
            let mut g_benc = vec![0.0f32; n];
            let mut g_dec = vec![0.0f32; n * d];
            let mut g_bdec = vec![0.0f32; d];
            for &i in batch {
                let x = &rows[i];
                let z: Vec<f32> = (0..n)
                    .map(|f| (dot(&w_enc[f * d..(f + 1) * d], x) + b_enc[f]).max(0.0))
                    .collect();
                let mut r = b_dec.clone();
                for f in 0..n {
                    if z[f] > 0.0 {
                        l0 += 1.0;
                        for (a, w) in r.iter_mut().zip(&w_dec[f * d..(f + 1) * d]) {
                            *a += z[f] * w;
                        }
                    }
                }
                for (a, b) in r.iter_mut().zip(x) {
                    *a -= b;
                    sq += (*a as f64) * (*a as f64);
                }
                for (g, a) in g_bdec.iter_mut().zip(&r) {
                    *g += 2.0 * a;
                }
                for f in 0..n {
                    if z[f] <= 0.0 || frozen[f] {
                        continue;
                    }
                    let dz = 2.0 * dot(&r, &w_dec[f * d..(f + 1) * d]) + lambda;
                    for k in 0..d {
                        g_dec[f * d + k] += 2.0 * z[f] * r[k];
                        g_enc[f * d + k] += dz * x[k];
                    }
                    g_benc[f] += dz;
                }
            }
            let scale = 1.0 / batch.len() as f32;
            for g in g_enc.iter_mut().chain(&mut g_benc).chain(&mut g_dec).chain(&mut g_bdec) {
                *g *= scale;
            }
            opt_enc.step(&mut w_enc, &g_enc);
            opt_benc.step(&mut b_enc, &g_benc);
            opt_dec.step(&mut w_dec, &g_dec);
            opt_bdec.step(&mut b_dec, &g_bdec);
            for f in (0..n).filter(|&f| !frozen[f]) {
                let row = &mut w_dec[f * d..(f + 1) * d];
                let norm = dot(row, row).sqrt();
                if norm > 0.0 {
                    row.iter_mut().for_each(|v| *v /= norm);
                }
            }
        }
        epochs.push(EpochLog {
            epoch,
            mse: sq / (rows.len() * d) as f64,
            l0: l0 / rows.len() as f64,
        });
    }
    let mse_bound = epochs.last().map(|e| e.mse * 1.02).unwrap_or(f64::INFINITY);
    let sae = SaeWeights {
        layer_index: layer,
        w_enc: Matrix::new(n, d, w_enc).expect("w_enc shape"),
        b_enc,
        w_dec: Matrix::new(n, d, w_dec).expect("w_dec shape"),
        b_dec,
        activation: ActivationFn::Relu,
    };
    TrainedSae {
        sae,
        log: SaeTrainingLog { sae_id: sae_id.to_string(), layer_index: layer, epochs, mse_bound },
    }
}

/// Mean squared reconstruction error per element over every position of
/// `texts` at the SAE's layer.
pub fn reconstruction_mse(model: &Model, sae: &SaeWeights, texts: &[String]) -> Result<f64> {
    let (mut sq, mut count) = (0.0f64, 0usize);
    for text in texts {
        let ids = model.tokenizer.encode(text)?;
        let trace = model.weights.forward_with_trace(&ids)?;
        for p in 0..ids.len() {
            let x = trace.residual(sae.layer_index, p);
            let x_hat = sae.decode(&sae.encode(x)?)?;
            sq += x.iter().zip(&x_hat).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
            count += x.len();
        }
    }
    Ok(sq / count.max(1) as f64)
}

/// Names a learned feature after its strongest tokens and their topic.
fn describe_feature(sae: &SaeWeights, f: usize, rows: &[Vec<f32>], flat_tokens: &[u32], vocab: &Vocabulary) -> String {
    let mut by_token: BTreeMap<u32, f32> = BTreeMap::new();
    for (row, &tok) in rows.iter().zip(flat_tokens) {
        let a = (dot(sae.w_enc.row(f), row) + sae.b_enc[f]).max(0.0);
        if a > 0.0 {
            *by_token.entry(tok).or_default() += a;
        }
    }
    let mut ranked: Vec<(u32, f32)> = by_token
        .into_iter()
        .filter(|(t, _)| vocab.words[*t as usize].chars().any(char::is_alphanumeric))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    if ranked.is_empty() {
        return DEAD_FEATURE_TEXT.to_string();
    }
    let top: Vec<&str> = ranked.iter().take(3).map(|(t, _)| vocab.words[*t as usize].as_str()).collect();
    let mut votes = [0usize; TOPICS.len()];
    for (t, _) in ranked.iter().take(3) {
        for &topic in &vocab.topics[*t as usize] {
            votes[topic] += 1;
        }
    }
    let best = (0..TOPICS.len()).max_by_key(|&t| (votes[t], std::cmp::Reverse(t))).expect("topics");
    let phrase = if votes[best] == 0 { "common function words" } else { TOPICS[best].phrase };
    match top.as_slice() {
        [a] => format!("{phrase} such as {a}"),
        [a, b] => format!("{phrase} such as {a} and {b}"),
        [a, b, c, ..] => format!("{phrase} such as {a}, {b} and {c}"),
        [] => unreachable!(),
    }
}

fn positions_of(flat_tokens: &[u32], model: &Model, words: &[&str]) -> Vec<usize> {
    let ids: Vec<u32> = words.iter().filter_map(|w| model.tokenizer.id(w)).collect();
    flat_tokens.iter().enumerate().filter(|(_, t)| ids.contains(t)).map(|(i, _)| i).collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Builds every fixture artifact under `out`. The same seed rebuilds
/// byte-identical files.
pub fn build_fixtures(out: &Path, seed: u64) -> Result<Expectations> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = build_vocabulary();
    let mut model = build_model_skeleton(&vocab, &mut rng)?;
    let corpus = build_corpus(&mut rng);
    let acts = collect_activations(&model, &corpus.segments)?;
    let unembedding_loss = train_unembedding(&mut model, &acts, &mut rng);
    model.weights.validate()?;

    let packs = packs_dir(out);
    let raw = out.join(RAW_DIR);
    create_dir(&packs)?;
    create_dir(&raw)?;
    save_bundle(packs.join(MODEL_DIR), &model)?;
    write_jsonl(&raw.join(CORPUS_FILE), &corpus.segments)?;

    let flat_tokens: Vec<u32> = acts.tokens.iter().flatten().copied().collect();
    let mut feature_ids: Vec<usize> = (0..N_FEATURES).collect();
    feature_ids.shuffle(&mut rng);
    let (plant_id, hero_id, companion_id) = (feature_ids[0], feature_ids[1], feature_ids[2]);
    let hero_words: Vec<&str> = TOPICS[HEROES].nouns.iter().chain(TOPICS[HEROES].verbs).copied().collect();

    let mut logs = Vec::new();
    let mut sae_ids = Vec::new();
    let mut trained: BTreeMap<usize, SaeWeights> = BTreeMap::new();
    for layer in SAE_LAYERS {
        let sae_id = sae_id_for_layer(layer);
        let rows = &acts.layers[layer];
        let mut mean = vec![0.0f32; D_MODEL];
        for r in rows {
            for (a, b) in mean.iter_mut().zip(r) {
                *a += b / rows.len() as f32;
            }
        }
        let mut pinned = Vec::new();
        if layer == 1 {
            pinned.push(pinned_feature(rows, &mean, &positions_of(&flat_tokens, &model, &["plant"]), plant_id)?);
        }
        if layer == 2 {
            let names = positions_of(&flat_tokens, &model, &["batman", "superman", "hero"]);
            pinned.push(pinned_feature(rows, &mean, &names, hero_id)?);
            let all = positions_of(&flat_tokens, &model, &hero_words);
            pinned.push(pinned_feature(rows, &mean, &all, companion_id)?);
        }
        let t = train_sae(&sae_id, layer, rows, &pinned, &mut rng);
        let explanations: Vec<String> = (0..N_FEATURES)
            .map(|f| match (layer, f) {
                (1, f) if f == plant_id => PLANT_EXPLANATION.to_string(),
                (2, f) if f == hero_id => HERO_EXPLANATION.to_string(),
                (2, f) if f == companion_id => COMPANION_EXPLANATION.to_string(),
                _ => describe_feature(&t.sae, f, rows, &flat_tokens, &vocab),
            })
            .collect();

        let dir = raw.join(&sae_id);
        create_dir(&dir.join("sae"))?;
        t.sae.save(&dir.join("sae"))?;
        let records: Vec<ExplanationRecord> = explanations
            .into_iter()
            .enumerate()
            .map(|(feature_id, text)| ExplanationRecord { feature_id, text })
            .collect();
        write_jsonl(&dir.join("explanations.jsonl"), &records)?;
        let manifest = IngestManifest {
            sae_id: sae_id.clone(),
            model: PathBuf::from("../../packs/model"),
            sae_weights: PathBuf::from("sae"),
            layer_index: layer,
            activation: "relu".into(),
            explanations: PathBuf::from("explanations.jsonl"),
            segments: PathBuf::from("../corpus.jsonl"),
            embedder: EmbedderSpec::default(),
            output: PathBuf::from(format!("../../packs/{sae_id}")),
            provenance: format!("toy fixture, seed {seed}"),
            seed,
            quota: SegmentQuota::default(),
        };
        let manifest_path = dir.join("ingest.json");
        write_json(&manifest_path, &manifest)?;
        ingest(&IngestManifest::load(&manifest_path)?)?;
        precompute_pack(packs.join(&sae_id), &PrecomputeConfig::default())?;

        logs.push(t.log);
        sae_ids.push(sae_id);
        trained.insert(layer, t.sae);
    }

    let plant_sae = &trained[&1];
    let projection = plant_sae.vocabulary_projection(plant_id, &model.weights.unembedding, 1)?;
    let target_token_id = projection.top[0].token_id;
    let mut prompts = Vec::with_capacity(STEER_PROMPTS);
    while prompts.len() < STEER_PROMPTS {
        let seg = corpus.segments.choose(&mut rng).expect("segments");
        let words = crate::model::Tokenizer::split(&seg.text);
        let k = rng.random_range(3..=5).min(words.len());
        let prompt = words[..k].join(" ");
        if !prompts.contains(&prompt) {
            prompts.push(prompt);
        }
    }

    let mut strongest = (f32::NEG_INFINITY, 0u64);
    for &sid in &corpus.off_sense {
        let ids = model.tokenizer.encode(&corpus.segments[sid as usize].text)?;
        let trace = model.weights.forward_with_trace(&ids)?;
        for a in plant_sae.feature_activation_over_trace(&trace)? {
            if a.values[plant_id] > strongest.0 {
                strongest = (a.values[plant_id], sid);
            }
        }
    }

    let expectations = Expectations {
        seed,
        sae_ids: sae_ids.clone(),
        plant: FeatureRef { sae_id: sae_id_for_layer(1), feature_id: plant_id },
        hero: FeatureRef { sae_id: sae_id_for_layer(2), feature_id: hero_id },
        companion: FeatureRef { sae_id: sae_id_for_layer(2), feature_id: companion_id },
        probe: ProbeExpectation {
            sae_id: sae_id_for_layer(1),
            feature_id: plant_id,
            text: "the plant grows".into(),
            peak_index: 1,
        },
        coactivation: CoActivationExpectation {
            sae_id: sae_id_for_layer(2),
            target: hero_id,
            text: "batman and superman fight the joker in gotham .".into(),
            anchors: vec![0, 2],
            top_n: 10,
            companion: companion_id,
        },
        steering: SteeringExpectation {
            sae_id: sae_id_for_layer(1),
            feature_id: plant_id,
            target_token: vocab.words[target_token_id as usize].clone(),
            target_token_id,
            strengths: STEERING_STRENGTHS.to_vec(),
            prompts,
            max_new_tokens: STEER_NEW_TOKENS,
        },
        anomaly: AnomalyExpectation {
            sae_id: sae_id_for_layer(1),
            feature_id: plant_id,
            off_sense_segments: corpus.off_sense.clone(),
            planted_segment: strongest.1,
        },
        reconstruction: logs
            .iter()
            .map(|l| ReconstructionBound { sae_id: l.sae_id.clone(), layer_index: l.layer_index, mse_bound: l.mse_bound })
            .collect(),
    };
    write_json(&out.join(TRAINING_LOG_FILE), &TrainingLog { unembedding_loss, saes: logs })?;
    write_json(&out.join(EXPECTATIONS_FILE), &expectations)?;
    write_text(&out.join("README.txt"), "Generated by `saeatlas fixtures`. Serve with `saeatlas serve --packs packs`.\n")?;
    Ok(expectations)
}

pub fn load_expectations(out: &Path) -> Result<Expectations> {
    read_json(&out.join(EXPECTATIONS_FILE))
}

pub fn load_corpus(out: &Path) -> Result<Vec<RawSegment>> {
    crate::pack::read_jsonl(&out.join(RAW_DIR).join(CORPUS_FILE))
}
