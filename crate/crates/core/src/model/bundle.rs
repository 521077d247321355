//! Model bundle directory layout:
//!
//! ```text
//! manifest.txt        key=value lines (format, version, endianness, dims)
//! vocab.txt           one token per line, line number = token id
//! token_embedding.bin, position_embedding.bin, unembedding.bin
//! ln_final.gain.bin, ln_final.bias.bin
//! block{l}.{ln1.gain,ln1.bias,w_q,w_k,w_v,w_o,ln2.gain,ln2.bias,w_in,b_in,w_out,b_out}.bin
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{Block, LayerNorm, Model, ModelConfig, ModelWeights, Tokenizer};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

const FORMAT: &str = "saeatlas-model";
const VERSION: &str = "1";

fn manifest_text(c: &ModelConfig) -> String {
    format!(
        "format={FORMAT}\nversion={VERSION}\nendianness=little\nn_layers={}\nd_model={}\nn_heads={}\nd_mlp={}\nvocab_size={}\nmax_context={}\n",
        c.n_layers, c.d_model, c.n_heads, c.d_mlp, c.vocab_size, c.max_context
    )
}

fn parse_manifest(text: &str, path: &Path) -> Result<ModelConfig> {
    let mut kv = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("line {}: expected key=value", n + 1)))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| -> Result<&str> {
        kv.get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::format(path, format!("missing key {k}")))
    };
    if get("format")? != FORMAT {
        return Err(Error::format(path, "not a model manifest"));
    }
    if get("version")? != VERSION {
        return Err(Error::format(path, format!("unsupported version {}", get("version")?)));
    }
    if get("endianness")? != "little" {
        return Err(Error::format(path, "only little-endian bundles are supported"));
    }
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::format(path, format!("{k} is not a non-negative integer")))
    };
    let config = ModelConfig {
        n_layers: num("n_layers")?,
        d_model: num("d_model")?,
        n_heads: num("n_heads")?,
        d_mlp: num("d_mlp")?,
        vocab_size: num("vocab_size")?,
        max_context: num("max_context")?,
    };
    config.validate()?;
    Ok(config)
}

fn write_vec(dir: &Path, name: &str, v: &[f32]) -> Result<()> {
    Matrix::row_vector(v.to_vec()).write(dir.join(format!("{name}.bin")))
}

fn read_mat(dir: &Path, name: &str) -> Result<Matrix> {
    Matrix::read(dir.join(format!("{name}.bin")))
}

fn read_vec(dir: &Path, name: &str, len: usize) -> Result<Vec<f32>> {
    let m = read_mat(dir, name)?;
    m.ensure_shape(name, 1, len)?;
    Ok(m.into_vec())
}

pub fn save_bundle(dir: impl AsRef<Path>, model: &Model) -> Result<()> {
    let dir = dir.as_ref();
    let w = &model.weights;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join("manifest.txt");
    fs::write(&manifest, manifest_text(&w.config)).map_err(|e| Error::io(&manifest, e))?;
    let vocab = dir.join("vocab.txt");
    fs::write(&vocab, model.tokenizer.to_vocab_text()).map_err(|e| Error::io(&vocab, e))?;

    w.token_embedding.write(dir.join("token_embedding.bin"))?;
    w.position_embedding.write(dir.join("position_embedding.bin"))?;
    w.unembedding.write(dir.join("unembedding.bin"))?;
    write_vec(dir, "ln_final.gain", &w.ln_final.gain)?;
    write_vec(dir, "ln_final.bias", &w.ln_final.bias)?;
    for (l, b) in w.blocks.iter().enumerate() {
        let p = |n: &str| format!("block{l}.{n}");
        write_vec(dir, &p("ln1.gain"), &b.ln1.gain)?;
        write_vec(dir, &p("ln1.bias"), &b.ln1.bias)?;
        b.w_q.write(dir.join(p("w_q.bin")))?;
        b.w_k.write(dir.join(p("w_k.bin")))?;
        b.w_v.write(dir.join(p("w_v.bin")))?;
        b.w_o.write(dir.join(p("w_o.bin")))?;
        write_vec(dir, &p("ln2.gain"), &b.ln2.gain)?;
        write_vec(dir, &p("ln2.bias"), &b.ln2.bias)?;
        b.w_in.write(dir.join(p("w_in.bin")))?;
        write_vec(dir, &p("b_in"), &b.b_in)?;
        b.w_out.write(dir.join(p("w_out.bin")))?;
        write_vec(dir, &p("b_out"), &b.b_out)?;
    }
    Ok(())
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<(ModelConfig, ModelWeights)> {
    let dir = dir.as_ref();
    let manifest = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let config = parse_manifest(&text, &manifest)?;
    let d = config.d_model;
    let ln = |name: &str| -> Result<LayerNorm> {
        Ok(LayerNorm {
            gain: read_vec(dir, &format!("{name}.gain"), d)?,
            bias: read_vec(dir, &format!("{name}.bias"), d)?,
        })
    };
    let mut blocks = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let p = |n: &str| format!("block{l}.{n}");
        blocks.push(Block {
            ln1: ln(&p("ln1"))?,
            w_q: read_mat(dir, &p("w_q"))?,
            w_k: read_mat(dir, &p("w_k"))?,
            w_v: read_mat(dir, &p("w_v"))?,
            w_o: read_mat(dir, &p("w_o"))?,
            ln2: ln(&p("ln2"))?,
            w_in: read_mat(dir, &p("w_in"))?,
            b_in: read_vec(dir, &p("b_in"), config.d_mlp)?,
            w_out: read_mat(dir, &p("w_out"))?,
            b_out: read_vec(dir, &p("b_out"), d)?,
        });
    }
    let weights = ModelWeights {
        config,
        token_embedding: read_mat(dir, "token_embedding")?,
        position_embedding: read_mat(dir, "position_embedding")?,
        blocks,
        ln_final: ln("ln_final")?,
        unembedding: read_mat(dir, "unembedding")?,
    };
    weights.validate()?;
    Ok((config, weights))
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<Model> {
    let dir = dir.as_ref();
    let (config, weights) = load_model(dir)?;
    let vocab_path = dir.join("vocab.txt");
    let text = fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
    let tokenizer = Tokenizer::from_vocab_text(&text)?;
    if tokenizer.vocab_size() != config.vocab_size {
        return Err(Error::shape("vocab.txt entries", config.vocab_size, tokenizer.vocab_size()));
    }
    Ok(Model { weights, tokenizer })
}
