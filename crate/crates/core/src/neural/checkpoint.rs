//! Trained or random encoders on disk, and inference on them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{Arch, ModelConfig, TrainConfig};
use super::model::{log_softmax, Batch, ParamEntry, Transformer};
use super::vocab::{self, MASK};
use crate::error::{Error, Result};
use crate::grammar::Token;
use crate::io;

pub const MODEL_CONFIG_FILE: &str = "model_config.json";
pub const TRAIN_CONFIG_FILE: &str = "train_config.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const SHAPES_FILE: &str = "shapes.json";
pub const META_FILE: &str = "meta.json";
pub const DIGEST_FILE: &str = "digest";

const CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    step: usize,
    corpus_digest: Option<String>,
    num_params: usize,
    params_digest: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Transformer<f32>,
    pub train_config: Option<TrainConfig>,
    pub step: usize,
    pub corpus_digest: Option<String>,
}

/// Per-layer token vectors for one sequence: `(n_layers + 1) x len x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStates {
    pub n_states: usize,
    pub len: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl LayerStates {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n_states, self.len, self.dim)
    }

    pub fn vector(&self, layer: usize, pos: usize) -> &[f32] {
        let start = (layer * self.len + pos) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn layer(&self, layer: usize) -> &[f32] {
        let size = self.len * self.dim;
        &self.data[layer * size..(layer + 1) * size]
    }
}

/// Random parameters for `config` initialized from `seed`.
pub fn random_init_model(config: &ModelConfig, seed: u64) -> Result<Checkpoint> {
    let mut cfg = config.clone();
    cfg.seed = seed;
    Ok(Checkpoint::new(Transformer::init(&cfg)?))
}

pub fn params_digest(params: &[f32]) -> String {
    let bytes: Vec<u8> = params.iter().flat_map(|v| v.to_le_bytes()).collect();
    io::sha256_hex(&bytes)
}

impl Checkpoint {
    pub fn new(model: Transformer<f32>) -> Self {
        Checkpoint {
            model,
            train_config: None,
            step: 0,
            corpus_digest: None,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn arch(&self) -> Arch {
        self.model.config.arch
    }

    pub fn digest(&self) -> String {
        params_digest(&self.model.params)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::create_dir(dir)?;
        io::write_json(&dir.join(MODEL_CONFIG_FILE), &self.model.config)?;
        let tc = dir.join(TRAIN_CONFIG_FILE);
        match &self.train_config {
            Some(t) => io::write_json(&tc, t)?,
            None if tc.exists() => fs::remove_file(&tc).map_err(|e| Error::io(&tc, e))?,
            None => {}
        }
        let bytes: Vec<u8> = self.model.params.iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = dir.join(PARAMS_FILE);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        io::write_json(&dir.join(SHAPES_FILE), &self.model.layout().entries)?;
        let digest = io::sha256_hex(&bytes);
        io::write_json(
            &dir.join(META_FILE),
            &Meta {
                step: self.step,
                corpus_digest: self.corpus_digest.clone(),
                num_params: self.model.num_params(),
                params_digest: digest.clone(),
            },
        )?;
        let dpath = dir.join(DIGEST_FILE);
        fs::write(&dpath, format!("{digest}\n")).map_err(|e| Error::io(&dpath, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config: ModelConfig = io::read_json(&dir.join(MODEL_CONFIG_FILE))?;
        let tc = dir.join(TRAIN_CONFIG_FILE);
        let train_config = if tc.exists() {
            Some(io::read_json(&tc)?)
        } else {
            None
        };
        let meta: Meta = io::read_json(&dir.join(META_FILE))?;
        let path = dir.join(PARAMS_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Mismatch {
                what: "parameter blob",
                detail: format!("{} bytes is not a whole number of f32 values", bytes.len()),
            });
        }
        let digest = io::sha256_hex(&bytes);
        if digest != meta.params_digest {
            return Err(Error::Mismatch {
                what: "parameter digest",
                detail: format!("expected {}, found {digest}", meta.params_digest),
            });
        }
        let params: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let model = Transformer::from_params(&config, params)?;
        let shapes: Vec<ParamEntry> = io::read_json(&dir.join(SHAPES_FILE))?;
        if shapes != model.layout().entries {
            return Err(Error::Mismatch {
                what: "parameter shapes",
                detail: "shape index does not match the model config".into(),
            });
        }
        Ok(Checkpoint {
            model,
            train_config,
            step: meta.step,
            corpus_digest: meta.corpus_digest,
        })
    }

    fn require(&self, arch: Arch, op: &str) -> Result<()> {
        if self.arch() != arch {
            return Err(Error::config(format!("{op} needs an {arch} checkpoint, got {}", self.arch())));
        }
        Ok(())
    }

    /// Total next-token log-probability (nats) of `tokens` followed by EOS,
    /// conditioned on BOS.
    pub fn score_sequence(&self, tokens: &[Token]) -> Result<f64> {
        Ok(self.score_batch(std::slice::from_ref(&tokens.to_vec()))?[0])
    }

    pub fn score_batch(&self, seqs: &[Vec<Token>]) -> Result<Vec<f64>> {
        self.require(Arch::Alm, "sequence scoring")?;
        let v = self.model.config.vocab_size;
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(CHUNK) {
            let ids: Vec<Vec<u32>> = chunk.iter().map(|t| vocab::with_specials(t)).collect();
            let batch = Batch::new(&ids);
            let cache = self.model.forward(&batch, None)?;
            let targets = super::train::alm_targets(&batch);
            let lp = log_softmax(&self.model.logits(&cache, &targets.rows), v);
            let mut k = 0;
            for s in 0..batch.n_seqs() {
                let mut total = 0.0;
                for _ in 0..batch.seq(s).len() - 1 {
                    total += lp[k * v + targets.ids[k] as usize];
                    k += 1;
                }
                out.push(total);
            }
        }
        Ok(out)
    }

    /// Distribution over the vocabulary at the single MASK position of
    /// `BOS tokens EOS`.
    pub fn mlm_fill_logits(&self, tokens: &[Token]) -> Result<Vec<f64>> {
        Ok(self.mlm_fill_batch(std::slice::from_ref(&tokens.to_vec()))?.remove(0))
    }

    pub fn mlm_fill_batch(&self, seqs: &[Vec<Token>]) -> Result<Vec<Vec<f64>>> {
        self.require(Arch::Mlm, "masked filling")?;
        let v = self.model.config.vocab_size;
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(CHUNK) {
            let ids: Vec<Vec<u32>> = chunk.iter().map(|t| vocab::with_specials(t)).collect();
            let batch = Batch::new(&ids);
            let mut rows = Vec::with_capacity(chunk.len());
            for (s, seq) in ids.iter().enumerate() {
                let masks: Vec<usize> = (0..seq.len()).filter(|&i| seq[i] == MASK).collect();
                if masks.len() != 1 {
                    return Err(Error::config(format!(
                        "expected exactly one mask token, found {}",
                        masks.len()
                    )));
                }
                rows.push(batch.starts[s] + masks[0]);
            }
            let cache = self.model.forward(&batch, None)?;
            let lp = log_softmax(&self.model.logits(&cache, &rows), v);
            out.extend(lp.chunks_exact(v).map(|r| r.iter().map(|x| x.exp()).collect()));
        }
        Ok(out)
    }

    /// Hidden states for an id sequence (specials included by the caller).
    pub fn encode(&self, ids: &[u32]) -> Result<LayerStates> {
        Ok(self.encode_batch(std::slice::from_ref(&ids.to_vec()))?.remove(0))
    }

    pub fn encode_batch(&self, seqs: &[Vec<u32>]) -> Result<Vec<LayerStates>> {
        let cfg = &self.model.config;
        let (d, n_states) = (cfg.d_model, cfg.n_layers + 1);
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(CHUNK) {
            let batch = Batch::new(chunk);
            let cache = self.model.forward(&batch, None)?;
            for s in 0..batch.n_seqs() {
                let r = batch.seq(s);
                let mut data = Vec::with_capacity(n_states * r.len() * d);
                for l in 0..n_states {
                    data.extend_from_slice(&self.model.hidden(&cache, l)[r.start * d..r.end * d]);
                }
                out.push(LayerStates {
                    n_states,
                    len: r.len(),
                    dim: d,
                    data,
                });
            }
        }
        Ok(out)
    }
}

/// Ids an encoder reads for a sentence: `BOS s` for ALM, `BOS s EOS` for MLM.
pub fn sentence_ids(arch: Arch, tokens: &[Token]) -> Vec<u32> {
    match arch {
        Arch::Alm => vocab::with_bos(tokens),
        Arch::Mlm => vocab::with_specials(tokens),
    }
}
