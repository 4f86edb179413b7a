//! Objectives and the pretraining loop.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::backend::Real;
use super::checkpoint::Checkpoint;
use super::config::{Arch, ModelConfig, TrainConfig};
use super::model::{cross_entropy, Batch, Transformer};
use super::optim::{clip_grad_norm, lr_at, AdamW};
use super::vocab::{self, MASK};
use crate::error::{Error, Result};
use crate::grammar::tokenize;
use crate::io;
use crate::rng::{self, SeededRng};

/// Prediction targets for one packed batch: rows of the batch and the ids
/// expected there.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Targets {
    pub rows: Vec<usize>,
    pub ids: Vec<u32>,
}

/// Next-token targets: every position but the last predicts its successor.
pub fn alm_targets(batch: &Batch) -> Targets {
    let mut t = Targets::default();
    for s in 0..batch.n_seqs() {
        let r = batch.seq(s);
        for i in r.start..r.end - 1 {
            t.rows.push(i);
            t.ids.push(batch.ids[i + 1]);
        }
    }
    t
}

/// Corrupts non-special positions for masked training. Each is selected
/// with probability `rate` (at least one per sequence); selected positions
/// become MASK 80% of the time, a random surface token 10%, and stay 10%.
pub fn mlm_corrupt(seqs: &[Vec<u32>], rate: f64, rng: &mut SeededRng) -> (Batch, Targets) {
    let replacements = vocab::replacement_ids();
    let mut out = Vec::with_capacity(seqs.len());
    let mut targets = Targets::default();
    let mut offset = 0;
    for seq in seqs {
        let candidates: Vec<usize> = (0..seq.len()).filter(|&i| !vocab::is_special(seq[i])).collect();
        let mut chosen: Vec<usize> = candidates.iter().copied().filter(|_| rng.random::<f64>() < rate).collect();
        if chosen.is_empty() && !candidates.is_empty() {
            chosen.push(candidates[rng.random_range(0..candidates.len())]);
        }
        let mut corrupted = seq.clone();
        for &i in &chosen {
            let roll: f64 = rng.random();
            if roll < 0.8 {
                corrupted[i] = MASK;
            } else if roll < 0.9 {
                corrupted[i] = replacements[rng.random_range(0..replacements.len())];
            }
            targets.rows.push(offset + i);
            targets.ids.push(seq[i]);
        }
        offset += seq.len();
        out.push(corrupted);
    }
    (Batch::new(&out), targets)
}

/// Mean loss over targets and its full parameter gradient.
pub fn loss_and_grad<T: Real>(
    model: &Transformer<T>,
    batch: &Batch,
    targets: &Targets,
    dropout_rng: Option<&mut SeededRng>,
) -> Result<(f64, Vec<T>)> {
    if targets.rows.is_empty() {
        return Err(Error::EmptyDataset("batch has no prediction targets".into()));
    }
    let cache = model.forward(batch, dropout_rng)?;
    let logits = model.logits(&cache, &targets.rows);
    let v = model.config.vocab_size;
    let (loss, dl) = cross_entropy(&logits, &targets.ids, v, 1.0 / targets.rows.len() as f64);
    let mut grads = vec![T::zero(); model.num_params()];
    model.backward(&cache, &targets.rows, Some(&dl), &[], &mut grads);
    Ok((loss, grads))
}

/// Mean loss without gradients or dropout.
pub fn loss_only<T: Real>(model: &Transformer<T>, batch: &Batch, targets: &Targets) -> Result<f64> {
    let cache = model.forward(batch, None)?;
    let logits = model.logits(&cache, &targets.rows);
    let v = model.config.vocab_size;
    Ok(cross_entropy(&logits, &targets.ids, v, 1.0 / targets.rows.len().max(1) as f64).0)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// `(step, mean loss over the logging window)`.
    pub history: Vec<(usize, f64)>,
    pub first_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub steps: usize,
    pub sequences_seen: usize,
    pub tokens_seen: usize,
    pub seconds: f64,
}

/// Reads a corpus file into id sequences `BOS line EOS`.
pub fn load_corpus_ids(path: &Path) -> Result<Vec<Vec<u32>>> {
    io::read_lines(path)?
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            tokenize(l)
                .map(|t| vocab::with_specials(&t))
                .map_err(|e| Error::Format {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
        })
        .collect()
}

/// Trains `model` in place on id sequences that already carry specials.
/// `on_log` receives `(step, window mean loss)` every `log_every` steps.
pub fn train_model(
    model: &mut Transformer<f32>,
    data: &[Vec<u32>],
    cfg: &TrainConfig,
    mut on_log: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    let arch = model.config.arch;
    cfg.validate(arch)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("training corpus is empty".into()));
    }
    if let Some(long) = data.iter().find(|s| s.len() > model.config.max_positions) {
        return Err(Error::Mismatch {
            what: "corpus/config",
            detail: format!(
                "a sequence of {} tokens with specials exceeds max_positions {}",
                long.len(),
                model.config.max_positions
            ),
        });
    }
    let start = Instant::now();
    let mut order_rng = rng::stream(cfg.seed, 1);
    let mut mask_rng = rng::stream(cfg.seed, 2);
    let mut drop_rng = rng::stream(cfg.seed, 3);
    let mut opt = AdamW::new(model.num_params(), model.layout().decay_mask(), cfg);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut order_rng);
    let mut cursor = 0;
    let mut report = TrainReport::default();
    let mut window = (0.0, 0usize);
    for step in 0..cfg.steps {
        let mut seqs = Vec::with_capacity(cfg.batch_size);
        while seqs.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            seqs.push(data[order[cursor]].clone());
            cursor += 1;
        }
        let (batch, targets) = match arch {
            Arch::Alm => {
                let b = Batch::new(&seqs);
                let t = alm_targets(&b);
                (b, t)
            }
            Arch::Mlm => mlm_corrupt(&seqs, cfg.mask_rate, &mut mask_rng),
        };
        let (loss, mut grads) = loss_and_grad(model, &batch, &targets, Some(&mut drop_rng))?;
        let norm = clip_grad_norm(&mut grads, cfg.grad_clip_norm);
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("loss {loss}, gradient norm {norm}"),
            });
        }
        opt.step(&mut model.params, &grads, lr_at(step, cfg.lr, cfg.warmup_steps, cfg.steps));
        report.first_loss.get_or_insert(loss);
        report.final_loss = Some(loss);
        report.sequences_seen += seqs.len();
        report.tokens_seen += batch.n_tokens();
        window.0 += loss;
        window.1 += 1;
        if (step + 1) % cfg.log_every.max(1) == 0 || step + 1 == cfg.steps {
            let mean = window.0 / window.1 as f64;
            report.history.push((step + 1, mean));
            on_log(step + 1, mean);
            window = (0.0, 0);
        }
    }
    report.steps = cfg.steps;
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

fn train_from_corpus(
    arch: Arch,
    corpus_path: &Path,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    on_log: impl FnMut(usize, f64),
) -> Result<(Checkpoint, TrainReport)> {
    if model_config.arch != arch {
        return Err(Error::config(format!(
            "model config is {} but {arch} training was requested",
            model_config.arch
        )));
    }
    let data = load_corpus_ids(corpus_path)?;
    let mut model = Transformer::<f32>::init(model_config)?;
    let report = train_model(&mut model, &data, train_config, on_log)?;
    let mut ckpt = Checkpoint::new(model);
    ckpt.train_config = Some(train_config.clone());
    ckpt.step = train_config.steps;
    ckpt.corpus_digest = Some(io::file_digest(corpus_path)?);
    Ok((ckpt, report))
}

pub fn train_alm(
    corpus_path: &Path,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    on_log: impl FnMut(usize, f64),
) -> Result<(Checkpoint, TrainReport)> {
    train_from_corpus(Arch::Alm, corpus_path, model_config, train_config, on_log)
}

pub fn train_mlm(
    corpus_path: &Path,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    on_log: impl FnMut(usize, f64),
) -> Result<(Checkpoint, TrainReport)> {
    train_from_corpus(Arch::Mlm, corpus_path, model_config, train_config, on_log)
}
