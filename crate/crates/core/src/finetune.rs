//! Finetuning a whole encoder together with a bilinear pair head.

use std::ops::Range;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabeledPair, PairLabel};
use crate::error::{Error, Result};
use crate::grammar::tokenize;
use crate::neural::optim::{lr_at, AdamW};
use crate::neural::{sentence_ids, Batch, Checkpoint, Real, TrainConfig, Transformer};
use crate::probe::{sentence_span, BilinearProbe, Features, Pooling, RepStrategy, SavedProbe};
use crate::rng::{self, SeededRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub pooling: Pooling,
    /// Number of training pairs used; all of them when absent.
    #[serde(default)]
    pub examples: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl FinetuneConfig {
    /// One epoch, batch 32, lr 1e-4.
    pub fn desk(pooling: Pooling, seed: u64) -> Self {
        FinetuneConfig {
            pooling,
            examples: None,
            epochs: 1,
            batch_size: 32,
            lr: 1e-4,
            warmup_steps: 10,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::config("lr and grad_clip must be positive"));
        }
        Ok(())
    }

    fn optimizer_config(&self) -> TrainConfig {
        TrainConfig {
            steps: 0,
            batch_size: self.batch_size,
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            weight_decay: self.weight_decay,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: self.grad_clip,
            mask_rate: 0.15,
            seed: self.seed,
            log_every: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub examples: usize,
    pub steps: usize,
    pub epochs: Vec<FinetuneEpoch>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
struct Example {
    a: Vec<u32>,
    b: Vec<u32>,
    label: PairLabel,
}

/// Which hidden states a strategy reads, and how many.
fn state_layers(strategy: &RepStrategy, n_states: usize) -> Range<usize> {
    if strategy.scalar_mix {
        0..n_states
    } else {
        n_states - 1..n_states
    }
}

/// Probe features for packed sequence `seq`, read straight from the
/// forward cache. Mirrors `features_from_states`.
fn features_from_cache<T: Real>(
    model: &Transformer<T>,
    cache: &crate::neural::model::Cache<T>,
    seq: Range<usize>,
    strategy: &RepStrategy,
) -> Features<f64> {
    let d = model.config.d_model;
    let n_states = model.config.n_layers + 1;
    let span = sentence_span(model.config.arch, seq.len());
    let layers = state_layers(strategy, n_states);
    let row = |l: usize, p: usize| {
        let h = model.hidden(cache, l);
        let r = seq.start + p;
        h[r * d..(r + 1) * d].iter().map(|x| x.to_f64().expect("finite"))
    };
    let mut data = Vec::new();
    let len = match (strategy.pooling, strategy.scalar_mix) {
        (Pooling::MinusAttn, false) => {
            data.extend(row(n_states - 1, span.end - 1));
            1
        }
        (Pooling::MinusAttn, true) => {
            let inv = 1.0 / span.len() as f64;
            for l in layers.clone() {
                let mut mean = vec![0.0; d];
                for p in span.clone() {
                    for (m, v) in mean.iter_mut().zip(row(l, p)) {
                        *m += v * inv;
                    }
                }
                data.extend(mean);
            }
            1
        }
        (Pooling::PlusAttn, _) => {
            for l in layers.clone() {
                for p in span.clone() {
                    data.extend(row(l, p));
                }
            }
            span.len()
        }
    };
    Features {
        layers: layers.len(),
        len,
        dim: d,
        data,
    }
}

/// Adds feature gradients `df` of packed sequence `seq` into per-state
/// hidden gradients.
fn scatter_feature_grad<T: Real>(
    model: &Transformer<T>,
    seq: Range<usize>,
    strategy: &RepStrategy,
    df: &[f64],
    d_hidden: &mut [Option<Vec<T>>],
    n_tokens: usize,
) {
    let d = model.config.d_model;
    let n_states = model.config.n_layers + 1;
    let span = sentence_span(model.config.arch, seq.len());
    let mut add = |l: usize, p: usize, g: &[f64], scale: f64| {
        let buf = d_hidden[l].get_or_insert_with(|| vec![T::zero(); n_tokens * d]);
        let r = seq.start + p;
        for (o, &x) in buf[r * d..(r + 1) * d].iter_mut().zip(g) {
            *o += T::of(x * scale);
        }
    };
    match (strategy.pooling, strategy.scalar_mix) {
        (Pooling::MinusAttn, false) => add(n_states - 1, span.end - 1, df, 1.0),
        (Pooling::MinusAttn, true) => {
            let inv = 1.0 / span.len() as f64;
            for (k, l) in state_layers(strategy, n_states).enumerate() {
                for p in span.clone() {
                    add(l, p, &df[k * d..(k + 1) * d], inv);
                }
            }
        }
        (Pooling::PlusAttn, _) => {
            let n = span.len();
            for (k, l) in state_layers(strategy, n_states).enumerate() {
                for (i, p) in span.clone().enumerate() {
                    let s = (k * n + i) * d;
                    add(l, p, &df[s..s + d], 1.0);
                }
            }
        }
    }
}

struct Objective<T> {
    loss: f64,
    correct: usize,
    model_grads: Vec<T>,
    head_grads: Vec<f64>,
}

/// Mean logistic loss of `head` over `pairs` encoded by `model`, with
/// gradients for both.
fn pair_objective<T: Real>(
    model: &Transformer<T>,
    head: &BilinearProbe,
    pairs: &[&Example],
    dropout: Option<&mut SeededRng>,
) -> Result<Objective<T>> {
    let seqs: Vec<&[u32]> = pairs.iter().flat_map(|e| [e.a.as_slice(), e.b.as_slice()]).collect();
    let batch = Batch::new(&seqs);
    let cache = model.forward(&batch, dropout)?;
    let strategy = RepStrategy::for_arch(model.config.arch, head.pooling);
    let n_states = model.config.n_layers + 1;
    let mut d_hidden: Vec<Option<Vec<T>>> = vec![None; n_states];
    let mut head_grads = vec![0.0; head.n_flat()];
    let scale = 1.0 / pairs.len() as f64;
    let (mut loss, mut correct) = (0.0, 0);
    for (k, e) in pairs.iter().enumerate() {
        let (ra, rb) = (batch.seq(2 * k), batch.seq(2 * k + 1));
        let fa = features_from_cache(model, &cache, ra.clone(), &strategy);
        let fb = features_from_cache(model, &cache, rb.clone(), &strategy);
        let mut da = vec![0.0; fa.data.len()];
        let mut db = vec![0.0; fb.data.len()];
        let (l, z) = head.pair_loss_grad_inputs(&fa, &fb, e.label, scale, &mut head_grads, Some((&mut da, &mut db)));
        loss += l * scale;
        correct += usize::from(PairLabel::from_equal(z > 0.0) == e.label);
        scatter_feature_grad(model, ra, &strategy, &da, &mut d_hidden, batch.n_tokens());
        scatter_feature_grad(model, rb, &strategy, &db, &mut d_hidden, batch.n_tokens());
    }
    let mut model_grads = vec![T::zero(); model.num_params()];
    model.backward(&cache, &[], None, &d_hidden, &mut model_grads);
    Ok(Objective {
        loss,
        correct,
        model_grads,
        head_grads,
    })
}

fn examples<P: LabeledPair>(ckpt: &Checkpoint, pairs: &[P]) -> Result<Vec<Example>> {
    let arch = ckpt.arch();
    let max = ckpt.config().max_positions;
    pairs
        .iter()
        .map(|p| {
            let a = sentence_ids(arch, &tokenize(p.sentence_a())?);
            let b = sentence_ids(arch, &tokenize(p.sentence_b())?);
            if a.len().max(b.len()) > max {
                return Err(Error::Overlength {
                    len: a.len().max(b.len()),
                    max,
                });
            }
            Ok(Example { a, b, label: p.label() })
        })
        .collect()
}

/// Trains every encoder parameter together with a fresh bilinear head on
/// labeled pairs. Returns the updated encoder and the head.
pub fn finetune_pair_classifier<P: LabeledPair>(
    ckpt: &Checkpoint,
    pairs: &[P],
    cfg: &FinetuneConfig,
) -> Result<(Checkpoint, BilinearProbe, FinetuneReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut data = examples(ckpt, pairs)?;
    data.shuffle(&mut rng::stream(cfg.seed, 0));
    data.truncate(cfg.examples.unwrap_or(data.len()));
    let c = ckpt.config();
    let layers = state_layers(&RepStrategy::for_arch(c.arch, cfg.pooling), c.n_layers + 1).len();
    let mut head = BilinearProbe::new(c.d_model, layers, cfg.pooling, cfg.seed);
    let mut out = ckpt.clone();
    let mut report = FinetuneReport {
        examples: data.len(),
        ..FinetuneReport::default()
    };
    if data.is_empty() {
        return Ok((out, head, report));
    }
    let model = &mut out.model;
    let opt_cfg = cfg.optimizer_config();
    let mut model_opt = AdamW::new(model.num_params(), model.layout().decay_mask(), &opt_cfg);
    let mut head_opt = AdamW::new(head.n_flat(), vec![false; head.n_flat()], &opt_cfg);
    let mut head_flat = head.to_flat();
    let total = cfg.epochs * data.len().div_ceil(cfg.batch_size);
    let mut order_rng = rng::stream(cfg.seed, 1);
    let mut drop_rng = rng::stream(cfg.seed, 3);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
            let mut obj = pair_objective(model, &head, &batch, Some(&mut drop_rng))?;
            let sq: f64 = obj.model_grads.iter().map(|g| (*g as f64).powi(2)).sum::<f64>()
                + obj.head_grads.iter().map(|g| g * g).sum::<f64>();
            let norm = sq.sqrt();
            if !norm.is_finite() || !obj.loss.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    detail: format!("finetuning loss {}, gradient norm {norm}", obj.loss),
                });
            }
            if norm > cfg.grad_clip {
                let s = cfg.grad_clip / norm;
                obj.model_grads.iter_mut().for_each(|g| *g *= s as f32);
                obj.head_grads.iter_mut().for_each(|g| *g *= s);
            }
            let lr = lr_at(step, cfg.lr, cfg.warmup_steps, total);
            model_opt.step(&mut model.params, &obj.model_grads, lr);
            head_opt.step(&mut head_flat, &obj.head_grads, lr);
            head.set_flat(&head_flat);
            loss_sum += obj.loss * batch.len() as f64;
            correct += obj.correct;
            step += 1;
        }
        report.epochs.push(FinetuneEpoch {
            epoch,
            train_loss: loss_sum / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
        });
    }
    report.steps = step;
    report.seconds = start.elapsed().as_secs_f64();
    Ok((out, head, report))
}

pub const HEAD_DIR: &str = "head";

/// Saves the encoder in `dir` and the head in `dir/head`.
pub fn save_finetuned(dir: &std::path::Path, ckpt: &Checkpoint, head: &BilinearProbe) -> Result<()> {
    ckpt.save(dir)?;
    SavedProbe {
        probe: head.clone(),
        config: None,
        report: None,
        encoder_digest: Some(ckpt.digest()),
    }
    .save(&dir.join(HEAD_DIR))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_probe_data, ProbeDataConfig, SplitSpec};
    use crate::grammar::Variant;
    use crate::neural::{random_init_model, Arch, ModelConfig};
    use crate::probe::{features_from_states, eval_probe, train_probe, ProbeConfig};
    use std::collections::HashSet;

    fn tiny_examples(arch: Arch, n: usize) -> Vec<Example> {
        let mut r = rng::seeded(9);
        (0..n)
            .map(|k| {
                let mut s = |len: usize| {
                    let body: Vec<u32> = (0..len).map(|_| rand::Rng::random_range(&mut r, 0..8)).collect();
                    let mut ids = vec![crate::neural::vocab::BOS];
                    ids.extend(body);
                    if arch == Arch::Mlm {
                        ids.push(crate::neural::vocab::EOS);
                    }
                    ids
                };
                Example {
                    a: s(3 + k % 4),
                    b: s(5 + k % 3),
                    label: PairLabel::from_equal(k % 2 == 0),
                }
            })
            .collect()
    }

    #[test]
    fn cache_features_match_encoder_features() {
        for arch in [Arch::Alm, Arch::Mlm] {
            let ckpt = random_init_model(&ModelConfig::tiny(arch, 3), 3).unwrap();
            let ex = tiny_examples(arch, 3);
            let seqs: Vec<&[u32]> = ex.iter().map(|e| e.a.as_slice()).collect();
            let batch = Batch::new(&seqs);
            let cache = ckpt.model.forward(&batch, None).unwrap();
            for pooling in [Pooling::MinusAttn, Pooling::PlusAttn] {
                let strategy = RepStrategy::for_arch(arch, pooling);
                for (k, e) in ex.iter().enumerate() {
                    let ours = features_from_cache(&ckpt.model, &cache, batch.seq(k), &strategy);
                    let st = ckpt.encode(&e.a).unwrap();
                    let theirs = features_from_states(&st, &strategy, sentence_span(arch, st.len)).unwrap();
                    assert_eq!((ours.layers, ours.len, ours.dim), (theirs.layers, theirs.len, theirs.dim));
                    for (x, y) in ours.data.iter().zip(&theirs.data) {
                        assert!((x - *y as f64).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        for arch in [Arch::Alm, Arch::Mlm] {
            for pooling in [Pooling::MinusAttn, Pooling::PlusAttn] {
                let model = Transformer::<f64>::init(&ModelConfig::tiny(arch, 4)).unwrap();
                let layers = if arch == Arch::Mlm { 2 } else { 1 };
                let head = BilinearProbe::new(model.config.d_model, layers, pooling, 5);
                let ex = tiny_examples(arch, 4);
                let refs: Vec<&Example> = ex.iter().collect();
                let obj = pair_objective(&model, &head, &refs, None).unwrap();
                let mut r = rng::seeded(6);
                let mut worst: f64 = 0.0;
                for _ in 0..60 {
                    let i = rand::Rng::random_range(&mut r, 0..model.num_params());
                    let h = 1e-5;
                    let mut m = model.clone();
                    m.params[i] += h;
                    let up = pair_objective(&m, &head, &refs, None).unwrap().loss;
                    m.params[i] -= 2.0 * h;
                    let down = pair_objective(&m, &head, &refs, None).unwrap().loss;
                    let num = (up - down) / (2.0 * h);
                    let ana = obj.model_grads[i];
                    let rel = (num - ana).abs() / (num.abs() + ana.abs()).max(1e-6);
                    worst = worst.max(rel);
                }
                assert!(worst < 1e-3, "{arch} {pooling}: {worst}");
            }
        }
    }

    #[test]
    fn zero_examples_is_a_no_op() {
        let ckpt = random_init_model(&ModelConfig::tiny(Arch::Alm, 1), 1).unwrap();
        let pairs: Vec<crate::corpus::PairRecord> = Vec::new();
        let mut cfg = FinetuneConfig::desk(Pooling::MinusAttn, 0);
        cfg.examples = Some(0);
        let (out, _, report) = finetune_pair_classifier(&ckpt, &pairs, &cfg).unwrap();
        assert_eq!(out.digest(), ckpt.digest());
        assert_eq!(report.steps, 0);
    }

    #[test]
    fn finetuning_fits_a_small_probe_task() {
        let mut mc = ModelConfig::tiny(Arch::Alm, 2);
        mc.d_model = 32;
        mc.d_ff = 64;
        mc.n_heads = 4;
        mc.max_positions = 64;
        let ckpt = random_init_model(&mc, 2).unwrap();
        let dc = ProbeDataConfig {
            variant: Variant::Lt,
            seed: 4,
            max_sentence_tokens: 20,
        };
        let split = SplitSpec {
            train_pairs: 200,
            valid_pairs: 40,
            test_pairs: 40,
        };
        let data = generate_probe_data(&dc, split, &HashSet::new()).unwrap();
        let mut cfg = FinetuneConfig::desk(Pooling::MinusAttn, 0);
        cfg.epochs = 30;
        cfg.batch_size = 16;
        cfg.lr = 3e-3;
        let (tuned, _, report) = finetune_pair_classifier(&ckpt, &data.train, &cfg).unwrap();
        assert_ne!(tuned.digest(), ckpt.digest());
        let last = report.epochs.last().unwrap();
        assert!(last.train_accuracy >= 0.95, "{report:?}");
        let pc = ProbeConfig::desk(Pooling::MinusAttn, 0);
        let (probe, _) = train_probe(&tuned, &data.train, &data.valid, &pc).unwrap();
        assert!(eval_probe(&tuned, &probe, &data.train).unwrap().accuracy > 0.5);
    }
}
