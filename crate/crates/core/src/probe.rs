//! Bilinear equivalence probes on frozen sentence representations.
//!
//! A sentence enters the probe as a `layers x len x d` feature block taken
//! from a frozen encoder (or supplied directly). The probe mixes layers with
//! softmax weights, pools tokens (mean, or attention with a trained query),
//! and scores a pair with `h_a^T W h_b + b`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{LabeledPair, PairLabel};
use crate::error::{Error, Result};
use crate::grammar::tokenize;
use crate::neural::optim::{clip_grad_norm, lr_at, AdamW};
use crate::neural::{sentence_ids, Arch, Checkpoint, LayerStates, TrainConfig};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    MinusAttn,
    PlusAttn,
}

impl Pooling {
    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::MinusAttn => "minus-attn",
            Pooling::PlusAttn => "plus-attn",
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minus-attn" | "-attn" | "-Attn" => Ok(Pooling::MinusAttn),
            "plus-attn" | "+attn" | "+Attn" => Ok(Pooling::PlusAttn),
            other => Err(Error::config(format!("unknown pooling {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepStrategy {
    pub pooling: Pooling,
    pub scalar_mix: bool,
    /// Softmax-normalized layer weights once a probe is trained.
    pub layer_weights: Option<Vec<f64>>,
}

impl RepStrategy {
    /// Scalar mix for masked models, final layer for autoregressive ones.
    pub fn for_arch(arch: Arch, pooling: Pooling) -> Self {
        RepStrategy {
            pooling,
            scalar_mix: arch == Arch::Mlm,
            layer_weights: None,
        }
    }
}

/// Frozen per-sentence probe input, row-major `layers x len x dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct Features<S = f32> {
    pub layers: usize,
    pub len: usize,
    pub dim: usize,
    pub data: Vec<S>,
}

impl Features {
    pub fn vector(v: Vec<f32>) -> Self {
        Features {
            layers: 1,
            len: 1,
            dim: v.len(),
            data: v,
        }
    }
}

impl<S> Features<S> {
    fn at(&self, layer: usize, pos: usize) -> &[S] {
        let s = (layer * self.len + pos) * self.dim;
        &self.data[s..s + self.dim]
    }
}

/// Token span of the sentence inside the encoder input: after BOS, and
/// before EOS for masked models.
pub fn sentence_span(arch: Arch, input_len: usize) -> Range<usize> {
    match arch {
        Arch::Alm => 1..input_len,
        Arch::Mlm => 1..input_len - 1,
    }
}

/// Selects what a probe with `strategy` reads from encoder states over
/// `span`. Autoregressive models contribute the final layer only (the last
/// token for MinusAttn); masked models contribute every layer (averaged over
/// the span for MinusAttn, which commutes with the scalar mix).
pub fn features_from_states(states: &LayerStates, strategy: &RepStrategy, span: Range<usize>) -> Result<Features> {
    if span.is_empty() || span.end > states.len {
        return Err(Error::config("empty or out-of-range token span"));
    }
    let layers: Vec<usize> = if strategy.scalar_mix {
        (0..states.n_states).collect()
    } else {
        vec![states.n_states - 1]
    };
    let d = states.dim;
    let mut data = Vec::new();
    let len = match (strategy.pooling, strategy.scalar_mix) {
        (Pooling::MinusAttn, false) => {
            data.extend_from_slice(states.vector(states.n_states - 1, span.end - 1));
            1
        }
        (Pooling::MinusAttn, true) => {
            let inv = 1.0 / span.len() as f32;
            for &l in &layers {
                let mut mean = vec![0.0f32; d];
                for p in span.clone() {
                    for (m, &v) in mean.iter_mut().zip(states.vector(l, p)) {
                        *m += v * inv;
                    }
                }
                data.extend(mean);
            }
            1
        }
        (Pooling::PlusAttn, _) => {
            for &l in &layers {
                for p in span.clone() {
                    data.extend_from_slice(states.vector(l, p));
                }
            }
            span.len()
        }
    };
    Ok(Features {
        layers: layers.len(),
        len,
        dim: d,
        data,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnPool {
    pub query: Vec<f64>,
    /// `dim x dim`, row-major; token keys are `K x_i`.
    pub key: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BilinearProbe {
    pub dim: usize,
    pub pooling: Pooling,
    /// `dim x dim`, row-major.
    pub w: Vec<f64>,
    pub bias: f64,
    /// Scalar-mix logits, one per encoder layer; `None` for a single layer.
    pub mix_logits: Option<Vec<f64>>,
    pub attn: Option<AttnPool>,
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let mx = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Pooled representation plus what the backward pass needs.
struct Pooled {
    h: Vec<f64>,
    mixed: Vec<f64>,
    weights: Vec<f64>,
    u: Vec<f64>,
}

impl BilinearProbe {
    pub fn new(dim: usize, layers: usize, pooling: Pooling, seed: u64) -> Self {
        let mut r = rng::stream(seed, 0x9b);
        let wd = Normal::new(0.0, 1.0 / dim as f64).expect("valid std");
        let qd = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid std");
        let w = (0..dim * dim).map(|_| wd.sample(&mut r)).collect();
        let attn = (pooling == Pooling::PlusAttn).then(|| AttnPool {
            query: (0..dim).map(|_| qd.sample(&mut r)).collect(),
            key: (0..dim * dim).map(|_| qd.sample(&mut r)).collect(),
        });
        BilinearProbe {
            dim,
            pooling,
            w,
            bias: 0.0,
            mix_logits: (layers > 1).then(|| vec![0.0; layers]),
            attn,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.mix_logits.as_ref().map_or(1, Vec::len)
    }

    pub fn layer_weights(&self) -> Vec<f64> {
        self.mix_logits.as_ref().map_or_else(|| vec![1.0], |m| softmax(m))
    }

    pub fn strategy(&self) -> RepStrategy {
        RepStrategy {
            pooling: self.pooling,
            scalar_mix: self.mix_logits.is_some(),
            layer_weights: self.mix_logits.as_ref().map(|m| softmax(m)),
        }
    }

    fn check<S>(&self, f: &Features<S>) -> Result<()> {
        if f.dim != self.dim || f.layers != self.n_layers() {
            return Err(Error::Mismatch {
                what: "probe/representation dimensions",
                detail: format!(
                    "probe expects {} layers of {}, got {} layers of {}",
                    self.n_layers(),
                    self.dim,
                    f.layers,
                    f.dim
                ),
            });
        }
        if self.pooling == Pooling::PlusAttn && self.attn.is_none() {
            return Err(Error::config("attention pooling needs query and key parameters"));
        }
        Ok(())
    }

    fn pool<S: Copy + Into<f64>>(&self, f: &Features<S>) -> Pooled {
        let (d, n) = (self.dim, f.len);
        let wl = self.layer_weights();
        let mut mixed = vec![0.0; n * d];
        for (l, &w) in wl.iter().enumerate() {
            for i in 0..n {
                for (m, &v) in mixed[i * d..(i + 1) * d].iter_mut().zip(f.at(l, i)) {
                    *m += w * v.into();
                }
            }
        }
        let (weights, u) = match &self.attn {
            Some(a) if self.pooling == Pooling::PlusAttn => {
                let u: Vec<f64> = (0..d)
                    .map(|r| (0..d).map(|c| a.key[r * d + c] * a.query[c]).sum())
                    .collect();
                let scores: Vec<f64> = (0..n)
                    .map(|i| mixed[i * d..(i + 1) * d].iter().zip(&u).map(|(x, y)| x * y).sum())
                    .collect();
                (softmax(&scores), u)
            }
            _ => (vec![1.0 / n as f64; n], Vec::new()),
        };
        let mut h = vec![0.0; d];
        for i in 0..n {
            for (hj, &x) in h.iter_mut().zip(&mixed[i * d..(i + 1) * d]) {
                *hj += weights[i] * x;
            }
        }
        Pooled { h, mixed, weights, u }
    }

    /// The pooled sentence vector.
    pub fn represent<S: Copy + Into<f64>>(&self, f: &Features<S>) -> Result<Vec<f64>> {
        self.check(f)?;
        Ok(self.pool(f).h)
    }

    pub fn logit_vectors(&self, ha: &[f64], hb: &[f64]) -> f64 {
        let d = self.dim;
        let mut z = self.bias;
        for r in 0..d {
            let row = &self.w[r * d..(r + 1) * d];
            z += ha[r] * row.iter().zip(hb).map(|(x, y)| x * y).sum::<f64>();
        }
        z
    }

    pub fn logit<S: Copy + Into<f64>>(&self, a: &Features<S>, b: &Features<S>) -> Result<f64> {
        Ok(self.logit_vectors(&self.represent(a)?, &self.represent(b)?))
    }

    pub fn predict<S: Copy + Into<f64>>(&self, a: &Features<S>, b: &Features<S>) -> Result<PairLabel> {
        Ok(PairLabel::from_equal(self.logit(a, b)? > 0.0))
    }

    pub(crate) fn n_flat(&self) -> usize {
        let d = self.dim;
        d * d + 1 + self.mix_logits.as_ref().map_or(0, Vec::len) + self.attn.as_ref().map_or(0, |_| d + d * d)
    }

    pub(crate) fn to_flat(&self) -> Vec<f64> {
        let mut v = self.w.clone();
        v.push(self.bias);
        if let Some(m) = &self.mix_logits {
            v.extend(m);
        }
        if let Some(a) = &self.attn {
            v.extend(&a.query);
            v.extend(&a.key);
        }
        v
    }

    pub(crate) fn set_flat(&mut self, v: &[f64]) {
        let d = self.dim;
        let mut k = 0;
        let mut take = |n: usize| {
            let s = &v[k..k + n];
            k += n;
            s.to_vec()
        };
        self.w = take(d * d);
        self.bias = take(1)[0];
        if let Some(m) = &mut self.mix_logits {
            *m = take(m.len());
        }
        if let Some(a) = &mut self.attn {
            a.query = take(d);
            a.key = take(d * d);
        }
    }

    /// Adds the gradient of the representation parameters given `dh`, and
    /// writes the gradient on the features into `df` when given.
    fn pool_backward<S: Copy + Into<f64>>(
        &self,
        f: &Features<S>,
        p: &Pooled,
        dh: &[f64],
        grad: &mut [f64],
        df: Option<&mut [f64]>,
    ) {
        let (d, n) = (self.dim, f.len);
        let mix_at = d * d + 1;
        let attn_at = mix_at + self.mix_logits.as_ref().map_or(0, Vec::len);
        let mut dmixed = vec![0.0; n * d];
        match &self.attn {
            Some(a) if self.pooling == Pooling::PlusAttn => {
                let da: Vec<f64> = (0..n)
                    .map(|i| p.mixed[i * d..(i + 1) * d].iter().zip(dh).map(|(x, y)| x * y).sum())
                    .collect();
                let dot: f64 = p.weights.iter().zip(&da).map(|(a, b)| a * b).sum();
                let ds: Vec<f64> = (0..n).map(|i| p.weights[i] * (da[i] - dot)).collect();
                let mut du = vec![0.0; d];
                for i in 0..n {
                    let xi = &p.mixed[i * d..(i + 1) * d];
                    for j in 0..d {
                        dmixed[i * d + j] = p.weights[i] * dh[j] + ds[i] * p.u[j];
                        du[j] += ds[i] * xi[j];
                    }
                }
                let (gq, gk) = grad[attn_at..].split_at_mut(d);
                for r in 0..d {
                    for c in 0..d {
                        gq[c] += a.key[r * d + c] * du[r];
                        gk[r * d + c] += du[r] * a.query[c];
                    }
                }
            }
            _ => {
                for i in 0..n {
                    for j in 0..d {
                        dmixed[i * d + j] = p.weights[i] * dh[j];
                    }
                }
            }
        }
        if self.mix_logits.is_some() {
            let wl = self.layer_weights();
            let dw: Vec<f64> = (0..f.layers)
                .map(|l| {
                    (0..n)
                        .map(|i| {
                            f.at(l, i)
                                .iter()
                                .zip(&dmixed[i * d..(i + 1) * d])
                                .map(|(&x, g)| x.into() * g)
                                .sum::<f64>()
                        })
                        .sum()
                })
                .collect();
            let dot: f64 = wl.iter().zip(&dw).map(|(a, b)| a * b).sum();
            for l in 0..f.layers {
                grad[mix_at + l] += wl[l] * (dw[l] - dot);
            }
        }
        if let Some(df) = df {
            let wl = self.layer_weights();
            for (l, &w) in wl.iter().enumerate() {
                for (o, &g) in df[l * n * d..(l + 1) * n * d].iter_mut().zip(&dmixed) {
                    *o = w * g;
                }
            }
        }
    }

    /// Logistic loss on one pair; adds `scale` times its gradient to `grad`.
    fn pair_loss_grad<S: Copy + Into<f64>>(
        &self,
        a: &Features<S>,
        b: &Features<S>,
        label: PairLabel,
        scale: f64,
        grad: &mut [f64],
    ) -> (f64, f64) {
        self.pair_loss_grad_inputs(a, b, label, scale, grad, None)
    }

    /// As `pair_loss_grad`, also writing the feature gradients of both
    /// sentences into `dfeat` when given.
    pub(crate) fn pair_loss_grad_inputs<S: Copy + Into<f64>>(
        &self,
        a: &Features<S>,
        b: &Features<S>,
        label: PairLabel,
        scale: f64,
        grad: &mut [f64],
        dfeat: Option<(&mut [f64], &mut [f64])>,
    ) -> (f64, f64) {
        let d = self.dim;
        let (pa, pb) = (self.pool(a), self.pool(b));
        let z = self.logit_vectors(&pa.h, &pb.h);
        let y = if label.is_equivalent() { 1.0 } else { 0.0 };
        let loss = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        let dz = (sigmoid(z) - y) * scale;
        let mut dha = vec![0.0; d];
        let mut dhb = vec![0.0; d];
        for r in 0..d {
            let row = &self.w[r * d..(r + 1) * d];
            for c in 0..d {
                grad[r * d + c] += dz * pa.h[r] * pb.h[c];
                dha[r] += dz * row[c] * pb.h[c];
                dhb[c] += dz * row[c] * pa.h[r];
            }
        }
        grad[d * d] += dz;
        match dfeat {
            Some((da, db)) => {
                self.pool_backward(a, &pa, &dha, grad, Some(da));
                self.pool_backward(b, &pb, &dhb, grad, Some(db));
            }
            None if self.mix_logits.is_some() || self.attn.is_some() => {
                self.pool_backward(a, &pa, &dha, grad, None);
                self.pool_backward(b, &pb, &dhb, grad, None);
            }
            None => {}
        }
        (loss, z)
    }
}

/// Sentence string to probe features.
#[derive(Clone, Debug, Default)]
pub struct FeatureBank {
    index: HashMap<String, usize>,
    feats: Vec<Features>,
}

impl FeatureBank {
    pub fn from_features(items: impl IntoIterator<Item = (String, Features)>) -> Result<Self> {
        let mut bank = FeatureBank::default();
        for (s, f) in items {
            bank.insert(s, f)?;
        }
        Ok(bank)
    }

    pub fn from_vectors(items: impl IntoIterator<Item = (String, Vec<f32>)>) -> Result<Self> {
        Self::from_features(items.into_iter().map(|(s, v)| (s, Features::vector(v))))
    }

    fn insert(&mut self, s: String, f: Features) -> Result<()> {
        if let Some(first) = self.feats.first() {
            if (first.layers, first.dim) != (f.layers, f.dim) {
                return Err(Error::Mismatch {
                    what: "feature shape",
                    detail: format!("{s:?} has {} layers of {}", f.layers, f.dim),
                });
            }
        }
        if !self.index.contains_key(&s) {
            self.index.insert(s, self.feats.len());
            self.feats.push(f);
        }
        Ok(())
    }

    /// Encodes every sentence of `pairs` with a frozen logic-language encoder.
    pub fn from_encoder<P: LabeledPair>(ckpt: &Checkpoint, pooling: Pooling, pairs: &[&[P]]) -> Result<Self> {
        let arch = ckpt.arch();
        let strategy = RepStrategy::for_arch(arch, pooling);
        let mut sentences: Vec<&str> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for split in pairs {
            for p in split.iter() {
                for s in [p.sentence_a(), p.sentence_b()] {
                    if seen.insert(s) {
                        sentences.push(s);
                    }
                }
            }
        }
        let mut bank = FeatureBank::default();
        for chunk in sentences.chunks(256) {
            let ids: Vec<Vec<u32>> = chunk
                .iter()
                .map(|s| tokenize(s).map(|t| sentence_ids(arch, &t)))
                .collect::<Result<_>>()?;
            let states = ckpt.encode_batch(&ids)?;
            for (s, st) in chunk.iter().zip(&states) {
                let f = features_from_states(st, &strategy, sentence_span(arch, st.len))?;
                bank.insert(s.to_string(), f)?;
            }
        }
        Ok(bank)
    }

    pub fn get(&self, s: &str) -> Result<&Features> {
        self.index
            .get(s)
            .map(|&i| &self.feats[i])
            .ok_or_else(|| Error::config(format!("no representation for sentence {s:?}")))
    }

    pub fn len(&self) -> usize {
        self.feats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feats.is_empty()
    }

    /// `(layers, dim)` shared by every entry.
    pub fn shape(&self) -> Option<(usize, usize)> {
        self.feats.first().map(|f| (f.layers, f.dim))
    }
}

/// The sentence representation a trained probe computes from encoder states
/// covering exactly the sentence tokens.
pub fn sentence_representation(states: &LayerStates, probe: &BilinearProbe) -> Result<Vec<f64>> {
    let f = features_from_states(states, &probe.strategy(), 0..states.len)?;
    probe.represent(&f)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub pooling: Pooling,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ProbeConfig {
    pub fn desk(pooling: Pooling, seed: u64) -> Self {
        ProbeConfig {
            pooling,
            lr: 1e-4,
            epochs: 5,
            batch_size: 64,
            warmup_steps: 100,
            grad_clip: 1.0,
            weight_decay: 0.0,
            seed,
        }
    }

    /// 3 epochs, batch 8, 1,000 warmup steps, learning rate 1e-5.
    pub fn reference(pooling: Pooling, seed: u64) -> Self {
        ProbeConfig {
            pooling,
            lr: 1e-5,
            epochs: 3,
            batch_size: 8,
            warmup_steps: 1000,
            grad_clip: 1.0,
            weight_decay: 0.0,
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
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub valid_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeTrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_valid_accuracy: f64,
    pub steps: usize,
}

/// Trains a probe on frozen features, keeping the parameters of the epoch
/// with the best validation accuracy (the last epoch when `valid` is empty).
pub fn train_probe_on_bank<P: LabeledPair>(
    bank: &FeatureBank,
    train: &[P],
    valid: &[P],
    cfg: &ProbeConfig,
) -> Result<(BilinearProbe, ProbeTrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("probe training split is empty".into()));
    }
    let (layers, dim) = bank
        .shape()
        .ok_or_else(|| Error::EmptyDataset("no sentence representations".into()))?;
    let resolve = |ps: &[P]| -> Result<Vec<(&Features, &Features, PairLabel)>> {
        ps.iter()
            .map(|p| Ok((bank.get(p.sentence_a())?, bank.get(p.sentence_b())?, p.label())))
            .collect()
    };
    let (train_set, valid_set) = (resolve(train)?, resolve(valid)?);
    let mut probe = BilinearProbe::new(dim, layers, cfg.pooling, cfg.seed);
    let total_steps = cfg.epochs * train_set.len().div_ceil(cfg.batch_size);
    let n = probe.n_flat();
    let mut opt = AdamW::new(n, vec![false; n], &cfg.optimizer_config());
    let mut flat = probe.to_flat();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut order_rng = rng::stream(cfg.seed, 1);
    let mut report = ProbeTrainReport::default();
    let mut best: Option<(f64, BilinearProbe)> = None;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; n];
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (a, b, label) = train_set[i];
                let (loss, z) = probe.pair_loss_grad(a, b, label, scale, &mut grad);
                loss_sum += loss;
                correct += usize::from(PairLabel::from_equal(z > 0.0) == label);
            }
            let norm = clip_grad_norm(&mut grad, cfg.grad_clip);
            if !norm.is_finite() || !loss_sum.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    detail: format!("probe loss {loss_sum}, gradient norm {norm}"),
                });
            }
            opt.step(&mut flat, &grad, lr_at(step, cfg.lr, cfg.warmup_steps, total_steps));
            probe.set_flat(&flat);
            step += 1;
        }
        let valid_accuracy = if valid_set.is_empty() {
            f64::NAN
        } else {
            accuracy_on(&probe, &valid_set)
        };
        report.epochs.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            valid_accuracy,
        });
        let score = if valid_set.is_empty() { epoch as f64 } else { valid_accuracy };
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, probe.clone()));
            report.best_epoch = epoch;
            report.best_valid_accuracy = valid_accuracy;
        }
    }
    report.steps = step;
    Ok((best.expect("at least one epoch").1, report))
}

fn accuracy_on(probe: &BilinearProbe, set: &[(&Features, &Features, PairLabel)]) -> f64 {
    let ok = set
        .iter()
        .filter(|(a, b, l)| {
            let z = probe.logit_vectors(&probe.pool(a).h, &probe.pool(b).h);
            PairLabel::from_equal(z > 0.0) == *l
        })
        .count();
    ok as f64 / set.len() as f64
}

/// Trains a probe on a frozen encoder. The encoder is only read.
pub fn train_probe<P: LabeledPair>(
    encoder: &Checkpoint,
    train: &[P],
    valid: &[P],
    cfg: &ProbeConfig,
) -> Result<(BilinearProbe, ProbeTrainReport)> {
    let bank = FeatureBank::from_encoder(encoder, cfg.pooling, &[train, valid])?;
    train_probe_on_bank(&bank, train, valid, cfg)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeEval {
    pub n: usize,
    pub accuracy: f64,
    /// Accuracy restricted to each gold label.
    pub per_label: BTreeMap<PairLabel, f64>,
    pub per_label_counts: BTreeMap<PairLabel, usize>,
}

pub fn eval_probe_on_bank<P: LabeledPair>(bank: &FeatureBank, probe: &BilinearProbe, pairs: &[P]) -> Result<ProbeEval> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("evaluation split is empty".into()));
    }
    let mut correct = 0;
    let mut by_label: BTreeMap<PairLabel, (usize, usize)> = BTreeMap::new();
    for p in pairs {
        let pred = probe.predict(bank.get(p.sentence_a())?, bank.get(p.sentence_b())?)?;
        let ok = pred == p.label();
        correct += usize::from(ok);
        let e = by_label.entry(p.label()).or_default();
        e.0 += usize::from(ok);
        e.1 += 1;
    }
    Ok(ProbeEval {
        n: pairs.len(),
        accuracy: correct as f64 / pairs.len() as f64,
        per_label: by_label.iter().map(|(&l, &(c, t))| (l, c as f64 / t as f64)).collect(),
        per_label_counts: by_label.iter().map(|(&l, &(_, t))| (l, t)).collect(),
    })
}

pub fn eval_probe<P: LabeledPair>(encoder: &Checkpoint, probe: &BilinearProbe, pairs: &[P]) -> Result<ProbeEval> {
    let bank = FeatureBank::from_encoder(encoder, probe.pooling, &[pairs])?;
    eval_probe_on_bank(&bank, probe, pairs)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return MeanStd::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        MeanStd { mean, std: var.sqrt(), n }
    }

    /// Percentages with one decimal, `value±std`.
    pub fn percent(&self) -> String {
        format!("{:.1}±{:.1}", 100.0 * self.mean, 100.0 * self.std)
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.percent())
    }
}

pub const PROBE_FILE: &str = "probe.json";

/// A trained probe with the settings and encoder it was trained against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedProbe {
    pub probe: BilinearProbe,
    pub config: Option<ProbeConfig>,
    pub report: Option<ProbeTrainReport>,
    pub encoder_digest: Option<String>,
}

impl SavedProbe {
    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        crate::io::create_dir(dir)?;
        crate::io::write_json(&dir.join(PROBE_FILE), self)
    }

    pub fn load(dir: &std::path::Path) -> Result<Self> {
        let path = if dir.is_dir() { dir.join(PROBE_FILE) } else { dir.to_path_buf() };
        crate::io::read_json(&path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[derive(Clone)]
    struct P(String, String, PairLabel);

    impl LabeledPair for P {
        fn sentence_a(&self) -> &str {
            &self.0
        }
        fn sentence_b(&self) -> &str {
            &self.1
        }
        fn label(&self) -> PairLabel {
            self.2
        }
    }

    fn planted(n: usize, d: usize, seed: u64) -> (FeatureBank, Vec<P>) {
        let mut r = rng::seeded(seed);
        let mut vecs = Vec::new();
        let mut pairs = Vec::new();
        while pairs.len() < n {
            let a: Vec<f32> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
            let dot: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            if dot.abs() < 0.3 {
                continue;
            }
            let k = pairs.len();
            let (sa, sb) = (format!("a{k}"), format!("b{k}"));
            pairs.push(P(sa.clone(), sb.clone(), PairLabel::from_equal(dot > 0.0)));
            vecs.push((sa, a));
            vecs.push((sb, b));
        }
        (FeatureBank::from_vectors(vecs).unwrap(), pairs)
    }

    #[test]
    fn planted_signal_is_learned() {
        let (bank, pairs) = planted(3000, 16, 1);
        let mut cfg = ProbeConfig::desk(Pooling::MinusAttn, 0);
        cfg.lr = 1e-2;
        cfg.epochs = 30;
        let (probe, report) = train_probe_on_bank(&bank, &pairs[..2400], &pairs[2400..2700], &cfg).unwrap();
        let acc = eval_probe_on_bank(&bank, &probe, &pairs[2700..]).unwrap().accuracy;
        assert!(acc > 0.97, "{acc} {report:?}");
    }

    #[test]
    fn constant_predictor_breakdown() {
        let (bank, mut pairs) = planted(200, 4, 2);
        let eq: Vec<P> = pairs.iter().filter(|p| p.2.is_equivalent()).take(50).cloned().collect();
        pairs.retain(|p| !p.2.is_equivalent());
        pairs.truncate(50);
        pairs.extend(eq);
        let mut probe = BilinearProbe::new(4, 1, Pooling::MinusAttn, 0);
        probe.w.fill(0.0);
        probe.bias = 1.0;
        let e = eval_probe_on_bank(&bank, &probe, &pairs).unwrap();
        assert_eq!(e.accuracy, 0.5);
        assert_eq!(e.per_label[&PairLabel::Equivalent], 1.0);
        assert_eq!(e.per_label[&PairLabel::NonEquivalent], 0.0);
    }

    #[test]
    fn pooling_definitions() {
        let st = LayerStates {
            n_states: 3,
            len: 4,
            dim: 2,
            data: (0..24).map(|v| v as f32).collect(),
        };
        let alm = features_from_states(&st, &RepStrategy::for_arch(Arch::Alm, Pooling::MinusAttn), 0..4).unwrap();
        assert_eq!(alm.data, st.vector(2, 3).to_vec());
        let single = features_from_states(&st, &RepStrategy::for_arch(Arch::Mlm, Pooling::MinusAttn), 1..2).unwrap();
        let probe = BilinearProbe::new(2, 3, Pooling::MinusAttn, 0);
        let h = probe.represent(&single).unwrap();
        let want: Vec<f64> = (0..2)
            .map(|j| (0..3).map(|l| st.vector(l, 1)[j] as f64).sum::<f64>() / 3.0)
            .collect();
        assert!(h.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-9));
        let toks = features_from_states(&st, &RepStrategy::for_arch(Arch::Alm, Pooling::PlusAttn), 0..4).unwrap();
        let mut p = BilinearProbe::new(2, 1, Pooling::PlusAttn, 0);
        p.attn.as_mut().unwrap().key.fill(0.0);
        let h = p.represent(&toks).unwrap();
        let mean: Vec<f64> = (0..2).map(|j| (0..4).map(|i| st.vector(2, i)[j] as f64).sum::<f64>() / 4.0).collect();
        assert!(h.iter().zip(&mean).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn probe_gradients_match_finite_differences() {
        let mut r = rng::seeded(6);
        let mk = |r: &mut crate::rng::SeededRng, len| Features {
            layers: 3,
            len,
            dim: 4,
            data: (0..3 * len * 4).map(|_| r.random_range(-1.0..1.0)).collect(),
        };
        let (a, b) = (mk(&mut r, 5), mk(&mut r, 3));
        for pooling in [Pooling::MinusAttn, Pooling::PlusAttn] {
            let mut probe = BilinearProbe::new(4, 3, pooling, 2);
            if let Some(m) = &mut probe.mix_logits {
                m.copy_from_slice(&[0.3, -0.2, 0.5]);
            }
            let mut grad = vec![0.0; probe.n_flat()];
            probe.pair_loss_grad(&a, &b, PairLabel::Equivalent, 1.0, &mut grad);
            let base = probe.to_flat();
            for i in 0..base.len() {
                let loss = |delta: f64| {
                    let mut p = probe.clone();
                    let mut v = base.clone();
                    v[i] += delta;
                    p.set_flat(&v);
                    let mut g = vec![0.0; v.len()];
                    p.pair_loss_grad(&a, &b, PairLabel::Equivalent, 1.0, &mut g).0
                };
                let num = (loss(1e-6) - loss(-1e-6)) / 2e-6;
                assert!((num - grad[i]).abs() < 1e-6 * (1.0 + num.abs()), "{pooling} {i}: {num} vs {}", grad[i]);
            }
        }
    }

    #[test]
    fn mean_std_format() {
        let m = MeanStd::of(&[0.5, 0.49, 0.51]);
        assert_eq!(m.n, 3);
        assert_eq!(m.percent(), "50.0±0.8");
    }
}
