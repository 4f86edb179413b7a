//! Pre-LayerNorm transformer with learned positions, tied input/output
//! embeddings and hand-written backpropagation.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::backend::{gemm, matmul, matmul_nt, matmul_tn_acc, Backend, Real, View};
use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::{self, SeededRng};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub decay: bool,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
}

impl Layout {
    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Per-coordinate weight-decay flags.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.total];
        for e in &self.entries {
            mask[e.range()].fill(e.decay);
        }
        mask
    }
}

#[derive(Clone, Debug)]
struct LayerOff {
    ln1_g: usize,
    ln1_b: usize,
    wqkv: usize,
    bqkv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct Offsets {
    wte: usize,
    wpe: usize,
    layers: Vec<LayerOff>,
    lnf_g: usize,
    lnf_b: usize,
    out_b: usize,
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Offsets) {
    let (v, d, f, p) = (cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.max_positions);
    let mut entries = Vec::new();
    let mut total = 0;
    let mut add = |name: String, shape: Vec<usize>| {
        let offset = total;
        total += shape.iter().product::<usize>();
        let decay = shape.len() == 2;
        entries.push(ParamEntry {
            name,
            shape,
            offset,
            decay,
        });
        offset
    };
    let wte = add("wte".into(), vec![v, d]);
    let wpe = add("wpe".into(), vec![p, d]);
    let layers = (0..cfg.n_layers)
        .map(|l| LayerOff {
            ln1_g: add(format!("h{l}.ln1.g"), vec![d]),
            ln1_b: add(format!("h{l}.ln1.b"), vec![d]),
            wqkv: add(format!("h{l}.attn.wqkv"), vec![d, 3 * d]),
            bqkv: add(format!("h{l}.attn.bqkv"), vec![3 * d]),
            wo: add(format!("h{l}.attn.wo"), vec![d, d]),
            bo: add(format!("h{l}.attn.bo"), vec![d]),
            ln2_g: add(format!("h{l}.ln2.g"), vec![d]),
            ln2_b: add(format!("h{l}.ln2.b"), vec![d]),
            w1: add(format!("h{l}.mlp.w1"), vec![d, f]),
            b1: add(format!("h{l}.mlp.b1"), vec![f]),
            w2: add(format!("h{l}.mlp.w2"), vec![f, d]),
            b2: add(format!("h{l}.mlp.b2"), vec![d]),
        })
        .collect();
    let lnf_g = add("lnf.g".into(), vec![d]);
    let lnf_b = add("lnf.b".into(), vec![d]);
    let out_b = add("out.b".into(), vec![v]);
    (
        Layout { entries, total },
        Offsets {
            wte,
            wpe,
            layers,
            lnf_g,
            lnf_b,
            out_b,
        },
    )
}

/// Sequences packed end to end; attention never crosses a boundary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<u32>,
    pub starts: Vec<usize>,
}

impl Batch {
    pub fn new<S: AsRef<[u32]>>(seqs: &[S]) -> Self {
        let mut ids = Vec::new();
        let mut starts = vec![0];
        for s in seqs {
            ids.extend_from_slice(s.as_ref());
            starts.push(ids.len());
        }
        Batch { ids, starts }
    }

    pub fn n_seqs(&self) -> usize {
        self.starts.len() - 1
    }

    pub fn n_tokens(&self) -> usize {
        self.ids.len()
    }

    pub fn seq(&self, i: usize) -> Range<usize> {
        self.starts[i]..self.starts[i + 1]
    }

    pub fn positions(&self) -> Vec<usize> {
        let mut pos = Vec::with_capacity(self.ids.len());
        for i in 0..self.n_seqs() {
            pos.extend(0..self.seq(i).len());
        }
        pos
    }
}

struct LayerCache<T> {
    h1: Vec<T>,
    mean1: Vec<T>,
    rstd1: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    att: Vec<T>,
    mask1: Option<Vec<T>>,
    xmid: Vec<T>,
    h2: Vec<T>,
    mean2: Vec<T>,
    rstd2: Vec<T>,
    u: Vec<T>,
    t: Vec<T>,
    g: Vec<T>,
    mask2: Option<Vec<T>>,
}

/// Activations kept from a forward pass for the backward pass.
pub struct Cache<T> {
    batch: Batch,
    positions: Vec<usize>,
    probs_off: Vec<usize>,
    emb_mask: Option<Vec<T>>,
    xs: Vec<Vec<T>>,
    layers: Vec<LayerCache<T>>,
    hf: Vec<T>,
    meanf: Vec<T>,
    rstdf: Vec<T>,
}

impl<T: Real> Cache<T> {
    pub fn batch(&self) -> &Batch {
        &self.batch
    }

    /// Attention weights of one head on one sequence, row-major `n x n`.
    pub fn attention(&self, layer: usize, seq: usize, head: usize) -> &[T] {
        let n = self.batch.seq(seq).len();
        let start = self.probs_off[seq] + head * n * n;
        &self.layers[layer].probs[start..start + n * n]
    }
}

#[derive(Clone, Debug)]
pub struct Transformer<T> {
    pub config: ModelConfig,
    pub params: Vec<T>,
    pub backend: Backend,
    layout: Layout,
    off: Offsets,
}

fn layer_norm<T: Real>(
    x: &[T],
    d: usize,
    g: &[T],
    b: &[T],
    y: &mut [T],
    mean: &mut [T],
    rstd: &mut [T],
) {
    let inv_d = T::of(1.0 / d as f64);
    let eps = T::of(LN_EPS);
    for (r, (xr, yr)) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)).enumerate() {
        let m = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - m) * (v - m)).sum::<T>() * inv_d;
        let s = (var + eps).sqrt().recip();
        for j in 0..d {
            yr[j] = (xr[j] - m) * s * g[j] + b[j];
        }
        mean[r] = m;
        rstd[r] = s;
    }
}

/// Adds the input gradient into `dx` and parameter gradients into `dg`, `db`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_back<T: Real>(
    x: &[T],
    d: usize,
    g: &[T],
    mean: &[T],
    rstd: &[T],
    dy: &[T],
    dx: &mut [T],
    dg: &mut [T],
    db: &mut [T],
) {
    let inv_d = T::of(1.0 / d as f64);
    let mut xhat = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for (r, (xr, dyr)) in x.chunks_exact(d).zip(dy.chunks_exact(d)).enumerate() {
        let (m, s) = (mean[r], rstd[r]);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for j in 0..d {
            xhat[j] = (xr[j] - m) * s;
            dxhat[j] = dyr[j] * g[j];
            dg[j] += dyr[j] * xhat[j];
            db[j] += dyr[j];
            sum_dxhat += dxhat[j];
            sum_dxhat_xhat += dxhat[j] * xhat[j];
        }
        let dxr = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            dxr[j] += s * (dxhat[j] - sum_dxhat * inv_d - xhat[j] * sum_dxhat_xhat * inv_d);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

fn tanh<T: Real>(x: T) -> T {
    let two = T::of(2.0);
    T::one() - two / ((two * x).exp() + T::one())
}

/// The tanh term of GELU at `u`.
fn gelu_t<T: Real>(u: T) -> T {
    tanh(T::of(GELU_C) * (u + T::of(GELU_A) * u * u * u))
}

#[cfg(test)]
fn gelu<T: Real>(u: T) -> T {
    T::of(0.5) * u * (T::one() + gelu_t(u))
}

fn gelu_grad_from<T: Real>(u: T, t: T) -> T {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    half * (T::one() + t) + half * u * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * u * u)
}

#[cfg(test)]
fn gelu_grad<T: Real>(u: T) -> T {
    gelu_grad_from(u, gelu_t(u))
}

fn add_bias<T: Real>(y: &mut [T], b: &[T]) {
    for row in y.chunks_exact_mut(b.len()) {
        for (v, &bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
}

fn bias_grad<T: Real>(dy: &[T], db: &mut [T]) {
    for row in dy.chunks_exact(db.len()) {
        for (g, &v) in db.iter_mut().zip(row) {
            *g += v;
        }
    }
}

fn dropout_mask<T: Real>(n: usize, p: f64, rng: &mut SeededRng) -> Vec<T> {
    let keep = T::of(1.0 / (1.0 - p));
    (0..n)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect()
}

fn apply_mask<T: Real>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        for (v, &k) in x.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Real> Transformer<T> {
    /// Random initialization from `config.seed`: normal(0, 0.02) weights,
    /// residual projections scaled by `1/sqrt(2 n_layers)`, unit LayerNorm
    /// gains and zero biases.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, off) = build_layout(config);
        let mut params = vec![T::zero(); layout.total];
        let mut rng = rng::stream(config.seed, 0x1417);
        let base = Normal::new(0.0, INIT_STD).expect("valid std");
        let resid = Normal::new(0.0, INIT_STD / (2.0 * config.n_layers as f64).sqrt()).expect("valid std");
        for e in &layout.entries {
            let dist = if e.name.ends_with(".wo") || e.name.ends_with(".w2") {
                resid
            } else {
                base
            };
            let slot = &mut params[e.range()];
            if e.decay {
                for v in slot.iter_mut() {
                    *v = T::of(dist.sample(&mut rng));
                }
            } else if e.name.ends_with(".g") {
                slot.fill(T::one());
            }
        }
        Ok(Transformer {
            config: config.clone(),
            params,
            backend: Backend::default(),
            layout,
            off,
        })
    }

    pub fn from_params(config: &ModelConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        let (layout, off) = build_layout(config);
        if params.len() != layout.total {
            return Err(Error::Mismatch {
                what: "parameter count",
                detail: format!("config needs {} values, got {}", layout.total, params.len()),
            });
        }
        Ok(Transformer {
            config: config.clone(),
            params,
            backend: Backend::default(),
            layout,
            off,
        })
    }

    pub fn with_backend(mut self, backend: Backend) -> Self {
        self.backend = backend;
        self
    }

    pub fn cast<U: Real>(&self) -> Transformer<U> {
        Transformer {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|&v| U::of(v.to_f64().expect("finite")))
                .collect(),
            backend: self.backend,
            layout: self.layout.clone(),
            off: self.off.clone(),
        }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    fn p(&self, offset: usize, len: usize) -> &[T] {
        &self.params[offset..offset + len]
    }

    pub fn check_batch(&self, batch: &Batch) -> Result<()> {
        for i in 0..batch.n_seqs() {
            let n = batch.seq(i).len();
            if n == 0 {
                return Err(Error::config("empty sequence in batch"));
            }
            if n > self.config.max_positions {
                return Err(Error::Overlength {
                    len: n,
                    max: self.config.max_positions,
                });
            }
        }
        if let Some(&bad) = batch.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::config(format!("token id {bad} outside the vocabulary")));
        }
        Ok(())
    }

    /// Runs the network. Dropout is active only when `dropout_rng` is given.
    pub fn forward(&self, batch: &Batch, mut dropout_rng: Option<&mut SeededRng>) -> Result<Cache<T>> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let (d, f, h, dh) = (cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.d_head());
        let n = batch.n_tokens();
        let be = self.backend;
        let p_drop = if cfg.dropout > 0.0 { cfg.dropout } else { 0.0 };
        let positions = batch.positions();
        let mut mask = |len: usize| match dropout_rng.as_deref_mut() {
            Some(r) if p_drop > 0.0 => Some(dropout_mask::<T>(len, p_drop, r)),
            _ => None,
        };

        let mut x0 = vec![T::zero(); n * d];
        for (r, (&id, &pos)) in batch.ids.iter().zip(&positions).enumerate() {
            let te = self.p(self.off.wte + id as usize * d, d);
            let pe = self.p(self.off.wpe + pos * d, d);
            for j in 0..d {
                x0[r * d + j] = te[j] + pe[j];
            }
        }
        let emb_mask = mask(n * d);
        apply_mask(&mut x0, &emb_mask);

        let mut probs_off = Vec::with_capacity(batch.n_seqs() + 1);
        let mut total = 0;
        for s in 0..batch.n_seqs() {
            probs_off.push(total);
            let len = batch.seq(s).len();
            total += h * len * len;
        }
        probs_off.push(total);

        let mut xs = vec![x0];
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for o in &self.off.layers {
            let x = xs.last().expect("input");
            let mut h1 = vec![T::zero(); n * d];
            let (mut mean1, mut rstd1) = (vec![T::zero(); n], vec![T::zero(); n]);
            layer_norm(x, d, self.p(o.ln1_g, d), self.p(o.ln1_b, d), &mut h1, &mut mean1, &mut rstd1);
            let mut qkv = vec![T::zero(); n * 3 * d];
            matmul(be, &h1, n, d, self.p(o.wqkv, d * 3 * d), 3 * d, T::zero(), &mut qkv);
            add_bias(&mut qkv, self.p(o.bqkv, 3 * d));
            let mut probs = vec![T::zero(); total];
            let mut att = vec![T::zero(); n * d];
            self.attention_forward(batch, &probs_off, &qkv, &mut probs, &mut att, h, dh);
            let mut a = vec![T::zero(); n * d];
            matmul(be, &att, n, d, self.p(o.wo, d * d), d, T::zero(), &mut a);
            add_bias(&mut a, self.p(o.bo, d));
            let mask1 = mask(n * d);
            apply_mask(&mut a, &mask1);
            let mut xmid = x.clone();
            add_into(&mut xmid, &a);

            let mut h2 = vec![T::zero(); n * d];
            let (mut mean2, mut rstd2) = (vec![T::zero(); n], vec![T::zero(); n]);
            layer_norm(&xmid, d, self.p(o.ln2_g, d), self.p(o.ln2_b, d), &mut h2, &mut mean2, &mut rstd2);
            let mut u = vec![T::zero(); n * f];
            matmul(be, &h2, n, d, self.p(o.w1, d * f), f, T::zero(), &mut u);
            add_bias(&mut u, self.p(o.b1, f));
            let t: Vec<T> = u.iter().map(|&v| gelu_t(v)).collect();
            let half = T::of(0.5);
            let g: Vec<T> = u.iter().zip(&t).map(|(&v, &tv)| half * v * (T::one() + tv)).collect();
            let mut m = vec![T::zero(); n * d];
            matmul(be, &g, n, f, self.p(o.w2, f * d), d, T::zero(), &mut m);
            add_bias(&mut m, self.p(o.b2, d));
            let mask2 = mask(n * d);
            apply_mask(&mut m, &mask2);
            let mut xout = xmid.clone();
            add_into(&mut xout, &m);
            xs.push(xout);
            layers.push(LayerCache {
                h1,
                mean1,
                rstd1,
                qkv,
                probs,
                att,
                mask1,
                xmid,
                h2,
                mean2,
                rstd2,
                u,
                t,
                g,
                mask2,
            });
        }
        let mut hf = vec![T::zero(); n * d];
        let (mut meanf, mut rstdf) = (vec![T::zero(); n], vec![T::zero(); n]);
        layer_norm(
            xs.last().expect("output"),
            d,
            self.p(self.off.lnf_g, d),
            self.p(self.off.lnf_b, d),
            &mut hf,
            &mut meanf,
            &mut rstdf,
        );
        Ok(Cache {
            batch: batch.clone(),
            positions,
            probs_off,
            emb_mask,
            xs,
            layers,
            hf,
            meanf,
            rstdf,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_forward(
        &self,
        batch: &Batch,
        probs_off: &[usize],
        qkv: &[T],
        probs: &mut [T],
        att: &mut [T],
        h: usize,
        dh: usize,
    ) {
        let d = h * dh;
        let be = self.backend;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let causal = self.config.arch.is_causal();
        for s in 0..batch.n_seqs() {
            let o = batch.starts[s];
            let n = batch.seq(s).len();
            for head in 0..h {
                let poff = probs_off[s] + head * n * n;
                let q = View { offset: o * 3 * d + head * dh, rows: n, cols: dh, rs: 3 * d, cs: 1 };
                let kt = View { offset: o * 3 * d + d + head * dh, rows: dh, cols: n, rs: 1, cs: 3 * d };
                gemm(be, scale, qkv, q, qkv, kt, T::zero(), probs, View::row_major(poff, n, n, n));
                for i in 0..n {
                    let row = &mut probs[poff + i * n..poff + (i + 1) * n];
                    let live = if causal { i + 1 } else { n };
                    let mx = row[..live].iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for v in &mut row[..live] {
                        *v = (*v - mx).exp();
                        sum += *v;
                    }
                    let inv = sum.recip();
                    for v in &mut row[..live] {
                        *v *= inv;
                    }
                    row[live..].fill(T::zero());
                }
                let v = View { offset: o * 3 * d + 2 * d + head * dh, rows: n, cols: dh, rs: 3 * d, cs: 1 };
                let out = View { offset: o * d + head * dh, rows: n, cols: dh, rs: d, cs: 1 };
                gemm(be, T::one(), probs, View::row_major(poff, n, n, n), qkv, v, T::zero(), att, out);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        batch: &Batch,
        probs_off: &[usize],
        qkv: &[T],
        probs: &[T],
        datt: &[T],
        dqkv: &mut [T],
    ) {
        let cfg = &self.config;
        let (h, dh, d) = (cfg.n_heads, cfg.d_head(), cfg.d_model);
        let be = self.backend;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        for s in 0..batch.n_seqs() {
            let o = batch.starts[s];
            let n = batch.seq(s).len();
            let mut dp = vec![T::zero(); n * n];
            for head in 0..h {
                let poff = probs_off[s] + head * n * n;
                let qv = View { offset: o * 3 * d + head * dh, rows: n, cols: dh, rs: 3 * d, cs: 1 };
                let kv = View { offset: o * 3 * d + d + head * dh, ..qv };
                let vv = View { offset: o * 3 * d + 2 * d + head * dh, ..qv };
                let vt = View { offset: vv.offset, rows: dh, cols: n, rs: 1, cs: 3 * d };
                let dout = View { offset: o * d + head * dh, rows: n, cols: dh, rs: d, cs: 1 };
                let sq = View::row_major(0, n, n, n);
                gemm(be, T::one(), datt, dout, qkv, vt, T::zero(), &mut dp, sq);
                gemm(
                    be,
                    T::one(),
                    probs,
                    View::transposed(poff, n, n, n),
                    datt,
                    dout,
                    T::zero(),
                    dqkv,
                    vv,
                );
                for i in 0..n {
                    let pr = &probs[poff + i * n..poff + (i + 1) * n];
                    let dr = &mut dp[i * n..(i + 1) * n];
                    let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                gemm(be, T::one(), &dp, sq, qkv, kv, T::zero(), dqkv, qv);
                gemm(be, T::one(), &dp, View::transposed(0, n, n, n), qkv, qv, T::zero(), dqkv, kv);
            }
        }
    }

    /// Hidden state `layer` in `0..=n_layers`: the embeddings, each block's
    /// output, and the final LayerNorm in place of the last block's output.
    pub fn hidden<'a>(&self, cache: &'a Cache<T>, layer: usize) -> &'a [T] {
        if layer == self.config.n_layers {
            &cache.hf
        } else {
            &cache.xs[layer]
        }
    }

    /// Output logits at the given packed rows, `rows.len() x vocab_size`.
    pub fn logits(&self, cache: &Cache<T>, rows: &[usize]) -> Vec<T> {
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        let m = rows.len();
        let mut gathered = vec![T::zero(); m * d];
        for (i, &r) in rows.iter().enumerate() {
            gathered[i * d..(i + 1) * d].copy_from_slice(&cache.hf[r * d..(r + 1) * d]);
        }
        let mut out = vec![T::zero(); m * v];
        gemm(
            self.backend,
            T::one(),
            &gathered,
            View::row_major(0, m, d, d),
            &self.params,
            View::transposed(self.off.wte, v, d, d),
            T::zero(),
            &mut out,
            View::row_major(0, m, v, v),
        );
        add_bias(&mut out, self.p(self.off.out_b, v));
        out
    }

    /// Accumulates parameter gradients into `grads` given gradients on the
    /// logits at `rows` and, optionally, on any hidden state.
    pub fn backward(
        &self,
        cache: &Cache<T>,
        rows: &[usize],
        d_logits: Option<&[T]>,
        d_hidden: &[Option<Vec<T>>],
        grads: &mut [T],
    ) {
        assert_eq!(grads.len(), self.params.len());
        let cfg = &self.config;
        let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let n = cache.batch.n_tokens();
        let be = self.backend;
        let hidden_grad = |l: usize| d_hidden.get(l).and_then(|g| g.as_ref());

        let mut dhf = vec![T::zero(); n * d];
        if let Some(dl) = d_logits {
            let m = rows.len();
            assert_eq!(dl.len(), m * v);
            let mut gathered = vec![T::zero(); m * d];
            for (i, &r) in rows.iter().enumerate() {
                gathered[i * d..(i + 1) * d].copy_from_slice(&cache.hf[r * d..(r + 1) * d]);
            }
            let mut dg = vec![T::zero(); m * d];
            gemm(
                be,
                T::one(),
                dl,
                View::row_major(0, m, v, v),
                &self.params,
                View::row_major(self.off.wte, v, d, d),
                T::zero(),
                &mut dg,
                View::row_major(0, m, d, d),
            );
            for (i, &r) in rows.iter().enumerate() {
                add_into(&mut dhf[r * d..(r + 1) * d], &dg[i * d..(i + 1) * d]);
            }
            gemm(
                be,
                T::one(),
                dl,
                View::transposed(0, m, v, v),
                &gathered,
                View::row_major(0, m, d, d),
                T::one(),
                grads,
                View::row_major(self.off.wte, v, d, d),
            );
            bias_grad(dl, &mut grads[self.off.out_b..self.off.out_b + v]);
        }
        if let Some(g) = hidden_grad(cfg.n_layers) {
            add_into(&mut dhf, g);
        }

        let mut dx = vec![T::zero(); n * d];
        {
            let (mut dgf, mut dbf) = (vec![T::zero(); d], vec![T::zero(); d]);
            layer_norm_back(
                &cache.xs[cfg.n_layers],
                d,
                self.p(self.off.lnf_g, d),
                &cache.meanf,
                &cache.rstdf,
                &dhf,
                &mut dx,
                &mut dgf,
                &mut dbf,
            );
            add_into(&mut grads[self.off.lnf_g..self.off.lnf_g + d], &dgf);
            add_into(&mut grads[self.off.lnf_b..self.off.lnf_b + d], &dbf);
        }

        for l in (0..cfg.n_layers).rev() {
            let o = &self.off.layers[l];
            let c = &cache.layers[l];
            let x = &cache.xs[l];

            let mut dm = dx.clone();
            apply_mask(&mut dm, &c.mask2);
            matmul_tn_acc(be, &c.g, n, f, &dm, d, &mut grads[o.w2..o.w2 + f * d]);
            bias_grad(&dm, &mut grads[o.b2..o.b2 + d]);
            let mut du = vec![T::zero(); n * f];
            matmul_nt(be, &dm, n, d, self.p(o.w2, f * d), f, T::zero(), &mut du);
            for ((g, &u), &t) in du.iter_mut().zip(&c.u).zip(&c.t) {
                *g *= gelu_grad_from(u, t);
            }
            matmul_tn_acc(be, &c.h2, n, d, &du, f, &mut grads[o.w1..o.w1 + d * f]);
            bias_grad(&du, &mut grads[o.b1..o.b1 + f]);
            let mut dh2 = vec![T::zero(); n * d];
            matmul_nt(be, &du, n, f, self.p(o.w1, d * f), d, T::zero(), &mut dh2);
            let mut dxmid = dx;
            let (mut dg2, mut db2) = (vec![T::zero(); d], vec![T::zero(); d]);
            layer_norm_back(
                &c.xmid,
                d,
                self.p(o.ln2_g, d),
                &c.mean2,
                &c.rstd2,
                &dh2,
                &mut dxmid,
                &mut dg2,
                &mut db2,
            );
            add_into(&mut grads[o.ln2_g..o.ln2_g + d], &dg2);
            add_into(&mut grads[o.ln2_b..o.ln2_b + d], &db2);

            let mut da = dxmid.clone();
            apply_mask(&mut da, &c.mask1);
            matmul_tn_acc(be, &c.att, n, d, &da, d, &mut grads[o.wo..o.wo + d * d]);
            bias_grad(&da, &mut grads[o.bo..o.bo + d]);
            let mut datt = vec![T::zero(); n * d];
            matmul_nt(be, &da, n, d, self.p(o.wo, d * d), d, T::zero(), &mut datt);
            let mut dqkv = vec![T::zero(); n * 3 * d];
            self.attention_backward(&cache.batch, &cache.probs_off, &c.qkv, &c.probs, &datt, &mut dqkv);
            matmul_tn_acc(be, &c.h1, n, d, &dqkv, 3 * d, &mut grads[o.wqkv..o.wqkv + d * 3 * d]);
            bias_grad(&dqkv, &mut grads[o.bqkv..o.bqkv + 3 * d]);
            let mut dh1 = vec![T::zero(); n * d];
            matmul_nt(be, &dqkv, n, 3 * d, self.p(o.wqkv, d * 3 * d), d, T::zero(), &mut dh1);
            let mut dxin = dxmid;
            let (mut dg1, mut db1) = (vec![T::zero(); d], vec![T::zero(); d]);
            layer_norm_back(
                x,
                d,
                self.p(o.ln1_g, d),
                &c.mean1,
                &c.rstd1,
                &dh1,
                &mut dxin,
                &mut dg1,
                &mut db1,
            );
            add_into(&mut grads[o.ln1_g..o.ln1_g + d], &dg1);
            add_into(&mut grads[o.ln1_b..o.ln1_b + d], &db1);
            if let Some(g) = hidden_grad(l) {
                add_into(&mut dxin, g);
            }
            dx = dxin;
        }

        apply_mask(&mut dx, &cache.emb_mask);
        for (r, (&id, &pos)) in cache.batch.ids.iter().zip(&cache.positions).enumerate() {
            let src = &dx[r * d..(r + 1) * d];
            let te = self.off.wte + id as usize * d;
            add_into(&mut grads[te..te + d], src);
            let pe = self.off.wpe + pos * d;
            add_into(&mut grads[pe..pe + d], src);
        }
    }
}

/// Mean cross-entropy over rows and its gradient with respect to the logits.
/// `weight` scales both (use `1/count` of the enclosing mean).
pub fn cross_entropy<T: Real>(logits: &[T], targets: &[u32], vocab: usize, weight: f64) -> (f64, Vec<T>) {
    let mut grad = vec![T::zero(); logits.len()];
    let mut loss = 0.0;
    let w = T::of(weight);
    for (i, &t) in targets.iter().enumerate() {
        let row = &logits[i * vocab..(i + 1) * vocab];
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - mx).exp()).sum();
        let lse = mx + sum.ln();
        loss += (lse - row[t as usize]).to_f64().expect("finite") * weight;
        let gr = &mut grad[i * vocab..(i + 1) * vocab];
        for j in 0..vocab {
            gr[j] = (row[j] - lse).exp() * w;
        }
        gr[t as usize] -= w;
    }
    (loss, grad)
}

/// Row-wise log-softmax.
pub fn log_softmax<T: Real>(logits: &[T], vocab: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(vocab) {
        let row: Vec<f64> = row.iter().map(|v| v.to_f64().expect("finite")).collect();
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::config::Arch;

    fn rand_seqs(rng: &mut SeededRng, count: usize, max_len: usize) -> Vec<Vec<u32>> {
        (0..count)
            .map(|_| {
                let n = rng.random_range(2..=max_len);
                (0..n).map(|_| rng.random_range(0..11)).collect()
            })
            .collect()
    }

    #[test]
    fn layout_counts() {
        let cfg = ModelConfig::tiny(Arch::Alm, 0);
        let m = Transformer::<f32>::init(&cfg).unwrap();
        let (v, d, f, p) = (11, 8, 16, 32);
        let per_layer = 4 * d + d * 3 * d + 3 * d + d * d + d + d * f + f + f * d + d;
        assert_eq!(m.num_params(), v * d + p * d + per_layer + 2 * d + v);
        assert!(m.layout().get("h0.attn.wqkv").unwrap().decay);
        assert!(!m.layout().get("h0.ln1.g").unwrap().decay);
    }

    #[test]
    fn attention_rows_normalized() {
        let mut rng = rng::seeded(1);
        for arch in [Arch::Alm, Arch::Mlm] {
            let cfg = ModelConfig::tiny(arch, 3);
            let m = Transformer::<f32>::init(&cfg).unwrap();
            let seqs = rand_seqs(&mut rng, 4, 12);
            let cache = m.forward(&Batch::new(&seqs), None).unwrap();
            for s in 0..4 {
                let n = seqs[s].len();
                let p = cache.attention(0, s, 1);
                for i in 0..n {
                    let sum: f32 = p[i * n..(i + 1) * n].iter().sum();
                    assert!((sum - 1.0).abs() < 1e-6);
                    if arch == Arch::Alm {
                        assert!(p[i * n + i + 1..(i + 1) * n].iter().all(|&x| x == 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn packing_does_not_leak() {
        let mut rng = rng::seeded(2);
        let cfg = ModelConfig::tiny(Arch::Mlm, 5);
        let m = Transformer::<f64>::init(&cfg).unwrap();
        let seqs = rand_seqs(&mut rng, 3, 9);
        let packed = m.forward(&Batch::new(&seqs), None).unwrap();
        let alone = m.forward(&Batch::new(&seqs[1..2]), None).unwrap();
        let r = Batch::new(&seqs).seq(1);
        let d = cfg.d_model;
        let a = &m.hidden(&packed, 1)[r.start * d..r.end * d];
        let b = m.hidden(&alone, 1);
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn overlength_rejected() {
        let cfg = ModelConfig::tiny(Arch::Alm, 0);
        let m = Transformer::<f32>::init(&cfg).unwrap();
        let long = vec![vec![0u32; 33]];
        assert!(matches!(
            m.forward(&Batch::new(&long), None),
            Err(Error::Overlength { len: 33, max: 32 })
        ));
    }

    #[test]
    fn gelu_derivative() {
        for &u in &[-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let num = (gelu(u + 1e-6) - gelu(u - 1e-6)) / 2e-6;
            assert!((num - gelu_grad(u)).abs() < 1e-8);
        }
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let logits = vec![0.1f64, -0.3, 2.0, 0.5, 0.5, 0.5];
        let (loss, grad) = cross_entropy(&logits, &[2, 0], 3, 0.5);
        let ls = log_softmax(&logits, 3);
        assert!((loss - 0.5 * (-ls[2] - ls[3])).abs() < 1e-12);
        let row_sum: f64 = grad[..3].iter().sum();
        assert!(row_sum.abs() < 1e-12);
    }
}
