//! AdamW with linear warmup and linear decay, plus global-norm clipping.

use super::backend::Real;
use super::config::TrainConfig;

/// Learning rate at 0-based `step`: linear warmup to `lr`, then linear decay
/// to zero at `total` steps.
pub fn lr_at(step: usize, lr: f64, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        lr * (step + 1) as f64 / warmup as f64
    } else if total <= warmup {
        lr
    } else {
        lr * (total - step.min(total)) as f64 / (total - warmup) as f64
    }
}

/// Rescales `grads` in place so their L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [T], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| {
            let g = g.to_f64().unwrap_or(f64::NAN);
            g * g
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / (norm + 1e-12));
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    decay: Vec<bool>,
    t: u64,
}

impl AdamW {
    pub fn new(n: usize, decay: Vec<bool>, cfg: &TrainConfig) -> Self {
        assert_eq!(decay.len(), n);
        AdamW {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            decay,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step<T: Real>(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i].to_f64().expect("finite gradient");
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            let p = params[i].to_f64().expect("finite parameter");
            let mut upd = mhat / (vhat.sqrt() + self.eps);
            if self.decay[i] {
                upd += self.weight_decay * p;
            }
            params[i] = T::of(p - lr * upd);
        }
    }
}
