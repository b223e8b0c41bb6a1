use crate::autodiff::{Gradients, Param};
use crate::error::Result;
use crate::scalar::{s, Scalar};
use std::collections::HashMap;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 disables it.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

/// Constant learning rate after a linear warmup from near zero.
#[derive(Clone, Copy, Debug)]
pub struct WarmupConstant {
    pub base_lr: f64,
    pub warmup: u64,
}

impl WarmupConstant {
    /// Learning rate for a 0-based step index.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup == 0 || step >= self.warmup {
            self.base_lr
        } else {
            self.base_lr * (step + 1) as f64 / self.warmup as f64
        }
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter identity,
/// so one optimizer can serve any subset of a model's parameters across steps.
pub struct Adam<S> {
    cfg: AdamConfig,
    t: u64,
    m: HashMap<u64, Vec<S>>,
    v: HashMap<u64, Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Apply one update to every listed parameter that received a gradient.
    /// Passing a frozen parameter is a caller bug and asserts.
    pub fn step(&mut self, params: &mut [&mut Param<S>], grads: &Gradients<S>) -> Result<()> {
        self.t += 1;
        let b1 = s::<S>(self.cfg.beta1);
        let b2 = s::<S>(self.cfg.beta2);
        let eps = s::<S>(self.cfg.eps);
        let lr = s::<S>(self.cfg.lr);
        let wd = s::<S>(self.cfg.weight_decay);
        let corr1 = S::one() - s::<S>(self.cfg.beta1.powi(self.t as i32));
        let corr2 = S::one() - s::<S>(self.cfg.beta2.powi(self.t as i32));
        for p in params.iter_mut() {
            assert!(
                p.is_trainable(),
                "optimizer step on frozen parameter {}",
                p.name()
            );
            let Some(g) = grads.wrt_param(p) else {
                continue;
            };
            let n = g.len();
            let m = self.m.entry(p.id()).or_insert_with(|| vec![S::zero(); n]);
            let v = self.v.entry(p.id()).or_insert_with(|| vec![S::zero(); n]);
            let gd = g.data();
            p.update_in_place(|x| {
                for i in 0..n {
                    m[i] = b1 * m[i] + (S::one() - b1) * gd[i];
                    v[i] = b2 * v[i] + (S::one() - b2) * gd[i] * gd[i];
                    let mhat = m[i] / corr1;
                    let vhat = v[i] / corr2;
                    x[i] = x[i] - lr * (mhat / (vhat.sqrt() + eps) + wd * x[i]);
                }
            });
        }
        Ok(())
    }
}
