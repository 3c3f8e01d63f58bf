//! Optimizers and learning-rate schedules.
//!
//! Both optimizers update a caller-chosen subset of a [`ParamStore`], which
//! is how each training block gets its own optimizer over disjoint
//! parameters. A parameter whose gradient and momentum buffer are both
//! entirely zero is left untouched, so weight decay never moves parameters
//! that took no part in the step.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LarsConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Trust coefficient scaling the layer-wise rate.
    pub trust: f64,
    pub eps: f64,
    /// Multiplier on the learning rate of excluded (bias and batch-norm)
    /// parameters.
    pub excluded_lr_scale: f64,
}

impl Default for LarsConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-6,
            trust: 0.001,
            eps: 1e-9,
            excluded_lr_scale: 1.0,
        }
    }
}

impl LarsConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.trust > 0.0
            && self.eps >= 0.0
            && self.excluded_lr_scale >= 0.0;
        if !ok {
            return Err(Error::config(format!("invalid LARS settings {self:?}")));
        }
        Ok(())
    }
}

fn check_finite<E: Element>(store: &ParamStore<E>, ids: &[ParamId]) -> Result<()> {
    for &id in ids {
        let p = store.param(id);
        if !p.grad.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
    }
    Ok(())
}

fn is_zero<E: Element>(t: &Tensor<E>) -> bool {
    t.data().iter().all(|v| *v == E::zero())
}

/// Layer-wise adaptive rate scaling with momentum.
///
/// For weights the step is `buf = m*buf + r*lr*(g + wd*w)`, `w -= buf` with
/// `r = trust*|w| / (|g| + wd*|w| + eps)`; `r = 1` while `|w| = 0`. Other
/// kinds take `buf = m*buf + g`, `w -= lr*buf`.
#[derive(Clone, Debug)]
pub struct Lars<E> {
    cfg: LarsConfig,
    buffers: HashMap<ParamId, Tensor<E>>,
}

impl<E: Element> Lars<E> {
    pub fn new(cfg: LarsConfig) -> Self {
        Self {
            cfg,
            buffers: HashMap::new(),
        }
    }

    pub fn config(&self) -> &LarsConfig {
        &self.cfg
    }

    pub fn buffer(&self, id: ParamId) -> Option<&Tensor<E>> {
        self.buffers.get(&id)
    }

    /// Updates `ids` from their accumulated gradients. Aborts before any
    /// update if a gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<E>, ids: &[ParamId], lr: f64) -> Result<()> {
        check_finite(store, ids)?;
        let c = self.cfg;
        for &id in ids {
            let p = store.param_mut(id);
            let buf = self.buffers.entry(id).or_insert_with(|| Tensor::zeros(p.value.shape()));
            if is_zero(&p.grad) && is_zero(buf) {
                continue;
            }
            let m = E::of(c.momentum);
            if p.kind.is_adapted() {
                let w_norm = p.value.sq_norm().sqrt();
                let g_norm = p.grad.sq_norm().sqrt();
                let local = if w_norm > 0.0 {
                    c.trust * w_norm / (g_norm + c.weight_decay * w_norm + c.eps)
                } else {
                    1.0
                };
                let scale = E::of(local * lr);
                let wd = E::of(c.weight_decay);
                for ((w, &g), b) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(buf.data_mut()) {
                    *b = m * *b + scale * (g + wd * *w);
                    *w = *w - *b;
                }
            } else {
                let rate = E::of(lr * c.excluded_lr_scale);
                for ((w, &g), b) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(buf.data_mut()) {
                    *b = m * *b + g;
                    *w = *w - rate * *b;
                }
            }
        }
        Ok(())
    }
}

/// Momentum SGD: `buf = m*buf + g + wd*w`, `w -= lr*buf`.
#[derive(Clone, Debug)]
pub struct Sgd<E> {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: HashMap<ParamId, Tensor<E>>,
}

impl<E: Element> Sgd<E> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: HashMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<E>, ids: &[ParamId], lr: f64) -> Result<()> {
        check_finite(store, ids)?;
        let (m, wd, lr) = (E::of(self.momentum), E::of(self.weight_decay), E::of(lr));
        for &id in ids {
            let p = store.param_mut(id);
            let buf = self.buffers.entry(id).or_insert_with(|| Tensor::zeros(p.value.shape()));
            if is_zero(&p.grad) && is_zero(buf) {
                continue;
            }
            for ((w, &g), b) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(buf.data_mut()) {
                *b = m * *b + g + wd * *w;
                *w = *w - lr * *b;
            }
        }
        Ok(())
    }
}

/// Half-cosine decay from `base` to 0 over `total` steps, after an optional
/// linear warmup.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CosineSchedule {
    pub base: f64,
    pub total: usize,
    #[serde(default)]
    pub warmup: usize,
}

impl CosineSchedule {
    pub fn new(base: f64, total: usize) -> Self {
        Self { base, total, warmup: 0 }
    }

    pub fn lr(&self, t: usize) -> Result<f64> {
        if t > self.total {
            return Err(Error::config(format!("step {t} beyond schedule length {}", self.total)));
        }
        if t < self.warmup {
            return Ok(self.base * t as f64 / self.warmup as f64);
        }
        let span = self.total.saturating_sub(self.warmup);
        if span == 0 {
            return Ok(0.0);
        }
        let progress = (t - self.warmup) as f64 / span as f64;
        Ok(self.base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}
