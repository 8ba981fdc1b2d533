//! Adam with L2 weight decay, batch-norm running statistics and the
//! validation-plateau learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::BnUpdate;
use crate::params::{Gradients, ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;

/// `running ← (1 − m)·running + m·batch`, using the unbiased batch variance.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) -> Result<()> {
    for u in updates {
        for (suffix, batch) in [("running_mean", &u.mean), ("running_var", &u.var_unbiased)] {
            let t = store.tensor_mut(&format!("{}.{suffix}", u.prefix))?;
            if t.len() != batch.len() {
                return Err(Error::Shape(format!("{}: {} running stats vs {} channels", u.prefix, t.len(), batch.len())));
            }
            for (r, b) in t.iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 5e-4 }
    }
}

/// Optimizer state. Moments are kept at single precision, like parameters,
/// so a checkpoint restores them exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub lr: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, cfg: AdamConfig) -> Self {
        let mut m = BTreeMap::new();
        for name in store.names(ParamKind::Trainable) {
            let shape = store.tensor(&name).expect("listed name").raw_dim();
            m.insert(name, Tensor::zeros(shape));
        }
        Self { cfg, lr, step: 0, v: m.clone(), m }
    }

    /// One update of every trainable parameter; a parameter without a
    /// gradient still decays.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (name, g) in grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite gradient for `{name}`")));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, m) in self.m.iter_mut() {
            let v = self.v.get_mut(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
            let theta = store.tensor_mut(name)?;
            let zero;
            let grad = match grads.get(name) {
                Some(g) if g.shape() == theta.shape() => g,
                Some(g) => return Err(Error::Shape(format!("gradient {:?} for `{name}` {:?}", g.shape(), theta.shape()))),
                None => {
                    zero = Tensor::zeros(theta.raw_dim());
                    &zero
                }
            };
            ndarray::Zip::from(theta).and(m).and(v).and(grad).for_each(|p, mi, vi, &g| {
                let g = g + weight_decay * *p;
                *mi = (beta1 * *mi + (1.0 - beta1) * g) as f32 as f64;
                *vi = (beta2 * *vi + (1.0 - beta2) * g * g) as f32 as f64;
                *p -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            });
        }
        Ok(())
    }
}

/// Halves the learning rate once the validation loss has failed to improve
/// for `patience` consecutive epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plateau {
    pub patience: usize,
    pub factor: f64,
    pub best: f64,
    pub stale: usize,
}

impl Plateau {
    pub fn new(patience: usize) -> Self {
        Self { patience, factor: 0.5, best: f64::INFINITY, stale: 0 }
    }

    /// Records one epoch's validation loss and returns the new learning rate.
    pub fn observe(&mut self, val_loss: f64, lr: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.stale = 0;
            return lr;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.stale = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}
