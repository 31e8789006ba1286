//! SGD with momentum and Adam, both with weight decay.

use crate::config::OptimizerKind;
use crate::error::{PahError, Result};
use crate::params::{GradBuffer, ParamStore};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    pub steps: u64,
    /// Momentum buffer (SGD) or first moment (Adam), one per parameter.
    pub first: Vec<Tensor>,
    /// Second moment (Adam only).
    pub second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, momentum: f64, weight_decay: f64, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Optimizer {
            kind,
            momentum,
            weight_decay,
            steps: 0,
            first: zeros(),
            second: match kind {
                OptimizerKind::Adam => zeros(),
                OptimizerKind::Sgd => Vec::new(),
            },
        }
    }

    /// SGD: `v = mu v + g + wd w; w -= lr v`. Adam decouples the decay:
    /// `w -= lr (m_hat / (sqrt(v_hat) + eps) + wd w)`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer, lr: f64) -> Result<()> {
        if !grads.all_finite() {
            return Err(PahError::NonFinite("parameter gradient".into()));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let g = grads.get(id).data();
            let w = store.get_mut(id).data_mut();
            let m = self.first[i].data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for j in 0..w.len() {
                        m[j] = self.momentum * m[j] + g[j] + self.weight_decay * w[j];
                        w[j] -= lr * m[j];
                    }
                }
                OptimizerKind::Adam => {
                    let v = self.second[i].data_mut();
                    let c1 = 1.0 - ADAM_BETA1.powi(t);
                    let c2 = 1.0 - ADAM_BETA2.powi(t);
                    for j in 0..w.len() {
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                        let upd = (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
                        w[j] -= lr * (upd + self.weight_decay * w[j]);
                    }
                }
            }
        }
        Ok(())
    }
}
