//! First-order optimizers and learning-rate schedules.
//!
//! One adaptive-moment optimizer ([`Adam`]) over flat parameter vectors is
//! shared by every training and fitting loop in the crate; composite
//! parameter sets are concatenated into a single vector and sliced apart
//! inside the objective.

use serde::{Deserialize, Serialize};

use crate::tensor::DenseArray;

/// Learning-rate schedule: linear warmup from 0 over `warmup` steps to
/// `base`, then halved every `halve_every` steps (0 disables halving).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup: usize,
    pub halve_every: usize,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        LrSchedule {
            base,
            warmup: 0,
            halve_every: 0,
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        let mut lr = self.base;
        if self.warmup > 0 && step < self.warmup {
            lr *= (step + 1) as f64 / self.warmup as f64;
        } else if self.halve_every > 0 {
            let past = step - self.warmup;
            lr *= 0.5f64.powi((past / self.halve_every) as i32);
        }
        lr
    }
}

/// Adam with the usual bias correction. Minimizes; pass negated gradients to
/// ascend.
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(dim: usize) -> Self {
        Adam {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update step: params -= lr * m_hat / (sqrt(v_hat) + eps).
    pub fn step(&mut self, params: &mut DenseArray, grad: &DenseArray, lr: f64) {
        assert_eq!(params.len(), grad.len(), "adam param/grad length");
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((p, g), (m, v)) in params
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mh = *m / b1t;
            let vh = *v / b2t;
            *p -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

/// Mean of the last `window` entries (whole slice if shorter); used for
/// smoothed loss/ELBO comparisons.
pub fn smoothed_tail(trace: &[f64], window: usize) -> f64 {
    if trace.is_empty() {
        return f64::NAN;
    }
    let w = window.min(trace.len()).max(1);
    trace[trace.len() - w..].iter().sum::<f64>() / w as f64
}
