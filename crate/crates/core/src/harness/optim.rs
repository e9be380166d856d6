use serde::{Deserialize, Serialize};

use crate::numerics::{ParamStore, Real};

/// Linear warmup from 0 to `peak` over `warmup_fraction · total` steps,
/// then linear decay to 0 at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        let total = self.total_steps as f64;
        let s = step as f64;
        if step >= self.total_steps {
            return 0.0;
        }
        let warmup = self.warmup_fraction * total;
        if s < warmup {
            self.peak * s / warmup
        } else {
            self.peak * (total - s) / (total - warmup)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over every tensor of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam<T> {
    cfg: AdamConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    steps: i32,
}

impl<T: Real> Adam<T> {
    pub fn new<U: Real>(cfg: AdamConfig, store: &ParamStore<U>) -> Self {
        let zeros: Vec<Vec<T>> = store.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        Adam {
            cfg,
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }

    /// Applies one update using each tensor's gradient buffer scaled by `grad_scale`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64, grad_scale: T) {
        self.steps += 1;
        let b1 = T::lit(self.cfg.beta1);
        let b2 = T::lit(self.cfg.beta2);
        let one = T::one();
        let c1 = one - T::lit(self.cfg.beta1.powi(self.steps));
        let c2 = one - T::lit(self.cfg.beta2.powi(self.steps));
        let eps = T::lit(self.cfg.eps);
        let lr = T::lit(lr);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let t = store.get_mut(id);
            let Some(grad) = t.grad().map(<[T]>::to_vec) else { continue };
            let (m, v) = (&mut self.first[id.index()], &mut self.second[id.index()]);
            for (((p, g), m), v) in t.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = *g * grad_scale;
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
