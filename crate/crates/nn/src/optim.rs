//! Adam with a warmup / constant / linear-decay learning-rate schedule.

use crate::error::{NnError, Result};
use crate::params::ParamStore;

/// Linear warmup over `warmup` steps, constant until `decay_start` of `total`
/// steps, then linear decay down to `final_ratio * base` at the last step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup: u64,
    pub total: u64,
    pub decay_start: f64,
    pub final_ratio: f64,
}

impl LrSchedule {
    pub fn new(base: f64, warmup: u64, total: u64) -> Self {
        Self {
            base,
            warmup,
            total,
            decay_start: 0.9,
            final_ratio: 0.1,
        }
    }

    pub fn constant(base: f64) -> Self {
        Self {
            base,
            warmup: 0,
            total: u64::MAX,
            decay_start: 1.0,
            final_ratio: 1.0,
        }
    }

    /// Learning rate used for the update at zero-based `step`.
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.base * (step + 1) as f64 / self.warmup as f64;
        }
        let start = (self.total as f64 * self.decay_start).floor() as u64;
        if step < start || self.total <= start {
            return self.base;
        }
        let span = (self.total - 1 - start).max(1) as f64;
        let t = ((step - start) as f64 / span).min(1.0);
        self.base * (1.0 - t * (1.0 - self.final_ratio))
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(schedule: LrSchedule) -> Self {
        Self {
            schedule,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_clip(mut self, norm: f64) -> Self {
        self.clip_norm = Some(norm);
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }

    /// Applies one update from the accumulated gradients, scaled by `grad_scale`
    /// (e.g. `1 / batch`), then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore, grad_scale: f64) -> Result<()> {
        for p in store.iter_mut() {
            if p.grad.data().iter().any(|g| !g.is_finite()) {
                return Err(NnError::NonFiniteGradient(p.name.clone()));
            }
        }
        if self.m.len() != store.len() {
            self.m = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
            self.v = self.m.clone();
        }
        let mut scale = grad_scale;
        if let Some(max) = self.clip_norm {
            let norm = store
                .iter()
                .flat_map(|(_, p)| p.grad.data().iter())
                .map(|g| (g * grad_scale).powi(2))
                .sum::<f64>()
                .sqrt();
            if norm > max {
                scale *= max / norm;
            }
        }
        let lr = self.schedule.lr(self.step);
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data();
            if grad.iter().all(|&g| g == 0.0) && m.iter().all(|&x| x == 0.0) {
                continue;
            }
            let value = p.value.data_mut();
            for i in 0..value.len() {
                let g = grad[i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                value[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        store.zero_grad();
        Ok(())
    }
}
