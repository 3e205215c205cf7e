use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay. Decay applies only where `decay_mask`
/// is set (weight matrices).
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    decay_mask: Vec<bool>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, n: usize, decay_mask: Vec<bool>) -> Self {
        Self {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            decay_mask,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        let c = self.config;
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            let mut update = mhat / (vhat.sqrt() + c.eps);
            if self.decay_mask[i] {
                update += c.weight_decay * params[i];
            }
            params[i] -= lr * update;
        }
    }
}

/// Linear warmup to `peak`, then exponential decay reaching
/// `peak * final_ratio` at `total_steps`. With `warmup_steps == 0` and
/// `final_ratio == 1` the rate is constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub final_ratio: f64,
}

impl LrSchedule {
    pub fn constant(lr: f64, steps: u64) -> Self {
        Self {
            peak: lr,
            warmup_steps: 0,
            total_steps: steps,
            final_ratio: 1.0,
        }
    }

    /// Rate for 0-based `step`.
    pub fn at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let k = (step - self.warmup_steps) as f64 / span;
        self.peak * self.final_ratio.powf(k)
    }
}
