use serde::{Deserialize, Serialize};

use super::params::{MoeConfig, MoeState, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled: each step shrinks parameters by `lr * weight_decay`.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// AdamW moment estimates, laid out like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Parameters,
    v: Parameters,
    steps: u64,
}

impl AdamW {
    pub fn new(model: &MoeConfig, config: AdamWConfig) -> Self {
        Self {
            config,
            m: Parameters::zeros(model),
            v: Parameters::zeros(model),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One bias-corrected update at learning rate `lr`.
    pub fn step(&mut self, state: &mut MoeState, grads: &Parameters, lr: f64) {
        self.steps += 1;
        let c = self.config;
        let t = self.steps as f64;
        let bc1 = 1.0 - libm::pow(c.beta1, t);
        let bc2 = 1.0 - libm::pow(c.beta2, t);
        let params = state.params.named_mut();
        let moments = self.m.named_mut().into_iter().zip(self.v.named_mut());
        for (((_, p), (_, g)), ((_, m), (_, v))) in params.into_iter().zip(grads.named()).zip(moments) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * gi;
                v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                p.data[i] -= lr * c.weight_decay * p.data[i];
                p.data[i] -= lr * m_hat / (libm::sqrt(v_hat) + c.eps);
            }
        }
    }
}

/// Learning-rate multiplier for update `step` (0-based) of `total`: linear
/// warm-up from 0 over `warmup` updates, then cosine decay to 0.
pub fn cosine_with_warmup(step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return step as f64 / warmup.max(1) as f64;
    }
    let progress = (step - warmup) as f64 / (total.saturating_sub(warmup)).max(1) as f64;
    0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress.min(1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::network::{loss_and_grads, Example};
    use alloc::vec;

    #[test]
    fn schedule_shape() {
        assert_eq!(cosine_with_warmup(0, 10, 2), 0.0);
        assert_eq!(cosine_with_warmup(1, 10, 2), 0.5);
        assert_eq!(cosine_with_warmup(2, 10, 2), 1.0);
        assert!((cosine_with_warmup(6, 10, 2) - 0.5).abs() < 1e-15);
        assert!(cosine_with_warmup(10, 10, 2).abs() < 1e-15);
        assert_eq!(cosine_with_warmup(0, 5, 0), 1.0);
    }

    #[test]
    fn first_step_moves_each_parameter_by_about_lr() {
        // With bias correction the first update is lr * g / (|g| + eps).
        let cfg = MoeConfig { experts: 2, top_k: 1, layers: 1, dim: 2, vocab: 3, seed: 2 };
        let mut s = MoeState::random(cfg, 0.5).unwrap();
        let before = s.clone();
        let batch = [Example { context: vec![0], target: vec![1, 2] }];
        let g = loss_and_grads(&batch, &s).unwrap().grads;
        let mut opt = AdamW::new(&cfg, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        opt.step(&mut s, &g, 1e-3);
        for ((_, a), (_, b)) in s.params.named().into_iter().zip(before.params.named()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                let d = (x - y).abs();
                assert!(d == 0.0 || (d - 1e-3).abs() < 1e-6, "step {d}");
            }
        }
    }

    #[test]
    fn repeated_steps_reduce_loss() {
        let cfg = MoeConfig { experts: 3, top_k: 2, layers: 2, dim: 4, vocab: 7, seed: 3 };
        let mut s = MoeState::random(cfg, 0.5).unwrap();
        let batch = [Example { context: vec![1, 2], target: vec![3, 4, 5, 6] }];
        let start = loss_and_grads(&batch, &s).unwrap().loss;
        let mut opt = AdamW::new(&cfg, AdamWConfig::default());
        for _ in 0..50 {
            let g = loss_and_grads(&batch, &s).unwrap().grads;
            opt.step(&mut s, &g, 1e-2);
        }
        assert!(loss_and_grads(&batch, &s).unwrap().loss < start);
    }
}
