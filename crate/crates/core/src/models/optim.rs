use alloc::vec;
use alloc::vec::Vec;

use super::GradBuffer;
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

/// Adam with bias correction and optional global-norm clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, n_params: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One descent step on `params` along `grad`. Returns the gradient norm
    /// before clipping.
    pub fn step(&mut self, params: &mut [f64], grad: &GradBuffer) -> f64 {
        self.update(params, grad, 1.0)
    }

    /// One ascent step (maximizes the objective whose gradient is `grad`).
    pub fn ascend(&mut self, params: &mut [f64], grad: &GradBuffer) -> f64 {
        self.update(params, grad, -1.0)
    }

    fn update(&mut self, params: &mut [f64], grad: &GradBuffer, sign: f64) -> f64 {
        assert_eq!(params.len(), grad.len(), "gradient length mismatch");
        assert_eq!(params.len(), self.m.len(), "optimizer state length mismatch");
        let norm = grad.norm();
        let clip = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            ..
        } = self.cfg;
        let bc1 = 1.0 - libm::pow(beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(beta2, self.t as f64);
        for (i, p) in params.iter_mut().enumerate() {
            let g = sign * clip * grad.as_slice()[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            *p -= lr * mh / (math::sqrt(vh) + eps);
        }
        norm
    }
}
