//! Adam with bias correction and global-norm gradient clipping.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment buffers over the flattened parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of updates applied so far.
    pub t: u64,
}

/// One bias-corrected Adam update on flat buffers; `t` is the 1-based
/// update index.
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    cfg: &AdamConfig,
) {
    let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (math::sqrt(v_hat) + cfg.epsilon);
    }
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Self {
            m: alloc::vec![0.0; num_params],
            v: alloc::vec![0.0; num_params],
            t: 0,
        }
    }

    /// Applies one update with learning rate `lr` (the config's own rate is
    /// ignored so schedules can decay it).
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64, cfg: &AdamConfig) -> Result<()> {
        let mut p = params.to_flat();
        let g = grads.to_flat();
        if p.len() != self.m.len() || g.len() != p.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: alloc::vec![self.m.len()],
                rhs: alloc::vec![p.len(), g.len()],
            });
        }
        self.t += 1;
        adam_update(&mut p, &g, &mut self.m, &mut self.v, self.t, lr, cfg);
        params.load_flat(&p)
    }
}

/// Global L2 norm over every gradient leaf.
pub fn global_norm(grads: &ModelParams) -> f64 {
    math::sqrt(grads.sum_squares())
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut ModelParams, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Same rule on a flat buffer.
pub fn clip_slice(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = math::sqrt(grads.iter().map(|g| g * g).sum());
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn clip_examples() {
        let mut g = [3.0, 4.0];
        assert_eq!(clip_slice(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut g = [0.3, 0.4];
        clip_slice(&mut g, 1.0);
        assert_eq!(g, [0.3, 0.4]);
    }

    proptest! {
        #[test]
        fn clipped_norm_is_min(v in proptest::collection::vec(-100.0f64..100.0, 1..20), max in 0.01f64..50.0) {
            let mut g = v.clone();
            let before = clip_slice(&mut g, max);
            let after: f64 = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((after - before.min(max)).abs() <= 1e-9 * (1.0 + before));
        }
    }

    #[test]
    fn adam_scalar_hand_computation() {
        let cfg = AdamConfig::default();
        let (mut p, mut m, mut v) = ([1.0], [0.0], [0.0]);
        // step 1, g = 2: m = 0.2, v = 0.004, m̂ = 2, v̂ = 4 → Δ = lr·2/(2+ε)
        adam_update(&mut p, &[2.0], &mut m, &mut v, 1, 0.1, &cfg);
        assert!((m[0] - 0.2).abs() < 1e-15);
        assert!((v[0] - 0.004).abs() < 1e-15);
        assert!((p[0] - (1.0 - 0.1 * 2.0 / (2.0 + 1e-8))).abs() < 1e-15);
        // step 2, g = −1: m = 0.18 − 0.1 = 0.08, v = 0.003996 + 0.001 = 0.004996
        adam_update(&mut p, &[-1.0], &mut m, &mut v, 2, 0.1, &cfg);
        assert!((m[0] - 0.08).abs() < 1e-15);
        assert!((v[0] - 0.004996).abs() < 1e-15);
        let m_hat = 0.08 / (1.0 - 0.81);
        let v_hat: f64 = 0.004996 / (1.0 - 0.998001);
        let want = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8) - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p[0] - want).abs() < 1e-14);
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let cfg = crate::model::LfadsConfig {
            data_dim: 2,
            factors_dim: 2,
            generator_dim: 3,
            encoder_dim: 3,
            ..Default::default()
        };
        let mut p = ModelParams::init(&cfg, &mut crate::rng::stream(0, &[])).unwrap();
        let before = p.clone();
        let mut g = p.clone();
        g.scale(3.0);
        let mut adam = Adam::new(p.num_params());
        adam.step(&mut p, &g, 0.0, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.t, 1);
    }
}
