//! Plain gradient descent and AdamW over [`TrainableParams`].

use crate::backbone::TrainableParams;

/// `θ ← θ − lr · g` for every trainable entry.
pub fn sgd_step(params: &mut TrainableParams, grads: &TrainableParams, lr: f64) {
    for ((_, p), (_, g)) in params.blocks_mut().into_iter().zip(grads.blocks()) {
        for (x, dx) in p.iter_mut().zip(g) {
            *x -= lr * dx;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub first: TrainableParams,
    pub second: TrainableParams,
    pub steps: u64,
}

impl AdamWState {
    pub fn new(params: &TrainableParams, config: AdamWConfig) -> Self {
        Self { config, first: params.zeros_like(), second: params.zeros_like(), steps: 0 }
    }
}

/// One AdamW update with bias-corrected moments and decoupled weight decay:
/// `θ ← θ(1 − lr·wd)`, then `θ ← θ − lr · m̂ / (√v̂ + ε)`.
pub fn adamw_step(params: &mut TrainableParams, grads: &TrainableParams, state: &mut AdamWState, lr: f64) {
    state.steps += 1;
    let AdamWConfig { beta1, beta2, eps, weight_decay } = state.config;
    let t = state.steps as f64;
    let c1 = 1.0 - libm::pow(beta1, t);
    let c2 = 1.0 - libm::pow(beta2, t);
    let blocks = params
        .blocks_mut()
        .into_iter()
        .zip(grads.blocks())
        .zip(state.first.blocks_mut())
        .zip(state.second.blocks_mut());
    for ((((_, p), (_, g)), (_, m)), (_, v)) in blocks {
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] *= 1.0 - lr * weight_decay;
            p[i] -= lr * m_hat / (libm::sqrt(v_hat) + eps);
        }
    }
}

/// Cosine decay from `base` at step 0 toward zero at `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let progress = step as f64 / total as f64;
    0.5 * base * (1.0 + libm::cos(core::f64::consts::PI * progress))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Model, ModelConfig};

    fn params() -> TrainableParams {
        let cfg = ModelConfig { width: 3, rank: 2, vision_layers: 1, text_layers: 1, fusion_layers: 1, init_std: 0.5, ..ModelConfig::default() };
        Model::build(&cfg).unwrap().params
    }

    fn filled(p: &TrainableParams, value: f64) -> TrainableParams {
        let mut g = p.zeros_like();
        for (_, b) in g.blocks_mut() {
            b.iter_mut().for_each(|x| *x = value);
        }
        g
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let p0 = params();
        let mut p = p0.clone();
        sgd_step(&mut p, &filled(&p0, 2.0), 0.25);
        for ((_, a), (_, b)) in p.blocks().into_iter().zip(p0.blocks()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x, y - 0.5);
            }
        }
    }

    #[test]
    fn first_adamw_step_is_sign_sized() {
        // With bias correction the first update is lr * g / (|g| + eps).
        let p0 = params();
        let mut p = p0.clone();
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut state = AdamWState::new(&p, cfg);
        adamw_step(&mut p, &filled(&p0, 3.0), &mut state, 0.01);
        for ((_, a), (_, b)) in p.blocks().into_iter().zip(p0.blocks()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - (y - 0.01 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn weight_decay_shrinks_without_gradient() {
        let p0 = params();
        let mut p = p0.clone();
        let mut state = AdamWState::new(&p, AdamWConfig::default());
        adamw_step(&mut p, &p0.zeros_like(), &mut state, 0.1);
        for ((_, a), (_, b)) in p.blocks().into_iter().zip(p0.blocks()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y * (1.0 - 0.1 * 0.05)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-18);
        assert!(cosine_lr(1e-3, 100, 100).abs() < 1e-18);
    }
}
