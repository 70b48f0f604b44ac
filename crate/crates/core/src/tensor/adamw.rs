//! AdamW with decoupled weight decay and bias correction.

use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamWConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// First/second moment buffers for one parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct AdamWState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamWState {
    pub fn new(numel: usize) -> Self {
        AdamWState {
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// One AdamW update. Decay is decoupled: the parameter shrinks by
/// `lr · weight_decay` before the moment-based step. Non-finite gradients
/// poison the update and abort with an error instead of corrupting state.
pub fn adamw_step(
    param: &mut Tensor,
    grad: &[f64],
    state: &mut AdamWState,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grad.len() != param.numel() {
        return Err(Error::ShapeMismatch {
            op: "adamw_step",
            lhs: param.shape().to_vec(),
            rhs: vec![grad.len()],
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::PoisonedGradient("adamw_step".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let data = param.data_mut();
    for i in 0..grad.len() {
        if cfg.weight_decay != 0.0 {
            data[i] *= 1.0 - cfg.lr * cfg.weight_decay;
        }
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Per-tensor AdamW keyed by parameter name. Embedding tables and
/// one-dimensional tensors (biases, gains) are exempt from weight decay.
pub struct Optimizer {
    cfg: AdamWConfig,
    states: BTreeMap<String, AdamWState>,
}

impl Optimizer {
    pub fn new(cfg: AdamWConfig) -> Self {
        Optimizer {
            cfg,
            states: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &[f64]) -> Result<()> {
        let state = self
            .states
            .entry(name.to_string())
            .or_insert_with(|| AdamWState::new(param.numel()));
        let decay_exempt = param.shape().len() < 2 || name.contains("embedding");
        let cfg = AdamWConfig {
            weight_decay: if decay_exempt { 0.0 } else { self.cfg.weight_decay },
            ..self.cfg
        };
        adamw_step(param, grad, state, &cfg).map_err(|e| match e {
            Error::PoisonedGradient(_) => Error::PoisonedGradient(name.to_string()),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_leaves_parameter_unchanged() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap();
        let before = p.data().to_vec();
        let mut st = AdamWState::new(3);
        let cfg = AdamWConfig::new(1e-3, 0.0);
        adamw_step(&mut p, &[0.0, 0.0, 0.0], &mut st, &cfg).unwrap();
        assert_eq!(p.data(), &before[..]);
    }

    #[test]
    fn first_step_moves_against_gradient_sign_by_lr() {
        let mut p = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        let mut st = AdamWState::new(2);
        let cfg = AdamWConfig::new(1e-2, 0.0);
        adamw_step(&mut p, &[0.3, -0.7], &mut st, &cfg).unwrap();
        // With bias correction, the first update is -lr·g/(|g| + eps·√bc2).
        assert!((p.data()[0] - (0.5 - 1e-2)).abs() < 1e-6);
        assert!((p.data()[1] - (-0.5 + 1e-2)).abs() < 1e-6);
    }

    #[test]
    fn quadratic_loss_decreases_monotonically_after_warmup() {
        // minimize 0.5·w² with gradient w; lr small enough that the iterate
        // stays on one side of the minimum for the whole horizon
        let mut p = Tensor::new(vec![1], vec![2.0]).unwrap();
        let mut st = AdamWState::new(1);
        let cfg = AdamWConfig::new(1e-2, 0.0);
        let mut losses = Vec::new();
        for _ in 0..100 {
            let w = p.data()[0];
            losses.push(0.5 * w * w);
            adamw_step(&mut p, &[w], &mut st, &cfg).unwrap();
        }
        for i in 5..losses.len() - 1 {
            assert!(
                losses[i + 1] < losses[i] + 1e-12,
                "loss rose at step {i}: {} -> {}",
                losses[i],
                losses[i + 1]
            );
        }
    }

    #[test]
    fn nan_gradient_is_rejected_and_state_untouched() {
        let mut p = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let before = p.data().to_vec();
        let mut st = AdamWState::new(2);
        let cfg = AdamWConfig::new(1e-3, 0.01);
        let err = adamw_step(&mut p, &[f64::NAN, 0.0], &mut st, &cfg).unwrap_err();
        assert!(matches!(err, Error::PoisonedGradient(_)));
        assert_eq!(p.data(), &before[..]);
        assert_eq!(st.steps_taken(), 0);
    }

    #[test]
    fn decay_is_decoupled_from_the_gradient_step() {
        // With zero gradient, decay shrinks the weight multiplicatively.
        let mut p = Tensor::new(vec![2, 1], vec![1.0, -1.0]).unwrap();
        let mut st = AdamWState::new(2);
        let cfg = AdamWConfig::new(1e-1, 0.5);
        adamw_step(&mut p, &[0.0, 0.0], &mut st, &cfg).unwrap();
        assert!((p.data()[0] - 0.95).abs() < 1e-12);
        assert!((p.data()[1] + 0.95).abs() < 1e-12);
    }

    #[test]
    fn optimizer_exempts_biases_and_embeddings_from_decay() {
        let cfg = AdamWConfig::new(1e-1, 0.5);
        let mut opt = Optimizer::new(cfg);
        let mut bias = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        opt.step("head.bias", &mut bias, &[0.0, 0.0]).unwrap();
        assert_eq!(bias.data(), &[1.0, 1.0][..]);
        let mut emb = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        opt.step("backbone.token_embedding", &mut emb, &[0.0, 0.0]).unwrap();
        assert_eq!(emb.data(), &[1.0, 1.0][..]);
        let mut w = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        opt.step("head.weight", &mut w, &[0.0, 0.0]).unwrap();
        assert!((w.data()[0] - 0.95).abs() < 1e-12);
    }
}
