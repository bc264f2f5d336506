//! Adaptive-moment optimizer with decoupled weight decay and the
//! warmup + linear-decay learning-rate schedule.

use crate::scalar::Scalar;
use crate::tensor::{GradTable, ParamTable, Tensor};

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
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
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First/second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamWState<S> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub step: u64,
}

impl<S: Scalar> AdamWState<S> {
    pub fn zeros_like(params: &ParamTable<S>) -> Self {
        Self {
            m: params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
            v: params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
            step: 0,
        }
    }
}

/// One decoupled-weight-decay update. Parameters without gradients are
/// untouched (moments keep decaying only for touched entries, which keeps
/// the update deterministic given the same gradient sparsity pattern).
pub fn adamw_step<S: Scalar>(
    params: &mut ParamTable<S>,
    grads: &GradTable<S>,
    state: &mut AdamWState<S>,
    lr: f64,
    cfg: &AdamWConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let b1 = S::from_f64(cfg.beta1);
    let b2 = S::from_f64(cfg.beta2);
    let one_minus_b1 = S::from_f64(1.0 - cfg.beta1);
    let one_minus_b2 = S::from_f64(1.0 - cfg.beta2);
    let bias1 = S::from_f64(1.0 - cfg.beta1.powi(t));
    let bias2 = S::from_f64(1.0 - cfg.beta2.powi(t));
    let eps = S::from_f64(cfg.eps);
    let lr_s = S::from_f64(lr);
    let decay = S::from_f64(lr * cfg.weight_decay);

    for id in 0..params.len() {
        let Some(g) = grads.get(id) else { continue };
        let m = &mut state.m[id];
        let v = &mut state.v[id];
        let p = params.get_mut(id);
        for i in 0..g.numel() {
            let gi = g.data()[i];
            let mi = b1 * m.data()[i] + one_minus_b1 * gi;
            let vi = b2 * v.data()[i] + one_minus_b2 * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bias1;
            let v_hat = vi / bias2;
            let pi = p.data()[i];
            p.data_mut()[i] = pi - lr_s * (m_hat / (v_hat.sqrt() + eps)) - decay * pi;
        }
    }
}

/// Piecewise-linear schedule: 0 -> lr over the warmup steps, then
/// lr -> 0 at `total_steps`.
pub fn lr_at(step: u64, total_steps: u64, warmup_steps: u64, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    if warmup_steps > 0 && step <= warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if step >= total_steps {
        return 0.0;
    }
    let rest = (total_steps - warmup_steps) as f64;
    base_lr * (1.0 - (step - warmup_steps) as f64 / rest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_peak() {
        let (total, warmup, lr) = (100u64, 10u64, 5e-4);
        assert_eq!(lr_at(0, total, warmup, lr), 0.0);
        assert_eq!(lr_at(warmup, total, warmup, lr), lr);
        assert_eq!(lr_at(total, total, warmup, lr), 0.0);
        // piecewise linear and continuous: halfway through decay
        let mid = lr_at(55, total, warmup, lr);
        assert!((mid - lr * 0.5).abs() < 1e-12);
        // peak is exactly lr
        let peak = (0..=total).map(|s| lr_at(s, total, warmup, lr)).fold(0.0, f64::max);
        assert_eq!(peak, lr);
    }

    #[test]
    fn zero_grad_zero_decay_keeps_params() {
        let mut params = ParamTable::<f64>::new();
        params.insert("w", Tensor::from_vec(&[1, 2], vec![1.0, -2.0]));
        let grads = GradTable::zeros_like(&params);
        let mut state = AdamWState::zeros_like(&params);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut params, &grads, &mut state, 1e-3, &cfg);
        assert_eq!(params.get(0).data(), &[1.0, -2.0]);
    }

    /// Hand-computed single step on f(x) = x at x = 1 (gradient 1).
    #[test]
    fn first_step_matches_hand_calculation() {
        let mut params = ParamTable::<f64>::new();
        params.insert("x", Tensor::scalar(1.0));
        let mut grads = GradTable::zeros_like(&params);
        grads.accumulate(0, &Tensor::scalar(1.0));
        let mut state = AdamWState::zeros_like(&params);
        let cfg = AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        };
        let lr = 5e-4;
        adamw_step(&mut params, &grads, &mut state, lr, &cfg);
        // m = 0.1, v = 0.001; m_hat = 1, v_hat = 1
        // x' = 1 - lr * 1/(1 + eps) - lr * wd * 1
        let expect = 1.0 - lr * (1.0 / (1.0 + 1e-8)) - lr * 1e-4;
        let got = params.get(0).scalar_value();
        assert!((got - expect).abs() < 1e-15, "{got} vs {expect}");
    }

    #[test]
    fn decay_only_shrinks_weights() {
        let mut params = ParamTable::<f64>::new();
        params.insert("w", Tensor::scalar(2.0));
        let mut grads = GradTable::zeros_like(&params);
        grads.accumulate(0, &Tensor::scalar(0.0));
        let mut state = AdamWState::zeros_like(&params);
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let lr = 1e-2;
        adamw_step(&mut params, &grads, &mut state, lr, &cfg);
        let got = params.get(0).scalar_value();
        assert!((got - (2.0 - lr * 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn steps_are_deterministic() {
        let run = || {
            let mut params = ParamTable::<f32>::new();
            params.insert("w", Tensor::from_vec(&[1, 3], vec![0.5, -0.25, 1.0]));
            let mut grads = GradTable::zeros_like(&params);
            grads.accumulate(0, &Tensor::from_vec(&[1, 3], vec![0.1, 0.2, -0.3]));
            let mut state = AdamWState::zeros_like(&params);
            let cfg = AdamWConfig::default();
            for step in 1..=5u64 {
                adamw_step(&mut params, &grads, &mut state, lr_at(step, 10, 2, 5e-4), &cfg);
            }
            params.get(0).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
