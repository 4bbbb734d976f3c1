//! ADAM optimizer with bias correction.

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Optimizer hyperparameters. `lr` defaults to 1e-4; the moment decay rates
/// and epsilon are the canonical defaults.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

/// Per-parameter optimizer state: step count plus first/second moment
/// buffers, shape-congruent with the parameter.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub config: AdamConfig,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(numel: usize, config: AdamConfig) -> Self {
        AdamState {
            step: 0,
            m: vec![T::ZERO; numel],
            v: vec![T::ZERO; numel],
            config,
        }
    }
}

/// One ADAM update with bias correction. Non-finite gradient elements abort
/// with the offending parameter's name.
pub fn adam_update<T: Scalar>(
    name: &str,
    param: &mut Tensor<T>,
    grad: &[T],
    state: &mut AdamState<T>,
) -> Result<()> {
    if param.numel() != grad.len() || state.m.len() != grad.len() {
        return Err(Error::dimension(format!(
            "adam update for '{name}': param {} vs grad {} vs state {}",
            param.numel(),
            grad.len(),
            state.m.len()
        )));
    }
    if state.config.lr <= 0.0 {
        return Err(Error::config(format!(
            "adam learning rate must be positive, got {}",
            state.config.lr
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::numeric(format!(
            "non-finite gradient for parameter '{name}'"
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c = state.config;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
    let (one_m_b1, one_m_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
    let lr1 = T::from_f64(c.lr / bc1);
    let inv_bc2 = T::from_f64(1.0 / bc2);
    let eps = T::from_f64(c.eps);
    for ((p, &g), (m, v)) in param
        .data_mut()
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = b1.mul(*m).add(one_m_b1.mul(g));
        *v = b2.mul(*v).add(one_m_b2.mul(g.mul(g)));
        let v_hat = v.mul(inv_bc2);
        *p = p.sub(lr1.mul(*m).div(v_hat.sqrt().add(eps)));
    }
    Ok(())
}

/// Owns one [`AdamState`] per named parameter, in a fixed order.
pub struct Adam<T> {
    states: Vec<AdamState<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(param_sizes: &[usize], config: AdamConfig) -> Self {
        Adam {
            states: param_sizes
                .iter()
                .map(|&n| AdamState::new(n, config))
                .collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.states.first().map(|s| s.step).unwrap_or(0)
    }

    /// Applies one update across all parameters, in order.
    pub fn step<'a>(
        &mut self,
        params: impl Iterator<Item = (String, &'a mut Tensor<T>)>,
        grads: &[Vec<T>],
    ) -> Result<()> {
        let mut n = 0;
        for ((i, (name, param)), state) in params.enumerate().zip(self.states.iter_mut()) {
            adam_update(&name, param, &grads[i], state)?;
            n += 1;
        }
        if n != grads.len() || n != self.states.len() {
            return Err(Error::dimension(format!(
                "optimizer saw {n} parameters, expected {}",
                self.states.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = Tensor::from_vec(vec![0.5f64, -1.5, 2.0]);
        let before = p.data().to_vec();
        let mut st = AdamState::new(3, AdamConfig::default());
        adam_update("p", &mut p, &[0.0, 0.0, 0.0], &mut st).unwrap();
        assert_eq!(p.data(), &before[..]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Bias-corrected m/sqrt(v) is exactly 1 on the first step, so the
        // parameter moves by -lr (up to eps).
        let mut p = Tensor::from_vec(vec![0.0f64]);
        let mut st = AdamState::new(1, AdamConfig::default());
        adam_update("p", &mut p, &[1.0], &mut st).unwrap();
        assert!((p.data()[0] + 1e-4).abs() < 1e-9, "got {}", p.data()[0]);
    }

    #[test]
    fn descends_quadratic() {
        // f(x) = x^2, grad = 2x, from x = 1 with lr 0.1.
        let mut p = Tensor::from_vec(vec![1.0f64]);
        let mut st = AdamState::new(1, AdamConfig { lr: 0.1, ..Default::default() });
        for _ in 0..100 {
            let g = 2.0 * p.data()[0];
            adam_update("x", &mut p, &[g], &mut st).unwrap();
        }
        assert!(p.data()[0].abs() < 1.0, "|x| did not shrink: {}", p.data()[0]);
        assert_eq!(st.step, 100);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = Tensor::from_vec(vec![0.0f32]);
        let mut st = AdamState::new(1, AdamConfig::default());
        let err = adam_update("head.weight", &mut p, &[f32::NAN], &mut st).unwrap_err();
        assert!(err.to_string().contains("head.weight"), "{err}");
    }
}
