//! AdamW with decoupled weight decay and bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param_space::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::eps")]
    pub eps: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
}

mod defaults {
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn eps() -> f64 {
        1e-8
    }
    pub fn weight_decay() -> f64 {
        0.01
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            eps: defaults::eps(),
            weight_decay: defaults::weight_decay(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps.is_finite()
            && self.eps > 0.0
            && self.weight_decay.is_finite()
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Argument(format!("invalid AdamW hyperparameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
}

impl AdamWState {
    pub fn new(d: usize, config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            first_moment: vec![0.0; d],
            second_moment: vec![0.0; d],
            step_count: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }

    pub fn dim(&self) -> usize {
        self.first_moment.len()
    }

    /// Applies one update to `theta` in place.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::dim(self.dim(), theta.len()));
        }
        if grad.len() != self.dim() {
            return Err(Error::dim(self.dim(), grad.len()));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient at index {i}")));
        }
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let decay = 1.0 - lr * weight_decay;
        for i in 0..theta.len() {
            let g = grad[i];
            let m = beta1 * self.first_moment[i] + (1.0 - beta1) * g;
            let v = beta2 * self.second_moment[i] + (1.0 - beta2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            theta[i] = theta[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Pure form of [`AdamWState::step`].
pub fn adamw_step(state: &AdamWState, theta: &ParamVector, grad: &ParamVector) -> Result<(ParamVector, AdamWState)> {
    let mut next = state.clone();
    let mut values = theta.as_slice().to_vec();
    next.step(&mut values, grad.as_slice())?;
    Ok((ParamVector::from_computed(values)?, next))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn zero_grad_without_decay_is_a_no_op() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::with_lr(0.1)
        };
        let state = AdamWState::new(3, cfg).unwrap();
        let theta = pv(&[1.0, -2.0, 0.5]);
        let (next, st) = adamw_step(&state, &theta, &pv(&[0.0, 0.0, 0.0])).unwrap();
        assert_eq!(next, theta);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_closed_form() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::with_lr(0.01)
        };
        let state = AdamWState::new(3, cfg).unwrap();
        let theta = pv(&[0.3, -0.1, 2.0]);
        let grad = pv(&[0.5, -2e-3, 1e-9]);
        let (next, _) = adamw_step(&state, &theta, &grad).unwrap();
        // m̂ = g and v̂ = g² after one step, so Δ = −lr·g/(|g| + eps).
        for i in 0..3 {
            let g = grad[i];
            let expected = theta[i] - 0.01 * g / (g.abs() + 1e-8);
            assert!((next[i] - expected).abs() < 1e-15, "{i}");
        }
    }

    #[test]
    fn decoupled_decay_scales_parameters() {
        let state = AdamWState::new(2, AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::with_lr(0.05)
        })
        .unwrap();
        let theta = pv(&[4.0, -1.5]);
        let (next, _) = adamw_step(&state, &theta, &pv(&[0.0, 0.0])).unwrap();
        for i in 0..2 {
            assert_eq!(next[i], theta[i] * (1.0 - 0.05 * 0.1));
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut state = AdamWState::new(2, AdamWConfig::with_lr(0.1)).unwrap();
        let mut theta = vec![0.0, 0.0];
        let err = state.step(&mut theta, &[1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn second_moment_stays_non_negative() {
        let mut state = AdamWState::new(2, AdamWConfig::with_lr(0.1)).unwrap();
        let mut theta = vec![0.0, 0.0];
        for k in 0..20 {
            let g = [(k as f64).sin(), -(k as f64).cos()];
            state.step(&mut theta, &g).unwrap();
        }
        assert!(state.second_moment().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn negative_learning_rate_rejected() {
        assert!(AdamWState::new(1, AdamWConfig::with_lr(-1.0)).is_err());
    }
}
