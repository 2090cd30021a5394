use serde::{Deserialize, Serialize};

use super::{Matrix, Param, TensorError};

/// How the `decay` coefficient is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecayMode {
    /// L2 penalty: `decay · θ` is added to the gradient.
    WeightDecay,
    /// Step-size schedule `η / (1 + decay · (t - 1))`.
    LearningRate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay: f64,
    pub decay_mode: DecayMode,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: 5e-6,
            decay_mode: DecayMode::WeightDecay,
        }
    }
}

/// Moment accumulators for a fixed, ordered list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first: Vec<Matrix>,
    pub second: Vec<Matrix>,
    pub step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[&mut Param]) -> Self {
        let zeros = || -> Vec<Matrix> {
            params
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect()
        };
        Self {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    /// One bias-corrected Adam update. Nothing is modified when a shape does
    /// not match or a gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<(), TensorError> {
        if params.len() != self.first.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam parameter count",
                left: (params.len(), 1),
                right: (self.first.len(), 1),
            });
        }
        for (i, p) in params.iter().enumerate() {
            if p.grad.shape() != p.value.shape() || p.value.shape() != self.first[i].shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam step",
                    left: p.grad.shape(),
                    right: self.first[i].shape(),
                });
            }
            if !p.grad.is_finite() {
                return Err(TensorError::NonFiniteGradient { param: i });
            }
        }

        let c = self.config;
        self.step += 1;
        let t = self.step as f64;
        let lr = match c.decay_mode {
            DecayMode::WeightDecay => c.learning_rate,
            DecayMode::LearningRate => c.learning_rate / (1.0 + c.decay * (t - 1.0)),
        };
        let l2 = match c.decay_mode {
            DecayMode::WeightDecay => c.decay,
            DecayMode::LearningRate => 0.0,
        };
        let correction1 = 1.0 - c.beta1.powf(t);
        let correction2 = 1.0 - c.beta2.powf(t);
        for (i, p) in params.iter_mut().enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let grad = p.grad.data().to_vec();
            for (j, theta) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[j] + l2 * *theta;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let m_hat = m[j] / correction1;
                let v_hat = v[j] / correction2;
                *theta -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(value: f64, grad: f64) -> Param {
        let mut p = Param::new(Matrix::from_rows(&[vec![value]]));
        p.grad = Matrix::from_rows(&[vec![grad]]);
        p
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let config = AdamConfig {
            decay: 0.0,
            ..AdamConfig::default()
        };
        let mut p = scalar(0.7, 0.0);
        let mut state = AdamState::new(config, &[&mut p]);
        for _ in 0..10 {
            state.step(&mut [&mut p]).unwrap();
        }
        assert_eq!(p.value[(0, 0)], 0.7);
    }

    #[test]
    fn first_step_with_unit_gradient() {
        // m̂ = 1, v̂ = 1 after bias correction, so Δθ = -η / (1 + ε).
        let config = AdamConfig {
            decay: 0.0,
            ..AdamConfig::default()
        };
        let mut p = scalar(0.0, 1.0);
        let mut state = AdamState::new(config, &[&mut p]);
        state.step(&mut [&mut p]).unwrap();
        let expected = -0.01 / (1.0 + 1e-8);
        assert!((p.value[(0, 0)] - expected).abs() < 1e-17);
        assert!((p.value[(0, 0)] + 0.009_999_999_9).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_enters_the_gradient() {
        let config = AdamConfig {
            decay: 0.5,
            ..AdamConfig::default()
        };
        // g + λθ = 0 + 0.5 · 2 = 1 > 0, so θ moves down by ~η.
        let mut p = scalar(2.0, 0.0);
        let mut state = AdamState::new(config, &[&mut p]);
        state.step(&mut [&mut p]).unwrap();
        assert!((p.value[(0, 0)] - (2.0 - 0.01 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn learning_rate_schedule_shrinks_steps() {
        let config = AdamConfig {
            decay: 1.0,
            decay_mode: DecayMode::LearningRate,
            ..AdamConfig::default()
        };
        let mut p = scalar(0.0, 1.0);
        let mut state = AdamState::new(config, &[&mut p]);
        state.step(&mut [&mut p]).unwrap();
        let first = p.value[(0, 0)];
        state.step(&mut [&mut p]).unwrap();
        let second = p.value[(0, 0)] - first;
        // constant gradient keeps m̂/√v̂ = 1, so the step is η / (1 + 1)
        assert!((second + 0.005 / (1.0 + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn refuses_non_finite_gradients() {
        let mut p = scalar(1.0, f64::NAN);
        let mut state = AdamState::new(AdamConfig::default(), &[&mut p]);
        assert_eq!(
            state.step(&mut [&mut p]),
            Err(TensorError::NonFiniteGradient { param: 0 })
        );
        assert_eq!(p.value[(0, 0)], 1.0);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut p = scalar(1.0, 1.0);
        let mut state = AdamState::new(AdamConfig::default(), &[&mut p]);
        p.grad = Matrix::zeros(2, 1);
        assert!(matches!(
            state.step(&mut [&mut p]),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = Param::new(Matrix::from_rows(&[vec![0.3, -0.2], vec![1.5, 0.0]]));
            let mut state = AdamState::new(AdamConfig::default(), &[&mut p]);
            for k in 0..50 {
                let g: Vec<f64> = p.value.data().iter().map(|v| v.sin() + k as f64 * 0.01).collect();
                p.grad = Matrix::from_vec(2, 2, g).unwrap();
                state.step(&mut [&mut p]).unwrap();
            }
            p.value
        };
        assert_eq!(run().data(), run().data());
    }
}
