use serde::{Deserialize, Serialize};

use super::{ForecastModel, NeuralError, ParameterVector};

pub const DEFAULT_LEARNING_RATE: f64 = 0.001;

/// Bias-corrected Adam moments and hyperparameters for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl AdamState {
    /// Fresh state with β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(param_count: usize, learning_rate: f64) -> Self {
        AdamState {
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            learning_rate,
        }
    }

    pub fn for_model(model: &ForecastModel) -> Self {
        Self::new(model.param_count(), DEFAULT_LEARNING_RATE)
    }

    /// Applies one update to a flat parameter slice.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<(), NeuralError> {
        if grad.len() != params.len() || grad.len() != self.first_moment.len() {
            return Err(NeuralError::DimensionMismatch {
                what: "adam gradient",
                expected: self.first_moment.len(),
                actual: grad.len(),
            });
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for k in 0..params.len() {
            let g = grad[k];
            let m = self.beta1 * self.first_moment[k] + (1.0 - self.beta1) * g;
            let v = self.beta2 * self.second_moment[k] + (1.0 - self.beta2) * g * g;
            self.first_moment[k] = m;
            self.second_moment[k] = v;
            let m_hat = m / c1;
            let v_hat = v / c2;
            params[k] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// One Adam update of `model` in place.
pub fn adam_step(
    model: &mut ForecastModel,
    grad: &ParameterVector,
    state: &mut AdamState,
) -> Result<(), NeuralError> {
    let mut flat = model.flatten();
    state.step(&mut flat, grad)?;
    model.load(&flat)
}
