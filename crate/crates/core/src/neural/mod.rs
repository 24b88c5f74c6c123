//! Two-layer LSTM forecaster trained with hand-written BPTT and Adam.

mod adam;
mod lstm;
mod model;
mod params;

pub use adam::{adam_step, AdamState, DEFAULT_LEARNING_RATE};
pub use lstm::{lstm_cell_forward, Gate, LstmLayerParams, LstmState};
pub use model::{compute_gradients, loss_and_gradients, model_forward, predict_batch, ForecastModel};
pub use params::ParameterVector;

use thiserror::Error;

/// Units per LSTM layer.
pub const HIDDEN_SIZE: usize = 20;

#[derive(Debug, Error, PartialEq)]
pub enum NeuralError {
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value in {0}")]
    NonFiniteInput(&'static str),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("numerical failure: non-finite gradient at parameter index {index}")]
    NonFiniteGradient { index: usize },
}

impl NeuralError {
    pub fn is_numerical(&self) -> bool {
        matches!(self, NeuralError::NonFiniteGradient { .. })
    }
}

/// Mean of squared differences.
pub fn mse_loss(predictions: &[f64], targets: &[f64]) -> Result<f64, NeuralError> {
    if predictions.len() != targets.len() {
        return Err(NeuralError::DimensionMismatch {
            what: "mse_loss targets",
            expected: predictions.len(),
            actual: targets.len(),
        });
    }
    if predictions.is_empty() {
        return Err(NeuralError::Empty("prediction vector"));
    }
    let sum: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / predictions.len() as f64)
}
