//! Python bindings: the forecasting model, FedAvg aggregation, update
//! clustering, report metrics and the command entry points.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;

use fedcast::clustering::{self, ClusterAssignment, Linkage};
use fedcast::commands;
use fedcast::config::RunConfig;
use fedcast::data::{SequenceSample, SyntheticSpec};
use fedcast::federation;
use fedcast::metrics;
use fedcast::neural::{self, ForecastModel};
use fedcast::seed::{self, Stream};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn core_err(e: fedcast::Error) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

/// Packs `[batch][step][feature]` windows into samples.
fn samples(windows: Vec<Vec<Vec<f64>>>, labels: Option<Vec<f64>>) -> PyResult<Vec<SequenceSample>> {
    if let Some(l) = &labels {
        if l.len() != windows.len() {
            return Err(value_err(format!("{} windows but {} labels", windows.len(), l.len())));
        }
    }
    windows
        .into_iter()
        .enumerate()
        .map(|(i, w)| {
            let steps = w.len();
            let dim = w.first().map_or(0, Vec::len);
            if steps == 0 || dim == 0 || w.iter().any(|r| r.len() != dim) {
                return Err(value_err(format!("window {i} must be a non-empty rectangular steps x features list")));
            }
            let label = labels.as_ref().map_or(0.0, |l| l[i]);
            Ok(SequenceSample::new(w.concat(), steps, dim, label, i))
        })
        .collect()
}

/// Two-layer LSTM forecaster.
#[pyclass(name = "Model")]
struct PyModel {
    inner: ForecastModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (feature_dim, hidden_size = neural::HIDDEN_SIZE, seed = 0))]
    fn new(feature_dim: usize, hidden_size: usize, seed: u64) -> PyResult<Self> {
        if feature_dim == 0 || hidden_size == 0 {
            return Err(value_err("feature_dim and hidden_size must be positive"));
        }
        let mut rng = seed::rng(seed, Stream::Init, 0, 0);
        Ok(PyModel {
            inner: ForecastModel::random_with_hidden(feature_dim, hidden_size, &mut rng),
        })
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.feature_dim()
    }

    #[getter]
    fn hidden_size(&self) -> usize {
        self.inner.hidden_size()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Flat parameter vector.
    fn parameters(&self) -> Vec<f64> {
        self.inner.flatten().into_inner()
    }

    fn set_parameters(&mut self, values: Vec<f64>) -> PyResult<()> {
        self.inner.load(&values).map_err(value_err)
    }

    /// Predictions for `[batch][step][feature]` windows.
    fn predict(&self, windows: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<f64>> {
        let batch = samples(windows, None)?;
        neural::predict_batch(&batch, &self.inner).map_err(value_err)
    }

    /// Batch MSE and its gradient in flattening order.
    fn loss_and_gradients(&self, windows: Vec<Vec<Vec<f64>>>, labels: Vec<f64>) -> PyResult<(f64, Vec<f64>)> {
        let batch = samples(windows, Some(labels))?;
        let (loss, grad) = neural::loss_and_gradients(&batch, &self.inner).map_err(value_err)?;
        Ok((loss, grad.into_inner()))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(feature_dim={}, hidden_size={}, params={})",
            self.inner.feature_dim(),
            self.inner.hidden_size(),
            self.inner.param_count()
        )
    }
}

/// Data-weighted average of `(n_k, parameters)` pairs.
#[pyfunction]
fn fedavg(updates: Vec<(u64, Vec<f64>)>) -> PyResult<Vec<f64>> {
    federation::weighted_average(&updates).map(|p| p.into_inner()).map_err(value_err)
}

/// Cluster labels for client updates.
#[pyfunction]
#[pyo3(signature = (updates, linkage = "ward", threshold = 1.4))]
fn agglomerate(updates: Vec<Vec<f64>>, linkage: &str, threshold: f64) -> PyResult<Vec<usize>> {
    let linkage: Linkage = linkage.parse().map_err(value_err)?;
    let distances = clustering::pairwise_euclidean(&updates).map_err(value_err)?;
    let assignment = clustering::agglomerate(&distances, linkage, threshold).map_err(value_err)?;
    Ok(assignment.labels)
}

/// Adjusted Rand agreement between a clustering and ground-truth labels.
#[pyfunction]
fn cluster_quality(labels: Vec<usize>, truth: Vec<usize>) -> PyResult<f64> {
    clustering::cluster_quality(&ClusterAssignment::from_labels(&labels), &truth).map_err(value_err)
}

#[pyfunction]
fn rmse(predictions: Vec<f64>, targets: Vec<f64>) -> PyResult<f64> {
    metrics::rmse(&predictions, &targets).map_err(value_err)
}

#[pyfunction]
fn pct_difference(scenario: f64, localised: f64) -> PyResult<f64> {
    metrics::pct_difference(scenario, localised).map_err(value_err)
}

#[pyfunction]
fn savings_factor(scenario_samples: f64, localised_samples: f64) -> PyResult<f64> {
    metrics::savings_factor(scenario_samples, localised_samples).map_err(value_err)
}

/// Writes synthetic meter/weather/label CSVs; returns their paths.
#[pyfunction]
#[pyo3(signature = (out_dir, households, archetypes = 3, noise = 0.05, days = 90, seed = 0))]
fn synthesize(
    out_dir: PathBuf,
    households: usize,
    archetypes: usize,
    noise: f64,
    days: usize,
    seed: u64,
) -> PyResult<(String, String, String)> {
    let spec = SyntheticSpec::new(households, archetypes, noise, days, seed);
    let files = commands::cmd_synthesize(&spec, &out_dir).map_err(core_err)?;
    let s = |p: PathBuf| p.to_string_lossy().into_owned();
    Ok((s(files.meters), s(files.weather), s(files.labels)))
}

/// Runs a JSON config (given as text) and returns `(run_dir, results_json)`.
#[pyfunction]
#[pyo3(signature = (config_json, out_dir, jobs = 1))]
fn run(py: Python<'_>, config_json: &str, out_dir: PathBuf, jobs: usize) -> PyResult<(String, String)> {
    let config = RunConfig::from_json(config_json).map_err(core_err)?;
    let summary = py
        .detach(|| commands::cmd_run(&config, &out_dir, jobs))
        .map_err(core_err)?;
    let results = std::fs::read_to_string(summary.run_dir.join("results.json")).map_err(value_err)?;
    Ok((summary.run_dir.to_string_lossy().into_owned(), results))
}

#[pymodule(name = "fedcast")]
mod fedcast_module {
    #[pymodule_export]
    use super::{
        agglomerate, cluster_quality, fedavg, pct_difference, rmse, run, savings_factor, synthesize, PyModel,
    };
}
