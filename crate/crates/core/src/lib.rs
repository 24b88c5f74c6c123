//! Simulation of short-term household energy-demand forecasting under
//! centralised, localised, federated (FedAvg) and clustered-federated
//! training, with optional local fine-tuning.
//!
//! The crate is organised bottom-up:
//!
//! * [`neural`]: a two-layer LSTM forecaster with hand-written
//!   backpropagation through time and Adam.
//! * [`data`]: meter/weather ingestion, cleaning, design matrices,
//!   normalisation, windowing and chronological splits, plus a synthetic
//!   household generator.
//! * [`clustering`]: agglomerative clustering of client parameter updates.
//! * [`federation`]: the six training scenarios and their sample accounting.
//! * [`metrics`]: RMSE, comparison tables and report emission.
//! * [`config`] / [`commands`]: run configuration and the command
//!   implementations behind the `fedcast` binary.

pub mod clustering;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod neural;
pub mod seed;

pub use error::{Error, Result};
