//! The six training scenarios: centralised, localised, FedAvg (FL), FedAvg
//! with hierarchical clustering (FL+HC), and local fine-tuning on top of
//! either federated variant.
//!
//! Every optimiser-visited sequence is logged as a sample, so the totals in a
//! [`RunReport`] can be recomputed from the [`RunLog`].

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{self, ClusterAssignment, ClusterError, Linkage};
use crate::data::{DatasetVariant, HouseholdDataset, SequenceSample};
use crate::metrics::{self, ClientResult, HcParameters, Hyperparameters, MetricsError, RunReport};
use crate::neural::{
    adam_step, loss_and_gradients, predict_batch, AdamState, ForecastModel, NeuralError, ParameterVector,
    DEFAULT_LEARNING_RATE, HIDDEN_SIZE,
};
use crate::seed::{self, Stream};

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("no clients supplied")]
    NoClients,
    #[error("{scenario} needs at least {needed} clients, got {got}")]
    TooFewClients {
        scenario: ScenarioKind,
        needed: usize,
        got: usize,
    },
    #[error("household {household} has variant {found}, expected {expected}")]
    InconsistentVariant {
        household: String,
        expected: DatasetVariant,
        found: DatasetVariant,
    },
    #[error("invalid scenario configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot aggregate: {0}")]
    Aggregation(String),
    #[error("round {round}: client {client} returned a non-finite parameter at index {index}")]
    NonFiniteParameters { round: usize, client: usize, index: usize },
    #[error("non-finite validation RMSE at evaluation {0}")]
    NonFiniteMetric(usize),
    #[error("round {round}, client {client}: {source}")]
    ClientTraining {
        round: usize,
        client: usize,
        #[source]
        source: NeuralError,
    },
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl FederationError {
    /// True for failures caused by diverging training rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            FederationError::NonFiniteParameters { .. } | FederationError::NonFiniteMetric(_) => true,
            FederationError::ClientTraining { source, .. } | FederationError::Neural(source) => source.is_numerical(),
            _ => false,
        }
    }
}

type Result<T, E = FederationError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScenarioKind {
    #[serde(rename = "centralised")]
    Centralised,
    #[serde(rename = "localised")]
    Localised,
    #[serde(rename = "fl")]
    Fl,
    #[serde(rename = "fl_hc")]
    FlHc,
    #[serde(rename = "fl_lft")]
    FlLft,
    #[serde(rename = "fl_hc_lft")]
    FlHcLft,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 6] = [
        ScenarioKind::Centralised,
        ScenarioKind::Localised,
        ScenarioKind::Fl,
        ScenarioKind::FlHc,
        ScenarioKind::FlLft,
        ScenarioKind::FlHcLft,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioKind::Centralised => "centralised",
            ScenarioKind::Localised => "localised",
            ScenarioKind::Fl => "fl",
            ScenarioKind::FlHc => "fl_hc",
            ScenarioKind::FlLft => "fl_lft",
            ScenarioKind::FlHcLft => "fl_hc_lft",
        }
    }

    /// Display name used in tables.
    pub fn label(&self) -> &'static str {
        match self {
            ScenarioKind::Centralised => "Centralised",
            ScenarioKind::Localised => "Localised",
            ScenarioKind::Fl => "FL",
            ScenarioKind::FlHc => "FL+HC",
            ScenarioKind::FlLft => "FL->LFT",
            ScenarioKind::FlHcLft => "FL+HC->LFT",
        }
    }

    pub fn uses_hc(&self) -> bool {
        matches!(self, ScenarioKind::FlHc | ScenarioKind::FlHcLft)
    }

    pub fn is_federated(&self) -> bool {
        !matches!(self, ScenarioKind::Centralised | ScenarioKind::Localised)
    }

    pub fn fine_tunes(&self) -> bool {
        matches!(self, ScenarioKind::FlLft | ScenarioKind::FlHcLft)
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioKind {
    type Err = FederationError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['+', '-', '>', ' '], "_");
        let norm: String = norm.split('_').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("_");
        match norm.as_str() {
            "centralised" | "centralized" => Ok(ScenarioKind::Centralised),
            "localised" | "localized" => Ok(ScenarioKind::Localised),
            "fl" => Ok(ScenarioKind::Fl),
            "fl_hc" => Ok(ScenarioKind::FlHc),
            "fl_lft" => Ok(ScenarioKind::FlLft),
            "fl_hc_lft" => Ok(ScenarioKind::FlHcLft),
            _ => Err(FederationError::InvalidConfig(format!("unknown scenario {s:?}"))),
        }
    }
}

/// Epoch and round limits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Caps {
    pub centralised_epochs: usize,
    pub localised_epochs: usize,
    pub fl_rounds: usize,
    /// Counts every FL+HC round: pre-clustering, update collection and
    /// per-cluster rounds.
    pub flhc_rounds: usize,
    pub lft_epochs: usize,
}

impl Default for Caps {
    fn default() -> Self {
        Caps {
            centralised_epochs: 500,
            localised_epochs: 500,
            fl_rounds: 500,
            flhc_rounds: 200,
            lft_epochs: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HcConfig {
    /// Euclidean distance threshold on client updates.
    pub threshold: f64,
    pub linkage: Linkage,
    /// FedAvg rounds before the clustering step.
    pub rounds_before_clustering: usize,
}

pub const PATIENCE: usize = 10;
pub const BATCH_SIZE: usize = 256;
/// Client fraction and local epochs are pinned to these under FL+HC.
pub const FLHC_CLIENT_FRACTION: f64 = 0.1;
pub const FLHC_LOCAL_EPOCHS: usize = 3;

fn default_fraction() -> f64 {
    0.1
}
fn default_epochs() -> usize {
    3
}
fn default_patience() -> usize {
    PATIENCE
}
fn default_batch() -> usize {
    BATCH_SIZE
}
fn default_lr() -> f64 {
    DEFAULT_LEARNING_RATE
}
fn default_hidden() -> usize {
    HIDDEN_SIZE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: ScenarioKind,
    pub variant: DatasetVariant,
    #[serde(default = "default_fraction")]
    pub client_fraction: f64,
    #[serde(default = "default_epochs")]
    pub local_epochs: usize,
    #[serde(default)]
    pub hc: Option<HcConfig>,
    pub seed: u64,
    #[serde(default)]
    pub caps: Caps,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_hidden")]
    pub hidden_size: usize,
}

impl ScenarioConfig {
    /// Defaults for everything but the scenario, variant and seed. HC
    /// scenarios get threshold 1.4, ward linkage and n = 3.
    pub fn new(scenario: ScenarioKind, variant: DatasetVariant, seed: u64) -> Self {
        ScenarioConfig {
            scenario,
            variant,
            client_fraction: default_fraction(),
            local_epochs: default_epochs(),
            hc: scenario.uses_hc().then_some(HcConfig {
                threshold: 1.4,
                linkage: Linkage::Ward,
                rounds_before_clustering: 3,
            }),
            seed,
            caps: Caps::default(),
            patience: PATIENCE,
            batch_size: BATCH_SIZE,
            learning_rate: DEFAULT_LEARNING_RATE,
            hidden_size: HIDDEN_SIZE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FederationError::InvalidConfig(m));
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return bad(format!("client fraction {} not in (0, 1]", self.client_fraction));
        }
        if self.local_epochs == 0 {
            return bad("local epochs must be at least 1".into());
        }
        if self.batch_size == 0 || self.hidden_size == 0 || self.patience == 0 {
            return bad("batch size, hidden size and patience must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        match (&self.hc, self.scenario.uses_hc()) {
            (Some(_), false) => return bad(format!("{} takes no clustering parameters", self.scenario)),
            (None, true) => return bad(format!("{} needs clustering parameters", self.scenario)),
            (Some(hc), true) => {
                if hc.threshold.is_nan() || hc.threshold <= 0.0 {
                    return bad(format!("clustering threshold {} must be positive", hc.threshold));
                }
                if hc.rounds_before_clustering == 0 {
                    return bad("rounds before clustering must be at least 1".into());
                }
                if hc.rounds_before_clustering + 1 >= self.caps.flhc_rounds {
                    return bad(format!(
                        "{} rounds before clustering leave no room under the {}-round cap",
                        hc.rounds_before_clustering, self.caps.flhc_rounds
                    ));
                }
                if self.client_fraction != FLHC_CLIENT_FRACTION || self.local_epochs != FLHC_LOCAL_EPOCHS {
                    return bad(format!(
                        "FL+HC runs with client fraction {FLHC_CLIENT_FRACTION} and {FLHC_LOCAL_EPOCHS} local epochs"
                    ));
                }
            }
            (None, false) => {}
        }
        Ok(())
    }

    pub fn hyperparameters(&self) -> Hyperparameters {
        let federated = self.scenario.is_federated();
        Hyperparameters {
            client_fraction: federated.then_some(self.client_fraction),
            local_epochs: federated.then_some(self.local_epochs),
            hc: self.hc.as_ref().map(|hc| HcParameters {
                threshold: hc.threshold,
                linkage: hc.linkage,
                rounds_before_clustering: hc.rounds_before_clustering,
            }),
        }
    }
}

/// A participating household with its running sample counter.
#[derive(Debug, Clone)]
pub struct ClientState<'a> {
    pub client_id: usize,
    pub dataset: &'a HouseholdDataset,
    pub params: Option<ParameterVector>,
    pub samples_processed: u64,
}

impl<'a> ClientState<'a> {
    pub fn new(client_id: usize, dataset: &'a HouseholdDataset) -> Self {
        ClientState {
            client_id,
            dataset,
            params: None,
            samples_processed: 0,
        }
    }

    /// `n_k`, the training-set size.
    pub fn n_k(&self) -> u64 {
        self.dataset.train.len() as u64
    }
}

/// Keeps the best snapshot seen so far and counts evaluations since.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    pub best_metric: f64,
    pub best_params: Option<ParameterVector>,
    pub best_index: usize,
    pub since_improvement: usize,
    pub patience: usize,
    evaluations: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            best_metric: f64::INFINITY,
            best_params: None,
            best_index: 0,
            since_improvement: 0,
            patience,
            evaluations: 0,
        }
    }

    /// Records an evaluation; returns true if it improved on the best.
    pub fn observe(&mut self, metric: f64, params: &ParameterVector) -> Result<bool> {
        if !metric.is_finite() {
            return Err(FederationError::NonFiniteMetric(self.evaluations));
        }
        let index = self.evaluations;
        self.evaluations += 1;
        if metric < self.best_metric {
            self.best_metric = metric;
            self.best_params = Some(params.clone());
            self.best_index = index;
            self.since_improvement = 0;
            Ok(true)
        } else {
            self.since_improvement += 1;
            Ok(false)
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_improvement >= self.patience
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    pub fn into_best(self) -> Option<(f64, ParameterVector)> {
        let metric = self.best_metric;
        self.best_params.map(|p| (metric, p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Centralised,
    Localised,
    /// FedAvg rounds over all clients (FL, or FL+HC before clustering).
    Global,
    /// Full-participation burst whose updates feed the clustering step.
    Collect,
    /// FedAvg rounds within one cluster.
    Cluster,
    FineTune,
}

/// One evaluation point: a round, an epoch, or the initial model (no
/// participants).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub phase: Phase,
    pub round: usize,
    /// Cluster for [`Phase::Cluster`], client for per-client phases.
    pub group: Option<usize>,
    pub participants: Vec<usize>,
    /// Samples each participant pushed through its optimiser.
    pub samples: Vec<u64>,
    /// Mean training loss of each participant's last local epoch.
    pub train_loss: Vec<f64>,
    pub validation_rmse: Option<f64>,
    pub cumulative_samples: u64,
}

impl RoundRecord {
    fn new(phase: Phase, round: usize, group: Option<usize>) -> Self {
        RoundRecord {
            phase,
            round,
            group,
            participants: Vec::new(),
            samples: Vec::new(),
            train_loss: Vec::new(),
            validation_rmse: None,
            cumulative_samples: 0,
        }
    }

    pub fn round_samples(&self) -> u64 {
        self.samples.iter().sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<RoundRecord>,
    /// Cluster label per client once clustering has run.
    pub cluster_labels: Option<Vec<usize>>,
}

impl RunLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a record, stamping the running sample total.
    pub fn push(&mut self, mut record: RoundRecord) {
        let before = self.records.last().map_or(0, |r| r.cumulative_samples);
        record.cumulative_samples = before + record.round_samples();
        self.records.push(record);
    }

    pub fn extend(&mut self, records: impl IntoIterator<Item = RoundRecord>) {
        for r in records {
            self.push(r);
        }
    }

    pub fn total_samples(&self) -> u64 {
        self.records.last().map_or(0, |r| r.cumulative_samples)
    }
}

/// Samples recomputed from the per-participant entries of a log.
pub fn count_samples(log: &RunLog) -> u64 {
    log.records.iter().flat_map(|r| r.samples.iter()).sum()
}

/// Per-client samples recomputed from a log.
pub fn count_samples_per_client(log: &RunLog, clients: usize) -> Vec<u64> {
    let mut out = vec![0; clients];
    for r in &log.records {
        for (&c, &s) in r.participants.iter().zip(&r.samples) {
            if c < clients {
                out[c] += s;
            }
        }
    }
    out
}

pub fn samples_in_millions(samples: u64) -> f64 {
    samples as f64 / 1e6
}

/// `Σ_k (n_k / n) w_k`, summed in the given order.
///
/// Computed as `w_first + Σ_k (n_k / n)(w_k − w_first)` so that identical
/// inputs, and a single input, come back bit-for-bit.
pub fn weighted_average<P: AsRef<[f64]>>(updates: &[(u64, P)]) -> Result<ParameterVector> {
    let Some((_, first)) = updates.first() else {
        return Err(FederationError::Aggregation("no client updates".into()));
    };
    let first = first.as_ref();
    let n: u64 = updates.iter().map(|(n_k, _)| n_k).sum();
    if n == 0 {
        return Err(FederationError::Aggregation("total weight is zero".into()));
    }
    let mut acc = first.to_vec();
    for (n_k, w) in &updates[1..] {
        let w = w.as_ref();
        if w.len() != first.len() {
            return Err(FederationError::Aggregation(format!(
                "parameter length {} differs from {}",
                w.len(),
                first.len()
            )));
        }
        let share = *n_k as f64 / n as f64;
        for ((a, &x), &x0) in acc.iter_mut().zip(w).zip(first) {
            *a += share * (x - x0);
        }
    }
    Ok(ParameterVector(acc))
}

/// `max(1, round(fraction × m))`.
pub fn participants_per_round(fraction: f64, clients: usize) -> usize {
    ((fraction * clients as f64).round() as usize).clamp(1, clients.max(1))
}

/// Uniform selection without replacement, returned in ascending order.
pub fn sample_clients(members: &[usize], fraction: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let count = participants_per_round(fraction, members.len());
    let mut chosen: Vec<usize> = index::sample(rng, members.len(), count)
        .into_iter()
        .map(|i| members[i])
        .collect();
    chosen.sort_unstable();
    chosen
}

/// Everything a local optimisation run needs besides its data.
#[derive(Debug, Clone, Copy)]
pub struct TrainingSettings {
    pub feature_dim: usize,
    pub hidden_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl TrainingSettings {
    pub fn from_config(config: &ScenarioConfig) -> Self {
        TrainingSettings {
            feature_dim: config.variant.feature_dim(),
            hidden_size: config.hidden_size,
            batch_size: config.batch_size,
            learning_rate: config.learning_rate,
            seed: config.seed,
        }
    }

    fn model(&self, params: &[f64]) -> Result<ForecastModel> {
        Ok(ForecastModel::unflatten_with_hidden(self.feature_dim, self.hidden_size, params)?)
    }

    /// Initial parameters for the model owned by `entity`.
    pub fn initial_params(&self, entity: u64) -> ParameterVector {
        let mut rng = seed::rng(self.seed, Stream::Init, entity, 0);
        ForecastModel::random_with_hidden(self.feature_dim, self.hidden_size, &mut rng).flatten()
    }
}

/// Shuffle stream index used by fine-tuning, clear of any round index.
const FINE_TUNE_STREAM_INDEX: u64 = 1 << 40;

/// Runs `epochs` shuffled mini-batch epochs; returns the samples visited and
/// the mean loss of the final epoch.
fn train_epochs(
    model: &mut ForecastModel,
    adam: &mut AdamState,
    train: &[&SequenceSample],
    epochs: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(u64, f64), NeuralError> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut samples = 0u64;
    let mut last_loss = f64::NAN;
    let mut batch: Vec<&SequenceSample> = Vec::with_capacity(batch_size);
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train[i]));
            let (loss, grad) = loss_and_gradients(&batch, model)?;
            adam_step(model, &grad, adam)?;
            loss_sum += loss * chunk.len() as f64;
            samples += chunk.len() as u64;
        }
        last_loss = loss_sum / train.len() as f64;
    }
    Ok((samples, last_loss))
}

/// RMSE of `model` on `data`, evaluated in bounded batches.
pub fn evaluate_rmse(model: &ForecastModel, data: &[&SequenceSample]) -> Result<f64> {
    let mut predictions = Vec::with_capacity(data.len());
    for chunk in data.chunks(1024) {
        predictions.extend(predict_batch(chunk, model)?);
    }
    let targets: Vec<f64> = data.iter().map(|s| s.label).collect();
    Ok(metrics::rmse(&predictions, &targets)?)
}

fn refs(samples: &[SequenceSample]) -> Vec<&SequenceSample> {
    samples.iter().collect()
}

/// One client's parameters after local training from `start`.
#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub client_id: usize,
    pub params: ParameterVector,
    pub samples: u64,
    pub train_loss: f64,
}

/// Trains one client for `epochs` epochs from `start` with a fresh optimiser.
pub fn local_update(
    client: &ClientState<'_>,
    start: &ParameterVector,
    epochs: usize,
    round: usize,
    settings: &TrainingSettings,
) -> Result<LocalUpdate> {
    let mut model = settings.model(start)?;
    if epochs == 0 {
        return Ok(LocalUpdate {
            client_id: client.client_id,
            params: start.clone(),
            samples: 0,
            train_loss: f64::NAN,
        });
    }
    let mut adam = AdamState::new(start.len(), settings.learning_rate);
    let mut rng = seed::rng(settings.seed, Stream::Shuffle, client.client_id as u64, round as u64);
    let train = refs(&client.dataset.train);
    let (samples, train_loss) = train_epochs(&mut model, &mut adam, &train, epochs, settings.batch_size, &mut rng)
        .map_err(|source| FederationError::ClientTraining {
            round,
            client: client.client_id,
            source,
        })?;
    let params = model.flatten();
    if let Some(index) = params.first_non_finite() {
        return Err(FederationError::NonFiniteParameters {
            round,
            client: client.client_id,
            index,
        });
    }
    Ok(LocalUpdate {
        client_id: client.client_id,
        params,
        samples,
        train_loss,
    })
}

/// Output of one communication round.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub params: ParameterVector,
    pub updates: Vec<LocalUpdate>,
}

/// One FedAvg round: each selected client trains from `global`, and the
/// results are averaged weighted by training-set size in ascending id order.
/// `selected` holds indices into `clients`.
pub fn fedavg_round(
    global: &ParameterVector,
    clients: &[ClientState<'_>],
    selected: &[usize],
    local_epochs: usize,
    round: usize,
    settings: &TrainingSettings,
) -> Result<RoundOutcome> {
    if selected.is_empty() {
        return Err(FederationError::Aggregation("no clients selected".into()));
    }
    let mut order = selected.to_vec();
    order.sort_by_key(|&i| clients[i].client_id);
    let updates: Vec<LocalUpdate> = order
        .par_iter()
        .map(|&i| local_update(&clients[i], global, local_epochs, round, settings))
        .collect::<Result<_>>()?;
    let weighted: Vec<(u64, &[f64])> = order
        .iter()
        .zip(&updates)
        .map(|(&i, u)| (clients[i].n_k(), u.params.as_ref()))
        .collect();
    let params = weighted_average(&weighted)?;
    Ok(RoundOutcome { params, updates })
}

/// Uniform mean of each member's validation RMSE under one model.
fn mean_validation_rmse(
    params: &ParameterVector,
    clients: &[ClientState<'_>],
    members: &[usize],
    settings: &TrainingSettings,
) -> Result<f64> {
    let model = settings.model(params)?;
    let per: Vec<f64> = members
        .par_iter()
        .map(|&i| evaluate_rmse(&model, &refs(&clients[i].dataset.validation)))
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Result of a training loop: the restored best snapshot and its log.
#[derive(Debug, Clone)]
struct LoopResult {
    params: ParameterVector,
    best_metric: f64,
    records: Vec<RoundRecord>,
}

/// An error together with the records completed before it.
#[derive(Debug)]
struct Failure {
    error: FederationError,
    records: Vec<RoundRecord>,
}

impl From<FederationError> for Failure {
    fn from(error: FederationError) -> Self {
        Failure {
            error,
            records: Vec::new(),
        }
    }
}

type Partial<T> = std::result::Result<T, Failure>;

/// Appends every branch's records to `log` in order, then reports the first
/// failure, so a failed run keeps the rounds that did complete.
fn absorb(log: &mut RunLog, results: Vec<Partial<LoopResult>>) -> Result<Vec<LoopResult>> {
    let mut ok = Vec::with_capacity(results.len());
    let mut first_error = None;
    for r in results {
        match r {
            Ok(r) => {
                log.extend(r.records.iter().cloned());
                ok.push(r);
            }
            Err(f) => {
                log.extend(f.records);
                first_error.get_or_insert(f.error);
            }
        }
    }
    match first_error {
        Some(e) => Err(e),
        None => Ok(ok),
    }
}

struct FedLoop<'c, 'd> {
    clients: &'c [ClientState<'d>],
    members: Vec<usize>,
    fraction: f64,
    local_epochs: usize,
    settings: TrainingSettings,
    phase: Phase,
    group: Option<usize>,
    /// Offset added to round numbers for seeding and logging.
    first_round: usize,
}

impl FedLoop<'_, '_> {
    fn sampling_entity(&self) -> u64 {
        self.group.map_or(0, |g| g as u64 + 1)
    }

    /// Runs up to `max_rounds` rounds. With a stopper, evaluates the start
    /// point first and returns the best snapshot; otherwise returns the last.
    fn run(&self, start: ParameterVector, max_rounds: usize, stopper: Option<EarlyStopper>) -> Partial<LoopResult> {
        let mut records = Vec::new();
        match self.run_into(start, max_rounds, stopper, &mut records) {
            Ok((params, best_metric)) => Ok(LoopResult {
                params,
                best_metric,
                records,
            }),
            Err(error) => Err(Failure { error, records }),
        }
    }

    fn run_into(
        &self,
        start: ParameterVector,
        max_rounds: usize,
        mut stopper: Option<EarlyStopper>,
        records: &mut Vec<RoundRecord>,
    ) -> Result<(ParameterVector, f64)> {
        let mut current = start;
        let mut last_metric = f64::NAN;
        if let Some(stop) = stopper.as_mut() {
            let metric = mean_validation_rmse(&current, self.clients, &self.members, &self.settings)?;
            stop.observe(metric, &current)?;
            let mut rec = RoundRecord::new(self.phase, self.first_round, self.group);
            rec.validation_rmse = Some(metric);
            records.push(rec);
        }
        for r in 0..max_rounds {
            let round = self.first_round + r + 1;
            let mut rng = seed::rng(self.settings.seed, Stream::Sampling, self.sampling_entity(), round as u64);
            let selected = sample_clients(&self.members, self.fraction, &mut rng);
            let outcome = fedavg_round(&current, self.clients, &selected, self.local_epochs, round, &self.settings)?;
            current = outcome.params;
            let metric = mean_validation_rmse(&current, self.clients, &self.members, &self.settings)?;
            last_metric = metric;
            let mut rec = RoundRecord::new(self.phase, round, self.group);
            rec.participants = outcome.updates.iter().map(|u| u.client_id).collect();
            rec.samples = outcome.updates.iter().map(|u| u.samples).collect();
            rec.train_loss = outcome.updates.iter().map(|u| u.train_loss).collect();
            rec.validation_rmse = Some(metric);
            records.push(rec);
            if let Some(stop) = stopper.as_mut() {
                stop.observe(metric, &current)?;
                if stop.should_stop() {
                    break;
                }
            }
        }
        match stopper {
            Some(stop) => {
                let (best_metric, params) = stop.into_best().expect("start point was observed");
                Ok((params, best_metric))
            }
            None => Ok((current, last_metric)),
        }
    }
}

/// Single-model training with early stopping on `validation`, evaluating the
/// start point as epoch 0.
fn train_single(
    start: ParameterVector,
    train: &[&SequenceSample],
    validation: &[&SequenceSample],
    max_epochs: usize,
    patience: usize,
    settings: &TrainingSettings,
    rng: &mut ChaCha8Rng,
    phase: Phase,
    client: usize,
) -> Partial<LoopResult> {
    let mut records = Vec::new();
    let run = SingleRun {
        train,
        validation,
        max_epochs,
        patience,
        settings,
        phase,
        client,
    };
    match run.run_into(start, rng, &mut records) {
        Ok((params, best_metric)) => Ok(LoopResult {
            params,
            best_metric,
            records,
        }),
        Err(error) => Err(Failure { error, records }),
    }
}

struct SingleRun<'a, 'b> {
    train: &'a [&'b SequenceSample],
    validation: &'a [&'b SequenceSample],
    max_epochs: usize,
    patience: usize,
    settings: &'a TrainingSettings,
    phase: Phase,
    client: usize,
}

impl SingleRun<'_, '_> {
    fn run_into(
        &self,
        start: ParameterVector,
        rng: &mut ChaCha8Rng,
        records: &mut Vec<RoundRecord>,
    ) -> Result<(ParameterVector, f64)> {
    let SingleRun {
        train,
        validation,
        max_epochs,
        patience,
        settings,
        phase,
        client,
    } = *self;
    let mut model = settings.model(&start)?;
    let mut adam = AdamState::new(start.len(), settings.learning_rate);
    let mut stopper = EarlyStopper::new(patience);
    let metric = evaluate_rmse(&model, validation)?;
    stopper.observe(metric, &start)?;
    let mut rec = RoundRecord::new(phase, 0, Some(client));
    rec.validation_rmse = Some(metric);
    records.push(rec);
    for epoch in 1..=max_epochs {
        let (samples, loss) = train_epochs(&mut model, &mut adam, train, 1, settings.batch_size, rng)
            .map_err(|source| FederationError::ClientTraining {
                round: epoch,
                client,
                source,
            })?;
        let params = model.flatten();
        if let Some(index) = params.first_non_finite() {
            return Err(FederationError::NonFiniteParameters {
                round: epoch,
                client,
                index,
            });
        }
        let metric = evaluate_rmse(&model, validation)?;
        let mut rec = RoundRecord::new(phase, epoch, Some(client));
        rec.participants = vec![client];
        rec.samples = vec![samples];
        rec.train_loss = vec![loss];
        rec.validation_rmse = Some(metric);
        records.push(rec);
        stopper.observe(metric, &params)?;
        if stopper.should_stop() {
            break;
        }
    }
    let (best_metric, params) = stopper.into_best().expect("epoch 0 was observed");
    Ok((params, best_metric))
    }
}

/// A trained parameter vector and who it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedModel {
    pub name: String,
    pub params: ParameterVector,
}

#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub report: RunReport,
    pub models: Vec<NamedModel>,
    pub assignment: Option<ClusterAssignment>,
    /// Live counter: samples summed from every client's state.
    pub live_samples: u64,
}

/// Sorts households by id, checks variants and drops those with an empty
/// split.
pub fn prepare_clients<'a>(
    datasets: &'a [HouseholdDataset],
    variant: DatasetVariant,
) -> Result<(Vec<ClientState<'a>>, Vec<String>)> {
    if datasets.is_empty() {
        return Err(FederationError::NoClients);
    }
    let mut ordered: Vec<&HouseholdDataset> = datasets.iter().collect();
    ordered.sort_by(|a, b| a.household_id.cmp(&b.household_id));
    let mut clients = Vec::new();
    let mut excluded = Vec::new();
    for d in ordered {
        if d.variant != variant {
            return Err(FederationError::InconsistentVariant {
                household: d.household_id.clone(),
                expected: variant,
                found: d.variant,
            });
        }
        if d.train.is_empty() || d.validation.is_empty() || d.test.is_empty() {
            log::warn!("household {} has an empty split and is excluded", d.household_id);
            excluded.push(d.household_id.clone());
            continue;
        }
        clients.push(ClientState::new(clients.len(), d));
    }
    if clients.is_empty() {
        return Err(FederationError::NoClients);
    }
    Ok((clients, excluded))
}

fn client_result(
    client: &ClientState<'_>,
    params: &ParameterVector,
    settings: &TrainingSettings,
    cluster: Option<usize>,
    base_validation_rmse: Option<f64>,
) -> Result<ClientResult> {
    let model = settings.model(params)?;
    Ok(ClientResult {
        client_id: client.client_id,
        household_id: client.dataset.household_id.clone(),
        test_rmse: evaluate_rmse(&model, &refs(&client.dataset.test))?,
        validation_rmse: evaluate_rmse(&model, &refs(&client.dataset.validation))?,
        base_validation_rmse,
        cluster,
        samples: client.samples_processed,
    })
}

fn credit(clients: &mut [ClientState<'_>], records: &[RoundRecord]) {
    for r in records {
        for (&c, &s) in r.participants.iter().zip(&r.samples) {
            clients[c].samples_processed += s;
        }
    }
}

fn finish(
    config: &ScenarioConfig,
    clients: &[ClientState<'_>],
    per_client: Vec<ClientResult>,
    excluded: Vec<String>,
    log: &RunLog,
) -> Result<RunReport> {
    let live: u64 = clients.iter().map(|c| c.samples_processed).sum();
    debug_assert_eq!(live, log.total_samples());
    let mut report = RunReport::new(
        config.scenario,
        config.variant,
        per_client,
        live,
        config.hyperparameters(),
        config.seed,
    )?;
    report.excluded = excluded;
    report.cluster_labels = log.cluster_labels.clone();
    Ok(report)
}

/// One model on the pooled training data, early-stopped on pooled
/// validation RMSE. The report carries the pooled test RMSE as its single
/// entry.
pub fn train_centralised(
    datasets: &[HouseholdDataset],
    config: &ScenarioConfig,
    log: &mut RunLog,
) -> Result<ScenarioOutcome> {
    let (clients, excluded) = prepare_clients(datasets, config.variant)?;
    let settings = TrainingSettings::from_config(config);
    let pool = |f: fn(&HouseholdDataset) -> &Vec<SequenceSample>| -> Vec<&SequenceSample> {
        clients.iter().flat_map(|c| f(c.dataset).iter()).collect()
    };
    let train = pool(|d| &d.train);
    let validation = pool(|d| &d.validation);
    let test = pool(|d| &d.test);
    let mut rng = seed::rng(config.seed, Stream::Shuffle, 0, 0);
    let result = train_single(
        settings.initial_params(0),
        &train,
        &validation,
        config.caps.centralised_epochs,
        config.patience,
        &settings,
        &mut rng,
        Phase::Centralised,
        0,
    );
    let result = absorb(log, vec![result])?.remove(0);
    let samples = log.total_samples();
    let model = settings.model(&result.params)?;
    let pooled = ClientResult {
        client_id: 0,
        household_id: "pooled".into(),
        test_rmse: evaluate_rmse(&model, &test)?,
        validation_rmse: result.best_metric,
        base_validation_rmse: None,
        cluster: None,
        samples,
    };
    let mut report = RunReport::new(
        config.scenario,
        config.variant,
        vec![pooled],
        samples,
        config.hyperparameters(),
        config.seed,
    )?;
    report.excluded = excluded;
    Ok(ScenarioOutcome {
        report,
        models: vec![NamedModel {
            name: "global".into(),
            params: result.params,
        }],
        assignment: None,
        live_samples: samples,
    })
}

/// One independent model per household.
pub fn train_localised(
    datasets: &[HouseholdDataset],
    config: &ScenarioConfig,
    log: &mut RunLog,
) -> Result<ScenarioOutcome> {
    let (mut clients, excluded) = prepare_clients(datasets, config.variant)?;
    let settings = TrainingSettings::from_config(config);
    let results: Vec<Partial<LoopResult>> = clients
        .par_iter()
        .map(|c| {
            let mut rng = seed::rng(config.seed, Stream::Shuffle, c.client_id as u64, 0);
            train_single(
                settings.initial_params(c.client_id as u64),
                &refs(&c.dataset.train),
                &refs(&c.dataset.validation),
                config.caps.localised_epochs,
                config.patience,
                &settings,
                &mut rng,
                Phase::Localised,
                c.client_id,
            )
        })
        .collect();
    let results = absorb(log, results)?;
    for r in &results {
        credit(&mut clients, &r.records);
    }
    let mut per_client = Vec::with_capacity(clients.len());
    let mut models = Vec::with_capacity(clients.len());
    for (c, r) in clients.iter().zip(results) {
        per_client.push(client_result(c, &r.params, &settings, None, None)?);
        models.push(NamedModel {
            name: c.dataset.household_id.clone(),
            params: r.params,
        });
    }
    let live = clients.iter().map(|c| c.samples_processed).sum();
    let report = finish(config, &clients, per_client, excluded, log)?;
    Ok(ScenarioOutcome {
        report,
        models,
        assignment: None,
        live_samples: live,
    })
}

fn require_clients(config: &ScenarioConfig, clients: &[ClientState<'_>]) -> Result<()> {
    if clients.len() < 2 {
        return Err(FederationError::TooFewClients {
            scenario: config.scenario,
            needed: 2,
            got: clients.len(),
        });
    }
    Ok(())
}

/// Global FedAvg model, as the base of FL and FL→LFT.
fn fl_global(
    clients: &mut [ClientState<'_>],
    config: &ScenarioConfig,
    settings: &TrainingSettings,
    log: &mut RunLog,
) -> Result<ParameterVector> {
    let members: Vec<usize> = (0..clients.len()).collect();
    let fed = FedLoop {
        clients,
        members,
        fraction: config.client_fraction,
        local_epochs: config.local_epochs,
        settings: *settings,
        phase: Phase::Global,
        group: None,
        first_round: 0,
    };
    let result = fed.run(
        settings.initial_params(0),
        config.caps.fl_rounds,
        Some(EarlyStopper::new(config.patience)),
    );
    let result = absorb(log, vec![result])?.remove(0);
    credit(clients, &result.records);
    Ok(result.params)
}

/// FedAvg over all clients; every client is evaluated with the best global
/// snapshot.
pub fn run_fl(datasets: &[HouseholdDataset], config: &ScenarioConfig, log: &mut RunLog) -> Result<ScenarioOutcome> {
    let (mut clients, excluded) = prepare_clients(datasets, config.variant)?;
    require_clients(config, &clients)?;
    let settings = TrainingSettings::from_config(config);
    let global = fl_global(&mut clients, config, &settings, log)?;
    if config.scenario.fine_tunes() {
        let bases = vec![global.clone(); clients.len()];
        return fine_tune_clients(&mut clients, bases, None, excluded, config, &settings, log);
    }
    let per_client = clients
        .iter()
        .map(|c| client_result(c, &global, &settings, None, None))
        .collect::<Result<Vec<_>>>()?;
    let live = clients.iter().map(|c| c.samples_processed).sum();
    let report = finish(config, &clients, per_client, excluded, log)?;
    Ok(ScenarioOutcome {
        report,
        models: vec![NamedModel {
            name: "global".into(),
            params: global,
        }],
        assignment: None,
        live_samples: live,
    })
}

/// Cluster models and assignment produced by FL+HC.
struct FlhcModels {
    cluster_params: Vec<ParameterVector>,
    assignment: ClusterAssignment,
}

fn flhc_models(
    clients: &mut [ClientState<'_>],
    config: &ScenarioConfig,
    settings: &TrainingSettings,
    log: &mut RunLog,
) -> Result<FlhcModels> {
    let hc = config.hc.as_ref().expect("validated");
    let n = hc.rounds_before_clustering;
    let all: Vec<usize> = (0..clients.len()).collect();

    let pre = FedLoop {
        clients,
        members: all.clone(),
        fraction: config.client_fraction,
        local_epochs: config.local_epochs,
        settings: *settings,
        phase: Phase::Global,
        group: None,
        first_round: 0,
    }
    .run(settings.initial_params(0), n, None);
    let pre = absorb(log, vec![pre])?.remove(0);
    credit(clients, &pre.records);
    let w_n = pre.params;

    let collect_round = n + 1;
    let updates: Vec<LocalUpdate> = clients
        .par_iter()
        .map(|c| local_update(c, &w_n, config.local_epochs, collect_round, settings))
        .collect::<Result<_>>()?;
    let mut rec = RoundRecord::new(Phase::Collect, collect_round, None);
    rec.participants = updates.iter().map(|u| u.client_id).collect();
    rec.samples = updates.iter().map(|u| u.samples).collect();
    rec.train_loss = updates.iter().map(|u| u.train_loss).collect();
    credit(clients, std::slice::from_ref(&rec));
    log.push(rec);

    let deltas: Vec<ParameterVector> = updates.iter().map(|u| u.params.sub(&w_n)).collect();
    let distances = clustering::pairwise_euclidean(&deltas)?;
    let assignment = clustering::agglomerate(&distances, hc.linkage, hc.threshold)?;
    log.cluster_labels = Some(assignment.labels.clone());
    let groups = assignment.members();
    for (g, m) in groups.iter().enumerate() {
        if m.len() == 1 {
            log::info!("cluster {g} holds a single client; it trains alone");
        }
    }

    let remaining = config.caps.flhc_rounds.saturating_sub(collect_round);
    let clients_ro: &[ClientState<'_>] = clients;
    let results: Vec<Partial<LoopResult>> = groups
        .par_iter()
        .enumerate()
        .map(|(g, members)| {
            FedLoop {
                clients: clients_ro,
                members: members.clone(),
                fraction: config.client_fraction,
                local_epochs: config.local_epochs,
                settings: *settings,
                phase: Phase::Cluster,
                group: Some(g),
                first_round: collect_round,
            }
            .run(w_n.clone(), remaining, Some(EarlyStopper::new(config.patience)))
        })
        .collect();
    let mut cluster_params = Vec::with_capacity(results.len());
    for r in absorb(log, results)? {
        credit(clients, &r.records);
        cluster_params.push(r.params);
    }
    Ok(FlhcModels {
        cluster_params,
        assignment,
    })
}

/// FL+HC: `n` FedAvg rounds, a full-participation burst whose updates are
/// clustered, then independent FedAvg within each cluster.
pub fn run_flhc(datasets: &[HouseholdDataset], config: &ScenarioConfig, log: &mut RunLog) -> Result<ScenarioOutcome> {
    let (mut clients, excluded) = prepare_clients(datasets, config.variant)?;
    require_clients(config, &clients)?;
    let settings = TrainingSettings::from_config(config);
    let FlhcModels {
        cluster_params,
        assignment,
    } = flhc_models(&mut clients, config, &settings, log)?;

    if config.scenario.fine_tunes() {
        let bases = assignment.labels.iter().map(|&l| cluster_params[l].clone()).collect();
        let mut outcome = fine_tune_clients(
            &mut clients,
            bases,
            Some(&assignment.labels),
            excluded,
            config,
            &settings,
            log,
        )?;
        outcome.assignment = Some(assignment);
        return Ok(outcome);
    }

    let per_client = clients
        .iter()
        .map(|c| {
            let label = assignment.labels[c.client_id];
            client_result(c, &cluster_params[label], &settings, Some(label), None)
        })
        .collect::<Result<Vec<_>>>()?;
    let live = clients.iter().map(|c| c.samples_processed).sum();
    let report = finish(config, &clients, per_client, excluded, log)?;
    let models = cluster_params
        .into_iter()
        .enumerate()
        .map(|(g, params)| NamedModel {
            name: format!("cluster-{g}"),
            params,
        })
        .collect();
    Ok(ScenarioOutcome {
        report,
        models,
        assignment: Some(assignment),
        live_samples: live,
    })
}

/// A client's model after fine-tuning.
#[derive(Debug, Clone)]
pub struct FineTuned {
    pub params: ParameterVector,
    pub base_validation_rmse: f64,
    pub validation_rmse: f64,
    pub records: Vec<RoundRecord>,
}

/// Fine-tunes each client from its own base model with a fresh optimiser,
/// appending the per-client epochs to `log` in client order.
pub fn fine_tune(
    clients: &[ClientState<'_>],
    bases: &[ParameterVector],
    config: &ScenarioConfig,
    log: &mut RunLog,
) -> Result<Vec<FineTuned>> {
    if bases.len() != clients.len() {
        return Err(FederationError::InvalidConfig(format!(
            "{} base models for {} clients",
            bases.len(),
            clients.len()
        )));
    }
    let settings = TrainingSettings::from_config(config);
    let results: Vec<Partial<LoopResult>> = clients
        .par_iter()
        .zip(bases.par_iter())
        .map(|(c, base)| {
            let mut rng = seed::rng(config.seed, Stream::Shuffle, c.client_id as u64, FINE_TUNE_STREAM_INDEX);
            train_single(
                base.clone(),
                &refs(&c.dataset.train),
                &refs(&c.dataset.validation),
                config.caps.lft_epochs,
                config.patience,
                &settings,
                &mut rng,
                Phase::FineTune,
                c.client_id,
            )
        })
        .collect();
    Ok(absorb(log, results)?
        .into_iter()
        .map(|r| FineTuned {
            base_validation_rmse: r.records[0].validation_rmse.expect("epoch 0 is evaluated"),
            validation_rmse: r.best_metric,
            params: r.params,
            records: r.records,
        })
        .collect())
}

#[allow(clippy::too_many_arguments)]
fn fine_tune_clients(
    clients: &mut [ClientState<'_>],
    bases: Vec<ParameterVector>,
    labels: Option<&[usize]>,
    excluded: Vec<String>,
    config: &ScenarioConfig,
    settings: &TrainingSettings,
    log: &mut RunLog,
) -> Result<ScenarioOutcome> {
    let tuned = fine_tune(clients, &bases, config, log)?;
    for t in &tuned {
        credit(clients, &t.records);
    }
    let mut per_client = Vec::with_capacity(clients.len());
    let mut models = Vec::with_capacity(clients.len());
    for (c, t) in clients.iter().zip(tuned) {
        let label = labels.map(|l| l[c.client_id]);
        per_client.push(client_result(c, &t.params, settings, label, Some(t.base_validation_rmse))?);
        models.push(NamedModel {
            name: c.dataset.household_id.clone(),
            params: t.params,
        });
    }
    let live = clients.iter().map(|c| c.samples_processed).sum();
    let report = finish(config, clients, per_client, excluded, log)?;
    Ok(ScenarioOutcome {
        report,
        models,
        assignment: None,
        live_samples: live,
    })
}

/// Dispatches on the configured scenario. Records are appended to `log` as
/// phases complete, so a failed run still leaves its finished rounds behind.
pub fn run_scenario(
    datasets: &[HouseholdDataset],
    config: &ScenarioConfig,
    log: &mut RunLog,
) -> Result<ScenarioOutcome> {
    config.validate()?;
    match config.scenario {
        ScenarioKind::Centralised => train_centralised(datasets, config, log),
        ScenarioKind::Localised => train_localised(datasets, config, log),
        ScenarioKind::Fl | ScenarioKind::FlLft => run_fl(datasets, config, log),
        ScenarioKind::FlHc | ScenarioKind::FlHcLft => run_flhc(datasets, config, log),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_sequences, split_chronological};
    use rand::{Rng, SeedableRng};

    fn household(id: &str, rows: usize, k: usize, phase: f64, dim: usize) -> HouseholdDataset {
        let data: Vec<Vec<f64>> = (0..rows)
            .map(|t| {
                let e = 0.5 + 0.4 * ((t as f64 + phase) * std::f64::consts::TAU / 24.0).sin();
                let mut row = vec![e];
                row.extend((1..dim).map(|j| ((t % 24) as f64 / 23.0) * (j as f64 / dim as f64)));
                row
            })
            .collect();
        let split = split_chronological(rows, k).unwrap();
        let seqs = |r: &std::ops::Range<usize>| make_sequences(&data[r.clone()], k, r.start).unwrap();
        HouseholdDataset {
            household_id: id.into(),
            variant: DatasetVariant::new(k, false),
            train: seqs(&split.train),
            validation: seqs(&split.validation),
            test: seqs(&split.test),
            split,
            filled_fraction: 0.0,
        }
    }

    fn small_config(kind: ScenarioKind) -> ScenarioConfig {
        let mut c = ScenarioConfig::new(kind, DatasetVariant::new(6, false), 11);
        c.hidden_size = 4;
        c.batch_size = 16;
        c.learning_rate = 0.01;
        c.caps = Caps {
            centralised_epochs: 6,
            localised_epochs: 6,
            fl_rounds: 6,
            flhc_rounds: 10,
            lft_epochs: 4,
        };
        c.patience = 3;
        c
    }

    #[test]
    fn weighted_average_examples() {
        let w = vec![0.3, -1.2, 7.0];
        assert_eq!(weighted_average(&[(1, &w[..]), (9, &w[..])]).unwrap().0, w);
        let avg = weighted_average(&[(1, vec![0.0]), (3, vec![4.0])]).unwrap();
        assert_eq!(avg.0, vec![3.0]);
        assert_eq!(weighted_average(&[(5, &w[..])]).unwrap().0, w);
        assert!(weighted_average::<Vec<f64>>(&[]).is_err());
        assert!(weighted_average(&[(0, vec![1.0])]).is_err());
        assert!(weighted_average(&[(1, vec![1.0]), (1, vec![1.0, 2.0])]).is_err());
    }

    #[test]
    fn weighted_average_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let m = rng.gen_range(2..8);
            let len = rng.gen_range(1..20);
            let updates: Vec<(u64, Vec<f64>)> = (0..m)
                .map(|_| (rng.gen_range(1..500), (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect()))
                .collect();
            let got = weighted_average(&updates).unwrap();
            let n: u64 = updates.iter().map(|u| u.0).sum();
            for j in 0..len {
                let expect: f64 = updates.iter().map(|(k, w)| *k as f64 * w[j]).sum::<f64>() / n as f64;
                assert!((got[j] - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn participant_counts() {
        assert_eq!(participants_per_round(0.1, 100), 10);
        assert_eq!(participants_per_round(0.1, 20), 2);
        assert_eq!(participants_per_round(0.1, 4), 1);
        assert_eq!(participants_per_round(0.3, 7), 2);
        assert_eq!(participants_per_round(1.0, 7), 7);
        let members: Vec<usize> = (0..100).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let chosen = sample_clients(&members, 0.1, &mut rng);
        assert_eq!(chosen.len(), 10);
        assert!(chosen.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn early_stopper_keeps_best() {
        let mut s = EarlyStopper::new(2);
        let p = |v: f64| ParameterVector(vec![v]);
        assert!(s.observe(3.0, &p(3.0)).unwrap());
        assert!(s.observe(2.0, &p(2.0)).unwrap());
        assert!(!s.observe(2.5, &p(2.5)).unwrap());
        assert!(!s.should_stop());
        assert!(!s.observe(2.0, &p(9.0)).unwrap());
        assert!(s.should_stop());
        assert_eq!(s.best_index, 1);
        assert_eq!(s.into_best().unwrap(), (2.0, p(2.0)));
        assert!(EarlyStopper::new(1).observe(f64::NAN, &p(0.0)).is_err());
    }

    #[test]
    fn zero_epoch_round_is_identity() {
        let ds = vec![household("A", 120, 6, 0.0, 5), household("B", 120, 6, 5.0, 5)];
        let cfg = small_config(ScenarioKind::Fl);
        let (clients, _) = prepare_clients(&ds, cfg.variant).unwrap();
        let settings = TrainingSettings::from_config(&cfg);
        let w = settings.initial_params(0);
        let out = fedavg_round(&w, &clients, &[0, 1], 0, 1, &settings).unwrap();
        assert_eq!(out.params, w);
        let one = fedavg_round(&w, &clients, &[1], 2, 1, &settings).unwrap();
        assert_eq!(one.params, one.updates[0].params);
        assert_eq!(one.updates[0].samples, 2 * clients[1].n_k());
    }

    #[test]
    fn centralised_on_one_household_equals_localised() {
        let ds = vec![household("A", 150, 6, 0.0, 5)];
        let mut la = RunLog::new();
        let mut lb = RunLog::new();
        let a = run_scenario(&ds, &small_config(ScenarioKind::Centralised), &mut la).unwrap();
        let b = run_scenario(&ds, &small_config(ScenarioKind::Localised), &mut lb).unwrap();
        assert_eq!(a.models[0].params, b.models[0].params);
        assert_eq!(a.report.mean_test_rmse, b.report.mean_test_rmse);
        let va: Vec<_> = la.records.iter().map(|r| r.validation_rmse).collect();
        let vb: Vec<_> = lb.records.iter().map(|r| r.validation_rmse).collect();
        assert_eq!(va, vb);
    }

    #[test]
    fn duplicate_households_double_epoch_samples() {
        let one = vec![household("A", 150, 6, 0.0, 5)];
        let two = vec![household("A", 150, 6, 0.0, 5), household("B", 150, 6, 0.0, 5)];
        let mut cfg = small_config(ScenarioKind::Centralised);
        cfg.caps.centralised_epochs = 2;
        let mut l1 = RunLog::new();
        let mut l2 = RunLog::new();
        run_scenario(&one, &cfg, &mut l1).unwrap();
        run_scenario(&two, &cfg, &mut l2).unwrap();
        let n = one[0].train.len() as u64;
        assert_eq!(l1.records[1].samples, vec![n]);
        assert_eq!(l2.records[1].samples, vec![2 * n]);
        let epochs = (l2.records.len() - 1) as u64;
        assert_eq!(l2.total_samples(), epochs * 2 * n);
    }

    #[test]
    fn localised_isolation_and_order_independence() {
        let ds = vec![household("A", 150, 6, 0.0, 5), household("B", 150, 6, 7.0, 5)];
        let rev: Vec<_> = ds.iter().rev().cloned().collect();
        let cfg = small_config(ScenarioKind::Localised);
        let a = run_scenario(&ds, &cfg, &mut RunLog::new()).unwrap();
        let b = run_scenario(&rev, &cfg, &mut RunLog::new()).unwrap();
        assert_eq!(a.models, b.models);
        assert_ne!(a.models[0].params, a.models[1].params);
    }

    #[test]
    fn accounting_matches_log_for_every_scenario() {
        let ds: Vec<_> = (0..4)
            .map(|i| household(&format!("H{i}"), 140, 6, (i % 2) as f64 * 9.0, 5))
            .collect();
        for kind in ScenarioKind::ALL {
            let cfg = small_config(kind);
            let mut log = RunLog::new();
            let out = run_scenario(&ds, &cfg, &mut log).unwrap();
            assert_eq!(count_samples(&log), out.live_samples, "{kind}");
            assert_eq!(out.report.total_samples, out.live_samples, "{kind}");
            out.report.verify().unwrap();
            for r in &log.records {
                if r.phase == Phase::Global || r.phase == Phase::Cluster {
                    if !r.participants.is_empty() {
                        let expect: u64 = r.participants.iter().map(|&c| 3 * ds[c].train.len() as u64).sum();
                        assert_eq!(r.round_samples(), expect);
                    }
                }
            }
            if kind.fine_tunes() {
                for c in &out.report.per_client {
                    assert!(c.validation_rmse <= c.base_validation_rmse.unwrap());
                }
            }
        }
    }

    #[test]
    fn fl_participation_and_determinism() {
        let ds: Vec<_> = (0..10).map(|i| household(&format!("H{i:02}"), 120, 6, i as f64, 5)).collect();
        let mut cfg = small_config(ScenarioKind::Fl);
        cfg.client_fraction = 0.3;
        cfg.local_epochs = 1;
        let mut l1 = RunLog::new();
        let a = run_scenario(&ds, &cfg, &mut l1).unwrap();
        for r in l1.records.iter().skip(1) {
            assert_eq!(r.participants.len(), 3);
        }
        let mut l2 = RunLog::new();
        let b = run_scenario(&ds, &cfg, &mut l2).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(l1, l2);
        let best = l1.records.iter().filter_map(|r| r.validation_rmse).fold(f64::INFINITY, f64::min);
        assert_eq!(a.report.mean_validation_rmse, best);
    }

    #[test]
    fn flhc_threshold_extremes() {
        let ds: Vec<_> = (0..4).map(|i| household(&format!("H{i}"), 120, 6, i as f64 * 6.0, 5)).collect();
        let mut cfg = small_config(ScenarioKind::FlHc);
        cfg.hc.as_mut().unwrap().threshold = f64::INFINITY;
        let out = run_scenario(&ds, &cfg, &mut RunLog::new()).unwrap();
        assert_eq!(out.assignment.unwrap().n_clusters, 1);
        cfg.hc.as_mut().unwrap().threshold = 1e-300;
        let out = run_scenario(&ds, &cfg, &mut RunLog::new()).unwrap();
        assert_eq!(out.assignment.unwrap().n_clusters, 4);
        assert_eq!(out.models.len(), 4);
    }

    #[test]
    fn config_validation() {
        let v = DatasetVariant::new(6, false);
        ScenarioConfig::new(ScenarioKind::FlHc, v, 1).validate().unwrap();
        let mut c = ScenarioConfig::new(ScenarioKind::FlHc, v, 1);
        c.client_fraction = 0.2;
        assert!(c.validate().is_err());
        let mut c = ScenarioConfig::new(ScenarioKind::Fl, v, 1);
        c.hc = ScenarioConfig::new(ScenarioKind::FlHc, v, 1).hc;
        assert!(c.validate().is_err());
        let mut c = ScenarioConfig::new(ScenarioKind::Fl, v, 1);
        c.client_fraction = 0.0;
        assert!(c.validate().is_err());
        let ds = vec![household("A", 120, 6, 0.0, 5)];
        assert!(matches!(
            run_scenario(&ds, &small_config(ScenarioKind::Fl), &mut RunLog::new()),
            Err(FederationError::TooFewClients { .. })
        ));
        let mut wrong = ds.clone();
        wrong[0].variant = DatasetVariant::new(12, false);
        assert!(matches!(
            run_scenario(&wrong, &small_config(ScenarioKind::Localised), &mut RunLog::new()),
            Err(FederationError::InconsistentVariant { .. })
        ));
    }

    #[test]
    fn scenario_names_roundtrip() {
        for k in ScenarioKind::ALL {
            assert_eq!(k.as_str().parse::<ScenarioKind>().unwrap(), k);
            assert_eq!(k.label().parse::<ScenarioKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(serde_json::from_str::<ScenarioKind>(&json).unwrap(), k);
        }
    }
}
