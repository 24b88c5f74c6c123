//! Run configuration: where the data comes from, which scenarios and variants
//! to train, and the hyperparameter grids to sweep.
//!
//! ```json
//! {
//!   "seed": 7,
//!   "data": { "source": "synthetic", "households": 20, "archetypes": 3, "noise": 0.05, "days": 90 },
//!   "variants": [{ "k": 12, "weather": false }],
//!   "scenarios": ["localised", "fl", "fl_hc"],
//!   "fl": { "client_fraction": [0.1, 0.2, 0.3], "local_epochs": [1, 3, 5] },
//!   "fl_hc": { "threshold": 1.4, "linkage": "ward", "rounds_before_clustering": [3, 5, 10] }
//! }
//! ```
//!
//! Scalars and lists are interchangeable in the `fl` and `fl_hc` sections.
//! The `FEDCAST_SEED` environment variable overrides `seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clustering::Linkage;
use crate::data::{DatasetVariant, SyntheticSpec};
use crate::federation::{
    Caps, HcConfig, ScenarioConfig, ScenarioKind, BATCH_SIZE, FLHC_CLIENT_FRACTION, FLHC_LOCAL_EPOCHS, PATIENCE,
};
use crate::neural::{DEFAULT_LEARNING_RATE, HIDDEN_SIZE};
use crate::{Error, Result};

pub const SEED_ENV: &str = "FEDCAST_SEED";

/// A single value or a list of values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn values(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    /// A cache written by `fedcast prepare`.
    Prepared { path: PathBuf },
    /// Meter and optional weather CSVs, prepared on the fly.
    Raw {
        meters: PathBuf,
        #[serde(default)]
        weather: Option<PathBuf>,
    },
    /// Generated households; `seed` defaults to the run seed.
    Synthetic {
        households: usize,
        archetypes: usize,
        noise: f64,
        days: usize,
        #[serde(default)]
        seed: Option<u64>,
    },
}

impl DataSource {
    /// Resolves relative paths against the config file's directory.
    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DataSource::Prepared { path } => fix(path),
            DataSource::Raw { meters, weather } => {
                fix(meters);
                if let Some(w) = weather {
                    fix(w);
                }
            }
            DataSource::Synthetic { .. } => {}
        }
    }

    pub fn synthetic_spec(&self, run_seed: u64) -> Option<SyntheticSpec> {
        match self {
            DataSource::Synthetic {
                households,
                archetypes,
                noise,
                days,
                seed,
            } => Some(SyntheticSpec::new(*households, *archetypes, *noise, *days, seed.unwrap_or(run_seed))),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlSection {
    #[serde(default = "fl_fraction_default")]
    pub client_fraction: OneOrMany<f64>,
    #[serde(default = "fl_epochs_default")]
    pub local_epochs: OneOrMany<usize>,
}

fn fl_fraction_default() -> OneOrMany<f64> {
    OneOrMany::One(0.1)
}
fn fl_epochs_default() -> OneOrMany<usize> {
    OneOrMany::One(3)
}

impl Default for FlSection {
    fn default() -> Self {
        FlSection {
            client_fraction: fl_fraction_default(),
            local_epochs: fl_epochs_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlHcSection {
    #[serde(default = "hc_threshold_default")]
    pub threshold: OneOrMany<f64>,
    #[serde(default = "hc_linkage_default")]
    pub linkage: OneOrMany<Linkage>,
    #[serde(default = "hc_rounds_default")]
    pub rounds_before_clustering: OneOrMany<usize>,
}

fn hc_threshold_default() -> OneOrMany<f64> {
    OneOrMany::One(1.4)
}
fn hc_linkage_default() -> OneOrMany<Linkage> {
    OneOrMany::One(Linkage::Ward)
}
fn hc_rounds_default() -> OneOrMany<usize> {
    OneOrMany::One(3)
}

impl Default for FlHcSection {
    fn default() -> Self {
        FlHcSection {
            threshold: hc_threshold_default(),
            linkage: hc_linkage_default(),
            rounds_before_clustering: hc_rounds_default(),
        }
    }
}

/// The full hyperparameter grids for a complete sweep.
pub fn full_fl_grid() -> FlSection {
    FlSection {
        client_fraction: OneOrMany::Many(vec![0.1, 0.2, 0.3]),
        local_epochs: OneOrMany::Many(vec![1, 3, 5]),
    }
}

pub fn full_flhc_grid() -> FlHcSection {
    FlHcSection {
        threshold: OneOrMany::Many(vec![0.8, 1.4, 2.0]),
        linkage: OneOrMany::Many(Linkage::ALL.to_vec()),
        rounds_before_clustering: OneOrMany::Many(vec![3, 5, 10]),
    }
}

fn default_variants() -> Vec<DatasetVariant> {
    DatasetVariant::all()
}
fn default_scenarios() -> Vec<ScenarioKind> {
    ScenarioKind::ALL.to_vec()
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
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSource,
    #[serde(default = "default_variants")]
    pub variants: Vec<DatasetVariant>,
    #[serde(default = "default_scenarios")]
    pub scenarios: Vec<ScenarioKind>,
    #[serde(default)]
    pub fl: FlSection,
    #[serde(default)]
    pub fl_hc: FlHcSection,
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

/// One scenario run within a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    /// Stable identifier, also the name of the entry's model/log files.
    pub id: String,
    pub config: ScenarioConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file, resolves relative data paths against its
    /// directory and applies the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut config = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            config.data.rebase(dir);
        }
        config.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        config.validate()?;
        Ok(config)
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::Config("no dataset variants selected".into()));
        }
        for v in &self.variants {
            if !DatasetVariant::SEQUENCE_LENGTHS.contains(&v.k) {
                return Err(Error::Config(format!("sequence length {} not in {{6, 12, 24}}", v.k)));
            }
        }
        if self.scenarios.is_empty() {
            return Err(Error::Config("no scenarios selected".into()));
        }
        if let Some(spec) = self.data.synthetic_spec(self.seed) {
            spec.validate()?;
        }
        for entry in self.entries() {
            entry.config.validate()?;
        }
        Ok(())
    }

    /// Expands scenarios × variants × grids into individual runs, ordered by
    /// variant, then scenario, then grid position.
    pub fn entries(&self) -> Vec<SweepEntry> {
        let mut out = Vec::new();
        for &variant in &self.variants {
            for &scenario in &self.scenarios {
                let base = ScenarioConfig {
                    scenario,
                    variant,
                    client_fraction: FLHC_CLIENT_FRACTION,
                    local_epochs: FLHC_LOCAL_EPOCHS,
                    hc: None,
                    seed: self.seed,
                    caps: self.caps,
                    patience: self.patience,
                    batch_size: self.batch_size,
                    learning_rate: self.learning_rate,
                    hidden_size: self.hidden_size,
                };
                let mut configs = Vec::new();
                if scenario.uses_hc() {
                    for threshold in self.fl_hc.threshold.values() {
                        for linkage in self.fl_hc.linkage.values() {
                            for n in self.fl_hc.rounds_before_clustering.values() {
                                configs.push(ScenarioConfig {
                                    hc: Some(HcConfig {
                                        threshold,
                                        linkage,
                                        rounds_before_clustering: n,
                                    }),
                                    ..base.clone()
                                });
                            }
                        }
                    }
                } else if scenario.is_federated() {
                    for client_fraction in self.fl.client_fraction.values() {
                        for local_epochs in self.fl.local_epochs.values() {
                            configs.push(ScenarioConfig {
                                client_fraction,
                                local_epochs,
                                ..base.clone()
                            });
                        }
                    }
                } else {
                    configs.push(base);
                }
                for (i, config) in configs.into_iter().enumerate() {
                    out.push(SweepEntry {
                        id: format!("{}-{}-{i:03}", variant.label(), scenario.as_str()),
                        config,
                    });
                }
            }
        }
        out
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        crate::data::sha256_hex(&json)
    }

    /// Output directory name: the first 12 hex digits of the digest.
    pub fn run_id(&self) -> String {
        self.digest()[..12].to_string()
    }
}
