//! From raw meter readings to windowed, normalised, split datasets.

mod clean;
mod design;
mod ingest;
mod normalize;
mod pipeline;
mod sequence;
mod synth;

pub use clean::{clean_readings, fill_half_hourly, HourlySeries};
pub use design::{build_design_matrix, calendar_features, FeatureVector};
pub use ingest::{
    ingest_lcl_csv, ingest_weather_csv, parse_timestamp, write_meter_csv, write_weather_csv,
    MeterIngest, RawReading, WeatherIngest, WeatherRecord,
};
pub use normalize::{fit_normalizer, NormalizationParams};
pub use pipeline::{
    load_prepared, prepare_variant, read_manifest, write_prepared, CacheEntry, CacheManifest,
    HouseholdDataset, NormalizedMatrix, PreparedVariant, VariantNormalizer, FILLED_FLAG_THRESHOLD,
};
pub(crate) use pipeline::sha256_hex;
pub use sequence::{make_sequences, split_chronological, SequenceSample, SplitRanges};
pub use synth::{
    default_archetypes, generate_synthetic_households, Archetype, SyntheticHousehold,
    SyntheticPopulation, SyntheticSpec,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no readings for household {0}")]
    EmptyInput(String),
    #[error("household {household}: nothing to forward-fill from at {at}")]
    LeadingGap { household: String, at: String },
    #[error("household {household}: invalid reading at {at}")]
    InvalidReading { household: String, at: String },
    #[error("weather data missing hour {0}")]
    WeatherGap(String),
    #[error("{rows} rows cannot be split for K={k}: {reason}")]
    InsufficientRows { rows: usize, k: usize, reason: String },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("csv header must contain columns {expected}, found {found}")]
    BadHeader { expected: String, found: String },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed dataset cache: {0}")]
    Cache(String),
}

/// One of the six dataset variants: sequence length and whether weather
/// features are included.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DatasetVariant {
    pub k: usize,
    pub weather: bool,
}

impl DatasetVariant {
    pub const SEQUENCE_LENGTHS: [usize; 3] = [6, 12, 24];

    pub fn new(k: usize, weather: bool) -> Self {
        DatasetVariant { k, weather }
    }

    /// Table column order: with weather K=6,12,24, then without weather.
    pub fn all() -> Vec<DatasetVariant> {
        let mut out = Vec::with_capacity(6);
        for weather in [true, false] {
            for k in Self::SEQUENCE_LENGTHS {
                out.push(DatasetVariant { k, weather });
            }
        }
        out
    }

    /// Features per time step: `e, y, w, d, h` plus `a, r` with weather.
    pub fn feature_dim(&self) -> usize {
        if self.weather {
            7
        } else {
            5
        }
    }

    pub fn label(&self) -> String {
        format!("k{}-{}", self.k, if self.weather { "weather" } else { "noweather" })
    }

    pub fn column_index(&self) -> usize {
        let k_pos = Self::SEQUENCE_LENGTHS.iter().position(|&k| k == self.k).unwrap_or(0);
        if self.weather {
            k_pos
        } else {
            3 + k_pos
        }
    }
}

impl std::fmt::Display for DatasetVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}
