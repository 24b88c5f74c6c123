//! Assembles per-household datasets for one variant and caches them on disk.
//!
//! Cache layout:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/<variant label>/<household id>.csv   timestamp,split,<features...>
//! ```
//!
//! Feature values in the CSVs are already normalised; the manifest records the
//! normaliser, split boundaries and a SHA-256 digest of every file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ingest::format_timestamp;
use super::{
    build_design_matrix, fit_normalizer, make_sequences, parse_timestamp, split_chronological,
    DataError, DatasetVariant, HourlySeries, NormalizationParams, SequenceSample, SplitRanges,
    WeatherRecord,
};

/// Households with more forward-filled hours than this fraction are flagged.
pub const FILLED_FLAG_THRESHOLD: f64 = 0.1;

/// One household's windowed train/validation/test sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct HouseholdDataset {
    pub household_id: String,
    pub variant: DatasetVariant,
    pub split: SplitRanges,
    pub train: Vec<SequenceSample>,
    pub validation: Vec<SequenceSample>,
    pub test: Vec<SequenceSample>,
    pub filled_fraction: f64,
}

impl HouseholdDataset {
    pub fn flagged(&self) -> bool {
        self.filled_fraction > FILLED_FLAG_THRESHOLD
    }
}

/// Normalised design matrix of one household, as stored in the cache.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedMatrix {
    pub household_id: String,
    pub timestamps: Vec<NaiveDateTime>,
    pub rows: Vec<Vec<f64>>,
    pub filled_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedVariant {
    pub variant: DatasetVariant,
    pub normalizer: NormalizationParams,
    /// Sorted by household id.
    pub datasets: Vec<HouseholdDataset>,
    pub matrices: Vec<NormalizedMatrix>,
}

fn window_splits(
    household_id: &str,
    variant: DatasetVariant,
    rows: &[Vec<f64>],
    filled_fraction: f64,
) -> Result<HouseholdDataset, DataError> {
    let split = split_chronological(rows.len(), variant.k)?;
    let seqs = |r: &std::ops::Range<usize>| make_sequences(&rows[r.clone()], variant.k, r.start);
    Ok(HouseholdDataset {
        household_id: household_id.to_string(),
        variant,
        train: seqs(&split.train)?,
        validation: seqs(&split.validation)?,
        test: seqs(&split.test)?,
        split,
        filled_fraction,
    })
}

/// Builds design matrices, splits each household chronologically, fits the
/// normaliser on the training rows of all households and windows each split
/// independently.
pub fn prepare_variant(
    series: &[HourlySeries],
    weather: Option<&[WeatherRecord]>,
    variant: DatasetVariant,
) -> Result<PreparedVariant, DataError> {
    if series.is_empty() {
        return Err(DataError::InvalidParameter("no households to prepare".into()));
    }
    let weather = match (variant.weather, weather) {
        (true, None) => {
            return Err(DataError::InvalidParameter(format!(
                "variant {variant} needs weather data"
            )))
        }
        (true, Some(w)) => Some(w),
        (false, _) => None,
    };

    let mut ordered: Vec<&HourlySeries> = series.iter().collect();
    ordered.sort_by(|a, b| a.household_id.cmp(&b.household_id));

    let mut raw = Vec::with_capacity(ordered.len());
    for s in &ordered {
        let matrix = build_design_matrix(s, weather)?;
        let split = split_chronological(matrix.len(), variant.k)?;
        let timestamps = matrix.iter().map(|f| f.timestamp).collect::<Vec<_>>();
        let rows = matrix.iter().map(|f| f.values()).collect::<Vec<_>>();
        raw.push((s, timestamps, rows, split));
    }

    let normalizer = fit_normalizer(
        raw.iter()
            .flat_map(|(_, _, rows, split)| rows[split.train.clone()].iter().map(|r| r.as_slice())),
    )?;

    let mut datasets = Vec::with_capacity(raw.len());
    let mut matrices = Vec::with_capacity(raw.len());
    for (s, timestamps, rows, _) in raw {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| normalizer.normalize_row(r)).collect();
        let filled_fraction = s.filled_fraction();
        datasets.push(window_splits(&s.household_id, variant, &rows, filled_fraction)?);
        matrices.push(NormalizedMatrix {
            household_id: s.household_id.clone(),
            timestamps,
            rows,
            filled_fraction,
        });
    }
    Ok(PreparedVariant {
        variant,
        normalizer,
        datasets,
        matrices,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub variant: String,
    pub k: usize,
    pub weather: bool,
    pub household_id: String,
    pub file: String,
    pub rows: usize,
    pub split: SplitRanges,
    pub train_sequences: usize,
    pub validation_sequences: usize,
    pub test_sequences: usize,
    pub filled_fraction: f64,
    pub flagged: bool,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantNormalizer {
    pub variant: DatasetVariant,
    pub normalizer: NormalizationParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub source_digest: String,
    pub variants: Vec<VariantNormalizer>,
    pub entries: Vec<CacheEntry>,
}

fn io_err(context: String) -> impl FnOnce(std::io::Error) -> DataError {
    move |source| DataError::Io { context, source }
}

fn split_name(split: &SplitRanges, row: usize) -> &'static str {
    if split.train.contains(&row) {
        "train"
    } else if split.validation.contains(&row) {
        "validation"
    } else {
        "test"
    }
}

fn matrix_csv(matrix: &NormalizedMatrix, split: &SplitRanges, weather: bool) -> Result<Vec<u8>, DataError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["timestamp", "split", "e", "y", "w", "d", "h"];
    if weather {
        header.extend(["a", "r"]);
    }
    w.write_record(&header)?;
    for (i, (t, row)) in matrix.timestamps.iter().zip(&matrix.rows).enumerate() {
        let mut rec = vec![format_timestamp(t), split_name(split, i).to_string()];
        rec.extend(row.iter().map(|v| format!("{v}")));
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| DataError::Cache(e.to_string()))
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes the cache for all prepared variants and returns its manifest.
pub fn write_prepared(
    dir: &Path,
    prepared: &[PreparedVariant],
    source_digest: &str,
) -> Result<CacheManifest, DataError> {
    fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
    let mut manifest = CacheManifest {
        source_digest: source_digest.to_string(),
        variants: Vec::new(),
        entries: Vec::new(),
    };
    for pv in prepared {
        let label = pv.variant.label();
        let vdir = dir.join(&label);
        fs::create_dir_all(&vdir).map_err(io_err(format!("creating {}", vdir.display())))?;
        manifest.variants.push(VariantNormalizer {
            variant: pv.variant,
            normalizer: pv.normalizer.clone(),
        });
        for (ds, matrix) in pv.datasets.iter().zip(&pv.matrices) {
            let bytes = matrix_csv(matrix, &ds.split, pv.variant.weather)?;
            let file = format!("{label}/{}.csv", ds.household_id);
            let path = dir.join(&file);
            fs::write(&path, &bytes).map_err(io_err(format!("writing {}", path.display())))?;
            manifest.entries.push(CacheEntry {
                variant: label.clone(),
                k: pv.variant.k,
                weather: pv.variant.weather,
                household_id: ds.household_id.clone(),
                file,
                rows: matrix.rows.len(),
                split: ds.split.clone(),
                train_sequences: ds.train.len(),
                validation_sequences: ds.validation.len(),
                test_sequences: ds.test.len(),
                filled_fraction: ds.filled_fraction,
                flagged: ds.flagged(),
                sha256: sha256_hex(&bytes),
            });
        }
    }
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| DataError::Cache(e.to_string()))?;
    let path = dir.join("manifest.json");
    fs::write(&path, json).map_err(io_err(format!("writing {}", path.display())))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CacheManifest, DataError> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(io_err(format!("reading {}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| DataError::Cache(format!("{}: {e}", path.display())))
}

/// Loads prepared variants from a cache directory. When `wanted` is given,
/// only those variants are loaded, in that order.
pub fn load_prepared(
    dir: &Path,
    wanted: Option<&[DatasetVariant]>,
) -> Result<(CacheManifest, Vec<PreparedVariant>), DataError> {
    let manifest = read_manifest(dir)?;
    let variants: Vec<DatasetVariant> = match wanted {
        Some(w) => w.to_vec(),
        None => manifest.variants.iter().map(|v| v.variant).collect(),
    };
    let mut by_variant: BTreeMap<String, Vec<&CacheEntry>> = BTreeMap::new();
    for e in &manifest.entries {
        by_variant.entry(e.variant.clone()).or_default().push(e);
    }

    let mut out = Vec::new();
    for variant in variants {
        let normalizer = manifest
            .variants
            .iter()
            .find(|v| v.variant == variant)
            .ok_or_else(|| DataError::Cache(format!("variant {variant} not in cache")))?
            .normalizer
            .clone();
        let mut datasets = Vec::new();
        let mut matrices = Vec::new();
        for entry in by_variant.get(&variant.label()).map(Vec::as_slice).unwrap_or(&[]) {
            let path = dir.join(&entry.file);
            let bytes = fs::read(&path).map_err(io_err(format!("reading {}", path.display())))?;
            if sha256_hex(&bytes) != entry.sha256 {
                return Err(DataError::Cache(format!("digest mismatch for {}", entry.file)));
            }
            let mut rdr = csv::Reader::from_reader(bytes.as_slice());
            let mut timestamps = Vec::new();
            let mut rows = Vec::new();
            for rec in rdr.records() {
                let rec = rec?;
                let t = rec
                    .get(0)
                    .and_then(parse_timestamp)
                    .ok_or_else(|| DataError::Cache(format!("bad timestamp in {}", entry.file)))?;
                let row = rec
                    .iter()
                    .skip(2)
                    .map(|v| v.parse::<f64>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| DataError::Cache(format!("{}: {e}", entry.file)))?;
                timestamps.push(t);
                rows.push(row);
            }
            let ds = window_splits(&entry.household_id, variant, &rows, entry.filled_fraction)?;
            if ds.split != entry.split {
                return Err(DataError::Cache(format!("split mismatch for {}", entry.file)));
            }
            datasets.push(ds);
            matrices.push(NormalizedMatrix {
                household_id: entry.household_id.clone(),
                timestamps,
                rows,
                filled_fraction: entry.filled_fraction,
            });
        }
        if datasets.is_empty() {
            return Err(DataError::Cache(format!("no households cached for {variant}")));
        }
        out.push(PreparedVariant {
            variant,
            normalizer,
            datasets,
            matrices,
        });
    }
    Ok((manifest, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{clean_readings, default_archetypes, generate_synthetic_households, SyntheticSpec};

    fn population(days: usize) -> (Vec<HourlySeries>, Vec<WeatherRecord>) {
        let spec = SyntheticSpec::new(3, 3, 0.05, days, 5);
        let pop = generate_synthetic_households(&spec, &default_archetypes(3)).unwrap();
        let series = pop
            .households
            .iter()
            .map(|h| clean_readings(&h.household_id, &h.readings).unwrap())
            .collect();
        (series, pop.weather)
    }

    #[test]
    fn split_monotone_and_counts() {
        let (series, weather) = population(20);
        for variant in DatasetVariant::all() {
            let pv = prepare_variant(&series, Some(&weather), variant).unwrap();
            for ds in &pv.datasets {
                let (a, b, c) = ds.split.sizes();
                assert_eq!((a, b, c), (336, 96, 48));
                assert_eq!(ds.train.len(), a - variant.k);
                assert_eq!(ds.validation.len(), b - variant.k);
                assert_eq!(ds.test.len(), c - variant.k);
                let max_train = ds.train.iter().map(|s| s.time_index).max().unwrap();
                let min_val = ds.validation.iter().map(|s| s.time_index).min().unwrap();
                let max_val = ds.validation.iter().map(|s| s.time_index).max().unwrap();
                let min_test = ds.test.iter().map(|s| s.time_index).min().unwrap();
                assert!(max_train < min_val && max_val < min_test);
                assert_eq!(ds.train[0].dim(), variant.feature_dim());
            }
        }
    }

    #[test]
    fn training_rows_normalised_into_unit_interval() {
        let (series, weather) = population(20);
        let pv = prepare_variant(&series, Some(&weather), DatasetVariant::new(6, true)).unwrap();
        let mut max_e: f64 = 0.0;
        for (ds, m) in pv.datasets.iter().zip(&pv.matrices) {
            for row in &m.rows[ds.split.train.clone()] {
                assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
                max_e = max_e.max(row[0]);
            }
        }
        assert_eq!(max_e, 1.0);
    }

    #[test]
    fn weather_variant_requires_weather() {
        let (series, _) = population(20);
        assert!(prepare_variant(&series, None, DatasetVariant::new(6, true)).is_err());
        assert!(prepare_variant(&series, None, DatasetVariant::new(6, false)).is_ok());
    }

    #[test]
    fn cache_roundtrip() {
        let (series, weather) = population(14);
        let variants: Vec<PreparedVariant> = DatasetVariant::all()
            .into_iter()
            .map(|v| prepare_variant(&series, Some(&weather), v).unwrap())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_prepared(dir.path(), &variants, "abc").unwrap();
        assert_eq!(manifest.entries.len(), 18);
        let (_, loaded) = load_prepared(dir.path(), None).unwrap();
        assert_eq!(loaded, variants);
        let (_, only) = load_prepared(dir.path(), Some(&[DatasetVariant::new(12, false)])).unwrap();
        assert_eq!(only.len(), 1);
        assert_eq!(only[0], variants[4]);
    }
}
