//! Implementations of the `prepare`, `synthesize`, `run` and `report`
//! commands, independent of argument parsing.
//!
//! A run writes `<out>/<run-id>/` containing `manifest.json`, `results.csv`,
//! `results.json`, `tables.txt`, `models/<entry>/<model>.bin` (little-endian
//! f64 parameters) and `logs/<entry>.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, RunConfig, SweepEntry};
use crate::data::{
    self, clean_readings, default_archetypes, generate_synthetic_households, ingest_lcl_csv, ingest_weather_csv,
    load_prepared, prepare_variant, write_meter_csv, write_prepared, write_weather_csv, CacheManifest,
    DataError, DatasetVariant, HourlySeries, PreparedVariant, SyntheticSpec, WeatherRecord,
};
use crate::federation::{run_scenario, RunLog, ScenarioConfig};
use crate::metrics::{emit_report, RunReport};
use crate::{Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn to_json<T: Serialize>(value: &T, what: &str) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value).map_err(|e| Error::json(what, e))?;
    v.push(b'\n');
    Ok(v)
}

/// Which weather variants `prepare` should build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeatherChoice {
    With,
    Without,
    Both,
}

impl std::str::FromStr for WeatherChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "with" | "yes" | "weather" => Ok(WeatherChoice::With),
            "without" | "no" | "none" => Ok(WeatherChoice::Without),
            "both" => Ok(WeatherChoice::Both),
            _ => Err(Error::Config(format!("weather variant must be with, without or both, got {s:?}"))),
        }
    }
}

impl WeatherChoice {
    pub fn variants(&self, ks: &[usize]) -> Vec<DatasetVariant> {
        let flags: &[bool] = match self {
            WeatherChoice::With => &[true],
            WeatherChoice::Without => &[false],
            WeatherChoice::Both => &[true, false],
        };
        let mut out = Vec::new();
        for &weather in flags {
            for &k in ks {
                out.push(DatasetVariant::new(k, weather));
            }
        }
        out
    }
}

/// Cleans every household of a meter file and loads the optional weather.
fn load_raw(meters: &Path, weather: Option<&Path>) -> Result<(Vec<HourlySeries>, Option<Vec<WeatherRecord>>, String)> {
    let meter_bytes = read_file(meters)?;
    let ingest = ingest_lcl_csv(meters)?;
    if ingest.households.is_empty() {
        return Err(DataError::EmptyInput(meters.display().to_string()).into());
    }
    if ingest.skipped > 0 {
        log::warn!("skipped {} malformed meter rows of {}", ingest.skipped, ingest.rows_read);
    }
    let series = ingest
        .households
        .iter()
        .map(|(id, readings)| clean_readings(id, readings))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut digest_input = data::sha256_hex(&meter_bytes);
    let weather = match weather {
        Some(path) => {
            digest_input.push_str(&data::sha256_hex(&read_file(path)?));
            let w = ingest_weather_csv(path)?;
            if w.skipped > 0 {
                log::warn!("skipped {} malformed weather rows of {}", w.skipped, w.rows_read);
            }
            Some(w.records)
        }
        None => None,
    };
    Ok((series, weather, data::sha256_hex(digest_input.as_bytes())))
}

fn prepare_all(
    series: &[HourlySeries],
    weather: Option<&[WeatherRecord]>,
    variants: &[DatasetVariant],
) -> Result<Vec<PreparedVariant>> {
    if variants.iter().any(|v| v.weather) && weather.is_none() {
        return Err(DataError::InvalidParameter("a weather variant was requested but no weather file given".into()).into());
    }
    variants
        .iter()
        .map(|&v| prepare_variant(series, weather, v).map_err(Error::from))
        .collect()
}

/// Runs the data pipeline for the requested variants and writes the cache.
pub fn cmd_prepare(
    meters: &Path,
    weather: Option<&Path>,
    out_dir: &Path,
    variants: &[DatasetVariant],
) -> Result<CacheManifest> {
    if variants.is_empty() {
        return Err(Error::Config("no variants requested".into()));
    }
    if variants.iter().any(|v| v.weather) && weather.is_none() {
        return Err(DataError::InvalidParameter("a weather variant was requested but no weather file given".into()).into());
    }
    let (series, weather, digest) = load_raw(meters, weather)?;
    let prepared = prepare_all(&series, weather.as_deref(), variants)?;
    Ok(write_prepared(out_dir, &prepared, &digest)?)
}

/// Files written by [`cmd_synthesize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFiles {
    pub meters: PathBuf,
    pub weather: PathBuf,
    /// `household_id,archetype` ground truth.
    pub labels: PathBuf,
}

/// Writes synthetic meter and weather CSVs in the ingestion format.
pub fn cmd_synthesize(spec: &SyntheticSpec, out_dir: &Path) -> Result<SyntheticFiles> {
    spec.validate()?;
    let pop = generate_synthetic_households(spec, &default_archetypes(spec.archetypes))?;
    let mut meters = Vec::new();
    let households: BTreeMap<String, Vec<_>> =
        pop.households.iter().map(|h| (h.household_id.clone(), h.readings.clone())).collect();
    write_meter_csv(&mut meters, &households)?;
    let mut weather = Vec::new();
    write_weather_csv(&mut weather, &pop.weather)?;
    let mut labels = String::from("household_id,archetype\n");
    for h in &pop.households {
        labels.push_str(&format!("{},{}\n", h.household_id, h.archetype));
    }
    let files = SyntheticFiles {
        meters: out_dir.join("meters.csv"),
        weather: out_dir.join("weather.csv"),
        labels: out_dir.join("labels.csv"),
    };
    write_file(&files.meters, &meters)?;
    write_file(&files.weather, &weather)?;
    write_file(&files.labels, labels.as_bytes())?;
    Ok(files)
}

/// Prepared datasets for a run plus the digest identifying their source.
pub struct LoadedData {
    pub variants: Vec<PreparedVariant>,
    pub source_digest: String,
    /// Ground-truth archetype per household, for synthetic sources.
    pub archetypes: Option<BTreeMap<String, usize>>,
}

pub fn load_data(source: &DataSource, variants: &[DatasetVariant], run_seed: u64) -> Result<LoadedData> {
    match source {
        DataSource::Prepared { path } => {
            let (manifest, prepared) = load_prepared(path, Some(variants))?;
            Ok(LoadedData {
                variants: prepared,
                source_digest: manifest.source_digest,
                archetypes: None,
            })
        }
        DataSource::Raw { meters, weather } => {
            let (series, weather, digest) = load_raw(meters, weather.as_deref())?;
            Ok(LoadedData {
                variants: prepare_all(&series, weather.as_deref(), variants)?,
                source_digest: digest,
                archetypes: None,
            })
        }
        DataSource::Synthetic { .. } => {
            let spec = source.synthetic_spec(run_seed).expect("synthetic source");
            spec.validate()?;
            let pop = generate_synthetic_households(&spec, &default_archetypes(spec.archetypes))?;
            let series = pop
                .households
                .iter()
                .map(|h| clean_readings(&h.household_id, &h.readings))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let spec_json = serde_json::to_vec(&spec).map_err(|e| Error::json("synthetic spec", e))?;
            Ok(LoadedData {
                variants: prepare_all(&series, Some(&pop.weather), variants)?,
                source_digest: data::sha256_hex(&spec_json),
                archetypes: Some(pop.households.iter().map(|h| (h.household_id.clone(), h.archetype)).collect()),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub run_id: String,
    pub config_digest: String,
    pub config: RunConfig,
    pub seed: u64,
    pub source_digest: String,
    /// SHA-256 of every emitted file, keyed by path relative to the run
    /// directory.
    pub files: BTreeMap<String, String>,
    pub entries: Vec<String>,
    pub duration_secs: f64,
}

/// Outcome of [`cmd_run`].
#[derive(Debug)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub reports: Vec<RunReport>,
    pub manifest: RunManifest,
}

struct EntryOutput {
    report: RunReport,
    files: Vec<(String, Vec<u8>)>,
}

fn run_entry(entry: &SweepEntry, prepared: &PreparedVariant) -> std::result::Result<EntryOutput, (Error, RunLog)> {
    let mut log = RunLog::new();
    let outcome = match run_scenario(&prepared.datasets, &entry.config, &mut log) {
        Ok(o) => o,
        Err(e) => return Err((e.into(), log)),
    };
    let report = outcome.report.with_energy_span(prepared.normalizer.energy_span());
    let mut files = Vec::new();
    for m in &outcome.models {
        files.push((format!("models/{}/{}.bin", entry.id, m.name), m.params.to_le_bytes()));
    }
    #[derive(Serialize)]
    struct EntryLog<'a> {
        entry: &'a str,
        config: &'a ScenarioConfig,
        log: &'a RunLog,
    }
    let body = to_json(
        &EntryLog {
            entry: &entry.id,
            config: &entry.config,
            log: &log,
        },
        "run log",
    )
    .map_err(|e| (e, RunLog::new()))?;
    files.push((format!("logs/{}.json", entry.id), body));
    Ok(EntryOutput { report, files })
}

/// Executes every sweep entry of `config` and writes the run directory.
/// Independent entries run concurrently on up to `jobs` threads; output is
/// identical for any `jobs`.
pub fn cmd_run(config: &RunConfig, out_root: &Path, jobs: usize) -> Result<RunSummary> {
    config.validate()?;
    let start = Instant::now();
    let run_id = config.run_id();
    let run_dir = out_root.join(&run_id);
    let data = load_data(&config.data, &config.variants, config.seed)?;
    let entries = config.entries();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<std::result::Result<EntryOutput, (Error, RunLog)>> = pool.install(|| {
        entries
            .par_iter()
            .map(|entry| {
                let prepared = data
                    .variants
                    .iter()
                    .find(|p| p.variant == entry.config.variant)
                    .expect("every configured variant was loaded");
                log::info!("running {}", entry.id);
                run_entry(entry, prepared)
            })
            .collect()
    });

    let mut reports = Vec::with_capacity(entries.len());
    let mut files: BTreeMap<String, String> = BTreeMap::new();
    let mut emit = |rel: String, bytes: &[u8]| -> Result<()> {
        write_file(&run_dir.join(&rel), bytes)?;
        files.insert(rel, data::sha256_hex(bytes));
        Ok(())
    };
    let mut failure = None;
    for (entry, result) in entries.iter().zip(results) {
        match result {
            Ok(out) => {
                for (rel, bytes) in &out.files {
                    emit(rel.clone(), bytes)?;
                }
                reports.push(out.report);
            }
            Err((error, log)) => {
                let rel = format!("logs/{}.json", entry.id);
                emit(rel.clone(), &to_json(&log, "run log")?)?;
                if failure.is_none() {
                    failure = Some((entry.id.clone(), run_dir.join(rel), error));
                }
            }
        }
    }
    if let Some((entry, log_path, error)) = failure {
        log::error!("entry {entry} failed; partial log at {}", log_path.display());
        return Err(error);
    }

    for path in emit_report(&run_dir, &reports)? {
        let rel = path.strip_prefix(&run_dir).expect("inside run dir").to_string_lossy().into_owned();
        files.insert(rel, data::sha256_hex(&read_file(&path)?));
    }
    let manifest = RunManifest {
        tool_version: TOOL_VERSION.to_string(),
        run_id,
        config_digest: config.digest(),
        config: config.clone(),
        seed: config.seed,
        source_digest: data.source_digest,
        files,
        entries: entries.iter().map(|e| e.id.clone()).collect(),
        duration_secs: start.elapsed().as_secs_f64(),
    };
    write_file(&run_dir.join("manifest.json"), &to_json(&manifest, "run manifest")?)?;
    Ok(RunSummary {
        run_dir,
        reports,
        manifest,
    })
}

/// Reads a run directory's manifest and reports.
pub fn read_run(dir: &Path) -> Result<(RunManifest, Vec<RunReport>)> {
    let manifest: RunManifest = serde_json::from_slice(&read_file(&dir.join("manifest.json"))?)
        .map_err(|e| Error::json(dir.join("manifest.json").display().to_string(), e))?;
    let reports: Vec<RunReport> = serde_json::from_slice(&read_file(&dir.join("results.json"))?)
        .map_err(|e| Error::json(dir.join("results.json").display().to_string(), e))?;
    Ok((manifest, reports))
}

/// Merges several run directories into one set of comparison tables. All
/// runs must have been trained on the same source data.
pub fn cmd_report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if run_dirs.is_empty() {
        return Err(Error::Config("no run directories given".into()));
    }
    let mut all = Vec::new();
    let mut source: Option<(String, &Path)> = None;
    for dir in run_dirs {
        let (manifest, reports) = read_run(dir)?;
        match &source {
            None => source = Some((manifest.source_digest.clone(), dir)),
            Some((digest, first)) if *digest != manifest.source_digest => {
                return Err(Error::Config(format!(
                    "{} and {} were trained on different data and cannot share a table",
                    first.display(),
                    dir.display()
                )));
            }
            Some(_) => {}
        }
        all.extend(reports);
    }
    Ok(emit_report(out_dir, &all)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::ScenarioKind;

    fn synthetic_config(scenarios: Vec<ScenarioKind>) -> RunConfig {
        let mut c = RunConfig::from_json(
            r#"{"seed": 5, "data": {"source": "synthetic", "households": 3, "archetypes": 2, "noise": 0.05, "days": 12},
                "variants": [{"k": 6, "weather": false}], "hidden_size": 3, "batch_size": 32,
                "caps": {"centralised_epochs": 2, "localised_epochs": 2, "fl_rounds": 2, "flhc_rounds": 8, "lft_epochs": 2}}"#,
        )
        .unwrap();
        c.scenarios = scenarios;
        c
    }

    #[test]
    fn weather_choice_variants() {
        assert_eq!(WeatherChoice::Both.variants(&[6, 12, 24]), DatasetVariant::all());
        assert_eq!("with".parse::<WeatherChoice>().unwrap(), WeatherChoice::With);
        assert!("maybe".parse::<WeatherChoice>().is_err());
    }

    #[test]
    fn synthesize_then_prepare() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec::new(2, 2, 0.05, 14, 1);
        let files = cmd_synthesize(&spec, dir.path()).unwrap();
        let again = tempfile::tempdir().unwrap();
        cmd_synthesize(&spec, again.path()).unwrap();
        assert_eq!(read_file(&files.meters).unwrap(), read_file(&again.path().join("meters.csv")).unwrap());

        let cache = dir.path().join("cache");
        let variants = WeatherChoice::Both.variants(&[6, 12, 24]);
        let manifest = cmd_prepare(&files.meters, Some(&files.weather), &cache, &variants).unwrap();
        assert_eq!(manifest.entries.len(), 12);
        let first = read_file(&cache.join("manifest.json")).unwrap();
        cmd_prepare(&files.meters, Some(&files.weather), &cache, &variants).unwrap();
        assert_eq!(first, read_file(&cache.join("manifest.json")).unwrap());

        let err = cmd_prepare(&files.meters, None, &dir.path().join("c2"), &variants).unwrap_err();
        assert!(!err.is_numerical());
    }

    #[test]
    fn run_layout_and_report() {
        let dir = tempfile::tempdir().unwrap();
        let config = synthetic_config(vec![ScenarioKind::Localised, ScenarioKind::Fl]);
        let summary = cmd_run(&config, dir.path(), 1).unwrap();
        assert_eq!(summary.run_dir, dir.path().join(config.run_id()));
        assert_eq!(summary.reports.len(), 2);
        for rel in summary.manifest.files.keys() {
            assert!(summary.run_dir.join(rel).is_file(), "{rel}");
        }
        for name in ["results.csv", "results.json", "tables.txt", "logs/k6-noweather-fl-000.json"] {
            assert!(summary.manifest.files.contains_key(name), "{name}");
        }
        let csv = fs::read_to_string(summary.run_dir.join("results.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);

        let out = dir.path().join("report");
        cmd_report(&[summary.run_dir.clone()], &out).unwrap();
        assert!(out.join("tables.txt").is_file());

        let mut other = config.clone();
        other.data = DataSource::Synthetic {
            households: 3,
            archetypes: 2,
            noise: 0.05,
            days: 13,
            seed: None,
        };
        let second = cmd_run(&other, dir.path(), 1).unwrap();
        assert!(cmd_report(&[summary.run_dir, second.run_dir], &out).is_err());
    }
}
