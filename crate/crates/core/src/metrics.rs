//! Error metrics, run reports and the two comparison tables (forecast error
//! and sample complexity per scenario and dataset variant).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::Linkage;
use crate::data::DatasetVariant;
use crate::federation::ScenarioKind;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("length mismatch: {predictions} predictions vs {targets} targets")]
    LengthMismatch { predictions: usize, targets: usize },
    #[error("cannot compute a metric over zero values")]
    Empty,
    #[error("baseline must be positive, got {0}")]
    NonPositiveBaseline(f64),
    #[error("report inconsistency: {0}")]
    Inconsistent(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Tolerance used when re-deriving aggregate cells.
pub const RECOMPUTE_TOLERANCE: f64 = 1e-12;

/// Root mean squared error.
pub fn rmse(predictions: &[f64], targets: &[f64]) -> Result<f64, MetricsError> {
    if predictions.len() != targets.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            targets: targets.len(),
        });
    }
    if predictions.is_empty() {
        return Err(MetricsError::Empty);
    }
    let sse: f64 = predictions.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sse / predictions.len() as f64).sqrt())
}

/// Signed percentage difference against the localised baseline: positive
/// when the scenario's metric is lower (better), negative when higher.
pub fn pct_difference(scenario: f64, localised: f64) -> Result<f64, MetricsError> {
    if !(localised > 0.0) {
        return Err(MetricsError::NonPositiveBaseline(localised));
    }
    Ok((localised - scenario) / localised * 100.0)
}

/// How many times fewer samples the scenario needed than localised training.
pub fn savings_factor(scenario_samples: f64, localised_samples: f64) -> Result<f64, MetricsError> {
    if !(scenario_samples > 0.0) {
        return Err(MetricsError::NonPositiveBaseline(scenario_samples));
    }
    Ok(localised_samples / scenario_samples)
}

fn uniform_mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Outcome for one client (or the pooled pseudo-client of centralised runs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientResult {
    pub client_id: usize,
    pub household_id: String,
    pub test_rmse: f64,
    pub validation_rmse: f64,
    /// Validation RMSE of the pre-trained base before fine-tuning.
    pub base_validation_rmse: Option<f64>,
    pub cluster: Option<usize>,
    pub samples: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HcParameters {
    pub threshold: f64,
    pub linkage: Linkage,
    pub rounds_before_clustering: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub client_fraction: Option<f64>,
    pub local_epochs: Option<usize>,
    pub hc: Option<HcParameters>,
}

impl Hyperparameters {
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if let Some(f) = self.client_fraction {
            parts.push(format!("C={f}"));
        }
        if let Some(e) = self.local_epochs {
            parts.push(format!("E={e}"));
        }
        if let Some(hc) = &self.hc {
            parts.push(format!(
                "t={} {} n={}",
                hc.threshold, hc.linkage, hc.rounds_before_clustering
            ));
        }
        if parts.is_empty() {
            "-".into()
        } else {
            parts.join(" ")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: ScenarioKind,
    pub variant: DatasetVariant,
    pub per_client: Vec<ClientResult>,
    /// Uniform mean of the per-client test RMSEs (normalised units).
    pub mean_test_rmse: f64,
    pub mean_validation_rmse: f64,
    /// Test RMSE in kWh, when the energy scale is known.
    pub mean_test_rmse_kwh: Option<f64>,
    pub total_samples: u64,
    pub hyperparameters: Hyperparameters,
    pub seed: u64,
    /// Households left out because a split was empty.
    pub excluded: Vec<String>,
    /// Cluster label per client, for clustered scenarios.
    pub cluster_labels: Option<Vec<usize>>,
}

impl RunReport {
    pub fn new(
        scenario: ScenarioKind,
        variant: DatasetVariant,
        per_client: Vec<ClientResult>,
        total_samples: u64,
        hyperparameters: Hyperparameters,
        seed: u64,
    ) -> Result<Self, MetricsError> {
        let mean_test_rmse = uniform_mean(per_client.iter().map(|c| c.test_rmse)).ok_or(MetricsError::Empty)?;
        let mean_validation_rmse =
            uniform_mean(per_client.iter().map(|c| c.validation_rmse)).ok_or(MetricsError::Empty)?;
        Ok(RunReport {
            scenario,
            variant,
            per_client,
            mean_test_rmse,
            mean_validation_rmse,
            mean_test_rmse_kwh: None,
            total_samples,
            hyperparameters,
            seed,
            excluded: Vec::new(),
            cluster_labels: None,
        })
    }

    /// Fills in the kWh RMSE from the normaliser's energy span.
    pub fn with_energy_span(mut self, span: f64) -> Self {
        self.mean_test_rmse_kwh = Some(self.mean_test_rmse * span);
        self
    }

    pub fn total_samples_millions(&self) -> f64 {
        self.total_samples as f64 / 1e6
    }

    pub fn verify(&self) -> Result<(), MetricsError> {
        let mean = uniform_mean(self.per_client.iter().map(|c| c.test_rmse)).ok_or(MetricsError::Empty)?;
        if (mean - self.mean_test_rmse).abs() > RECOMPUTE_TOLERANCE {
            return Err(MetricsError::Inconsistent(format!(
                "{} {}: mean test RMSE {} but clients average {}",
                self.scenario, self.variant, self.mean_test_rmse, mean
            )));
        }
        let samples: u64 = self.per_client.iter().map(|c| c.samples).sum();
        if samples != self.total_samples {
            return Err(MetricsError::Inconsistent(format!(
                "{} {}: total samples {} but clients sum to {}",
                self.scenario, self.variant, self.total_samples, samples
            )));
        }
        Ok(())
    }
}

/// One `results.csv` line: a scenario on a variant, aggregated over the
/// sweep entries that were run for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scenario: ScenarioKind,
    pub variant: DatasetVariant,
    /// Mean test RMSE over all sweep entries.
    pub mean_rmse: f64,
    /// Test RMSE of the entry with the lowest validation RMSE.
    pub best_rmse: f64,
    /// Samples used by that selected entry.
    pub total_samples: u64,
    pub seed: u64,
    pub entries: usize,
    pub selected: usize,
}

/// Index of the entry with the lowest validation RMSE, ties going to fewer
/// samples and then to the earlier entry.
pub fn select_best(reports: &[&RunReport]) -> Option<usize> {
    (0..reports.len()).min_by(|&a, &b| {
        let (ra, rb) = (reports[a], reports[b]);
        ra.mean_validation_rmse
            .total_cmp(&rb.mean_validation_rmse)
            .then(ra.total_samples.cmp(&rb.total_samples))
            .then(a.cmp(&b))
    })
}

/// Groups reports by (scenario, variant) in table order.
pub fn summarize(reports: &[RunReport]) -> Vec<ResultRow> {
    let mut groups: BTreeMap<(ScenarioKind, usize), Vec<&RunReport>> = BTreeMap::new();
    for r in reports {
        groups.entry((r.scenario, r.variant.column_index())).or_default().push(r);
    }
    groups
        .into_values()
        .map(|group| {
            let selected = select_best(&group).expect("groups are non-empty");
            let best = group[selected];
            ResultRow {
                scenario: best.scenario,
                variant: best.variant,
                mean_rmse: uniform_mean(group.iter().map(|r| r.mean_test_rmse)).expect("non-empty"),
                best_rmse: best.mean_test_rmse,
                total_samples: best.total_samples,
                seed: best.seed,
                entries: group.len(),
                selected,
            }
        })
        .collect()
}

/// Formats with six significant digits.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..6).contains(&exp) {
        format!("{:.*}", (5 - exp).max(0) as usize, x)
    } else {
        format!("{x:.5e}")
    }
}

pub const RESULTS_HEADER: [&str; 8] = [
    "scenario",
    "variant",
    "k",
    "weather",
    "mean_rmse",
    "best_rmse",
    "total_samples",
    "seed",
];

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = RESULTS_HEADER.join(",");
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.scenario.as_str(),
            r.variant.label(),
            r.variant.k,
            r.variant.weather,
            format_sig6(r.mean_rmse),
            format_sig6(r.best_rmse),
            r.total_samples,
            r.seed
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableKind {
    Rmse,
    SamplesMillions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub scenario: ScenarioKind,
    /// One cell per dataset variant, in [`DatasetVariant::all`] order.
    pub cells: Vec<Option<f64>>,
    pub mean: f64,
    /// For RMSE the row minimum; for samples the cell of the RMSE-best variant.
    pub best: f64,
    /// Column of the bold cell.
    pub best_index: usize,
    /// Percentage difference (RMSE) or savings factor (samples) vs localised.
    pub mean_annotation: Option<f64>,
    pub best_annotation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub kind: TableKind,
    pub rows: Vec<TableRow>,
}

fn row_cells(rows: &[ResultRow], scenario: ScenarioKind, value: impl Fn(&ResultRow) -> f64) -> Vec<Option<f64>> {
    let mut cells = vec![None; 6];
    for r in rows.iter().filter(|r| r.scenario == scenario) {
        cells[r.variant.column_index()] = Some(value(r));
    }
    cells
}

fn argmin(cells: &[Option<f64>]) -> Option<usize> {
    cells
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.map(|v| (i, v)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
}

impl ComparisonTable {
    /// Forecast error table: cells are the selected entries' test RMSEs.
    pub fn rmse(rows: &[ResultRow]) -> Result<Self, MetricsError> {
        Self::build(rows, TableKind::Rmse)
    }

    /// Sample complexity table in millions of samples.
    pub fn samples(rows: &[ResultRow]) -> Result<Self, MetricsError> {
        Self::build(rows, TableKind::SamplesMillions)
    }

    fn build(rows: &[ResultRow], kind: TableKind) -> Result<Self, MetricsError> {
        let mut table_rows = Vec::new();
        for scenario in ScenarioKind::ALL {
            let rmse = row_cells(rows, scenario, |r| r.best_rmse);
            let Some(rmse_best) = argmin(&rmse) else { continue };
            let cells = match kind {
                TableKind::Rmse => rmse,
                TableKind::SamplesMillions => row_cells(rows, scenario, |r| r.total_samples as f64 / 1e6),
            };
            let (best, best_index) = match kind {
                TableKind::Rmse => (cells[rmse_best].expect("present"), rmse_best),
                TableKind::SamplesMillions => (
                    cells[rmse_best].expect("present"),
                    argmin(&cells).expect("present"),
                ),
            };
            let mean = uniform_mean(cells.iter().flatten().copied()).expect("present");
            table_rows.push(TableRow {
                scenario,
                cells,
                mean,
                best,
                best_index,
                mean_annotation: None,
                best_annotation: None,
            });
        }
        let mut table = ComparisonTable { kind, rows: table_rows };
        table.annotate()?;
        Ok(table)
    }

    fn annotation(kind: TableKind, value: f64, baseline: f64) -> Result<f64, MetricsError> {
        match kind {
            TableKind::Rmse => pct_difference(value, baseline),
            TableKind::SamplesMillions => savings_factor(value, baseline),
        }
    }

    fn annotate(&mut self) -> Result<(), MetricsError> {
        let Some(base) = self.rows.iter().find(|r| r.scenario == ScenarioKind::Localised).cloned() else {
            return Ok(());
        };
        for row in &mut self.rows {
            if row.scenario == ScenarioKind::Localised {
                continue;
            }
            row.mean_annotation = Some(Self::annotation(self.kind, row.mean, base.mean)?);
            row.best_annotation = Some(Self::annotation(self.kind, row.best, base.best)?);
        }
        Ok(())
    }

    /// Recomputes every derived cell from the raw variant cells.
    pub fn verify(&self) -> Result<(), MetricsError> {
        let mut fresh = self.clone();
        for row in &mut fresh.rows {
            row.mean = uniform_mean(row.cells.iter().flatten().copied()).ok_or(MetricsError::Empty)?;
            if self.kind == TableKind::Rmse {
                row.best_index = argmin(&row.cells).ok_or(MetricsError::Empty)?;
                row.best = row.cells[row.best_index].expect("argmin is present");
            } else {
                row.best_index = argmin(&row.cells).ok_or(MetricsError::Empty)?;
            }
            row.mean_annotation = None;
            row.best_annotation = None;
        }
        fresh.annotate()?;
        for (a, b) in self.rows.iter().zip(&fresh.rows) {
            let close = |x: f64, y: f64| (x - y).abs() <= RECOMPUTE_TOLERANCE * x.abs().max(1.0);
            let opt_close = |x: Option<f64>, y: Option<f64>| match (x, y) {
                (Some(x), Some(y)) => close(x, y),
                (None, None) => true,
                _ => false,
            };
            if !close(a.mean, b.mean)
                || !close(a.best, b.best)
                || a.best_index != b.best_index
                || !opt_close(a.mean_annotation, b.mean_annotation)
                || !opt_close(a.best_annotation, b.best_annotation)
            {
                return Err(MetricsError::Inconsistent(format!(
                    "{:?} table row {} does not match its recomputation",
                    self.kind, a.scenario
                )));
            }
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let (title, prec) = match self.kind {
            TableKind::Rmse => ("Forecast error (test RMSE, normalised units)", 4),
            TableKind::SamplesMillions => ("Sample complexity (millions of samples)", 1),
        };
        let fmt_ann = |a: Option<f64>| match (self.kind, a) {
            (_, None) => "(---)".to_string(),
            (TableKind::Rmse, Some(p)) => format!("({p:+.1}%)"),
            (TableKind::SamplesMillions, Some(s)) => format!("({s:.1}x)"),
        };
        let mut out = format!("{title}\n");
        let _ = write!(out, "{:<12}", "scenario");
        for v in DatasetVariant::all() {
            let _ = write!(out, " {:>14}", v.label());
        }
        let _ = writeln!(out, " {:>20} {:>20}", "mean", "best");
        for row in &self.rows {
            let _ = write!(out, "{:<12}", row.scenario.label());
            for (i, c) in row.cells.iter().enumerate() {
                let cell = match c {
                    Some(v) if i == row.best_index => format!("*{v:.prec$}"),
                    Some(v) => format!("{v:.prec$}"),
                    None => "-".into(),
                };
                let _ = write!(out, " {cell:>14}");
            }
            let mean = format!("{:.prec$} {}", row.mean, fmt_ann(row.mean_annotation));
            let best = format!("{:.prec$} {}", row.best, fmt_ann(row.best_annotation));
            let _ = writeln!(out, " {mean:>20} {best:>20}");
        }
        out
    }
}

/// Writes `results.csv`, `results.json` and `tables.txt` into `dir`.
pub fn emit_report(dir: &Path, reports: &[RunReport]) -> Result<Vec<PathBuf>, MetricsError> {
    for r in reports {
        r.verify()?;
    }
    let rows = summarize(reports);
    let rmse = ComparisonTable::rmse(&rows)?;
    let samples = ComparisonTable::samples(&rows)?;
    rmse.verify()?;
    samples.verify()?;

    std::fs::create_dir_all(dir).map_err(|source| MetricsError::Io {
        context: format!("creating {}", dir.display()),
        source,
    })?;
    let json = serde_json::to_string_pretty(reports).map_err(|source| MetricsError::Json {
        context: "serialising run reports".into(),
        source,
    })?;
    let text = format!("{}\n{}", rmse.render(), samples.render());
    let files = [
        ("results.csv", results_csv(&rows)),
        ("results.json", json + "\n"),
        ("tables.txt", text),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|source| MetricsError::Io {
            context: format!("writing {}", path.display()),
            source,
        })?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::mse_loss;
    use proptest::prelude::*;

    fn report(scenario: ScenarioKind, variant: DatasetVariant, rmses: &[f64], val: f64, samples: u64) -> RunReport {
        let per_client: Vec<ClientResult> = rmses
            .iter()
            .enumerate()
            .map(|(i, &r)| ClientResult {
                client_id: i,
                household_id: format!("H{i}"),
                test_rmse: r,
                validation_rmse: val,
                base_validation_rmse: None,
                cluster: None,
                samples: if i == 0 { samples } else { 0 },
            })
            .collect();
        let hp = Hyperparameters {
            client_fraction: None,
            local_epochs: None,
            hc: None,
        };
        RunReport::new(scenario, variant, per_client, samples, hp, 7).unwrap()
    }

    #[test]
    fn rmse_basics() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!(matches!(rmse(&[1.0], &[1.0, 2.0]), Err(MetricsError::LengthMismatch { .. })));
        assert!(matches!(rmse(&[], &[]), Err(MetricsError::Empty)));
    }

    proptest! {
        #[test]
        fn rmse_is_sqrt_mse(pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 7)) {
            let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let lhs = rmse(&p, &t).unwrap();
            let rhs = mse_loss(&p, &t).unwrap().sqrt();
            prop_assert!((lhs - rhs).abs() <= 1e-12);
        }
    }

    #[test]
    fn percentage_and_savings() {
        assert_eq!(pct_difference(0.02, 0.02).unwrap(), 0.0);
        let centralised = pct_difference(0.0198, 0.0183).unwrap();
        assert!((centralised + 8.0).abs() < 0.5, "{centralised}");
        let lft = pct_difference(0.0187, 0.0196).unwrap();
        assert!((lft - 4.3).abs() < 0.5, "{lft}");
        assert!(pct_difference(0.1, 0.0).is_err());

        assert_eq!(savings_factor(3.0, 3.0).unwrap(), 1.0);
        assert!((savings_factor(5.6e6, 71.0e6).unwrap() - 12.7).abs() < 0.05);
        assert!((savings_factor(343.2e6, 71.0e6).unwrap() - 0.2).abs() < 0.05);
        assert!(savings_factor(0.0, 1.0).is_err());
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(0.0183), "0.0183000");
        assert_eq!(format_sig6(12.345678), "12.3457");
        assert_eq!(format_sig6(1234567.0), "1.23457e6");
        assert_eq!(format_sig6(0.0), "0");
    }

    #[test]
    fn empty_report_has_header_only() {
        let dir = tempfile::tempdir().unwrap();
        emit_report(dir.path(), &[]).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
        assert_eq!(csv, format!("{}\n", RESULTS_HEADER.join(",")));
    }

    #[test]
    fn one_run_mean_equals_best() {
        let v = DatasetVariant::new(12, false);
        let reports = vec![report(ScenarioKind::Localised, v, &[0.02, 0.04], 0.03, 1000)];
        let rows = summarize(&reports);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].mean_rmse, rows[0].best_rmse);
        let table = ComparisonTable::rmse(&rows).unwrap();
        assert_eq!(table.rows[0].mean, table.rows[0].best);
        table.verify().unwrap();
    }

    #[test]
    fn sweep_selection_uses_validation_then_samples() {
        let v = DatasetVariant::new(6, true);
        let reports = vec![
            report(ScenarioKind::Fl, v, &[0.05], 0.030, 500),
            report(ScenarioKind::Fl, v, &[0.04], 0.020, 900),
            report(ScenarioKind::Fl, v, &[0.06], 0.020, 800),
        ];
        let rows = summarize(&reports);
        assert_eq!(rows[0].selected, 2);
        assert_eq!(rows[0].best_rmse, 0.06);
        assert_eq!(rows[0].total_samples, 800);
        assert!((rows[0].mean_rmse - 0.05).abs() < 1e-15);
    }

    #[test]
    fn six_variant_table_best_is_row_minimum() {
        let cells = [0.0198, 0.0183, 0.0201, 0.0201, 0.0188, 0.0202];
        let fl = [0.0219, 0.0202, 0.0207, 0.0219, 0.0205, 0.0210];
        let mut reports = Vec::new();
        for (i, v) in DatasetVariant::all().into_iter().enumerate() {
            reports.push(report(ScenarioKind::Localised, v, &[cells[i]], 0.1, 1_000_000 * (i as u64 + 1)));
            reports.push(report(ScenarioKind::Fl, v, &[fl[i]], 0.1, 5_000_000));
        }
        let rows = summarize(&reports);
        let table = ComparisonTable::rmse(&rows).unwrap();
        table.verify().unwrap();
        let loc = &table.rows[table.rows.iter().position(|r| r.scenario == ScenarioKind::Localised).unwrap()];
        assert_eq!(loc.best_index, 1);
        assert_eq!(loc.best, 0.0183);
        let mean: f64 = cells.iter().sum::<f64>() / 6.0;
        assert!((loc.mean - mean).abs() <= 1e-12);
        let fl_row = table.rows.iter().find(|r| r.scenario == ScenarioKind::Fl).unwrap();
        assert!(fl_row.mean_annotation.unwrap() < 0.0);

        let samples = ComparisonTable::samples(&rows).unwrap();
        samples.verify().unwrap();
        let loc = samples.rows.iter().find(|r| r.scenario == ScenarioKind::Localised).unwrap();
        assert_eq!(loc.best, 2.0);
        let fl_row = samples.rows.iter().find(|r| r.scenario == ScenarioKind::Fl).unwrap();
        assert!((fl_row.best_annotation.unwrap() - 0.4).abs() < 1e-12);

        let mut broken = table.clone();
        broken.rows[0].mean += 1e-3;
        assert!(broken.verify().is_err());
        assert!(table.render().contains("*0.0183"));
    }

    #[test]
    fn report_verify_detects_mismatch() {
        let mut r = report(ScenarioKind::Localised, DatasetVariant::new(6, false), &[0.1, 0.3], 0.2, 10);
        r.verify().unwrap();
        r.mean_test_rmse = 0.25;
        assert!(r.verify().is_err());
    }
}
