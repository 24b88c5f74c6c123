//! Desk-scale synthetic comparison of FL, FL+HC and their fine-tuned
//! variants. Usage: `desk_scale [fraction epochs threshold linkage n]`.

use std::time::Instant;

use fedcast::clustering::{cluster_quality, Linkage};
use fedcast::data::{
    clean_readings, default_archetypes, generate_synthetic_households, prepare_variant, DatasetVariant,
    SyntheticSpec,
};
use fedcast::federation::{run_scenario, ScenarioConfig, ScenarioKind, HcConfig, RunLog, count_samples};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let spec = SyntheticSpec::new(20, 3, 0.05, 90, 2024);
    let pop = generate_synthetic_households(&spec, &default_archetypes(3))?;
    let series = pop
        .households
        .iter()
        .map(|h| clean_readings(&h.household_id, &h.readings))
        .collect::<Result<Vec<_>, _>>()?;
    let variant = DatasetVariant::new(12, false);
    let prepared = prepare_variant(&series, None, variant)?;
    let truth: Vec<usize> = pop.households.iter().map(|h| h.archetype).collect();

    let kinds: Vec<ScenarioKind> = std::env::var("KINDS")
        .unwrap_or_else(|_| "fl,fl_hc_lft".into())
        .split(',')
        .map(|k| k.parse())
        .collect::<Result<_, _>>()?;
    for kind in kinds {
        let mut cfg = ScenarioConfig::new(kind, variant, 7);
        if kind.uses_hc() {
            cfg.hc = Some(HcConfig {
                threshold: arg(2, "1.4").parse()?,
                linkage: arg(3, "ward").parse::<Linkage>()?,
                rounds_before_clustering: arg(4, "3").parse()?,
            });
        } else {
            cfg.client_fraction = arg(0, "0.1").parse()?;
            cfg.local_epochs = arg(1, "3").parse()?;
        }
        let t = Instant::now();
        let mut log = RunLog::new();
        let out = run_scenario(&prepared.datasets, &cfg, &mut log)?;
        let ari = out.assignment.as_ref().map(|a| cluster_quality(a, &truth)).transpose()?;
        println!(
            "{kind}: test {:.5} val {:.5} samples {} (log {}) records {} ari {:?} clusters {:?} {:.1}s",
            out.report.mean_test_rmse,
            out.report.mean_validation_rmse,
            out.report.total_samples,
            count_samples(&log),
            log.records.len(),
            ari,
            out.assignment.map(|a| a.n_clusters),
            t.elapsed().as_secs_f64()
        );
        let mut by_phase = std::collections::BTreeMap::new();
        for r in &log.records {
            *by_phase.entry(format!("{:?}", r.phase)).or_insert(0u64) += r.round_samples();
        }
        println!("  by phase: {by_phase:?}");
    }
    Ok(())
}
