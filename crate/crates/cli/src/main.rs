//! `fedcast`: prepare datasets, generate synthetic households, run training
//! scenarios and render comparison tables.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 numerical failure
//! during training.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedcast::commands::{cmd_prepare, cmd_report, cmd_run, cmd_synthesize, WeatherChoice};
use fedcast::config::RunConfig;
use fedcast::data::SyntheticSpec;
use fedcast::Error;

#[derive(Parser)]
#[command(name = "fedcast", version, about = "Federated household load-forecasting simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean, window, split and normalise meter data into a dataset cache.
    Prepare {
        #[arg(long)]
        meters: PathBuf,
        #[arg(long)]
        weather: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Sequence lengths to build.
        #[arg(long, value_delimiter = ',', default_value = "6,12,24")]
        k: Vec<usize>,
        /// with, without or both.
        #[arg(long = "weather-variant", default_value = "both")]
        weather_variant: WeatherChoice,
    },
    /// Write synthetic meter and weather CSVs.
    Synthesize {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        archetypes: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 90)]
        days: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the scenarios and sweeps described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Sweep entries trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Merge run directories into comparison tables.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::Prepare {
            meters,
            weather,
            out,
            k,
            weather_variant,
        } => {
            let variants = weather_variant.variants(&k);
            let manifest = cmd_prepare(&meters, weather.as_deref(), &out, &variants)?;
            let flagged = manifest.entries.iter().filter(|e| e.flagged).count();
            println!(
                "prepared {} datasets across {} variants in {} ({flagged} flagged for heavy gap filling)",
                manifest.entries.len(),
                manifest.variants.len(),
                out.display()
            );
        }
        Command::Synthesize {
            n,
            archetypes,
            noise,
            seed,
            days,
            out,
        } => {
            let files = cmd_synthesize(&SyntheticSpec::new(n, archetypes, noise, days, seed), &out)?;
            println!(
                "wrote {}, {} and {}",
                files.meters.display(),
                files.weather.display(),
                files.labels.display()
            );
        }
        Command::Run { config, out, jobs } => {
            let config = RunConfig::load(&config)?;
            let summary = cmd_run(&config, &out, jobs)?;
            print!("{}", std::fs::read_to_string(summary.run_dir.join("tables.txt")).unwrap_or_default());
            println!("results in {}", summary.run_dir.display());
        }
        Command::Report { runs, out } => {
            let files = cmd_report(&runs, &out)?;
            if let Some(tables) = files.iter().find(|p| p.ends_with("tables.txt")) {
                print!("{}", std::fs::read_to_string(tables).unwrap_or_default());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
