use std::fs::{self, File};
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use clap::{Parser, Subcommand};

use liftwatch::features::{build_r1, window_select, FeatureVectorR1, DEFAULT_WINDOW_DAYS};
use liftwatch::flowrec::{reconstruct, DEFAULT_MATCH_THRESHOLD};
use liftwatch::flowsim::{generate_building, parse_spec_file, simulate};
use liftwatch::pipeline::{evaluate, expected_emissions, run, RunConfig};
use liftwatch::review::{load_exclusions, unmatched_exclusions};
use liftwatch::store::{
    ingest, read_anomalies, read_ledger, read_truth, write_anomalies, write_features_to, write_ledger, write_trip_log,
    write_truth, IngestOptions,
};
use liftwatch_server::{serve, ServeConfig, DEFAULT_PORT};

pub const TRIPS_FILE: &str = "trips.jsonl";
pub const TRUTH_FILE: &str = "truth.json";

#[derive(Debug, Parser)]
#[command(name = "liftwatch", version, about = "Elevator passenger-flow anomaly capture")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic trip log and its ground-truth sidecar.
    Simulate {
        /// Building spec (TOML).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory; receives trips.jsonl and truth.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild the per-floor flow ledger from a trip log.
    Reconstruct {
        #[arg(long)]
        trips: PathBuf,
        /// Ledger CSV to write.
        #[arg(long)]
        out: PathBuf,
        /// Matching distance threshold.
        #[arg(long, default_value_t = DEFAULT_MATCH_THRESHOLD)]
        threshold: f64,
        /// Fraction of malformed lines tolerated before giving up.
        #[arg(long, default_value_t = 0.10)]
        max_rejects: f64,
    },
    /// Run the two-round detector over one window of the ledger.
    Detect {
        #[arg(long)]
        ledger: PathBuf,
        /// Review journal; a missing file means no exclusions.
        #[arg(long)]
        exclusions: Option<PathBuf>,
        /// Last day of the window (YYYY-MM-DD).
        #[arg(long)]
        end_date: NaiveDate,
        /// Anomaly records (JSONL) to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_WINDOW_DAYS)]
        window_days: u32,
        #[arg(long, default_value_t = 0.2)]
        contamination_r1: f64,
        #[arg(long, default_value_t = 0.01)]
        contamination_r2: f64,
        #[arg(long, default_value_t = 1)]
        seed_r1: u64,
        #[arg(long, default_value_t = 2)]
        seed_r2: u64,
        #[arg(long, default_value_t = 100)]
        trees: usize,
        #[arg(long, default_value_t = 256)]
        subsample: usize,
        /// Also write the round-1 feature matrix (CSV).
        #[arg(long)]
        features_out: Option<PathBuf>,
    },
    /// Score anomaly records against a simulator sidecar.
    Evaluate {
        #[arg(long)]
        anomalies: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Serve anomaly records and accept reviews over HTTP.
    Serve {
        #[arg(long, env = "LIFTWATCH_DATA_DIR")]
        data_dir: PathBuf,
        #[arg(long, env = "LIFTWATCH_PORT", default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value_t = DEFAULT_MATCH_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = DEFAULT_WINDOW_DAYS)]
        window_days: u32,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate { spec, seed, out } => {
            let text = fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let (building, plans) = parse_spec_file(&text).with_context(|| format!("in {}", spec.display()))?;
            let people = generate_building(&building, seed)?;
            let sim = simulate(&building, &people, &plans, seed)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_trip_log(out.join(TRIPS_FILE), &sim.events)?;
            write_truth(out.join(TRUTH_FILE), &sim.truth)?;
            println!(
                "simulated {} stops, {} residents, {} planted anomalies -> {}",
                sim.events.len(),
                people.len(),
                sim.truth.planted.len(),
                out.display()
            );
        }
        Command::Reconstruct {
            trips,
            out,
            threshold,
            max_rejects,
        } => {
            let options = IngestOptions {
                max_reject_fraction: max_rejects,
                ..IngestOptions::default()
            };
            let got = ingest(&trips, &options)?;
            let ledger = reconstruct(&got.events, threshold)?;
            write_ledger(&out, &ledger)?;
            println!(
                "{} stops ({} rejected lines) -> {} floor-days in {}",
                got.events.len(),
                got.rejects.len(),
                ledger.len(),
                out.display()
            );
        }
        Command::Detect {
            ledger,
            exclusions,
            end_date,
            out,
            window_days,
            contamination_r1,
            contamination_r2,
            seed_r1,
            seed_r2,
            trees,
            subsample,
            features_out,
        } => {
            let ledger = read_ledger(&ledger)?;
            let exclusions = match &exclusions {
                Some(p) => load_exclusions(p)?,
                None => Vec::new(),
            };
            let mut config = RunConfig::new(end_date);
            config.window_days = window_days;
            config.contamination_r1 = contamination_r1;
            config.contamination_r2 = contamination_r2;
            config.forest_r1.seed = seed_r1;
            config.forest_r2.seed = seed_r2;
            for f in [&mut config.forest_r1, &mut config.forest_r2] {
                f.tree_count = trees;
                f.subsample_size = subsample;
            }
            let window = window_select(&ledger, end_date, window_days)?;
            let present = window.keys().cloned().collect();
            for e in unmatched_exclusions(&exclusions, &present) {
                eprintln!("warning: exclusion {} matches no key in the window", e.id);
            }
            let det = run(&ledger, &config, &exclusions)?;
            let expected = expected_emissions(det.round1_keys, contamination_r1, contamination_r2);
            if det.records.len() != expected {
                bail!("emitted {} records, expected {expected}", det.records.len());
            }
            write_anomalies(&out, &det.records)?;
            if let Some(path) = features_out {
                let rows: Vec<_> = window.keys().map(|k| (k.clone(), build_r1(&window, k))).collect();
                let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                write_features_to(
                    BufWriter::new(file),
                    FeatureVectorR1::column_names(),
                    rows.iter().map(|(k, f)| (k, f.values())),
                )?;
            }
            println!(
                "{} keys -> {} after round 1 -> {} records in {}",
                det.round1_keys,
                det.round2_keys,
                det.records.len(),
                out.display()
            );
        }
        Command::Evaluate { anomalies, truth } => {
            if !truth.exists() {
                bail!("ground-truth sidecar {} not found", truth.display());
            }
            let records = read_anomalies(&anomalies)?;
            let truth = read_truth(&truth)?;
            let ev = evaluate(&records, &truth);
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
            println!(
                "planted {} emitted {} hits {} recall {} precision {}",
                ev.planted,
                ev.emitted,
                ev.hits,
                fmt(ev.recall),
                fmt(ev.precision)
            );
        }
        Command::Serve {
            data_dir,
            port,
            threshold,
            window_days,
        } => {
            let config = ServeConfig {
                data_dir,
                port,
                match_threshold: threshold,
                window_days,
            };
            tokio::runtime::Runtime::new()?.block_on(serve(config))?;
        }
    }
    Ok(())
}
