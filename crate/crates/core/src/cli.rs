//! Command-line surface: `simulate`, `plan`, `audit`, `sweep`.
//!
//! Exit codes: 0 on success, 1 on configuration or I/O errors, 2 when a
//! plan is infeasible or an audit finds violations.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use crate::constraints::OccupancyLedger;
use crate::io::{audit_csv, parse_config, to_json, write_bundle};
use crate::planner::{plan, PlanRequest, PlanStatus};
use crate::simulation::{run as run_simulation, sweep, SimConfig};
use crate::trajectory::EntryState;

#[derive(Debug, Parser)]
#[command(
    name = "cavcoord",
    version,
    about = "Intersection trajectory planning and simulation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a simulation and write its output files.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Plan one vehicle and print the result as JSON.
    Plan {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        path: u32,
        #[arg(long, allow_hyphen_values = true)]
        t0: f64,
        #[arg(long)]
        v0: f64,
        /// Ledger of already committed vehicles (ledger.json of a run).
        #[arg(long)]
        occupancy: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        vehicle_id: u64,
    },
    /// Re-check an exported trajectory CSV.
    Audit {
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Run every (rate, seed) combination.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        rates: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn load_config(path: &Path) -> Result<SimConfig> {
    let text = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    parse_config(&text).with_context(|| format!("config {}", path.display()))
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Simulate {
            config,
            out_dir,
            seed,
        } => {
            let mut config = load_config(&config)?;
            if let Some(seed) = seed {
                config.rng_seed = seed;
            }
            let outcome = run_simulation(&config)?;
            write_bundle(&out_dir, &config, &outcome)
                .with_context(|| format!("writing {}", out_dir.display()))?;
            let m = &outcome.metrics;
            eprintln!(
                "{} vehicles: {} cubic, {} fallback, {} rejected; {} violations",
                m.vehicles_total,
                m.vehicles_cubic,
                m.vehicles_fallback,
                m.vehicles_rejected,
                m.audit_violations
            );
            Ok(if m.audit_violations == 0 { 0 } else { 2 })
        }
        Command::Plan {
            config,
            path,
            t0,
            v0,
            occupancy,
            vehicle_id,
        } => {
            let config = load_config(&config)?;
            let mut ledger: OccupancyLedger = match occupancy {
                Some(f) => {
                    let text = fs::read_to_string(&f)
                        .with_context(|| format!("reading {}", f.display()))?;
                    serde_json::from_str(&text)
                        .with_context(|| format!("ledger {}", f.display()))?
                }
                None => OccupancyLedger::new(),
            };
            let req = PlanRequest {
                vehicle_id,
                path_id: path,
                entry: EntryState { t0, p0: 0.0, v0 },
                limits: config.limits,
                params: config.params,
            };
            let result = plan(&req, &mut ledger, &config.layout, &config.planner)?;
            print!("{}", to_json(&result));
            Ok(if result.status == PlanStatus::Infeasible {
                2
            } else {
                0
            })
        }
        Command::Audit {
            trajectories,
            config,
        } => {
            let config = load_config(&config)?;
            let text = fs::read_to_string(&trajectories)
                .with_context(|| format!("reading {}", trajectories.display()))?;
            let violations = audit_csv(&text, &config)?;
            print!("{}", to_json(&violations));
            Ok(if violations.is_empty() { 0 } else { 2 })
        }
        Command::Sweep {
            config,
            rates,
            seeds,
            out_dir,
        } => {
            let config = load_config(&config)?;
            let rows = sweep(&config, &rates, &seeds)?;
            fs::create_dir_all(&out_dir)
                .with_context(|| format!("creating {}", out_dir.display()))?;
            let mut table = csv::Writer::from_writer(Vec::new());
            table.write_record([
                "rate",
                "seed",
                "vehicles_total",
                "vehicles_cubic",
                "vehicles_fallback",
                "vehicles_rejected",
                "mean_travel_time",
                "max_travel_time",
                "mean_energy",
                "mean_jerk",
                "audit_violations",
            ])?;
            for row in &rows {
                let m = &row.metrics;
                let name = format!("metrics_rate{}_seed{}.json", row.rate, row.seed);
                fs::write(out_dir.join(name), to_json(m))?;
                table.write_record([
                    format!("{:.6}", row.rate),
                    row.seed.to_string(),
                    m.vehicles_total.to_string(),
                    m.vehicles_cubic.to_string(),
                    m.vehicles_fallback.to_string(),
                    m.vehicles_rejected.to_string(),
                    format!("{:.6}", m.mean_travel_time),
                    format!("{:.6}", m.max_travel_time),
                    format!("{:.6}", m.mean_energy),
                    format!("{:.6}", m.mean_jerk),
                    m.audit_violations.to_string(),
                ])?;
            }
            fs::write(out_dir.join("sweep.csv"), table.into_inner()?)?;
            let dirty = rows.iter().any(|r| r.metrics.audit_violations > 0);
            Ok(if dirty { 2 } else { 0 })
        }
    }
}
