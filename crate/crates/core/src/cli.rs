//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::engine::{emit_metrics, output::summary_row, run_strategy, write_compare_table, EngineError, PlacementCache, Strategy};
use crate::model::{load_scenario_with_overrides, trace_to_csv, Metrics, Scenario, ScenarioError, ServerId};
use crate::placement::bound::{sweep, InstanceParams};
use crate::placement::{place, placement_report, approximation_p, Limits, PlacementContext};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_BOUND: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {path}: {source}")]
    Missing {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Scenario { path: PathBuf, source: ScenarioError },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("bound violated on {0} instance(s)")]
    Bound(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Missing { .. } | CliError::Usage(_) => EXIT_USAGE,
            CliError::Scenario { .. } | CliError::Engine(EngineError::Scenario(_)) => EXIT_VALIDATION,
            CliError::Engine(EngineError::ZeroBandwidth) => EXIT_VALIDATION,
            CliError::Engine(EngineError::Io { .. }) => EXIT_IO,
            CliError::Bound(_) => EXIT_BOUND,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "edgeserve", version, about = "Edge AI inference serving simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a scenario and write metrics CSVs.
    Run {
        #[command(flatten)]
        common: Common,
        /// Handling strategy: full, round_robin, no_offload or centralized.
        #[arg(long, default_value = "full")]
        strategy: String,
    },
    /// Solve the first placement epoch and write placement_report.txt.
    Place {
        #[command(flatten)]
        common: Common,
    },
    /// Compare greedy placement against the exhaustive optimum on random
    /// small instances.
    VerifyBound {
        /// Number of instances.
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        /// First instance seed.
        #[arg(long, default_value_t = 0)]
        start: u64,
        #[arg(long, default_value_t = 4)]
        max_servers: u32,
        #[arg(long, default_value_t = 4)]
        max_services: u32,
        #[arg(long, default_value_t = 30)]
        max_requests: u32,
        /// Enumeration guard per instance.
        #[arg(long, default_value_t = 1_000_000)]
        max_configs: u64,
        /// Output directory.
        #[arg(long, env = "EDGESERVE_OUT", default_value = "out")]
        out: PathBuf,
    },
    /// Run every strategy on each scenario and write compare.csv.
    Compare {
        /// Scenario files; each becomes one workload column.
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
        /// Comma-separated run seeds; goodput is averaged over them.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// `key=value` override of a `[control]` setting (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, env = "EDGESERVE_OUT", default_value = "out")]
        out: PathBuf,
    },
    /// Expand `[[trace.generate]]` entries and write the trace as CSV.
    GenTrace {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// Scenario TOML file.
    pub scenario: PathBuf,
    /// Seed for the run and for generated workloads (default: control.seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key=value` override of a `[control]` setting (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Shorthand for `--set max_offload=N`.
    #[arg(long)]
    pub max_offload: Option<u32>,
    /// Shorthand for `--set sync_interval_ms=N`.
    #[arg(long)]
    pub sync_interval_ms: Option<u64>,
    /// Replace the scenario trace with rows from this CSV file.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "EDGESERVE_OUT", default_value = "out")]
    pub out: PathBuf,
}

fn parse_sets(set: &[String]) -> Result<Vec<(String, String)>, CliError> {
    set.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{s}`")))
        })
        .collect()
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Missing {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Scenario, CliError> {
    let text = read(path)?;
    load_scenario_with_overrides(&text, overrides).map_err(|source| CliError::Scenario {
        path: path.to_path_buf(),
        source,
    })
}

impl Common {
    fn scenario(&self) -> Result<Scenario, CliError> {
        let mut ov = parse_sets(&self.set)?;
        if let Some(s) = self.seed {
            ov.push(("seed".into(), s.to_string()));
        }
        if let Some(m) = self.max_offload {
            ov.push(("max_offload".into(), m.to_string()));
        }
        if let Some(i) = self.sync_interval_ms {
            ov.push(("sync_interval_ms".into(), i.to_string()));
        }
        let sc = load(&self.scenario, &ov)?;
        match &self.trace {
            Some(p) => sc.import_trace_csv(&read(p)?).map_err(|source| CliError::Scenario {
                path: p.clone(),
                source,
            }),
            None => Ok(sc),
        }
    }
}

fn io(path: &Path, source: std::io::Error) -> CliError {
    CliError::Engine(EngineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io(path, e))
}

fn one_line(m: &Metrics) -> String {
    format!(
        "{} satisfied {}/{} goodput {:.3}/s",
        m.strategy,
        m.satisfied,
        m.submitted,
        m.goodput()
    )
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { common, strategy } => {
            let strat = Strategy::parse(&strategy)
                .ok_or_else(|| CliError::Usage(format!("unknown strategy `{strategy}`")))?;
            let sc = common.scenario()?;
            let m = run_strategy(&sc, strat, sc.control.seed, None)?;
            emit_metrics(&m, &common.out)?;
            println!("{}", one_line(&m));
        }
        Command::Place { common } => {
            let sc = common.scenario()?;
            let window = sc.control.placement_interval_ms;
            let trace = sc.trace.iter().filter(|r| r.arrival_ms < window).cloned().collect();
            let servers: Vec<ServerId> = sc
                .servers
                .iter()
                .filter(|s| s.join_ms == 0 && s.exit_ms.is_none_or(|e| e > 0))
                .map(|s| s.id)
                .collect();
            let ctx = PlacementContext::new(&sc, trace, servers);
            let theta = place(&ctx);
            let mut text = placement_report(&sc, &theta);
            if let Ok(p) = approximation_p(&sc.services) {
                text.push_str(&format!("P {} bound {:.6}\n", p.p, p.bound()));
            }
            write(&common.out.join("placement_report.txt"), &text)?;
            print!("{text}");
        }
        Command::VerifyBound {
            seeds,
            start,
            max_servers,
            max_services,
            max_requests,
            max_configs,
            out,
        } => {
            let params = InstanceParams {
                max_servers: max_servers.clamp(2, 4),
                max_services: max_services.clamp(1, 4),
                max_requests: max_requests.clamp(1, 30),
                ..InstanceParams::default()
            };
            let results = sweep(start..start + seeds, params, Limits { max_configs });
            let mut csv = String::from("seed,servers,services,requests,p,bound,phi_sssp,phi_opt,ratio,holds\n");
            let mut min_ratio = f64::INFINITY;
            let mut violations = 0;
            let mut skipped = 0;
            for (seed, r) in &results {
                match r {
                    Ok(b) => {
                        min_ratio = min_ratio.min(b.ratio());
                        if !b.holds() {
                            violations += 1;
                        }
                        csv.push_str(&format!(
                            "{},{},{},{},{},{:.6},{},{},{:.6},{}\n",
                            b.seed,
                            b.servers,
                            b.services,
                            b.requests,
                            b.p,
                            b.bound,
                            b.phi_sssp,
                            b.phi_opt,
                            b.ratio(),
                            b.holds()
                        ));
                    }
                    Err(e) => {
                        skipped += 1;
                        eprintln!("seed {seed}: skipped ({e})");
                    }
                }
            }
            write(&out.join("bound_report.csv"), &csv)?;
            println!(
                "instances {} skipped {} min_ratio {:.6} violations {}",
                results.len() - skipped,
                skipped,
                min_ratio,
                violations
            );
            if violations > 0 {
                return Err(CliError::Bound(violations));
            }
        }
        Command::Compare { scenarios, seeds, set, out } => {
            let ov = parse_sets(&set)?;
            let mut workloads = Vec::new();
            let mut table: Vec<(String, Vec<f64>)> =
                Strategy::ALL.iter().map(|s| (s.as_str().to_string(), Vec::new())).collect();
            for path in &scenarios {
                let sc = load(path, &ov)?;
                let seeds = if seeds.is_empty() { vec![sc.control.seed] } else { seeds.clone() };
                workloads.push(
                    path.file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| path.display().to_string()),
                );
                let mut cache = PlacementCache::new();
                for (i, strat) in Strategy::ALL.iter().enumerate() {
                    let mut total = 0.0;
                    for &seed in &seeds {
                        let m = run_strategy(&sc, *strat, seed, Some(&mut cache))?;
                        log::info!("{}: {}", path.display(), summary_row(&m).join(","));
                        total += m.goodput();
                    }
                    table[i].1.push(total / seeds.len() as f64);
                }
            }
            let path = out.join("compare.csv");
            fs::create_dir_all(&out).map_err(|e| io(&out, e))?;
            write_compare_table(&path, &workloads, &table)?;
            println!("strategy,{}", workloads.join(","));
            for (name, vals) in &table {
                let v: Vec<String> = vals.iter().map(|x| format!("{x:.3}")).collect();
                println!("{name},{}", v.join(","));
            }
        }
        Command::GenTrace { common } => {
            let sc = common.scenario()?;
            let path = common.out.join("trace.csv");
            write(&path, &trace_to_csv(&sc, &sc.trace))?;
            println!("{} requests -> {}", sc.trace.len(), path.display());
        }
    }
    Ok(())
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
