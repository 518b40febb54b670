//! The `moelab` command line.
//!
//! Exit codes: `0` success, `1` usage or configuration error, `2` a check
//! failed (gradient mismatch, diverged toy fit).

pub mod config_file;
pub mod gradcheck;
pub mod toy;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::analytics::{a2a_volume_formula, analyze};
use crate::config::{ModelConfig, Variant};
use crate::ep_sim::{sweep_topk, RoutingMode, SimRecord, SimReport};
use crate::error::{Error, Result};

pub use config_file::{load_config, parse_config, set_key, KNOWN_KEYS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CHECK: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Json,
    Csv,
    #[default]
    Table,
}

#[derive(Debug, Parser)]
#[command(name = "moelab", version, about = "Fine-grained vs BigMac MoE analysis and simulation")]
pub struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Table)]
    pub format: OutputFormat,
    /// Write output here (atomically) instead of stdout.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand)]
pub enum Command {
    /// Closed-form parameter, FLOP and All-to-All accounting.
    Analyze,
    /// Simulate one layer for both variants at the configured top_k.
    Simulate(ModeArgs),
    /// Simulate both variants over a list of top_k values.
    Sweep(SweepArgs),
    /// Compare autodiff against finite differences for all variants.
    Gradcheck {
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Fit each variant to a frozen random teacher block with SGD.
    FitToy(ToyArgs),
}

#[derive(Debug, Clone, PartialEq, Args)]
pub struct ModeArgs {
    #[arg(long, default_value = "uniform_random", value_parser = parse_mode)]
    pub mode: RoutingMode,
}

#[derive(Debug, Clone, PartialEq, Args)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,6,8")]
    pub topk_list: Vec<u64>,
    #[arg(long, default_value = "uniform_random", value_parser = parse_mode)]
    pub mode: RoutingMode,
}

#[derive(Debug, Clone, PartialEq, Args)]
pub struct ToyArgs {
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long)]
    pub no_aux_loss: bool,
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
}

fn parse_mode(s: &str) -> std::result::Result<RoutingMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Analyze => "analyze",
            Command::Simulate(_) => "simulate",
            Command::Sweep(_) => "sweep",
            Command::Gradcheck { .. } => "gradcheck",
            Command::FitToy(_) => "fit-toy",
        }
    }
}

/// Everything one invocation needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub command: Command,
    pub config_path: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub seed: u64,
    pub output_path: Option<PathBuf>,
    pub output_format: OutputFormat,
}

impl From<Cli> for RunSpec {
    fn from(cli: Cli) -> Self {
        Self {
            command: cli.command,
            config_path: cli.config,
            overrides: cli.overrides,
            seed: cli.seed,
            output_path: cli.out,
            output_format: cli.format,
        }
    }
}

/// Rendered output plus the exit code it implies.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub text: String,
    pub exit_code: i32,
}

impl Outcome {
    fn ok(text: String) -> Self {
        Self { text, exit_code: EXIT_OK }
    }
}

/// Simulator row as emitted by `simulate` and `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub variant: Variant,
    pub top_k: u64,
    pub ep: u64,
    pub r: f64,
    pub mode: RoutingMode,
    pub a2a_bytes_fwd: u64,
    pub a2a_bytes_bwd: u64,
    pub a2a_latency_s: f64,
    pub compute_s: f64,
    pub total_s: f64,
    pub drops: u64,
    /// BigMac over fine-grained forward bytes at this top_k; empty if both are zero.
    pub bytes_ratio: Option<f64>,
    /// Closed-form uniform-routing forward bytes for this variant.
    pub formula_bytes_fwd: u64,
}

pub fn sim_rows(report: &SimReport, cfg: &ModelConfig) -> Vec<SimRow> {
    report
        .records
        .iter()
        .map(|rec| {
            let fg = report.find(Variant::FineGrained, rec.top_k).map(|r| r.a2a_bytes_fwd);
            let bm = report.find(Variant::BigMac, rec.top_k).map(|r| r.a2a_bytes_fwd);
            let bytes_ratio = match (fg, bm) {
                (Some(fg), Some(bm)) if fg > 0 => Some(bm as f64 / fg as f64),
                _ => None,
            };
            let point = ModelConfig {
                top_k: rec.top_k,
                ..cfg.clone()
            };
            SimRow {
                variant: rec.variant,
                top_k: rec.top_k,
                ep: rec.ep,
                r: rec.r,
                mode: rec.mode,
                a2a_bytes_fwd: rec.a2a_bytes_fwd,
                a2a_bytes_bwd: rec.a2a_bytes_bwd,
                a2a_latency_s: rec.a2a_latency_s,
                compute_s: rec.compute_s,
                total_s: rec.total_s,
                drops: rec.drops,
                bytes_ratio,
                formula_bytes_fwd: (a2a_volume_formula(&point, rec.variant) * cfg.bytes_per_element as u128) as u64,
            }
        })
        .collect()
}

/// Parses CSV emitted by `simulate` or `sweep`.
pub fn parse_sim_csv(text: &str) -> Result<Vec<SimRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn to_csv<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Usage(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn sim_table(rows: &[SimRow], records: &[SimRecord]) -> String {
    let mut out = format!(
        "{:<13}{:>6}{:>16}{:>14}{:>14}{:>14}{:>8}{:>10}{:>10}\n",
        "variant", "top_k", "a2a_bytes_fwd", "a2a_s", "compute_s", "total_s", "share", "drops", "ratio"
    );
    for (row, rec) in rows.iter().zip(records) {
        let ratio = row.bytes_ratio.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(
            out,
            "{:<13}{:>6}{:>16}{:>14.6e}{:>14.6e}{:>14.6e}{:>7.1}%{:>10}{:>10}",
            row.variant.as_str(),
            row.top_k,
            row.a2a_bytes_fwd,
            row.a2a_latency_s,
            row.compute_s,
            row.total_s,
            100.0 * rec.a2a_share(),
            row.drops,
            ratio
        );
    }
    out
}

fn emit_sim(report: &SimReport, cfg: &ModelConfig, format: OutputFormat) -> Result<String> {
    let rows = sim_rows(report, cfg);
    match format {
        OutputFormat::Csv => to_csv(&rows),
        OutputFormat::Json => to_json(&rows),
        OutputFormat::Table => Ok(sim_table(&rows, &report.records)),
    }
}

const SIM_VARIANTS: [Variant; 2] = [Variant::FineGrained, Variant::BigMac];

/// Runs one command and renders its output. Configuration problems are
/// returned as errors; failed checks come back as an [`Outcome`] with
/// exit code 2.
pub fn execute(run: &RunSpec) -> Result<Outcome> {
    let config_path = run.config_path.as_deref();
    let format = run.output_format;
    match &run.command {
        Command::Analyze => {
            let (cfg, _) = parse_config(config_path, &run.overrides)?;
            let report = analyze(&cfg)?;
            let text = match format {
                OutputFormat::Table => report.to_table(),
                OutputFormat::Csv => report.to_csv()?,
                OutputFormat::Json => to_json(&report)?,
            };
            Ok(Outcome::ok(text))
        }
        Command::Simulate(args) => {
            let (cfg, cost) = parse_config(config_path, &run.overrides)?;
            let report = sweep_topk(&cfg, &SIM_VARIANTS, &[cfg.top_k], &cost, args.mode, run.seed)?;
            Ok(Outcome::ok(emit_sim(&report, &cfg, format)?))
        }
        Command::Sweep(args) => {
            let (cfg, cost) = parse_config(config_path, &run.overrides)?;
            let report = sweep_topk(&cfg, &SIM_VARIANTS, &args.topk_list, &cost, args.mode, run.seed)?;
            Ok(Outcome::ok(emit_sim(&report, &cfg, format)?))
        }
        Command::Gradcheck { corrupt_backward } => {
            let (cfg, cost) = load_config(config_path, &run.overrides)?;
            cost.validate()?;
            let results = gradcheck::run(&cfg, run.seed, *corrupt_backward)?;
            let text = match format {
                OutputFormat::Json => to_json(&results)?,
                OutputFormat::Csv => to_csv(&results)?,
                OutputFormat::Table => {
                    let mut s = String::new();
                    for r in &results {
                        let verdict = if r.passed { "PASS" } else { "FAIL" };
                        let _ = writeln!(
                            s,
                            "{:<13} max_rel_error={:.3e} weights={:<5} {verdict}",
                            r.variant.as_str(),
                            r.max_rel_error,
                            r.weights_checked
                        );
                    }
                    s
                }
            };
            let exit_code = if results.iter().all(|r| r.passed) { EXIT_OK } else { EXIT_CHECK };
            Ok(Outcome { text, exit_code })
        }
        Command::FitToy(args) => {
            let (cfg, cost) = load_config(config_path, &run.overrides)?;
            cost.validate()?;
            let opts = toy::ToyOptions {
                steps: args.steps,
                lr: args.lr,
                samples: args.samples,
                aux_alpha: if args.no_aux_loss { None } else { toy::ToyOptions::default().aux_alpha },
                seed: run.seed,
            };
            let report = match toy::fit_toy(&cfg, &opts) {
                Ok(r) => r,
                Err(Error::Contract(msg)) => {
                    eprintln!("moelab fit-toy: {msg}");
                    return Ok(Outcome {
                        text: String::new(),
                        exit_code: EXIT_CHECK,
                    });
                }
                Err(e) => return Err(e),
            };
            let text = match format {
                OutputFormat::Csv => to_csv(&report.log)?,
                OutputFormat::Json => to_json(&report)?,
                OutputFormat::Table => {
                    let mut s = format!("{:<13}{:>8}{:>14}{:>14}{:>9}\n", "variant", "params", "initial_mse", "final_mse", "ratio");
                    for f in &report.fits {
                        let _ = writeln!(
                            s,
                            "{:<13}{:>8}{:>14.6}{:>14.6}{:>9.4}",
                            f.variant.as_str(),
                            f.params,
                            f.initial_mse,
                            f.final_mse,
                            f.final_mse / f.initial_mse
                        );
                    }
                    s
                }
            };
            Ok(Outcome::ok(text))
        }
    }
}

/// Writes via a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(text.as_bytes())?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let run = RunSpec::from(cli);
    let outcome = match execute(&run) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("moelab {}: {e}", run.command.name());
            return EXIT_USAGE;
        }
    };
    let written = match &run.output_path {
        Some(path) => write_atomic(path, &outcome.text),
        None => std::io::stdout()
            .write_all(outcome.text.as_bytes())
            .map_err(Error::from),
    };
    if let Err(e) = written {
        eprintln!("moelab {}: cannot write output: {e}", run.command.name());
        return EXIT_USAGE;
    }
    outcome.exit_code
}
