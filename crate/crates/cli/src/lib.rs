//! Command-line benchmark harness around the `metricsel` sampler.
//!
//! Three subcommands share one configuration format:
//! `sample` runs one adaptation, `compare` runs several adaptations on one
//! target, and `short-warmup` sweeps low-rank variants under a one-window
//! warmup.

pub mod config;
pub mod report;

use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use metricsel::warmup::{run_chain, ChainResult, WarmupSchedule};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::report::{Report, RunInfo, TargetInfo};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn io(path: &Path, e: impl Display) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "metricsel", version, about = "HMC benchmark harness with warmup metric selection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base seed; chain k uses stream k of this seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for chains (default: available parallelism).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Configuration overrides such as `draws=500` or `target.dim=10`.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every chain of one configuration.
    Sample(CommonArgs),
    /// Run each adaptation mode in `[compare]` against the same target.
    Compare(CommonArgs),
    /// Sweep low-rank ranks with and without the Wishart blend under a
    /// one-window warmup.
    ShortWarmup(CommonArgs),
}

impl CommonArgs {
    pub fn load(&self) -> Result<RunConfig, CliError> {
        let mut config = config::load(self.config.as_deref(), &self.overrides)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(output) = &self.output {
            config.output = output.clone();
        }
        Ok(config)
    }

    fn base_dir(&self) -> PathBuf {
        self.config
            .as_deref()
            .and_then(Path::parent)
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    }

    fn pool(&self) -> Result<rayon::ThreadPool, CliError> {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = self.threads {
            if n == 0 {
                return Err(CliError::Config("--threads must be at least 1".into()));
            }
            builder = builder.num_threads(n);
        }
        builder.build().map_err(|e| CliError::Runtime(format!("thread pool: {e}")))
    }
}

/// Generator for chain `k`: the run seed with stream `k`.
pub fn chain_rng(seed: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    rng
}

/// Runs all chains of `config` and writes its artifacts into `config.output`.
pub fn run_benchmark(config: &RunConfig, base_dir: &Path, pool: &rayon::ThreadPool) -> Result<Report, CliError> {
    config.validate()?;
    let target = config.target.build(base_dir)?;
    let adaptation = config.adaptation.to_config(&config.warmup)?;
    let chains = config.chain_count();

    let results: Vec<Result<ChainResult, metricsel::Error>> = pool.install(|| {
        (0..chains)
            .into_par_iter()
            .map(|k| run_chain(target.as_ref(), &adaptation, config.draws, &mut chain_rng(config.seed, k)))
            .collect()
    });
    let mut failures = Vec::new();
    let mut ok = Vec::with_capacity(chains);
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Ok(c) => ok.push(c),
            Err(e) => failures.push(format!("chain {k}: {e}")),
        }
    }
    if !failures.is_empty() {
        return Err(CliError::Runtime(failures.join("\n")));
    }

    let names = target.parameter_names();
    let info = RunInfo {
        target: TargetInfo { name: target.name().to_string(), dim: target.dim(), parameters: names.clone() },
        adaptation: adaptation.mode.label(),
        candidates: adaptation.mode.candidates().as_slice().to_vec(),
        diagonal_sparsity: adaptation.selection.diagonal_sparsity,
        seed: config.seed,
        group_size: config.group_size,
        schedule: &config.warmup,
    };
    let (report, timing) = report::build(info, &ok)?;

    let out = &config.output;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    for (k, chain) in ok.iter().enumerate() {
        report::write_chain_csv(&out.join(format!("chain_{k}.csv")), &names, chain)?;
    }
    report::write_json(&out.join("report.json"), &report)?;
    report::write_summary_csv(&out.join("summary.csv"), &report.overall)?;
    report::write_json(&out.join("timing.json"), &timing)?;
    Ok(report)
}

/// One row of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub mode: String,
    pub diagonal_sparsity: bool,
    pub directory: String,
    pub criterion_min: Option<f64>,
    pub criterion_max: Option<f64>,
    pub ess_per_gradient_min: Option<f64>,
    pub ess_per_gradient_max: Option<f64>,
    pub max_group_rhat: Option<f64>,
    pub divergences: Option<usize>,
    pub error: Option<String>,
}

fn run_modes(
    base: &RunConfig,
    modes: &[String],
    sparsity: &[bool],
    base_dir: &Path,
    pool: &rayon::ThreadPool,
) -> Result<Vec<CompareRow>, CliError> {
    if modes.is_empty() || sparsity.is_empty() {
        return Err(CliError::Config("nothing to compare: empty mode or sparsity list".into()));
    }
    // Validate every combination before spending time on any of them.
    for mode in modes {
        config::parse_mode(mode, if mode == "switching" { base.adaptation.candidates.as_deref() } else { None })?;
    }
    let mut rows = Vec::new();
    for mode in modes {
        for &sparse in sparsity {
            let directory = if sparse { format!("{mode}-diagonal") } else { mode.clone() };
            let mut config = base.clone();
            config.adaptation.mode = mode.clone();
            if mode != "switching" {
                config.adaptation.candidates = None;
            }
            config.adaptation.diagonal_sparsity = sparse;
            config.output = base.output.join(&directory);
            eprintln!("running {directory}");
            let row = match run_benchmark(&config, base_dir, pool) {
                Ok(r) => CompareRow {
                    mode: mode.clone(),
                    diagonal_sparsity: sparse,
                    directory,
                    criterion_min: r.criterion_min,
                    criterion_max: r.criterion_max,
                    ess_per_gradient_min: r.ess_per_gradient_min,
                    ess_per_gradient_max: r.ess_per_gradient_max,
                    max_group_rhat: Some(r.max_group_rhat),
                    divergences: Some(r.divergences),
                    error: None,
                },
                Err(e @ CliError::Config(_)) => return Err(e),
                Err(e) => CompareRow {
                    mode: mode.clone(),
                    diagonal_sparsity: sparse,
                    directory,
                    criterion_min: None,
                    criterion_max: None,
                    ess_per_gradient_min: None,
                    ess_per_gradient_max: None,
                    max_group_rhat: None,
                    divergences: None,
                    error: Some(e.to_string()),
                },
            };
            rows.push(row);
        }
    }
    write_compare(&base.output, &rows)?;
    Ok(rows)
}

fn write_compare(out: &Path, rows: &[CompareRow]) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    report::write_json(&out.join("compare.json"), &rows)?;
    let path = out.join("compare.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::io(&path, e))?;
    w.write_record([
        "mode",
        "diagonal_sparsity",
        "crit_min",
        "crit_max",
        "ess_per_grad_min",
        "ess_per_grad_max",
        "max_rhat",
        "divergences",
        "error",
    ])
    .map_err(|e| CliError::io(&path, e))?;
    let opt = |v: Option<f64>| v.map(report::format_value).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.mode.clone(),
            r.diagonal_sparsity.to_string(),
            opt(r.criterion_min),
            opt(r.criterion_max),
            opt(r.ess_per_gradient_min),
            opt(r.ess_per_gradient_max),
            opt(r.max_group_rhat),
            r.divergences.map(|d| d.to_string()).unwrap_or_default(),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(|e| CliError::io(&path, e))?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))
}

fn print_rows(rows: &[CompareRow]) {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    println!("{:<24} {:>10} {:>10} {:>12} {:>12} {:>8} {:>6}", "mode", "crit_min", "crit_max", "ess/grad_lo", "ess/grad_hi", "rhat", "div");
    for r in rows {
        let name = if r.diagonal_sparsity { format!("{} (diag)", r.mode) } else { r.mode.clone() };
        println!(
            "{:<24} {:>10} {:>10} {:>12} {:>12} {:>8} {:>6}",
            name,
            fmt(r.criterion_min),
            fmt(r.criterion_max),
            fmt(r.ess_per_gradient_min),
            fmt(r.ess_per_gradient_max),
            fmt(r.max_group_rhat),
            r.divergences.map_or_else(|| "-".to_string(), |d| d.to_string())
        );
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Sample(args) => {
            let config = args.load()?;
            let pool = args.pool()?;
            let report = run_benchmark(&config, &args.base_dir(), &pool)?;
            let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
            println!(
                "{} chains on {}: crit [{}, {}], ess/grad [{}, {}], max rhat {:.4}, divergences {}",
                report.chains,
                report.target.name,
                fmt(report.criterion_min),
                fmt(report.criterion_max),
                fmt(report.ess_per_gradient_min),
                fmt(report.ess_per_gradient_max),
                report.max_group_rhat,
                report.divergences
            );
            println!("wrote {}", config.output.display());
            Ok(())
        }
        Command::Compare(args) => {
            let config = args.load()?;
            let pool = args.pool()?;
            let rows =
                run_modes(&config, &config.compare.modes, &config.compare.diagonal_sparsity, &args.base_dir(), &pool)?;
            print_rows(&rows);
            finish(&rows)
        }
        Command::ShortWarmup(args) => {
            let mut config = args.load()?;
            let pool = args.pool()?;
            config.warmup = WarmupSchedule { windows: vec![config.short_warmup.window], ..config.warmup.clone() };
            let modes = config.short_warmup.modes();
            let rows = run_modes(&config, &modes, &[config.adaptation.diagonal_sparsity], &args.base_dir(), &pool)?;
            print_rows(&rows);
            finish(&rows)
        }
    }
}

fn finish(rows: &[CompareRow]) -> Result<(), CliError> {
    let failed: Vec<String> = rows.iter().filter_map(|r| r.error.as_ref().map(|e| format!("{}: {e}", r.directory))).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(failed.join("\n")))
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
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
