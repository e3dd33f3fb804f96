//! Run configuration: a TOML file, `key=value` overrides, and defaults.

use std::path::{Path, PathBuf};

use metricsel::criterion::SelectionOptions;
use metricsel::targets::{Funnel, Gaussian, Regression, TargetDensity};
use metricsel::warmup::{AdaptationConfig, AdaptationMode, WarmupSchedule};
use metricsel::{Candidate, CandidateSet};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    StandardNormal {
        dim: usize,
    },
    Gaussian {
        mean: Vec<f64>,
        /// Rows of the covariance matrix.
        covariance: Vec<Vec<f64>>,
    },
    /// Equicorrelated Gaussian with unit variances.
    Correlated {
        dim: usize,
        rho: f64,
    },
    /// Gaussian with a few leading eigenvalues along random directions.
    Spiked {
        dim: usize,
        leading: Vec<f64>,
        #[serde(default = "one")]
        rest: f64,
        /// Put the spectrum on the precision instead of the covariance.
        #[serde(default)]
        on_precision: bool,
        #[serde(default)]
        seed: u64,
    },
    Regression {
        /// Two-column `x,y` file; a synthetic series is used when absent.
        #[serde(default)]
        csv: Option<PathBuf>,
        #[serde(default = "default_regression_n")]
        n: usize,
        #[serde(default = "default_x_start")]
        x_start: f64,
        #[serde(default)]
        intercept: f64,
        #[serde(default = "default_slope")]
        slope: f64,
        #[serde(default = "one")]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    Funnel {
        dim: usize,
        #[serde(default = "default_funnel_scale")]
        scale: f64,
    },
}

fn one() -> f64 {
    1.0
}
fn default_regression_n() -> usize {
    50
}
fn default_x_start() -> f64 {
    1970.0
}
fn default_slope() -> f64 {
    0.02
}
fn default_funnel_scale() -> f64 {
    3.0
}

impl TargetSpec {
    pub fn build(&self, base_dir: &Path) -> Result<Box<dyn TargetDensity>, CliError> {
        let cfg = |e: metricsel::Error| CliError::Config(format!("target: {e}"));
        Ok(match self {
            TargetSpec::StandardNormal { dim } => {
                if *dim == 0 {
                    return Err(CliError::Config("target: dim must be at least 1".into()));
                }
                Box::new(Gaussian::standard(*dim))
            }
            TargetSpec::Gaussian { mean, covariance } => {
                let d = mean.len();
                if covariance.len() != d || covariance.iter().any(|r| r.len() != d) {
                    return Err(CliError::Config(format!("target: covariance must be {d}x{d}")));
                }
                let cov = DMatrix::from_fn(d, d, |i, j| covariance[i][j]);
                Box::new(Gaussian::new("gaussian", DVector::from_vec(mean.clone()), cov).map_err(cfg)?)
            }
            TargetSpec::Correlated { dim, rho } => Box::new(Gaussian::equicorrelated(*dim, *rho).map_err(cfg)?),
            TargetSpec::Spiked { dim, leading, rest, on_precision, seed } => {
                Box::new(Gaussian::spiked(*dim, leading, *rest, *on_precision, *seed).map_err(cfg)?)
            }
            TargetSpec::Regression { csv: Some(path), .. } => {
                let path = if path.is_absolute() { path.clone() } else { base_dir.join(path) };
                Box::new(Regression::from_csv(&path, 1000.0, 10.0, 5.0).map_err(cfg)?)
            }
            TargetSpec::Regression { csv: None, n, x_start, intercept, slope, noise, seed } => {
                Box::new(Regression::synthetic(*n, *x_start, *intercept, *slope, *noise, *seed).map_err(cfg)?)
            }
            TargetSpec::Funnel { dim, scale } => Box::new(Funnel::new(*dim, *scale).map_err(cfg)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationSpec {
    /// `switching` or a single candidate name such as `dense` or `lowrank4+wishart`.
    #[serde(default = "default_mode")]
    pub mode: String,
    /// Candidate set for switching mode; the full default set when absent.
    #[serde(default)]
    pub candidates: Option<Vec<String>>,
    #[serde(default)]
    pub diagonal_sparsity: bool,
    #[serde(default = "default_eval_points")]
    pub eval_points: usize,
    #[serde(default)]
    pub nu0: Option<f64>,
    #[serde(default = "default_max_depth")]
    pub max_depth: u32,
}

fn default_mode() -> String {
    "switching".into()
}
fn default_eval_points() -> usize {
    5
}
fn default_max_depth() -> u32 {
    10
}

impl Default for AdaptationSpec {
    fn default() -> Self {
        Self {
            mode: default_mode(),
            candidates: None,
            diagonal_sparsity: false,
            eval_points: default_eval_points(),
            nu0: None,
            max_depth: default_max_depth(),
        }
    }
}

pub const MODE_NAMES: &str = "switching, diagonal, dense, lowrank<K>, lowrank<K>+wishart";

pub fn parse_mode(mode: &str, candidates: Option<&[String]>) -> Result<AdaptationMode, CliError> {
    let parse = |s: &str| {
        s.parse::<Candidate>()
            .map_err(|_| CliError::Config(format!("unknown adaptation {s:?}; valid options: {MODE_NAMES}")))
    };
    if mode == "switching" {
        let set = match candidates {
            None => CandidateSet::switching_default(),
            Some(names) => {
                let list = names.iter().map(|n| parse(n)).collect::<Result<Vec<_>, _>>()?;
                CandidateSet::new(list).map_err(|e| CliError::Config(format!("candidates: {e}")))?
            }
        };
        Ok(AdaptationMode::Switching(set))
    } else {
        if candidates.is_some() {
            return Err(CliError::Config("candidates may only be given in switching mode".into()));
        }
        Ok(AdaptationMode::Fixed(parse(mode)?))
    }
}

impl AdaptationSpec {
    pub fn to_config(&self, schedule: &WarmupSchedule) -> Result<AdaptationConfig, CliError> {
        let mode = parse_mode(&self.mode, self.candidates.as_deref())?;
        if self.eval_points == 0 {
            return Err(CliError::Config("adaptation.eval_points must be at least 1".into()));
        }
        let config = AdaptationConfig {
            schedule: schedule.clone(),
            mode,
            selection: SelectionOptions {
                eval_points: self.eval_points,
                nu0: self.nu0,
                diagonal_sparsity: self.diagonal_sparsity,
            },
            max_depth: self.max_depth,
        };
        config.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSpec {
    /// Adaptation modes to run against the target.
    #[serde(default = "default_compare_modes")]
    pub modes: Vec<String>,
    /// Diagonal-sparsity settings crossed with every mode.
    #[serde(default = "default_sparsity")]
    pub diagonal_sparsity: Vec<bool>,
}

fn default_compare_modes() -> Vec<String> {
    ["diagonal", "dense", "lowrank4", "lowrank4+wishart", "switching"].map(String::from).to_vec()
}
fn default_sparsity() -> Vec<bool> {
    vec![false]
}

impl Default for CompareSpec {
    fn default() -> Self {
        Self { modes: default_compare_modes(), diagonal_sparsity: default_sparsity() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShortWarmupSpec {
    #[serde(default = "default_short_window")]
    pub window: usize,
    #[serde(default = "default_ranks")]
    pub ranks: Vec<usize>,
    /// Also run the diagonal and dense baselines.
    #[serde(default = "yes")]
    pub baselines: bool,
}

fn default_short_window() -> usize {
    100
}
fn default_ranks() -> Vec<usize> {
    vec![1, 2, 4, 8]
}
fn yes() -> bool {
    true
}

impl Default for ShortWarmupSpec {
    fn default() -> Self {
        Self { window: default_short_window(), ranks: default_ranks(), baselines: true }
    }
}

impl ShortWarmupSpec {
    pub fn modes(&self) -> Vec<String> {
        let mut modes = Vec::new();
        if self.baselines {
            modes.push("diagonal".to_string());
            modes.push("dense".to_string());
        }
        for blend in [false, true] {
            for k in &self.ranks {
                modes.push(Candidate::LowRank { rank: *k, blend }.to_string());
            }
        }
        modes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub target: TargetSpec,
    #[serde(default)]
    pub adaptation: AdaptationSpec,
    #[serde(default)]
    pub warmup: WarmupSchedule,
    /// Total chains; defaults to `group_size * groups`.
    #[serde(default)]
    pub chains: Option<usize>,
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    #[serde(default = "default_groups")]
    pub groups: usize,
    /// Post-warmup draws per chain.
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub compare: CompareSpec,
    #[serde(default)]
    pub short_warmup: ShortWarmupSpec,
}

fn default_group_size() -> usize {
    4
}
fn default_groups() -> usize {
    8
}
fn default_draws() -> usize {
    1000
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn chain_count(&self) -> usize {
        self.chains.unwrap_or(self.group_size * self.groups)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.group_size == 0 || self.groups == 0 {
            return Err(CliError::Config("group_size and groups must be at least 1".into()));
        }
        let chains = self.chain_count();
        if chains != self.group_size * self.groups {
            return Err(CliError::Config(format!(
                "chains ({chains}) must equal group_size ({}) x groups ({})",
                self.group_size, self.groups
            )));
        }
        if self.draws < 8 {
            return Err(CliError::Config("draws must be at least 8 for diagnostics".into()));
        }
        Ok(())
    }
}

/// Splits `key=value` and parses the value as a TOML value, falling back to
/// a bare string.
fn parse_override(raw: &str) -> Result<(Vec<String>, Value), CliError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {raw:?} is not of the form key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(|s| s.trim().to_string()).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override {raw:?} has an empty key")));
    }
    let value = value.trim();
    let parsed = format!("v = {value}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()));
    Ok((path, parsed))
}

fn apply_override(table: &mut Table, path: &[String], value: Value) -> Result<(), CliError> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override path {:?}: {p} is not a table", path.join("."))))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Merges the optional file with overrides and deserializes the result.
pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
            text.parse::<Table>().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => Table::new(),
    };
    for raw in overrides {
        let (path, value) = parse_override(raw)?;
        apply_override(&mut table, &path, value)?;
    }
    if !table.contains_key("target") {
        return Err(CliError::Config("no [target] given (use --config or target.kind=...)".into()));
    }
    let config: RunConfig = Value::Table(table).try_into().map_err(|e: toml::de::Error| {
        CliError::Config(e.to_string().trim().to_string())
    })?;
    config.validate()?;
    Ok(config)
}
