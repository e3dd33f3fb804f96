//! Report types and the files written for a run.

use std::fs;
use std::io::Write;
use std::path::Path;

use metricsel::diagnostics::{self, MultiChainSummary};
use metricsel::warmup::{ChainResult, TransitionLedger, WarmupSchedule};
use metricsel::{Candidate, Metric, SelectionReport};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetInfo {
    pub name: String,
    pub dim: usize,
    pub parameters: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainReport {
    pub index: usize,
    /// Criterion of the candidate chosen in the last window; null when no
    /// window was scored or the value was not finite.
    pub final_criterion: Option<f64>,
    pub step_size: f64,
    pub metric: String,
    pub divergences: usize,
    pub warmup_divergences: usize,
    pub warmup_gradient_evaluations: u64,
    pub sampling_gradient_evaluations: u64,
    pub ledger: TransitionLedger,
    pub windows: Vec<SelectionReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub index: usize,
    pub chains: Vec<usize>,
    pub divergences: usize,
    pub summary: MultiChainSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub target: TargetInfo,
    pub adaptation: String,
    pub candidates: Vec<Candidate>,
    pub diagonal_sparsity: bool,
    pub seed: u64,
    pub chains: usize,
    pub group_size: usize,
    pub draws_per_chain: usize,
    pub schedule: WarmupSchedule,
    pub criterion_min: Option<f64>,
    pub criterion_max: Option<f64>,
    /// Chains whose final criterion is missing or not finite.
    pub criterion_missing: usize,
    pub ess_per_gradient_min: Option<f64>,
    pub ess_per_gradient_max: Option<f64>,
    pub max_group_rhat: f64,
    pub divergences: usize,
    pub warmup_divergences: usize,
    pub groups: Vec<GroupReport>,
    pub overall: MultiChainSummary,
    pub chain_reports: Vec<ChainReport>,
}

/// Wall-clock figures, kept apart from the deterministic report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub chain_sampling_seconds: Vec<f64>,
    pub total_sampling_seconds: f64,
    pub group_ess_per_second: Vec<Option<f64>>,
    pub overall_ess_per_second: Option<f64>,
}

fn metric_label(metric: &Metric) -> String {
    match metric {
        Metric::LowRank(lr) => format!("{}{}", metric.variant_name(), lr.rank()),
        other => other.variant_name().to_string(),
    }
}

fn finite_range(values: impl Iterator<Item = f64>) -> (Option<f64>, Option<f64>) {
    values.filter(|v| v.is_finite()).fold((None, None), |(lo, hi), v| {
        (Some(lo.map_or(v, |x: f64| x.min(v))), Some(hi.map_or(v, |x: f64| x.max(v))))
    })
}

pub struct RunInfo<'a> {
    pub target: TargetInfo,
    pub adaptation: String,
    pub candidates: Vec<Candidate>,
    pub diagonal_sparsity: bool,
    pub seed: u64,
    pub group_size: usize,
    pub schedule: &'a WarmupSchedule,
}

/// Summary without wall-clock figures, plus the ESS/s those would give.
fn summarize(chains: &[&ChainResult], names: &[String]) -> Result<(MultiChainSummary, Option<f64>), CliError> {
    let draws: Vec<_> = chains.iter().map(|c| &c.draws).collect();
    let grads = chains.iter().map(|c| c.sampling_gradient_evaluations).sum();
    let summary = diagnostics::summarize(&draws, names, grads, 0.0)
        .map_err(|e| CliError::Runtime(format!("diagnostics: {e}")))?;
    let secs: f64 = chains.iter().map(|c| c.sampling_seconds).sum();
    let per_second = (secs > 0.0).then(|| summary.min_ess / secs);
    Ok((summary, per_second))
}

pub fn build(info: RunInfo<'_>, results: &[ChainResult]) -> Result<(Report, Timing), CliError> {
    let names = info.target.parameters.clone();
    let all: Vec<&ChainResult> = results.iter().collect();
    let mut groups = Vec::new();
    let mut group_eps = Vec::new();
    for (g, chunk) in all.chunks(info.group_size).enumerate() {
        let first = g * info.group_size;
        let (summary, per_second) = summarize(chunk, &names)?;
        groups.push(GroupReport {
            index: g,
            chains: (first..first + chunk.len()).collect(),
            divergences: chunk.iter().map(|c| c.divergences).sum(),
            summary,
        });
        group_eps.push(per_second);
    }
    let (overall, overall_per_second) = summarize(&all, &names)?;

    let chain_reports: Vec<ChainReport> = results
        .iter()
        .enumerate()
        .map(|(k, c)| ChainReport {
            index: k,
            final_criterion: c.final_criterion.filter(|v| v.is_finite()),
            step_size: c.step_size,
            metric: metric_label(&c.metric),
            divergences: c.divergences,
            warmup_divergences: c.warmup_divergences,
            warmup_gradient_evaluations: c.warmup_gradient_evaluations,
            sampling_gradient_evaluations: c.sampling_gradient_evaluations,
            ledger: c.ledger.clone(),
            windows: c.window_reports.clone(),
        })
        .collect();

    let (criterion_min, criterion_max) = finite_range(chain_reports.iter().filter_map(|c| c.final_criterion));
    let (ess_per_gradient_min, ess_per_gradient_max) =
        finite_range(groups.iter().map(|g| g.summary.ess_per_gradient));
    let report = Report {
        target: info.target,
        adaptation: info.adaptation,
        candidates: info.candidates,
        diagonal_sparsity: info.diagonal_sparsity,
        seed: info.seed,
        chains: results.len(),
        group_size: info.group_size,
        draws_per_chain: results.first().map_or(0, |c| c.draws.nrows()),
        schedule: info.schedule.clone(),
        criterion_min,
        criterion_max,
        criterion_missing: chain_reports.iter().filter(|c| c.final_criterion.is_none()).count(),
        ess_per_gradient_min,
        ess_per_gradient_max,
        max_group_rhat: groups.iter().map(|g| g.summary.max_rhat).fold(f64::NEG_INFINITY, f64::max),
        divergences: results.iter().map(|c| c.divergences).sum(),
        warmup_divergences: results.iter().map(|c| c.warmup_divergences).sum(),
        groups,
        overall,
        chain_reports,
    };

    let chain_sampling_seconds: Vec<f64> = results.iter().map(|c| c.sampling_seconds).collect();
    let timing = Timing {
        total_sampling_seconds: chain_sampling_seconds.iter().sum(),
        chain_sampling_seconds,
        group_ess_per_second: group_eps,
        overall_ess_per_second: overall_per_second,
    };
    Ok((report, timing))
}

/// Seventeen significant digits, so repeated runs can be compared byte for byte.
pub fn format_value(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_chain_csv(path: &Path, names: &[String], chain: &ChainResult) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    w.write_record(names).map_err(|e| CliError::io(path, e))?;
    for row in chain.draws.row_iter() {
        w.write_record(row.iter().map(|&x| format_value(x))).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_summary_csv(path: &Path, summary: &MultiChainSummary) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    w.write_record(["parameter", "mean", "sd", "ess_bulk", "ess_bulk_capped", "rhat"])
        .map_err(|e| CliError::io(path, e))?;
    for p in &summary.parameters {
        let row = [p.mean, p.sd, p.ess_bulk, p.ess_bulk_capped, p.rhat].map(format_value);
        w.write_record(std::iter::once(p.name.clone()).chain(row)).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))
}
