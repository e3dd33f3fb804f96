//! Staged warmup and full chain runs.
//!
//! Warmup has three phases: initialization draws under the identity metric,
//! a sequence of growing windows after each of which the metric is rebuilt
//! (and, when switching, re-selected), and a final phase that tunes only the
//! step size.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::criterion::{self, Candidate, CandidateSet, SelectionOptions, SelectionReport};
use crate::error::{invalid, Error, Result};
use crate::metrics::Metric;
use crate::sampler::{self, Point, StepSizeAdapter, TransitionStats};
use crate::targets::{CountingTarget, TargetDensity};

/// Smallest window on which candidates can be compared.
pub const MIN_SELECTION_WINDOW: usize = 10;
/// Attempts at phase 1 before the chain is abandoned.
pub const MAX_INIT_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarmupSchedule {
    pub init: usize,
    pub windows: Vec<usize>,
    #[serde(rename = "final")]
    pub final_draws: usize,
}

impl Default for WarmupSchedule {
    fn default() -> Self {
        Self { init: 75, windows: vec![25, 50, 100, 200, 500], final_draws: 50 }
    }
}

impl WarmupSchedule {
    /// One adaptation window between the usual initialization and final phases.
    pub fn short(window: usize) -> Self {
        Self { init: 75, windows: vec![window], final_draws: 50 }
    }

    pub fn total(&self) -> usize {
        self.init + self.windows.iter().sum::<usize>() + self.final_draws
    }

    pub fn validate(&self, selection: bool) -> Result<()> {
        if self.init == 0 || self.final_draws == 0 {
            return Err(invalid("init and final draw counts must be at least 1"));
        }
        if self.windows.is_empty() {
            return Err(invalid("at least one adaptation window is required"));
        }
        for &w in &self.windows {
            if w == 0 {
                return Err(invalid("window sizes must be at least 1"));
            }
            if selection && w < MIN_SELECTION_WINDOW {
                return Err(invalid(format!(
                    "window of {w} draws is too short for selection (need {MIN_SELECTION_WINDOW})"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdaptationMode {
    Fixed(Candidate),
    Switching(CandidateSet),
}

impl AdaptationMode {
    pub fn candidates(&self) -> CandidateSet {
        match self {
            AdaptationMode::Fixed(c) => CandidateSet::single(*c),
            AdaptationMode::Switching(set) => set.clone(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            AdaptationMode::Fixed(c) => c.to_string(),
            AdaptationMode::Switching(_) => "switching".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationConfig {
    pub schedule: WarmupSchedule,
    pub mode: AdaptationMode,
    pub selection: SelectionOptions,
    pub max_depth: u32,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            schedule: WarmupSchedule::default(),
            mode: AdaptationMode::Switching(CandidateSet::switching_default()),
            selection: SelectionOptions::default(),
            max_depth: 10,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate(matches!(self.mode, AdaptationMode::Switching(_)))?;
        if self.max_depth == 0 {
            return Err(invalid("max_depth must be at least 1"));
        }
        Ok(())
    }
}

/// Per-phase transition and gradient counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionLedger {
    pub init_attempts: usize,
    pub init_transitions: usize,
    pub window_transitions: Vec<usize>,
    pub final_transitions: usize,
    pub sampling_transitions: usize,
    /// Gradients spent inside leapfrog steps during warmup transitions.
    pub warmup_leapfrog_gradients: u64,
    /// Gradients spent outside transitions: starting points and step searches.
    pub setup_gradients: u64,
    /// Gradients spent by metric construction and criterion evaluation.
    pub selection_gradients: u64,
    pub sampling_leapfrog_gradients: u64,
}

impl TransitionLedger {
    pub fn warmup_transitions(&self) -> usize {
        self.init_transitions + self.window_transitions.iter().sum::<usize>() + self.final_transitions
    }

    pub fn warmup_gradients(&self) -> u64 {
        self.warmup_leapfrog_gradients + self.setup_gradients + self.selection_gradients
    }
}

#[derive(Debug, Clone)]
pub struct WarmupResult {
    pub metric: Metric,
    pub step_size: f64,
    /// Last warmup position, from which sampling continues.
    pub position: Point,
    /// Every warmup draw of the successful attempt, in order.
    pub draws: DMatrix<f64>,
    pub window_reports: Vec<SelectionReport>,
    /// Metric in force after each window.
    pub window_metrics: Vec<Metric>,
    pub stats: Vec<TransitionStats>,
    pub ledger: TransitionLedger,
}

impl WarmupResult {
    /// Criterion of the candidate chosen in the last window, if selection ran.
    pub fn final_criterion(&self) -> Option<f64> {
        self.window_reports.last().map(|r| r.chosen_criterion)
    }
}

struct Phase<'a, R: Rng> {
    target: &'a dyn TargetDensity,
    max_depth: u32,
    rng: &'a mut R,
    draws: Vec<DVector<f64>>,
    stats: Vec<TransitionStats>,
    ledger: TransitionLedger,
}

impl<R: Rng> Phase<'_, R> {
    fn run(&mut self, metric: &Metric, point: &mut Point, adapter: &mut StepSizeAdapter, count: usize) -> Result<()> {
        for _ in 0..count {
            let (next, stats) = sampler::hmc_transition(self.target, metric, point, adapter.current(), self.max_depth, self.rng)?;
            adapter.adapt(stats.accept_stat);
            self.ledger.warmup_leapfrog_gradients += stats.gradient_evaluations;
            *point = next;
            self.draws.push(point.q.clone());
            self.stats.push(stats);
        }
        Ok(())
    }

    fn start(&mut self, q: DVector<f64>) -> Point {
        self.ledger.setup_gradients += 1;
        Point::new(self.target, q)
    }

    fn find_step(&mut self, metric: &Metric, point: &Point, initial: f64) -> Result<f64> {
        let (eps, evals) = sampler::find_reasonable_step(self.target, metric, point, initial, self.rng)?;
        self.ledger.setup_gradients += evals;
        Ok(eps)
    }
}

fn stack_rows(rows: &[DVector<f64>], d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
}

/// Runs the full warmup from `q_init`.
pub fn run_warmup(
    target: &dyn TargetDensity,
    config: &AdaptationConfig,
    q_init: &DVector<f64>,
    rng: &mut impl Rng,
) -> Result<WarmupResult> {
    config.validate()?;
    let d = target.dim();
    if q_init.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: q_init.len() });
    }
    if q_init.iter().any(|x| !x.is_finite()) {
        return Err(invalid("initial position is not finite"));
    }
    let schedule = &config.schedule;
    let mut phase = Phase {
        target,
        max_depth: config.max_depth,
        rng,
        draws: Vec::with_capacity(schedule.total()),
        stats: Vec::with_capacity(schedule.total()),
        ledger: TransitionLedger::default(),
    };

    // Phase 1: identity metric, jittered restarts on failure.
    let mut metric = Metric::identity(d);
    let mut last_error = String::new();
    let mut started = None;
    for attempt in 0..MAX_INIT_ATTEMPTS {
        phase.ledger.init_attempts += 1;
        let q = if attempt == 0 {
            q_init.clone()
        } else {
            q_init.map(|x| x + phase.rng.random_range(-1.0..1.0))
        };
        phase.draws.clear();
        phase.stats.clear();
        let mut point = phase.start(q);
        if !point.is_finite() {
            last_error = "log density or gradient not finite at the starting point".into();
            continue;
        }
        let eps = match phase.find_step(&metric, &point, 1.0) {
            Ok(eps) => eps,
            Err(e) => {
                last_error = e.to_string();
                continue;
            }
        };
        let mut adapter = StepSizeAdapter::new(eps);
        if let Err(e) = phase.run(&metric, &mut point, &mut adapter, schedule.init) {
            last_error = e.to_string();
            continue;
        }
        if !point.is_finite() {
            last_error = "trajectory reached a non-finite state".into();
            continue;
        }
        started = Some((point, adapter));
        break;
    }
    let (mut point, mut adapter) = started.ok_or_else(|| {
        Error::ChainAborted(format!("initialization failed after {MAX_INIT_ATTEMPTS} attempts: {last_error}"))
    })?;
    phase.ledger.init_transitions = schedule.init;

    // Phase 2: windows.
    let candidates = config.mode.candidates();
    let mut reports = Vec::with_capacity(schedule.windows.len());
    let mut window_metrics = Vec::with_capacity(schedule.windows.len());
    for (w, &size) in schedule.windows.iter().enumerate() {
        let begin = phase.draws.len();
        phase.run(&metric, &mut point, &mut adapter, size)?;
        phase.ledger.window_transitions.push(size);
        let window = stack_rows(&phase.draws[begin..], d);

        let counting = CountingTarget::new(target);
        metric = match &config.mode {
            AdaptationMode::Fixed(c) if size < MIN_SELECTION_WINDOW => {
                criterion::build_candidate(*c, &counting, &window, &config.selection, phase.rng)?.metric
            }
            _ => {
                let (m, report) =
                    criterion::evaluate_and_select(&window, &candidates, &counting, w, &config.selection, phase.rng)?;
                reports.push(report);
                m
            }
        };
        phase.ledger.selection_gradients += counting.gradient_evaluations();
        window_metrics.push(metric.clone());

        let eps = phase.find_step(&metric, &point, adapter.current())?;
        adapter.restart(eps);
    }

    // Phase 3: step size only.
    phase.run(&metric, &mut point, &mut adapter, schedule.final_draws)?;
    phase.ledger.final_transitions = schedule.final_draws;

    let draws = stack_rows(&phase.draws, d);
    Ok(WarmupResult {
        metric,
        step_size: adapter.averaged(),
        position: point,
        draws,
        window_reports: reports,
        window_metrics,
        stats: phase.stats,
        ledger: phase.ledger,
    })
}

#[derive(Debug, Clone)]
pub struct ChainResult {
    /// Post-warmup draws, one row per draw.
    pub draws: DMatrix<f64>,
    pub stats: Vec<TransitionStats>,
    pub divergences: usize,
    pub warmup_divergences: usize,
    pub warmup_gradient_evaluations: u64,
    pub sampling_gradient_evaluations: u64,
    pub sampling_seconds: f64,
    pub metric: Metric,
    pub step_size: f64,
    pub window_reports: Vec<SelectionReport>,
    pub final_criterion: Option<f64>,
    pub ledger: TransitionLedger,
}

/// Runs warmup from a uniform(-2, 2) start, then `sampling_draws`
/// transitions with the metric and step size frozen.
pub fn run_chain(
    target: &dyn TargetDensity,
    config: &AdaptationConfig,
    sampling_draws: usize,
    rng: &mut impl Rng,
) -> Result<ChainResult> {
    if sampling_draws == 0 {
        return Err(invalid("at least one post-warmup draw is required"));
    }
    let d = target.dim();
    let q_init = DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
    let counting = CountingTarget::new(target);
    let warm = run_warmup(&counting, config, &q_init, rng)?;
    let warmup_gradient_evaluations = counting.gradient_evaluations();
    let warmup_divergences = warm.stats.iter().filter(|s| s.divergent).count();

    let mut ledger = warm.ledger;
    let mut point = warm.position;
    let mut draws = DMatrix::zeros(sampling_draws, d);
    let mut stats = Vec::with_capacity(sampling_draws);
    let clock = Instant::now();
    for i in 0..sampling_draws {
        let (next, s) = sampler::hmc_transition(&counting, &warm.metric, &point, warm.step_size, config.max_depth, rng)?;
        point = next;
        draws.row_mut(i).copy_from(&point.q.transpose());
        ledger.sampling_leapfrog_gradients += s.gradient_evaluations;
        stats.push(s);
    }
    let sampling_seconds = clock.elapsed().as_secs_f64();
    ledger.sampling_transitions = sampling_draws;

    Ok(ChainResult {
        draws,
        divergences: stats.iter().filter(|s| s.divergent).count(),
        stats,
        warmup_divergences,
        warmup_gradient_evaluations,
        sampling_gradient_evaluations: counting.gradient_evaluations() - warmup_gradient_evaluations,
        sampling_seconds,
        final_criterion: warm.window_reports.last().map(|r| r.chosen_criterion),
        metric: warm.metric,
        step_size: warm.step_size,
        window_reports: warm.window_reports,
        ledger,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::Gaussian;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_schedule_totals_one_thousand() {
        assert_eq!(WarmupSchedule::default().total(), 1000);
        assert_eq!(WarmupSchedule::short(100).total(), 225);
    }

    #[test]
    fn schedule_validation() {
        assert!(WarmupSchedule::short(9).validate(true).is_err());
        assert!(WarmupSchedule::short(9).validate(false).is_ok());
        assert!(WarmupSchedule { init: 0, ..Default::default() }.validate(false).is_err());
        assert!(WarmupSchedule { windows: vec![], ..Default::default() }.validate(false).is_err());
    }

    #[test]
    fn fixed_diagonal_recovers_unit_variances() {
        let t = Gaussian::standard(5);
        let config = AdaptationConfig { mode: AdaptationMode::Fixed(Candidate::Diagonal), ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let warm = run_warmup(&t, &config, &DVector::from_element(5, 1.0), &mut rng).unwrap();
        let Metric::Diagonal(inv) = &warm.metric else { panic!("expected diagonal") };
        for &v in inv.iter() {
            assert!(v > 0.7 && v < 1.4, "inverse metric entry {v}");
        }
        assert_eq!(warm.window_reports.len(), 5);
        assert!(warm.window_reports.iter().all(|r| r.chosen == Candidate::Diagonal));
    }

    #[test]
    fn switching_avoids_diagonal_on_strong_correlation() {
        let t = Gaussian::correlated_2d(0.99).unwrap();
        let config = AdaptationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let warm = run_warmup(&t, &config, &DVector::from_vec(vec![0.5, -0.5]), &mut rng).unwrap();
        let last = warm.window_reports.last().unwrap();
        assert_ne!(last.chosen, Candidate::Diagonal);
    }

    #[test]
    fn next_window_uses_rebuilt_winner() {
        let t = Gaussian::spiked(6, &[20.0, 5.0], 1.0, true, 3).unwrap();
        let config = AdaptationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let warm = run_warmup(&t, &config, &DVector::zeros(6), &mut rng).unwrap();
        let mut start = warm.ledger.init_transitions;
        for (w, report) in warm.window_reports.iter().enumerate() {
            let size = warm.ledger.window_transitions[w];
            let window = warm.draws.rows(start, size).into_owned();
            start += size;
            let mut r = ChaCha8Rng::seed_from_u64(report.rebuild_seed);
            let rebuilt = criterion::build_candidate(report.chosen, &t, &window, &config.selection, &mut r).unwrap();
            assert_eq!(rebuilt.metric, warm.window_metrics[w], "window {w}");
        }
        assert_eq!(warm.window_metrics.last(), Some(&warm.metric));
    }

    #[test]
    fn ledger_counts_default_schedule() {
        let base = Gaussian::standard(3);
        let config = AdaptationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let counting = CountingTarget::new(&base);
        let chain = run_chain(&counting, &config, 200, &mut rng).unwrap();
        let ledger = &chain.ledger;
        assert_eq!(ledger.init_transitions, 75);
        assert_eq!(ledger.window_transitions, vec![25, 50, 100, 200, 500]);
        assert_eq!(ledger.final_transitions, 50);
        assert_eq!(ledger.warmup_transitions(), 1000);
        assert_eq!(ledger.warmup_gradients(), chain.warmup_gradient_evaluations);
        assert_eq!(ledger.sampling_leapfrog_gradients, chain.sampling_gradient_evaluations);
        assert_eq!(
            counting.gradient_evaluations(),
            chain.warmup_gradient_evaluations + chain.sampling_gradient_evaluations
        );
    }

    #[test]
    fn chain_shape_and_determinism() {
        let t = Gaussian::standard(3);
        let config = AdaptationConfig { schedule: WarmupSchedule::short(50), ..Default::default() };
        let run = |seed| run_chain(&t, &config, 300, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let a = run(21);
        let b = run(21);
        assert_eq!(a.draws.shape(), (300, 3));
        assert_eq!(a.draws, b.draws);
        assert_eq!(a.window_reports, b.window_reports);
        assert_ne!(run(22).draws, a.draws);
    }

    #[test]
    fn matched_metric_rarely_diverges() {
        let t = Gaussian::equicorrelated(5, 0.5).unwrap();
        let config = AdaptationConfig { mode: AdaptationMode::Fixed(Candidate::Dense), ..Default::default() };
        let chain = run_chain(&t, &config, 1000, &mut ChaCha8Rng::seed_from_u64(23)).unwrap();
        assert!(chain.divergences <= 1, "divergences {}", chain.divergences);
    }

    #[test]
    fn short_fixed_window_skips_selection() {
        let t = Gaussian::standard(2);
        let config = AdaptationConfig {
            schedule: WarmupSchedule { init: 20, windows: vec![5], final_draws: 10 },
            mode: AdaptationMode::Fixed(Candidate::Diagonal),
            ..Default::default()
        };
        let warm = run_warmup(&t, &config, &DVector::zeros(2), &mut ChaCha8Rng::seed_from_u64(24)).unwrap();
        assert!(warm.window_reports.is_empty());
        assert_eq!(warm.draws.nrows(), 35);
    }

    #[test]
    fn unrecoverable_start_aborts() {
        struct Nowhere;
        impl TargetDensity for Nowhere {
            fn dim(&self) -> usize {
                2
            }
            fn name(&self) -> &str {
                "nowhere"
            }
            fn neg_log_density(&self, _: &DVector<f64>) -> f64 {
                f64::INFINITY
            }
            fn potential_and_gradient(&self, _: &DVector<f64>, g: &mut DVector<f64>) -> f64 {
                g.fill(f64::NAN);
                f64::INFINITY
            }
        }
        let config = AdaptationConfig::default();
        let err = run_warmup(&Nowhere, &config, &DVector::zeros(2), &mut ChaCha8Rng::seed_from_u64(25)).unwrap_err();
        assert!(matches!(err, Error::ChainAborted(_)));
    }
}
