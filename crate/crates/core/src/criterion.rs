//! Leapfrog stability quantities and metric selection.
//!
//! For a quadratic mode with curvature `λ`, leapfrog is stable for step sizes
//! below `2/√λ`. Under a metric with factor `L` (`L Lᵀ = M⁻¹`), the step size
//! is limited by the largest eigenvalue of `Lᵀ ∇²H L`, while the trajectory
//! length needed to cross the posterior is set by the largest eigenvalue of
//! the rescaled covariance `L⁻¹ Σ L⁻ᵀ`. The selection criterion
//!
//! ```text
//! sqrt( |λ|max(Lᵀ ∇²H(q) L) · λmax(L⁻¹ Σ L⁻ᵀ) )
//! ```
//!
//! estimates how many leapfrog steps a metric needs; lower is better.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{self, FnOperator};
use crate::metrics::{self, Metric};
use crate::targets::{hvp_along, TargetDensity};

/// Dense blends are only formed up to this dimension.
pub const MAX_BLEND_DIM: usize = 2000;

/// Leapfrog stability limit `2/√|λ|` for a mode with squared frequency `λ`.
pub fn timestep_limit(lambda_abs: f64) -> Result<f64> {
    if !(lambda_abs > 0.0) || !lambda_abs.is_finite() {
        return Err(invalid(format!("curvature must be positive and finite, got {lambda_abs}")));
    }
    Ok(2.0 / lambda_abs.sqrt())
}

/// Ratio of the widest to the narrowest stable step, `√(λmax/λmin)`.
pub fn condition_criterion(lambda_max: f64, lambda_min: f64) -> Result<f64> {
    if !(lambda_min > 0.0) || !(lambda_max >= lambda_min) {
        return Err(invalid(format!("need lambda_max >= lambda_min > 0, got {lambda_max}, {lambda_min}")));
    }
    Ok((lambda_max / lambda_min).sqrt())
}

/// A metric construction strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Candidate {
    Diagonal,
    Dense,
    /// Low-rank Hessian metric of the given rank, optionally blended toward
    /// the sample covariance through an inverse-Wishart posterior mean.
    LowRank { rank: usize, blend: bool },
}

impl Candidate {
    /// Ordering used to break ties: cheaper per-leapfrog cost first.
    fn cost_key(&self) -> (u8, usize) {
        match *self {
            Candidate::Diagonal => (0, 0),
            Candidate::LowRank { rank, blend: false } => (1, rank),
            Candidate::Dense => (2, 0),
            Candidate::LowRank { rank, blend: true } => (3, rank),
        }
    }
}

impl fmt::Display for Candidate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Candidate::Diagonal => write!(f, "diagonal"),
            Candidate::Dense => write!(f, "dense"),
            Candidate::LowRank { rank, blend: false } => write!(f, "lowrank{rank}"),
            Candidate::LowRank { rank, blend: true } => write!(f, "lowrank{rank}+wishart"),
        }
    }
}

impl FromStr for Candidate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "diagonal" | "diag" => return Ok(Candidate::Diagonal),
            "dense" => return Ok(Candidate::Dense),
            _ => {}
        }
        let (body, blend) = match s.strip_suffix("+wishart") {
            Some(b) => (b, true),
            None => (s.as_str(), false),
        };
        body.strip_prefix("lowrank")
            .and_then(|r| r.parse::<usize>().ok())
            .filter(|&r| r >= 1)
            .map(|rank| Candidate::LowRank { rank, blend })
            .ok_or_else(|| {
                invalid(format!(
                    "unknown metric candidate {s:?}; expected diagonal, dense, lowrank<K> or lowrank<K>+wishart"
                ))
            })
    }
}

impl Serialize for Candidate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Candidate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Ordered, non-empty list of unique candidates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CandidateSet(Vec<Candidate>);

impl CandidateSet {
    pub fn new(candidates: Vec<Candidate>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(invalid("candidate set is empty"));
        }
        for (i, c) in candidates.iter().enumerate() {
            if candidates[..i].contains(c) {
                return Err(invalid(format!("duplicate candidate {c}")));
            }
        }
        Ok(Self(candidates))
    }

    /// Diagonal, dense, and ranks 1, 2, 4, 8 with and without the blend.
    pub fn switching_default() -> Self {
        let mut v = vec![Candidate::Diagonal, Candidate::Dense];
        for blend in [false, true] {
            for rank in [1, 2, 4, 8] {
                v.push(Candidate::LowRank { rank, blend });
            }
        }
        Self(v)
    }

    pub fn single(c: Candidate) -> Self {
        Self(vec![c])
    }

    pub fn as_slice(&self) -> &[Candidate] {
        &self.0
    }
}

impl<'de> Deserialize<'de> for CandidateSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<Candidate>::deserialize(d)?;
        CandidateSet::new(v).map_err(serde::de::Error::custom)
    }
}

/// Covariance used in the second factor of the criterion.
pub enum TestCovariance<'a> {
    /// Implicit sample covariance of the rows, stored centered.
    Draws { centered: DMatrix<f64> },
    Population(&'a DMatrix<f64>),
}

impl<'a> TestCovariance<'a> {
    pub fn from_draws(draws: &DMatrix<f64>) -> Result<Self> {
        let m = draws.nrows();
        if m < 2 {
            return Err(Error::TooFewDraws { needed: 2, got: m });
        }
        let mean = draws.row_mean();
        let mut centered = draws.clone();
        for mut row in centered.row_iter_mut() {
            row -= &mean;
        }
        Ok(TestCovariance::Draws { centered })
    }

    pub fn population(sigma: &'a DMatrix<f64>) -> Self {
        TestCovariance::Population(sigma)
    }

    /// `Σ x`.
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            TestCovariance::Draws { centered } => {
                let m = centered.nrows() as f64;
                centered.transpose() * (centered * x) / (m - 1.0)
            }
            TestCovariance::Population(s) => *s * x,
        }
    }

    pub fn dense(&self) -> DMatrix<f64> {
        match self {
            TestCovariance::Draws { centered } => {
                centered.transpose() * centered / (centered.nrows() as f64 - 1.0)
            }
            TestCovariance::Population(s) => (*s).clone(),
        }
    }
}

/// Value of the selection criterion and its two eigenvalue factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriterionValue {
    pub value: f64,
    pub hessian_eig: f64,
    pub covariance_eig: f64,
    /// Both Lanczos solves met their tolerance.
    pub converged: bool,
}

const LANCZOS_TOL: f64 = 1e-6;

/// Matrix-free selection criterion at `eval_point`.
///
/// Both extreme eigenvalues are found by Lanczos: the Hessian factor through
/// finite-difference Hessian-vector products mapped through `L`, the
/// covariance factor through the implicit covariance mapped through `L⁻ᵀ`.
pub fn selection_criterion(
    metric: &Metric,
    target: &dyn TargetDensity,
    eval_point: &DVector<f64>,
    covariance: &TestCovariance<'_>,
    rng: &mut impl Rng,
) -> Result<CriterionValue> {
    let d = target.dim();
    if metric.dim() != d || eval_point.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: metric.dim() });
    }
    let hess_op = FnOperator::new(d, |x: &DVector<f64>| {
        let lx = metric.factor(x);
        Ok(metric.factor_transpose(&hvp_along(target, eval_point, &lx)?))
    });
    let hess = linalg::lanczos_extreme_eigs(&hess_op, 1, LANCZOS_TOL, None, rng)?;

    let cov_op = FnOperator::new(d, |x: &DVector<f64>| {
        let y = metric.factor_inverse_transpose(x);
        Ok(metric.factor_inverse(&covariance.apply(&y)))
    });
    let cov = linalg::lanczos_extreme_eigs(&cov_op, 1, LANCZOS_TOL, None, rng)?;

    let hessian_eig = hess.max_abs();
    let covariance_eig = cov.values[0];
    Ok(CriterionValue {
        value: (hessian_eig * covariance_eig).sqrt(),
        hessian_eig,
        covariance_eig,
        converged: hess.all_converged() && cov.all_converged(),
    })
}

/// Dense evaluation of the same criterion from explicit matrices.
pub fn selection_criterion_dense(metric: &Metric, hessian: &DMatrix<f64>, covariance: &DMatrix<f64>) -> Result<f64> {
    let d = metric.dim();
    let columns = |f: &dyn Fn(&DVector<f64>) -> DVector<f64>| {
        let mut out = DMatrix::zeros(d, d);
        for j in 0..d {
            let e = DVector::from_fn(d, |i, _| if i == j { 1.0 } else { 0.0 });
            out.set_column(j, &f(&e));
        }
        out
    };
    let l = columns(&|x| metric.factor(x));
    let l_inv = columns(&|x| metric.factor_inverse(x));
    let symmetrize = |m: DMatrix<f64>| (&m + m.transpose()) * 0.5;
    let h = symmetrize(l.transpose() * hessian * &l);
    let s = symmetrize(&l_inv * covariance * l_inv.transpose());
    let h_max = linalg::dense_sym_eig(&h)?.max_abs();
    let s_max = linalg::dense_sym_eig(&s)?.values[0];
    Ok((h_max * s_max).sqrt())
}

/// Settings for window evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOptions {
    /// Number of test draws at which the Hessian factor is evaluated.
    pub eval_points: usize,
    /// Inverse-Wishart prior degrees of freedom; `None` means `d + 5`.
    pub nu0: Option<f64>,
    /// Collapse every built metric to its diagonal before use.
    pub diagonal_sparsity: bool,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        Self { eval_points: 5, nu0: None, diagonal_sparsity: false }
    }
}

/// A metric built for a candidate, with any warnings raised on the way.
#[derive(Debug, Clone)]
pub struct BuiltMetric {
    pub metric: Metric,
    pub warnings: Vec<String>,
}

/// Builds `candidate` from `draws`.
///
/// Low-rank candidates use the regularized per-coordinate variance of the
/// draws as the rescaling and the last draw as the Hessian anchor.
pub fn build_candidate(
    candidate: Candidate,
    target: &dyn TargetDensity,
    draws: &DMatrix<f64>,
    options: &SelectionOptions,
    rng: &mut impl Rng,
) -> Result<BuiltMetric> {
    let mut warnings = Vec::new();
    let metric = match candidate {
        Candidate::Diagonal => metrics::diagonal_from_draws(draws)?,
        Candidate::Dense => metrics::dense_from_draws(draws)?,
        Candidate::LowRank { rank, blend } => {
            let d = draws.ncols();
            if blend && d > MAX_BLEND_DIM {
                return Err(invalid(format!("blend skipped: dimension {d} exceeds {MAX_BLEND_DIM}")));
            }
            let diag = metrics::regularized_variance(draws)?;
            let anchor: DVector<f64> = draws.row(draws.nrows() - 1).transpose();
            let build = metrics::lowrank_from_hessian(target, &anchor, &diag, rank, rng)?;
            if build.fell_back {
                warnings.push(format!("{candidate}: Lanczos did not converge, used diagonal"));
            }
            if build.negative_curvature > 0 {
                warnings.push(format!(
                    "{candidate}: {} negative curvature eigenvalue(s) replaced by magnitude",
                    build.negative_curvature
                ));
            }
            if blend {
                let sigma0 = build.metric.dense_inverse();
                let nu0 = options.nu0.unwrap_or_else(|| metrics::default_nu0(d));
                let cov = metrics::wishart_blend(&sigma0, draws, nu0)?;
                Metric::dense_from_covariance(&cov)?
            } else {
                build.metric
            }
        }
    };
    let metric = if options.diagonal_sparsity { metric.collapse_to_diagonal() } else { metric };
    Ok(BuiltMetric { metric, warnings })
}

pub(crate) mod finite_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

pub(crate) mod finite_or_null_vec {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let opt: Vec<Option<f64>> = v.iter().map(|x| x.is_finite().then_some(*x)).collect();
        opt.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let v = Vec::<Option<f64>>::deserialize(d)?;
        Ok(v.into_iter().map(|x| x.unwrap_or(f64::INFINITY)).collect())
    }
}

/// Criterion for one candidate in one window. Non-finite values are stored as
/// `+inf` and serialized as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub candidate: Candidate,
    /// Maximum over the evaluation draws.
    #[serde(with = "finite_or_null")]
    pub criterion: f64,
    #[serde(with = "finite_or_null_vec")]
    pub per_point: Vec<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub window: usize,
    pub window_draws: usize,
    pub train_draws: usize,
    pub test_draws: usize,
    /// Indices into the test split.
    pub eval_indices: Vec<usize>,
    pub scores: Vec<CandidateScore>,
    pub chosen: Candidate,
    #[serde(with = "finite_or_null")]
    pub chosen_criterion: f64,
    /// No candidate had a finite criterion; the diagonal metric was used.
    pub fell_back: bool,
    /// Seed of the generator used to rebuild the winner from the whole window.
    pub rebuild_seed: u64,
    pub warnings: Vec<String>,
}

/// Splits the window 80/20 by draw order, scores every candidate built from
/// the training split on the test split, and rebuilds the winner from the
/// whole window.
pub fn evaluate_and_select(
    window_draws: &DMatrix<f64>,
    candidates: &CandidateSet,
    target: &dyn TargetDensity,
    window: usize,
    options: &SelectionOptions,
    rng: &mut impl Rng,
) -> Result<(Metric, SelectionReport)> {
    let n = window_draws.nrows();
    if n < 10 {
        return Err(Error::TooFewDraws { needed: 10, got: n });
    }
    if window_draws.ncols() != target.dim() {
        return Err(Error::DimensionMismatch { expected: target.dim(), got: window_draws.ncols() });
    }
    let n_train = 4 * n / 5;
    let train = window_draws.rows(0, n_train).into_owned();
    let test = window_draws.rows(n_train, n - n_train).into_owned();
    let test_cov = TestCovariance::from_draws(&test)?;

    let n_eval = options.eval_points.clamp(1, test.nrows());
    let mut eval_indices = rand::seq::index::sample(rng, test.nrows(), n_eval).into_vec();
    eval_indices.sort_unstable();

    let seeds: Vec<u64> = candidates.as_slice().iter().map(|_| rng.random()).collect();
    let mut scores = Vec::with_capacity(seeds.len());
    for (&candidate, &seed) in candidates.as_slice().iter().zip(&seeds) {
        let mut crng = ChaCha8Rng::seed_from_u64(seed);
        scores.push(score_candidate(candidate, target, &train, &test, &test_cov, &eval_indices, options, &mut crng));
    }

    let best = pick_best(&scores).map(|s| (s.candidate, s.criterion));

    let mut warnings: Vec<String> = Vec::new();
    let rebuild_seed: u64 = rng.random();
    let (chosen, chosen_criterion, metric, fell_back) = match best {
        Some((candidate, crit)) => {
            let mut crng = ChaCha8Rng::seed_from_u64(rebuild_seed);
            match build_candidate(candidate, target, window_draws, options, &mut crng) {
                Ok(built) => {
                    warnings.extend(built.warnings);
                    (candidate, crit, built.metric, false)
                }
                Err(e) => {
                    warnings.push(format!("rebuilding {candidate} failed: {e}; used diagonal"));
                    (Candidate::Diagonal, f64::INFINITY, metrics::diagonal_from_draws(window_draws)?, true)
                }
            }
        }
        None => {
            warnings.push("no candidate had a finite criterion; used diagonal".into());
            (Candidate::Diagonal, f64::INFINITY, metrics::diagonal_from_draws(window_draws)?, true)
        }
    };

    let report = SelectionReport {
        window,
        window_draws: n,
        train_draws: n_train,
        test_draws: n - n_train,
        eval_indices,
        scores,
        chosen,
        chosen_criterion,
        fell_back,
        rebuild_seed,
        warnings,
    };
    Ok((metric, report))
}

/// Smallest finite criterion; ties go to the cheaper candidate.
fn pick_best(scores: &[CandidateScore]) -> Option<&CandidateScore> {
    scores.iter().filter(|s| s.criterion.is_finite()).min_by(|a, b| {
        a.criterion
            .total_cmp(&b.criterion)
            .then(a.candidate.cost_key().cmp(&b.candidate.cost_key()))
    })
}

#[allow(clippy::too_many_arguments)]
fn score_candidate(
    candidate: Candidate,
    target: &dyn TargetDensity,
    train: &DMatrix<f64>,
    test: &DMatrix<f64>,
    test_cov: &TestCovariance<'_>,
    eval_indices: &[usize],
    options: &SelectionOptions,
    rng: &mut impl Rng,
) -> CandidateScore {
    let built = match build_candidate(candidate, target, train, options, rng) {
        Ok(b) => b,
        Err(e) => {
            return CandidateScore {
                candidate,
                criterion: f64::INFINITY,
                per_point: vec![f64::INFINITY; eval_indices.len()],
                warnings: vec![format!("build failed: {e}")],
            }
        }
    };
    let mut warnings = built.warnings;
    let mut per_point = Vec::with_capacity(eval_indices.len());
    for &i in eval_indices {
        let point: DVector<f64> = test.row(i).transpose();
        let value = match selection_criterion(&built.metric, target, &point, test_cov, rng) {
            Ok(v) => {
                if !v.converged {
                    warnings.push(format!("criterion at test draw {i}: Lanczos did not converge"));
                }
                v.value
            }
            Err(e) => {
                warnings.push(format!("criterion at test draw {i}: {e}"));
                f64::INFINITY
            }
        };
        per_point.push(if value.is_finite() { value } else { f64::INFINITY });
    }
    let criterion = per_point.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !criterion.is_finite() {
        warnings.push("non-finite criterion".into());
    }
    CandidateScore { candidate, criterion: criterion.max(0.0), per_point, warnings }
}
