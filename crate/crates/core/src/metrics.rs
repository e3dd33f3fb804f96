//! Euclidean metrics for HMC.
//!
//! A metric `M` is stored through a representation of its inverse `M⁻¹`,
//! together with a factor `L` satisfying `L Lᵀ = M⁻¹`:
//!
//! - `Diagonal`: `M⁻¹ = diag(d)`, `L = diag(√d)`.
//! - `Dense`: `L` is the lower Cholesky factor of `M⁻¹`.
//! - `LowRank`: `M = D^{-1/2} A D^{-1/2}` with
//!   `A = U diag(λ - λ_tail) Uᵀ + λ_tail I`, built from the leading eigenpairs
//!   of the diagonally rescaled Hessian `D^{1/2} ∇²H D^{1/2}`. Here
//!   `L = D^{1/2} A^{-1/2}`, which is symmetric.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{self, FnOperator};
use crate::targets::{hvp_along, TargetDensity};

/// Shrinkage weight toward the small identity term, `n / (n + 5)`.
fn shrinkage(n: usize) -> (f64, f64) {
    let n = n as f64;
    (n / (n + 5.0), 1e-3 * 5.0 / (n + 5.0))
}

/// Low-rank-plus-diagonal metric.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankMetric {
    basis: DMatrix<f64>,
    values: Vec<f64>,
    tail: f64,
    scale: DVector<f64>,
    scale_sqrt: DVector<f64>,
}

impl LowRankMetric {
    /// `basis` has one orthonormal column per entry of `values`; `scale` is
    /// the diagonal `D` (a variance estimate).
    pub fn new(basis: DMatrix<f64>, values: Vec<f64>, tail: f64, scale: DVector<f64>) -> Result<Self> {
        let d = scale.len();
        if basis.nrows() != d || basis.ncols() != values.len() {
            return Err(Error::DimensionMismatch { expected: d, got: basis.nrows() });
        }
        if !(tail > 0.0 && tail.is_finite()) {
            return Err(invalid(format!("tail eigenvalue must be positive, got {tail}")));
        }
        if scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(invalid("rescaling diagonal must be strictly positive"));
        }
        let mut prev = f64::INFINITY;
        for &v in &values {
            if !(v.is_finite() && v >= tail && v <= prev) {
                return Err(invalid("low-rank eigenvalues must be descending and >= tail"));
            }
            prev = v;
        }
        let k = values.len();
        let gram = basis.transpose() * &basis;
        if (gram - DMatrix::identity(k, k)).amax() > 1e-8 {
            return Err(invalid("low-rank basis is not orthonormal"));
        }
        let scale_sqrt = scale.map(f64::sqrt);
        Ok(Self { basis, values, tail, scale, scale_sqrt })
    }

    pub fn rank(&self) -> usize {
        self.values.len()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn tail(&self) -> f64 {
        self.tail
    }

    pub fn scale(&self) -> &DVector<f64> {
        &self.scale
    }

    /// `A^power x`.
    fn apply_a_power(&self, x: &DVector<f64>, power: f64) -> DVector<f64> {
        let tail_p = self.tail.powf(power);
        let mut out = x * tail_p;
        let coeffs = self.basis.transpose() * x;
        for (k, (&lambda, c)) in self.values.iter().zip(coeffs.iter()).enumerate() {
            let w = (lambda.powf(power) - tail_p) * c;
            out.axpy(w, &self.basis.column(k), 1.0);
        }
        out
    }

    fn dense_a(&self) -> DMatrix<f64> {
        let d = self.scale.len();
        let mut a = DMatrix::identity(d, d) * self.tail;
        for (k, &lambda) in self.values.iter().enumerate() {
            let u = self.basis.column(k);
            a += (lambda - self.tail) * &u * u.transpose();
        }
        a
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Metric {
    /// Diagonal of `M⁻¹`.
    Diagonal(DVector<f64>),
    /// Lower Cholesky factor of `M⁻¹`.
    Dense(DMatrix<f64>),
    LowRank(LowRankMetric),
}

impl Metric {
    pub fn identity(d: usize) -> Self {
        Metric::Diagonal(DVector::from_element(d, 1.0))
    }

    pub fn dim(&self) -> usize {
        match self {
            Metric::Diagonal(v) => v.len(),
            Metric::Dense(l) => l.nrows(),
            Metric::LowRank(lr) => lr.scale.len(),
        }
    }

    pub fn variant_name(&self) -> &'static str {
        match self {
            Metric::Diagonal(_) => "diagonal",
            Metric::Dense(_) => "dense",
            Metric::LowRank(_) => "lowrank",
        }
    }

    /// Metric from a covariance estimate used directly as `M⁻¹`.
    pub fn dense_from_covariance(cov: &DMatrix<f64>) -> Result<Self> {
        Ok(Metric::Dense(linalg::cholesky_lower(cov)?))
    }

    /// `M⁻¹ p`.
    pub fn inverse_multiply(&self, p: &DVector<f64>) -> DVector<f64> {
        match self {
            Metric::Diagonal(inv) => p.component_mul(inv),
            Metric::Dense(l) => l * (l.transpose() * p),
            Metric::LowRank(lr) => {
                let x = p.component_mul(&lr.scale_sqrt);
                lr.apply_a_power(&x, -1.0).component_mul(&lr.scale_sqrt)
            }
        }
    }

    /// `M x`.
    pub fn metric_multiply(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Metric::Diagonal(inv) => x.component_div(inv),
            Metric::Dense(_) => self.factor_inverse_transpose(&self.factor_inverse(x)),
            Metric::LowRank(lr) => {
                let y = x.component_div(&lr.scale_sqrt);
                lr.apply_a_power(&y, 1.0).component_div(&lr.scale_sqrt)
            }
        }
    }

    pub fn kinetic_energy(&self, p: &DVector<f64>) -> f64 {
        0.5 * p.dot(&self.inverse_multiply(p))
    }

    /// `L x`.
    pub fn factor(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Metric::Diagonal(inv) => x.zip_map(inv, |a, b| a * b.sqrt()),
            Metric::Dense(l) => l * x,
            Metric::LowRank(lr) => lr.apply_a_power(x, -0.5).component_mul(&lr.scale_sqrt),
        }
    }

    /// `Lᵀ x`.
    pub fn factor_transpose(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Metric::Diagonal(_) => self.factor(x),
            Metric::Dense(l) => l.transpose() * x,
            Metric::LowRank(lr) => lr.apply_a_power(&x.component_mul(&lr.scale_sqrt), -0.5),
        }
    }

    /// `L⁻¹ x`.
    pub fn factor_inverse(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Metric::Diagonal(inv) => x.zip_map(inv, |a, b| a / b.sqrt()),
            Metric::Dense(l) => l.solve_lower_triangular(x).expect("Cholesky factor is non-singular"),
            Metric::LowRank(lr) => lr.apply_a_power(&x.component_div(&lr.scale_sqrt), 0.5),
        }
    }

    /// `L⁻ᵀ x`.
    pub fn factor_inverse_transpose(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Metric::Diagonal(_) => self.factor_inverse(x),
            Metric::Dense(l) => l.tr_solve_lower_triangular(x).expect("Cholesky factor is non-singular"),
            Metric::LowRank(lr) => lr.apply_a_power(x, 0.5).component_div(&lr.scale_sqrt),
        }
    }

    /// Momentum draw `p ~ N(0, M)`, as `p = L⁻ᵀ z`.
    pub fn sample_momentum(&self, rng: &mut impl Rng) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(rng));
        self.factor_inverse_transpose(&z)
    }

    /// `M⁻¹` as a dense matrix.
    pub fn dense_inverse(&self) -> DMatrix<f64> {
        match self {
            Metric::Diagonal(inv) => DMatrix::from_diagonal(inv),
            Metric::Dense(l) => l * l.transpose(),
            Metric::LowRank(lr) => {
                let a_inv = linalg::spd_inverse(&lr.dense_a()).expect("A is positive definite");
                let s = DMatrix::from_diagonal(&lr.scale_sqrt);
                let out = &s * a_inv * &s;
                (&out + out.transpose()) * 0.5
            }
        }
    }

    /// `M` as a dense matrix.
    pub fn dense_metric(&self) -> DMatrix<f64> {
        match self {
            Metric::Diagonal(inv) => DMatrix::from_diagonal(&inv.map(|v| 1.0 / v)),
            Metric::Dense(_) => {
                let m = linalg::spd_inverse(&self.dense_inverse()).expect("M⁻¹ is positive definite");
                (&m + m.transpose()) * 0.5
            }
            Metric::LowRank(lr) => {
                let s = DMatrix::from_diagonal(&lr.scale_sqrt.map(|v| 1.0 / v));
                &s * lr.dense_a() * &s
            }
        }
    }

    /// Diagonal metric keeping `diag(M)` of this metric.
    pub fn collapse_to_diagonal(&self) -> Metric {
        match self {
            Metric::Diagonal(_) => self.clone(),
            Metric::Dense(_) => Metric::Diagonal(self.dense_metric().diagonal().map(|m| 1.0 / m)),
            Metric::LowRank(lr) => {
                let d = lr.scale.len();
                let diag_m = DVector::from_fn(d, |i, _| {
                    let a_ii = lr.tail
                        + lr.values
                            .iter()
                            .enumerate()
                            .map(|(k, &l)| (l - lr.tail) * lr.basis[(i, k)].powi(2))
                            .sum::<f64>();
                    a_ii / lr.scale[i]
                });
                Metric::Diagonal(diag_m.map(|m| 1.0 / m))
            }
        }
    }

    pub fn to_record(&self) -> MetricRecord {
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            m.row_iter().map(|r| r.iter().copied().collect()).collect()
        };
        match self {
            Metric::Diagonal(inv) => MetricRecord::Diagonal { inverse_diagonal: inv.as_slice().to_vec() },
            Metric::Dense(l) => MetricRecord::Dense { inverse_cholesky_lower: rows(l) },
            Metric::LowRank(lr) => MetricRecord::LowRank {
                basis: lr.basis.column_iter().map(|c| c.iter().copied().collect()).collect(),
                eigenvalues: lr.values.clone(),
                tail: lr.tail,
                rescaling: lr.scale.as_slice().to_vec(),
            },
        }
    }

    pub fn from_record(record: &MetricRecord) -> Result<Self> {
        match record {
            MetricRecord::Diagonal { inverse_diagonal } => {
                if inverse_diagonal.iter().any(|v| !(*v > 0.0)) {
                    return Err(invalid("inverse diagonal must be positive"));
                }
                Ok(Metric::Diagonal(DVector::from_vec(inverse_diagonal.clone())))
            }
            MetricRecord::Dense { inverse_cholesky_lower } => {
                let d = inverse_cholesky_lower.len();
                if inverse_cholesky_lower.iter().any(|r| r.len() != d) {
                    return Err(invalid("Cholesky factor must be square"));
                }
                let l = DMatrix::from_fn(d, d, |i, j| inverse_cholesky_lower[i][j]);
                Ok(Metric::Dense(l))
            }
            MetricRecord::LowRank { basis, eigenvalues, tail, rescaling } => {
                let d = rescaling.len();
                if basis.iter().any(|c| c.len() != d) {
                    return Err(invalid("basis columns must match the dimension"));
                }
                let u = DMatrix::from_fn(d, basis.len(), |i, k| basis[k][i]);
                Ok(Metric::LowRank(LowRankMetric::new(
                    u,
                    eigenvalues.clone(),
                    *tail,
                    DVector::from_vec(rescaling.clone()),
                )?))
            }
        }
    }
}

/// Serialized form of a [`Metric`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum MetricRecord {
    Diagonal {
        inverse_diagonal: Vec<f64>,
    },
    Dense {
        /// Row-major lower factor of `M⁻¹`.
        inverse_cholesky_lower: Vec<Vec<f64>>,
    },
    LowRank {
        /// One entry per basis column.
        basis: Vec<Vec<f64>>,
        eigenvalues: Vec<f64>,
        tail: f64,
        rescaling: Vec<f64>,
    },
}

/// Regularized per-coordinate variance of the draws, used as `M⁻¹`.
pub fn regularized_variance(draws: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = draws.nrows();
    if n < 2 {
        return Err(Error::TooFewDraws { needed: 2, got: n });
    }
    let (w, eps) = shrinkage(n);
    Ok(linalg::sample_variance(draws).map(|v| w * v + eps))
}

/// Diagonal metric from draws; fall back to [`Metric::identity`] on error.
pub fn diagonal_from_draws(draws: &DMatrix<f64>) -> Result<Metric> {
    Ok(Metric::Diagonal(regularized_variance(draws)?))
}

/// Dense metric from the regularized sample covariance.
pub fn dense_from_draws(draws: &DMatrix<f64>) -> Result<Metric> {
    let n = draws.nrows();
    if n < 2 {
        return Err(Error::TooFewDraws { needed: 2, got: n });
    }
    let d = draws.ncols();
    let (w, eps) = shrinkage(n);
    let s = linalg::sample_covariance(draws);
    let cov = &s * w + DMatrix::identity(d, d) * eps;
    match linalg::cholesky_lower(&cov) {
        Ok(l) => Ok(Metric::Dense(l)),
        Err(_) => {
            let jitter = 1e-8 * s.trace() / d as f64;
            linalg::cholesky_lower(&(cov + DMatrix::identity(d, d) * jitter)).map(Metric::Dense)
        }
    }
}

/// Outcome of building a low-rank metric from Hessian information.
#[derive(Debug, Clone)]
pub struct LowRankBuild {
    pub metric: Metric,
    /// Extracted eigenvalues that were negative and replaced by their magnitude.
    pub negative_curvature: usize,
    /// Lanczos failed and the metric is the diagonal from `diag_estimate`.
    pub fell_back: bool,
}

/// Low-rank metric from the leading eigenpairs of `D^{1/2} ∇²H(anchor) D^{1/2}`.
///
/// Extracts `rank + 1` pairs by Lanczos over finite-difference Hessian-vector
/// products; the top `rank` become the basis and the next one the tail value.
/// When `rank >= d` every eigenpair goes into the basis.
pub fn lowrank_from_hessian(
    target: &dyn TargetDensity,
    anchor: &DVector<f64>,
    diag_estimate: &DVector<f64>,
    rank: usize,
    rng: &mut impl Rng,
) -> Result<LowRankBuild> {
    let d = target.dim();
    if rank == 0 {
        return Err(invalid("rank must be at least 1"));
    }
    if diag_estimate.len() != d || anchor.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: diag_estimate.len() });
    }
    if diag_estimate.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(invalid("diagonal estimate must be strictly positive"));
    }
    let fallback = || LowRankBuild {
        metric: Metric::Diagonal(diag_estimate.clone()),
        negative_curvature: 0,
        fell_back: true,
    };

    let sqrt_d = diag_estimate.map(f64::sqrt);
    let op = FnOperator::new(d, |v: &DVector<f64>| {
        let w = v.component_mul(&sqrt_d);
        Ok(hvp_along(target, anchor, &w)?.component_mul(&sqrt_d))
    });
    let pairs_wanted = (rank + 1).min(d);
    let pairs = match linalg::lanczos_extreme_eigs(&op, pairs_wanted, 1e-6, None, rng) {
        Ok(p) if p.all_converged() && p.len() == pairs_wanted => p,
        _ => return Ok(fallback()),
    };

    let mut negative = 0;
    let abs_values: Vec<f64> = pairs
        .values
        .iter()
        .map(|&v| {
            if v < 0.0 {
                negative += 1;
            }
            v.abs()
        })
        .collect();
    if abs_values.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Ok(fallback());
    }

    let kept = rank.min(d);
    let tail = if rank < d { abs_values[rank] } else { abs_values[d - 1] };
    let basis = pairs.vectors.columns(0, kept).into_owned();
    match LowRankMetric::new(basis, abs_values[..kept].to_vec(), tail, diag_estimate.clone()) {
        Ok(lr) => Ok(LowRankBuild { metric: Metric::LowRank(lr), negative_curvature: negative, fell_back: false }),
        Err(_) => Ok(fallback()),
    }
}

/// Default prior degrees of freedom for the inverse-Wishart blend: `d + 5`.
pub fn default_nu0(d: usize) -> f64 {
    d as f64 + 5.0
}

/// Posterior-mean covariance under an inverse-Wishart prior centered on `sigma0`:
/// `((ν₀ - d - 1) Σ₀ + (n - 1) S) / (ν₀ + n - d - 1)`.
pub fn wishart_blend(sigma0: &DMatrix<f64>, draws: &DMatrix<f64>, nu0: f64) -> Result<DMatrix<f64>> {
    let d = sigma0.nrows();
    if !sigma0.is_square() {
        return Err(invalid("prior covariance must be square"));
    }
    if draws.nrows() > 0 && draws.ncols() != d {
        return Err(Error::DimensionMismatch { expected: d, got: draws.ncols() });
    }
    if !(nu0 > d as f64 + 1.0) {
        return Err(invalid(format!("nu0 must exceed d + 1 = {}, got {nu0}", d + 1)));
    }
    let n = draws.nrows();
    let prior_weight = nu0 - d as f64 - 1.0;
    if n <= 1 {
        return Ok(sigma0.clone());
    }
    let s = linalg::sample_covariance(draws);
    let blended = (sigma0 * prior_weight + s * (n as f64 - 1.0)) / (prior_weight + n as f64);
    Ok((&blended + blended.transpose()) * 0.5)
}
