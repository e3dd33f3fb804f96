//! Target densities.
//!
//! Every target exposes its potential energy `H(q) = -log p(q)` (up to a fixed
//! additive constant) and the gradient of that potential. Hessian information
//! is only ever obtained through [`hessian_vector_product`], a central
//! difference of gradients, so any target with a gradient can be adapted to.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::linalg;

/// An unnormalized posterior, described by its potential energy.
///
/// Implementations must be immutable after construction; chains evaluate the
/// same target concurrently.
pub trait TargetDensity: Send + Sync {
    fn dim(&self) -> usize;

    fn name(&self) -> &str;

    /// Negative log density at `q`.
    fn neg_log_density(&self, q: &DVector<f64>) -> f64;

    /// Writes the gradient of the potential into `grad` and returns the
    /// potential.
    fn potential_and_gradient(&self, q: &DVector<f64>, grad: &mut DVector<f64>) -> f64;

    fn gradient(&self, q: &DVector<f64>) -> DVector<f64> {
        let mut grad = DVector::zeros(self.dim());
        self.potential_and_gradient(q, &mut grad);
        grad
    }

    /// Column names for draws; `q1, q2, ...` unless the target knows better.
    fn parameter_names(&self) -> Vec<String> {
        (1..=self.dim()).map(|i| format!("q{i}")).collect()
    }
}

fn check_dim(expected: usize, q: &DVector<f64>) {
    assert_eq!(q.len(), expected, "position has wrong dimension");
}

/// Default finite-difference step for a Hessian-vector product at `q`,
/// assuming a unit-length direction.
pub fn default_fd_step(q: &DVector<f64>) -> f64 {
    f64::EPSILON.cbrt() * (1.0 + q.norm())
}

/// Central-difference Hessian-vector product
/// `(∇H(q + h/2 v) - ∇H(q - h/2 v)) / h`.
///
/// `v` is expected to have unit length; callers scale the result themselves.
pub fn hessian_vector_product(
    target: &dyn TargetDensity,
    q: &DVector<f64>,
    v: &DVector<f64>,
    h: f64,
) -> Result<DVector<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(invalid(format!("finite-difference step must be positive, got {h}")));
    }
    if v.len() != target.dim() || q.len() != target.dim() {
        return Err(Error::DimensionMismatch {
            expected: target.dim(),
            got: if v.len() != target.dim() { v.len() } else { q.len() },
        });
    }
    let half = 0.5 * h;
    let mut forward = q.clone();
    forward.axpy(half, v, 1.0);
    let mut backward = q.clone();
    backward.axpy(-half, v, 1.0);

    let g_fwd = target.gradient(&forward);
    let g_bwd = target.gradient(&backward);
    if g_fwd.iter().chain(g_bwd.iter()).any(|x| !x.is_finite()) {
        return Err(Error::LeftSupport(format!("{:?}", q.as_slice())));
    }
    Ok((g_fwd - g_bwd) / h)
}

/// Hessian-vector product along an arbitrary (non-normalized) direction using
/// the default step rule.
pub fn hvp_along(target: &dyn TargetDensity, q: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
    let norm = w.norm();
    if norm == 0.0 {
        return Ok(DVector::zeros(w.len()));
    }
    let unit = w / norm;
    Ok(hessian_vector_product(target, q, &unit, default_fd_step(q))? * norm)
}

/// Wraps a target and counts every gradient evaluation made through it.
pub struct CountingTarget<'a> {
    inner: &'a dyn TargetDensity,
    count: AtomicU64,
}

impl<'a> CountingTarget<'a> {
    pub fn new(inner: &'a dyn TargetDensity) -> Self {
        Self { inner, count: AtomicU64::new(0) }
    }

    pub fn gradient_evaluations(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }
}

impl TargetDensity for CountingTarget<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn name(&self) -> &str {
        self.inner.name()
    }

    fn neg_log_density(&self, q: &DVector<f64>) -> f64 {
        self.inner.neg_log_density(q)
    }

    fn potential_and_gradient(&self, q: &DVector<f64>, grad: &mut DVector<f64>) -> f64 {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.potential_and_gradient(q, grad)
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.parameter_names()
    }
}

/// Multivariate normal target, `H(q) = ½ (q-μ)ᵀ Σ⁻¹ (q-μ)`.
#[derive(Debug, Clone)]
pub struct Gaussian {
    name: String,
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    precision: DMatrix<f64>,
}

impl Gaussian {
    pub fn new(name: impl Into<String>, mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(invalid("Gaussian target needs dimension >= 1"));
        }
        if covariance.shape() != (d, d) {
            return Err(Error::DimensionMismatch { expected: d, got: covariance.nrows() });
        }
        let asym = (&covariance - covariance.transpose()).abs().max();
        if asym != 0.0 {
            return Err(Error::NotSymmetric(asym));
        }
        let chol = nalgebra::Cholesky::new(covariance.clone()).ok_or(Error::NotPositiveDefinite)?;
        let mut precision = chol.inverse();
        // Symmetrize so the quadratic form is exactly symmetric.
        precision = (&precision + precision.transpose()) * 0.5;
        Ok(Self { name: name.into(), mean, covariance, precision })
    }

    pub fn standard(d: usize) -> Self {
        Self::new(format!("std_normal_{d}"), DVector::zeros(d), DMatrix::identity(d, d))
            .expect("identity covariance is valid")
    }

    /// Zero-mean bivariate normal with unit variances and correlation `rho`.
    pub fn correlated_2d(rho: f64) -> Result<Self> {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
        Self::new(format!("corr2d_{rho}"), DVector::zeros(2), cov)
    }

    /// Zero-mean normal with equal pairwise correlation `rho` and unit variances.
    pub fn equicorrelated(d: usize, rho: f64) -> Result<Self> {
        let cov = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { rho });
        Self::new(format!("equicorr_{d}_{rho}"), DVector::zeros(d), cov)
    }

    /// Zero-mean normal whose covariance (or precision, when `on_precision`)
    /// has the eigenvalues `leading` along random orthonormal directions and
    /// `rest` everywhere else. Directions are drawn from `seed`.
    pub fn spiked(d: usize, leading: &[f64], rest: f64, on_precision: bool, seed: u64) -> Result<Self> {
        if leading.len() > d {
            return Err(invalid("more spikes than dimensions"));
        }
        if rest <= 0.0 || leading.iter().any(|&l| l <= 0.0) {
            return Err(invalid("spectrum must be strictly positive"));
        }
        let basis = random_orthonormal(d, leading.len(), seed);
        let mut matrix = DMatrix::identity(d, d) * rest;
        for (k, &value) in leading.iter().enumerate() {
            let u = basis.column(k);
            matrix += (value - rest) * &u * u.transpose();
        }
        matrix = (&matrix + matrix.transpose()) * 0.5;
        let covariance = if on_precision {
            let inv = linalg::spd_inverse(&matrix)?;
            (&inv + inv.transpose()) * 0.5
        } else {
            matrix
        };
        let kind = if on_precision { "prec" } else { "cov" };
        Self::new(format!("spiked_{kind}_{d}"), DVector::zeros(d), covariance)
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Analytic Hessian of the potential; only used as a test oracle.
    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.precision
    }
}

impl TargetDensity for Gaussian {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn name(&self) -> &str {
        &self.name
    }

    fn neg_log_density(&self, q: &DVector<f64>) -> f64 {
        check_dim(self.dim(), q);
        let r = q - &self.mean;
        0.5 * r.dot(&(&self.precision * &r))
    }

    fn potential_and_gradient(&self, q: &DVector<f64>, grad: &mut DVector<f64>) -> f64 {
        check_dim(self.dim(), q);
        let r = q - &self.mean;
        grad.gemv(1.0, &self.precision, &r, 0.0);
        0.5 * r.dot(grad)
    }
}

/// `k` orthonormal columns in `R^d`, Gram-Schmidt on Gaussian vectors.
pub fn random_orthonormal(d: usize, k: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis = DMatrix::<f64>::zeros(d, k);
    let mut col = 0;
    while col < k {
        let mut v = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        for _ in 0..2 {
            for j in 0..col {
                let u = basis.column(j);
                let c = u.dot(&v);
                v.axpy(-c, &u, 1.0);
            }
        }
        let n = v.norm();
        if n > 1e-8 {
            basis.set_column(col, &(v / n));
            col += 1;
        }
    }
    basis
}

/// Linear regression `y ~ N(α + β x, σ)` on an uncentered covariate, sampled
/// over `(α, β, log σ)` with independent normal priors.
#[derive(Debug, Clone)]
pub struct Regression {
    name: String,
    x: Vec<f64>,
    y: Vec<f64>,
    intercept_scale: f64,
    slope_scale: f64,
    log_sigma_scale: f64,
}

impl Regression {
    pub fn new(x: Vec<f64>, y: Vec<f64>, intercept_scale: f64, slope_scale: f64, log_sigma_scale: f64) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch { expected: x.len(), got: y.len() });
        }
        if x.len() < 3 {
            return Err(Error::TooFewDraws { needed: 3, got: x.len() });
        }
        if [intercept_scale, slope_scale, log_sigma_scale].iter().any(|s| !(*s > 0.0)) {
            return Err(invalid("prior scales must be positive"));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("regression data must be finite"));
        }
        Ok(Self { name: "regression".into(), x, y, intercept_scale, slope_scale, log_sigma_scale })
    }

    /// Reads a two-column `x,y` CSV with a header row.
    pub fn from_csv(
        path: impl AsRef<Path>,
        intercept_scale: f64,
        slope_scale: f64,
        log_sigma_scale: f64,
    ) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path.as_ref())?;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for record in reader.records() {
            let record = record?;
            if record.len() != 2 {
                return Err(invalid(format!("expected 2 columns, found {}", record.len())));
            }
            let parse = |s: &str| {
                s.trim().parse::<f64>().map_err(|e| invalid(format!("bad number {s:?}: {e}")))
            };
            x.push(parse(&record[0])?);
            y.push(parse(&record[1])?);
        }
        Self::new(x, y, intercept_scale, slope_scale, log_sigma_scale)
    }

    /// Simulated yearly series: `x = start, start+1, ...` with a weak trend.
    pub fn synthetic(n: usize, x_start: f64, intercept: f64, slope: f64, noise: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|i| x_start + i as f64).collect();
        let y = x
            .iter()
            .map(|&xi| {
                let z: f64 = StandardNormal.sample(&mut rng);
                intercept + slope * xi + noise * z
            })
            .collect();
        Self::new(x, y, 1000.0, 10.0, 5.0)
    }

    pub fn data(&self) -> (&[f64], &[f64]) {
        (&self.x, &self.y)
    }
}

impl TargetDensity for Regression {
    fn dim(&self) -> usize {
        3
    }

    fn parameter_names(&self) -> Vec<String> {
        vec!["intercept".into(), "slope".into(), "log_sigma".into()]
    }

    fn name(&self) -> &str {
        &self.name
    }

    fn neg_log_density(&self, q: &DVector<f64>) -> f64 {
        let mut g = DVector::zeros(3);
        self.potential_and_gradient(q, &mut g)
    }

    fn potential_and_gradient(&self, q: &DVector<f64>, grad: &mut DVector<f64>) -> f64 {
        check_dim(3, q);
        let (a, b, s) = (q[0], q[1], q[2]);
        let inv_var = (-2.0 * s).exp();
        let n = self.x.len() as f64;
        let (mut ssr, mut sr, mut srx) = (0.0, 0.0, 0.0);
        for (&xi, &yi) in self.x.iter().zip(&self.y) {
            let r = yi - a - b * xi;
            ssr += r * r;
            sr += r;
            srx += r * xi;
        }
        let (sa2, sb2, ss2) = (
            self.intercept_scale.powi(2),
            self.slope_scale.powi(2),
            self.log_sigma_scale.powi(2),
        );
        grad[0] = -sr * inv_var + a / sa2;
        grad[1] = -srx * inv_var + b / sb2;
        grad[2] = -ssr * inv_var + n + s / ss2;
        0.5 * ssr * inv_var + n * s + 0.5 * (a * a / sa2 + b * b / sb2 + s * s / ss2)
    }
}

/// Neal's funnel: `v ~ N(0, scale²)`, `x_i | v ~ N(0, e^v)`; `q = (v, x_1, ...)`.
#[derive(Debug, Clone)]
pub struct Funnel {
    name: String,
    dim: usize,
    scale: f64,
}

impl Funnel {
    pub fn new(dim: usize, scale: f64) -> Result<Self> {
        if dim < 2 {
            return Err(invalid("funnel needs dimension >= 2"));
        }
        if !(scale > 0.0) {
            return Err(invalid("funnel scale must be positive"));
        }
        Ok(Self { name: format!("funnel_{dim}"), dim, scale })
    }
}

impl TargetDensity for Funnel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn parameter_names(&self) -> Vec<String> {
        std::iter::once("v".to_string()).chain((1..self.dim).map(|i| format!("x{i}"))).collect()
    }

    fn name(&self) -> &str {
        &self.name
    }

    fn neg_log_density(&self, q: &DVector<f64>) -> f64 {
        let mut g = DVector::zeros(self.dim);
        self.potential_and_gradient(q, &mut g)
    }

    fn potential_and_gradient(&self, q: &DVector<f64>, grad: &mut DVector<f64>) -> f64 {
        check_dim(self.dim, q);
        let v = q[0];
        let s2 = self.scale * self.scale;
        let prec = (-v).exp();
        let k = (self.dim - 1) as f64;
        let mut sq = 0.0;
        for i in 1..self.dim {
            sq += q[i] * q[i];
            grad[i] = q[i] * prec;
        }
        grad[0] = v / s2 - 0.5 * sq * prec + 0.5 * k;
        0.5 * v * v / s2 + 0.5 * sq * prec + 0.5 * k * v
    }
}
