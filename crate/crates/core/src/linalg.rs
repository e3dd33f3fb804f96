//! Symmetric linear algebra: a matrix-free Lanczos eigensolver for the
//! extreme eigenpairs of an operator, plus dense helpers (eigendecomposition,
//! Cholesky) that back small problems and serve as oracles.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};

/// A symmetric linear map known only through its action on vectors.
pub trait SymmetricOperator {
    fn dim(&self) -> usize;

    fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>>;
}

/// Dense symmetric matrix viewed as an operator.
pub struct DenseOperator<'a>(pub &'a DMatrix<f64>);

impl SymmetricOperator for DenseOperator<'_> {
    fn dim(&self) -> usize {
        self.0.nrows()
    }

    fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.0 * x)
    }
}

/// Operator backed by a closure.
pub struct FnOperator<F> {
    dim: usize,
    f: F,
}

impl<F> FnOperator<F>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> SymmetricOperator for FnOperator<F>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        (self.f)(x)
    }
}

/// Eigenpairs ordered by descending absolute eigenvalue.
#[derive(Debug, Clone)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    /// One orthonormal column per value.
    pub vectors: DMatrix<f64>,
    pub residuals: Vec<f64>,
    pub converged: Vec<bool>,
}

impl EigenPairs {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn all_converged(&self) -> bool {
        self.converged.iter().all(|&c| c)
    }

    /// Largest absolute eigenvalue, or 0 for an empty set.
    pub fn max_abs(&self) -> f64 {
        self.values.first().map_or(0.0, |v| v.abs())
    }
}

/// Default iteration cap for `k` requested pairs in dimension `dim`.
pub fn default_max_iter(k: usize, dim: usize) -> usize {
    (10 * k + 20).min(dim)
}

fn descending_abs_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .abs()
            .total_cmp(&values[a].abs())
            .then(values[b].total_cmp(&values[a]))
    });
    idx
}

fn random_unit(dim: usize, rng: &mut impl Rng) -> DVector<f64> {
    loop {
        let v = DVector::<f64>::from_fn(dim, |_, _| StandardNormal.sample(rng));
        let n = v.norm();
        if n > 0.0 {
            return v / n;
        }
    }
}

fn orthogonalize(w: &mut DVector<f64>, basis: &[DVector<f64>]) {
    // Two passes of classical Gram-Schmidt are enough to reach working precision.
    for _ in 0..2 {
        for b in basis {
            let c = b.dot(w);
            w.axpy(-c, b, 1.0);
        }
    }
}

/// The `k` largest-magnitude eigenpairs of a symmetric operator.
///
/// Lanczos with full reorthogonalization. A pair is converged when its Ritz
/// residual `|β_m s_{m,i}|` is below `tol · |θ_1|`. When the Krylov space
/// becomes invariant the iteration restarts from a fresh random vector
/// orthogonal to the current basis, which recovers repeated eigenvalues.
/// Unconverged pairs are still returned, flagged in `converged`.
pub fn lanczos_extreme_eigs(
    op: &dyn SymmetricOperator,
    k: usize,
    tol: f64,
    max_iter: Option<usize>,
    rng: &mut impl Rng,
) -> Result<EigenPairs> {
    let n = op.dim();
    if k == 0 || k > n {
        return Err(invalid(format!("requested {k} eigenpairs of a {n}-dimensional operator")));
    }
    if !(tol > 0.0) {
        return Err(invalid("Lanczos tolerance must be positive"));
    }
    let m_max = max_iter.unwrap_or_else(|| default_max_iter(k, n)).clamp(k, n);

    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(m_max);
    let mut alphas: Vec<f64> = Vec::with_capacity(m_max);
    let mut betas: Vec<f64> = Vec::with_capacity(m_max);
    let mut norm_estimate = 0.0f64;
    let mut q = random_unit(n, rng);
    let mut last_beta;

    loop {
        let j = basis.len();
        let mut w = op.apply(&q)?;
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::LeftSupport("operator produced a non-finite vector".into()));
        }
        let alpha = q.dot(&w);
        basis.push(q.clone());
        orthogonalize(&mut w, &basis);
        let beta = w.norm();
        alphas.push(alpha);
        norm_estimate = norm_estimate.max(alpha.abs()).max(beta);
        last_beta = beta;

        let m = j + 1;
        if m >= k {
            let (values, vectors) = tridiagonal_eig(&alphas, &betas);
            let order = descending_abs_order(values.as_slice());
            let scale = values[order[0]].abs();
            let done = order[..k]
                .iter()
                .all(|&i| (beta * vectors[(m - 1, i)]).abs() <= tol * scale);
            let breakdown = beta <= 1e-12 * norm_estimate.max(f64::MIN_POSITIVE);
            if (done && (!breakdown || k == 1)) || m == m_max {
                break;
            }
        }
        if m == m_max {
            break;
        }

        if beta <= 1e-12 * norm_estimate.max(f64::MIN_POSITIVE) {
            // Invariant subspace: restart in the orthogonal complement.
            let mut fresh = random_unit(n, rng);
            orthogonalize(&mut fresh, &basis);
            let fnorm = fresh.norm();
            if fnorm < 1e-8 {
                break;
            }
            q = fresh / fnorm;
            betas.push(0.0);
        } else {
            q = w / beta;
            betas.push(beta);
        }
    }

    let m = basis.len();
    let (values, s) = tridiagonal_eig(&alphas, &betas);
    let order = descending_abs_order(values.as_slice());
    let scale = values[order[0]].abs();
    let take = k.min(m);
    let mut vectors = DMatrix::zeros(n, take);
    let mut out_values = Vec::with_capacity(take);
    let mut residuals = Vec::with_capacity(take);
    let mut converged = Vec::with_capacity(take);
    for (col, &i) in order[..take].iter().enumerate() {
        let mut v = DVector::zeros(n);
        for (row, b) in basis.iter().enumerate() {
            v.axpy(s[(row, i)], b, 1.0);
        }
        let nv = v.norm();
        if nv > 0.0 {
            v /= nv;
        }
        vectors.set_column(col, &v);
        let r = (last_beta * s[(m - 1, i)]).abs();
        out_values.push(values[i]);
        residuals.push(r);
        converged.push(r <= tol * scale);
    }
    Ok(EigenPairs { values: out_values, vectors, residuals, converged })
}

fn tridiagonal_eig(alphas: &[f64], betas: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let m = alphas.len();
    let mut t = DMatrix::zeros(m, m);
    for i in 0..m {
        t[(i, i)] = alphas[i];
        if i + 1 < m {
            t[(i, i + 1)] = betas[i];
            t[(i + 1, i)] = betas[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    (eig.eigenvalues, eig.eigenvectors)
}

fn asymmetry(a: &DMatrix<f64>) -> f64 {
    (a - a.transpose()).abs().max()
}

/// Full eigendecomposition of a dense symmetric matrix, descending `|λ|`.
pub fn dense_sym_eig(a: &DMatrix<f64>) -> Result<EigenPairs> {
    if !a.is_square() {
        return Err(invalid("matrix must be square"));
    }
    let asym = asymmetry(a);
    if asym > 1e-12 * a.abs().max().max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    let n = a.nrows();
    let eig = SymmetricEigen::new(a.clone());
    let order = descending_abs_order(eig.eigenvalues.as_slice());
    let mut vectors = DMatrix::zeros(n, n);
    let mut values = Vec::with_capacity(n);
    let mut residuals = Vec::with_capacity(n);
    for (col, &i) in order.iter().enumerate() {
        let v = eig.eigenvectors.column(i);
        let lambda = eig.eigenvalues[i];
        residuals.push((a * v - v * lambda).norm());
        values.push(lambda);
        vectors.set_column(col, &v);
    }
    Ok(EigenPairs { values, vectors, residuals, converged: vec![true; n] })
}

/// Lower Cholesky factor `L` with `L Lᵀ = A`.
pub fn cholesky_lower(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(invalid("matrix must be square"));
    }
    let chol = nalgebra::Cholesky::new(a.clone()).ok_or(Error::NotPositiveDefinite)?;
    let l = chol.unpack();
    if l.diagonal().iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
        return Err(Error::NotPositiveDefinite);
    }
    Ok(l)
}

/// Inverse of a symmetric positive-definite matrix via its Cholesky factor.
pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = nalgebra::Cholesky::new(a.clone()).ok_or(Error::NotPositiveDefinite)?;
    Ok(chol.inverse())
}

/// Sample covariance (denominator `n - 1`) of the rows of `draws`.
pub fn sample_covariance(draws: &DMatrix<f64>) -> DMatrix<f64> {
    let n = draws.nrows();
    let d = draws.ncols();
    if n < 2 {
        return DMatrix::zeros(d, d);
    }
    let mean = draws.row_mean();
    let mut centered = draws.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (&cov + cov.transpose()) * 0.5
}

/// Per-column sample variance (denominator `n - 1`).
pub fn sample_variance(draws: &DMatrix<f64>) -> DVector<f64> {
    let n = draws.nrows();
    let d = draws.ncols();
    if n < 2 {
        return DVector::zeros(d);
    }
    DVector::from_fn(d, |j, _| {
        let col = draws.column(j);
        let mean = col.mean();
        col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)
    })
}
