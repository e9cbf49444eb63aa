//! Dense small-matrix statistics: weighted moments, Gaussian densities,
//! jittered Cholesky factors and multivariate normal sampling.
//!
//! Reductions run in a fixed sequential order so that results are
//! bit-reproducible for a given input.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{FilterError, Result};
use crate::rng::RngStream;

pub type StateVector = DVector<f64>;
pub type CovMatrix = DMatrix<f64>;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Relative tolerance used when checking covariance symmetry.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Allowed deviation of a weight vector's sum from one.
pub fn weight_sum_tolerance(n: usize) -> f64 {
    1e-12_f64.max(n as f64 * f64::EPSILON)
}

/// Particles (columns of an `m x N` matrix) with probability weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedEnsemble {
    particles: DMatrix<f64>,
    weights: DVector<f64>,
}

impl WeightedEnsemble {
    pub fn new(particles: DMatrix<f64>, weights: DVector<f64>) -> Result<Self> {
        let n = particles.ncols();
        if n == 0 || particles.nrows() == 0 {
            return Err(FilterError::InvalidEnsemble("empty ensemble".into()));
        }
        if weights.len() != n {
            return Err(FilterError::InvalidEnsemble(format!(
                "{} weights for {} particles",
                weights.len(),
                n
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(FilterError::InvalidEnsemble(
                "weights must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > weight_sum_tolerance(n) {
            return Err(FilterError::InvalidEnsemble(format!(
                "weights sum to {sum}"
            )));
        }
        if particles.iter().any(|v| !v.is_finite()) {
            return Err(FilterError::InvalidEnsemble(
                "particles must be finite".into(),
            ));
        }
        Ok(Self { particles, weights })
    }

    /// Equal weights `1/N`.
    pub fn uniform(particles: DMatrix<f64>) -> Result<Self> {
        let n = particles.ncols();
        let w = DVector::from_element(n, 1.0 / n.max(1) as f64);
        Self::new(particles, w)
    }

    /// Builds an ensemble from unnormalized log-weights via log-sum-exp.
    pub fn from_log_weights(particles: DMatrix<f64>, log_weights: &[f64]) -> Result<Self> {
        let weights = normalize_log_weights(log_weights)?;
        Self::new(particles, weights)
    }

    pub fn dim(&self) -> usize {
        self.particles.nrows()
    }

    pub fn len(&self) -> usize {
        self.particles.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn particles(&self) -> &DMatrix<f64> {
        &self.particles
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn particle(&self, i: usize) -> StateVector {
        self.particles.column(i).into_owned()
    }

    pub fn into_parts(self) -> (DMatrix<f64>, DVector<f64>) {
        (self.particles, self.weights)
    }

    /// True when every weight equals `1/N` exactly.
    pub fn is_uniform(&self) -> bool {
        let w = 1.0 / self.len() as f64;
        self.weights.iter().all(|&x| x == w)
    }

    pub fn mean(&self) -> StateVector {
        weighted_mean(self)
    }

    pub fn covariance(&self) -> CovMatrix {
        weighted_covariance(self)
    }
}

/// Normalizes log-weights with a max shift. Fails when no weight is finite.
pub fn normalize_log_weights(log_weights: &[f64]) -> Result<DVector<f64>> {
    let max = log_weights
        .iter()
        .copied()
        .filter(|v| !v.is_nan())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(FilterError::AllWeightsZero);
    }
    let mut w: Vec<f64> = log_weights
        .iter()
        .map(|&lw| if lw.is_nan() { 0.0 } else { (lw - max).exp() })
        .collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    Ok(DVector::from_vec(w))
}

/// `sum_i a_i x_i`.
pub fn weighted_mean(e: &WeightedEnsemble) -> StateVector {
    let m = e.dim();
    let mut mean = DVector::zeros(m);
    for (i, &w) in e.weights.iter().enumerate() {
        for k in 0..m {
            mean[k] += w * e.particles[(k, i)];
        }
    }
    mean
}

/// `sum_i a_i (x_i - xbar)(x_i - xbar)^T`, without any bias correction.
pub fn weighted_covariance(e: &WeightedEnsemble) -> CovMatrix {
    let mean = weighted_mean(e);
    weighted_spread(&e.particles, e.weights.as_slice(), &mean)
}

fn weighted_spread(points: &DMatrix<f64>, weights: &[f64], mean: &StateVector) -> CovMatrix {
    let m = points.nrows();
    let mut cov = DMatrix::zeros(m, m);
    let mut d = vec![0.0; m];
    for (i, &w) in weights.iter().enumerate() {
        for k in 0..m {
            d[k] = points[(k, i)] - mean[k];
        }
        for a in 0..m {
            let wa = w * d[a];
            for b in 0..=a {
                cov[(a, b)] += wa * d[b];
            }
        }
    }
    mirror_lower(&mut cov);
    cov
}

fn mirror_lower(a: &mut DMatrix<f64>) {
    let m = a.nrows();
    for i in 0..m {
        for j in 0..i {
            a[(j, i)] = a[(i, j)];
        }
    }
}

/// Replaces `a` by `(a + a^T) / 2`.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let m = a.nrows();
    for i in 0..m {
        for j in 0..i {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Mean and covariance of `sum_i a_i N(x_i, S_i)`.
///
/// `means` holds one kernel mean per column and `kernel_covs` one covariance
/// per kernel.
pub fn mixture_moments(
    weights: &[f64],
    means: &DMatrix<f64>,
    kernel_covs: &[CovMatrix],
) -> Result<(StateVector, CovMatrix)> {
    let l = weights.len();
    if means.ncols() != l || kernel_covs.len() != l {
        return Err(FilterError::DimensionMismatch(format!(
            "{} weights, {} means, {} covariances",
            l,
            means.ncols(),
            kernel_covs.len()
        )));
    }
    let m = means.nrows();
    let mut mean = DVector::zeros(m);
    for (i, &w) in weights.iter().enumerate() {
        for k in 0..m {
            mean[k] += w * means[(k, i)];
        }
    }
    let mut cov = weighted_spread(means, weights, &mean);
    for (w, s) in weights.iter().zip(kernel_covs) {
        if s.nrows() != m || s.ncols() != m {
            return Err(FilterError::DimensionMismatch(
                "kernel covariance shape".into(),
            ));
        }
        cov += s * *w;
    }
    Ok((mean, cov))
}

/// Lower-triangular factor `L` with `L L^T = cov + jitter I`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    l: DMatrix<f64>,
    jitter: f64,
}

impl Cholesky {
    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// False only for the exact zero factor of an all-zero matrix.
    pub fn is_positive_definite(&self) -> bool {
        (0..self.dim()).all(|i| self.l[(i, i)] > 0.0)
    }

    pub fn log_det(&self) -> f64 {
        (0..self.dim()).map(|i| self.l[(i, i)].ln()).sum::<f64>() * 2.0
    }

    /// Solves `L z = b` by forward substitution.
    pub fn solve_lower(&self, b: &StateVector) -> StateVector {
        let m = self.dim();
        let mut z = b.clone();
        for i in 0..m {
            let mut s = z[i];
            for k in 0..i {
                s -= self.l[(i, k)] * z[k];
            }
            z[i] = s / self.l[(i, i)];
        }
        z
    }

    /// Solves `L^T x = z` by back substitution.
    pub fn solve_upper(&self, z: &StateVector) -> StateVector {
        let m = self.dim();
        let mut x = z.clone();
        for i in (0..m).rev() {
            let mut s = x[i];
            for k in i + 1..m {
                s -= self.l[(k, i)] * x[k];
            }
            x[i] = s / self.l[(i, i)];
        }
        x
    }

    /// Solves `(L L^T) x = b`.
    pub fn solve(&self, b: &StateVector) -> StateVector {
        self.solve_upper(&self.solve_lower(b))
    }

    /// Solves `(L L^T) X = B` column by column.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(b.nrows(), b.ncols());
        for j in 0..b.ncols() {
            let x = self.solve(&b.column(j).into_owned());
            out.set_column(j, &x);
        }
        out
    }

    /// `d^T (L L^T)^{-1} d`.
    pub fn mahalanobis(&self, d: &StateVector) -> f64 {
        self.solve_lower(d).norm_squared()
    }

    /// `log N(d; 0, L L^T)`.
    pub fn log_density(&self, d: &StateVector) -> f64 {
        -0.5 * (self.dim() as f64 * LN_2PI + self.log_det() + self.mahalanobis(d))
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }
}

fn cholesky_with_shift(a: &DMatrix<f64>, shift: f64) -> Option<DMatrix<f64>> {
    let m = a.nrows();
    let mut l = DMatrix::zeros(m, m);
    for j in 0..m {
        let mut d = a[(j, j)] + shift;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..m {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Some(l)
}

/// Cholesky factorization with diagonal jitter.
///
/// Tries `eps = 0`, then `1e-10 * trace/m`, growing tenfold per retry up to
/// `1e-6 * trace/m`. An all-zero matrix yields the zero factor.
pub fn cholesky_jittered(cov: &CovMatrix) -> Result<Cholesky> {
    let m = cov.nrows();
    if m == 0 || cov.ncols() != m {
        return Err(FilterError::DimensionMismatch(format!(
            "covariance is {}x{}",
            cov.nrows(),
            cov.ncols()
        )));
    }
    if let Some(l) = cholesky_with_shift(cov, 0.0) {
        return Ok(Cholesky { l, jitter: 0.0 });
    }
    if cov.iter().all(|&v| v == 0.0) {
        return Ok(Cholesky {
            l: DMatrix::zeros(m, m),
            jitter: 0.0,
        });
    }
    let scale = cov.trace() / m as f64;
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(FilterError::NotPositiveDefinite { max_jitter: 0.0 });
    }
    let mut rel = 1e-10;
    while rel <= 1e-6 * (1.0 + 1e-9) {
        let eps = rel * scale;
        if let Some(l) = cholesky_with_shift(cov, eps) {
            return Ok(Cholesky { l, jitter: eps });
        }
        rel *= 10.0;
    }
    Err(FilterError::NotPositiveDefinite {
        max_jitter: 1e-6 * scale,
    })
}

/// Cholesky factor that must be strictly positive definite.
pub fn cholesky_pd(cov: &CovMatrix) -> Result<Cholesky> {
    let c = cholesky_jittered(cov)?;
    if c.is_positive_definite() {
        Ok(c)
    } else {
        Err(FilterError::NotPositiveDefinite { max_jitter: 0.0 })
    }
}

/// `log N(x; mean, cov)`, solved through the Cholesky factor.
pub fn gaussian_logpdf(x: &StateVector, mean: &StateVector, cov: &CovMatrix) -> Result<f64> {
    if x.len() != mean.len() || cov.nrows() != x.len() {
        return Err(FilterError::DimensionMismatch(
            "gaussian_logpdf operands".into(),
        ));
    }
    let chol = cholesky_pd(cov)?;
    Ok(chol.log_density(&(x - mean)))
}

/// `n` columns of `mean + L z` with `z` standard normal from `rng`.
pub fn sample_mvn(
    mean: &StateVector,
    cov: &CovMatrix,
    n: usize,
    rng: &RngStream,
) -> Result<DMatrix<f64>> {
    if cov.nrows() != mean.len() {
        return Err(FilterError::DimensionMismatch("sample_mvn operands".into()));
    }
    let chol = cholesky_jittered(cov)?;
    let mut gen = rng.rng();
    Ok(sample_with_factor(mean, &chol, n, &mut gen))
}

/// Draws from `N(mean, L L^T)` using an existing factor.
pub fn sample_with_factor<R: Rng + ?Sized>(
    mean: &StateVector,
    chol: &Cholesky,
    n: usize,
    rng: &mut R,
) -> DMatrix<f64> {
    let m = mean.len();
    let mut out = DMatrix::zeros(m, n);
    let mut z = vec![0.0; m];
    for j in 0..n {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for a in 0..m {
            let mut s = mean[a];
            for (b, zb) in z.iter().enumerate().take(a + 1) {
                s += chol.l[(a, b)] * zb;
            }
            out[(a, j)] = s;
        }
    }
    out
}

/// Checks symmetry (relative `1e-12`) and `min eig >= -1e-10 * trace/m`.
pub fn is_valid_covariance(c: &CovMatrix) -> bool {
    let m = c.nrows();
    if m == 0 || c.ncols() != m || c.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let scale = c
        .iter()
        .fold(0.0_f64, |a, v| a.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    for i in 0..m {
        for j in 0..i {
            if (c[(i, j)] - c[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return false;
            }
        }
    }
    let mut sym = c.clone();
    symmetrize(&mut sym);
    let min_eig = sym.symmetric_eigenvalues().min();
    min_eig >= -1e-10 * (c.trace().abs() / m as f64).max(f64::MIN_POSITIVE)
}
