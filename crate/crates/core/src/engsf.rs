//! Ensemble Gaussian sum filter.
//!
//! The forecast ensemble `{x_i, a_i}` is read as a Gaussian mixture whose
//! kernels share one covariance, the bandwidth `Sigma_f`, derived from the
//! weighted ensemble covariance. Conditioning the mixture on a linear
//! Gaussian observation gives another mixture with reweighted kernels,
//! Kalman-shifted means and a common contracted covariance. The analysis
//! means are then resampled back to an equally weighted ensemble. When one
//! kernel takes all the mass, a Gaussian resampling step spreads a fresh
//! ensemble around it instead of cloning a single particle.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::dynamics::DynamicsModel;
use crate::error::{FilterError, Result};
use crate::rng::RngStream;
use crate::stat::{
    cholesky_jittered, cholesky_pd, mixture_moments, normalize_log_weights, sample_with_factor,
    symmetrize, weighted_covariance, weighted_mean, Cholesky, CovMatrix, StateVector,
    WeightedEnsemble,
};

/// Posterior weight at or above which the Gaussian resampling path is taken.
pub const GAUSSIAN_RESAMPLE_THRESHOLD: f64 = 1.0 - 1e-9;

/// Linear observation `y = H x + r`, `r ~ N(0, R)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationOp {
    h: DMatrix<f64>,
    r: CovMatrix,
}

impl ObservationOp {
    pub fn new(h: DMatrix<f64>, r: CovMatrix) -> Result<Self> {
        let n = h.nrows();
        if n == 0 || r.nrows() != n || r.ncols() != n {
            return Err(FilterError::DimensionMismatch(format!(
                "H is {}x{}, R is {}x{}",
                h.nrows(),
                h.ncols(),
                r.nrows(),
                r.ncols()
            )));
        }
        for i in 0..n {
            for j in 0..i {
                if r[(i, j)] != r[(j, i)] {
                    return Err(FilterError::DimensionMismatch("R is not symmetric".into()));
                }
            }
        }
        let chol = cholesky_jittered(&r)?;
        if chol.jitter() != 0.0 || !chol.is_positive_definite() {
            return Err(FilterError::NotPositiveDefinite { max_jitter: 0.0 });
        }
        Ok(Self { h, r })
    }

    /// Observes every component with independent noise of variance `var`.
    pub fn identity(m: usize, var: f64) -> Result<Self> {
        Self::new(DMatrix::identity(m, m), DMatrix::identity(m, m) * var)
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn r(&self) -> &CovMatrix {
        &self.r
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.h.ncols()
    }

    pub fn is_r_diagonal(&self) -> bool {
        let n = self.obs_dim();
        (0..n).all(|i| (0..n).all(|j| i == j || self.r[(i, j)] == 0.0))
    }

    /// Same operator with `R` multiplied by `factor`.
    pub fn with_scaled_noise(&self, factor: f64) -> Result<Self> {
        Self::new(self.h.clone(), &self.r * factor)
    }
}

/// Kernel bandwidth rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BandwidthRule {
    /// `N^{-2/(m+2)} P_e`
    #[default]
    Modified,
    /// `N^{-2/(m+4)} P_e`
    Silverman,
    /// `c(m) N^{-2/(m+4)} P_e`
    SilvermanExactC,
}

impl BandwidthRule {
    pub fn factor(self, n: usize, m: usize) -> f64 {
        let n = n as f64;
        let m_f = m as f64;
        match self {
            BandwidthRule::Modified => n.powf(-2.0 / (m_f + 2.0)),
            BandwidthRule::Silverman => n.powf(-2.0 / (m_f + 4.0)),
            BandwidthRule::SilvermanExactC => silverman_c(m) * n.powf(-2.0 / (m_f + 4.0)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BandwidthRule::Modified => "modified",
            BandwidthRule::Silverman => "silverman",
            BandwidthRule::SilvermanExactC => "silverman-c",
        }
    }
}

impl fmt::Display for BandwidthRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BandwidthRule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "modified" => Ok(BandwidthRule::Modified),
            "silverman" => Ok(BandwidthRule::Silverman),
            "silverman-c" | "silverman_c" => Ok(BandwidthRule::SilvermanExactC),
            other => Err(format!("unknown bandwidth rule {other:?}")),
        }
    }
}

/// `(4/(m+2))^{2/(m+4)}`.
pub fn silverman_c(m: usize) -> f64 {
    let m = m as f64;
    (4.0 / (m + 2.0)).powf(2.0 / (m + 4.0))
}

/// Kernel covariance from the weighted ensemble covariance.
pub fn bandwidth_sigma(p_e: &CovMatrix, n: usize, m: usize, rule: BandwidthRule) -> CovMatrix {
    p_e * rule.factor(n.max(1), m)
}

/// Mixture posterior with a shared kernel covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSumPosterior {
    pub weights: DVector<f64>,
    /// One kernel mean per column.
    pub means: DMatrix<f64>,
    pub shared_cov: CovMatrix,
}

impl GaussianSumPosterior {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.means.nrows()
    }

    /// Index and value of the largest weight (first on ties).
    pub fn max_weight(&self) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, &w) in self.weights.iter().enumerate() {
            if w > best.1 {
                best = (i, w);
            }
        }
        best
    }

    /// Kernel means with their weights, dropping the covariance.
    pub fn as_ensemble(&self) -> Result<WeightedEnsemble> {
        WeightedEnsemble::new(self.means.clone(), self.weights.clone())
    }

    /// Mixture mean and covariance.
    pub fn moments(&self) -> (StateVector, CovMatrix) {
        let covs = vec![self.shared_cov.clone(); self.len()];
        mixture_moments(self.weights.as_slice(), &self.means, &covs)
            .expect("posterior shapes are consistent by construction")
    }

    pub fn mean(&self) -> StateVector {
        let m = self.dim();
        let mut mean = DVector::zeros(m);
        for (i, &w) in self.weights.iter().enumerate() {
            for k in 0..m {
                mean[k] += w * self.means[(k, i)];
            }
        }
        mean
    }
}

fn check_obs(prior_dim: usize, obs: &ObservationOp, y: &DVector<f64>) -> Result<()> {
    if obs.state_dim() != prior_dim || y.len() != obs.obs_dim() {
        return Err(FilterError::DimensionMismatch(format!(
            "state dim {prior_dim}, H is {}x{}, y has {}",
            obs.obs_dim(),
            obs.state_dim(),
            y.len()
        )));
    }
    Ok(())
}

/// Innovation factor and gain for a shared kernel covariance.
pub struct KalmanGain {
    /// Cholesky factor of `H Sigma H^T + R`.
    pub innovation: Cholesky,
    /// `Sigma H^T (H Sigma H^T + R)^{-1}`.
    pub gain: DMatrix<f64>,
}

/// Factors `H Sigma H^T + R` once and forms the gain through solves.
pub fn kalman_gain(sigma: &CovMatrix, obs: &ObservationOp) -> Result<KalmanGain> {
    let h = obs.h();
    let h_sigma = h * sigma;
    let mut s = &h_sigma * h.transpose() + obs.r();
    symmetrize(&mut s);
    let innovation = cholesky_jittered(&s)?;
    if !innovation.is_positive_definite() {
        return Err(FilterError::NotPositiveDefinite { max_jitter: 0.0 });
    }
    let gain = innovation.solve_matrix(&h_sigma).transpose();
    Ok(KalmanGain { innovation, gain })
}

/// Conditions the mixture `sum_i a_i N(x_i, sigma_f)` on `y`.
pub fn analysis_update(
    prior: &WeightedEnsemble,
    sigma_f: &CovMatrix,
    obs: &ObservationOp,
    y: &DVector<f64>,
) -> Result<GaussianSumPosterior> {
    let m = prior.dim();
    check_obs(m, obs, y)?;
    if sigma_f.nrows() != m || sigma_f.ncols() != m {
        return Err(FilterError::DimensionMismatch(
            "kernel covariance shape".into(),
        ));
    }
    let KalmanGain { innovation, gain } = kalman_gain(sigma_f, obs)?;
    let h = obs.h();
    let n = prior.len();
    let mut log_w = Vec::with_capacity(n);
    let mut means = prior.particles().clone();
    for i in 0..n {
        let x = prior.particles().column(i);
        let d = y - h * x;
        let a = prior.weights()[i];
        log_w.push(if a > 0.0 {
            a.ln() + innovation.log_density(&d)
        } else {
            f64::NEG_INFINITY
        });
        let shifted = x + &gain * d;
        means.set_column(i, &shifted);
    }
    let weights = normalize_log_weights(&log_w)?;
    let mut shared_cov = sigma_f - &gain * (h * sigma_f);
    symmetrize(&mut shared_cov);
    Ok(GaussianSumPosterior {
        weights,
        means,
        shared_cov,
    })
}

/// `1 / sum a_i^2`.
pub fn effective_sample_size(weights: &DVector<f64>) -> f64 {
    let s: f64 = weights.iter().map(|w| w * w).sum();
    1.0 / s
}

/// Single-pass CDF inversion for ascending uniforms in `(0, 1]`.
///
/// The running index is never reset, which is why the uniforms must be
/// sorted. Indices are 0-based.
pub fn resample_indices(weights: &[f64], sorted_uniforms: &[f64]) -> Vec<usize> {
    let n = weights.len();
    let mut cdf = Vec::with_capacity(n);
    let mut acc = 0.0;
    for &w in weights {
        acc += w;
        cdf.push(acc);
    }
    let last_positive = weights.iter().rposition(|&w| w > 0.0).unwrap_or(n - 1);
    let mut out = Vec::with_capacity(sorted_uniforms.len());
    let mut i = 0;
    for &u in sorted_uniforms {
        while i < n && cdf[i] < u {
            i += 1;
        }
        // rounding can leave cdf[n-1] just under u
        out.push(if i < n { i } else { last_positive });
    }
    out
}

/// Draws `n` uniforms on `(0, 1]` and sorts them ascending.
pub fn sorted_uniforms<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut u: Vec<f64> = (0..n).map(|_| 1.0 - rng.random::<f64>()).collect();
    u.sort_by(f64::total_cmp);
    u
}

/// Resamples to `N` equally weighted copies of input particles.
pub fn resample(input: &WeightedEnsemble, rng: &RngStream) -> WeightedEnsemble {
    let n = input.len();
    let u = sorted_uniforms(n, &mut rng.rng());
    let idx = resample_indices(input.weights().as_slice(), &u);
    let particles = input.particles().select_columns(idx.iter());
    WeightedEnsemble::uniform(particles).expect("copies of valid particles")
}

/// Spreads an equally weighted ensemble around `winner`.
///
/// With `c = N^{-2/(m+2)}` and forecast weights `a_j`, the gain uses
/// `Sigma_f = sum_j a_j c (x_j - xbar)(x_j - xbar)^T`. Member `j` of the
/// output is `winner + s_j + K (r_j - H s_j)` where
/// `s_j = sqrt(N a_j c) (x_j - xbar)` and `r_j ~ N(0, R)`, so the output
/// has mean `winner` and covariance `(I - K H) Sigma_f` as `N` grows.
pub fn gaussian_resample(
    winner: &StateVector,
    forecast: &WeightedEnsemble,
    obs: &ObservationOp,
    rng: &RngStream,
) -> Result<WeightedEnsemble> {
    let m = forecast.dim();
    let n = forecast.len();
    if winner.len() != m || obs.state_dim() != m {
        return Err(FilterError::DimensionMismatch(
            "gaussian_resample operands".into(),
        ));
    }
    let c = BandwidthRule::Modified.factor(n, m);
    let mean = weighted_mean(forecast);
    let mut perturb = DMatrix::zeros(m, n);
    let mut sigma_f = DMatrix::zeros(m, m);
    for j in 0..n {
        let a = forecast.weights()[j];
        let scale = (a * c).sqrt();
        let col = (forecast.particles().column(j) - &mean) * scale;
        for p in 0..m {
            for q in 0..=p {
                sigma_f[(p, q)] += col[p] * col[q];
            }
        }
        perturb.set_column(j, &(col * (n as f64).sqrt()));
    }
    symmetrize_from_lower(&mut sigma_f);
    let KalmanGain { gain, .. } = kalman_gain(&sigma_f, obs)?;
    let r_chol = cholesky_pd(obs.r())?;
    let noise = sample_with_factor(&DVector::zeros(obs.obs_dim()), &r_chol, n, &mut rng.rng());
    let h = obs.h();
    let mut out = DMatrix::zeros(m, n);
    for j in 0..n {
        let s = perturb.column(j);
        let innov = noise.column(j) - h * s;
        let col = winner + s + &gain * innov;
        out.set_column(j, &col);
    }
    WeightedEnsemble::uniform(out)
}

fn symmetrize_from_lower(a: &mut DMatrix<f64>) {
    let m = a.nrows();
    for i in 0..m {
        for j in 0..i {
            a[(j, i)] = a[(i, j)];
        }
    }
}

/// Advances every particle `steps` model steps; weights are unchanged.
///
/// Particle `i` draws its noise from substream `i` of `rng`.
pub fn forecast(
    input: &WeightedEnsemble,
    model: &DynamicsModel,
    steps: usize,
    rng: &RngStream,
) -> Result<WeightedEnsemble> {
    if model.dim() != input.dim() {
        return Err(FilterError::DimensionMismatch(format!(
            "model dimension {} for ensemble dimension {}",
            model.dim(),
            input.dim()
        )));
    }
    let keyed = rng.keyed();
    let mut particles = input.particles().clone();
    for i in 0..input.len() {
        let mut gen = keyed.substream(i as u64);
        let x = input.particles().column(i).into_owned();
        let moved = model.integrate(&x, steps, &mut gen)?;
        particles.set_column(i, &moved);
    }
    WeightedEnsemble::new(particles, input.weights().clone())
}

/// Result of one assimilation.
#[derive(Debug, Clone)]
pub struct EngsfStep {
    /// Equally weighted ensemble handed to the next forecast.
    pub ensemble: WeightedEnsemble,
    /// Mixture posterior before resampling.
    pub posterior: GaussianSumPosterior,
    /// Effective sample size of the posterior weights.
    pub n_eff: f64,
    pub gaussian_resampled: bool,
}

/// Bandwidth, mixture update and resampling on an already forecast ensemble.
///
/// Resampling uses `rng/resample`; the Gaussian resampling path uses
/// `rng/gaussian-resample`.
pub fn engsf_step(
    input: &WeightedEnsemble,
    obs: &ObservationOp,
    y: &DVector<f64>,
    rule: BandwidthRule,
    rng: &RngStream,
) -> Result<EngsfStep> {
    let p_e = weighted_covariance(input);
    let sigma_f = bandwidth_sigma(&p_e, input.len(), input.dim(), rule);
    let posterior = analysis_update(input, &sigma_f, obs, y)?;
    let n_eff = effective_sample_size(&posterior.weights);
    let (winner_idx, top) = posterior.max_weight();
    let (ensemble, gaussian_resampled) = if top >= GAUSSIAN_RESAMPLE_THRESHOLD {
        let winner = posterior.means.column(winner_idx).into_owned();
        let e = gaussian_resample(&winner, input, obs, &rng.child("gaussian-resample"))?;
        (e, true)
    } else {
        (
            resample(&posterior.as_ensemble()?, &rng.child("resample")),
            false,
        )
    };
    Ok(EngsfStep {
        ensemble,
        posterior,
        n_eff,
        gaussian_resampled,
    })
}
