//! Reference filters: stochastic EnKF (two algebraic forms), serial EnSRF
//! and the bootstrap SIR particle filter.
//!
//! The EnKF and EnSRF gains use the unbiased ensemble covariance with a
//! `1/(N-1)` factor. The EnGSF bandwidth instead starts from the weighted
//! covariance with no correction; the two conventions are kept apart on
//! purpose so each filter matches its usual definition.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::DynamicsModel;
use crate::engsf::{effective_sample_size, forecast, kalman_gain, resample, ObservationOp};
use crate::error::{FilterError, Result};
use crate::rng::RngStream;
use crate::stat::{cholesky_pd, sample_with_factor, WeightedEnsemble};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EnkfVariant {
    /// `A_a = A_f + K (D - H A_f)` with perturbed observations `D`.
    #[default]
    PerturbedObs,
    /// Mean and perturbations updated separately:
    /// `(Abar + K (Dbar - H Abar)) + (A' + K (D' - H A'))`.
    AppendixVariant,
}

impl fmt::Display for EnkfVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnkfVariant::PerturbedObs => "perturbed-obs",
            EnkfVariant::AppendixVariant => "split-mean",
        })
    }
}

impl FromStr for EnkfVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "perturbed-obs" => Ok(Self::PerturbedObs),
            "split-mean" => Ok(Self::AppendixVariant),
            other => Err(format!("unknown EnKF variant {other:?}")),
        }
    }
}

fn mean_and_anomalies(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (m, n) = a.shape();
    let mut mean = DVector::zeros(m);
    for j in 0..n {
        for k in 0..m {
            mean[k] += a[(k, j)];
        }
    }
    mean /= n as f64;
    let mut anom = a.clone();
    for j in 0..n {
        for k in 0..m {
            anom[(k, j)] -= mean[k];
        }
    }
    (mean, anom)
}

/// Unbiased sample covariance `A' A'^T / (N - 1)`.
pub fn sample_covariance(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.ncols();
    let (_, anom) = mean_and_anomalies(a);
    let mut c = &anom * anom.transpose() / (n as f64 - 1.0);
    crate::stat::symmetrize(&mut c);
    c
}

fn require_equal_weights(ens: &WeightedEnsemble) -> Result<()> {
    if ens.len() < 2 {
        return Err(FilterError::InvalidEnsemble(
            "need at least two members".into(),
        ));
    }
    if !ens.is_uniform() {
        return Err(FilterError::InvalidEnsemble(
            "ensemble must be equally weighted".into(),
        ));
    }
    Ok(())
}

/// Stochastic EnKF analysis with perturbed observations drawn from `rng`.
pub fn enkf_update(
    ens: &WeightedEnsemble,
    obs: &ObservationOp,
    y: &DVector<f64>,
    variant: EnkfVariant,
    rng: &RngStream,
) -> Result<WeightedEnsemble> {
    require_equal_weights(ens)?;
    if obs.state_dim() != ens.dim() || y.len() != obs.obs_dim() {
        return Err(FilterError::DimensionMismatch(
            "enkf_update operands".into(),
        ));
    }
    let a = ens.particles();
    let n = a.ncols();
    let p = sample_covariance(a);
    let k = kalman_gain(&p, obs)?.gain;
    let r_chol = cholesky_pd(obs.r())?;
    let d = sample_with_factor(y, &r_chol, n, &mut rng.rng());
    let h = obs.h();
    let updated = match variant {
        EnkfVariant::PerturbedObs => a + &k * (&d - h * a),
        EnkfVariant::AppendixVariant => {
            let (a_mean, a_anom) = mean_and_anomalies(a);
            let (d_mean, d_anom) = mean_and_anomalies(&d);
            let center = &a_mean + &k * (&d_mean - h * &a_mean);
            let spread = &a_anom + &k * (&d_anom - h * &a_anom);
            let mut out = spread;
            for j in 0..n {
                for r in 0..out.nrows() {
                    out[(r, j)] += center[r];
                }
            }
            out
        }
    };
    WeightedEnsemble::uniform(updated)
}

/// Serial square-root update, one scalar observation at a time.
///
/// The mean moves with the Kalman gain `K`; anomalies move with
/// `K / (1 + sqrt(r / (h P h^T + r)))`. No random draws are used.
pub fn ensrf_update(
    ens: &WeightedEnsemble,
    obs: &ObservationOp,
    y: &DVector<f64>,
) -> Result<WeightedEnsemble> {
    require_equal_weights(ens)?;
    if obs.state_dim() != ens.dim() || y.len() != obs.obs_dim() {
        return Err(FilterError::DimensionMismatch(
            "ensrf_update operands".into(),
        ));
    }
    if !obs.is_r_diagonal() {
        return Err(FilterError::NonDiagonalR);
    }
    let n = ens.len();
    let m = ens.dim();
    let (mut mean, mut anom) = mean_and_anomalies(ens.particles());
    let nm1 = n as f64 - 1.0;
    for j in 0..obs.obs_dim() {
        let h = obs.h().row(j);
        let r = obs.r()[(j, j)];
        let hx: DVector<f64> = (h * &anom).transpose();
        let hph = hx.norm_squared() / nm1;
        let ph: DVector<f64> = &anom * &hx / nm1;
        let denom = hph + r;
        let gain = &ph / denom;
        let innovation = y[j] - (h * &mean)[0];
        mean += &gain * innovation;
        let reduced = &gain / (1.0 + (r / denom).sqrt());
        for c in 0..n {
            let v = hx[c];
            for k in 0..m {
                anom[(k, c)] -= reduced[k] * v;
            }
        }
    }
    for c in 0..n {
        for k in 0..m {
            anom[(k, c)] += mean[k];
        }
    }
    WeightedEnsemble::uniform(anom)
}

/// Multiplies weights by `N(y - H x_i; 0, R)` in the log domain.
pub fn sir_reweight(
    ens: &WeightedEnsemble,
    obs: &ObservationOp,
    y: &DVector<f64>,
) -> Result<WeightedEnsemble> {
    if obs.state_dim() != ens.dim() || y.len() != obs.obs_dim() {
        return Err(FilterError::DimensionMismatch(
            "sir_reweight operands".into(),
        ));
    }
    let chol = cholesky_pd(obs.r())?;
    let h = obs.h();
    let log_w: Vec<f64> = (0..ens.len())
        .map(|i| {
            let a = ens.weights()[i];
            if a > 0.0 {
                let d = y - h * ens.particles().column(i);
                a.ln() + chol.log_density(&d)
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    WeightedEnsemble::from_log_weights(ens.particles().clone(), &log_w)
}

/// Result of one bootstrap-filter cycle.
#[derive(Debug, Clone)]
pub struct SirStep {
    /// Weighted ensemble before resampling.
    pub weighted: WeightedEnsemble,
    pub n_eff: f64,
    /// Equally weighted ensemble after resampling.
    pub ensemble: WeightedEnsemble,
}

/// Forecast with process noise, likelihood reweighting, then resampling.
///
/// Forecast noise uses `rng/forecast`, resampling `rng/resample`.
pub fn sir_step(
    ens: &WeightedEnsemble,
    model: &DynamicsModel,
    steps: usize,
    obs: &ObservationOp,
    y: &DVector<f64>,
    rng: &RngStream,
) -> Result<SirStep> {
    let moved = forecast(ens, model, steps, &rng.child("forecast"))?;
    let weighted = sir_reweight(&moved, obs, y)?;
    let n_eff = effective_sample_size(weighted.weights());
    let ensemble = resample(&weighted, &rng.child("resample"));
    Ok(SirStep {
        weighted,
        n_eff,
        ensemble,
    })
}
