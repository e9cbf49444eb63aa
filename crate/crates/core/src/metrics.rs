//! Grid densities, the grid-Bayes reference posterior, discrete KL
//! divergence and RMSE series.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::dynamics::TrajectoryRecord;
use crate::engsf::{bandwidth_sigma, BandwidthRule, GaussianSumPosterior};
use crate::stat::{weighted_covariance, WeightedEnsemble, LN_2PI};

/// Floor applied to the approximating density inside the KL sum.
pub const KL_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("density has zero mass on the grid")]
    ZeroMass,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
}

/// Trapezoid quadrature weights of a strictly increasing grid.
pub fn trapezoid_weights(points: &[f64]) -> Vec<f64> {
    let n = points.len();
    let mut w = vec![0.0; n];
    for i in 0..n.saturating_sub(1) {
        let h = points[i + 1] - points[i];
        w[i] += 0.5 * h;
        w[i + 1] += 0.5 * h;
    }
    w
}

/// `n` evenly spaced points on `[lower, upper]`.
pub fn uniform_grid(lower: f64, upper: f64, n: usize) -> Vec<f64> {
    let h = (upper - lower) / (n - 1) as f64;
    (0..n)
        .map(|i| {
            if i + 1 == n {
                upper
            } else {
                lower + h * i as f64
            }
        })
        .collect()
}

/// A non-negative density on a 1-D grid, normalized by the trapezoid rule.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    points: Vec<f64>,
    values: Vec<f64>,
    weights: Vec<f64>,
}

impl GridDensity {
    /// Normalizes `values` on `points`.
    pub fn new(points: Vec<f64>, values: Vec<f64>) -> Result<Self, MetricsError> {
        if points.len() < 2 {
            return Err(MetricsError::InvalidGrid("need at least two points".into()));
        }
        if points.len() != values.len() {
            return Err(MetricsError::LengthMismatch(format!(
                "{} points, {} values",
                points.len(),
                values.len()
            )));
        }
        if points.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(MetricsError::InvalidGrid(
                "points must increase strictly".into(),
            ));
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(MetricsError::InvalidGrid(
                "values must be finite and non-negative".into(),
            ));
        }
        let weights = trapezoid_weights(&points);
        let mass: f64 = values.iter().zip(&weights).map(|(v, w)| v * w).sum();
        if !(mass > 0.0) {
            return Err(MetricsError::ZeroMass);
        }
        let values = values.into_iter().map(|v| v / mass).collect();
        Ok(Self {
            points,
            values,
            weights,
        })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn quadrature_weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mass(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.weights)
            .map(|(v, w)| v * w)
            .sum()
    }

    pub fn mean(&self) -> f64 {
        self.points
            .iter()
            .zip(&self.values)
            .zip(&self.weights)
            .map(|((x, v), w)| x * v * w)
            .sum()
    }

    pub fn variance(&self) -> f64 {
        let mu = self.mean();
        self.points
            .iter()
            .zip(&self.values)
            .zip(&self.weights)
            .map(|((x, v), w)| (x - mu) * (x - mu) * v * w)
            .sum()
    }

    fn same_grid(&self, other: &GridDensity) -> bool {
        self.points == other.points
    }
}

/// Pointwise product of prior and likelihood, renormalized.
pub fn grid_bayes_posterior(
    prior: &GridDensity,
    likelihood: &[f64],
) -> Result<GridDensity, MetricsError> {
    if likelihood.len() != prior.points.len() {
        return Err(MetricsError::LengthMismatch(format!(
            "{} grid points, {} likelihood values",
            prior.points.len(),
            likelihood.len()
        )));
    }
    let values = prior
        .values
        .iter()
        .zip(likelihood)
        .map(|(p, l)| p * l)
        .collect();
    GridDensity::new(prior.points.clone(), values)
}

/// Evaluates `sum_i w_i N(x; mu_i, var)` on `grid` and normalizes.
pub fn gaussian_sum_on_grid(
    weights: &[f64],
    means: &[f64],
    var: f64,
    grid: &[f64],
) -> Result<GridDensity, MetricsError> {
    if weights.len() != means.len() {
        return Err(MetricsError::LengthMismatch("weights and means".into()));
    }
    if !(var > 0.0) {
        return Err(MetricsError::InvalidGrid(format!("kernel variance {var}")));
    }
    let log_norm = -0.5 * (LN_2PI + var.ln());
    let inv = 0.5 / var;
    // kernels beyond 40 standard deviations contribute below exp(-800)
    let cutoff = 40.0 * var.sqrt();
    let mut order: Vec<usize> = (0..means.len()).filter(|&i| weights[i] > 0.0).collect();
    order.sort_by(|&a, &b| means[a].total_cmp(&means[b]));
    let sorted_means: Vec<f64> = order.iter().map(|&i| means[i]).collect();
    let values: Vec<f64> = grid
        .iter()
        .map(|&x| {
            let lo = sorted_means.partition_point(|&m| m < x - cutoff);
            let hi = sorted_means.partition_point(|&m| m <= x + cutoff);
            let mut s = 0.0;
            for &i in &order[lo..hi] {
                let d = x - means[i];
                s += weights[i] * (log_norm - inv * d * d).exp();
            }
            s
        })
        .collect();
    GridDensity::new(grid.to_vec(), values)
}

/// Density of a 1-D mixture posterior on a grid.
pub fn posterior_density_on_grid(
    posterior: &GaussianSumPosterior,
    grid: &[f64],
) -> Result<GridDensity, MetricsError> {
    if posterior.dim() != 1 {
        return Err(MetricsError::InvalidGrid(
            "posterior must be one-dimensional".into(),
        ));
    }
    gaussian_sum_on_grid(
        posterior.weights.as_slice(),
        posterior.means.row(0).transpose().as_slice(),
        posterior.shared_cov[(0, 0)],
        grid,
    )
}

/// Gaussian kernel density estimate of a 1-D weighted ensemble.
///
/// The kernel variance comes from the bandwidth rule applied to the
/// weighted ensemble variance.
pub fn ensemble_density_on_grid(
    ens: &WeightedEnsemble,
    grid: &[f64],
    rule: BandwidthRule,
) -> Result<GridDensity, MetricsError> {
    if ens.dim() != 1 {
        return Err(MetricsError::InvalidGrid(
            "ensemble must be one-dimensional".into(),
        ));
    }
    let var = bandwidth_sigma(&weighted_covariance(ens), ens.len(), 1, rule)[(0, 0)];
    gaussian_sum_on_grid(
        ens.weights().as_slice(),
        ens.particles().row(0).transpose().as_slice(),
        var,
        grid,
    )
}

/// `sum_i log(p_i / q_i) p_i dx_i`, with `q` floored at `KL_FLOOR`.
pub fn kl_divergence(p: &GridDensity, q: &GridDensity) -> Result<f64, MetricsError> {
    if !p.same_grid(q) {
        return Err(MetricsError::LengthMismatch(
            "densities use different grids".into(),
        ));
    }
    let mut total = 0.0;
    for i in 0..p.values.len() {
        let pi = p.values[i];
        if pi > 0.0 {
            let qi = q.values[i].max(KL_FLOOR);
            total += (pi / qi).ln() * pi * p.weights[i];
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSeries {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl MetricSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `sqrt(mean_k (x_k - xhat_k)^2)` at each time.
///
/// `estimates` has one column per entry of `truth.times`.
pub fn rmse_series(
    truth: &TrajectoryRecord,
    estimates: &DMatrix<f64>,
) -> Result<MetricSeries, MetricsError> {
    rmse_between(&truth.times, &truth.states, estimates)
}

/// RMSE between two aligned state matrices.
pub fn rmse_between(
    times: &[f64],
    truth: &DMatrix<f64>,
    estimates: &DMatrix<f64>,
) -> Result<MetricSeries, MetricsError> {
    if truth.shape() != estimates.shape() || truth.ncols() != times.len() {
        return Err(MetricsError::LengthMismatch(format!(
            "truth {:?}, estimates {:?}, {} times",
            truth.shape(),
            estimates.shape(),
            times.len()
        )));
    }
    let m = truth.nrows() as f64;
    let values = (0..truth.ncols())
        .map(|k| {
            let mut s = 0.0;
            for r in 0..truth.nrows() {
                let d = truth[(r, k)] - estimates[(r, k)];
                s += d * d;
            }
            (s / m).sqrt()
        })
        .collect();
    Ok(MetricSeries {
        times: times.to_vec(),
        values,
    })
}

/// Mean of the series after dropping the first `skip` entries.
pub fn time_averaged(series: &MetricSeries, skip: usize) -> f64 {
    let kept = &series.values[skip.min(series.values.len())..];
    if kept.is_empty() {
        return f64::NAN;
    }
    kept.iter().sum::<f64>() / kept.len() as f64
}
