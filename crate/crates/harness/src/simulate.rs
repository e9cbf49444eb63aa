//! In-memory execution of one configured experiment for one seed.

use engsf_core::baseline::{enkf_update, ensrf_update, sir_reweight, EnkfVariant};
use engsf_core::dynamics::{simulate_truth, Drift, DynamicsModel, Integrator};
use engsf_core::engsf::{
    effective_sample_size, engsf_step, forecast, resample, BandwidthRule, GaussianSumPosterior,
    ObservationOp,
};
use engsf_core::metrics::{
    ensemble_density_on_grid, gaussian_sum_on_grid, grid_bayes_posterior, kl_divergence,
    posterior_density_on_grid, rmse_between, time_averaged, uniform_grid, GridDensity,
    MetricSeries,
};
use engsf_core::rng::RngStream;
use engsf_core::stat::{sample_mvn, StateVector, WeightedEnsemble};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{Experiment, ExperimentConfig, FilterKind, ModelKind};
use crate::error::HarnessError;

/// Per-assimilation diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleDiagnostics {
    pub time: f64,
    pub n_eff: f64,
    pub gaussian_resampled: bool,
}

/// Densities on the shared 1-D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGrid {
    /// Time of the snapshot.
    pub time: f64,
    /// `(name, density)` columns; the estimate is always last.
    pub columns: Vec<(String, GridDensity)>,
}

/// Everything one seed produces.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub times: Vec<f64>,
    /// One column per time.
    pub truth: DMatrix<f64>,
    pub estimate: DMatrix<f64>,
    pub rmse: MetricSeries,
    pub time_averaged_rmse: f64,
    pub diagnostics: Vec<CycleDiagnostics>,
    pub posterior_grid: Option<PosteriorGrid>,
    pub kl: Option<MetricSeries>,
}

impl SeedRun {
    /// Mean of the KL series, if any.
    pub fn mean_kl(&self) -> Option<f64> {
        self.kl
            .as_ref()
            .filter(|k| !k.is_empty())
            .map(|k| k.values.iter().sum::<f64>() / k.len() as f64)
    }
}

/// Outcome of one analysis, independent of the filter.
pub struct Analysis {
    pub ensemble: WeightedEnsemble,
    pub estimate: StateVector,
    pub n_eff: f64,
    pub gaussian_resampled: bool,
    density: DensitySource,
}

enum DensitySource {
    Mixture(GaussianSumPosterior),
    Weighted(WeightedEnsemble),
}

impl Analysis {
    /// 1-D posterior density: the mixture itself for the EnGSF, a kernel
    /// density estimate otherwise.
    pub fn density(&self, grid: &[f64], rule: BandwidthRule) -> Result<GridDensity, HarnessError> {
        Ok(match &self.density {
            DensitySource::Mixture(p) => posterior_density_on_grid(p, grid)?,
            DensitySource::Weighted(e) => ensemble_density_on_grid(e, grid, rule)?,
        })
    }
}

/// Runs the configured filter's analysis step.
///
/// `rng` is the cycle label; children are `resample`,
/// `gaussian-resample` and `obs-perturb`.
pub fn analyse(
    filter: FilterKind,
    ens: &WeightedEnsemble,
    obs: &ObservationOp,
    y: &DVector<f64>,
    rule: BandwidthRule,
    rng: &RngStream,
) -> Result<Analysis, HarnessError> {
    let n = ens.len() as f64;
    Ok(match filter {
        FilterKind::Engsf => {
            let step = engsf_step(ens, obs, y, rule, rng)?;
            Analysis {
                estimate: step.posterior.mean(),
                ensemble: step.ensemble,
                n_eff: step.n_eff,
                gaussian_resampled: step.gaussian_resampled,
                density: DensitySource::Mixture(step.posterior),
            }
        }
        FilterKind::Enkf | FilterKind::EnkfAppendix => {
            let variant = if filter == FilterKind::Enkf {
                EnkfVariant::PerturbedObs
            } else {
                EnkfVariant::AppendixVariant
            };
            let out = enkf_update(ens, obs, y, variant, &rng.child("obs-perturb"))?;
            Analysis {
                estimate: out.mean(),
                density: DensitySource::Weighted(out.clone()),
                ensemble: out,
                n_eff: n,
                gaussian_resampled: false,
            }
        }
        FilterKind::Ensrf => {
            let out = ensrf_update(ens, obs, y)?;
            Analysis {
                estimate: out.mean(),
                density: DensitySource::Weighted(out.clone()),
                ensemble: out,
                n_eff: n,
                gaussian_resampled: false,
            }
        }
        FilterKind::Sir => {
            let weighted = sir_reweight(ens, obs, y)?;
            Analysis {
                estimate: weighted.mean(),
                n_eff: effective_sample_size(weighted.weights()),
                ensemble: resample(&weighted, &rng.child("resample")),
                gaussian_resampled: false,
                density: DensitySource::Weighted(weighted),
            }
        }
    })
}

/// Builds the dynamics model of a (non-static) configuration.
pub fn dynamics_model(cfg: &ExperimentConfig) -> Result<DynamicsModel, HarnessError> {
    let m = &cfg.model;
    let (drift, integrator, noise) = match m.kind {
        ModelKind::DoubleWell => (
            Drift::DoubleWell,
            Integrator::EulerMaruyama,
            DVector::from_element(1, m.kappa),
        ),
        ModelKind::Lorenz63 => (
            Drift::Lorenz63 {
                gamma: m.gamma,
                rho: m.rho,
                beta: m.beta,
            },
            Integrator::Rk4,
            DVector::from_iterator(m.dim, m.noise_var.iter().map(|v| v.sqrt())),
        ),
        ModelKind::Lorenz95 => (
            Drift::Lorenz95 { forcing: m.forcing },
            Integrator::Rk4,
            DVector::from_iterator(m.dim, m.noise_var.iter().map(|v| v.sqrt())),
        ),
    };
    Ok(DynamicsModel::new(drift, integrator, m.dt, noise)?)
}

/// The static two-mode problem: prior and likelihood on the grid and the
/// exact grid posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticOracle {
    pub prior: GridDensity,
    pub likelihood: Vec<f64>,
    pub posterior: GridDensity,
}

/// Evaluates the static problem on its configured grid.
pub fn static_oracle(cfg: &ExperimentConfig) -> Result<StaticOracle, HarnessError> {
    let grid = uniform_grid(cfg.grid.lower, cfg.grid.upper, cfg.grid.points);
    let k = cfg.prior.modes.len();
    let prior = gaussian_sum_on_grid(
        &vec![1.0 / k as f64; k],
        &cfg.prior.modes,
        cfg.prior.std * cfg.prior.std,
        &grid,
    )?;
    let var = cfg.obs.var;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * var).sqrt();
    let likelihood: Vec<f64> = grid
        .iter()
        .map(|x| {
            let d = cfg.obs.datum - x;
            norm * (-0.5 * d * d / var).exp()
        })
        .collect();
    let posterior = grid_bayes_posterior(&prior, &likelihood)?;
    Ok(StaticOracle {
        prior,
        likelihood,
        posterior,
    })
}

/// `n` draws from the equal-weight two-mode prior.
pub fn sample_static_prior(cfg: &ExperimentConfig, n: usize, rng: &RngStream) -> WeightedEnsemble {
    let mut gen = rng.rng();
    let k = cfg.prior.modes.len();
    let xs: Vec<f64> = (0..n)
        .map(|_| {
            let mode = cfg.prior.modes[gen.random_range(0..k)];
            let z: f64 = gen.sample(StandardNormal);
            mode + cfg.prior.std * z
        })
        .collect();
    WeightedEnsemble::uniform(DMatrix::from_row_slice(1, n, &xs)).expect("nonempty prior sample")
}

/// Runs one seed of the configuration.
pub fn simulate_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun, HarnessError> {
    match cfg.experiment {
        Experiment::Ex1 => run_static(cfg, seed),
        _ => run_twin(cfg, seed),
    }
}

fn run_static(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun, HarnessError> {
    let root = RngStream::new(seed, "");
    let oracle = static_oracle(cfg)?;
    let obs = ObservationOp::identity(1, cfg.obs.var)?;
    let y = DVector::from_element(1, cfg.obs.datum);
    let prior = sample_static_prior(cfg, cfg.n, &root.child("init"));
    let a = analyse(
        cfg.filter,
        &prior,
        &obs,
        &y,
        cfg.bandwidth,
        &root.child("analysis/cycle=0"),
    )?;
    let grid = oracle.posterior.points().to_vec();
    let est = a.density(&grid, cfg.bandwidth)?;
    let kl = kl_divergence(&oracle.posterior, &est)?;
    let truth = DMatrix::from_element(1, 1, oracle.posterior.mean());
    let estimate = DMatrix::from_element(1, 1, a.estimate[0]);
    let times = vec![0.0];
    let rmse = rmse_between(&times, &truth, &estimate)?;
    let likelihood = GridDensity::new(grid.clone(), oracle.likelihood.clone())?;
    Ok(SeedRun {
        seed,
        time_averaged_rmse: time_averaged(&rmse, 0),
        times: times.clone(),
        truth,
        estimate,
        rmse,
        diagnostics: vec![CycleDiagnostics {
            time: 0.0,
            n_eff: a.n_eff,
            gaussian_resampled: a.gaussian_resampled,
        }],
        posterior_grid: Some(PosteriorGrid {
            time: 0.0,
            columns: vec![
                ("prior".into(), oracle.prior),
                ("likelihood".into(), likelihood),
                ("oracle".into(), oracle.posterior),
                ("estimate".into(), est),
            ],
        }),
        kl: Some(MetricSeries {
            times,
            values: vec![kl],
        }),
    })
}

fn run_twin(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun, HarnessError> {
    let root = RngStream::new(seed, "");
    let model = dynamics_model(cfg)?;
    let m = model.dim();
    let obs = ObservationOp::identity(m, cfg.obs.var)?;
    let x0 = DVector::from_column_slice(&cfg.model.x0);
    let spinup = cfg.run.spinup;
    let start = if spinup > 0 {
        simulate_truth(&model, &x0, 0.0, spinup, &obs, 0, &root.child("spinup"))?.state(spinup)
    } else {
        x0
    };
    let t0 = spinup as f64 * model.dt;
    let steps = cfg.run.steps;
    let truth = simulate_truth(&model, &start, t0, steps, &obs, cfg.obs.every, &root)?;

    let init_cov = DMatrix::identity(m, m) * cfg.init.var;
    let init_mean = DVector::from_column_slice(&cfg.init.mean);
    let mut ens = WeightedEnsemble::uniform(sample_mvn(
        &init_mean,
        &init_cov,
        cfg.n,
        &root.child("init"),
    )?)?;

    // 1-D runs carry an SIR reference filter for KL diagnostics
    let one_d = m == 1 && cfg.grid.reference_n > 0;
    let grid = uniform_grid(cfg.grid.lower, cfg.grid.upper, cfg.grid.points);
    let reference_root = root.child("reference");
    let mut reference = if one_d {
        Some(WeightedEnsemble::uniform(sample_mvn(
            &init_mean,
            &init_cov,
            cfg.grid.reference_n,
            &reference_root.child("init"),
        )?)?)
    } else {
        None
    };
    let snapshot_cycle = truth
        .observations
        .iter()
        .enumerate()
        .min_by(|a, b| {
            let ta = (truth.times[a.1 .0] - cfg.grid.time).abs();
            let tb = (truth.times[b.1 .0] - cfg.grid.time).abs();
            ta.total_cmp(&tb)
        })
        .map(|(c, _)| c);

    let mut estimate = DMatrix::zeros(m, steps + 1);
    estimate.set_column(0, &ens.mean());
    let mut diagnostics = Vec::with_capacity(truth.observations.len());
    let mut kl = MetricSeries {
        times: Vec::new(),
        values: Vec::new(),
    };
    let mut posterior_grid = None;
    let mut next_obs = truth.observations.iter().enumerate().peekable();
    for k in 1..=steps {
        let label = format!("forecast/step={k}");
        ens = forecast(&ens, &model, 1, &root.child(&label))?;
        if let Some(r) = reference.as_mut() {
            *r = forecast(r, &model, 1, &reference_root.child(&label))?;
        }
        let mut est = ens.mean();
        if let Some((cycle, (_, y))) = next_obs.next_if(|(_, (idx, _))| *idx == k) {
            let label = format!("analysis/cycle={cycle}");
            let a = analyse(
                cfg.filter,
                &ens,
                &obs,
                y,
                cfg.bandwidth,
                &root.child(&label),
            )?;
            let time = truth.times[k];
            diagnostics.push(CycleDiagnostics {
                time,
                n_eff: a.n_eff,
                gaussian_resampled: a.gaussian_resampled,
            });
            if let Some(r) = reference.as_mut() {
                let ra = analyse(
                    FilterKind::Sir,
                    r,
                    &obs,
                    y,
                    cfg.bandwidth,
                    &reference_root.child(&label),
                )?;
                let p = ra.density(&grid, cfg.bandwidth)?;
                let q = a.density(&grid, cfg.bandwidth)?;
                kl.times.push(time);
                kl.values.push(kl_divergence(&p, &q)?);
                if Some(cycle) == snapshot_cycle {
                    posterior_grid = Some(PosteriorGrid {
                        time,
                        columns: vec![("reference".into(), p), ("estimate".into(), q)],
                    });
                }
                *r = ra.ensemble;
            } else if m == 1 && Some(cycle) == snapshot_cycle {
                posterior_grid = Some(PosteriorGrid {
                    time,
                    columns: vec![("estimate".into(), a.density(&grid, cfg.bandwidth)?)],
                });
            }
            est = a.estimate;
            ens = a.ensemble;
        }
        if !est.iter().all(|v| v.is_finite()) {
            return Err(engsf_core::FilterError::NonFiniteState { step: k }.into());
        }
        estimate.set_column(k, &est);
    }
    let rmse = rmse_between(&truth.times, &truth.states, &estimate)?;
    Ok(SeedRun {
        seed,
        time_averaged_rmse: time_averaged(&rmse, cfg.run.skip),
        times: truth.times,
        truth: truth.states,
        estimate,
        rmse,
        diagnostics,
        posterior_grid,
        kl: if one_d { Some(kl) } else { None },
    })
}
