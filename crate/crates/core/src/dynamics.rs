//! Benchmark models: double-well SDE, Lorenz63, Lorenz95 and linear test
//! systems, with RK4, Euler-Maruyama or plain discrete-map stepping.
//!
//! Process noise is additive: after the deterministic update each component
//! receives `sigma_k * sqrt(dt) * xi` with `xi ~ N(0, 1)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::engsf::ObservationOp;
use crate::error::{FilterError, Result};
use crate::rng::RngStream;
use crate::stat::{cholesky_pd, sample_with_factor, StateVector};

/// `4u - 4u^3`, the gradient flow of the potential `2u^2 - u^4`.
pub fn double_well_drift(u: f64) -> f64 {
    4.0 * u - 4.0 * u * u * u
}

pub fn lorenz63_drift(s: &StateVector, gamma: f64, rho: f64, beta: f64) -> StateVector {
    let (x, y, z) = (s[0], s[1], s[2]);
    DVector::from_vec(vec![gamma * (y - x), rho * x - y - x * z, x * y - beta * z])
}

/// `dx_j/dt = (x_{j+1} - x_{j-2}) x_{j-1} - x_j + F` with cyclic indices.
pub fn lorenz95_drift(s: &StateVector, forcing: f64) -> StateVector {
    let m = s.len();
    assert!(m >= 4, "Lorenz95 needs at least four components");
    DVector::from_fn(m, |j, _| {
        let p1 = s[(j + 1) % m];
        let m1 = s[(j + m - 1) % m];
        let m2 = s[(j + m - 2) % m];
        (p1 - m2) * m1 - s[j] + forcing
    })
}

/// Deterministic part of a model.
#[derive(Debug, Clone, PartialEq)]
pub enum Drift {
    Zero,
    DoubleWell,
    Lorenz63 {
        gamma: f64,
        rho: f64,
        beta: f64,
    },
    Lorenz95 {
        forcing: f64,
    },
    /// `f(x) = A x`.
    Linear(DMatrix<f64>),
}

impl Drift {
    pub fn lorenz63_standard() -> Self {
        Drift::Lorenz63 {
            gamma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
        }
    }

    pub fn eval(&self, x: &StateVector) -> StateVector {
        match self {
            Drift::Zero => DVector::zeros(x.len()),
            Drift::DoubleWell => x.map(double_well_drift),
            Drift::Lorenz63 { gamma, rho, beta } => lorenz63_drift(x, *gamma, *rho, *beta),
            Drift::Lorenz95 { forcing } => lorenz95_drift(x, *forcing),
            Drift::Linear(a) => a * x,
        }
    }
}

/// Classical fourth-order Runge-Kutta step of `dx/dt = f(x)`.
pub fn rk4_step<F>(f: F, x: &StateVector, dt: f64) -> Result<StateVector>
where
    F: Fn(&StateVector) -> StateVector,
{
    let k1 = f(x);
    let k2 = f(&(x + &k1 * (0.5 * dt)));
    let k3 = f(&(x + &k2 * (0.5 * dt)));
    let k4 = f(&(x + &k3 * dt));
    let out = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(FilterError::NonFiniteState { step: 1 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrator {
    Rk4,
    EulerMaruyama,
    /// `x_{k+1} = f(x_k)`: the drift is the map itself.
    DiscreteMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsModel {
    pub drift: Drift,
    pub integrator: Integrator,
    pub dt: f64,
    /// Per-component noise standard deviation per unit time.
    pub noise_std: DVector<f64>,
}

impl DynamicsModel {
    pub fn new(
        drift: Drift,
        integrator: Integrator,
        dt: f64,
        noise_std: DVector<f64>,
    ) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(FilterError::DimensionMismatch(format!(
                "dt must be positive, got {dt}"
            )));
        }
        if noise_std.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(FilterError::DimensionMismatch(
                "noise standard deviations must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            drift,
            integrator,
            dt,
            noise_std,
        })
    }

    pub fn dim(&self) -> usize {
        self.noise_std.len()
    }

    pub fn has_noise(&self) -> bool {
        self.noise_std.iter().any(|&s| s > 0.0)
    }

    /// Deterministic part of one step.
    pub fn deterministic_step(&self, x: &StateVector) -> Result<StateVector> {
        let out = match self.integrator {
            Integrator::Rk4 => return rk4_step(|s| self.drift.eval(s), x, self.dt),
            Integrator::EulerMaruyama => x + self.drift.eval(x) * self.dt,
            Integrator::DiscreteMap => self.drift.eval(x),
        };
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(FilterError::NonFiniteState { step: 1 })
        }
    }

    /// One step including process noise drawn from `rng`.
    pub fn step<R: Rng + ?Sized>(&self, x: &StateVector, rng: &mut R) -> Result<StateVector> {
        let mut out = self.deterministic_step(x)?;
        if self.has_noise() {
            let sq = self.dt.sqrt();
            for (v, s) in out.iter_mut().zip(self.noise_std.iter()) {
                let xi: f64 = rng.sample(StandardNormal);
                *v += s * sq * xi;
            }
        }
        Ok(out)
    }

    /// Advances `steps` steps; the error reports the failing step.
    pub fn integrate<R: Rng + ?Sized>(
        &self,
        x: &StateVector,
        steps: usize,
        rng: &mut R,
    ) -> Result<StateVector> {
        let mut cur = x.clone();
        for k in 0..steps {
            cur = self
                .step(&cur, rng)
                .map_err(|_| FilterError::NonFiniteState { step: k + 1 })?;
        }
        Ok(cur)
    }
}

/// A simulated reference trajectory with its noisy observations.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    /// One column per time.
    pub states: DMatrix<f64>,
    /// `(time index, observation)` pairs in increasing index order.
    pub observations: Vec<(usize, DVector<f64>)>,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, k: usize) -> StateVector {
        self.states.column(k).into_owned()
    }
}

/// Integrates `steps` model steps from `x0` and observes every
/// `obs_every` steps (never at index 0).
///
/// Model noise for step `k` comes from label `truth/step=k`, observation
/// noise from `obs/step=k`, both children of `rng`.
pub fn simulate_truth(
    model: &DynamicsModel,
    x0: &StateVector,
    t0: f64,
    steps: usize,
    obs: &ObservationOp,
    obs_every: usize,
    rng: &RngStream,
) -> Result<TrajectoryRecord> {
    let m = model.dim();
    if x0.len() != m || obs.state_dim() != m {
        return Err(FilterError::DimensionMismatch(format!(
            "model dimension {m}, x0 {}, H columns {}",
            x0.len(),
            obs.state_dim()
        )));
    }
    let r_chol = cholesky_pd(obs.r())?;
    let zero = DVector::zeros(obs.obs_dim());
    let mut states = DMatrix::zeros(m, steps + 1);
    let mut times = Vec::with_capacity(steps + 1);
    let mut observations = Vec::new();
    states.set_column(0, x0);
    times.push(t0);
    let mut x = x0.clone();
    for k in 1..=steps {
        let mut gen = rng.child(format!("truth/step={k}")).rng();
        x = model
            .step(&x, &mut gen)
            .map_err(|_| FilterError::NonFiniteState { step: k })?;
        states.set_column(k, &x);
        times.push(t0 + k as f64 * model.dt);
        if obs_every > 0 && k % obs_every == 0 {
            let mut ogen = rng.child(format!("obs/step={k}")).rng();
            let noise = sample_with_factor(&zero, &r_chol, 1, &mut ogen);
            let y = obs.h() * &x + noise.column(0);
            observations.push((k, y));
        }
    }
    Ok(TrajectoryRecord {
        times,
        states,
        observations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    fn exp_decay(x: &StateVector) -> StateVector {
        -x
    }

    #[test]
    fn rk4_with_zero_drift_is_identity() {
        let x = dvector![1.0, -3.0];
        assert_eq!(rk4_step(|s| s * 0.0, &x, 0.1).unwrap(), x);
    }

    #[test]
    fn rk4_exponential_one_step() {
        let x = rk4_step(exp_decay, &dvector![1.0], 0.01).unwrap();
        assert!((x[0] - (-0.01_f64).exp()).abs() < 1e-11);
    }

    #[test]
    fn rk4_error_ratios() {
        // local error scales like dt^5, global like dt^4
        let one =
            |dt: f64| (rk4_step(exp_decay, &dvector![1.0], dt).unwrap()[0] - (-dt).exp()).abs();
        let local_ratio = one(0.2) / one(0.1);
        assert!((local_ratio - 32.0).abs() < 3.0, "{local_ratio}");

        let global = |n: usize| {
            let dt = 1.0 / n as f64;
            let mut x = dvector![1.0];
            for _ in 0..n {
                x = rk4_step(exp_decay, &x, dt).unwrap();
            }
            (x[0] - (-1.0_f64).exp()).abs()
        };
        let ratio = global(10) / global(20);
        assert!((12.0..=20.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn rk4_flags_blowup() {
        let r = rk4_step(|s| s.map(|v| v * v * 1e300), &dvector![1e10], 1.0);
        assert!(matches!(r, Err(FilterError::NonFiniteState { .. })));
    }

    #[test]
    fn double_well_examples() {
        assert_eq!(double_well_drift(0.0), 0.0);
        assert_eq!(double_well_drift(1.0), 0.0);
        assert_eq!(double_well_drift(-1.0), 0.0);
        assert_eq!(double_well_drift(0.5), 1.5);
    }

    #[test]
    fn lorenz63_fixed_points() {
        let z = lorenz63_drift(&dvector![0.0, 0.0, 0.0], 10.0, 28.0, 8.0 / 3.0);
        assert_eq!(z, dvector![0.0, 0.0, 0.0]);
        let c = 72.0_f64.sqrt();
        let d = lorenz63_drift(&dvector![c, c, 27.0], 10.0, 28.0, 8.0 / 3.0);
        assert!(d.amax() < 1e-12);
    }

    #[test]
    fn lorenz63_reference_point() {
        let (x, y, z) = (1.508870, -1.531271, 25.46091);
        let d = lorenz63_drift(&dvector![x, y, z], 10.0, 28.0, 8.0 / 3.0);
        // hand evaluation
        assert!((d[0] - (-30.40141)).abs() < 1e-10);
        assert!((d[1] - 5.362_427_728_3).abs() < 1e-9);
        assert!((d[2] - (-70.206_248_873_77)).abs() < 1e-9);
    }

    #[test]
    fn lorenz95_equilibrium_and_shift() {
        let m = 40;
        let flat = DVector::from_element(m, 8.0);
        assert_eq!(lorenz95_drift(&flat, 8.0), DVector::zeros(m));

        let x = DVector::from_fn(7, |j, _| (j as f64 * 1.3).sin() * 3.0);
        let shifted = DVector::from_fn(7, |j, _| x[(j + 2) % 7]);
        let d = lorenz95_drift(&x, 8.0);
        let ds = lorenz95_drift(&shifted, 8.0);
        for j in 0..7 {
            assert_eq!(ds[j], d[(j + 2) % 7]);
        }
    }

    #[test]
    fn discrete_linear_map() {
        let model = DynamicsModel::new(
            Drift::Linear(DMatrix::from_element(1, 1, 0.9)),
            Integrator::DiscreteMap,
            1.0,
            dvector![0.0],
        )
        .unwrap();
        let mut rng = RngStream::new(0, "x").rng();
        let x = model.integrate(&dvector![2.0], 3, &mut rng).unwrap();
        assert!((x[0] - 2.0 * 0.9_f64.powi(3)).abs() < 1e-15);
    }

    #[test]
    fn noiseless_truth_ignores_the_seed() {
        let model = DynamicsModel::new(
            Drift::lorenz63_standard(),
            Integrator::Rk4,
            0.01,
            dvector![0.0, 0.0, 0.0],
        )
        .unwrap();
        let obs = ObservationOp::identity(3, 1.0).unwrap();
        let x0 = dvector![1.508870, -1.531271, 25.46091];
        let a = simulate_truth(&model, &x0, 0.0, 50, &obs, 10, &RngStream::new(1, "")).unwrap();
        let b = simulate_truth(&model, &x0, 0.0, 50, &obs, 10, &RngStream::new(2, "")).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.observations.len(), 5);
        assert_ne!(a.observations[0].1, b.observations[0].1);
        assert!(a.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn double_well_without_noise_settles_by_sign() {
        let model = DynamicsModel::new(
            Drift::DoubleWell,
            Integrator::EulerMaruyama,
            0.01,
            dvector![0.0],
        )
        .unwrap();
        let mut rng = RngStream::new(0, "dw").rng();
        for &u0 in &[0.05, 0.8, 1.7, -0.02, -1.4] {
            let u = model.integrate(&dvector![u0], 2000, &mut rng).unwrap()[0];
            assert!((u - u0.signum()).abs() < 1e-6, "{u0} -> {u}");
        }
    }
}
