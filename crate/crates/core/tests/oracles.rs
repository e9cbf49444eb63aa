//! Checks against independent references: closed-form Kalman updates,
//! Monte Carlo moments, a separate RK4 implementation and multinomial counts.

use engsf_core::baseline::{enkf_update, ensrf_update, sir_reweight, EnkfVariant};
use engsf_core::dynamics::{lorenz95_drift, simulate_truth, Drift, DynamicsModel, Integrator};
use engsf_core::engsf::{
    analysis_update, bandwidth_sigma, effective_sample_size, engsf_step, forecast,
    gaussian_resample, resample, BandwidthRule, ObservationOp,
};
use engsf_core::metrics::{ensemble_density_on_grid, kl_divergence, uniform_grid, GridDensity};
use engsf_core::rng::RngStream;
use engsf_core::stat::{mixture_moments, sample_mvn, weighted_covariance, WeightedEnsemble};
use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Closed-form Kalman analysis of `N(mu, p)` given `y = H x + N(0, R)`.
fn kalman(
    mu: &DVector<f64>,
    p: &DMatrix<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    y: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let s = h * p * h.transpose() + r;
    let k = p * h.transpose() * s.try_inverse().unwrap();
    let mean = mu + &k * (y - h * mu);
    let cov = (DMatrix::identity(mu.len(), mu.len()) - &k * h) * p;
    (mean, cov)
}

#[test]
fn mixture_moments_match_monte_carlo() {
    let weights = [0.2, 0.5, 0.3];
    let means = dmatrix![-1.0, 0.5, 2.0; 0.3, -0.8, 1.1];
    let covs = vec![
        dmatrix![0.4, 0.1; 0.1, 0.2],
        dmatrix![0.3, -0.05; -0.05, 0.6],
        dmatrix![0.1, 0.0; 0.0, 0.9],
    ];
    let (mu, cov) = mixture_moments(&weights, &means, &covs).unwrap();

    let n = 1_000_000;
    let mut comp_rng = RngStream::new(77, "mixture/component").rng();
    let mut counts = [0usize; 3];
    for _ in 0..n {
        let u: f64 = comp_rng.random();
        let k = if u < 0.2 {
            0
        } else if u < 0.7 {
            1
        } else {
            2
        };
        counts[k] += 1;
    }
    let mut samples = DMatrix::zeros(2, n);
    let mut col = 0;
    for k in 0..3 {
        let draw = sample_mvn(
            &means.column(k).into_owned(),
            &covs[k],
            counts[k],
            &RngStream::new(77, format!("mixture/kernel={k}")),
        )
        .unwrap();
        for j in 0..counts[k] {
            samples.set_column(col, &draw.column(j));
            col += 1;
        }
    }
    let e = WeightedEnsemble::uniform(samples.clone()).unwrap();
    let mc_mean = e.mean();
    let mc_cov = e.covariance();
    for a in 0..2 {
        let se = (cov[(a, a)] / n as f64).sqrt();
        assert!((mc_mean[a] - mu[a]).abs() < 3.0 * se, "mean {a}");
        for b in 0..2 {
            // var of (x_a - mu_a)(x_b - mu_b), estimated from the samples
            let mut m2 = 0.0;
            for j in 0..n {
                let v = (samples[(a, j)] - mc_mean[a]) * (samples[(b, j)] - mc_mean[b])
                    - mc_cov[(a, b)];
                m2 += v * v;
            }
            let se = (m2 / n as f64 / n as f64).sqrt();
            assert!(
                (mc_cov[(a, b)] - cov[(a, b)]).abs() < 3.0 * se,
                "cov {a}{b}"
            );
        }
    }
}

#[test]
fn single_kernel_analysis_is_kalman_in_one_and_two_dimensions() {
    let cases = [
        (
            dvector![0.3],
            dmatrix![1.7],
            dmatrix![1.0],
            dmatrix![0.4],
            dvector![1.1],
        ),
        (
            dvector![0.3, -1.2],
            dmatrix![2.0, 0.6; 0.6, 1.0],
            dmatrix![1.0, 0.0; 0.5, 1.0],
            dmatrix![0.5, 0.1; 0.1, 0.3],
            dvector![1.0, -0.4],
        ),
    ];
    for (mu, p, h, r, y) in cases {
        let prior =
            WeightedEnsemble::uniform(DMatrix::from_column_slice(mu.len(), 1, mu.as_slice()))
                .unwrap();
        let obs = ObservationOp::new(h.clone(), r.clone()).unwrap();
        let post = analysis_update(&prior, &p, &obs, &y).unwrap();
        let (km, kc) = kalman(&mu, &p, &h, &r, &y);
        assert_eq!(post.weights[0], 1.0);
        assert!((post.means.column(0) - km).amax() < 1e-12);
        assert!((&post.shared_cov - kc).amax() < 1e-12);
    }
}

fn gaussian_prior(mu: &DVector<f64>, p: &DMatrix<f64>, n: usize, label: &str) -> WeightedEnsemble {
    WeightedEnsemble::uniform(sample_mvn(mu, p, n, &RngStream::new(31, label)).unwrap()).unwrap()
}

fn check_moments(out: &WeightedEnsemble, mean: &DVector<f64>, cov: &DMatrix<f64>) {
    let n = out.len() as f64;
    let m = out.mean();
    let c = engsf_core::baseline::sample_covariance(out.particles()) * ((n - 1.0) / n);
    for a in 0..mean.len() {
        let scale = mean[a].abs().max(cov[(a, a)].sqrt());
        assert!(
            (m[a] - mean[a]).abs() <= 0.02 * scale,
            "mean {a}: {} vs {}",
            m[a],
            mean[a]
        );
        assert!(
            (c[(a, a)] - cov[(a, a)]).abs() <= 0.02 * cov[(a, a)],
            "var {a}: {} vs {}",
            c[(a, a)],
            cov[(a, a)]
        );
    }
}

#[test]
fn ensemble_kalman_filters_match_kalman_moments() {
    let n = 100_000;
    let cases = [
        (
            dvector![1.0],
            dmatrix![2.0],
            dmatrix![1.0],
            dmatrix![0.5],
            dvector![2.2],
        ),
        (
            dvector![1.0, -2.0],
            dmatrix![2.0, 0.5; 0.5, 1.0],
            DMatrix::identity(2, 2),
            dmatrix![0.5, 0.0; 0.0, 0.8],
            dvector![2.0, -1.0],
        ),
    ];
    for (i, (mu, p, h, r, y)) in cases.into_iter().enumerate() {
        let prior = gaussian_prior(&mu, &p, n, &format!("kf-prior/{i}"));
        let obs = ObservationOp::new(h.clone(), r.clone()).unwrap();
        // compare with the Kalman update of the sampled prior moments
        let pm = prior.mean();
        let pc = engsf_core::baseline::sample_covariance(prior.particles());
        let (km, kc) = kalman(&pm, &pc, &h, &r, &y);
        for variant in [EnkfVariant::PerturbedObs, EnkfVariant::AppendixVariant] {
            let out = enkf_update(&prior, &obs, &y, variant, &RngStream::new(5, "enkf")).unwrap();
            check_moments(&out, &km, &kc);
        }
        let out = ensrf_update(&prior, &obs, &y).unwrap();
        check_moments(&out, &km, &kc);
        // square-root update has no observation sampling noise
        let var = engsf_core::baseline::sample_covariance(out.particles());
        for a in 0..mu.len() {
            assert!((var[(a, a)] - kc[(a, a)]).abs() < 1e-9 * kc[(a, a)]);
        }
    }
}

#[test]
fn gaussian_resample_has_kalman_moments_asymptotically() {
    let n = 100_000;
    let forecast_ens = gaussian_prior(&dvector![0.5], &dmatrix![1.5], n, "gr-prior");
    let obs = ObservationOp::identity(1, 0.4).unwrap();
    let sigma_f = bandwidth_sigma(
        &weighted_covariance(&forecast_ens),
        n,
        1,
        BandwidthRule::Modified,
    );
    let k = sigma_f[(0, 0)] / (sigma_f[(0, 0)] + 0.4);
    let winner = dvector![1.3];
    let out = gaussian_resample(&winner, &forecast_ens, &obs, &RngStream::new(8, "gr")).unwrap();
    let expect_cov = dmatrix![(1.0 - k) * sigma_f[(0, 0)]];
    check_moments(&out, &winner, &expect_cov);
}

#[test]
fn gaussian_resample_without_spread_moves_by_gain_times_noise() {
    // zero spread: columns are winner + K r_j with K = 0, so exactly the winner
    let n = 20_000;
    let flat = WeightedEnsemble::uniform(DMatrix::from_element(2, n, 0.25)).unwrap();
    let obs = ObservationOp::identity(2, 1.0).unwrap();
    let winner = dvector![2.0, -1.0];
    let out = gaussian_resample(&winner, &flat, &obs, &RngStream::new(1, "gr0")).unwrap();
    assert!((out.mean() - winner).amax() < 1e-9);
}

#[test]
fn resampling_counts_pass_a_chi_square_test() {
    let weights = [0.7, 0.2, 0.1];
    let e = WeightedEnsemble::new(
        dmatrix![0.0, 1.0, 2.0],
        DVector::from_column_slice(&weights),
    )
    .unwrap();
    let trials = 10_000;
    let mut counts = [0.0; 3];
    for t in 0..trials {
        let out = resample(&e, &RngStream::new(99, format!("chi2/trial={t}")));
        for &v in out.particles().iter() {
            counts[v as usize] += 1.0;
        }
    }
    let total = (trials * 3) as f64;
    let mut chi2 = 0.0;
    for (c, w) in counts.iter().zip(weights) {
        let expect = total * w;
        // per-particle mean count within 3 sigma of N * alpha
        let sd = (total * w * (1.0 - w)).sqrt();
        assert!((c - expect).abs() < 3.0 * sd);
        chi2 += (c - expect) * (c - expect) / expect;
    }
    // two degrees of freedom: p = exp(-chi2 / 2)
    let p = (-chi2 / 2.0).exp();
    assert!(p > 1e-3, "chi2 = {chi2}, p = {p}");
}

#[test]
fn engsf_tracks_the_kalman_filter_on_a_linear_model() {
    let (a, q, r) = (0.9_f64, 0.3_f64, 0.5_f64);
    let model = DynamicsModel::new(
        Drift::Linear(dmatrix![a]),
        Integrator::DiscreteMap,
        1.0,
        dvector![q.sqrt()],
    )
    .unwrap();
    let obs = ObservationOp::identity(1, r).unwrap();
    let steps = 50;
    let truth = simulate_truth(
        &model,
        &dvector![0.7],
        0.0,
        steps,
        &obs,
        1,
        &RngStream::new(3, "lin"),
    )
    .unwrap();

    // exact filter from the prior N(0, 1)
    let (mut km, mut kp) = (0.0, 1.0);
    let mut kf_means = Vec::new();
    for (_, y) in &truth.observations {
        km *= a;
        kp = a * a * kp + q;
        let k = kp / (kp + r);
        km += k * (y[0] - km);
        kp *= 1.0 - k;
        kf_means.push(km);
    }

    let n = 10_000;
    let reps = 20;
    let mut runs = vec![vec![0.0; steps]; reps];
    for (rep, run) in runs.iter_mut().enumerate() {
        let mut ens = gaussian_prior(
            &dvector![0.0],
            &dmatrix![1.0],
            n,
            &format!("lin-init/{rep}"),
        );
        for (c, (_, y)) in truth.observations.iter().enumerate() {
            let root = RngStream::new(1000 + rep as u64, format!("cycle={c}"));
            ens = forecast(&ens, &model, 1, &root.child("forecast")).unwrap();
            let step = engsf_step(
                &ens,
                &obs,
                y,
                BandwidthRule::Modified,
                &root.child("analysis"),
            )
            .unwrap();
            run[c] = step.posterior.mean()[0];
            ens = step.ensemble;
        }
    }
    // the Monte Carlo standard error of one run comes from the other replicates
    let mut bias = 0.0;
    for c in 0..steps {
        let others: Vec<f64> = runs[1..].iter().map(|r| r[c]).collect();
        let avg = others.iter().sum::<f64>() / others.len() as f64;
        let var =
            others.iter().map(|v| (v - avg) * (v - avg)).sum::<f64>() / (others.len() - 1) as f64;
        let se = var.sqrt();
        assert!(
            (runs[0][c] - kf_means[c]).abs() < 3.0 * se,
            "cycle {c}: {} vs {}, se {se}",
            runs[0][c],
            kf_means[c]
        );
        bias += (avg - kf_means[c]) / steps as f64;
    }
    assert!(bias.abs() < 2e-3, "average bias {bias}");
}

#[test]
fn lorenz63_forecast_matches_an_independent_rk4() {
    fn drift(s: [f64; 3]) -> [f64; 3] {
        let (sigma, rho, beta) = (10.0, 28.0, 8.0 / 3.0);
        [
            sigma * (s[1] - s[0]),
            s[0] * (rho - s[2]) - s[1],
            s[0] * s[1] - beta * s[2],
        ]
    }
    fn axpy(x: [f64; 3], a: f64, k: [f64; 3]) -> [f64; 3] {
        [x[0] + a * k[0], x[1] + a * k[1], x[2] + a * k[2]]
    }
    let x0 = [1.508870, -1.531271, 25.46091];
    let dt = 0.01;
    let k1 = drift(x0);
    let k2 = drift(axpy(x0, dt / 2.0, k1));
    let k3 = drift(axpy(x0, dt / 2.0, k2));
    let k4 = drift(axpy(x0, dt, k3));
    let expect: Vec<f64> = (0..3)
        .map(|i| x0[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();

    let model = DynamicsModel::new(
        Drift::lorenz63_standard(),
        Integrator::Rk4,
        dt,
        dvector![0.0, 0.0, 0.0],
    )
    .unwrap();
    let ens = WeightedEnsemble::uniform(DMatrix::from_column_slice(3, 1, &x0)).unwrap();
    let out = forecast(&ens, &model, 1, &RngStream::new(0, "l63")).unwrap();
    for i in 0..3 {
        assert!((out.particles()[(i, 0)] - expect[i]).abs() < 1e-12);
    }
}

#[test]
fn lorenz95_drift_matches_a_second_implementation() {
    let m = 40;
    let f = 8.0;
    let mut x = vec![f; m];
    x[19] = 1.001 * f;
    // 1-based formula with explicit ghost cells x_{-1}, x_0, x_{m+1}
    let mut ext = vec![0.0; m + 3];
    ext[2..m + 2].copy_from_slice(&x);
    ext[0] = x[m - 2];
    ext[1] = x[m - 1];
    ext[m + 2] = x[0];
    let expect: Vec<f64> = (0..m)
        .map(|j| {
            let c = j + 2;
            (ext[c + 1] - ext[c - 2]) * ext[c - 1] - ext[c] + f
        })
        .collect();
    let d = lorenz95_drift(&DVector::from_vec(x), f);
    for j in 0..m {
        assert!((d[j] - expect[j]).abs() < 1e-14);
    }
    assert!(d[19] != 0.0 && d[21] != 0.0);
}

#[test]
fn double_well_truth_shows_transitions_for_some_seeds() {
    let model = DynamicsModel::new(
        Drift::DoubleWell,
        Integrator::EulerMaruyama,
        0.01,
        dvector![0.7],
    )
    .unwrap();
    let obs = ObservationOp::identity(1, 0.1).unwrap();
    let mut switched = 0;
    for seed in 0..50 {
        let t = simulate_truth(
            &model,
            &dvector![0.8],
            0.0,
            1000,
            &obs,
            50,
            &RngStream::new(seed, ""),
        )
        .unwrap();
        if t.states.iter().any(|&u| u < -0.8) {
            switched += 1;
        }
        assert_eq!(t.observations.len(), 20);
    }
    assert!(switched > 0);
    assert!(switched < 50);
}

#[test]
fn lorenz95_spinup_protocol() {
    let m = 40;
    let model = DynamicsModel::new(
        Drift::Lorenz95 { forcing: 8.0 },
        Integrator::Rk4,
        0.01,
        DVector::from_element(m, 5.0),
    )
    .unwrap();
    let obs = ObservationOp::identity(m, 2.0).unwrap();
    let mut x0 = DVector::from_element(m, 8.0);
    x0[19] = 8.008;
    let spin = simulate_truth(
        &model,
        &x0,
        0.0,
        2000,
        &obs,
        0,
        &RngStream::new(4, "spinup"),
    )
    .unwrap();
    assert!(spin.observations.is_empty());
    let start = spin.state(2000);
    let run = simulate_truth(
        &model,
        &start,
        20.0,
        5000,
        &obs,
        5,
        &RngStream::new(4, "run"),
    )
    .unwrap();
    assert_eq!(run.observations.len(), 1000);
    assert_eq!(run.observations[0].0, 5);
    assert!(run.states.iter().all(|v| v.is_finite()));
}

#[test]
fn kde_of_normal_samples_is_close_to_the_normal_density() {
    let n = 10_000;
    let mut rng = RngStream::new(12, "kde").rng();
    let samples: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let ens = WeightedEnsemble::uniform(DMatrix::from_row_slice(1, n, &samples)).unwrap();
    let grid = uniform_grid(-6.0, 6.0, 2001);
    let q = ensemble_density_on_grid(&ens, &grid, BandwidthRule::Modified).unwrap();
    let exact: Vec<f64> = grid.iter().map(|&x| (-0.5 * x * x).exp()).collect();
    let p = GridDensity::new(grid, exact).unwrap();
    assert!(kl_divergence(&p, &q).unwrap() < 0.01);
}

#[test]
fn sequential_reweighting_degenerates() {
    // repeated identical observations without resampling concentrate the weights
    let n = 200;
    let mut rng = RngStream::new(6, "sis").rng();
    let pts: Vec<f64> = (0..n)
        .map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut ens = WeightedEnsemble::uniform(DMatrix::from_row_slice(1, n, &pts)).unwrap();
    let obs = ObservationOp::identity(1, 0.01).unwrap();
    let mut last = effective_sample_size(ens.weights());
    for _ in 0..10 {
        ens = sir_reweight(&ens, &obs, &dvector![0.3]).unwrap();
        let ess = effective_sample_size(ens.weights());
        assert!(ess <= last);
        last = ess;
    }
    assert!(last < 10.0);
}
