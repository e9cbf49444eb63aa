//! Sequential data assimilation with the ensemble Gaussian sum filter
//! (EnGSF), plus EnKF, EnSRF and SIR reference filters, benchmark dynamics
//! and evaluation metrics.
//!
//! States are `nalgebra` column vectors and ensembles store one particle per
//! matrix column. All randomness flows through [`rng::RngStream`] so that a
//! `(seed, label)` pair fully determines every draw.

pub mod baseline;
pub mod dynamics;
pub mod engsf;
pub mod error;
pub mod metrics;
pub mod rng;
pub mod stat;

pub use baseline::{enkf_update, ensrf_update, sir_reweight, sir_step, EnkfVariant, SirStep};
pub use dynamics::{simulate_truth, Drift, DynamicsModel, Integrator, TrajectoryRecord};
pub use engsf::{
    analysis_update, bandwidth_sigma, effective_sample_size, engsf_step, forecast,
    gaussian_resample, resample, silverman_c, BandwidthRule, EngsfStep, GaussianSumPosterior,
    ObservationOp,
};
pub use error::FilterError;
pub use metrics::{GridDensity, MetricSeries, MetricsError};
pub use rng::RngStream;
pub use stat::{CovMatrix, StateVector, WeightedEnsemble};
