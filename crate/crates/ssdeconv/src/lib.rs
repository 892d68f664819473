//! Semi-parametric estimation and prediction for linear state space models
//! observed through known measurement channels.
//!
//! The model is the latent recursion `X_{n+1} = A X_n + eps_{n+1}` observed
//! as `Y_n = B X_n + eta_n`, where the measurement matrix `B` and the law
//! of the measurement noise `eta` are known but the state transition matrix
//! `A` and the state-noise density are not. This crate provides:
//!
//! - [`estimation`]: a lag-moment estimator of `A` and Fourier-deconvolution
//!   estimators of the state and state-noise densities, evaluated through
//!   seeded Monte Carlo frequency nodes;
//! - [`prediction`]: consistent sup-norm prediction intervals for the
//!   current state, next state, and next observation, built by quantile
//!   search over Monte Carlo estimates of the predictive-root CDFs;
//! - [`kalman`]: the classical chi-square ellipsoid baseline driven by the
//!   one-step Kalman predictor, for comparison;
//! - [`harness`]: reproducible benchmark experiments (estimation errors,
//!   interval coverage, pointwise bands) over four reference models;
//! - [`cli`]: a file-based command-line front end.
//!
//! Every stochastic operation takes an explicit seed and is deterministic
//! given it, including under internal parallelism.

pub mod cli;
pub mod error;
pub mod estimation;
pub mod harness;
pub mod kalman;
pub mod kernel;
pub mod model;
pub mod prediction;
pub mod rng;
pub mod special;

pub use error::{Error, Result};
pub use estimation::{
    estimate_transition, fit_noise_density, fit_state_density, DensityEstimate, DensityTarget,
    FnDensity, PointDensity, TabulatedDensity, TruthDensity,
};
pub use harness::{
    figure1_bands, generate_series, obs_root_density, run_table1, run_table2,
    state_root_density, t2_norm_diff, BandTable, BandTarget, BenchmarkModel, CoverageReport,
    EstimationReport, ExperimentConfig, MetricReport, SimulatedSeries,
};
pub use kalman::{kalman_intervals, kalman_predict, CovarianceInit, EllipsoidReport};
pub use kernel::{
    build_fourier_nodes, default_bandwidth, BandwidthPolicy, FourierNodes, KernelSpec,
};
pub use model::{
    pseudo_inverse, spectral_norm, NoiseFamily, ObservationSeries, SmoothnessRegime,
    StateSpaceSpec,
};
pub use prediction::{
    chi2_quantile, filter_root_cdf, obs_root_cdf, predict_intervals, search_quantile,
    simulate_root_cdf, state_root_cdf, IntervalReport, McBudget, RootKind,
};
