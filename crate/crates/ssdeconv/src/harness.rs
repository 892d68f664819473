//! Benchmark simulation harness: the four reference models, series
//! generation, the T2 error metric, the convolved predictive-root density
//! estimators, and runners that reproduce the estimation-error and
//! coverage tables plus pointwise band data at configurable replication
//! counts.
//!
//! Replicates are independent jobs parameterized by derived seed streams,
//! run in parallel; every aggregation is order-independent, so a report is
//! a pure function of its configuration.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{
    estimate_transition, fit_noise_density, fit_state_density, tabulation_step, PointDensity,
    TabulatedDensity, TruthDensity,
};
use crate::kalman::{kalman_intervals, CovarianceInit};
use crate::kernel::{build_fourier_nodes, default_bandwidth, BandwidthPolicy, KernelSpec};
use crate::model::{spectral_norm, NoiseFamily, ObservationSeries, SmoothnessRegime, StateSpaceSpec};
use crate::prediction::{predict_intervals, McBudget};
use crate::rng::{derive, RUN_STREAM_BASE, STREAMS_PER_REPLICATE};

/// Grid resolution of Monte Carlo truth curves.
const TRUTH_GRID_POINTS: usize = 1_201;
/// Grid resolution of per-replicate convolved-density curves.
const CURVE_POINTS: usize = 801;

/// The four benchmark models; O-models carry gamma-difference noises
/// (polynomially decaying characteristic functions, ordinary smooth),
/// S-models Gaussian noises (super smooth).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BenchmarkModel {
    O1,
    S1,
    O2,
    S2,
}

impl BenchmarkModel {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "O1" | "o1" => Ok(BenchmarkModel::O1),
            "S1" | "s1" => Ok(BenchmarkModel::S1),
            "O2" | "o2" => Ok(BenchmarkModel::O2),
            "S2" | "s2" => Ok(BenchmarkModel::S2),
            _ => Err(Error::InvalidParameter(format!(
                "unknown benchmark model '{s}' (expected O1, S1, O2, or S2)"
            ))),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            BenchmarkModel::O1 => "O1",
            BenchmarkModel::S1 => "S1",
            BenchmarkModel::O2 => "O2",
            BenchmarkModel::S2 => "S2",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            BenchmarkModel::O1 | BenchmarkModel::S1 => 1,
            BenchmarkModel::O2 | BenchmarkModel::S2 => 2,
        }
    }

    /// Materialize the model with its exact benchmark constants.
    pub fn spec(&self) -> StateSpaceSpec {
        match self {
            BenchmarkModel::O1 => StateSpaceSpec::new(
                DMatrix::from_element(1, 1, 0.8),
                DMatrix::from_element(1, 1, 1.0),
                NoiseFamily::gamma_difference_iid(1, 1.5, 1.0 / 3.0_f64.sqrt()).unwrap(),
                NoiseFamily::gamma_difference_iid(1, 0.5, 1.0).unwrap(),
            )
            .unwrap(),
            BenchmarkModel::S1 => StateSpaceSpec::new(
                DMatrix::from_element(1, 1, 0.8),
                DMatrix::from_element(1, 1, 1.0),
                NoiseFamily::gaussian_iid(1, 1.0).unwrap(),
                NoiseFamily::gaussian_iid(1, 1.0).unwrap(),
            )
            .unwrap(),
            BenchmarkModel::O2 | BenchmarkModel::S2 => {
                let a = DMatrix::from_row_slice(2, 2, &[0.56, -0.25, 0.25, 0.45]);
                let b = DMatrix::from_row_slice(2, 2, &[1.0, -0.5, 0.5, 1.0]);
                let eps_mix = DMatrix::from_row_slice(2, 2, &[0.979, 0.204, 0.204, 0.979]);
                let eta_mix = DMatrix::from_row_slice(2, 2, &[0.9, 0.0, 0.0, 0.9]);
                let (eps, eta) = if matches!(self, BenchmarkModel::O2) {
                    (
                        NoiseFamily::linear_map(
                            eps_mix,
                            NoiseFamily::gamma_difference_iid(2, 1.5, 1.0 / 3.0_f64.sqrt())
                                .unwrap(),
                        )
                        .unwrap(),
                        NoiseFamily::linear_map(
                            eta_mix,
                            NoiseFamily::gamma_difference_iid(2, 0.5, 1.0).unwrap(),
                        )
                        .unwrap(),
                    )
                } else {
                    (
                        NoiseFamily::linear_map(eps_mix, NoiseFamily::gaussian_iid(2, 1.0).unwrap())
                            .unwrap(),
                        NoiseFamily::linear_map(eta_mix, NoiseFamily::gaussian_iid(2, 1.0).unwrap())
                            .unwrap(),
                    )
                };
                StateSpaceSpec::new(a, b, eps, eta).unwrap()
            }
        }
    }

    /// Bandwidth policy attached to the model: the declared smoothness
    /// regime of its measurement noise.
    pub fn bandwidth_policy(&self) -> BandwidthPolicy {
        match self {
            BenchmarkModel::O1 | BenchmarkModel::O2 => {
                BandwidthPolicy::Regime(SmoothnessRegime::ordinary())
            }
            BenchmarkModel::S1 | BenchmarkModel::S2 => {
                BandwidthPolicy::Regime(SmoothnessRegime::super_smooth())
            }
        }
    }
}

impl std::fmt::Display for BenchmarkModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

/// One simulated trajectory: `n` observations, the hidden states behind
/// them, and one held-out future pair for coverage scoring.
#[derive(Debug, Clone)]
pub struct SimulatedSeries {
    pub observations: ObservationSeries,
    pub states: DMatrix<f64>,
    pub next_state: DVector<f64>,
    pub next_obs: DVector<f64>,
}

impl SimulatedSeries {
    /// Hidden state at time index `i` (zero-based).
    pub fn state(&self, i: usize) -> DVector<f64> {
        self.states.row(i).transpose()
    }

    pub fn last_state(&self) -> DVector<f64> {
        self.state(self.states.nrows() - 1)
    }
}

/// Iterate the recursion from a zero state through `burn_in` discarded
/// steps, then record `n` observations plus one held-out future pair.
/// Hidden states are retained for coverage scoring.
pub fn generate_series(
    spec: &StateSpaceSpec,
    n: usize,
    seed: u64,
    burn_in: usize,
) -> Result<SimulatedSeries> {
    if n < 3 {
        return Err(Error::SeriesTooShort { n, min: 3 });
    }
    let d = spec.dim();
    let a = spec.transition();
    let b = spec.measurement();
    let mut rng = crate::rng::stream(seed, 0);
    let mut eps = vec![0.0f64; d];
    let mut eta = vec![0.0f64; d];
    let mut x = DVector::zeros(d);
    for _ in 0..burn_in {
        spec.state_noise().sample_into(&mut rng, &mut eps);
        x = a * &x + DVector::from_column_slice(&eps);
    }
    let mut states = DMatrix::zeros(n, d);
    let mut obs = DMatrix::zeros(n, d);
    for k in 0..n {
        spec.state_noise().sample_into(&mut rng, &mut eps);
        x = a * &x + DVector::from_column_slice(&eps);
        states.set_row(k, &x.transpose());
        spec.measurement_noise().sample_into(&mut rng, &mut eta);
        let y = b * &x + DVector::from_column_slice(&eta);
        obs.set_row(k, &y.transpose());
    }
    spec.state_noise().sample_into(&mut rng, &mut eps);
    let next_state = a * &x + DVector::from_column_slice(&eps);
    spec.measurement_noise().sample_into(&mut rng, &mut eta);
    let next_obs = b * &next_state + DVector::from_column_slice(&eta);
    Ok(SimulatedSeries {
        observations: ObservationSeries::new(obs)?,
        states,
        next_state,
        next_obs,
    })
}

/// Zero-mean multivariate normal density with a fixed covariance.
#[derive(Debug, Clone)]
pub struct GaussianDensity {
    inv: DMatrix<f64>,
    norm: f64,
    dim: usize,
}

impl GaussianDensity {
    pub fn new(cov: &DMatrix<f64>) -> Result<Self> {
        let d = cov.nrows();
        let det = cov.determinant();
        let inv = cov
            .clone()
            .try_inverse()
            .ok_or(Error::SingularMatrix("gaussian covariance"))?;
        if det <= 0.0 {
            return Err(Error::SingularMatrix("gaussian covariance"));
        }
        let norm = (2.0 * std::f64::consts::PI).powi(d as i32).sqrt().recip() / det.sqrt();
        Ok(GaussianDensity { inv, norm, dim: d })
    }
}

impl PointDensity for GaussianDensity {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval_at(&self, x: &[f64]) -> f64 {
        let v = DVector::from_column_slice(x);
        let q = (&self.inv * &v).dot(&v);
        self.norm * (-0.5 * q).exp()
    }
}

// ---------------------------------------------------------------------------
// T2 metric
// ---------------------------------------------------------------------------

/// Uniform sample of `count` points on the cube [-limit, limit]^d,
/// flattened row-major.
pub fn sample_cube(limit: f64, dim: usize, count: usize, seed: u64) -> Vec<f64> {
    let mut rng = crate::rng::stream(seed, 0);
    (0..count * dim)
        .map(|_| rng.random_range(-limit..=limit))
        .collect()
}

/// T2 distance from paired evaluations on a cube of the given volume:
/// sqrt(volume * mean squared difference).
pub fn t2_error_from_values(a: &[f64], b: &[f64], volume: f64) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mean_sq = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    (volume * mean_sq).sqrt()
}

/// Monte Carlo estimate of the T2 distance between two functions: the L2
/// distance restricted to the cube [-1/h, 1/h]^d, which approximates the
/// full L2 distance.
pub fn t2_norm_diff(
    f: &dyn Fn(&[f64]) -> f64,
    g: &dyn Fn(&[f64]) -> f64,
    h: f64,
    dim: usize,
    samples: usize,
    seed: u64,
) -> f64 {
    let limit = 1.0 / h;
    let volume = (2.0 * limit).powi(dim as i32);
    let pts = sample_cube(limit, dim, samples, seed);
    let fa: Vec<f64> = pts.chunks_exact(dim).map(f).collect();
    let fb: Vec<f64> = pts.chunks_exact(dim).map(g).collect();
    t2_error_from_values(&fa, &fb, volume)
}

// ---------------------------------------------------------------------------
// Convolved predictive-root densities
// ---------------------------------------------------------------------------

/// Evaluate the state-root density
/// z(x) = integral of density(x + A B^{-1} y) f_eta(y) dy
/// by Monte Carlo over measurement-noise draws, at every point of `points`
/// (flattened, d per point). One fixed draw set is shared across points.
pub fn state_root_density_curve(
    density: &dyn PointDensity,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    eta: &NoiseFamily,
    points: &[f64],
    draws: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let d = eta.dim();
    let b_inv = b
        .clone()
        .try_inverse()
        .ok_or(Error::SingularMatrix("measurement transition matrix B"))?;
    let map = a * &b_inv;
    let offsets = noise_offsets(&map, eta, draws, seed);
    Ok(mean_density_at(density, points, &offsets, d, None))
}

/// Evaluate the observation-root density
/// g(x) = double integral of density(B^{-1}x + A B^{-1}w - B^{-1}z)
/// f_eta(w) f_eta(z) dw dz by Monte Carlo with two independent draw sets.
pub fn obs_root_density_curve(
    density: &dyn PointDensity,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    eta: &NoiseFamily,
    points: &[f64],
    draws: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let d = eta.dim();
    let b_inv = b
        .clone()
        .try_inverse()
        .ok_or(Error::SingularMatrix("measurement transition matrix B"))?;
    let map = a * &b_inv;
    let mut offsets = noise_offsets(&map, eta, draws, seed);
    let neg_b_inv = -&b_inv;
    let second = noise_offsets(&neg_b_inv, eta, draws, derive(seed, 1));
    for (o, s) in offsets.iter_mut().zip(&second) {
        *o += s;
    }
    Ok(mean_density_at(density, points, &offsets, d, Some(&b_inv)))
}

/// Single-point state-root density (see [`state_root_density_curve`]).
pub fn state_root_density(
    density: &dyn PointDensity,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    eta: &NoiseFamily,
    x: &[f64],
    draws: usize,
    seed: u64,
) -> Result<f64> {
    Ok(state_root_density_curve(density, a, b, eta, x, draws, seed)?[0])
}

/// Single-point observation-root density (see [`obs_root_density_curve`]).
pub fn obs_root_density(
    density: &dyn PointDensity,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    eta: &NoiseFamily,
    x: &[f64],
    draws: usize,
    seed: u64,
) -> Result<f64> {
    Ok(obs_root_density_curve(density, a, b, eta, x, draws, seed)?[0])
}

/// Draws of `map * eta`, flattened.
fn noise_offsets(map: &DMatrix<f64>, eta: &NoiseFamily, draws: usize, seed: u64) -> Vec<f64> {
    let d = eta.dim();
    let mut rng = crate::rng::stream(seed, 0);
    let mut buf = vec![0.0f64; d];
    let mut out = vec![0.0f64; draws * d];
    for j in 0..draws {
        eta.sample_into(&mut rng, &mut buf);
        let v = map * DVector::from_column_slice(&buf);
        out[j * d..(j + 1) * d].copy_from_slice(v.as_slice());
    }
    out
}

/// For each point p: mean over offsets c of density(pre * p + c), where
/// `pre` defaults to the identity. Parallel over points, deterministic.
fn mean_density_at(
    density: &dyn PointDensity,
    points: &[f64],
    offsets: &[f64],
    d: usize,
    pre: Option<&DMatrix<f64>>,
) -> Vec<f64> {
    let draws = offsets.len() / d;
    points
        .par_chunks_exact(d)
        .map(|p| {
            let base: Vec<f64> = match pre {
                Some(m) => (m * DVector::from_column_slice(p)).as_slice().to_vec(),
                None => p.to_vec(),
            };
            let mut arg = [0.0f64; 8];
            let mut sum = 0.0;
            for c in offsets.chunks_exact(d) {
                for i in 0..d {
                    arg[i] = base[i] + c[i];
                }
                sum += density.eval_at(&arg[..d]);
            }
            sum / draws as f64
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Experiment configuration and reports
// ---------------------------------------------------------------------------

/// Everything one experiment run needs; `new` gives the desk-scale
/// defaults used by the verification suite.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub model: BenchmarkModel,
    pub n: usize,
    pub replicates: usize,
    pub master_seed: u64,
    /// Fourier nodes per density fit.
    pub node_count: usize,
    /// Monte Carlo draws per CDF evaluation in the interval search.
    pub mc_draws: usize,
    /// Bracket tolerance of the interval search.
    pub bracket_tol: f64,
    /// Nominal coverage level.
    pub level: f64,
    /// Draws for the convolved density estimators.
    pub conv_draws: usize,
    /// Uniform samples per T2 error estimate.
    pub t2_samples: usize,
    /// Draws for Monte Carlo truth curves on the gamma-noise models.
    pub truth_draws: usize,
    /// Discarded start-up steps of every simulated series.
    pub burn_in: usize,
    /// Error-covariance start of the parametric baseline.
    pub kalman_init: CovarianceInit,
    /// Explicit bandwidth; `None` uses the model's regime policy.
    pub bandwidth_override: Option<f64>,
    /// Where cached truth curves go; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(model: BenchmarkModel, n: usize, replicates: usize, master_seed: u64) -> Self {
        ExperimentConfig {
            model,
            n,
            replicates,
            master_seed,
            node_count: 10_000,
            mc_draws: 100_000,
            bracket_tol: 1e-3,
            level: 0.95,
            conv_draws: 4_000,
            t2_samples: 50_000,
            truth_draws: 1_000_000,
            burn_in: 1_000,
            kalman_init: CovarianceInit::Stationary,
            bandwidth_override: None,
            out_dir: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::InvalidParameter("replicate count must be >= 1".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidParameter("level must lie in (0, 1)".into()));
        }
        if self.model.dim() > 2 {
            return Err(Error::UnsupportedDimension {
                dim: self.model.dim(),
                context: "experiment runners support d <= 2",
            });
        }
        Ok(())
    }

    /// Effective bandwidth: the override if set, else the model policy.
    pub fn bandwidth(&self) -> Result<f64> {
        match self.bandwidth_override {
            Some(h) => default_bandwidth(self.n, &BandwidthPolicy::Explicit(h)),
            None => default_bandwidth(self.n, &self.model.bandwidth_policy()),
        }
    }

    /// Stable hash of the full configuration, echoed into report headers.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a(text.as_bytes()))
    }

    fn header_comment(&self, table: &str, bandwidth: f64) -> String {
        format!(
            "# ssdeconv {table} model={} n={} replicates={} master_seed={} h={:.6} nodes={} mc_draws={} level={} config_hash={}\n",
            self.model, self.n, self.replicates, self.master_seed, bandwidth,
            self.node_count, self.mc_draws, self.level, self.hash()
        )
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x1000_0000_01b3);
    }
    hash
}

/// Mean and 90% quantile of one error column across replicates.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SummaryStat {
    pub mean: f64,
    pub q90: f64,
}

fn summarize(values: &[f64]) -> SummaryStat {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    SummaryStat {
        mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        q90: quantile(&sorted, 0.9),
    }
}

/// Linear-interpolation sample quantile of an ascending slice.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 == sorted.len() {
        sorted[lo]
    } else {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    }
}

/// Estimation-error table row: per-quantity mean and 90% quantile across
/// replicates. The state-density column is absent for models whose
/// stationary state law has no closed form to score against.
#[derive(Debug, Clone, Serialize)]
pub struct EstimationReport {
    pub model: String,
    pub n: usize,
    pub replicates: usize,
    pub master_seed: u64,
    pub bandwidth: f64,
    pub node_count: usize,
    pub transition_err: SummaryStat,
    pub state_density_err: Option<SummaryStat>,
    pub noise_density_err: SummaryStat,
    pub state_root_err: SummaryStat,
    pub obs_root_err: SummaryStat,
    pub config_hash: String,
    #[serde(skip)]
    header: String,
}

impl EstimationReport {
    pub fn to_csv(&self) -> String {
        let mut out = self.header.clone();
        out.push_str(
            "model,n,a_err_mean,a_err_q90,fx_err_mean,fx_err_q90,feps_err_mean,feps_err_q90,z_err_mean,z_err_q90,g_err_mean,g_err_q90\n",
        );
        let fx = match &self.state_density_err {
            Some(s) => format!("{},{}", fmt(s.mean), fmt(s.q90)),
            None => ",".to_string(),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            self.model,
            self.n,
            fmt(self.transition_err.mean),
            fmt(self.transition_err.q90),
            fx,
            fmt(self.noise_density_err.mean),
            fmt(self.noise_density_err.q90),
            fmt(self.state_root_err.mean),
            fmt(self.state_root_err.q90),
            fmt(self.obs_root_err.mean),
            fmt(self.obs_root_err.q90),
        ));
        out
    }
}

/// Coverage and mean-length triples (filter, state, observation) for each
/// interval method.
#[derive(Debug, Clone, Serialize)]
pub struct CoverageReport {
    pub model: String,
    pub n: usize,
    pub replicates: usize,
    pub master_seed: u64,
    pub level: f64,
    pub methods: Vec<MethodCoverage>,
    pub config_hash: String,
    #[serde(skip)]
    header: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodCoverage {
    pub method: String,
    pub coverage: [f64; 3],
    pub mean_length: [f64; 3],
}

impl CoverageReport {
    pub fn method(&self, name: &str) -> Option<&MethodCoverage> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.clone();
        out.push_str("model,n,method,cov_f,cov_px,cov_py,len_f,len_px,len_py\n");
        for m in &self.methods {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                self.model,
                self.n,
                m.method,
                fmt(m.coverage[0]),
                fmt(m.coverage[1]),
                fmt(m.coverage[2]),
                fmt(m.mean_length[0]),
                fmt(m.mean_length[1]),
                fmt(m.mean_length[2]),
            ));
        }
        out
    }
}

/// Either table shape, for uniform serialization by the CLI.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricReport {
    Estimation(EstimationReport),
    Coverage(CoverageReport),
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        match self {
            MetricReport::Estimation(r) => r.to_csv(),
            MetricReport::Coverage(r) => r.to_csv(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Floats in reports carry 17 significant digits for lossless round-trips.
fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

// ---------------------------------------------------------------------------
// Truth curves for the convolved predictive-root densities
// ---------------------------------------------------------------------------

/// True state-root and observation-root densities of a model, evaluable at
/// arbitrary points: closed-form Gaussian where both noises are Gaussian,
/// high-draw Monte Carlo curves otherwise.
enum RootTruth {
    Closed {
        state: GaussianDensity,
        obs: GaussianDensity,
        abs_det_b: f64,
    },
    Grid {
        state: TabulatedDensity,
        obs: TabulatedDensity,
    },
}

#[derive(Serialize, Deserialize)]
struct TruthCacheFile {
    model: String,
    half_range: f64,
    seed: u64,
    draws: usize,
    lo: f64,
    step: f64,
    state: Vec<f64>,
    obs: Vec<f64>,
}

impl RootTruth {
    /// Build truth curves covering [-half_range, half_range]^d.
    fn build(config: &ExperimentConfig, spec: &StateSpaceSpec, half_range: f64) -> Result<Self> {
        let a = spec.transition();
        let b = spec.measurement();
        let b_inv = b.clone().try_inverse().expect("validated nonsingular");
        if let (Some(sigma), Some(pi)) = (
            spec.state_noise().gaussian_covariance(),
            spec.measurement_noise().gaussian_covariance(),
        ) {
            let ab_inv = a * &b_inv;
            let state_cov = &sigma + &ab_inv * &pi * ab_inv.transpose();
            let bab_inv = b * &ab_inv;
            let obs_cov =
                &pi + b * &sigma * b.transpose() + &bab_inv * &pi * bab_inv.transpose();
            return Ok(RootTruth::Closed {
                state: GaussianDensity::new(&state_cov)?,
                obs: GaussianDensity::new(&obs_cov)?,
                abs_det_b: b.determinant().abs(),
            });
        }
        if spec.dim() != 1 {
            return Err(Error::UnsupportedDimension {
                dim: spec.dim(),
                context: "Monte Carlo truth grids are built in one dimension only",
            });
        }
        let seed = derive(config.master_seed, RUN_STREAM_BASE + 2);
        let draws = config.truth_draws;
        if let Some(cached) = load_truth_cache(config, half_range, seed, draws) {
            return Ok(cached);
        }
        let lo = -half_range;
        let step = 2.0 * half_range / (TRUTH_GRID_POINTS - 1) as f64;
        let grid: Vec<f64> = (0..TRUTH_GRID_POINTS).map(|i| lo + i as f64 * step).collect();
        let eps = spec.state_noise();
        let eta = spec.measurement_noise();
        let truth_density = TruthDensity(eps);
        let state =
            state_root_density_curve(&truth_density, a, b, eta, &grid, draws, derive(seed, 0))?;
        let obs =
            obs_root_density_curve(&truth_density, a, b, eta, &grid, draws, derive(seed, 1))?;
        store_truth_cache(config, half_range, seed, draws, lo, step, &state, &obs);
        Ok(RootTruth::Grid {
            state: TabulatedDensity::from_values_1d(lo, step, state),
            obs: TabulatedDensity::from_values_1d(lo, step, obs),
        })
    }

    fn state_at(&self, p: &[f64]) -> f64 {
        match self {
            RootTruth::Closed { state, .. } => state.eval_at(p),
            RootTruth::Grid { state, .. } => state.eval_at(p),
        }
    }

    fn obs_at(&self, p: &[f64]) -> f64 {
        match self {
            RootTruth::Closed { obs, abs_det_b, .. } => abs_det_b * obs.eval_at(p),
            RootTruth::Grid { obs, .. } => obs.eval_at(p),
        }
    }
}

fn truth_cache_path(config: &ExperimentConfig) -> Option<PathBuf> {
    config.out_dir.as_ref().map(|dir| {
        dir.join(format!(
            "truth_{}_{}_{}.json",
            config.model, config.n, config.master_seed
        ))
    })
}

fn load_truth_cache(
    config: &ExperimentConfig,
    half_range: f64,
    seed: u64,
    draws: usize,
) -> Option<RootTruth> {
    let path = truth_cache_path(config)?;
    let text = std::fs::read_to_string(path).ok()?;
    let file: TruthCacheFile = serde_json::from_str(&text).ok()?;
    if file.model != config.model.id()
        || file.half_range != half_range
        || file.seed != seed
        || file.draws != draws
    {
        return None;
    }
    Some(RootTruth::Grid {
        state: TabulatedDensity::from_values_1d(file.lo, file.step, file.state),
        obs: TabulatedDensity::from_values_1d(file.lo, file.step, file.obs),
    })
}

#[allow(clippy::too_many_arguments)]
fn store_truth_cache(
    config: &ExperimentConfig,
    half_range: f64,
    seed: u64,
    draws: usize,
    lo: f64,
    step: f64,
    state: &[f64],
    obs: &[f64],
) {
    let Some(path) = truth_cache_path(config) else {
        return;
    };
    let file = TruthCacheFile {
        model: config.model.id().to_string(),
        half_range,
        seed,
        draws,
        lo,
        step,
        state: state.to_vec(),
        obs: obs.to_vec(),
    };
    if let Ok(text) = serde_json::to_string(&file) {
        let _ = write_atomic(&path, &text);
    }
}

/// Write a file atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &std::path::Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Table runners
// ---------------------------------------------------------------------------

/// Half-width of the tabulation box that covers every point the quantile
/// search can probe before it settles, with a generous tail margin.
pub(crate) fn search_range(spec: &StateSpaceSpec) -> f64 {
    let sigma = spec.state_noise().covariance();
    let b_inv = spec
        .measurement()
        .clone()
        .try_inverse()
        .expect("validated nonsingular");
    let ab_inv = spec.transition() * &b_inv;
    let pi = spec.measurement_noise().covariance();
    let root_scale = (spectral_norm(&sigma)
        + spectral_norm(&(&ab_inv * &pi * ab_inv.transpose()))
        + spectral_norm(&(&b_inv * &pi * b_inv.transpose())))
    .sqrt();
    20.0 * root_scale.max(1.0) + offset_padding(spec)
}

/// Padding beyond the evaluation cube needed by the convolved-density
/// arguments: a generous multiple of the offset spread.
fn offset_padding(spec: &StateSpaceSpec) -> f64 {
    let b_inv = spec
        .measurement()
        .clone()
        .try_inverse()
        .expect("validated nonsingular");
    let ab_inv = spec.transition() * &b_inv;
    let pi = spec.measurement_noise().covariance();
    let spread1 = spectral_norm(&(&ab_inv * &pi * ab_inv.transpose())).sqrt();
    let spread2 = spectral_norm(&(&b_inv * &pi * b_inv.transpose())).sqrt();
    8.0 * (spread1 + spread2) + 1.0
}

struct ReplicateErrors {
    transition: f64,
    state_density: Option<f64>,
    noise_density: f64,
    state_root: f64,
    obs_root: f64,
}

struct Table1Truth {
    noise_vals: Vec<f64>,
    state_vals: Option<Vec<f64>>,
    state_root_vals: Vec<f64>,
    obs_root_vals: Vec<f64>,
}

/// Estimation-error experiment: per replicate, simulate, fit the transition
/// matrix and both densities, form the convolved predictive-root densities,
/// and score every T2 error against the model truth. The state-density
/// error is skipped when the stationary state law is unknown (gamma-noise
/// models).
pub fn run_table1(config: &ExperimentConfig) -> Result<EstimationReport> {
    config.validate()?;
    let spec = config.model.spec();
    let d = spec.dim();
    let h = config.bandwidth()?;
    // Error window [-n^{1/8}, n^{1/8}]^d: a fixed function of n, so error
    // columns are comparable across models at the same sample size. For
    // the gamma-noise models this coincides with [-1/h, 1/h]^d.
    let limit = (config.n as f64).powf(0.125);
    let volume = (2.0 * limit).powi(d as i32);
    let kernel = KernelSpec::default();

    let t2_pts = sample_cube(
        limit,
        d,
        config.t2_samples,
        derive(config.master_seed, RUN_STREAM_BASE),
    );
    let truth = build_table1_truth(config, &spec, limit, &t2_pts)?;

    let rows: Result<Vec<ReplicateErrors>> = (0..config.replicates)
        .into_par_iter()
        .map(|r| {
            table1_replicate(config, &spec, h, limit, &kernel, &t2_pts, &truth, volume, r)
                .map_err(|e| e.in_replicate(r))
        })
        .collect();
    let rows = rows?;

    let collect = |f: &dyn Fn(&ReplicateErrors) -> f64| -> Vec<f64> { rows.iter().map(f).collect() };
    let state_density_err = if rows.iter().all(|r| r.state_density.is_some()) {
        Some(summarize(
            &rows.iter().map(|r| r.state_density.unwrap()).collect::<Vec<_>>(),
        ))
    } else {
        None
    };
    Ok(EstimationReport {
        model: config.model.id().to_string(),
        n: config.n,
        replicates: config.replicates,
        master_seed: config.master_seed,
        bandwidth: h,
        node_count: config.node_count,
        transition_err: summarize(&collect(&|r| r.transition)),
        state_density_err,
        noise_density_err: summarize(&collect(&|r| r.noise_density)),
        state_root_err: summarize(&collect(&|r| r.state_root)),
        obs_root_err: summarize(&collect(&|r| r.obs_root)),
        config_hash: config.hash(),
        header: config.header_comment("table1", h),
    })
}

fn build_table1_truth(
    config: &ExperimentConfig,
    spec: &StateSpaceSpec,
    limit: f64,
    t2_pts: &[f64],
) -> Result<Table1Truth> {
    let d = spec.dim();
    let eps = spec.state_noise();
    let noise_vals: Vec<f64> = t2_pts
        .chunks_exact(d)
        .map(|p| eps.density(p))
        .collect::<Result<_>>()?;
    let state_vals = match eps.gaussian_covariance() {
        Some(_) => {
            let gd = GaussianDensity::new(&spec.stationary_state_covariance())?;
            Some(t2_pts.chunks_exact(d).map(|p| gd.eval_at(p)).collect())
        }
        None => None,
    };
    let is_gaussian = eps.gaussian_covariance().is_some()
        && spec.measurement_noise().gaussian_covariance().is_some();
    let (state_root_vals, obs_root_vals) = if is_gaussian || d == 1 {
        let truth = RootTruth::build(config, spec, limit + 0.5)?;
        (
            t2_pts.chunks_exact(d).map(|p| truth.state_at(p)).collect(),
            t2_pts.chunks_exact(d).map(|p| truth.obs_at(p)).collect(),
        )
    } else {
        // Gamma noises in two dimensions: no grid, evaluate the Monte
        // Carlo truth directly at the sample points.
        let seed = derive(config.master_seed, RUN_STREAM_BASE + 2);
        let truth_density = TruthDensity(eps);
        let a = spec.transition();
        let b = spec.measurement();
        let eta = spec.measurement_noise();
        (
            state_root_density_curve(&truth_density, a, b, eta, t2_pts, config.truth_draws, derive(seed, 0))?,
            obs_root_density_curve(&truth_density, a, b, eta, t2_pts, config.truth_draws, derive(seed, 1))?,
        )
    };
    Ok(Table1Truth {
        noise_vals,
        state_vals,
        state_root_vals,
        obs_root_vals,
    })
}

#[allow(clippy::too_many_arguments)]
fn table1_replicate(
    config: &ExperimentConfig,
    spec: &StateSpaceSpec,
    h: f64,
    limit: f64,
    kernel: &KernelSpec,
    t2_pts: &[f64],
    truth: &Table1Truth,
    volume: f64,
    r: usize,
) -> Result<ReplicateErrors> {
    let d = spec.dim();
    let base = r as u64 * STREAMS_PER_REPLICATE;
    let master = config.master_seed;
    let a = spec.transition();
    let b = spec.measurement();
    let eta = spec.measurement_noise();

    let sim = generate_series(spec, config.n, derive(master, base), config.burn_in)?;
    let a_hat = estimate_transition(&sim.observations, b)?;
    let transition = spectral_norm(&(&a_hat - a));

    let nodes = build_fourier_nodes(h, kernel.support_radius(), config.node_count, d, derive(master, base + 1))?;
    let state_est = fit_state_density(&sim.observations, b, eta, kernel, &nodes)?;
    let noise_est = fit_noise_density(&sim.observations, b, &a_hat, eta, kernel, &nodes)?;

    let step = tabulation_step(nodes.half_width());
    let pad = offset_padding(spec);
    let cube_lo = vec![-limit - 2.0 * step; d];
    let cube_hi = vec![limit + 2.0 * step; d];
    let wide = limit * spectral_norm(&b.clone().try_inverse().unwrap()).max(1.0) + pad;
    let wide_lo = vec![-wide; d];
    let wide_hi = vec![wide; d];

    let state_tab = state_est.tabulate(&cube_lo, &cube_hi, step)?;
    let noise_tab = noise_est.tabulate(&wide_lo, &wide_hi, step)?;

    let state_density = truth.state_vals.as_ref().map(|tv| {
        let vals: Vec<f64> = t2_pts.chunks_exact(d).map(|p| state_tab.eval_at(p)).collect();
        t2_error_from_values(&vals, tv, volume)
    });
    let noise_vals: Vec<f64> = t2_pts.chunks_exact(d).map(|p| noise_tab.eval_at(p)).collect();
    let noise_density = t2_error_from_values(&noise_vals, &truth.noise_vals, volume);

    let (zhat_vals, ghat_vals) = if d == 1 {
        // Evaluate the convolved estimators on a dense grid once, then read
        // them off at the sample points.
        let lo = -limit - 0.25;
        let gstep = (2.0 * (limit + 0.25)) / (CURVE_POINTS - 1) as f64;
        let grid: Vec<f64> = (0..CURVE_POINTS).map(|i| lo + i as f64 * gstep).collect();
        let zhat = state_root_density_curve(
            &noise_tab, &a_hat, b, eta, &grid, config.conv_draws, derive(master, base + 2),
        )?;
        let ghat = obs_root_density_curve(
            &noise_tab, &a_hat, b, eta, &grid, config.conv_draws, derive(master, base + 3),
        )?;
        let ztab = TabulatedDensity::from_values_1d(lo, gstep, zhat);
        let gtab = TabulatedDensity::from_values_1d(lo, gstep, ghat);
        (
            t2_pts.chunks_exact(1).map(|p| ztab.eval_at(p)).collect::<Vec<f64>>(),
            t2_pts.chunks_exact(1).map(|p| gtab.eval_at(p)).collect::<Vec<f64>>(),
        )
    } else {
        (
            state_root_density_curve(
                &noise_tab, &a_hat, b, eta, t2_pts, config.conv_draws, derive(master, base + 2),
            )?,
            obs_root_density_curve(
                &noise_tab, &a_hat, b, eta, t2_pts, config.conv_draws, derive(master, base + 3),
            )?,
        )
    };
    let state_root = t2_error_from_values(&zhat_vals, &truth.state_root_vals, volume);
    let obs_root = t2_error_from_values(&ghat_vals, &truth.obs_root_vals, volume);

    Ok(ReplicateErrors {
        transition,
        state_density,
        noise_density,
        state_root,
        obs_root,
    })
}

/// Coverage experiment: per replicate, simulate with a held-out future
/// pair, fit, build both interval families, and score containment of the
/// true current state, next state, and next observation along with the
/// interval lengths.
pub fn run_table2(config: &ExperimentConfig) -> Result<CoverageReport> {
    config.validate()?;
    let spec = config.model.spec();
    let d = spec.dim();
    let h = config.bandwidth()?;
    let kernel = KernelSpec::default();
    // Wide enough for every point the doubling search can probe before it
    // settles; the estimate's genuine tail amplitude out there is
    // negligible.
    let tab_range = search_range(&spec);

    struct RepOutcome {
        alg1_hits: [bool; 3],
        alg1_lengths: [f64; 3],
        kalman_hits: [bool; 3],
        kalman_lengths: [f64; 3],
    }

    let rows: Result<Vec<RepOutcome>> = (0..config.replicates)
        .into_par_iter()
        .map(|r| -> Result<RepOutcome> {
            let base = r as u64 * STREAMS_PER_REPLICATE;
            let master = config.master_seed;
            let run = || -> Result<RepOutcome> {
                let sim = generate_series(&spec, config.n, derive(master, base), config.burn_in)?;
                let b = spec.measurement();
                let eta = spec.measurement_noise();
                let a_hat = estimate_transition(&sim.observations, b)?;
                let nodes = build_fourier_nodes(
                    h,
                    kernel.support_radius(),
                    config.node_count,
                    d,
                    derive(master, base + 1),
                )?;
                let noise_est =
                    fit_noise_density(&sim.observations, b, &a_hat, eta, &kernel, &nodes)?;
                let budget = McBudget {
                    draws: config.mc_draws,
                    tol: config.bracket_tol,
                    max_doublings: 60,
                    seed: derive(master, base + 4),
                };
                let reports = if d == 1 {
                    let step = tabulation_step(nodes.half_width());
                    let tab = noise_est.tabulate(&[-tab_range], &[tab_range], step)?;
                    predict_intervals(&sim.observations, b, eta, &tab, &a_hat, config.level, &budget)?
                } else {
                    predict_intervals(
                        &sim.observations,
                        b,
                        eta,
                        &noise_est,
                        &a_hat,
                        config.level,
                        &budget,
                    )?
                };
                let kal = kalman_intervals(&spec, &sim.observations, config.level, config.kalman_init)?;
                let targets = [sim.last_state(), sim.next_state.clone(), sim.next_obs.clone()];
                let mut alg1_hits = [false; 3];
                let mut alg1_lengths = [0.0; 3];
                let mut kalman_hits = [false; 3];
                let mut kalman_lengths = [0.0; 3];
                for i in 0..3 {
                    alg1_hits[i] = reports[i].contains(&targets[i]);
                    alg1_lengths[i] = reports[i].length();
                    kalman_hits[i] = kal[i].contains(&targets[i])?;
                    kalman_lengths[i] = kal[i].mean_length();
                }
                Ok(RepOutcome {
                    alg1_hits,
                    alg1_lengths,
                    kalman_hits,
                    kalman_lengths,
                })
            };
            run().map_err(|e| e.in_replicate(r))
        })
        .collect();
    let rows = rows?;

    let m = rows.len() as f64;
    let mut alg1 = MethodCoverage {
        method: "algorithm1".to_string(),
        coverage: [0.0; 3],
        mean_length: [0.0; 3],
    };
    let mut kalman = MethodCoverage {
        method: "kalman".to_string(),
        coverage: [0.0; 3],
        mean_length: [0.0; 3],
    };
    for row in &rows {
        for i in 0..3 {
            alg1.coverage[i] += row.alg1_hits[i] as u8 as f64 / m;
            alg1.mean_length[i] += row.alg1_lengths[i] / m;
            kalman.coverage[i] += row.kalman_hits[i] as u8 as f64 / m;
            kalman.mean_length[i] += row.kalman_lengths[i] / m;
        }
    }
    Ok(CoverageReport {
        model: config.model.id().to_string(),
        n: config.n,
        replicates: config.replicates,
        master_seed: config.master_seed,
        level: config.level,
        methods: vec![alg1, kalman],
        config_hash: config.hash(),
        header: config.header_comment("table2", h),
    })
}

// ---------------------------------------------------------------------------
// Pointwise bands
// ---------------------------------------------------------------------------

/// Which curve a band table tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandTarget {
    /// The state-noise density and its estimate.
    Noise,
    /// The state-predictive-root density and its estimate.
    StateRoot,
    /// The observation-predictive-root density and its estimate.
    ObsRoot,
}

impl BandTarget {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(BandTarget::Noise),
            "state" | "state-root" => Ok(BandTarget::StateRoot),
            "observation" | "obs-root" => Ok(BandTarget::ObsRoot),
            _ => Err(Error::InvalidParameter(format!(
                "unknown band target '{s}' (expected noise, state, or observation)"
            ))),
        }
    }
}

/// Pointwise truth, mean, and 5%/95% quantiles of an estimated curve
/// across replicates.
#[derive(Debug, Clone, Serialize)]
pub struct BandTable {
    pub model: String,
    pub n: usize,
    pub replicates: usize,
    pub master_seed: u64,
    pub target: BandTarget,
    pub grid: Vec<f64>,
    pub truth: Vec<f64>,
    pub mean: Vec<f64>,
    pub q05: Vec<f64>,
    pub q95: Vec<f64>,
    #[serde(skip)]
    header: String,
}

impl BandTable {
    pub fn to_csv(&self) -> String {
        let mut out = self.header.clone();
        out.push_str("grid,truth,mean,q05,q95\n");
        for i in 0..self.grid.len() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                fmt(self.grid[i]),
                fmt(self.truth[i]),
                fmt(self.mean[i]),
                fmt(self.q05[i]),
                fmt(self.q95[i]),
            ));
        }
        out
    }
}

/// Pointwise mean and 5%/95% sample-quantile bands of one estimated curve
/// over the replicates, with the model truth alongside. One-dimensional
/// models only.
pub fn figure1_bands(
    config: &ExperimentConfig,
    target: BandTarget,
    grid: &[f64],
) -> Result<BandTable> {
    config.validate()?;
    let spec = config.model.spec();
    if spec.dim() != 1 {
        return Err(Error::UnsupportedDimension {
            dim: spec.dim(),
            context: "band tables are defined for one-dimensional models",
        });
    }
    if grid.is_empty() {
        return Err(Error::InvalidParameter("band grid must be non-empty".into()));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = config.bandwidth()?;
    let kernel = KernelSpec::default();
    let max_abs = grid.iter().fold(0.0f64, |m, g| m.max(g.abs()));

    let eps = spec.state_noise();
    let truth: Vec<f64> = match target {
        BandTarget::Noise => grid
            .iter()
            .map(|&x| eps.density(&[x]))
            .collect::<Result<_>>()?,
        BandTarget::StateRoot | BandTarget::ObsRoot => {
            let truth = RootTruth::build(config, &spec, max_abs + 0.5)?;
            grid.iter()
                .map(|&x| match target {
                    BandTarget::StateRoot => truth.state_at(&[x]),
                    _ => truth.obs_at(&[x]),
                })
                .collect()
        }
    };

    let curves: Result<Vec<Vec<f64>>> = (0..config.replicates)
        .into_par_iter()
        .map(|r| -> Result<Vec<f64>> {
            let base = r as u64 * STREAMS_PER_REPLICATE;
            let master = config.master_seed;
            let run = || -> Result<Vec<f64>> {
                let b = spec.measurement();
                let eta = spec.measurement_noise();
                let sim = generate_series(&spec, config.n, derive(master, base), config.burn_in)?;
                let a_hat = estimate_transition(&sim.observations, b)?;
                let nodes = build_fourier_nodes(
                    h,
                    kernel.support_radius(),
                    config.node_count,
                    1,
                    derive(master, base + 1),
                )?;
                let noise_est =
                    fit_noise_density(&sim.observations, b, &a_hat, eta, &kernel, &nodes)?;
                match target {
                    BandTarget::Noise => {
                        Ok(grid.iter().map(|&x| noise_est.eval(&[x])).collect())
                    }
                    BandTarget::StateRoot | BandTarget::ObsRoot => {
                        let step = tabulation_step(nodes.half_width());
                        let wide = max_abs + offset_padding(&spec);
                        let tab = noise_est.tabulate(&[-wide], &[wide], step)?;
                        if target == BandTarget::StateRoot {
                            state_root_density_curve(
                                &tab, &a_hat, b, eta, &grid, config.conv_draws,
                                derive(master, base + 2),
                            )
                        } else {
                            obs_root_density_curve(
                                &tab, &a_hat, b, eta, &grid, config.conv_draws,
                                derive(master, base + 3),
                            )
                        }
                    }
                }
            };
            run().map_err(|e| e.in_replicate(r))
        })
        .collect();
    let curves = curves?;

    let m = curves.len();
    let mut mean = vec![0.0; grid.len()];
    let mut q05 = vec![0.0; grid.len()];
    let mut q95 = vec![0.0; grid.len()];
    let mut column = vec![0.0; m];
    for i in 0..grid.len() {
        for (j, curve) in curves.iter().enumerate() {
            column[j] = curve[i];
        }
        mean[i] = column.iter().sum::<f64>() / m as f64;
        column.sort_by(|a, b| a.partial_cmp(b).unwrap());
        q05[i] = quantile(&column, 0.05);
        q95[i] = quantile(&column, 0.95);
    }
    Ok(BandTable {
        model: config.model.id().to_string(),
        n: config.n,
        replicates: config.replicates,
        master_seed: config.master_seed,
        target,
        header: config.header_comment("figure1", h),
        grid,
        truth,
        mean,
        q05,
        q95,
    })
}
