//! Prediction intervals for the current state, next state, and next
//! observation: Monte Carlo estimators of the three predictive-root CDFs,
//! a doubling-plus-bisection quantile search, direct-simulation oracle
//! CDFs for true-parameter checks, and the chi-square quantile used by the
//! parametric baseline.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::PointDensity;
use crate::model::{NoiseFamily, ObservationSeries, StateSpaceSpec};
use crate::special::gamma_p;

/// Which predictive root an interval covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RootKind {
    /// Current state given the current observation: X_n - B^{-1} Y_n.
    #[serde(rename = "filter")]
    Filter,
    /// Next state: X_{n+1} - A_hat B^{-1} Y_n.
    #[serde(rename = "state")]
    StatePredict,
    /// Next observation: Y_{n+1} - B A_hat B^{-1} Y_n.
    #[serde(rename = "observation")]
    ObsPredict,
}

/// Monte Carlo budget for one CDF search: draws per evaluation, bracket
/// tolerance, doubling cap, and the seed fixing the common random numbers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McBudget {
    pub draws: usize,
    pub tol: f64,
    pub max_doublings: u32,
    pub seed: u64,
}

impl Default for McBudget {
    fn default() -> Self {
        McBudget {
            draws: 100_000,
            tol: 1e-3,
            max_doublings: 60,
            seed: 0,
        }
    }
}

impl McBudget {
    fn validate(&self) -> Result<()> {
        if self.draws == 0 {
            return Err(Error::InvalidParameter("budget needs draws >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter("bracket tolerance must be positive".into()));
        }
        if self.max_doublings > 60 {
            return Err(Error::InvalidParameter("doubling cap must be <= 60".into()));
        }
        Ok(())
    }
}

/// A sup-norm prediction interval: ||target - center||_inf <= radius with
/// the stated nominal level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntervalReport {
    pub kind: RootKind,
    #[serde(with = "vector_as_seq")]
    pub center: DVector<f64>,
    pub radius: f64,
    pub level: f64,
    pub evaluations: u32,
    #[serde(skip, default)]
    pub bracket_width: f64,
}

mod vector_as_seq {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

impl IntervalReport {
    /// Whether `point` lies inside the box.
    pub fn contains(&self, point: &DVector<f64>) -> bool {
        (point - &self.center)
            .iter()
            .all(|v| v.abs() <= self.radius)
    }

    /// Side length of the box: twice the radius (equal in every dimension).
    pub fn length(&self) -> f64 {
        2.0 * self.radius
    }
}

/// Result of one quantile search.
#[derive(Debug, Clone, Copy)]
pub struct QuantileSearch {
    pub quantile: f64,
    pub evaluations: u32,
    pub bracket_width: f64,
}

/// Find the level-quantile of a nondecreasing function `m` by doubling the
/// upper end from [0, 1] until m reaches `level`, then bisecting the
/// bracket down to `tol`; returns the bracket midpoint.
///
/// Errors with `LevelUnreachable` if the doubling cap is hit first, which
/// signals a fitted density with insufficient mass or too small a draw
/// budget.
pub fn search_quantile<M: FnMut(f64) -> f64>(
    mut m: M,
    level: f64,
    tol: f64,
    max_doublings: u32,
) -> Result<QuantileSearch> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "level must lie in (0, 1), got {level}"
        )));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter("tolerance must be positive".into()));
    }
    let mut evaluations = 0u32;
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    let mut doublings = 0u32;
    loop {
        let value = m(hi).min(1.0);
        evaluations += 1;
        if value >= level {
            break;
        }
        if doublings >= max_doublings {
            return Err(Error::LevelUnreachable {
                level,
                reached: value,
                doublings,
            });
        }
        hi *= 2.0;
        doublings += 1;
    }
    while hi - lo > tol {
        let mid = 0.5 * (hi + lo);
        let value = m(mid).min(1.0);
        evaluations += 1;
        if value < level {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(QuantileSearch {
        quantile: 0.5 * (hi + lo),
        evaluations,
        bracket_width: hi - lo,
    })
}

// ---------------------------------------------------------------------------
// Monte Carlo CDF operations
// ---------------------------------------------------------------------------

/// Filter-root CDF estimate at `x`: the fraction of measurement-noise draws
/// with ||B^{-1} zeta||_inf <= x. Draws are fixed by the budget seed, so
/// repeated calls share common random numbers and are exactly monotone in x.
pub fn filter_root_cdf(
    x: f64,
    b: &DMatrix<f64>,
    eta: &NoiseFamily,
    budget: &McBudget,
) -> Result<f64> {
    budget.validate()?;
    let norms = filter_norms(b, eta, budget)?;
    Ok(fraction_at_most(&norms, x))
}

/// State-predictive-root CDF estimate at `x`:
/// (2x)^d times the mean of the density at x u_j + A_hat B^{-1} zeta_j,
/// with zeta_j measurement-noise draws and u_j uniform on [-1, 1]^d, both
/// fixed by the budget seed (kappa_j = x u_j reuses one draw set across x).
pub fn state_root_cdf(
    x: f64,
    density: &dyn PointDensity,
    a_hat: &DMatrix<f64>,
    b: &DMatrix<f64>,
    eta: &NoiseFamily,
    budget: &McBudget,
) -> Result<f64> {
    budget.validate()?;
    let sampler = state_sampler(density.dim(), a_hat, b, eta, budget)?;
    Ok(sampler.cdf(x, density))
}

/// Observation-predictive-root CDF estimate at `x`:
/// (2x)^d / |det B| times the mean of the density at
/// B^{-1}(x u_j) + A_hat B^{-1} zeta_{1,j} - B^{-1} zeta_{2,j}, with two
/// independent measurement-noise draw sets.
pub fn obs_root_cdf(
    x: f64,
    density: &dyn PointDensity,
    a_hat: &DMatrix<f64>,
    b: &DMatrix<f64>,
    eta: &NoiseFamily,
    budget: &McBudget,
) -> Result<f64> {
    budget.validate()?;
    let sampler = obs_sampler(density.dim(), a_hat, b, eta, budget)?;
    Ok(sampler.cdf(x, density))
}

/// Precomputed common-random-number draws for one density-weighted CDF:
/// evaluation points are x * dirs[j] + offsets[j].
struct RootSampler {
    dim: usize,
    offsets: Vec<f64>,
    dirs: Vec<f64>,
    factor: f64,
}

impl RootSampler {
    fn cdf(&self, x: f64, density: &dyn PointDensity) -> f64 {
        let d = self.dim;
        let count = self.offsets.len() / d;
        const CHUNK: usize = 8192;
        let chunks = count.div_ceil(CHUNK);
        // Fixed chunk boundaries and a sequential reduction keep the result
        // independent of the worker count.
        let partials: Vec<f64> = (0..chunks)
            .into_par_iter()
            .map(|ci| {
                let start = ci * CHUNK;
                let end = (start + CHUNK).min(count);
                let mut point = [0.0f64; 8];
                let mut sum = 0.0;
                for j in start..end {
                    for i in 0..d {
                        point[i] = x * self.dirs[j * d + i] + self.offsets[j * d + i];
                    }
                    sum += density.eval_at(&point[..d]);
                }
                sum
            })
            .collect();
        let mean = partials.iter().sum::<f64>() / count as f64;
        (2.0 * x).powi(d as i32) * self.factor * mean
    }
}

fn filter_norms(b: &DMatrix<f64>, eta: &NoiseFamily, budget: &McBudget) -> Result<Vec<f64>> {
    let d = eta.dim();
    let b_inv = b
        .clone()
        .try_inverse()
        .ok_or(Error::SingularMatrix("measurement transition matrix B"))?;
    let mut rng = crate::rng::stream(budget.seed, 0);
    let mut buf = vec![0.0f64; d];
    let mut norms: Vec<f64> = (0..budget.draws)
        .map(|_| {
            eta.sample_into(&mut rng, &mut buf);
            let v = &b_inv * DVector::from_column_slice(&buf);
            v.amax()
        })
        .collect();
    norms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(norms)
}

fn fraction_at_most(sorted: &[f64], x: f64) -> f64 {
    let idx = sorted.partition_point(|v| *v <= x);
    idx as f64 / sorted.len() as f64
}

fn state_sampler(
    dim: usize,
    a_hat: &DMatrix<f64>,
    b: &DMatrix<f64>,
    eta: &NoiseFamily,
    budget: &McBudget,
) -> Result<RootSampler> {
    check_dim(dim)?;
    let b_inv = b
        .clone()
        .try_inverse()
        .ok_or(Error::SingularMatrix("measurement transition matrix B"))?;
    let map = a_hat * &b_inv;
    let r = budget.draws;
    let mut offsets = vec![0.0f64; r * dim];
    let mut dirs = vec![0.0f64; r * dim];
    let mut eta_rng = crate::rng::stream(budget.seed, 1);
    let mut cube_rng = crate::rng::stream(budget.seed, 2);
    let mut buf = vec![0.0f64; dim];
    for j in 0..r {
        eta.sample_into(&mut eta_rng, &mut buf);
        let c = &map * DVector::from_column_slice(&buf);
        offsets[j * dim..(j + 1) * dim].copy_from_slice(c.as_slice());
        for i in 0..dim {
            dirs[j * dim + i] = cube_rng.random_range(-1.0..=1.0);
        }
    }
    Ok(RootSampler {
        dim,
        offsets,
        dirs,
        factor: 1.0,
    })
}

fn obs_sampler(
    dim: usize,
    a_hat: &DMatrix<f64>,
    b: &DMatrix<f64>,
    eta: &NoiseFamily,
    budget: &McBudget,
) -> Result<RootSampler> {
    check_dim(dim)?;
    let b_inv = b
        .clone()
        .try_inverse()
        .ok_or(Error::SingularMatrix("measurement transition matrix B"))?;
    let det = b.determinant().abs();
    let map = a_hat * &b_inv;
    let r = budget.draws;
    let mut offsets = vec![0.0f64; r * dim];
    let mut dirs = vec![0.0f64; r * dim];
    let mut eta1_rng = crate::rng::stream(budget.seed, 3);
    let mut eta2_rng = crate::rng::stream(budget.seed, 4);
    let mut cube_rng = crate::rng::stream(budget.seed, 5);
    let mut buf = vec![0.0f64; dim];
    for j in 0..r {
        eta.sample_into(&mut eta1_rng, &mut buf);
        let mut c = &map * DVector::from_column_slice(&buf);
        eta.sample_into(&mut eta2_rng, &mut buf);
        c -= &b_inv * DVector::from_column_slice(&buf);
        offsets[j * dim..(j + 1) * dim].copy_from_slice(c.as_slice());
        for i in 0..dim {
            buf[i] = cube_rng.random_range(-1.0..=1.0);
        }
        let v = &b_inv * DVector::from_column_slice(&buf);
        dirs[j * dim..(j + 1) * dim].copy_from_slice(v.as_slice());
    }
    Ok(RootSampler {
        dim,
        offsets,
        dirs,
        factor: 1.0 / det,
    })
}

fn check_dim(dim: usize) -> Result<()> {
    if dim > 8 {
        return Err(Error::UnsupportedDimension {
            dim,
            context: "prediction operations support d <= 8",
        });
    }
    Ok(())
}

/// Construct the three prediction intervals at the given nominal level.
///
/// The interval centers are the plug-in predictors B^{-1} Y_n,
/// A_hat B^{-1} Y_n, and B A_hat B^{-1} Y_n; the radii are quantiles of the
/// estimated predictive-root CDFs found by [`search_quantile`]. All Monte
/// Carlo draws are generated once per call and reused across every x the
/// search queries, so each CDF estimate is a fixed nearly monotone function
/// and the bisection is well posed.
pub fn predict_intervals(
    series: &ObservationSeries,
    b: &DMatrix<f64>,
    eta: &NoiseFamily,
    noise_density: &dyn PointDensity,
    a_hat: &DMatrix<f64>,
    level: f64,
    budget: &McBudget,
) -> Result<[IntervalReport; 3]> {
    budget.validate()?;
    let d = series.dim();
    if noise_density.dim() != d || eta.dim() != d {
        return Err(Error::InvalidParameter(
            "density and noise dimensions must match the series".into(),
        ));
    }
    let b_inv = b
        .clone()
        .try_inverse()
        .ok_or(Error::SingularMatrix("measurement transition matrix B"))?;
    let y_n = series.last_observation();
    let filter_center = &b_inv * &y_n;
    let state_center = a_hat * &filter_center;
    let obs_center = b * &state_center;

    let norms = filter_norms(b, eta, budget)?;
    let filter_search = search_quantile(
        |x| fraction_at_most(&norms, x),
        level,
        budget.tol,
        budget.max_doublings,
    )?;

    let state = state_sampler(d, a_hat, b, eta, budget)?;
    let state_search = search_quantile(
        |x| state.cdf(x, noise_density),
        level,
        budget.tol,
        budget.max_doublings,
    )?;

    let obs = obs_sampler(d, a_hat, b, eta, budget)?;
    let obs_search = search_quantile(
        |x| obs.cdf(x, noise_density),
        level,
        budget.tol,
        budget.max_doublings,
    )?;

    let report = |kind, center: DVector<f64>, search: QuantileSearch| IntervalReport {
        kind,
        center,
        radius: search.quantile,
        level,
        evaluations: search.evaluations,
        bracket_width: search.bracket_width,
    };
    Ok([
        report(RootKind::Filter, filter_center, filter_search),
        report(RootKind::StatePredict, state_center, state_search),
        report(RootKind::ObsPredict, obs_center, obs_search),
    ])
}

/// Direct-simulation CDF of a predictive root under the true model, for
/// true-parameter checks and tests: simulates the root itself
/// (Filter: ||B^{-1} eta||; StatePredict: ||eps - A B^{-1} eta||;
/// ObsPredict: ||eta' + B eps - B A B^{-1} eta||) and counts exceedances.
pub fn simulate_root_cdf(
    kind: RootKind,
    x: f64,
    spec: &StateSpaceSpec,
    draws: usize,
    seed: u64,
) -> f64 {
    let d = spec.dim();
    let a = spec.transition();
    let b = spec.measurement();
    let b_inv = b.clone().try_inverse().expect("B validated nonsingular");
    let eta = spec.measurement_noise();
    let eps = spec.state_noise();
    let mut eta_rng = crate::rng::stream(seed, 0);
    let mut eps_rng = crate::rng::stream(seed, 1);
    let mut eta2_rng = crate::rng::stream(seed, 2);
    let mut buf = vec![0.0f64; d];
    let mut hits = 0usize;
    for _ in 0..draws {
        eta.sample_into(&mut eta_rng, &mut buf);
        let bh = &b_inv * DVector::from_column_slice(&buf);
        let norm = match kind {
            RootKind::Filter => bh.amax(),
            RootKind::StatePredict => {
                eps.sample_into(&mut eps_rng, &mut buf);
                let e = DVector::from_column_slice(&buf);
                (e - a * bh).amax()
            }
            RootKind::ObsPredict => {
                eps.sample_into(&mut eps_rng, &mut buf);
                let e = DVector::from_column_slice(&buf);
                eta.sample_into(&mut eta2_rng, &mut buf);
                let h2 = DVector::from_column_slice(&buf);
                (h2 + b * (e - a * bh)).amax()
            }
        };
        if norm <= x {
            hits += 1;
        }
    }
    hits as f64 / draws as f64
}

/// The `p` quantile of the chi-square distribution with `dim` degrees of
/// freedom, by bisecting the regularized incomplete gamma CDF to absolute
/// tolerance 1e-9.
pub fn chi2_quantile(dim: usize, p: f64) -> Result<f64> {
    if dim == 0 {
        return Err(Error::InvalidParameter("degrees of freedom must be >= 1".into()));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "quantile level must lie in (0, 1), got {p}"
        )));
    }
    let a = dim as f64 / 2.0;
    let cdf = |x: f64| gamma_p(a, x / 2.0);
    let mut hi = 1.0;
    while cdf(hi) < p {
        hi *= 2.0;
        if hi > 1e12 {
            break;
        }
    }
    let mut lo = 0.0;
    while hi - lo > 1e-9 {
        let mid = 0.5 * (hi + lo);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (hi + lo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::FnDensity;
    use crate::model::NoiseFamily;
    use crate::special::standard_normal_cdf;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use nalgebra::DMatrix;

    fn unit_b() -> DMatrix<f64> {
        DMatrix::identity(1, 1)
    }

    fn gauss_budget(seed: u64) -> McBudget {
        McBudget {
            draws: 100_000,
            seed,
            ..McBudget::default()
        }
    }

    #[test]
    fn filter_cdf_matches_normal_cdf() {
        let eta = NoiseFamily::gaussian_iid(1, 1.0).unwrap();
        let budget = gauss_budget(5);
        let x = 1.959_963_984_540_054_5;
        let got = filter_root_cdf(x, &unit_b(), &eta, &budget).unwrap();
        let tol = 3.0 * (0.95_f64 * 0.05 / budget.draws as f64).sqrt();
        assert_abs_diff_eq!(got, 0.95, epsilon = tol);
        assert!(filter_root_cdf(1e-9, &unit_b(), &eta, &budget).unwrap() < 1e-3);
        assert_eq!(filter_root_cdf(1e6, &unit_b(), &eta, &budget).unwrap(), 1.0);
    }

    #[test]
    fn filter_cdf_exactly_monotone_under_crn() {
        let eta = NoiseFamily::gamma_difference_iid(1, 0.5, 1.0).unwrap();
        let budget = McBudget {
            draws: 20_000,
            seed: 9,
            ..McBudget::default()
        };
        let mut prev = 0.0;
        for i in 0..100 {
            let x = 0.05 + 4.0 * i as f64 / 99.0;
            let v = filter_root_cdf(x, &unit_b(), &eta, &budget).unwrap();
            assert!(v >= prev, "CDF decreased at grid point {i}");
            prev = v;
        }
    }

    #[test]
    fn state_cdf_vanishes_at_zero_and_is_monotone_with_true_density() {
        let eta = NoiseFamily::gaussian_iid(1, 1.0).unwrap();
        let a = DMatrix::from_element(1, 1, 0.8);
        let density = FnDensity::new(1, |x: &[f64]| {
            (-0.5 * x[0] * x[0]).exp() / (2.0 * std::f64::consts::PI).sqrt()
        });
        let budget = gauss_budget(11);
        let near_zero = state_root_cdf(1e-9, &density, &a, &unit_b(), &eta, &budget).unwrap();
        assert!(near_zero < 1e-6);
        let mut prev = -1e-12;
        for i in 1..=50 {
            let x = 3.5 * i as f64 / 50.0;
            let v = state_root_cdf(x, &density, &a, &unit_b(), &eta, &budget).unwrap();
            assert!(
                v >= prev - 1e-12,
                "CRN state CDF decreased at x = {x}: {v} < {prev}"
            );
            prev = v;
        }
    }

    #[test]
    fn obs_cdf_vanishes_at_zero() {
        let eta = NoiseFamily::gaussian_iid(1, 1.0).unwrap();
        let a = DMatrix::from_element(1, 1, 0.8);
        let b = DMatrix::from_element(1, 1, 2.0);
        let density = FnDensity::new(1, |x: &[f64]| {
            (-0.5 * x[0] * x[0]).exp() / (2.0 * std::f64::consts::PI).sqrt()
        });
        let budget = McBudget {
            draws: 10_000,
            seed: 2,
            ..McBudget::default()
        };
        let v = obs_root_cdf(1e-9, &density, &a, &b, &eta, &budget).unwrap();
        assert!(v >= 0.0 && v < 1e-6, "G(0+) = {v}");
    }

    #[test]
    fn true_parameter_ops_agree_with_simulation_oracle() {
        // Gaussian benchmark model: A = 0.8, B = 1, unit noises.
        let eps = NoiseFamily::gaussian_iid(1, 1.0).unwrap();
        let eta = NoiseFamily::gaussian_iid(1, 1.0).unwrap();
        let spec = StateSpaceSpec::new(
            DMatrix::from_element(1, 1, 0.8),
            unit_b(),
            eps.clone(),
            eta.clone(),
        )
        .unwrap();
        let density = crate::estimation::TruthDensity(&eps);
        let budget = McBudget {
            draws: 40_000,
            seed: 21,
            ..McBudget::default()
        };
        let tol = 3.0 * (0.25 / budget.draws as f64).sqrt();
        for i in 1..=6 {
            let x = 0.6 * i as f64;
            let n_est =
                state_root_cdf(x, &density, spec.transition(), spec.measurement(), &eta, &budget)
                    .unwrap();
            let oracle = simulate_root_cdf(RootKind::StatePredict, x, &spec, 4 * budget.draws, 77);
            assert_abs_diff_eq!(n_est, oracle, epsilon = tol);
            let g_est =
                obs_root_cdf(x, &density, spec.transition(), spec.measurement(), &eta, &budget)
                    .unwrap();
            let oracle = simulate_root_cdf(RootKind::ObsPredict, x, &spec, 4 * budget.draws, 78);
            assert_abs_diff_eq!(g_est, oracle, epsilon = tol);
        }
    }

    #[test]
    fn search_quantile_inverts_analytic_cdfs() {
        let tol = 1e-3;
        let linear = search_quantile(|x| x.min(1.0), 0.95, tol, 60).unwrap();
        assert_abs_diff_eq!(linear.quantile, 0.95, epsilon = tol);
        assert!(linear.bracket_width <= tol);

        let normal = search_quantile(|x| 2.0 * standard_normal_cdf(x) - 1.0, 0.95, tol, 60).unwrap();
        assert_abs_diff_eq!(normal.quantile, 1.959_963_984_540_054_5, epsilon = tol);

        // Lipschitz check on a strictly increasing CDF.
        let m = |x: f64| x / (1.0 + x);
        let res = search_quantile(m, 0.9, tol, 60).unwrap();
        assert!((m(res.quantile) - 0.9).abs() <= tol);

        let capped = search_quantile(|x| x.min(0.9), 0.95, tol, 60);
        assert!(matches!(capped, Err(Error::LevelUnreachable { .. })));
    }

    #[test]
    fn predictor_centers_are_linear_transforms_of_last_observation() {
        let eps = NoiseFamily::gaussian_iid(1, 1.0).unwrap();
        let eta = NoiseFamily::gaussian_iid(1, 1.0).unwrap();
        let b = DMatrix::from_element(1, 1, 2.0);
        let a_hat = DMatrix::from_element(1, 1, 0.7);
        let data = DMatrix::from_column_slice(4, 1, &[0.4, -1.0, 2.2, 3.0]);
        let series = ObservationSeries::new(data).unwrap();
        let density = crate::estimation::TruthDensity(&eps);
        let budget = McBudget {
            draws: 2_000,
            seed: 3,
            ..McBudget::default()
        };
        let reports = predict_intervals(&series, &b, &eta, &density, &a_hat, 0.9, &budget).unwrap();
        assert_relative_eq!(reports[0].center[0], 1.5, epsilon = 1e-15); // B^{-1} y_n
        assert_relative_eq!(reports[1].center[0], 1.05, epsilon = 1e-15); // A_hat B^{-1} y_n
        assert_relative_eq!(reports[2].center[0], 2.1, epsilon = 1e-15); // B A_hat B^{-1} y_n
        for r in &reports {
            assert!(r.radius > 0.0);
            assert!(r.bracket_width <= budget.tol);
        }
    }

    #[test]
    fn simulation_oracle_known_values() {
        let eps = NoiseFamily::gaussian_iid(1, 1.0).unwrap();
        let eta = NoiseFamily::gaussian_iid(1, 1.0).unwrap();
        let spec = StateSpaceSpec::new(
            DMatrix::from_element(1, 1, 0.8),
            unit_b(),
            eps,
            eta,
        )
        .unwrap();
        let draws = 100_000;
        let got = simulate_root_cdf(RootKind::Filter, 1.959_963_984_540_054_5, &spec, draws, 5);
        let tol = 3.0 * (0.95_f64 * 0.05 / draws as f64).sqrt();
        assert_abs_diff_eq!(got, 0.95, epsilon = tol);
        assert_eq!(
            simulate_root_cdf(RootKind::ObsPredict, 1e9, &spec, 1_000, 5),
            1.0
        );
        // State root is N(0, 1 + 0.8^2) for this model.
        let sd = (1.0 + 0.64_f64).sqrt();
        for &x in &[0.8, 1.6, 2.4] {
            let closed = 2.0 * standard_normal_cdf(x / sd) - 1.0;
            let got = simulate_root_cdf(RootKind::StatePredict, x, &spec, draws, 6);
            let tol = 3.0 * (closed * (1.0 - closed) / draws as f64).sqrt();
            assert_abs_diff_eq!(got, closed, epsilon = tol);
        }
    }

    #[test]
    fn chi2_quantile_known_values() {
        assert_abs_diff_eq!(chi2_quantile(1, 0.95).unwrap(), 3.841_458_820_694_125, epsilon = 1e-8);
        // Closed form for two degrees of freedom: -2 ln(1 - p).
        assert_abs_diff_eq!(
            chi2_quantile(2, 0.95).unwrap(),
            -2.0 * 0.05_f64.ln(),
            epsilon = 1e-8
        );
        assert!(chi2_quantile(3, 1e-12).unwrap() < 1e-3);
        assert!(chi2_quantile(0, 0.5).is_err());
        assert!(chi2_quantile(2, 1.0).is_err());
    }
}
