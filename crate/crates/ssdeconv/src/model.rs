//! Model specifications: noise families, the state space model itself,
//! observation series, smoothness regimes, and the small linear-algebra
//! kit (pseudo-inverse, spectral norm) the estimators need.
//!
//! The state space model is the latent linear recursion
//! `X_{n+1} = A X_n + eps_{n+1}` observed through `Y_n = B X_n + eta_n`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::bessel_k;

/// Number of grid points in the precomputed gamma-difference density table.
const DENSITY_TABLE_POINTS: usize = 4096;
/// Half-width of the density table in standard deviations.
const DENSITY_TABLE_SDS: f64 = 12.0;

/// A mean-zero noise law exposing its density, characteristic function,
/// covariance, and a seeded sampler.
///
/// Three families ship: i.i.d. Gaussian coordinates, i.i.d. differences of
/// two gamma variables per coordinate, and a nonsingular linear map of a
/// base family with independent coordinates (for correlated noises).
#[derive(Debug, Clone)]
pub struct NoiseFamily {
    kind: NoiseKind,
}

#[derive(Debug, Clone)]
enum NoiseKind {
    GaussianIid {
        dim: usize,
        sigma: f64,
    },
    GammaDifferenceIid {
        dim: usize,
        shape: f64,
        scale: f64,
        table: DensityTable,
    },
    LinearMap {
        mix: DMatrix<f64>,
        mix_inv: DMatrix<f64>,
        abs_det: f64,
        base: Box<NoiseFamily>,
    },
}

/// Equally spaced table of one-dimensional density values with linear
/// interpolation; zero outside the covered range.
#[derive(Debug, Clone)]
struct DensityTable {
    lo: f64,
    step: f64,
    values: Vec<f64>,
}

impl DensityTable {
    fn eval(&self, x: f64) -> f64 {
        let pos = (x - self.lo) / self.step;
        if pos < 0.0 || pos >= (self.values.len() - 1) as f64 {
            return 0.0;
        }
        let i = pos as usize;
        let frac = pos - i as f64;
        self.values[i] * (1.0 - frac) + self.values[i + 1] * frac
    }
}

impl NoiseFamily {
    /// Independent N(0, sigma^2) coordinates.
    pub fn gaussian_iid(dim: usize, sigma: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("noise dimension must be >= 1".into()));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "gaussian sigma must be positive and finite, got {sigma}"
            )));
        }
        Ok(Self {
            kind: NoiseKind::GaussianIid { dim, sigma },
        })
    }

    /// Coordinates distributed as the difference of two independent
    /// Gamma(shape, scale) variables (a symmetric variance-gamma law).
    ///
    /// The density has no elementary closed form; it is precomputed from its
    /// Bessel-K representation on a linear-interpolation grid covering
    /// twelve standard deviations, because density evaluations sit in hot
    /// loops.
    pub fn gamma_difference_iid(dim: usize, shape: f64, scale: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("noise dimension must be >= 1".into()));
        }
        if !(shape > 0.0) || !(scale > 0.0) || !shape.is_finite() || !scale.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "gamma difference needs positive finite shape and scale, got {shape}, {scale}"
            )));
        }
        let table = gamma_difference_table(shape, scale);
        Ok(Self {
            kind: NoiseKind::GammaDifferenceIid {
                dim,
                shape,
                scale,
                table,
            },
        })
    }

    /// The image of `base` under a nonsingular mixing matrix.
    pub fn linear_map(mix: DMatrix<f64>, base: NoiseFamily) -> Result<Self> {
        if mix.nrows() != mix.ncols() || mix.nrows() != base.dim() {
            return Err(Error::InvalidParameter(format!(
                "mixing matrix must be square of size {}, got {}x{}",
                base.dim(),
                mix.nrows(),
                mix.ncols()
            )));
        }
        let det = mix.determinant();
        let mix_inv = mix
            .clone()
            .try_inverse()
            .ok_or(Error::SingularMatrix("linear map mixing matrix"))?;
        Ok(Self {
            kind: NoiseKind::LinearMap {
                mix,
                mix_inv,
                abs_det: det.abs(),
                base: Box::new(base),
            },
        })
    }

    /// Dimension of the noise vectors.
    pub fn dim(&self) -> usize {
        match &self.kind {
            NoiseKind::GaussianIid { dim, .. } => *dim,
            NoiseKind::GammaDifferenceIid { dim, .. } => *dim,
            NoiseKind::LinearMap { base, .. } => base.dim(),
        }
    }

    /// Density at `x`.
    ///
    /// Errors at a known singularity: the gamma-difference density with
    /// shape < 1 is unbounded at the exact origin, so evaluation there
    /// reports [`Error::DensityUnbounded`] instead of a number.
    pub fn density(&self, x: &[f64]) -> Result<f64> {
        debug_assert_eq!(x.len(), self.dim());
        match &self.kind {
            NoiseKind::GaussianIid { sigma, .. } => {
                let norm = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt());
                let mut out = 1.0;
                for &xi in x {
                    out *= norm * (-0.5 * (xi / sigma).powi(2)).exp();
                }
                Ok(out)
            }
            NoiseKind::GammaDifferenceIid { shape, table, .. } => {
                let mut out = 1.0;
                for &xi in x {
                    if xi == 0.0 && *shape < 1.0 {
                        return Err(Error::DensityUnbounded(format!(
                            "gamma difference with shape {shape} at the origin"
                        )));
                    }
                    out *= table.eval(xi);
                }
                Ok(out)
            }
            NoiseKind::LinearMap {
                mix_inv,
                abs_det,
                base,
                ..
            } => {
                let xv = DVector::from_column_slice(x);
                let pre = mix_inv * xv;
                Ok(base.density(pre.as_slice())? / abs_det)
            }
        }
    }

    /// Characteristic function E exp(i t' X) at `t`.
    pub fn char_fn(&self, t: &[f64]) -> Complex64 {
        debug_assert_eq!(t.len(), self.dim());
        match &self.kind {
            NoiseKind::GaussianIid { sigma, .. } => {
                let mut s = 0.0;
                for &ti in t {
                    s += ti * ti;
                }
                Complex64::new((-0.5 * sigma * sigma * s).exp(), 0.0)
            }
            NoiseKind::GammaDifferenceIid { shape, scale, .. } => {
                let mut out = 1.0;
                for &ti in t {
                    out *= (1.0 + scale * scale * ti * ti).powf(-shape);
                }
                Complex64::new(out, 0.0)
            }
            NoiseKind::LinearMap { mix, base, .. } => {
                let tv = DVector::from_column_slice(t);
                let mapped = mix.transpose() * tv;
                base.char_fn(mapped.as_slice())
            }
        }
    }

    /// Draw one vector into `out` using the supplied generator.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim());
        match &self.kind {
            NoiseKind::GaussianIid { sigma, .. } => {
                for o in out.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *o = sigma * z;
                }
            }
            NoiseKind::GammaDifferenceIid { shape, scale, .. } => {
                let gamma = Gamma::new(*shape, *scale).expect("validated at construction");
                for o in out.iter_mut() {
                    let a: f64 = gamma.sample(rng);
                    let b: f64 = gamma.sample(rng);
                    *o = a - b;
                }
            }
            NoiseKind::LinearMap { mix, base, .. } => {
                let d = base.dim();
                let mut buf = vec![0.0; d];
                base.sample_into(rng, &mut buf);
                let v = mix * DVector::from_vec(buf);
                out.copy_from_slice(v.as_slice());
            }
        }
    }

    /// `count` i.i.d. draws as the rows of a matrix, deterministic in `seed`.
    pub fn sample_matrix(&self, seed: u64, count: usize) -> DMatrix<f64> {
        let d = self.dim();
        let mut rng = crate::rng::stream(seed, 0);
        let mut data = vec![0.0; count * d];
        for row in data.chunks_mut(d) {
            self.sample_into(&mut rng, row);
        }
        DMatrix::from_row_slice(count, d, &data)
    }

    /// Covariance matrix of one draw.
    pub fn covariance(&self) -> DMatrix<f64> {
        match &self.kind {
            NoiseKind::GaussianIid { dim, sigma } => {
                DMatrix::identity(*dim, *dim) * (sigma * sigma)
            }
            NoiseKind::GammaDifferenceIid {
                dim, shape, scale, ..
            } => DMatrix::identity(*dim, *dim) * (2.0 * shape * scale * scale),
            NoiseKind::LinearMap { mix, base, .. } => {
                let inner = base.covariance();
                mix * inner * mix.transpose()
            }
        }
    }

    /// The exact Gaussian covariance when this family is Gaussian
    /// (possibly through a linear map); `None` otherwise.
    pub fn gaussian_covariance(&self) -> Option<DMatrix<f64>> {
        match &self.kind {
            NoiseKind::GaussianIid { dim, sigma } => {
                Some(DMatrix::identity(*dim, *dim) * (sigma * sigma))
            }
            NoiseKind::GammaDifferenceIid { .. } => None,
            NoiseKind::LinearMap { mix, base, .. } => base
                .gaussian_covariance()
                .map(|inner| mix * inner * mix.transpose()),
        }
    }
}

/// Build the density table for the difference of two Gamma(shape, scale)
/// variables from the variance-gamma closed form
/// f(x) = (theta sqrt(pi) Gamma(k))^{-1} (|x|/2theta)^{k-1/2} K_{k-1/2}(|x|/theta).
fn gamma_difference_table(shape: f64, scale: f64) -> DensityTable {
    let sd = scale * (2.0 * shape).sqrt();
    let half = DENSITY_TABLE_SDS * sd;
    let n = DENSITY_TABLE_POINTS;
    let lo = -half;
    let step = 2.0 * half / (n - 1) as f64;
    let nu = shape - 0.5;
    let log_norm = -scale.ln() - 0.5 * std::f64::consts::PI.ln() - crate::special::ln_gamma(shape);
    let values: Vec<f64> = (0..n)
        .map(|i| {
            let x = lo + i as f64 * step;
            let z = x.abs() / scale;
            if z == 0.0 {
                // Grid is even-length and symmetric, so zero never lands on
                // a grid point; keep a defined value anyway.
                if nu > 0.0 {
                    (log_norm + crate::special::ln_gamma(nu) - (2.0_f64).ln()).exp()
                } else {
                    f64::INFINITY
                }
            } else {
                let log_pow = nu * (z / 2.0).ln();
                let k = bessel_k(nu.abs(), z);
                (log_norm + log_pow).exp() * k
            }
        })
        .collect();
    DensityTable { lo, step, values }
}

/// Smoothness class of the measurement-noise characteristic function:
/// polynomial decay (ordinary) or exponential decay (super), with the
/// constants treated as declared configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SmoothnessRegime {
    Ordinary { beta: f64, b: f64, c: f64 },
    Super { beta: f64, gamma: f64, b: f64, r: f64, c: f64 },
}

impl SmoothnessRegime {
    /// Ordinary regime with unit nuisance constants.
    pub fn ordinary() -> Self {
        SmoothnessRegime::Ordinary {
            beta: 1.0,
            b: 1.0,
            c: 1.0,
        }
    }

    /// Super-smooth regime with unit nuisance constants.
    pub fn super_smooth() -> Self {
        SmoothnessRegime::Super {
            beta: 2.0,
            gamma: 0.5,
            b: 1.0,
            r: 1.0,
            c: 1.0,
        }
    }

    /// Validate strict positivity of all constants.
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            SmoothnessRegime::Ordinary { beta, b, c } => *beta > 0.0 && *b > 0.0 && *c > 0.0,
            SmoothnessRegime::Super { beta, gamma, b, r, c } => {
                *beta > 0.0 && *gamma > 0.0 && *b > 0.0 && *r > 0.0 && *c > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(
                "smoothness regime constants must be strictly positive".into(),
            ))
        }
    }
}

/// Full state space model: transition matrices plus both noise families.
/// Used for simulation and for true-parameter oracles.
#[derive(Debug, Clone)]
pub struct StateSpaceSpec {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    eps: NoiseFamily,
    eta: NoiseFamily,
}

impl StateSpaceSpec {
    /// Validates: A and B square of matching size, both nonsingular,
    /// spectral norm of A below one, state-noise covariance nonsingular.
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, eps: NoiseFamily, eta: NoiseFamily) -> Result<Self> {
        let d = a.nrows();
        if a.ncols() != d || b.nrows() != d || b.ncols() != d {
            return Err(Error::InvalidParameter(
                "transition matrices must be square and of equal size".into(),
            ));
        }
        if eps.dim() != d || eta.dim() != d {
            return Err(Error::InvalidParameter(
                "noise dimensions must match the transition matrices".into(),
            ));
        }
        if b.clone().try_inverse().is_none() {
            return Err(Error::SingularMatrix("measurement transition matrix B"));
        }
        if a.clone().try_inverse().is_none() {
            return Err(Error::SingularMatrix("state transition matrix A"));
        }
        let norm_a = spectral_norm(&a);
        if !(norm_a < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "state transition matrix must have spectral norm < 1, got {norm_a}"
            )));
        }
        if eps.covariance().try_inverse().is_none() {
            return Err(Error::SingularMatrix("state-noise covariance"));
        }
        Ok(Self { a, b, eps, eta })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn measurement(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn state_noise(&self) -> &NoiseFamily {
        &self.eps
    }

    pub fn measurement_noise(&self) -> &NoiseFamily {
        &self.eta
    }

    /// Stationary covariance of the state, the fixed point of
    /// S = A S A' + Cov(eps).
    pub fn stationary_state_covariance(&self) -> DMatrix<f64> {
        stationary_covariance(&self.a, &self.eps.covariance())
    }
}

/// Fixed point of S = A S A' + Q, iterated to convergence.
pub fn stationary_covariance(a: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = q.clone();
    for _ in 0..20_000 {
        let next = a * &s * a.transpose() + q;
        let delta = (&next - &s).norm();
        s = next;
        if delta < 1e-15 {
            break;
        }
    }
    s
}

/// Observed series: an n-by-d matrix of reals, one observation per row.
/// At least three rows are required by the lag-2 sums of the transition
/// estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSeries {
    data: DMatrix<f64>,
}

impl ObservationSeries {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.ncols() == 0 {
            return Err(Error::InvalidParameter("series must have d >= 1".into()));
        }
        if data.nrows() < 3 {
            return Err(Error::SeriesTooShort {
                n: data.nrows(),
                min: 3,
            });
        }
        Ok(Self { data })
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    /// Observation at time index `i` (zero-based) as a column vector.
    pub fn observation(&self, i: usize) -> DVector<f64> {
        self.data.row(i).transpose()
    }

    /// The most recent observation.
    pub fn last_observation(&self) -> DVector<f64> {
        self.observation(self.len() - 1)
    }
}

/// Moore-Penrose pseudo-inverse via singular value decomposition.
/// Singular values below d * sigma_max * machine-epsilon are treated as zero.
pub fn pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let d = m.nrows().max(m.ncols());
    let svd = m.clone().svd(true, true);
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = d as f64 * sigma_max * f64::EPSILON;
    let u = svd.u.as_ref().expect("svd with u");
    let v_t = svd.v_t.as_ref().expect("svd with v_t");
    let mut inv_sigma = DMatrix::zeros(v_t.nrows(), u.ncols());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > tol {
            inv_sigma[(i, i)] = 1.0 / s;
        }
    }
    v_t.transpose() * inv_sigma * u.transpose()
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// JSON wire format
// ---------------------------------------------------------------------------

/// Wire shape of a noise family; field names are part of the file format.
#[derive(Serialize, Deserialize)]
#[serde(tag = "type")]
enum NoiseFamilyRepr {
    #[serde(rename = "GaussianIID")]
    Gaussian { d: usize, sigma: f64 },
    #[serde(rename = "GammaDifferenceIID")]
    GammaDifference { d: usize, shape: f64, scale: f64 },
    #[serde(rename = "LinearMap")]
    LinearMap {
        c: Vec<Vec<f64>>,
        base: Box<NoiseFamilyRepr>,
    },
}

impl NoiseFamilyRepr {
    fn build(&self) -> Result<NoiseFamily> {
        match self {
            NoiseFamilyRepr::Gaussian { d, sigma } => NoiseFamily::gaussian_iid(*d, *sigma),
            NoiseFamilyRepr::GammaDifference { d, shape, scale } => {
                NoiseFamily::gamma_difference_iid(*d, *shape, *scale)
            }
            NoiseFamilyRepr::LinearMap { c, base } => {
                let mix = matrix_from_rows(c)?;
                NoiseFamily::linear_map(mix, base.build()?)
            }
        }
    }

    fn from_family(f: &NoiseFamily) -> Self {
        match &f.kind {
            NoiseKind::GaussianIid { dim, sigma } => NoiseFamilyRepr::Gaussian {
                d: *dim,
                sigma: *sigma,
            },
            NoiseKind::GammaDifferenceIid {
                dim, shape, scale, ..
            } => NoiseFamilyRepr::GammaDifference {
                d: *dim,
                shape: *shape,
                scale: *scale,
            },
            NoiseKind::LinearMap { mix, base, .. } => NoiseFamilyRepr::LinearMap {
                c: matrix_to_rows(mix),
                base: Box::new(NoiseFamilyRepr::from_family(base)),
            },
        }
    }
}

#[derive(Serialize, Deserialize)]
struct StateSpaceSpecRepr {
    d: usize,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    eps: NoiseFamilyRepr,
    eta: NoiseFamilyRepr,
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::InvalidParameter("empty matrix".into()));
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidParameter(
            "matrix rows must be non-empty and of equal length".into(),
        ));
    }
    let flat: Vec<f64> = rows.iter().flatten().cloned().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

impl Serialize for NoiseFamily {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        NoiseFamilyRepr::from_family(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for NoiseFamily {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = NoiseFamilyRepr::deserialize(deserializer)?;
        repr.build().map_err(serde::de::Error::custom)
    }
}

impl Serialize for StateSpaceSpec {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        StateSpaceSpecRepr {
            d: self.dim(),
            a: matrix_to_rows(&self.a),
            b: matrix_to_rows(&self.b),
            eps: NoiseFamilyRepr::from_family(&self.eps),
            eta: NoiseFamilyRepr::from_family(&self.eta),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for StateSpaceSpec {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = StateSpaceSpecRepr::deserialize(deserializer)?;
        let build = || -> Result<StateSpaceSpec> {
            let a = matrix_from_rows(&repr.a)?;
            let b = matrix_from_rows(&repr.b)?;
            if a.nrows() != repr.d {
                return Err(Error::InvalidParameter(format!(
                    "declared d = {} does not match A ({}x{})",
                    repr.d,
                    a.nrows(),
                    a.ncols()
                )));
            }
            StateSpaceSpec::new(a, b, repr.eps.build()?, repr.eta.build()?)
        };
        build().map_err(serde::de::Error::custom)
    }
}
