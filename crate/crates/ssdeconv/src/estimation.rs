//! Deconvolution estimators: the lag-moment transition-matrix estimator and
//! the Fourier-inversion density estimators for the state and state-noise
//! laws, evaluated through seeded Monte Carlo frequency nodes.
//!
//! A fit precomputes one complex weight per node (the data-dependent
//! empirical Fourier sum divided by the measurement-noise characteristic
//! function); evaluation at a point is then a single weighted exponential
//! sum of cost O(node count).

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::{FourierNodes, KernelSpec};
use crate::model::{pseudo_inverse, NoiseFamily, ObservationSeries};

/// Hard floor on the characteristic-function magnitude; below this the fit
/// reports a configuration error instead of regularizing.
const CHAR_FN_FLOOR: f64 = 1e-12;

/// Smallest singular value of the estimated transition matrix accepted by
/// the noise-density estimator.
const TRANSITION_SV_FLOOR: f64 = 1e-8;

/// Which latent density a [`DensityEstimate`] targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensityTarget {
    /// The stationary state density.
    State,
    /// The state-noise density.
    StateNoise,
}

/// Anything that can be evaluated as a nonnegative density at a point.
///
/// Implemented by the exact estimator, its gridded acceleration, true noise
/// families, and ad-hoc closures (for oracle modes in tests and benchmarks).
pub trait PointDensity: Sync {
    fn dim(&self) -> usize;
    fn eval_at(&self, x: &[f64]) -> f64;
}

/// A density given by an explicit function (closed-form truths, oracles).
pub struct FnDensity<F: Fn(&[f64]) -> f64 + Sync> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> f64 + Sync> FnDensity<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64]) -> f64 + Sync> PointDensity for FnDensity<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval_at(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
}

/// A noise family's exact density as a [`PointDensity`].
///
/// Panics if the family's density is unbounded at an evaluated point, so
/// only use it with families that are bounded (every benchmark state-noise
/// family is).
pub struct TruthDensity<'a>(pub &'a NoiseFamily);

impl PointDensity for TruthDensity<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn eval_at(&self, x: &[f64]) -> f64 {
        self.0.density(x).expect("truth density must be bounded")
    }
}

/// Fitted deconvolution density: cached per-node complex weights plus the
/// amplitude factor (a / (h pi))^d. Evaluation clips the real part at zero,
/// so values are nonnegative everywhere.
#[derive(Debug, Clone)]
pub struct DensityEstimate {
    target: DensityTarget,
    nodes: FourierNodes,
    weights: Vec<Complex64>,
    amplitude: f64,
}

impl DensityEstimate {
    pub fn target(&self) -> DensityTarget {
        self.target
    }

    pub fn nodes(&self) -> &FourierNodes {
        &self.nodes
    }

    pub fn weights(&self) -> &[Complex64] {
        &self.weights
    }

    /// Amplitude factor (a / (h pi))^d in front of the node average.
    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    /// Upper bound on every evaluation: amplitude times the mean weight
    /// magnitude.
    pub fn amplitude_bound(&self) -> f64 {
        let mean_abs: f64 =
            self.weights.iter().map(|w| w.norm()).sum::<f64>() / self.weights.len() as f64;
        self.amplitude * mean_abs
    }

    /// The complex node average before taking the real part and clipping.
    pub fn eval_unclipped(&self, x: &[f64]) -> Complex64 {
        debug_assert_eq!(x.len(), self.nodes.dim());
        let mut re = 0.0;
        let mut im = 0.0;
        for (node, w) in self.nodes.iter().zip(&self.weights) {
            let mut dot = 0.0;
            for (a, b) in node.iter().zip(x) {
                dot += a * b;
            }
            let (s, c) = dot.sin_cos();
            // w * exp(-i dot)
            re += w.re * c + w.im * s;
            im += w.im * c - w.re * s;
        }
        let scale = self.amplitude / self.nodes.count() as f64;
        Complex64::new(re * scale, im * scale)
    }

    /// Density value at `x`: max(Re(.), 0) of the node average.
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.eval_unclipped(x).re.max(0.0)
    }

    /// Tabulate onto a regular grid for cheap repeated evaluation.
    ///
    /// The estimate is band-limited (its Fourier content lives inside the
    /// node cube), so a grid step small relative to h/a reproduces exact
    /// evaluation to well below Monte Carlo noise; see
    /// [`tabulation_step`]. Supported in one and two dimensions.
    pub fn tabulate(&self, lo: &[f64], hi: &[f64], step: f64) -> Result<TabulatedDensity> {
        match self.nodes.dim() {
            1 => Ok(self.tabulate_1d(lo[0], hi[0], step)),
            2 => Ok(self.tabulate_2d([lo[0], lo[1]], [hi[0], hi[1]], step)),
            d => Err(Error::UnsupportedDimension {
                dim: d,
                context: "density tabulation supports d = 1 and d = 2",
            }),
        }
    }

    fn tabulate_1d(&self, lo: f64, hi: f64, step: f64) -> TabulatedDensity {
        let count = ((hi - lo) / step).ceil() as usize + 2;
        let scale = self.amplitude / self.nodes.count() as f64;
        // Per grid segment, advance e^{-i zeta x} by complex recurrence:
        // one sin_cos per node per segment instead of per point.
        const SEGMENT: usize = 2048;
        let n_seg = count.div_ceil(SEGMENT);
        let values: Vec<f64> = (0..n_seg)
            .into_par_iter()
            .flat_map_iter(|seg| {
                let start = seg * SEGMENT;
                let len = SEGMENT.min(count - start);
                let mut acc = vec![0.0f64; len];
                for (node, w) in self.nodes.iter().zip(&self.weights) {
                    let z = node[0];
                    let x0 = lo + start as f64 * step;
                    let (s0, c0) = (-z * x0).sin_cos();
                    let (sd, cd) = (-z * step).sin_cos();
                    let mut pr = c0;
                    let mut pi = s0;
                    for a in acc.iter_mut() {
                        *a += w.re * pr - w.im * pi;
                        let nr = pr * cd - pi * sd;
                        pi = pr * sd + pi * cd;
                        pr = nr;
                    }
                }
                acc.into_iter().map(move |v| (v * scale).max(0.0))
            })
            .collect();
        TabulatedDensity {
            dim: 1,
            lo: [lo, 0.0],
            step: [step, step],
            shape: [count, 1],
            values,
        }
    }

    fn tabulate_2d(&self, lo: [f64; 2], hi: [f64; 2], step: f64) -> TabulatedDensity {
        let nx = ((hi[0] - lo[0]) / step).ceil() as usize + 2;
        let ny = ((hi[1] - lo[1]) / step).ceil() as usize + 2;
        let scale = self.amplitude / self.nodes.count() as f64;
        let values: Vec<f64> = (0..ny)
            .into_par_iter()
            .flat_map_iter(|iy| {
                let y = lo[1] + iy as f64 * step;
                let mut acc = vec![0.0f64; nx];
                for (node, w) in self.nodes.iter().zip(&self.weights) {
                    let (sy, cy) = (-node[1] * y).sin_cos();
                    // w * e^{-i z2 y}
                    let wr = w.re * cy - w.im * sy;
                    let wi = w.re * sy + w.im * cy;
                    let (s0, c0) = (-node[0] * lo[0]).sin_cos();
                    let (sd, cd) = (-node[0] * step).sin_cos();
                    let mut pr = c0;
                    let mut pi = s0;
                    for a in acc.iter_mut() {
                        *a += wr * pr - wi * pi;
                        let nr = pr * cd - pi * sd;
                        pi = pr * sd + pi * cd;
                        pr = nr;
                    }
                }
                acc.into_iter().map(move |v| (v * scale).max(0.0))
            })
            .collect();
        TabulatedDensity {
            dim: 2,
            lo,
            step: [step, step],
            shape: [nx, ny],
            values,
        }
    }
}

impl PointDensity for DensityEstimate {
    fn dim(&self) -> usize {
        self.nodes.dim()
    }
    fn eval_at(&self, x: &[f64]) -> f64 {
        self.eval(x)
    }
}

/// Grid step that keeps linear-interpolation error of a band-limited
/// estimate below ~1e-4 of its scale; `half_width` is the node cube
/// half-width a/h.
pub fn tabulation_step(half_width: f64) -> f64 {
    0.03 / half_width
}

/// Density values on a regular grid with multilinear interpolation;
/// zero outside the covered box.
#[derive(Debug, Clone)]
pub struct TabulatedDensity {
    dim: usize,
    lo: [f64; 2],
    step: [f64; 2],
    shape: [usize; 2],
    values: Vec<f64>,
}

impl PointDensity for TabulatedDensity {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval_at(&self, x: &[f64]) -> f64 {
        match self.dim {
            1 => {
                let pos = (x[0] - self.lo[0]) / self.step[0];
                if pos < 0.0 || pos >= (self.shape[0] - 1) as f64 {
                    return 0.0;
                }
                let i = pos as usize;
                let f = pos - i as f64;
                self.values[i] * (1.0 - f) + self.values[i + 1] * f
            }
            2 => {
                let px = (x[0] - self.lo[0]) / self.step[0];
                let py = (x[1] - self.lo[1]) / self.step[1];
                if px < 0.0
                    || py < 0.0
                    || px >= (self.shape[0] - 1) as f64
                    || py >= (self.shape[1] - 1) as f64
                {
                    return 0.0;
                }
                let ix = px as usize;
                let iy = py as usize;
                let fx = px - ix as f64;
                let fy = py - iy as f64;
                let nx = self.shape[0];
                let v00 = self.values[iy * nx + ix];
                let v01 = self.values[iy * nx + ix + 1];
                let v10 = self.values[(iy + 1) * nx + ix];
                let v11 = self.values[(iy + 1) * nx + ix + 1];
                v00 * (1.0 - fx) * (1.0 - fy)
                    + v01 * fx * (1.0 - fy)
                    + v10 * (1.0 - fx) * fy
                    + v11 * fx * fy
            }
            _ => unreachable!("tabulation is built only for d <= 2"),
        }
    }
}

impl TabulatedDensity {
    /// Build directly from values on a one-dimensional grid.
    pub fn from_values_1d(lo: f64, step: f64, values: Vec<f64>) -> Self {
        let n = values.len();
        TabulatedDensity {
            dim: 1,
            lo: [lo, 0.0],
            step: [step, step],
            shape: [n, 1],
            values,
        }
    }
}

/// Transition-matrix estimator from lag-2 observation moments:
/// (sum_{k=3}^n Z_k Z_{k-2}')(sum_{k=3}^n Z_{k-1} Z_{k-2}')^+ with
/// Z_k = B^{-1} Y_k, sums unaveraged, pseudo-inverse on the right factor.
pub fn estimate_transition(series: &ObservationSeries, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = series.dim();
    if b.nrows() != d || b.ncols() != d {
        return Err(Error::InvalidParameter(format!(
            "B must be {d}x{d} to match the series"
        )));
    }
    let b_inv = b
        .clone()
        .try_inverse()
        .ok_or(Error::SingularMatrix("measurement transition matrix B"))?;
    let n = series.len();
    let z: Vec<nalgebra::DVector<f64>> =
        (0..n).map(|i| &b_inv * series.observation(i)).collect();
    let mut lag2 = DMatrix::zeros(d, d);
    let mut lag1 = DMatrix::zeros(d, d);
    for k in 2..n {
        lag2 += &z[k] * z[k - 2].transpose();
        lag1 += &z[k - 1] * z[k - 2].transpose();
    }
    Ok(lag2 * pseudo_inverse(&lag1))
}

/// Fit the state density from observations, the measurement matrix, and the
/// measurement-noise law.
///
/// Per node zeta_k the cached weight is
/// FK_h(zeta_k) / phi_eta(B^{-T} zeta_k) * (1/n) sum_j exp(i zeta_k' B^{-1} Y_j).
pub fn fit_state_density(
    series: &ObservationSeries,
    b: &DMatrix<f64>,
    eta: &NoiseFamily,
    kernel: &KernelSpec,
    nodes: &FourierNodes,
) -> Result<DensityEstimate> {
    let d = series.dim();
    check_fit_inputs(d, b, eta, kernel, nodes)?;
    let b_inv = b
        .clone()
        .try_inverse()
        .ok_or(Error::SingularMatrix("measurement transition matrix B"))?;
    let b_inv_t = b_inv.transpose();
    let n = series.len();
    let mut points = vec![0.0f64; n * d];
    for j in 0..n {
        let zj = &b_inv * series.observation(j);
        points[j * d..(j + 1) * d].copy_from_slice(zj.as_slice());
    }
    let weights = compute_weights(nodes, kernel, &points, |node| {
        let arg = &b_inv_t * nalgebra::DVector::from_column_slice(node);
        let phi = eta.char_fn(arg.as_slice());
        vec![phi]
    })?;
    Ok(DensityEstimate {
        target: DensityTarget::State,
        nodes: nodes.clone(),
        weights,
        amplitude: amplitude_factor(nodes),
    })
}

/// Fit the state-noise density; needs the estimated transition matrix,
/// which must be safely nonsingular.
///
/// Uses the paired-observation sum over B^{-1}Y_{j+1} - A_hat B^{-1}Y_j and
/// the double characteristic-function denominator
/// phi_eta(B^{-T} zeta) * phi_eta(-B^{-T} A_hat' zeta).
pub fn fit_noise_density(
    series: &ObservationSeries,
    b: &DMatrix<f64>,
    a_hat: &DMatrix<f64>,
    eta: &NoiseFamily,
    kernel: &KernelSpec,
    nodes: &FourierNodes,
) -> Result<DensityEstimate> {
    let d = series.dim();
    check_fit_inputs(d, b, eta, kernel, nodes)?;
    if a_hat.nrows() != d || a_hat.ncols() != d {
        return Err(Error::InvalidParameter(format!(
            "estimated transition matrix must be {d}x{d}"
        )));
    }
    let smallest_sv = a_hat
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if smallest_sv < TRANSITION_SV_FLOOR {
        return Err(Error::NearSingularTransition { smallest_sv });
    }
    let b_inv = b
        .clone()
        .try_inverse()
        .ok_or(Error::SingularMatrix("measurement transition matrix B"))?;
    let b_inv_t = b_inv.transpose();
    let a_hat_t = a_hat.transpose();
    let n = series.len();
    let z: Vec<nalgebra::DVector<f64>> =
        (0..n).map(|i| &b_inv * series.observation(i)).collect();
    let mut points = vec![0.0f64; (n - 1) * d];
    for j in 0..n - 1 {
        let dj = &z[j + 1] - a_hat * &z[j];
        points[j * d..(j + 1) * d].copy_from_slice(dj.as_slice());
    }
    let weights = compute_weights(nodes, kernel, &points, |node| {
        let zeta = nalgebra::DVector::from_column_slice(node);
        let arg1 = &b_inv_t * &zeta;
        let arg2 = -(&b_inv_t * (&a_hat_t * &zeta));
        vec![eta.char_fn(arg1.as_slice()), eta.char_fn(arg2.as_slice())]
    })?;
    Ok(DensityEstimate {
        target: DensityTarget::StateNoise,
        nodes: nodes.clone(),
        weights,
        amplitude: amplitude_factor(nodes),
    })
}

fn check_fit_inputs(
    d: usize,
    b: &DMatrix<f64>,
    eta: &NoiseFamily,
    kernel: &KernelSpec,
    nodes: &FourierNodes,
) -> Result<()> {
    if b.nrows() != d || b.ncols() != d {
        return Err(Error::InvalidParameter(format!("B must be {d}x{d}")));
    }
    if eta.dim() != d {
        return Err(Error::InvalidParameter(
            "measurement-noise dimension must match the series".into(),
        ));
    }
    if nodes.dim() != d {
        return Err(Error::InvalidParameter(
            "node dimension must match the series".into(),
        ));
    }
    if (nodes.support_radius() - kernel.support_radius()).abs() > 1e-12 {
        return Err(Error::InvalidParameter(
            "node cube was built for a different kernel support radius".into(),
        ));
    }
    Ok(())
}

fn amplitude_factor(nodes: &FourierNodes) -> f64 {
    (nodes.support_radius() / (nodes.bandwidth() * std::f64::consts::PI))
        .powi(nodes.dim() as i32)
}

/// Shared weight computation: per node, the kernel transform divided by the
/// product of characteristic-function denominators, times the empirical
/// Fourier sum of `points`.
fn compute_weights<F>(
    nodes: &FourierNodes,
    kernel: &KernelSpec,
    points: &[f64],
    denominators: F,
) -> Result<Vec<Complex64>>
where
    F: Fn(&[f64]) -> Vec<Complex64> + Sync,
{
    let d = nodes.dim();
    let h = nodes.bandwidth();
    let m = points.len() / d;
    let indexed: Vec<(usize, &[f64])> = nodes.iter().enumerate().collect();
    indexed
        .into_par_iter()
        .map(|(k, node)| {
            let mut den = Complex64::new(1.0, 0.0);
            for phi in denominators(node) {
                if phi.norm() < CHAR_FN_FLOOR {
                    return Err(Error::VanishingCharFn {
                        node: k,
                        magnitude: phi.norm(),
                    });
                }
                den *= phi;
            }
            let fk = kernel.transform_product(h, node);
            if fk == 0.0 {
                return Ok(Complex64::new(0.0, 0.0));
            }
            let mut sum_re = 0.0;
            let mut sum_im = 0.0;
            for point in points.chunks_exact(d) {
                let mut dot = 0.0;
                for (a, b) in node.iter().zip(point) {
                    dot += a * b;
                }
                let (s, c) = dot.sin_cos();
                sum_re += c;
                sum_im += s;
            }
            let emp = Complex64::new(sum_re / m as f64, sum_im / m as f64);
            Ok(emp * fk / den)
        })
        .collect()
}
