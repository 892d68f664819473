//! Flat-top smoothing kernel, bandwidth policies, and the random Fourier
//! nodes used by the Monte Carlo inversion of the deconvolution estimators.

use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::model::SmoothnessRegime;

/// Flat-top kernel: the Fourier transform equals one on [-1, 1], falls
/// linearly to zero on [1, a], and vanishes beyond the support radius `a`.
///
/// Only the closed-form profile with a = 2 ships:
/// G(x) = (cos x - cos 2x) / (pi x^2).
#[derive(Debug, Clone, Copy)]
pub struct KernelSpec {
    support_radius: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec { support_radius: 2.0 }
    }
}

impl KernelSpec {
    /// Support radius `a` of the Fourier transform.
    pub fn support_radius(&self) -> f64 {
        self.support_radius
    }

    /// Spatial profile G(x).
    ///
    /// The removable singularity at zero is handled by a series branch:
    /// G(x) = (1/pi)(3/2 - 5x^2/8 + 7x^4/80 - ...) for |x| < 1e-4.
    pub fn spatial(&self, x: f64) -> f64 {
        let pi = std::f64::consts::PI;
        if x.abs() < 1e-4 {
            let x2 = x * x;
            (1.5 - 0.625 * x2 + 0.0875 * x2 * x2) / pi
        } else {
            (x.cos() - (2.0 * x).cos()) / (pi * x * x)
        }
    }

    /// Fourier-domain profile: 1 on [-1, 1], the trapezoid edge 2 - |t| on
    /// [1, 2], zero outside.
    pub fn transform(&self, t: f64) -> f64 {
        let t = t.abs();
        if t <= 1.0 {
            1.0
        } else if t < 2.0 {
            2.0 - t
        } else {
            0.0
        }
    }

    /// Product kernel transform at a d-dimensional frequency:
    /// prod_i FG(h t_i).
    pub fn transform_product(&self, bandwidth: f64, t: &[f64]) -> f64 {
        let mut out = 1.0;
        for &ti in t {
            out *= self.transform(bandwidth * ti);
            if out == 0.0 {
                return 0.0;
            }
        }
        out
    }
}

/// How the bandwidth is chosen: from the declared smoothness regime of the
/// measurement noise, or pinned explicitly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BandwidthPolicy {
    Regime(SmoothnessRegime),
    Explicit(f64),
}

/// Bandwidth for a sample of size `n`.
///
/// Ordinary smooth noise uses n^{-1/8}; super smooth uses (ln n)^{-0.1};
/// an explicit bandwidth passes through unchanged.
pub fn default_bandwidth(n: usize, policy: &BandwidthPolicy) -> Result<f64> {
    if n < 3 {
        return Err(Error::SeriesTooShort { n, min: 3 });
    }
    if let BandwidthPolicy::Regime(regime) = policy {
        regime.validate()?;
    }
    let h = match policy {
        BandwidthPolicy::Regime(SmoothnessRegime::Ordinary { .. }) => (n as f64).powf(-0.125),
        BandwidthPolicy::Regime(SmoothnessRegime::Super { .. }) => (n as f64).ln().powf(-0.1),
        BandwidthPolicy::Explicit(h) => *h,
    };
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidParameter(format!("bandwidth must be positive, got {h}")));
    }
    Ok(h)
}

/// Random frequency nodes drawn uniformly on the cube [-a/h, a/h]^d, fixed
/// by their generating seed. One shared node set per fit keeps every
/// density estimate a deterministic function.
#[derive(Debug, Clone)]
pub struct FourierNodes {
    bandwidth: f64,
    support_radius: f64,
    count: usize,
    dim: usize,
    seed: u64,
    data: Vec<f64>, // count x dim, row-major
}

/// Draw `count` nodes in dimension `dim` for bandwidth `h` and kernel
/// support radius `a`, deterministically from `seed`.
pub fn build_fourier_nodes(
    bandwidth: f64,
    support_radius: f64,
    count: usize,
    dim: usize,
    seed: u64,
) -> Result<FourierNodes> {
    if count == 0 {
        return Err(Error::InvalidParameter("node count must be >= 1".into()));
    }
    if dim == 0 {
        return Err(Error::InvalidParameter("node dimension must be >= 1".into()));
    }
    if !(bandwidth > 0.0) || !(support_radius > 1.0) {
        return Err(Error::InvalidParameter(
            "need bandwidth > 0 and support radius > 1".into(),
        ));
    }
    let half = support_radius / bandwidth;
    let dist = Uniform::new_inclusive(-half, half)
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut rng = crate::rng::stream(seed, 0);
    let data: Vec<f64> = (0..count * dim).map(|_| dist.sample(&mut rng)).collect();
    Ok(FourierNodes {
        bandwidth,
        support_radius,
        count,
        dim,
        seed,
        data,
    })
}

impl FourierNodes {
    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn support_radius(&self) -> f64 {
        self.support_radius
    }

    /// Half-width a/h of the node cube.
    pub fn half_width(&self) -> f64 {
        self.support_radius / self.bandwidth
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Node `k` as a slice of length `dim`.
    pub fn node(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// The node set augmented with its negations, for antithetic averaging.
    pub fn augment_antithetic(&self) -> FourierNodes {
        let mut data = self.data.clone();
        data.extend(self.data.iter().map(|v| -v));
        FourierNodes {
            bandwidth: self.bandwidth,
            support_radius: self.support_radius,
            count: 2 * self.count,
            dim: self.dim,
            seed: self.seed,
            data,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    #[test]
    fn spatial_profile_values() {
        let k = KernelSpec::default();
        // Taylor limit at the removable singularity: 3 / (2 pi).
        assert_relative_eq!(k.spatial(0.0), 0.477_464_829_275_686, epsilon = 1e-12);
        // Direct evaluation at pi: -2 / pi^3.
        assert_relative_eq!(
            k.spatial(std::f64::consts::PI),
            -0.064_503_068_866_398_99,
            epsilon = 1e-12
        );
        // Series and closed form agree across the branch cut.
        // Cancellation in the closed form near zero leaves ~1e-9 noise.
        assert_abs_diff_eq!(k.spatial(1.0001e-4), k.spatial(0.9999e-4), epsilon = 1e-7);
    }

    #[test]
    fn spatial_profile_integrates_to_one() {
        // FG(0) = 1 forces the integral of G to equal one.
        let k = KernelSpec::default();
        let (lo, hi, n) = (-200.0, 200.0, 160_001usize);
        let h = (hi - lo) / (n - 1) as f64;
        // Composite Simpson; n - 1 intervals, even.
        let mut sum = k.spatial(lo) + k.spatial(hi);
        for i in 1..n - 1 {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            sum += w * k.spatial(lo + i as f64 * h);
        }
        let integral = sum * h / 3.0;
        assert_abs_diff_eq!(integral, 1.0, epsilon = 1e-3);
    }

    #[test]
    fn transform_trapezoid() {
        let k = KernelSpec::default();
        assert_eq!(k.transform(0.5), 1.0);
        assert_eq!(k.transform(1.5), 0.5);
        assert_eq!(k.transform(3.0), 0.0);
        assert_eq!(k.transform(-1.5), 0.5);
        assert_eq!(k.transform_product(0.5, &[1.0, 3.0]), 0.5);
    }

    #[test]
    fn bandwidth_defaults() {
        let ord = BandwidthPolicy::Regime(SmoothnessRegime::ordinary());
        let sup = BandwidthPolicy::Regime(SmoothnessRegime::super_smooth());
        assert_relative_eq!(
            default_bandwidth(500, &ord).unwrap(),
            500.0_f64.powf(-0.125),
            epsilon = 1e-15
        );
        assert_relative_eq!(default_bandwidth(500, &ord).unwrap(), 0.459_863_30, epsilon = 1e-6);
        assert_relative_eq!(
            default_bandwidth(500, &sup).unwrap(),
            500.0_f64.ln().powf(-0.1),
            epsilon = 1e-15
        );
        assert_relative_eq!(default_bandwidth(500, &sup).unwrap(), 0.833_026_13, epsilon = 1e-6);
        assert_eq!(
            default_bandwidth(100, &BandwidthPolicy::Explicit(0.3)).unwrap(),
            0.3
        );
        assert!(default_bandwidth(2, &ord).is_err());
        assert!(default_bandwidth(100, &BandwidthPolicy::Explicit(-0.5)).is_err());
        let bad = BandwidthPolicy::Regime(SmoothnessRegime::Ordinary {
            beta: -1.0,
            b: 1.0,
            c: 1.0,
        });
        assert!(default_bandwidth(100, &bad).is_err());
    }

    #[test]
    fn nodes_stay_in_cube_and_replay() {
        let nodes = build_fourier_nodes(0.5, 2.0, 1_000, 2, 42).unwrap();
        let half = nodes.half_width();
        assert_relative_eq!(half, 4.0, epsilon = 1e-15);
        for node in nodes.iter() {
            assert!(node.iter().all(|v| v.abs() <= half));
        }
        let again = build_fourier_nodes(0.5, 2.0, 1_000, 2, 42).unwrap();
        assert_eq!(nodes.data, again.data);
        let other = build_fourier_nodes(0.5, 2.0, 1_000, 2, 43).unwrap();
        assert_ne!(nodes.data, other.data);
    }

    #[test]
    fn node_coordinates_have_near_zero_mean() {
        let count = 100_000;
        let nodes = build_fourier_nodes(0.8, 2.0, count, 1, 7).unwrap();
        let mean: f64 = nodes.iter().map(|n| n[0]).sum::<f64>() / count as f64;
        // Uniform on [-w, w] has sd w/sqrt(3).
        let bound = 4.0 * nodes.half_width() / (3.0 * count as f64).sqrt();
        assert!(mean.abs() < bound, "node mean {mean} exceeds {bound}");
    }

    #[test]
    fn antithetic_augmentation_mirrors_nodes() {
        let nodes = build_fourier_nodes(1.0, 2.0, 16, 2, 3).unwrap();
        let aug = nodes.augment_antithetic();
        assert_eq!(aug.count(), 32);
        for k in 0..16 {
            let pos = aug.node(k).to_vec();
            let neg = aug.node(k + 16);
            assert!(pos.iter().zip(neg).all(|(p, m)| *p == -*m));
        }
    }
}
