//! Parametric baseline: one-step Kalman prediction with chi-square
//! ellipsoid intervals for the current state, next state, and next
//! observation.
//!
//! The ellipsoids have exact coverage only under Gaussian noises; with the
//! noise covariances of any other family they are the usual second-moment
//! approximation, which is how the baseline is scored on the non-Gaussian
//! benchmark models.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{ObservationSeries, StateSpaceSpec};
use crate::prediction::{chi2_quantile, RootKind};

/// Initialization of the one-step prediction error covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceInit {
    /// The series starts from a known zero state: Omega_1 = 0.
    Zero,
    /// The series is stationary: Omega_1 = stationary state covariance.
    Stationary,
}

/// Ellipsoidal confidence region
/// (x - center)' covariance^{-1} (x - center) <= threshold.
#[derive(Debug, Clone)]
pub struct EllipsoidReport {
    pub kind: RootKind,
    pub center: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub threshold: f64,
    pub level: f64,
}

impl EllipsoidReport {
    /// Whether `point` lies inside the ellipsoid.
    pub fn contains(&self, point: &DVector<f64>) -> Result<bool> {
        let inv = self
            .covariance
            .clone()
            .try_inverse()
            .ok_or(Error::SingularErrorCovariance { step: 0 })?;
        let r = point - &self.center;
        Ok((&inv * &r).dot(&r) <= self.threshold)
    }

    /// Principal axis lengths 2 sqrt(threshold * eigenvalue); in one
    /// dimension this is the interval length.
    pub fn axis_lengths(&self) -> Vec<f64> {
        self.covariance
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .map(|l| 2.0 * (self.threshold * l.max(0.0)).sqrt())
            .collect()
    }

    /// Mean of the axis lengths (the interval length when d = 1).
    pub fn mean_length(&self) -> f64 {
        let lengths = self.axis_lengths();
        lengths.iter().sum::<f64>() / lengths.len() as f64
    }
}

/// One-step Kalman predictor state after consuming a series.
#[derive(Debug, Clone)]
pub struct KalmanPrediction {
    /// Predictor of X_n given Y_1..Y_{n-1}.
    pub predicted_state: DVector<f64>,
    /// Error covariance Omega_n of the predictor.
    pub error_covariance: DMatrix<f64>,
}

/// Run the one-step predictor recursion
/// Xhat_{k+1} = A Xhat_k + A Omega_k B'(B Omega_k B' + Pi)^{-1}(Y_k - B Xhat_k),
/// Omega_{k+1} = A Omega_k A' + Sigma - A Omega_k B'(B Omega_k B' + Pi)^{-1} B Omega_k A'
/// from Xhat_1 = 0 through the whole series.
pub fn kalman_predict(
    spec: &StateSpaceSpec,
    series: &ObservationSeries,
    init: CovarianceInit,
) -> Result<KalmanPrediction> {
    let d = spec.dim();
    if series.dim() != d {
        return Err(Error::InvalidParameter(
            "series dimension must match the model".into(),
        ));
    }
    let a = spec.transition();
    let b = spec.measurement();
    let sigma = spec.state_noise().covariance();
    let pi = spec.measurement_noise().covariance();
    let mut xhat = DVector::zeros(d);
    let mut omega = match init {
        CovarianceInit::Zero => DMatrix::zeros(d, d),
        CovarianceInit::Stationary => spec.stationary_state_covariance(),
    };
    for k in 0..series.len() - 1 {
        let innovation_cov = b * &omega * b.transpose() + &pi;
        let innovation_inv = innovation_cov
            .try_inverse()
            .ok_or(Error::SingularErrorCovariance { step: k + 1 })?;
        let gain = a * &omega * b.transpose() * innovation_inv;
        let innovation = series.observation(k) - b * &xhat;
        xhat = a * &xhat + &gain * innovation;
        omega = a * &omega * a.transpose() + &sigma - &gain * b * &omega * a.transpose();
    }
    Ok(KalmanPrediction {
        predicted_state: xhat,
        error_covariance: omega,
    })
}

/// Chi-square ellipsoid intervals around the one-step Kalman predictor:
/// current state (center Xhat_n, covariance Omega_n), next state
/// (A Xhat_n, A Omega_n A' + Sigma), and next observation
/// (B A Xhat_n, Pi + B Sigma B' + B A Omega_n A' B').
///
/// Errors if the error covariance Omega_n is singular.
pub fn kalman_intervals(
    spec: &StateSpaceSpec,
    series: &ObservationSeries,
    level: f64,
    init: CovarianceInit,
) -> Result<[EllipsoidReport; 3]> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "level must lie in (0, 1), got {level}"
        )));
    }
    let n = series.len();
    let prediction = kalman_predict(spec, series, init)?;
    let omega = prediction.error_covariance;
    if omega.clone().try_inverse().is_none() {
        return Err(Error::SingularErrorCovariance { step: n });
    }
    let a = spec.transition();
    let b = spec.measurement();
    let sigma = spec.state_noise().covariance();
    let pi = spec.measurement_noise().covariance();
    let threshold = chi2_quantile(spec.dim(), level)?;

    let state_center = a * &prediction.predicted_state;
    let state_cov = a * &omega * a.transpose() + &sigma;
    let obs_center = b * &state_center;
    let obs_cov = &pi + b * &sigma * b.transpose() + b * a * &omega * a.transpose() * b.transpose();

    Ok([
        EllipsoidReport {
            kind: RootKind::Filter,
            center: prediction.predicted_state,
            covariance: omega,
            threshold,
            level,
        },
        EllipsoidReport {
            kind: RootKind::StatePredict,
            center: state_center,
            covariance: state_cov,
            threshold,
            level,
        },
        EllipsoidReport {
            kind: RootKind::ObsPredict,
            center: obs_center,
            covariance: obs_cov,
            threshold,
            level,
        },
    ])
}
