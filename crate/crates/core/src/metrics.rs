//! Accuracy of a model against ground-truth pairs, and the leave-one-out noise floor of
//! the ground truth itself.

use nalgebra::Matrix3;
use thiserror::Error;

use crate::geometry::{epipolar_error_f, reprojection_error_h, Correspondence, ErrorMetric, ModelKind};
use crate::solvers::{min_lsq_points, solve_lsq};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no ground-truth pairs")]
    Empty,
    #[error("need more than {needed} ground-truth pairs, got {got}")]
    TooFewPairs { needed: usize, got: usize },
    #[error("model kind {0:?} is not supported")]
    UnsupportedKind(ModelKind),
}

/// Median, mean and maximum of a set of errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorSummary {
    pub med: f64,
    pub avg: f64,
    pub max: f64,
}

impl ErrorSummary {
    pub fn from_errors(errors: &[f64]) -> Option<Self> {
        if errors.is_empty() {
            return None;
        }
        let mut v = errors.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let med = if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 };
        let avg = v.iter().sum::<f64>() / n as f64;
        Some(Self { med, avg, max: v[n - 1] })
    }
}

/// Symmetric transfer error for H, symmetric epipolar distance for F. Failures count as
/// infinite error.
pub fn pair_error(kind: ModelKind, m: &Matrix3<f64>, c: &Correspondence) -> f64 {
    let r = match kind {
        ModelKind::Homography => reprojection_error_h(m, c),
        _ => epipolar_error_f(m, c, ErrorMetric::SymmetricEpipolar),
    };
    r.unwrap_or(f64::INFINITY)
}

pub fn evaluate_error(kind: ModelKind, m: &Matrix3<f64>, gt_pairs: &[Correspondence]) -> Result<ErrorSummary, MetricsError> {
    check_kind(kind)?;
    let errors: Vec<f64> = gt_pairs.iter().map(|c| pair_error(kind, m, c)).collect();
    ErrorSummary::from_errors(&errors).ok_or(MetricsError::Empty)
}

/// Leave-one-out: fit on all pairs but one by least squares and measure the held-out pair.
pub fn cross_validate(kind: ModelKind, gt_pairs: &[Correspondence]) -> Result<ErrorSummary, MetricsError> {
    check_kind(kind)?;
    let needed = min_lsq_points(kind) + 1;
    if gt_pairs.len() <= needed {
        return Err(MetricsError::TooFewPairs { needed, got: gt_pairs.len() });
    }
    let mut weights = vec![1.0; gt_pairs.len()];
    let mut errors = Vec::with_capacity(gt_pairs.len());
    for (i, c) in gt_pairs.iter().enumerate() {
        weights[i] = 0.0;
        errors.push(solve_lsq(gt_pairs, &weights, kind).map_or(f64::INFINITY, |m| pair_error(kind, &m, c)));
        weights[i] = 1.0;
    }
    ErrorSummary::from_errors(&errors).ok_or(MetricsError::Empty)
}

fn check_kind(kind: ModelKind) -> Result<(), MetricsError> {
    match kind {
        ModelKind::Homography | ModelKind::Fundamental => Ok(()),
        k => Err(MetricsError::UnsupportedKind(k)),
    }
}
