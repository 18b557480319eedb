//! Correspondences, models, residual metrics and point normalization.

use nalgebra::{Matrix3, Matrix3x4, Vector3};
use thiserror::Error;

/// Homogeneous coordinates with |w| below this are treated as points at infinity.
pub const W_EPS: f64 = 1e-15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("all points coincide in at least one image")]
    DegenerateInput,
    #[error("model matrix is singular")]
    SingularModel,
    #[error("point maps to infinity")]
    InfinitePoint,
    #[error("both epipolar lines are degenerate")]
    DegenerateLine,
    #[error("model matrix is zero")]
    ZeroModel,
    #[error("fundamental matrix is not rank 2 (det = {0:e})")]
    NotRankTwo(f64),
    #[error("expected {expected} matrix entries, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("calibration matrix is invalid")]
    InvalidCalibration,
}

/// A point pair `(x1, y1) <-> (x2, y2)` with an optional quality score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    /// Higher means more likely to be an inlier. Used by PROSAC ordering.
    pub quality: f64,
}

impl Correspondence {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2, quality: 0.0 }
    }

    pub fn with_quality(mut self, quality: f64) -> Self {
        self.quality = quality;
        self
    }

    /// Homogeneous point in image 1.
    #[inline]
    pub fn p1(&self) -> Vector3<f64> {
        Vector3::new(self.x1, self.y1, 1.0)
    }

    /// Homogeneous point in image 2.
    #[inline]
    pub fn p2(&self) -> Vector3<f64> {
        Vector3::new(self.x2, self.y2, 1.0)
    }

    pub fn is_finite(&self) -> bool {
        self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
            && self.quality.is_finite()
    }

    /// Applies `t1` to the first point and `t2` to the second one.
    pub fn transformed(&self, t1: &Matrix3<f64>, t2: &Matrix3<f64>) -> Result<Self, GeometryError> {
        let a = dehomogenize(&(t1 * self.p1()))?;
        let b = dehomogenize(&(t2 * self.p2()))?;
        Ok(Self { x1: a.0, y1: a.1, x2: b.0, y2: b.1, quality: self.quality })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Homography,
    Fundamental,
    Essential,
    Projection,
}

impl ModelKind {
    /// Minimal sample size of the solver used for this kind.
    pub fn sample_size(self) -> usize {
        match self {
            ModelKind::Homography => 4,
            ModelKind::Fundamental => 7,
            ModelKind::Essential => 5,
            ModelKind::Projection => 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Homography(Matrix3<f64>),
    Fundamental(Matrix3<f64>),
    Essential(Matrix3<f64>),
    Projection(Matrix3x4<f64>),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Homography(_) => ModelKind::Homography,
            Model::Fundamental(_) => ModelKind::Fundamental,
            Model::Essential(_) => ModelKind::Essential,
            Model::Projection(_) => ModelKind::Projection,
        }
    }

    /// The 3x3 matrix of an H, F or E model.
    pub fn matrix3(&self) -> Option<&Matrix3<f64>> {
        match self {
            Model::Homography(m) | Model::Fundamental(m) | Model::Essential(m) => Some(m),
            Model::Projection(_) => None,
        }
    }

    pub fn from_matrix3(kind: ModelKind, m: Matrix3<f64>) -> Self {
        match kind {
            ModelKind::Homography => Model::Homography(m),
            ModelKind::Fundamental => Model::Fundamental(m),
            ModelKind::Essential => Model::Essential(m),
            ModelKind::Projection => {
                Model::Projection(Matrix3x4::from_columns(&[m.column(0), m.column(1), m.column(2), Vector3::zeros().column(0)]))
            }
        }
    }

    /// Builds a model from row-major entries (9 for H/F/E, 12 for P) and validates it.
    pub fn from_row_major(kind: ModelKind, values: &[f64]) -> Result<Self, GeometryError> {
        let expected = if kind == ModelKind::Projection { 12 } else { 9 };
        if values.len() != expected {
            return Err(GeometryError::Dimension { expected, got: values.len() });
        }
        let model = match kind {
            ModelKind::Projection => Model::Projection(Matrix3x4::from_row_slice(values)),
            k => Model::from_matrix3(k, Matrix3::from_row_slice(values)),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        match self {
            Model::Projection(p) => p.transpose().iter().copied().collect(),
            m => m.matrix3().unwrap().transpose().iter().copied().collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        match self {
            Model::Projection(p) => p.norm(),
            m => m.matrix3().unwrap().norm(),
        }
    }

    /// Same model scaled to unit Frobenius norm.
    pub fn normalized(&self) -> Self {
        let s = self.frobenius_norm();
        match self {
            Model::Homography(m) => Model::Homography(m / s),
            Model::Fundamental(m) => Model::Fundamental(m / s),
            Model::Essential(m) => Model::Essential(m / s),
            Model::Projection(p) => Model::Projection(p / s),
        }
    }

    /// Checks the model is nonzero and, for F, of rank 2.
    pub fn validate(&self) -> Result<(), GeometryError> {
        let n = self.frobenius_norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(GeometryError::ZeroModel);
        }
        if let Model::Fundamental(f) = self {
            let det = (f / n).determinant();
            if det.abs() > 1e-7 {
                return Err(GeometryError::NotRankTwo(det));
            }
        }
        Ok(())
    }
}

/// Intrinsics of both cameras.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub k1: Matrix3<f64>,
    pub k2: Matrix3<f64>,
    /// False when the matrices were guessed rather than provided.
    pub known: bool,
}

impl Calibration {
    pub fn new(k1: Matrix3<f64>, k2: Matrix3<f64>, known: bool) -> Result<Self, GeometryError> {
        for k in [&k1, &k2] {
            let upper = k[(1, 0)] == 0.0 && k[(2, 0)] == 0.0 && k[(2, 1)] == 0.0;
            if !upper || k[(2, 2)] != 1.0 || !(k[(0, 0)] > 0.0) || !(k[(1, 1)] > 0.0) {
                return Err(GeometryError::InvalidCalibration);
            }
        }
        Ok(Self { k1, k2, known })
    }

    /// Both cameras share `k`.
    pub fn shared(k: Matrix3<f64>) -> Result<Self, GeometryError> {
        Self::new(k, k, true)
    }

    pub fn from_focal(f: f64, cx: f64, cy: f64) -> Self {
        let k = Matrix3::new(f, 0.0, cx, 0.0, f, cy, 0.0, 0.0, 1.0);
        Self { k1: k, k2: k, known: true }
    }
}

/// Similarity transforms moving each image's points to centroid 0 and mean distance sqrt(2).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizingTransform {
    pub t1: Matrix3<f64>,
    pub t2: Matrix3<f64>,
}

impl NormalizingTransform {
    pub fn identity() -> Self {
        Self { t1: Matrix3::identity(), t2: Matrix3::identity() }
    }

    /// Maps a normalized-coordinate H back to pixels.
    pub fn denormalize_h(&self, h: &Matrix3<f64>) -> Matrix3<f64> {
        self.t2.try_inverse().unwrap() * h * self.t1
    }

    /// Maps a normalized-coordinate F back to pixels.
    pub fn denormalize_f(&self, f: &Matrix3<f64>) -> Matrix3<f64> {
        self.t2.transpose() * f * self.t1
    }

    pub fn normalize_h(&self, h: &Matrix3<f64>) -> Matrix3<f64> {
        self.t2 * h * self.t1.try_inverse().unwrap()
    }

    pub fn normalize_f(&self, f: &Matrix3<f64>) -> Matrix3<f64> {
        self.t2.try_inverse().unwrap().transpose() * f * self.t1.try_inverse().unwrap()
    }
}

/// Hartley similarity for a point set, or `None` when all points coincide.
pub fn hartley_transform<I>(points: I) -> Option<Matrix3<f64>>
where
    I: IntoIterator<Item = (f64, f64)> + Clone,
{
    let (mut cx, mut cy, mut n) = (0.0, 0.0, 0usize);
    for (x, y) in points.clone() {
        cx += x;
        cy += y;
        n += 1;
    }
    if n == 0 {
        return None;
    }
    cx /= n as f64;
    cy /= n as f64;
    let mean: f64 = points.into_iter().map(|(x, y)| (x - cx).hypot(y - cy)).sum::<f64>() / n as f64;
    if !(mean > 1e-12 * (1.0 + cx.abs().max(cy.abs()))) {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean;
    Some(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

/// Hartley normalization of both images. The input is left untouched.
pub fn normalize_points(
    corrs: &[Correspondence],
) -> Result<(Vec<Correspondence>, NormalizingTransform), GeometryError> {
    let t1 = hartley_transform(corrs.iter().map(|c| (c.x1, c.y1))).ok_or(GeometryError::DegenerateInput)?;
    let t2 = hartley_transform(corrs.iter().map(|c| (c.x2, c.y2))).ok_or(GeometryError::DegenerateInput)?;
    let out = corrs.iter().map(|c| apply_similarity(c, &t1, &t2)).collect();
    Ok((out, NormalizingTransform { t1, t2 }))
}

#[inline]
pub(crate) fn apply_similarity(c: &Correspondence, t1: &Matrix3<f64>, t2: &Matrix3<f64>) -> Correspondence {
    Correspondence {
        x1: t1[(0, 0)] * c.x1 + t1[(0, 2)],
        y1: t1[(1, 1)] * c.y1 + t1[(1, 2)],
        x2: t2[(0, 0)] * c.x2 + t2[(0, 2)],
        y2: t2[(1, 1)] * c.y2 + t2[(1, 2)],
        quality: c.quality,
    }
}

/// Divides by the homogeneous coordinate.
#[inline]
pub fn dehomogenize(v: &Vector3<f64>) -> Result<(f64, f64), GeometryError> {
    if v[2].abs() < W_EPS {
        return Err(GeometryError::InfinitePoint);
    }
    Ok((v[0] / v[2], v[1] / v[2]))
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0)
}

/// Determinant against the product of column norms, which stays meaningful for pixel-unit
/// homographies whose translation column dwarfs the rest.
pub fn is_singular_h(h: &Matrix3<f64>) -> bool {
    let cols: f64 = h.column_iter().map(|c| c.norm()).product();
    !(h.determinant().abs() > 1e-12 * cols)
}

/// Symmetric transfer error: mean of the forward and backward transfer distances.
pub fn reprojection_error_h(h: &Matrix3<f64>, c: &Correspondence) -> Result<f64, GeometryError> {
    if is_singular_h(h) {
        return Err(GeometryError::SingularModel);
    }
    let h_inv = h.try_inverse().ok_or(GeometryError::SingularModel)?;
    transfer_error(h, &h_inv, c)
}

#[inline]
fn transfer_error(h: &Matrix3<f64>, h_inv: &Matrix3<f64>, c: &Correspondence) -> Result<f64, GeometryError> {
    let (fx, fy) = dehomogenize(&(h * c.p1()))?;
    let (bx, by) = dehomogenize(&(h_inv * c.p2()))?;
    Ok(((fx - c.x2).hypot(fy - c.y2) + (bx - c.x1).hypot(by - c.y1)) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorMetric {
    /// First-order geometric distance, in pixels.
    Sampson,
    /// Mean of the point-to-epipolar-line distances in both images.
    SymmetricEpipolar,
}

pub fn epipolar_error_f(f: &Matrix3<f64>, c: &Correspondence, metric: ErrorMetric) -> Result<f64, GeometryError> {
    let x = c.p1();
    let xp = c.p2();
    let fx = f * x;
    let ftxp = f.tr_mul(&xp);
    let e = xp.dot(&fx);
    let g2 = fx[0] * fx[0] + fx[1] * fx[1];
    let g1 = ftxp[0] * ftxp[0] + ftxp[1] * ftxp[1];
    if g1 == 0.0 && g2 == 0.0 {
        return Err(GeometryError::DegenerateLine);
    }
    Ok(match metric {
        ErrorMetric::Sampson => e.abs() / (g1 + g2).sqrt(),
        ErrorMetric::SymmetricEpipolar => {
            if g1 == 0.0 {
                e.abs() / g2.sqrt()
            } else if g2 == 0.0 {
                e.abs() / g1.sqrt()
            } else {
                (e.abs() / g1.sqrt() + e.abs() / g2.sqrt()) / 2.0
            }
        }
    })
}

/// Residual function bound to one model, with precomputed data for the hot loop.
/// Failures (points at infinity, degenerate lines) evaluate to infinity.
#[derive(Debug, Clone)]
pub enum Residual {
    Transfer { h: Matrix3<f64>, h_inv: Matrix3<f64> },
    Epipolar { f: Matrix3<f64>, metric: ErrorMetric },
}

impl Residual {
    pub fn homography(h: &Matrix3<f64>) -> Result<Self, GeometryError> {
        if is_singular_h(h) {
            return Err(GeometryError::SingularModel);
        }
        let h_inv = h.try_inverse().ok_or(GeometryError::SingularModel)?;
        Ok(Residual::Transfer { h: *h, h_inv })
    }

    pub fn fundamental(f: &Matrix3<f64>, metric: ErrorMetric) -> Self {
        Residual::Epipolar { f: *f, metric }
    }

    /// Default in-loop residual for a model kind: transfer error for H, Sampson for F/E.
    pub fn for_kind(kind: ModelKind, m: &Matrix3<f64>) -> Result<Self, GeometryError> {
        match kind {
            ModelKind::Homography => Self::homography(m),
            _ => Ok(Self::fundamental(m, ErrorMetric::Sampson)),
        }
    }

    #[inline]
    pub fn eval(&self, c: &Correspondence) -> f64 {
        let r = match self {
            Residual::Transfer { h, h_inv } => transfer_error(h, h_inv, c),
            Residual::Epipolar { f, metric } => epipolar_error_f(f, c, *metric),
        };
        r.unwrap_or(f64::INFINITY)
    }
}

/// Right and left null vectors of a rank-2 F: `F e1 = 0`, `e2^T F = 0`.
pub fn epipoles(f: &Matrix3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let rows = [f.row(0).transpose(), f.row(1).transpose(), f.row(2).transpose()];
    let cols = [f.column(0).into_owned(), f.column(1).into_owned(), f.column(2).into_owned()];
    (largest_cross(&rows), largest_cross(&cols))
}

fn largest_cross(v: &[Vector3<f64>; 3]) -> Vector3<f64> {
    let c = [v[0].cross(&v[1]), v[0].cross(&v[2]), v[1].cross(&v[2])];
    let mut best = c[0];
    for x in &c[1..] {
        if x.norm_squared() > best.norm_squared() {
            best = *x;
        }
    }
    best
}

#[inline]
fn orientation_sign(f: &Matrix3<f64>, e1: &Vector3<f64>, c: &Correspondence) -> f64 {
    let x = c.p1();
    let line = f.tr_mul(&c.p2());
    let ex = e1.cross(&x);
    let scale = line.norm() * ex.norm();
    if !(scale > 1e-300) {
        return 0.0;
    }
    let s = line.dot(&ex);
    if s.abs() <= 1e-12 * scale {
        0.0
    } else {
        s
    }
}

/// Oriented epipolar constraint: the epipolar line `F^T x'` and the line `e1 x x`
/// must point the same way. `e1` carries the sign convention of `F`.
/// Degenerate configurations (x at the epipole) pass.
pub fn oriented_constraint_ok(f: &Matrix3<f64>, e1: &Vector3<f64>, c: &Correspondence) -> bool {
    orientation_sign(f, e1, c) >= 0.0
}

/// Right epipole of `f` signed so that most of `reference` satisfies the oriented constraint.
pub fn oriented_epipole(f: &Matrix3<f64>, reference: &[Correspondence]) -> Vector3<f64> {
    let (e1, _) = epipoles(f);
    let mut votes = 0i64;
    for c in reference {
        let s = orientation_sign(f, &e1, c);
        if s > 0.0 {
            votes += 1;
        } else if s < 0.0 {
            votes -= 1;
        }
    }
    if votes < 0 {
        -e1
    } else {
        e1
    }
}

/// True when every point of `sample` lies on the same side of the oriented constraint.
pub fn orientation_consistent(f: &Matrix3<f64>, sample: &[Correspondence]) -> bool {
    let (e1, _) = epipoles(f);
    let (mut pos, mut neg) = (false, false);
    for c in sample {
        let s = orientation_sign(f, &e1, c);
        pos |= s > 0.0;
        neg |= s < 0.0;
    }
    !(pos && neg)
}
