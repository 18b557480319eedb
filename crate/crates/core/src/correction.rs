//! Point correction onto the estimated model and residual ranking.

use fixedbitset::FixedBitSet;
use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

use crate::geometry::{dehomogenize, oriented_constraint_ok, Correspondence, GeometryError, ModelKind, Residual};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectedPair {
    pub original: Correspondence,
    pub corrected: Correspondence,
    pub residual_before: f64,
    /// False when the pair was left untouched, e.g. it fails the chirality check.
    pub valid: bool,
}

/// Principal square root `A` with `A A = H`, or `None` unless every eigenvalue of `H`
/// has a positive real part.
pub fn sqrt_homography(h: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let eig = h.complex_eigenvalues();
    let scale = eig.iter().map(|e| e.norm()).fold(0.0, f64::max);
    if !(scale > 0.0) || eig.iter().any(|e| !(e.re > 1e-12 * scale)) {
        return None;
    }
    // Denman-Beavers on the unit-scale matrix.
    let s = h.norm();
    let mut y = h / s;
    let mut z = Matrix3::identity();
    for _ in 0..100 {
        let y_inv = y.try_inverse()?;
        let z_inv = z.try_inverse()?;
        let ny = (y + z_inv) * 0.5;
        let nz = (z + y_inv) * 0.5;
        let step = (ny - y).norm();
        y = ny;
        z = nz;
        if step <= 1e-15 * y.norm() {
            break;
        }
    }
    let a = y * s.sqrt();
    ((a * a - h).norm() <= 1e-8 * s).then_some(a)
}

/// Moves both points onto the homography `A A` through the midpoint in the "half-way" image.
pub fn correct_pair_h(a: &Matrix3<f64>, c: &Correspondence) -> Result<CorrectedPair, GeometryError> {
    let a_inv = a.try_inverse().ok_or(GeometryError::SingularModel)?;
    let (fx, fy) = dehomogenize(&(a * c.p1()))?;
    let (bx, by) = dehomogenize(&(a_inv * c.p2()))?;
    let m = Vector3::new((fx + bx) / 2.0, (fy + by) / 2.0, 1.0);
    let (x1, y1) = dehomogenize(&(a_inv * m))?;
    let (x2, y2) = dehomogenize(&(a * m))?;
    let h = a * a;
    let residual_before = Residual::homography(&h).map(|r| r.eval(c)).unwrap_or(f64::INFINITY);
    Ok(CorrectedPair {
        original: *c,
        corrected: Correspondence { x1, y1, x2, y2, quality: c.quality },
        residual_before,
        valid: true,
    })
}

/// Two-step optimal correction onto the epipolar constraint `x2^T F x1 = 0`, followed by
/// an exact projection of the second point onto its epipolar line. Pairs failing the
/// oriented constraint for the signed epipole `e1` are left unchanged and marked invalid.
pub fn correct_pair_f(f: &Matrix3<f64>, e1: &Vector3<f64>, c: &Correspondence) -> CorrectedPair {
    let residual_before = Residual::fundamental(f, crate::geometry::ErrorMetric::Sampson).eval(c);
    let unchanged = |valid| CorrectedPair { original: *c, corrected: *c, residual_before, valid };
    if !oriented_constraint_ok(f, e1, c) {
        return unchanged(false);
    }
    let x1 = c.p1();
    let x2 = c.p2();
    let e = Matrix2::new(f[(0, 0)], f[(0, 1)], f[(1, 0)], f[(1, 1)]);
    let fx1 = f * x1;
    let ftx2 = f.tr_mul(&x2);
    let mut n2 = Vector2::new(fx1[0], fx1[1]);
    let mut n1 = Vector2::new(ftx2[0], ftx2[1]);
    let a = n2.dot(&(e * n1));
    let b = (n2.norm_squared() + n1.norm_squared()) / 2.0;
    let cc = x2.dot(&fx1);
    let d = (b * b - a * cc).max(0.0).sqrt();
    if !(b + d > 0.0) {
        return unchanged(cc == 0.0);
    }
    let mut lambda = cc / (b + d);
    let dx2 = n2 * lambda;
    let dx1 = n1 * lambda;
    n2 -= e * dx1;
    n1 -= e.transpose() * dx2;
    let nn = n2.norm_squared() + n1.norm_squared();
    if nn > 0.0 {
        lambda *= 2.0 * d / nn;
    }
    let p1 = Vector3::new(c.x1 - lambda * n1[0], c.y1 - lambda * n1[1], 1.0);
    let mut p2 = Vector3::new(c.x2 - lambda * n2[0], c.y2 - lambda * n2[1], 1.0);
    let line = f * p1;
    let g = line[0] * line[0] + line[1] * line[1];
    if g > 0.0 {
        let r = line.dot(&p2) / g;
        p2[0] -= r * line[0];
        p2[1] -= r * line[1];
    }
    CorrectedPair {
        original: *c,
        corrected: Correspondence { x1: p1[0], y1: p1[1], x2: p2[0], y2: p2[1], quality: c.quality },
        residual_before,
        valid: true,
    }
}

/// All points ordered by residual, inliers of `mask` first. Ties keep index order.
pub fn rank_inliers(kind: ModelKind, model: &Matrix3<f64>, corrs: &[Correspondence], mask: &FixedBitSet) -> Vec<(usize, f64)> {
    let res = Residual::for_kind(kind, model).ok();
    let mut out: Vec<(usize, f64)> =
        corrs.iter().enumerate().map(|(i, c)| (i, res.as_ref().map_or(f64::INFINITY, |r| r.eval(c)))).collect();
    out.sort_by(|a, b| {
        let (ia, ib) = (mask.contains(a.0), mask.contains(b.0));
        ib.cmp(&ia).then(a.1.total_cmp(&b.1)).then(a.0.cmp(&b.0))
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_roots() {
        assert!((sqrt_homography(&Matrix3::identity()).unwrap() - Matrix3::identity()).norm() < 1e-12);
        let a = sqrt_homography(&Matrix3::from_diagonal(&Vector3::new(4.0, 9.0, 1.0))).unwrap();
        assert!((a - Matrix3::from_diagonal(&Vector3::new(2.0, 3.0, 1.0))).norm() < 1e-12);
        assert!(sqrt_homography(&Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0))).is_none());
        let rot = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0) * 0.5 + Matrix3::identity();
        let a = sqrt_homography(&rot).unwrap();
        assert!((a * a - rot).norm() < 1e-12);
    }

    #[test]
    fn midpoint_under_identity() {
        let c = Correspondence::new(0.0, 0.0, 2.0, 0.0);
        let p = correct_pair_h(&Matrix3::identity(), &c).unwrap();
        assert_eq!((p.corrected.x1, p.corrected.y1, p.corrected.x2, p.corrected.y2), (1.0, 0.0, 1.0, 0.0));
        assert!((p.residual_before - 2.0).abs() < 1e-12);
    }

    fn translation_f() -> Matrix3<f64> {
        Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0)
    }

    #[test]
    fn symmetric_split_for_translation() {
        let f = translation_f();
        let c = Correspondence::new(1.0, 2.0, 5.0, 3.0);
        let e1 = crate::geometry::oriented_epipole(&f, &[c]);
        let p = correct_pair_f(&f, &e1, &c);
        assert!(p.valid);
        assert!((p.corrected.y1 - 2.5).abs() < 1e-12 && (p.corrected.y2 - 2.5).abs() < 1e-12);
        assert_eq!((p.corrected.x1, p.corrected.x2), (1.0, 5.0));
        let on = Correspondence::new(3.0, 4.0, 8.0, 4.0);
        assert_eq!(correct_pair_f(&f, &e1, &on).corrected, on);
    }

    #[test]
    fn chirality_failure_is_left_alone() {
        let f = translation_f();
        let e1 = Vector3::new(1.0, 0.0, 0.0);
        let c = Correspondence::new(1.0, 2.0, -5.0, 2.5);
        let ok = oriented_constraint_ok(&f, &e1, &c);
        let p = correct_pair_f(&f, &e1, &c);
        assert_eq!(p.valid, ok);
        let flipped = correct_pair_f(&f, &-e1, &c);
        assert_ne!(p.valid, flipped.valid);
        let bad = if p.valid { flipped } else { p };
        assert_eq!(bad.corrected, c);
    }

    #[test]
    fn ranking() {
        let f = translation_f();
        let corrs = vec![
            Correspondence::new(0.0, 0.0, 1.0, 3.0),
            Correspondence::new(0.0, 0.0, 1.0, 1.0),
            Correspondence::new(0.0, 0.0, 1.0, 2.0),
        ];
        let mut mask = FixedBitSet::with_capacity(3);
        mask.insert_range(..);
        let order: Vec<usize> = rank_inliers(ModelKind::Fundamental, &f, &corrs, &mask).iter().map(|p| p.0).collect();
        assert_eq!(order, vec![1, 2, 0]);
        mask.set(1, false);
        let order: Vec<usize> = rank_inliers(ModelKind::Fundamental, &f, &corrs, &mask).iter().map(|p| p.0).collect();
        assert_eq!(order, vec![2, 0, 1]);
    }
}
