//! Dominant-plane handling for fundamental matrix estimation.
//!
//! A 7-point sample with five or more coplanar points yields an F that is only
//! constrained by the plane. The best F is kept when it has enough independent inliers
//! off the plane; otherwise F is rebuilt from the plane homography using the intrinsics
//! (known or guessed) or by plane and parallax.

use fixedbitset::FixedBitSet;
use nalgebra::{Matrix3, Vector3};
use rand::seq::index;
use rand::Rng;
use thiserror::Error;

use crate::geometry::{
    apply_similarity, epipoles, hartley_transform, skew, Calibration, Correspondence, ErrorMetric, Model, ModelKind,
    Residual,
};
use crate::randomness::{independent_inliers, nonrandom_confidence, robust_poisson_mean, IndependenceContext};
use crate::sampling::Score;
use crate::solvers::solve_lsq;
use crate::sprt::compute_i_delta;

/// Triplets of a 7-point sample such that every 5-subset contains at least one of them.
const TRIPLETS: [[usize; 3]; 5] = [[0, 1, 2], [3, 4, 5], [0, 1, 6], [3, 4, 6], [2, 5, 6]];

/// Default focal-length candidates as multiples of the larger image side.
pub const FOCAL_CANDIDATES: [f64; 6] = [0.5, 0.75, 1.0, 1.25, 1.5, 2.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DegeneracyError {
    #[error("homography is conjugate to a rotation and cannot be decomposed")]
    DecompositionFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DegeneracyStatus {
    NotDegenerate,
    RecoveredCalibrated,
    RecoveredApproxK,
    RecoveredPlaneParallax,
    PureRotation,
    Rejected,
}

#[derive(Debug, Clone)]
pub struct DegeneracyVerdict {
    pub status: DegeneracyStatus,
    /// The F to keep, or the plane homography for `PureRotation`.
    pub model: Option<Model>,
    pub support: Option<Score>,
    pub homography: Option<Matrix3<f64>>,
    /// F hypotheses scored while trying to recover, for the randomness test.
    pub hypotheses: usize,
}

#[derive(Debug, Clone)]
pub struct HDecomposition {
    pub candidates: [(Matrix3<f64>, Vector3<f64>); 2],
}

/// Inputs of [`degensac_plus`] beyond the model and the data.
#[derive(Debug, Clone)]
pub struct DegensacInput {
    pub calibration: Option<Calibration>,
    /// Image sizes `(w1, h1, w2, h2)` used to guess intrinsics when none are known.
    pub image_sizes: Option<(f64, f64, f64, f64)>,
    pub focal_candidates: Vec<f64>,
    /// Expected independent support of a random model over all points.
    pub lambda_hat: f64,
    /// Lower bound on the independent off-plane support of a non-degenerate F.
    pub min_off_plane_support: usize,
    pub metric: ErrorMetric,
    pub parallax_iters: usize,
    /// Confidence that the plane-and-parallax winner is not the best of random tries.
    pub parallax_confidence: f64,
    pub rotation_tol: f64,
}

impl DegensacInput {
    pub fn new(calibration: Option<Calibration>, lambda_hat: f64) -> Self {
        Self {
            calibration,
            image_sizes: None,
            focal_candidates: FOCAL_CANDIDATES.to_vec(),
            lambda_hat,
            min_off_plane_support: 5,
            metric: ErrorMetric::Sampson,
            parallax_iters: 100,
            parallax_confidence: 0.9999,
            rotation_tol: 0.1,
        }
    }
}

/// Ratio between the plane (transfer error) threshold and the epipolar threshold. The
/// transfer error is a 2D distance with noise from both images, so the same points need
/// a wider tolerance than the epipolar test to be recognised as lying on the plane.
pub const PLANE_THRESHOLD_SCALE: f64 = 3.0;

const REFINE_H_ITERS: usize = 5;

/// Inlier score of `f` on all correspondences.
pub fn score_f(f: &Matrix3<f64>, corrs: &[Correspondence], threshold: f64, metric: ErrorMetric) -> Score {
    let res = Residual::fundamental(f, metric);
    score_residual(&res, corrs, threshold)
}

fn score_residual(res: &Residual, corrs: &[Correspondence], threshold: f64) -> Score {
    let mut mask = FixedBitSet::with_capacity(corrs.len());
    let mut sum = 0.0;
    for (i, c) in corrs.iter().enumerate() {
        let r = res.eval(c);
        if r < threshold {
            mask.insert(i);
            sum += r;
        }
    }
    Score::from_mask(mask).with_residual_sum(sum)
}

fn h_inliers(h: &Matrix3<f64>, corrs: &[Correspondence], threshold: f64) -> FixedBitSet {
    match Residual::homography(h) {
        Ok(res) => score_residual(&res, corrs, threshold).inlier_mask,
        Err(_) => FixedBitSet::with_capacity(corrs.len()),
    }
}

/// Plane homography compatible with `f` through three correspondences.
fn compatible_h(f: &Matrix3<f64>, e2: &Vector3<f64>, pts: [&Correspondence; 3]) -> Option<Matrix3<f64>> {
    let a = skew(e2) * f;
    let m = Matrix3::from_rows(&[pts[0].p1().transpose(), pts[1].p1().transpose(), pts[2].p1().transpose()]);
    let mut b = Vector3::zeros();
    for (k, c) in pts.iter().enumerate() {
        let xp = c.p2();
        let xe = xp.cross(e2);
        let d = xe.norm_squared();
        if d < 1e-24 {
            return None;
        }
        b[k] = xp.cross(&(a * c.p1())).dot(&xe) / d;
    }
    let v = m.try_inverse()? * b;
    let h = a - e2 * v.transpose();
    let n = h.norm();
    let cols: f64 = h.column_iter().map(|c| c.norm()).product();
    (n > 0.0 && n.is_finite() && h.determinant().abs() > 1e-9 * cols).then(|| h / n)
}

/// Homography induced by `f` on five or more of the seven `sample` points.
pub fn h_from_f_sample(f: &Matrix3<f64>, sample: &[Correspondence], threshold: f64) -> Option<Matrix3<f64>> {
    assert_eq!(sample.len(), 7, "h_from_f_sample needs the 7-point sample");
    let t1 = hartley_transform(sample.iter().map(|c| (c.x1, c.y1)))?;
    let t2 = hartley_transform(sample.iter().map(|c| (c.x2, c.y2)))?;
    let norm: Vec<Correspondence> = sample.iter().map(|c| apply_similarity(c, &t1, &t2)).collect();
    let t2_inv = t2.try_inverse()?;
    let fn_ = t2_inv.transpose() * f * t1.try_inverse()?;
    let (_, e2) = epipoles(&fn_);
    for t in TRIPLETS {
        let Some(hn) = compatible_h(&fn_, &e2, [&norm[t[0]], &norm[t[1]], &norm[t[2]]]) else {
            continue;
        };
        let h = t2_inv * hn * t1;
        let h = h / h.norm();
        let Ok(res) = Residual::homography(&h) else { continue };
        if sample.iter().filter(|c| res.eval(c) < threshold).count() >= 5 {
            return Some(h);
        }
    }
    None
}

fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut out = u * vt;
    if out.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        out = u * vt;
    }
    out
}

/// Splits a calibrated homography `R + t n^T / d` into its two physically valid
/// `(R, t / |t|)` pairs. `points` are normalized correspondences on the plane; they fix
/// the overall sign and the side of the plane. Without points `det H > 0` is assumed.
pub fn decompose_h(
    h_norm: &Matrix3<f64>,
    points: &[(Vector3<f64>, Vector3<f64>)],
) -> Result<HDecomposition, DegeneracyError> {
    let mut h = *h_norm;
    let pos = points.iter().filter(|(a, b)| b.dot(&(h * a)) > 0.0).count();
    let flip = if points.is_empty() { h.determinant() < 0.0 } else { 2 * pos < points.len() };
    if flip {
        h = -h;
    }
    let sv = h.singular_values();
    let mut s = [sv[0], sv[1], sv[2]];
    s.sort_by(|a, b| b.total_cmp(a));
    if !(s[1] > 0.0) {
        return Err(DegeneracyError::DecompositionFailed);
    }
    h /= s[1];
    let eig = (h.transpose() * h).symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let s1 = eig.eigenvalues[order[0]];
    let s3 = eig.eigenvalues[order[2]];
    if s1 - s3 < 1e-9 {
        return Err(DegeneracyError::DecompositionFailed);
    }
    let v1: Vector3<f64> = eig.eigenvectors.column(order[0]).into();
    let v2: Vector3<f64> = eig.eigenvectors.column(order[1]).into();
    let v3 = v1.cross(&v2);
    let a = (1.0 - s3).max(0.0).sqrt();
    let b = (s1 - 1.0).max(0.0).sqrt();
    let den = (s1 - s3).sqrt();
    let u1 = (a * v1 + b * v3) / den;
    let u2 = (a * v1 - b * v3) / den;

    let solve = |u: Vector3<f64>| {
        let uu = Matrix3::from_columns(&[v2, u, v2.cross(&u)]);
        let hv2 = h * v2;
        let hu = h * u;
        let ww = Matrix3::from_columns(&[hv2, hu, hv2.cross(&hu)]);
        let r = orthonormalize(&(ww * uu.transpose()));
        let n = v2.cross(&u);
        let mut t = (h - r) * n;
        let in_front = points.iter().filter(|(x, _)| n.dot(x) > 0.0).count();
        let wrong_side = if points.is_empty() { n[2] < 0.0 } else { 2 * in_front < points.len() };
        if wrong_side {
            t = -t;
        }
        let tn = t.norm();
        (r, if tn > 0.0 { t / tn } else { t })
    };
    Ok(HDecomposition { candidates: [solve(u1), solve(u2)] })
}

fn to_normalized(k: &Matrix3<f64>, x: f64, y: f64) -> Option<Vector3<f64>> {
    Some(k.try_inverse()? * Vector3::new(x, y, 1.0))
}

/// Fundamental matrix `K2^-T [t]x R K1^-1` from the decomposition of a plane homography,
/// picking the candidate with the most inliers (first on ties).
pub fn f_from_h_calibrated(
    h: &Matrix3<f64>,
    k: &Calibration,
    corrs: &[Correspondence],
    plane_points: &[usize],
    threshold: f64,
    metric: ErrorMetric,
) -> Result<(Matrix3<f64>, Score), DegeneracyError> {
    let k1_inv = k.k1.try_inverse().ok_or(DegeneracyError::DecompositionFailed)?;
    let k2_inv = k.k2.try_inverse().ok_or(DegeneracyError::DecompositionFailed)?;
    let h_norm = k2_inv * h * k.k1;
    let pts: Vec<_> = plane_points
        .iter()
        .filter_map(|&i| {
            let c = &corrs[i];
            Some((to_normalized(&k.k1, c.x1, c.y1)?, to_normalized(&k.k2, c.x2, c.y2)?))
        })
        .collect();
    let dec = decompose_h(&h_norm, &pts)?;
    let mut best: Option<(Matrix3<f64>, Score)> = None;
    for (r, t) in dec.candidates {
        let f = k2_inv.transpose() * skew(&t) * r * k1_inv;
        let n = f.norm();
        if !(n > 0.0 && n.is_finite()) {
            continue;
        }
        let f = f / n;
        let s = score_f(&f, corrs, threshold, metric);
        if best.as_ref().is_none_or(|(_, b)| s.inlier_count > b.inlier_count) {
            best = Some((f, s));
        }
    }
    best.ok_or(DegeneracyError::DecompositionFailed)
}

/// True when `K2^-1 H K1`, scaled to unit determinant, is within `tol` of a rotation.
pub fn is_pure_rotation(h: &Matrix3<f64>, k: &Calibration, tol: f64) -> bool {
    let Some(k2_inv) = k.k2.try_inverse() else { return false };
    let hp = k2_inv * h * k.k1;
    let det = hp.determinant();
    if det == 0.0 || !det.is_finite() {
        return false;
    }
    let hp = hp / det.cbrt();
    (hp.transpose() * hp - Matrix3::identity()).norm() < tol
}

/// Independent inliers of `f` that are not explained by the plane homography `h`.
pub fn off_plane_support(
    f: &Matrix3<f64>,
    h: &Matrix3<f64>,
    corrs: &[Correspondence],
    sample: &[usize],
    threshold: f64,
    metric: ErrorMetric,
) -> usize {
    let mut mask = score_f(f, corrs, threshold, metric).inlier_mask;
    mask.difference_with(&h_inliers(h, corrs, threshold * PLANE_THRESHOLD_SCALE));
    let ctx = IndependenceContext::new(ModelKind::Fundamental, *f, sample, threshold);
    independent_inliers(&ctx, corrs, &mask).0
}

/// Result of the plane-and-parallax search.
#[derive(Debug, Clone)]
pub struct ParallaxResult {
    pub model: Option<Matrix3<f64>>,
    /// Independent off-plane support of `model`.
    pub support: usize,
    /// Support the winner needs to beat chance, given the supports of all tried models.
    pub bound: usize,
}

/// Plane-and-parallax RANSAC: the epipole is the intersection of the parallax lines of
/// two off-plane points and `F = [e']x H`. Keeps the F with the largest independent
/// off-plane support. Since the winner is the best of many tries, its bound is the
/// support a random model reaches with probability below `1 - confidence` over all
/// tries, for the robust mean of the observed supports.
#[allow(clippy::too_many_arguments)]
pub fn plane_and_parallax<R: Rng + ?Sized>(
    h: &Matrix3<f64>,
    corrs: &[Correspondence],
    threshold: f64,
    max_iters: usize,
    confidence: f64,
    metric: ErrorMetric,
    rng: &mut R,
) -> ParallaxResult {
    let plane = h_inliers(h, corrs, threshold * PLANE_THRESHOLD_SCALE);
    let off: Vec<usize> = (0..corrs.len()).filter(|&i| !plane.contains(i)).collect();
    let none = ParallaxResult { model: None, support: 0, bound: usize::MAX };
    if off.len() < 2 {
        return none;
    }
    let parallax = |i: usize| (h * corrs[i].p1()).cross(&corrs[i].p2());
    let mut best: Option<(Matrix3<f64>, usize)> = None;
    let mut supports = Vec::with_capacity(max_iters);
    for _ in 0..max_iters {
        let pick = index::sample(rng, off.len(), 2);
        let (a, b) = (off[pick.index(0)], off[pick.index(1)]);
        let e2 = parallax(a).cross(&parallax(b));
        if e2.norm() < 1e-12 {
            continue;
        }
        let f = skew(&e2) * h;
        let n = f.norm();
        if !(n > 0.0 && n.is_finite()) {
            continue;
        }
        let f = f / n;
        let support = off_plane_support(&f, h, corrs, &[a, b], threshold, metric);
        supports.push(support);
        if best.as_ref().is_none_or(|(_, c)| support > *c) {
            best = Some((f, support));
        }
    }
    let Some((f, support)) = best else { return none };
    let lambda = robust_poisson_mean(&supports).unwrap_or(0.0);
    let tries = supports.len() as u64;
    let mut bound = 0usize;
    while nonrandom_confidence(bound as u64, lambda, tries) < confidence {
        bound += 1;
    }
    // `bound` is the largest support chance can still produce; beating it needs one more.
    ParallaxResult { model: Some(f), support, bound: bound + 1 }
}

/// One guessed calibration per focal candidate, principal points at the image centers.
pub fn guess_calibration(w1: f64, h1: f64, w2: f64, h2: f64, focal_candidates: &[f64]) -> Vec<Calibration> {
    assert!(!focal_candidates.is_empty(), "at least one focal candidate is required");
    assert!(w1 > 0.0 && h1 > 0.0 && w2 > 0.0 && h2 > 0.0, "image sizes must be positive");
    let k = |f: f64, w: f64, h: f64| {
        let fd = f * w.max(h);
        Matrix3::new(fd, 0.0, w / 2.0, 0.0, fd, h / 2.0, 0.0, 0.0, 1.0)
    };
    focal_candidates
        .iter()
        .map(|&f| Calibration { k1: k(f, w1, h1), k2: k(f, w2, h2), known: false })
        .collect()
}

/// Image sizes from the extent of the points, for data without known resolution.
pub fn image_extent(corrs: &[Correspondence]) -> (f64, f64, f64, f64) {
    let mut m = [1.0f64; 4];
    for c in corrs {
        m[0] = m[0].max(c.x1);
        m[1] = m[1].max(c.y1);
        m[2] = m[2].max(c.x2);
        m[3] = m[3].max(c.y2);
    }
    (m[0], m[1], m[2], m[3])
}

/// Independent off-plane support a non-degenerate F needs: the non-random bound for the
/// random support expected on the `off_plane` points, and at least `floor`.
pub fn off_plane_bound(lambda_hat: f64, off_plane: usize, total: usize, floor: usize) -> usize {
    let total = total.max(1) as f64;
    let lambda_off = lambda_hat * off_plane as f64 / total;
    compute_i_delta(lambda_off, (lambda_hat / total).min(0.95)).max(floor)
}

/// Refits `h` to all of its inliers when that increases support.
fn refine_h(h: &Matrix3<f64>, corrs: &[Correspondence], threshold: f64) -> Matrix3<f64> {
    let mut best = *h;
    let mut mask = h_inliers(h, corrs, threshold);
    let mut count = mask.count_ones(..);
    for _ in 0..REFINE_H_ITERS {
        if count < 5 {
            break;
        }
        let weights: Vec<f64> = (0..corrs.len()).map(|i| if mask.contains(i) { 1.0 } else { 0.0 }).collect();
        let Some(r) = solve_lsq(corrs, &weights, ModelKind::Homography) else { break };
        let m = h_inliers(&r, corrs, threshold);
        let c = m.count_ones(..);
        if c < count || m == mask {
            if c >= count {
                best = r;
            }
            break;
        }
        best = r;
        mask = m;
        count = c;
    }
    best
}

fn verdict(status: DegeneracyStatus, f: Option<(Matrix3<f64>, Score)>, h: Matrix3<f64>) -> DegeneracyVerdict {
    let (model, support) = match f {
        Some((f, s)) => (Some(Model::Fundamental(f)), Some(s)),
        None => (None, None),
    };
    DegeneracyVerdict { status, model, support, homography: Some(h), hypotheses: 0 }
}

/// Checks the so-far-the-best F estimated from `sample` for plane degeneracy and
/// recovers a non-degenerate F when needed.
pub fn degensac_plus<R: Rng + ?Sized>(
    best_f: &Matrix3<f64>,
    sample: &[usize],
    input: &DegensacInput,
    corrs: &[Correspondence],
    threshold: f64,
    rng: &mut R,
) -> DegeneracyVerdict {
    let mut hypotheses = 0;
    let mut v = degensac_inner(best_f, sample, input, corrs, threshold, rng, &mut hypotheses);
    v.hypotheses = hypotheses;
    v
}

fn degensac_inner<R: Rng + ?Sized>(
    best_f: &Matrix3<f64>,
    sample: &[usize],
    input: &DegensacInput,
    corrs: &[Correspondence],
    threshold: f64,
    rng: &mut R,
    hypotheses: &mut usize,
) -> DegeneracyVerdict {
    let keep = |status| DegeneracyVerdict {
        status,
        model: Some(Model::Fundamental(*best_f)),
        support: Some(score_f(best_f, corrs, threshold, input.metric)),
        homography: None,
        hypotheses: 0,
    };
    let pts: Vec<Correspondence> = sample.iter().map(|&i| corrs[i]).collect();
    let h_thr = threshold * PLANE_THRESHOLD_SCALE;
    let Some(h) = h_from_f_sample(best_f, &pts, h_thr) else {
        return keep(DegeneracyStatus::NotDegenerate);
    };
    let h = refine_h(&h, corrs, h_thr);
    let off = corrs.len() - h_inliers(&h, corrs, h_thr).count_ones(..);
    let i_f = off_plane_bound(input.lambda_hat, off, corrs.len(), input.min_off_plane_support);
    let plane_points: Vec<usize> = match Residual::homography(&h) {
        Ok(res) => sample.iter().copied().filter(|&i| res.eval(&corrs[i]) < h_thr).collect(),
        Err(_) => return keep(DegeneracyStatus::NotDegenerate),
    };

    let known = input.calibration.filter(|k| k.known);
    let mut calibrated = None;
    let mut approx = None;
    if let Some(k) = known {
        if is_pure_rotation(&h, &k, input.rotation_tol) {
            return DegeneracyVerdict {
                status: DegeneracyStatus::PureRotation,
                model: Some(Model::Homography(h)),
                support: None,
                homography: Some(h),
                hypotheses: 0,
            };
        }
        *hypotheses += 2;
        match f_from_h_calibrated(&h, &k, corrs, &plane_points, threshold, input.metric) {
            Ok(r) => calibrated = Some(r),
            Err(_) => {
                return DegeneracyVerdict {
                    status: DegeneracyStatus::PureRotation,
                    model: Some(Model::Homography(h)),
                    support: None,
                    homography: Some(h),
                    hypotheses: 0,
                }
            }
        }
    } else {
        let (w1, h1, w2, h2) = input.image_sizes.unwrap_or_else(|| image_extent(corrs));
        for k in guess_calibration(w1, h1, w2, h2, &input.focal_candidates) {
            *hypotheses += 2;
            if let Ok((f, s)) = f_from_h_calibrated(&h, &k, corrs, &plane_points, threshold, input.metric) {
                if approx.as_ref().is_none_or(|(_, b): &(Matrix3<f64>, Score)| s.inlier_count > b.inlier_count) {
                    approx = Some((f, s));
                }
            }
        }
    }

    if off_plane_support(best_f, &h, corrs, sample, threshold, input.metric) >= i_f {
        return keep(DegeneracyStatus::NotDegenerate);
    }
    if known.is_some() {
        return verdict(DegeneracyStatus::RecoveredCalibrated, calibrated, h);
    }
    let approx_support = approx
        .as_ref()
        .map(|(f, _)| off_plane_support(f, &h, corrs, &plane_points, threshold, input.metric))
        .unwrap_or(0);
    if approx.is_some() && approx_support >= i_f {
        return verdict(DegeneracyStatus::RecoveredApproxK, approx, h);
    }
    *hypotheses += input.parallax_iters;
    let pp = plane_and_parallax(&h, corrs, threshold, input.parallax_iters, input.parallax_confidence, input.metric, rng);
    let (pp_support, pp) = (pp.support, pp.model.filter(|_| pp.support >= i_f.max(pp.bound)));
    let approx_ok = approx.is_some() && approx_support >= i_f;
    let pp_ok = pp.is_some();
    if pp_ok && (!approx_ok || pp_support > approx_support) {
        let f = pp.unwrap();
        let s = score_f(&f, corrs, threshold, input.metric);
        return verdict(DegeneracyStatus::RecoveredPlaneParallax, Some((f, s)), h);
    }
    if approx_ok {
        return verdict(DegeneracyStatus::RecoveredApproxK, approx, h);
    }
    DegeneracyVerdict { status: DegeneracyStatus::Rejected, model: None, support: None, homography: Some(h), hypotheses: 0 }
}
