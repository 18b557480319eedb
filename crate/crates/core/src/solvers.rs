//! Gaussian-elimination minimal solvers and weighted least-squares fitting.

use nalgebra::{DMatrix, Matrix3, Matrix3x4, Point2, Point3, SMatrix, SVector, Vector3};
use thiserror::Error;

use crate::geometry::{apply_similarity, hartley_transform, Correspondence, ModelKind};

/// Pivots smaller than this, relative to the row maximum, mean the system is rank deficient.
pub const PIVOT_TOL: f64 = 1e-11;

/// Below this relative magnitude a tail coefficient is treated as vanishing and the
/// fixed-element convention switches to the pivoted basis.
const CONVENTION_TOL: f64 = 1e-6;

pub type Matrix9 = SMatrix<f64, 9, 9>;
pub type Vector9 = SVector<f64, 9>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("linear system is rank deficient")]
    RankDeficient,
    #[error("system has {cols} columns, expected 9")]
    Shape { cols: usize },
}

/// Homogeneous system `A f = 0` with one constraint per row.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>) -> Self {
        Self { a }
    }

    pub fn rows(&self) -> usize {
        self.a.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NullSpace {
    pub basis: Vec<Vector9>,
}

/// Null space of a system with 9 columns via Gaussian elimination with row pivoting.
///
/// For two null vectors both basis vectors have `f[8] = 1`; the first has `f[7] = 0`,
/// the second `f[6] = 0`. When one of the trailing coefficients vanishes the free
/// columns are chosen among the last three instead.
pub fn null_space_ge(sys: &LinearSystem, dims: usize) -> Result<NullSpace, SolverError> {
    if sys.a.ncols() != 9 {
        return Err(SolverError::Shape { cols: sys.a.ncols() });
    }
    let mut rows: Vec<[f64; 9]> = (0..sys.a.nrows())
        .map(|i| {
            let mut r = [0.0; 9];
            for (j, v) in r.iter_mut().enumerate() {
                *v = sys.a[(i, j)];
            }
            r
        })
        .collect();
    let basis = null_space_rows(&mut rows, dims)?;
    Ok(NullSpace { basis: basis.into_iter().map(Vector9::from).collect() })
}

/// In-place elimination on raw rows; the hot-loop entry point.
pub(crate) fn null_space_rows(rows: &mut [[f64; 9]], dims: usize) -> Result<Vec<[f64; 9]>, SolverError> {
    assert!((1..=8).contains(&dims), "dims must be in 1..=8");
    let r = 9 - dims;
    if rows.len() < r {
        return Err(SolverError::RankDeficient);
    }
    let mut scale: Vec<f64> = rows.iter().map(|row| row.iter().fold(0.0f64, |m, v| m.max(v.abs()))).collect();
    if scale.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(SolverError::RankDeficient);
    }

    for k in 0..r - 1 {
        let p = (k..rows.len())
            .max_by(|&a, &b| rows[a][k].abs().total_cmp(&rows[b][k].abs()))
            .unwrap();
        if rows[p][k].abs() < PIVOT_TOL * scale[p] {
            return Err(SolverError::RankDeficient);
        }
        rows.swap(k, p);
        scale.swap(k, p);
        let pivot = rows[k];
        for row in rows.iter_mut().skip(k + 1) {
            let factor = row[k] / pivot[k];
            if factor != 0.0 {
                row[k] = 0.0;
                for j in k + 1..9 {
                    row[j] -= factor * pivot[j];
                }
            }
        }
    }

    // Last pivot row: the remaining row with the largest tail.
    let k = r - 1;
    let p = (k..rows.len())
        .max_by(|&a, &b| {
            let ta = rows[a][k..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let tb = rows[b][k..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            ta.total_cmp(&tb)
        })
        .unwrap();
    rows.swap(k, p);
    scale.swap(k, p);
    let tail: Vec<f64> = rows[k][k..].to_vec();
    let tmax = tail.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if tmax < PIVOT_TOL * scale[k] {
        return Err(SolverError::RankDeficient);
    }

    let tails: Vec<Vec<f64>> = if dims == 2 && tail.iter().all(|v| v.abs() >= CONVENTION_TOL * tmax) {
        vec![vec![-tail[2] / tail[0], 0.0, 1.0], vec![0.0, -tail[2] / tail[1], 1.0]]
    } else {
        let piv = (0..tail.len()).max_by(|&a, &b| tail[a].abs().total_cmp(&tail[b].abs())).unwrap();
        (0..tail.len())
            .filter(|&c| c != piv)
            .map(|free| {
                let mut t = vec![0.0; tail.len()];
                t[free] = 1.0;
                t[piv] = -tail[free] / tail[piv];
                t
            })
            .collect()
    };

    Ok(tails
        .into_iter()
        .map(|t| {
            let mut f = [0.0; 9];
            f[k..].copy_from_slice(&t);
            for i in (0..k).rev() {
                let s: f64 = (i + 1..9).map(|j| rows[i][j] * f[j]).sum();
                f[i] = -s / rows[i][i];
            }
            f
        })
        .collect())
}

#[inline]
fn h_rows(c: &Correspondence) -> [[f64; 9]; 2] {
    let (x, y, u, v) = (c.x1, c.y1, c.x2, c.y2);
    [
        [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, -u],
        [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, -v],
    ]
}

#[inline]
fn f_row(c: &Correspondence) -> [f64; 9] {
    let (x, y, u, v) = (c.x1, c.y1, c.x2, c.y2);
    [u * x, u * y, u, v * x, v * y, v, x, y, 1.0]
}

/// Calls `emit` once per constraint row of `c` (two for H, one for F/E).
#[inline]
pub fn constraint_rows(kind: ModelKind, c: &Correspondence, mut emit: impl FnMut(&[f64; 9])) {
    match kind {
        ModelKind::Homography => {
            for r in &h_rows(c) {
                emit(r);
            }
        }
        _ => emit(&f_row(c)),
    }
}

fn collinear(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> bool {
    let cross = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
    cross.abs() < 1e-9
}

fn any_three_collinear(p: &[(f64, f64); 4]) -> bool {
    collinear(p[0], p[1], p[2])
        || collinear(p[0], p[1], p[3])
        || collinear(p[0], p[2], p[3])
        || collinear(p[1], p[2], p[3])
}

fn normalize_sample(sample: &[Correspondence]) -> Option<(Vec<Correspondence>, Matrix3<f64>, Matrix3<f64>)> {
    let t1 = hartley_transform(sample.iter().map(|c| (c.x1, c.y1)))?;
    let t2 = hartley_transform(sample.iter().map(|c| (c.x2, c.y2)))?;
    Some((sample.iter().map(|c| apply_similarity(c, &t1, &t2)).collect(), t1, t2))
}

fn similarity_inverse(t: &Matrix3<f64>) -> Matrix3<f64> {
    let s = t[(0, 0)];
    Matrix3::new(1.0 / s, 0.0, -t[(0, 2)] / s, 0.0, 1.0 / s, -t[(1, 2)] / s, 0.0, 0.0, 1.0)
}

fn mat_from_row_major(f: &[f64; 9]) -> Matrix3<f64> {
    Matrix3::from_row_slice(f)
}

/// Homography from 4 correspondences, unit Frobenius norm. `None` when three points
/// are collinear in either image or the system is rank deficient.
pub fn solve_h_4pt(sample: &[Correspondence]) -> Option<Matrix3<f64>> {
    assert_eq!(sample.len(), 4, "solve_h_4pt needs exactly 4 correspondences");
    let (norm, t1, t2) = normalize_sample(sample)?;
    let p1 = [0, 1, 2, 3].map(|i| (norm[i].x1, norm[i].y1));
    let p2 = [0, 1, 2, 3].map(|i| (norm[i].x2, norm[i].y2));
    if any_three_collinear(&p1) || any_three_collinear(&p2) {
        return None;
    }
    let mut rows = [[0.0; 9]; 8];
    for (i, c) in norm.iter().enumerate() {
        let r = h_rows(c);
        rows[2 * i] = r[0];
        rows[2 * i + 1] = r[1];
    }
    let ns = null_space_rows(&mut rows, 1).ok()?;
    let h = similarity_inverse(&t2) * mat_from_row_major(&ns[0]) * t1;
    let n = h.norm();
    (n > 0.0 && n.is_finite()).then(|| h / n)
}

/// Fundamental matrices from 7 correspondences (1 to 3 real solutions), unit Frobenius norm.
/// An empty list means the sample was degenerate.
pub fn solve_f_7pt(sample: &[Correspondence]) -> Vec<Matrix3<f64>> {
    assert_eq!(sample.len(), 7, "solve_f_7pt needs exactly 7 correspondences");
    let Some((norm, t1, t2)) = normalize_sample(sample) else {
        return Vec::new();
    };
    let mut rows = [[0.0; 9]; 7];
    for (row, c) in rows.iter_mut().zip(&norm) {
        *row = f_row(c);
    }
    let Ok(ns) = null_space_rows(&mut rows, 2) else {
        return Vec::new();
    };
    fundamentals_from_null_space(&mat_from_row_major(&ns[0]), &mat_from_row_major(&ns[1]))
        .into_iter()
        .filter_map(|f| {
            let f = t2.transpose() * f * t1;
            let n = f.norm();
            (n > 0.0 && n.is_finite()).then(|| f / n)
        })
        .collect()
}

/// Rank-2 members `a f1 + (1 - a) f2` of a two-dimensional pencil.
pub fn fundamentals_from_null_space(f1: &Matrix3<f64>, f2: &Matrix3<f64>) -> Vec<Matrix3<f64>> {
    let a = *f2;
    let b = f1 - f2;
    if b.norm() <= 1e-12 * a.norm() {
        return vec![rank2_projection(&a)];
    }
    let c0 = a.determinant();
    let c1 = (adjugate(&a) * b).trace();
    let c2 = (adjugate(&b) * a).trace();
    let c3 = b.determinant();
    solve_cubic(c3, c2, c1, c0).into_iter().map(|alpha| a + b * alpha).collect()
}

fn adjugate(m: &Matrix3<f64>) -> Matrix3<f64> {
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[(r0, c0)] * m[(r1, c1)] - m[(r0, c1)] * m[(r1, c0)];
    Matrix3::new(
        c(1, 2, 1, 2),
        -c(0, 2, 1, 2),
        c(0, 1, 1, 2),
        -c(1, 2, 0, 2),
        c(0, 2, 0, 2),
        -c(0, 1, 0, 2),
        c(1, 2, 0, 1),
        -c(0, 2, 0, 1),
        c(0, 1, 0, 1),
    )
}

/// Real roots of `c3 x^3 + c2 x^2 + c1 x + c0`.
pub fn solve_cubic(c3: f64, c2: f64, c1: f64, c0: f64) -> Vec<f64> {
    let scale = c3.abs().max(c2.abs()).max(c1.abs()).max(c0.abs());
    if scale == 0.0 {
        return Vec::new();
    }
    let mut roots = if c3.abs() < 1e-10 * scale {
        if c3 == 0.0 {
            solve_quadratic(c2, c1, c0)
        } else {
            companion_roots(c3, c2, c1, c0)
        }
    } else {
        cardano(c2 / c3, c1 / c3, c0 / c3)
    };
    for r in roots.iter_mut() {
        for _ in 0..2 {
            let f = ((c3 * *r + c2) * *r + c1) * *r + c0;
            let d = (3.0 * c3 * *r + 2.0 * c2) * *r + c1;
            if d != 0.0 {
                let step = f / d;
                if step.is_finite() {
                    *r -= step;
                }
            }
        }
    }
    roots.retain(|r| r.is_finite());
    roots
}

fn cardano(a: f64, b: f64, c: f64) -> Vec<f64> {
    let q = (a * a - 3.0 * b) / 9.0;
    let r = (2.0 * a * a * a - 9.0 * a * b + 27.0 * c) / 54.0;
    let q3 = q * q * q;
    if r * r < q3 {
        let theta = (r / q3.sqrt()).clamp(-1.0, 1.0).acos();
        let m = -2.0 * q.sqrt();
        let tau = 2.0 * std::f64::consts::PI;
        vec![
            m * (theta / 3.0).cos() - a / 3.0,
            m * ((theta + tau) / 3.0).cos() - a / 3.0,
            m * ((theta - tau) / 3.0).cos() - a / 3.0,
        ]
    } else {
        let big = -r.signum() * (r.abs() + (r * r - q3).sqrt()).cbrt();
        let small = if big != 0.0 { q / big } else { 0.0 };
        vec![big + small - a / 3.0]
    }
}

fn solve_quadratic(a: f64, b: f64, c: f64) -> Vec<f64> {
    if a == 0.0 {
        return if b != 0.0 { vec![-c / b] } else { Vec::new() };
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return Vec::new();
    }
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    let mut out = vec![q / a];
    if q != 0.0 {
        out.push(c / q);
    }
    out
}

fn companion_roots(c3: f64, c2: f64, c1: f64, c0: f64) -> Vec<f64> {
    let m = Matrix3::new(-c2 / c3, -c1 / c3, -c0 / c3, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0);
    m.complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-8 * (1.0 + z.re.abs()))
        .map(|z| z.re)
        .collect()
}

/// Closest rank-2 matrix in Frobenius norm.
pub fn rank2_projection(f: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = f.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return *f;
    };
    // Subtracting the smallest component keeps a nearly rank-2 input accurate to the
    // working precision; rebuilding from all three factors does not.
    let (imin, s) = svd.singular_values.argmin();
    f - u.column(imin) * s * v_t.row(imin)
}

/// Eigenvector of the smallest eigenvalue of a symmetric 9x9 matrix.
pub fn smallest_eigenvector(ata: &Matrix9) -> Option<Vector9> {
    let eig = nalgebra::SymmetricEigen::try_new(*ata, f64::EPSILON, 0)?;
    let (imin, _) = eig.eigenvalues.argmin();
    let v = eig.eigenvectors.column(imin).into_owned();
    v.iter().all(|x| x.is_finite()).then_some(v)
}

/// Adds `w * rows^T rows` for the constraints of `c` to `ata`.
#[inline]
pub fn accumulate(ata: &mut Matrix9, kind: ModelKind, c: &Correspondence, w: f64) {
    constraint_rows(kind, c, |r| {
        for i in 0..9 {
            let wi = w * r[i];
            if wi == 0.0 {
                continue;
            }
            for j in 0..9 {
                ata[(i, j)] += wi * r[j];
            }
        }
    });
}

/// Weighted least squares on already normalized points. The result is in the same
/// normalized frame; F is projected to rank 2.
pub fn solve_lsq_normalized(norm: &[Correspondence], weights: &[f64], kind: ModelKind) -> Option<Matrix3<f64>> {
    assert_eq!(norm.len(), weights.len());
    let mut rows: Vec<f64> = Vec::new();
    let mut used = 0usize;
    for (c, &w) in norm.iter().zip(weights) {
        if w > 0.0 {
            let sw = w.sqrt();
            constraint_rows(kind, c, |r| rows.extend(r.iter().map(|x| x * sw)));
            used += 1;
        }
    }
    if used < min_lsq_points(kind) {
        return None;
    }
    // The design matrix itself rather than its normal equations keeps the null vector
    // accurate to the working precision on exact data.
    let a = DMatrix::from_row_slice(rows.len() / 9, 9, &rows);
    let r = a.qr().r();
    let mut square = Matrix9::zeros();
    square.view_mut((0, 0), (r.nrows(), 9)).copy_from(&r);
    let svd = square.svd(false, true);
    let v_t = svd.v_t?;
    let (imin, _) = svd.singular_values.argmin();
    let v = v_t.row(imin).transpose();
    if !v.iter().all(|x| x.is_finite()) {
        return None;
    }
    let m = Matrix3::from_row_slice(v.as_slice());
    let m = if kind == ModelKind::Homography { m } else { rank2_projection(&m) };
    let n = m.norm();
    (n > 0.0 && n.is_finite()).then(|| m / n)
}

pub(crate) fn model_from_ata(ata: &Matrix9, kind: ModelKind) -> Option<Matrix3<f64>> {
    let v = smallest_eigenvector(ata)?;
    let m = Matrix3::from_row_slice(v.as_slice());
    let m = if kind == ModelKind::Homography { m } else { rank2_projection(&m) };
    let n = m.norm();
    (n > 0.0 && n.is_finite()).then(|| m / n)
}

/// Minimum number of points for a non-minimal fit.
pub fn min_lsq_points(kind: ModelKind) -> usize {
    match kind {
        ModelKind::Homography => 4,
        _ => 8,
    }
}

/// Weighted least-squares H or F on Hartley-normalized coordinates, returned in pixels
/// with unit Frobenius norm. `None` when fewer than the minimum number of points carry weight.
pub fn solve_lsq(corrs: &[Correspondence], weights: &[f64], kind: ModelKind) -> Option<Matrix3<f64>> {
    assert_eq!(corrs.len(), weights.len());
    let active = || corrs.iter().zip(weights).filter(|(_, &w)| w > 0.0).map(|(c, _)| c);
    let t1 = hartley_transform(active().map(|c| (c.x1, c.y1)))?;
    let t2 = hartley_transform(active().map(|c| (c.x2, c.y2)))?;
    let norm: Vec<Correspondence> = corrs.iter().map(|c| apply_similarity(c, &t1, &t2)).collect();
    let m = solve_lsq_normalized(&norm, weights, kind)?;
    let m = match kind {
        ModelKind::Homography => similarity_inverse(&t2) * m * t1,
        _ => t2.transpose() * m * t1,
    };
    let n = m.norm();
    (n > 0.0 && n.is_finite()).then(|| m / n)
}

/// Linear camera resection from six 2D-3D correspondences.
/// `None` for degenerate configurations such as coplanar 3D points.
pub fn solve_p6p(corrs: &[(Point2<f64>, Point3<f64>)]) -> Option<Matrix3x4<f64>> {
    assert_eq!(corrs.len(), 6, "solve_p6p needs exactly 6 correspondences");
    let t2 = hartley_transform(corrs.iter().map(|(p, _)| (p.x, p.y)))?;
    let n = corrs.len() as f64;
    let centroid = corrs.iter().fold(Vector3::zeros(), |acc, (_, x)| acc + x.coords) / n;
    let mean = corrs.iter().map(|(_, x)| (x.coords - centroid).norm()).sum::<f64>() / n;
    if !(mean > 0.0) {
        return None;
    }
    let s = 3f64.sqrt() / mean;
    let mut t3 = nalgebra::Matrix4::identity() * s;
    t3[(3, 3)] = 1.0;
    for i in 0..3 {
        t3[(i, 3)] = -s * centroid[i];
    }

    let mut a = DMatrix::<f64>::zeros(12, 12);
    for (i, (p, x)) in corrs.iter().enumerate() {
        let u = t2[(0, 0)] * p.x + t2[(0, 2)];
        let v = t2[(1, 1)] * p.y + t2[(1, 2)];
        let xh = t3 * x.to_homogeneous();
        for j in 0..4 {
            a[(2 * i, j)] = xh[j];
            a[(2 * i, 8 + j)] = -u * xh[j];
            a[(2 * i + 1, 4 + j)] = xh[j];
            a[(2 * i + 1, 8 + j)] = -v * xh[j];
        }
    }
    let ata = a.transpose() * &a;
    let p = null_vector_full_pivot(ata)?;
    let p = Matrix3x4::from_row_slice(p.as_slice());
    let p = similarity_inverse(&t2) * p * t3;
    let norm = p.norm();
    (norm > 0.0 && norm.is_finite()).then(|| p / norm)
}

/// Null vector of a square matrix of corank one by Gaussian elimination with complete
/// pivoting; the last pivot column is fixed to one.
fn null_vector_full_pivot(mut m: DMatrix<f64>) -> Option<nalgebra::DVector<f64>> {
    let n = m.nrows();
    let mut cols: Vec<usize> = (0..n).collect();
    let first = m.amax();
    if !(first > 0.0) {
        return None;
    }
    for k in 0..n - 1 {
        let (mut pi, mut pj, mut best) = (k, k, 0.0);
        for i in k..n {
            for j in k..n {
                let v = m[(i, j)].abs();
                if v > best {
                    best = v;
                    pi = i;
                    pj = j;
                }
            }
        }
        if best < 1e-12 * first {
            return None;
        }
        m.swap_rows(k, pi);
        m.swap_columns(k, pj);
        cols.swap(k, pj);
        for i in k + 1..n {
            let factor = m[(i, k)] / m[(k, k)];
            if factor != 0.0 {
                for j in k..n {
                    let v = m[(k, j)];
                    m[(i, j)] -= factor * v;
                }
            }
        }
    }
    let mut y = vec![0.0; n];
    y[n - 1] = 1.0;
    for i in (0..n - 1).rev() {
        let s: f64 = (i + 1..n).map(|j| m[(i, j)] * y[j]).sum();
        y[i] = -s / m[(i, i)];
    }
    let mut x = nalgebra::DVector::zeros(n);
    for (k, &c) in cols.iter().enumerate() {
        x[c] = y[k];
    }
    Some(x)
}
