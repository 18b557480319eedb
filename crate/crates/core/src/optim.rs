//! Light-weight local optimization and the final least-squares polish.

use fixedbitset::FixedBitSet;
use nalgebra::Matrix3;
use rand::seq::index;
use rand::Rng;

use crate::geometry::{normalize_points, Correspondence, ModelKind, Residual};
use crate::randomness::jaccard;
use crate::sampling::{better, max_iterations, Score};
use crate::solvers::{accumulate, min_lsq_points, model_from_ata, solve_lsq, Matrix9};

/// Jaccard similarity above which a new best model is too close to the previous one to
/// be worth optimizing.
pub const LO_JACCARD_MAX: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoParams {
    pub sample_size: usize,
    pub max_iters: usize,
}

impl LoParams {
    /// 32 points and 10 iterations for H, 21 points and 20 iterations for F.
    pub fn for_kind(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Homography => Self { sample_size: 32, max_iters: 10 },
            _ => Self { sample_size: 21, max_iters: 20 },
        }
    }
}

/// Local optimization runs only for models with enough independent inliers whose
/// inliers differ from the previous best.
pub fn should_run_lo(new_score: &Score, prev_best_mask: &FixedBitSet, i_delta: usize) -> bool {
    new_score.independent_count.is_some_and(|n| n >= i_delta) && jaccard(&new_score.inlier_mask, prev_best_mask) < LO_JACCARD_MAX
}

/// Scores a pixel-space model on all correspondences.
pub fn score_model(kind: ModelKind, m: &Matrix3<f64>, corrs: &[Correspondence], threshold: f64) -> Option<Score> {
    let res = Residual::for_kind(kind, m).ok()?;
    let mut mask = FixedBitSet::with_capacity(corrs.len());
    let mut sum = 0.0;
    for (i, c) in corrs.iter().enumerate() {
        let r = res.eval(c);
        if r < threshold {
            mask.insert(i);
            sum += r;
        }
    }
    Some(Score::from_mask(mask).with_residual_sum(sum))
}

/// Non-minimal fits are rejected when finite checks fail or a homography flips the
/// orientation of part of its own fitting set.
fn lo_model_ok(kind: ModelKind, m: &Matrix3<f64>, subset: &[Correspondence]) -> bool {
    if !m.iter().all(|v| v.is_finite()) {
        return false;
    }
    if kind != ModelKind::Homography {
        return true;
    }
    let (mut pos, mut neg) = (false, false);
    for c in subset {
        let z = (m * c.p1())[2];
        pos |= z > 0.0;
        neg |= z < 0.0;
    }
    !(pos && neg)
}

#[derive(Debug, Clone)]
pub struct LoResult {
    /// Best LO model, `None` when no LO model beat the input.
    pub model: Option<Matrix3<f64>>,
    pub score: Score,
    /// Iteration bound from the largest inlier count of any LO model.
    pub max_iterations: usize,
    /// LO models that were scored.
    pub scored: usize,
}

/// Iteration bound inputs shared by LO and the main loop.
#[derive(Debug, Clone, Copy)]
pub struct Termination {
    pub sample_size: usize,
    pub confidence: f64,
    pub max_iterations: usize,
}

/// Repeatedly refits on random subsets of the current best inliers.
#[allow(clippy::too_many_arguments)]
pub fn local_optimize<R: Rng + ?Sized>(
    best_score: &Score,
    params: LoParams,
    corrs: &[Correspondence],
    threshold: f64,
    kind: ModelKind,
    term: Termination,
    rng: &mut R,
) -> LoResult {
    let mut best: Option<Matrix3<f64>> = None;
    let mut score = best_score.clone();
    let mut i_max = best_score.inlier_count;
    let mut subset: Vec<Correspondence> = Vec::with_capacity(params.sample_size);
    let min_pts = min_lsq_points(kind);
    let mut scored = 0;
    for _ in 0..params.max_iters {
        let inliers: Vec<usize> = score.inlier_mask.ones().collect();
        let size = inliers.len().min(params.sample_size);
        if size < min_pts {
            break;
        }
        subset.clear();
        subset.extend(index::sample(rng, inliers.len(), size).into_iter().map(|k| corrs[inliers[k]]));
        let ones = vec![1.0; subset.len()];
        let Some(m) = solve_lsq(&subset, &ones, kind) else { continue };
        if !lo_model_ok(kind, &m, &subset) {
            continue;
        }
        let Some(s) = score_model(kind, &m, corrs, threshold) else { continue };
        scored += 1;
        i_max = i_max.max(s.inlier_count);
        if better(&s, &score) {
            score = s;
            best = Some(m);
        }
    }
    let points = corrs.len();
    LoResult {
        model: best,
        score,
        max_iterations: max_iterations(i_max, points, term.sample_size, term.confidence, term.max_iterations),
        scored,
    }
}

/// Per-iteration record of a polish run.
#[derive(Debug, Clone)]
pub struct PolishTrace {
    /// Model after each iteration; entry 0 is the input.
    pub models: Vec<Matrix3<f64>>,
    /// How many times a normalizing transform was computed.
    pub normalization_passes: usize,
}

#[derive(Debug, Clone)]
pub struct PolishResult {
    pub model: Matrix3<f64>,
    pub score: Score,
    pub trace: PolishTrace,
}

/// Running normal-equation matrix over the active inliers, in a fixed normalized frame.
#[derive(Debug, Clone)]
pub struct PolishAccumulator {
    pub kind: ModelKind,
    pub ata: Matrix9,
    pub active: FixedBitSet,
}

impl PolishAccumulator {
    pub fn new(kind: ModelKind, points: usize) -> Self {
        Self { kind, ata: Matrix9::zeros(), active: FixedBitSet::with_capacity(points) }
    }

    /// Adds rows of newly selected points and removes rows of dropped ones.
    pub fn update(&mut self, norm: &[Correspondence], mask: &FixedBitSet) {
        let added: Vec<usize> = mask.difference(&self.active).collect();
        let removed: Vec<usize> = self.active.difference(mask).collect();
        for i in added {
            accumulate(&mut self.ata, self.kind, &norm[i], 1.0);
        }
        for i in removed {
            accumulate(&mut self.ata, self.kind, &norm[i], -1.0);
        }
        self.active = mask.clone();
    }

    /// The matrix rebuilt from scratch for the current active set.
    pub fn rebuilt(&self, norm: &[Correspondence]) -> Matrix9 {
        let mut ata = Matrix9::zeros();
        for i in self.active.ones() {
            accumulate(&mut ata, self.kind, &norm[i], 1.0);
        }
        ata
    }
}

fn unit(m: Matrix3<f64>) -> Option<Matrix3<f64>> {
    let n = m.norm();
    (n > 0.0 && n.is_finite()).then(|| m / n)
}

fn rescored(kind: ModelKind, m: &Matrix3<f64>, corrs: &[Correspondence], threshold: f64) -> Score {
    score_model(kind, m, corrs, threshold).unwrap_or_else(|| Score::empty(corrs.len()))
}

/// Iterated least squares with inlier reselection. Points are normalized once and the
/// normal equations are updated incrementally as the inlier set changes.
pub fn final_polish(
    model: &Matrix3<f64>,
    corrs: &[Correspondence],
    threshold: f64,
    iters: usize,
    kind: ModelKind,
) -> PolishResult {
    let mut trace = PolishTrace { models: vec![*model], normalization_passes: 0 };
    let mut current = *model;
    if iters > 0 {
        if let Ok((norm, tr)) = normalize_points(corrs) {
            trace.normalization_passes = 1;
            let mut acc = PolishAccumulator::new(kind, corrs.len());
            for _ in 0..iters {
                let mask = rescored(kind, &current, corrs, threshold).inlier_mask;
                if mask.count_ones(..) < min_lsq_points(kind) {
                    break;
                }
                acc.update(&norm, &mask);
                let Some(mn) = model_from_ata(&acc.ata, kind) else { break };
                let m = match kind {
                    ModelKind::Homography => tr.denormalize_h(&mn),
                    _ => tr.denormalize_f(&mn),
                };
                let Some(m) = unit(m) else { break };
                current = m;
                trace.models.push(current);
            }
        }
    }
    let score = rescored(kind, &current, corrs, threshold);
    PolishResult { model: current, score, trace }
}

/// Reference polish that renormalizes the current inliers and rebuilds the normal
/// equations every iteration.
pub fn final_polish_renormalizing(
    model: &Matrix3<f64>,
    corrs: &[Correspondence],
    threshold: f64,
    iters: usize,
    kind: ModelKind,
) -> PolishResult {
    let mut trace = PolishTrace { models: vec![*model], normalization_passes: 0 };
    let mut current = *model;
    for _ in 0..iters {
        let mask = rescored(kind, &current, corrs, threshold).inlier_mask;
        if mask.count_ones(..) < min_lsq_points(kind) {
            break;
        }
        let weights: Vec<f64> = (0..corrs.len()).map(|i| if mask.contains(i) { 1.0 } else { 0.0 }).collect();
        trace.normalization_passes += 1;
        let Some(m) = solve_lsq(corrs, &weights, kind) else { break };
        current = m;
        trace.models.push(current);
    }
    let score = rescored(kind, &current, corrs, threshold);
    PolishResult { model: current, score, trace }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(n: usize, ones: impl IntoIterator<Item = usize>) -> FixedBitSet {
        let mut m = FixedBitSet::with_capacity(n);
        for i in ones {
            m.insert(i);
        }
        m
    }

    fn scored(m: FixedBitSet, independent: usize) -> Score {
        Score { independent_count: Some(independent), ..Score::from_mask(m) }
    }

    #[test]
    fn lo_gate() {
        let prev = mask(40, 0..10);
        assert!(!should_run_lo(&scored(mask(40, 20..30), 7), &prev, 8));
        assert!(!should_run_lo(&scored(prev.clone(), 50), &prev, 8));
        let other = mask(40, (0..3).chain(20..30));
        assert!(should_run_lo(&scored(other, 13), &prev, 8));
        assert!(!should_run_lo(&Score::from_mask(mask(40, 20..30)), &prev, 0));
    }

    fn grid_h(h: &Matrix3<f64>) -> Vec<Correspondence> {
        let mut v = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                let (x, y) = (50.0 + 90.0 * i as f64, 40.0 + 70.0 * j as f64);
                let p = h * nalgebra::Vector3::new(x, y, 1.0);
                v.push(Correspondence::new(x, y, p[0] / p[2], p[1] / p[2]));
            }
        }
        v
    }

    #[test]
    fn polish_zero_iterations_rescores() {
        let h = Matrix3::new(1.0, 0.02, 5.0, -0.01, 0.98, -3.0, 1e-5, 0.0, 1.0);
        let corrs = grid_h(&h);
        let r = final_polish(&h, &corrs, 2.5, 0, ModelKind::Homography);
        assert_eq!(r.model, h);
        assert_eq!(r.score.inlier_count, corrs.len());
        assert_eq!(r.trace.normalization_passes, 0);
    }

    #[test]
    fn incremental_matches_rebuilt() {
        let h = Matrix3::new(1.0, 0.02, 5.0, -0.01, 0.98, -3.0, 1e-5, 0.0, 1.0);
        let corrs = grid_h(&h);
        let (norm, _) = normalize_points(&corrs).unwrap();
        let mut acc = PolishAccumulator::new(ModelKind::Homography, corrs.len());
        for m in [mask(36, 0..20), mask(36, 10..36), mask(36, (0..36).step_by(3))] {
            acc.update(&norm, &m);
            let rebuilt = acc.rebuilt(&norm);
            assert!((acc.ata - rebuilt).norm() <= 1e-8 * rebuilt.norm().max(1.0));
            assert!((acc.ata - acc.ata.transpose()).norm() < 1e-9);
        }
    }
}
