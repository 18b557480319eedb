//! Independent inliers, Poisson model of random support and the non-randomness test.

use fixedbitset::FixedBitSet;
use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::{epipoles, oriented_constraint_ok, oriented_epipole, Correspondence, ModelKind, Residual};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RandomnessError {
    #[error("only {survivors} recorded models remain after overlap filtering, need {needed}")]
    NotEnoughModels { survivors: usize, needed: usize },
}

/// Parameters of the dependency predicates.
#[derive(Debug, Clone)]
pub struct IndependenceContext<'a> {
    pub kind: ModelKind,
    pub model: Matrix3<f64>,
    /// Indices of the minimal sample that produced the model (may be empty).
    pub sample: &'a [usize],
    pub inlier_threshold: f64,
    pub epipole_radius: f64,
    pub spatial_radius: f64,
    pub line_threshold: f64,
}

impl<'a> IndependenceContext<'a> {
    /// Default radii: 10 px around epipoles and neighbours, line threshold = inlier threshold.
    pub fn new(kind: ModelKind, model: Matrix3<f64>, sample: &'a [usize], inlier_threshold: f64) -> Self {
        Self {
            kind,
            model,
            sample,
            inlier_threshold,
            epipole_radius: 10.0,
            spatial_radius: 10.0,
            line_threshold: inlier_threshold,
        }
    }
}

fn finite_point(v: &Vector3<f64>) -> Option<(f64, f64)> {
    (v[2].abs() > 1e-12 * v.norm()).then(|| (v[0] / v[2], v[1] / v[2]))
}

#[inline]
fn line_distance(l: &Vector3<f64>, x: f64, y: f64) -> f64 {
    let g = l[0].hypot(l[1]);
    if g == 0.0 {
        f64::INFINITY
    } else {
        (l[0] * x + l[1] * y + l[2]).abs() / g
    }
}

/// Counts inliers of `mask` that are not explained by the sample, by spatial clusters,
/// and for F by epipole proximity, chirality or shared epipolar lines.
/// Inliers are scanned by ascending residual so each cluster is represented by its
/// lowest-residual member.
pub fn independent_inliers(
    ctx: &IndependenceContext<'_>,
    corrs: &[Correspondence],
    mask: &FixedBitSet,
) -> (usize, FixedBitSet) {
    let mut out = FixedBitSet::with_capacity(corrs.len());
    let Ok(residual) = Residual::for_kind(ctx.kind, &ctx.model) else {
        return (0, out);
    };
    let mut order: Vec<(f64, usize)> = mask.ones().map(|i| (residual.eval(&corrs[i]), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let is_f = ctx.kind != ModelKind::Homography;
    let f = ctx.model;
    let (ep1, ep2, e1_oriented) = if is_f {
        let (e1, e2) = epipoles(&f);
        let reference: Vec<Correspondence> = if ctx.sample.is_empty() {
            mask.ones().map(|i| corrs[i]).collect()
        } else {
            ctx.sample.iter().map(|&i| corrs[i]).collect()
        };
        (finite_point(&e1), finite_point(&e2), oriented_epipole(&f, &reference))
    } else {
        (None, None, Vector3::zeros())
    };

    let r2 = ctx.spatial_radius * ctx.spatial_radius;
    let er2 = ctx.epipole_radius * ctx.epipole_radius;
    let near = |p: Option<(f64, f64)>, x: f64, y: f64| p.is_some_and(|(ex, ey)| (x - ex).powi(2) + (y - ey).powi(2) < er2);

    struct Rep {
        c: Correspondence,
        l1: Vector3<f64>,
        l2: Vector3<f64>,
    }
    // Sample points explain their own neighbourhood and epipolar lines.
    let mut seeds: Vec<Rep> = Vec::new();
    for &i in ctx.sample {
        let Some(c) = corrs.get(i) else { continue };
        let (l1, l2) = if is_f { (f.tr_mul(&c.p2()), f * c.p1()) } else { (Vector3::zeros(), Vector3::zeros()) };
        seeds.push(Rep { c: *c, l1, l2 });
    }
    let mut reps: Vec<Rep> = Vec::new();

    for &(_, i) in &order {
        if ctx.sample.contains(&i) {
            continue;
        }
        let c = &corrs[i];
        if is_f {
            if near(ep1, c.x1, c.y1) || near(ep2, c.x2, c.y2) {
                continue;
            }
            if !oriented_constraint_ok(&f, &e1_oriented, c) {
                continue;
            }
        }
        let clustered = reps.iter().chain(&seeds).any(|r| {
            (c.x1 - r.c.x1).powi(2) + (c.y1 - r.c.y1).powi(2) < r2
                || (c.x2 - r.c.x2).powi(2) + (c.y2 - r.c.y2).powi(2) < r2
        });
        if clustered {
            continue;
        }
        if is_f
            && reps.iter().chain(&seeds).any(|r| {
                line_distance(&r.l1, c.x1, c.y1) < ctx.line_threshold
                    && line_distance(&r.l2, c.x2, c.y2) < ctx.line_threshold
            })
        {
            continue;
        }
        let (l1, l2) = if is_f { (f.tr_mul(&c.p2()), f * c.p1()) } else { (Vector3::zeros(), Vector3::zeros()) };
        reps.push(Rep { c: *c, l1, l2 });
        out.insert(i);
    }
    debug_assert!(reps.len() <= mask.count_ones(..));
    (reps.len(), out)
}

/// Natural log of `k!` by direct summation.
fn ln_factorial(k: u64) -> f64 {
    let mut s = 0.0;
    let mut comp = 0.0;
    for j in 2..=k {
        let y = (j as f64).ln() - comp;
        let t = s + y;
        comp = (t - s) - y;
        s = t;
    }
    s
}

/// Neumaier-compensated sum of pmf terms starting at `from`, walking by `step`.
fn sum_terms(lambda: f64, from: u64, upward: bool, stop_at: u64) -> f64 {
    let ln_l = lambda.ln();
    let mut ln_p = -lambda + from as f64 * ln_l - ln_factorial(from);
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    let mut i = from;
    loop {
        let term = ln_p.exp();
        let t = sum + term;
        if sum.abs() >= term.abs() {
            comp += (sum - t) + term;
        } else {
            comp += (term - t) + sum;
        }
        sum = t;
        if upward {
            if (i as f64) > lambda && term <= 1e-18 * sum {
                break;
            }
            i += 1;
            ln_p += ln_l - (i as f64).ln();
        } else {
            if i == stop_at {
                break;
            }
            ln_p -= ln_l - (i as f64).ln();
            i -= 1;
        }
    }
    sum + comp
}

/// `P(X > k)` for `X ~ Poisson(lambda)`.
pub fn poisson_sf(k: u64, lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    if (k as f64) < lambda {
        return 1.0 - poisson_cdf(k, lambda);
    }
    sum_terms(lambda, k + 1, true, 0).clamp(0.0, 1.0)
}

/// `P(X <= k)` for `X ~ Poisson(lambda)`, evaluated in log space.
pub fn poisson_cdf(k: u64, lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if (k as f64) >= lambda {
        return (1.0 - poisson_sf(k, lambda)).clamp(0.0, 1.0);
    }
    sum_terms(lambda, k, false, 0).clamp(0.0, 1.0)
}

/// Smallest `k` with `poisson_cdf(k, lambda) >= p`.
pub fn poisson_quantile(p: f64, lambda: f64) -> u64 {
    let mut k = 0;
    while poisson_cdf(k, lambda) < p {
        k += 1;
    }
    k
}

/// `PoissonCDF(i_max; lambda)^n >= p`: the best model's independent support is unlikely
/// to be the maximum of `n` random models.
pub fn is_nonrandom(i_max: u64, lambda: f64, n: u64, p: f64) -> bool {
    nonrandom_confidence(i_max, lambda, n) >= p
}

/// `PoissonCDF(i_max; lambda)^n`.
pub fn nonrandom_confidence(i_max: u64, lambda: f64, n: u64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let ln_cdf = if (i_max as f64) >= lambda {
        (-poisson_sf(i_max, lambda)).ln_1p()
    } else {
        poisson_cdf(i_max, lambda).ln()
    };
    (n as f64 * ln_cdf).exp()
}

/// Jaccard similarity of two index sets; 1 when both are empty.
pub fn jaccard(a: &FixedBitSet, b: &FixedBitSet) -> f64 {
    let union = a.union_count(b);
    if union == 0 {
        return 1.0;
    }
    a.intersection_count(b) as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomnessConfig {
    /// Models recorded before the Poisson parameter is estimated.
    pub n_min: usize,
    /// Recorded models with at least this Jaccard overlap with the best model are ignored.
    pub overlap: f64,
    /// Fewer surviving models than this makes the estimate fall back to the plain median.
    pub min_survivors: usize,
    /// The calibrated estimate is the upper confidence bound at this level of the Poisson
    /// mean given the trimmed counts, so a handful of models with little support cannot
    /// make any count look significant. Zero keeps the plain robust mean.
    pub upper_alpha: f64,
}

impl Default for RandomnessConfig {
    fn default() -> Self {
        Self { n_min: 20, overlap: 0.5, min_survivors: 10, upper_alpha: 0.05 }
    }
}

fn trimmed(counts: &[usize]) -> Vec<usize> {
    let mut sorted = counts.to_vec();
    let lambda_tilde = median(&mut sorted);
    let i95 = poisson_quantile(0.95, lambda_tilde) as usize;
    sorted.into_iter().filter(|&c| c <= i95).collect()
}

/// Mean of the counts at or below the Poisson 95th percentile around their median, or
/// `None` for no counts.
pub fn robust_poisson_mean(counts: &[usize]) -> Option<f64> {
    if counts.is_empty() {
        return None;
    }
    let low = trimmed(counts);
    Some(low.iter().sum::<usize>() as f64 / low.len() as f64)
}

/// Upper confidence bound of a Poisson mean from `n` observations summing to `total`:
/// the per-observation mean at which seeing at most `total` has probability `alpha`.
pub fn poisson_upper_bound(total: usize, n: usize, alpha: f64) -> f64 {
    if n == 0 || alpha <= 0.0 {
        return f64::INFINITY;
    }
    let (mut lo, mut hi) = (total as f64, total as f64 + 10.0 * (total as f64 + 1.0).sqrt() + 10.0);
    while poisson_cdf(total as u64, hi) > alpha {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if poisson_cdf(total as u64, mid) > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi) / n as f64
}

/// Independent-inlier counts of the first models of a run and the resulting estimate.
#[derive(Debug, Clone)]
pub struct RandomnessState {
    pub config: RandomnessConfig,
    pub records: Vec<(usize, FixedBitSet)>,
    pub lambda_hat: Option<f64>,
}

fn median(v: &mut [usize]) -> f64 {
    v.sort_unstable();
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

impl RandomnessState {
    pub fn new(config: RandomnessConfig) -> Self {
        Self { config, records: Vec::new(), lambda_hat: None }
    }

    pub fn is_full(&self) -> bool {
        self.records.len() >= self.config.n_min
    }

    pub fn calibrated(&self) -> bool {
        self.lambda_hat.is_some()
    }

    /// Stores a model's independent count while fewer than `n_min` are recorded.
    pub fn record(&mut self, count: usize, mask: FixedBitSet) {
        if !self.is_full() {
            self.records.push((count, mask));
        }
    }

    fn survivors(&self, best_mask: &FixedBitSet) -> Vec<usize> {
        self.records.iter().filter(|(_, m)| jaccard(m, best_mask) < self.config.overlap).map(|(c, _)| *c).collect()
    }

    /// Robust mean of random independent support: overlap filter against `best_mask`,
    /// median, Poisson 95th percentile cut, mean of the rest.
    pub fn estimate_lambda(&self, best_mask: &FixedBitSet) -> Result<f64, RandomnessError> {
        let kept = self.survivors(best_mask);
        if kept.len() < self.config.min_survivors {
            return Err(RandomnessError::NotEnoughModels { survivors: kept.len(), needed: self.config.min_survivors });
        }
        Ok(robust_poisson_mean(&kept).unwrap_or(0.0))
    }

    /// Sets `lambda_hat` from the records that do not overlap `best_mask`. With too few
    /// survivors the same estimate uses whatever survived, and only when every record
    /// overlaps the best model does it fall back to the median of all counts. Returns the
    /// estimate and the number of survivors.
    pub fn calibrate(&mut self, best_mask: &FixedBitSet) -> (f64, usize) {
        let kept = self.survivors(best_mask);
        let lambda = if kept.is_empty() {
            let mut all: Vec<usize> = self.records.iter().map(|(c, _)| *c).collect();
            median(&mut all)
        } else {
            let low = trimmed(&kept);
            let mean = low.iter().sum::<usize>() as f64 / low.len() as f64;
            if self.config.upper_alpha > 0.0 {
                mean.max(poisson_upper_bound(low.iter().sum(), low.len(), self.config.upper_alpha))
            } else {
                mean
            }
        };
        self.lambda_hat = Some(lambda);
        (lambda, kept.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::skew;

    fn state_with(counts: &[usize], masks: Vec<FixedBitSet>, min_survivors: usize) -> RandomnessState {
        let mut s = RandomnessState::new(RandomnessConfig { n_min: counts.len(), overlap: 0.5, min_survivors, upper_alpha: 0.0 });
        for (c, m) in counts.iter().zip(masks) {
            s.record(*c, m);
        }
        s
    }

    fn disjoint_masks(n: usize, universe: usize) -> Vec<FixedBitSet> {
        (0..n)
            .map(|i| {
                let mut m = FixedBitSet::with_capacity(universe);
                m.insert(i);
                m
            })
            .collect()
    }

    #[test]
    fn lambda_with_overlapping_best() {
        let counts = [2, 2, 3, 2, 50, 2, 3];
        let mut masks = disjoint_masks(7, 200);
        let mut best = FixedBitSet::with_capacity(200);
        best.insert_range(100..150);
        masks[4] = best.clone();
        let s = state_with(&counts, masks, 5);
        // Six survivors {2,2,3,2,2,3}: median 2, 95th percentile of Poisson(2) is 5.
        assert_eq!(poisson_quantile(0.95, 2.0), 5);
        let l = s.estimate_lambda(&best).unwrap();
        assert!((l - 14.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn lambda_constant_and_outlier_cut() {
        let best = FixedBitSet::with_capacity(100);
        let s = state_with(&[4; 20], disjoint_masks(20, 100), 20);
        assert_eq!(s.estimate_lambda(&best).unwrap(), 4.0);
        let s = state_with(&[3, 3, 4, 90], disjoint_masks(4, 100), 4);
        assert!((s.estimate_lambda(&best).unwrap() - 10.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_survivors_falls_back_to_median() {
        let mut best = FixedBitSet::with_capacity(10);
        best.insert(0);
        let mut s = state_with(&[1, 5, 9], vec![best.clone(), best.clone(), best.clone()], 2);
        assert!(matches!(s.estimate_lambda(&best), Err(RandomnessError::NotEnoughModels { survivors: 0, .. })));
        assert_eq!(s.calibrate(&best), (5.0, 0));
    }

    #[test]
    fn upper_bound_matches_chi_square() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        assert!((poisson_upper_bound(0, 1, 0.05) + 0.05f64.ln()).abs() < 1e-12);
        assert!((poisson_upper_bound(0, 5, 0.05) + 0.05f64.ln() / 5.0).abs() < 1e-12);
        for (total, n) in [(0, 5), (7, 7), (30, 20), (200, 3)] {
            let chi = ChiSquared::new(2.0 * total as f64 + 2.0).unwrap().inverse_cdf(0.95) / (2.0 * n as f64);
            // The chi-square inverse is only accurate to about 1e-5.
            assert!((poisson_upper_bound(total, n, 0.05) - chi).abs() < 1e-4 * chi, "{total} {n}");
        }
        assert!(poisson_upper_bound(3, 0, 0.05).is_infinite());
    }

    #[test]
    fn partial_survivors_use_upper_bound() {
        let mut best = FixedBitSet::with_capacity(100);
        best.insert(99);
        let mut masks = disjoint_masks(4, 100);
        masks[3] = best.clone();
        let mut s = RandomnessState::new(RandomnessConfig::default());
        for (c, m) in [0, 0, 0, 50].into_iter().zip(masks) {
            s.record(c, m);
        }
        let (l, survivors) = s.calibrate(&best);
        assert_eq!(survivors, 3);
        assert!((l + 0.05f64.ln() / 3.0).abs() < 1e-9);
    }

    #[test]
    fn poisson_values() {
        assert_eq!(poisson_cdf(0, 0.0), 1.0);
        let e = (-1.0f64).exp() * 2.5;
        assert!((poisson_cdf(2, 1.0) - e).abs() < 1e-15);
        let v = poisson_cdf(30, 3.0);
        assert!(v >= 1.0 - 1e-12 && v <= 1.0);
        assert!((poisson_cdf(3, 3.0) - 0.647_231_888_0).abs() < 1e-9);
    }

    #[test]
    fn nonrandom_examples() {
        assert!(is_nonrandom(1, 0.0, 1000, 0.99));
        assert!(!is_nonrandom(3, 3.0, 100, 0.99));
        assert!(is_nonrandom(15, 3.0, 10_000, 0.99));
        let c = nonrandom_confidence(15, 3.0, 10_000);
        // Tail P(X > 15) = 1.2408e-7, so the power is 0.998760.
        assert!((c - 0.998_759_97).abs() < 1e-8, "{c}");
    }

    #[test]
    fn jaccard_values() {
        let mut a = FixedBitSet::with_capacity(30);
        let mut b = FixedBitSet::with_capacity(30);
        assert_eq!(jaccard(&a, &b), 1.0);
        a.insert_range(0..10);
        assert_eq!(jaccard(&a, &a), 1.0);
        b.insert_range(10..20);
        assert_eq!(jaccard(&a, &b), 0.0);
        b.clear();
        b.insert_range(5..15);
        assert!((jaccard(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn sample_only_inliers_are_dependent() {
        let corrs: Vec<_> = (0..4).map(|i| Correspondence::new(i as f64 * 50.0, (i * i) as f64 * 40.0, 0.0, 0.0)).collect();
        let corrs: Vec<_> = corrs.iter().map(|c| Correspondence::new(c.x1, c.y1, c.x1, c.y1)).collect();
        let mut mask = FixedBitSet::with_capacity(4);
        mask.insert_range(..);
        let sample = [0, 1, 2, 3];
        let ctx = IndependenceContext::new(ModelKind::Homography, Matrix3::identity(), &sample, 2.5);
        assert_eq!(independent_inliers(&ctx, &corrs, &mask).0, 0);
        let ctx = IndependenceContext::new(ModelKind::Homography, Matrix3::identity(), &[], 2.5);
        assert_eq!(independent_inliers(&ctx, &corrs, &mask).0, 4);
    }

    #[test]
    fn spatial_cluster_counts_once() {
        let mut corrs: Vec<_> =
            (0..10).map(|i| Correspondence::new(100.0 * i as f64, 30.0, 100.0 * i as f64, 30.0)).collect();
        corrs.push(Correspondence::new(3.0, 33.0, 3.0, 33.0));
        corrs.push(Correspondence::new(1.0, 30.5, 1.0, 30.5));
        let mut mask = FixedBitSet::with_capacity(corrs.len());
        mask.insert_range(..);
        let ctx = IndependenceContext::new(ModelKind::Homography, Matrix3::identity(), &[], 2.5);
        let (n, m) = independent_inliers(&ctx, &corrs, &mask);
        assert_eq!(n, 10);
        assert!(m.contains(0));
        let (n2, m2) = independent_inliers(&ctx, &corrs, &m);
        assert_eq!((n2, m2), (n, m));
    }

    #[test]
    fn shared_epipolar_lines_count_once() {
        // Sideways translation: epipolar lines are image rows, epipoles at infinity.
        let f = skew(&Vector3::new(1.0, 0.0, 0.0));
        let mut corrs = Vec::new();
        for i in 0..20 {
            let x = 20.0 + 30.0 * i as f64;
            corrs.push(Correspondence::new(x, 500.0, x - 8.0, 500.0));
        }
        for j in 0..5 {
            let y = 40.0 + 80.0 * j as f64;
            let x = 50.0 + 111.0 * j as f64;
            corrs.push(Correspondence::new(x, y, x - 8.0, y));
        }
        let mut mask = FixedBitSet::with_capacity(corrs.len());
        mask.insert_range(..);
        let ctx = IndependenceContext::new(ModelKind::Fundamental, f, &[], 1.5);
        assert_eq!(independent_inliers(&ctx, &corrs, &mask).0, 6);
    }
}
