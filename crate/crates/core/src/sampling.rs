//! Uniform and PROSAC samplers, the score ordering and the termination rule.

use fixedbitset::FixedBitSet;
use rand::seq::index;
use rand::Rng;
use thiserror::Error;

/// Total number of samples after which PROSAC falls back to uniform sampling.
pub const PROSAC_GROWTH_MAX: u64 = 200_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplingError {
    #[error("need at least {needed} points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
}

/// Support of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Score {
    pub inlier_count: usize,
    pub inlier_mask: FixedBitSet,
    pub independent_count: Option<usize>,
    pub residual_sum: Option<f64>,
}

impl Score {
    pub fn from_mask(mask: FixedBitSet) -> Self {
        Self { inlier_count: mask.count_ones(..), inlier_mask: mask, independent_count: None, residual_sum: None }
    }

    pub fn empty(points: usize) -> Self {
        Self::from_mask(FixedBitSet::with_capacity(points))
    }

    pub fn with_residual_sum(mut self, sum: f64) -> Self {
        self.residual_sum = Some(sum);
        self
    }
}

/// `a` beats `b` on inlier count; equal counts fall back to the lower residual sum when
/// both are known. Otherwise ties are not better.
pub fn better(a: &Score, b: &Score) -> bool {
    if a.inlier_count != b.inlier_count {
        return a.inlier_count > b.inlier_count;
    }
    match (a.residual_sum, b.residual_sum) {
        (Some(x), Some(y)) => x < y,
        _ => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Uniform,
    /// Expects points sorted by descending quality.
    Prosac,
}

#[derive(Debug, Clone)]
pub struct Sampler {
    kind: SamplerKind,
    points: usize,
    sample_size: usize,
    t: u64,
    n: usize,
    t_n: f64,
    t_n_prime: f64,
}

impl Sampler {
    pub fn new(kind: SamplerKind, points: usize, sample_size: usize) -> Result<Self, SamplingError> {
        if points < sample_size || sample_size == 0 {
            return Err(SamplingError::InsufficientPoints { needed: sample_size.max(1), got: points });
        }
        let mut t_n = PROSAC_GROWTH_MAX as f64;
        for i in 0..sample_size {
            t_n *= (sample_size - i) as f64 / (points - i) as f64;
        }
        Ok(Self { kind, points, sample_size, t: 0, n: sample_size, t_n, t_n_prime: 1.0 })
    }

    pub fn kind(&self) -> SamplerKind {
        self.kind
    }

    /// Number of samples drawn so far.
    pub fn drawn(&self) -> u64 {
        self.t
    }

    /// Current PROSAC subset size (the top-`n` points sampled from).
    pub fn subset_size(&self) -> usize {
        match self.kind {
            SamplerKind::Uniform => self.points,
            SamplerKind::Prosac => self.n,
        }
    }

    /// Draws `sample_size` distinct indices into `out`.
    pub fn next_sample<R: Rng + ?Sized>(&mut self, rng: &mut R, out: &mut Vec<usize>) {
        out.clear();
        if self.kind == SamplerKind::Uniform || self.t >= PROSAC_GROWTH_MAX {
            self.t += 1;
            out.extend(index::sample(rng, self.points, self.sample_size));
            return;
        }
        self.t += 1;
        let t = self.t as f64;
        if t >= self.t_n_prime && self.n < self.points {
            let m = self.sample_size as f64;
            let next = (self.n + 1) as f64 * self.t_n / (self.n as f64 + 1.0 - m);
            self.t_n_prime += (next - self.t_n).ceil();
            self.t_n = next;
            self.n += 1;
        }
        if self.t_n_prime < t {
            out.extend(index::sample(rng, self.n, self.sample_size));
        } else {
            out.extend(index::sample(rng, self.n - 1, self.sample_size - 1));
            out.push(self.n - 1);
        }
    }
}

/// Iterations needed to hit an all-inlier sample with the given confidence,
/// clamped to `[1, max]`; `max` when fewer inliers than the sample size.
pub fn max_iterations(inliers: usize, points: usize, sample_size: usize, confidence: f64, max: usize) -> usize {
    if inliers < sample_size || points == 0 {
        return max;
    }
    if inliers >= points {
        return 1;
    }
    let w = (inliers as f64 / points as f64).powi(sample_size as i32);
    let denom = (-w).ln_1p();
    if denom >= 0.0 {
        return max;
    }
    let k = ((1.0 - confidence).ln() / denom).ceil();
    if !k.is_finite() || k >= max as f64 {
        max
    } else {
        (k as usize).max(1)
    }
}
