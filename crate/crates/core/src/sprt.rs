//! Adaptive sequential probability ratio test for model verification.

use fixedbitset::FixedBitSet;

use crate::geometry::{Correspondence, Residual};

/// Upper 99.99% point of the standard normal used for the minimal non-random support.
const Z_9999: f64 = 3.719;

/// Where solver and verification costs come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SprtTiming {
    /// Wall-clock measurements from the first iterations of the run.
    Measured,
    /// Model estimation costs `model_cost` point verifications and the SPRT bookkeeping
    /// makes each verified point `overhead` times slower. Keeps runs reproducible.
    Fixed { model_cost: f64, overhead: f64 },
}

/// Statistics gathered before the test is calibrated.
#[derive(Debug, Clone, Default)]
pub struct SprtMeasurements {
    /// Mean seconds (or cost units) per minimal solver call.
    pub solver_time: f64,
    /// Mean seconds (or cost units) per point verification without the test.
    pub verify_time: f64,
    /// Mean valid models per sample.
    pub models_per_sample: f64,
    pub lambda_hat: f64,
    pub points: usize,
    /// Inlier count of the best model so far.
    pub best_inliers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SprtState {
    /// Model estimation time in units of one point verification.
    pub t_m: f64,
    pub m_s: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub a: f64,
    pub t_v: f64,
    pub t_v_w: f64,
    /// Average number of points verified per model under the test.
    pub e_w_t: f64,
    pub alpha: f64,
    pub enabled: bool,
    points: usize,
    i_delta: usize,
    delta_sum: f64,
    delta_obs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOutcome {
    pub accepted: bool,
    pub tested: usize,
    pub inlier_count: usize,
    pub mask: FixedBitSet,
    /// Sum of inlier residuals, complete only when accepted.
    pub residual_sum: f64,
}

/// Minimal number of independent inliers a non-random model is expected to have.
pub fn compute_i_delta(lambda_hat: f64, delta0: f64) -> usize {
    if lambda_hat <= 0.0 {
        return 0;
    }
    (lambda_hat + Z_9999 * (lambda_hat * (1.0 - delta0)).sqrt()).ceil() as usize
}

/// Wald decision threshold from the optimal-threshold recurrence `A = K1 + 1 + ln A`,
/// `K1 = t_M C / m_S`.
pub fn decision_threshold(delta: f64, epsilon: f64, t_m: f64, m_s: f64) -> f64 {
    let c = (1.0 - delta) * ((1.0 - delta) / (1.0 - epsilon)).ln() + delta * (delta / epsilon).ln();
    let k1 = t_m * c / m_s.max(1e-9);
    let mut a = k1 + 1.0;
    for _ in 0..100 {
        let next = k1 + 1.0 + a.ln();
        let done = (next - a).abs() < 1e-6;
        a = next;
        if done {
            break;
        }
    }
    a.max(1.0 + 1e-9)
}

impl SprtState {
    /// A disabled state: `verify` counts every point.
    pub fn disabled(points: usize) -> Self {
        Self {
            t_m: 0.0,
            m_s: 1.0,
            delta: 0.0,
            epsilon: 0.0,
            a: f64::INFINITY,
            t_v: 0.0,
            t_v_w: 0.0,
            e_w_t: points as f64,
            alpha: 0.0,
            enabled: false,
            points,
            i_delta: 0,
            delta_sum: 0.0,
            delta_obs: 0,
        }
    }

    /// Explicit parameters, mostly for tests.
    pub fn with_parameters(points: usize, delta: f64, epsilon: f64, a: f64) -> Self {
        Self { delta, epsilon, a, alpha: 1.0 / a, enabled: true, ..Self::disabled(points) }
    }

    fn clamp_probabilities(&mut self) {
        let t = self.points.max(1) as f64;
        self.delta = self.delta.clamp(1.0 / t, 0.95);
        self.epsilon = self.epsilon.max(self.delta + 1.0 / t).min(0.999);
    }

    fn refresh_threshold(&mut self) {
        self.a = decision_threshold(self.delta, self.epsilon, self.t_m, self.m_s);
        self.alpha = 1.0 / self.a;
    }

    /// New so-far-the-best model with `best_inliers` inliers.
    pub fn update_epsilon(&mut self, best_inliers: usize) {
        let t = self.points.max(1) as f64;
        self.epsilon = self.i_delta.max(best_inliers) as f64 / t;
        self.clamp_probabilities();
        self.refresh_threshold();
    }

    /// Inlier fraction of a fully verified model that did not become the best.
    /// The probability for bad models follows the running mean when it drifts by more than 5%.
    pub fn observe_bad_model(&mut self, inlier_fraction: f64) {
        self.delta_sum += inlier_fraction;
        self.delta_obs += 1;
        if !self.enabled || self.delta_obs < 10 {
            return;
        }
        let mean = self.delta_sum / self.delta_obs as f64;
        if (mean - self.delta).abs() > 0.05 * self.delta {
            self.delta = mean;
            self.clamp_probabilities();
            self.refresh_threshold();
        }
    }

    pub fn i_delta(&self) -> usize {
        self.i_delta
    }
}

/// Initial test parameters from the first iterations of a run.
pub fn calibrate(m: &SprtMeasurements) -> SprtState {
    let t = m.points.max(1) as f64;
    let delta = (m.lambda_hat / t).clamp(1.0 / t, 0.95);
    let i_delta = compute_i_delta(m.lambda_hat, delta);
    let t_m = if m.verify_time > 0.0 { m.solver_time / m.verify_time } else { 0.0 };
    let mut s = SprtState {
        t_m,
        m_s: if m.models_per_sample > 0.0 { m.models_per_sample } else { 1.0 },
        delta,
        epsilon: i_delta.max(m.best_inliers) as f64 / t,
        a: 0.0,
        t_v: m.verify_time,
        t_v_w: m.verify_time,
        e_w_t: t,
        alpha: 0.0,
        enabled: true,
        points: m.points,
        i_delta,
        delta_sum: 0.0,
        delta_obs: 0,
    };
    s.clamp_probabilities();
    s.refresh_threshold();
    s
}

/// Scores `residual` on `corrs` in the order given by `order`, stopping early when the
/// likelihood ratio exceeds the threshold.
pub fn verify(
    residual: &Residual,
    corrs: &[Correspondence],
    state: &SprtState,
    threshold: f64,
    order: &[usize],
) -> VerifyOutcome {
    let mut mask = FixedBitSet::with_capacity(corrs.len());
    let mut inliers = 0usize;
    let mut sum = 0.0;
    if !state.enabled {
        for (i, c) in corrs.iter().enumerate() {
            let r = residual.eval(c);
            if r < threshold {
                mask.insert(i);
                inliers += 1;
                sum += r;
            }
        }
        return VerifyOutcome { accepted: true, tested: corrs.len(), inlier_count: inliers, mask, residual_sum: sum };
    }
    let good = state.delta / state.epsilon;
    let bad = (1.0 - state.delta) / (1.0 - state.epsilon);
    let mut lambda = 1.0;
    for (j, &idx) in order.iter().enumerate() {
        let r = residual.eval(&corrs[idx]);
        if r < threshold {
            mask.insert(idx);
            inliers += 1;
            sum += r;
            lambda *= good;
        } else {
            lambda *= bad;
            if lambda > state.a {
                return VerifyOutcome { accepted: false, tested: j + 1, inlier_count: inliers, mask, residual_sum: sum };
            }
        }
    }
    VerifyOutcome { accepted: true, tested: order.len(), inlier_count: inliers, mask, residual_sum: sum }
}

/// Whether preemptive verification is expected to be faster than plain counting.
pub fn sprt_worthwhile(state: &SprtState, points: usize) -> bool {
    if !(state.t_v > 0.0) {
        return false;
    }
    state.t_v_w * state.e_w_t / (1.0 - state.alpha) < state.t_v * points as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;

    #[test]
    fn i_delta_examples() {
        assert_eq!(compute_i_delta(0.0, 0.3), 0);
        assert_eq!(compute_i_delta(4.0, 0.01), 12);
        assert_eq!(compute_i_delta(100.0, 0.5), 127);
    }

    fn measured(lambda: f64, points: usize, best: usize) -> SprtMeasurements {
        SprtMeasurements { solver_time: 200.0, verify_time: 1.0, models_per_sample: 1.0, lambda_hat: lambda, points, best_inliers: best }
    }

    #[test]
    fn calibration_chain() {
        let s = calibrate(&measured(2.0, 1000, 300));
        assert!((s.delta - 0.002).abs() < 1e-15);
        assert_eq!(s.i_delta(), 8);
        assert!((s.epsilon - 0.3).abs() < 1e-15);
        let s = calibrate(&measured(5.0, 100, 0));
        assert_eq!(s.i_delta(), 14);
        assert!((s.epsilon - 0.14).abs() < 1e-15);
        let s = calibrate(&measured(0.0, 100, 0));
        assert!((s.delta - 0.01).abs() < 1e-15);
        assert!(s.epsilon > s.delta && s.a > 1.0);
        assert!((s.t_m - 200.0).abs() < 1e-12);
    }

    #[test]
    fn threshold_is_fixed_point() {
        let a = decision_threshold(0.05, 0.4, 200.0, 2.0);
        let c = 0.95 * (0.95f64 / 0.6).ln() + 0.05 * (0.05f64 / 0.4).ln();
        let k1 = 200.0 * c / 2.0;
        assert!((a - (k1 + 1.0 + a.ln())).abs() < 1e-5);
    }

    fn outliers(n: usize) -> Vec<Correspondence> {
        (0..n).map(|i| Correspondence::new(i as f64, 0.0, i as f64 + 100.0, 0.0)).collect()
    }

    #[test]
    fn outlier_stream_is_rejected_at_replayed_index() {
        let corrs = outliers(20);
        let order: Vec<usize> = (0..20).collect();
        let res = Residual::homography(&Matrix3::identity()).unwrap();
        let state = SprtState::with_parameters(20, 0.05, 0.5, 100.0);
        let out = verify(&res, &corrs, &state, 2.5, &order);
        assert!(!out.accepted);
        let mut l = 1.0;
        let mut expect = 0;
        for j in 1..=20 {
            l *= 0.95 / 0.5;
            if l > 100.0 {
                expect = j;
                break;
            }
        }
        assert_eq!(out.tested, expect);
        assert_eq!(out.tested, 8);
    }

    #[test]
    fn all_inliers_are_accepted() {
        let corrs: Vec<_> = (0..50).map(|i| Correspondence::new(i as f64, 1.0, i as f64, 1.0)).collect();
        let order: Vec<usize> = (0..50).rev().collect();
        let res = Residual::homography(&Matrix3::identity()).unwrap();
        let state = SprtState::with_parameters(50, 0.01, 0.9, 50.0);
        let out = verify(&res, &corrs, &state, 2.5, &order);
        assert!(out.accepted);
        assert_eq!(out.tested, 50);
        assert_eq!(out.inlier_count, 50);
        let off = verify(&res, &outliers(30), &SprtState::disabled(30), 2.5, &[]);
        assert!(off.accepted && off.tested == 30 && off.inlier_count == 0);
    }

    #[test]
    fn worthwhile_rule() {
        let mut s = SprtState::with_parameters(1000, 0.05, 0.5, 20.0);
        s.alpha = 0.05;
        s.t_v = 1.0;
        s.t_v_w = 1.0;
        s.e_w_t = 100.0;
        assert!(sprt_worthwhile(&s, 1000));
        s.e_w_t = 1000.0;
        assert!(!sprt_worthwhile(&s, 1000));
        s.t_v = 0.0;
        assert!(!sprt_worthwhile(&s, 1000));
    }
}
