//! The estimation loop: sampling, minimal solvers, preemptive verification, the
//! randomness test, degeneracy handling, local optimization and the final polish.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use fixedbitset::FixedBitSet;
use nalgebra::Matrix3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::correction::{correct_pair_f, correct_pair_h, rank_inliers, sqrt_homography, CorrectedPair};
use crate::degeneracy::{degensac_plus, off_plane_support, DegeneracyStatus, DegensacInput, PLANE_THRESHOLD_SCALE};
use crate::geometry::{oriented_epipole, orientation_consistent, Calibration, Correspondence, ErrorMetric, Model, ModelKind, Residual};
use crate::optim::{final_polish, local_optimize, should_run_lo, LoParams, Termination};
use crate::randomness::{independent_inliers, nonrandom_confidence, IndependenceContext, RandomnessConfig, RandomnessState};
use crate::sampling::{better, max_iterations, Sampler, SamplerKind, Score};
use crate::solvers::{solve_f_7pt, solve_h_4pt};
use crate::sprt::{calibrate, compute_i_delta, sprt_worthwhile, verify, SprtMeasurements, SprtState, SprtTiming};

/// Models verified under the provisional test before deciding whether it pays off.
const SPRT_PROBE: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("need at least {needed} correspondences, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("model kind {0:?} is not estimated from point pairs")]
    UnsupportedKind(ModelKind),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VsacConfig {
    pub kind: ModelKind,
    pub threshold: f64,
    pub confidence: f64,
    pub max_iterations: usize,
    pub sampler: SamplerKind,
    pub calibration: Option<Calibration>,
    /// `(w1, h1, w2, h2)`, used to guess intrinsics; the point extent otherwise.
    pub image_sizes: Option<(f64, f64, f64, f64)>,
    /// `None` disables local optimization.
    pub lo: Option<LoParams>,
    pub polish_iters: usize,
    pub nonrandomness_p: f64,
    /// Reject results whose support is explained by chance.
    pub randomness_test: bool,
    /// Count only independent inliers in the randomness test.
    pub remove_dependent: bool,
    pub randomness: RandomnessConfig,
    pub sprt: bool,
    pub sprt_timing: SprtTiming,
    pub degensac: bool,
    pub correct_points: bool,
    pub thread_count: usize,
    pub rng_seed: u64,
}

impl VsacConfig {
    pub fn new(kind: ModelKind) -> Self {
        let h = kind == ModelKind::Homography;
        Self {
            kind,
            threshold: if h { 2.5 } else { 1.5 },
            confidence: 0.99,
            max_iterations: if h { 3000 } else { 5000 },
            sampler: SamplerKind::Uniform,
            calibration: None,
            image_sizes: None,
            lo: Some(LoParams::for_kind(kind)),
            polish_iters: 4,
            nonrandomness_p: 0.9999,
            randomness_test: true,
            remove_dependent: true,
            randomness: RandomnessConfig::default(),
            sprt: true,
            sprt_timing: fixed_timing(kind),
            degensac: true,
            correct_points: false,
            thread_count: 1,
            rng_seed: 0,
        }
    }

    /// Textbook RANSAC: uniform sampling, full verification, no LO, no polish, no
    /// randomness or degeneracy checks.
    pub fn plain(kind: ModelKind) -> Self {
        Self {
            lo: None,
            polish_iters: 0,
            randomness_test: false,
            sprt: false,
            degensac: false,
            ..Self::new(kind)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if !matches!(self.kind, ModelKind::Homography | ModelKind::Fundamental) {
            return Err(EngineError::UnsupportedKind(self.kind));
        }
        let bad = |m: &str| Err(EngineError::InvalidConfig(m.to_string()));
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return bad("threshold must be positive");
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return bad("confidence must lie in (0, 1)");
        }
        if !(self.nonrandomness_p > 0.0 && self.nonrandomness_p < 1.0) {
            return bad("non-randomness confidence must lie in (0, 1)");
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be positive");
        }
        if let Some(lo) = self.lo {
            if lo.sample_size < self.kind.sample_size() {
                return bad("LO sample size is below the minimal sample size");
            }
        }
        Ok(())
    }
}

/// Reproducible cost model: minimal-solver cost in point verifications, and the
/// slowdown of one verified point under the test.
pub fn fixed_timing(kind: ModelKind) -> SprtTiming {
    let model_cost = match kind {
        ModelKind::Homography => 200.0,
        ModelKind::Projection => 150.0,
        _ => 250.0,
    };
    SprtTiming::Fixed { model_cost, overhead: 1.05 }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Success,
    RejectedRandom,
    PureRotation,
    NoModel,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EstimationStats {
    pub iterations: usize,
    /// Hypotheses whose verification started, including LO and degeneracy recovery models.
    pub models_scored: usize,
    pub lo_runs: usize,
    pub degensac_runs: usize,
    /// So-far-the-best updates from minimal samples.
    pub best_updates: usize,
    pub sprt_rejections: usize,
    pub sprt_used: bool,
    pub wall_time: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationReport {
    /// Best model; also filled for `RejectedRandom` so it can be inspected.
    pub model: Option<Model>,
    pub inlier_mask: FixedBitSet,
    pub inlier_count: usize,
    /// Every point with its residual, inliers first, each group by increasing residual.
    pub ranked_points: Vec<(usize, f64)>,
    /// Corrected inliers in ranking order, when requested.
    pub corrected_points: Vec<CorrectedPair>,
    /// Probability that an all-inlier sample was drawn.
    pub confidence_best_model: f64,
    /// Probability that no random model reaches the best independent support.
    pub confidence_nonrandom: f64,
    pub independent_inliers: usize,
    pub lambda_hat: Option<f64>,
    pub degeneracy: Option<DegeneracyStatus>,
    pub verdict: Verdict,
    pub stats: EstimationStats,
}

impl EstimationReport {
    /// Copy with the wall time cleared, for comparing runs.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.stats.wall_time = Duration::ZERO;
        r
    }

    fn empty(points: usize, verdict: Verdict, stats: EstimationStats) -> Self {
        Self {
            model: None,
            inlier_mask: FixedBitSet::with_capacity(points),
            inlier_count: 0,
            ranked_points: Vec::new(),
            corrected_points: Vec::new(),
            confidence_best_model: 0.0,
            confidence_nonrandom: 0.0,
            independent_inliers: 0,
            lambda_hat: None,
            degeneracy: None,
            verdict,
            stats,
        }
    }
}

#[derive(Debug, Clone)]
struct Best {
    model: Matrix3<f64>,
    score: Score,
    /// Minimal sample of the model or of the hypothesis it was derived from.
    sample: Vec<usize>,
    /// True when `model` was solved from `sample` itself.
    minimal: bool,
    /// Dominant plane of a model recovered from a degenerate sample. Its inliers are
    /// explained by the plane and do not count as independent support.
    plane: Option<Matrix3<f64>>,
}

/// State shared by parallel workers: an iteration counter, a stop flag and the best
/// inlier count.
struct Shared {
    iterations: AtomicUsize,
    stop: AtomicBool,
    best_count: AtomicUsize,
    prosac: Option<Mutex<(Sampler, ChaCha8Rng)>>,
}

struct Problem<'a> {
    data: Vec<Correspondence>,
    /// `data[i] = input[perm[i]]`.
    perm: Vec<usize>,
    order: Vec<usize>,
    cfg: &'a VsacConfig,
}

impl Problem<'_> {
    fn to_input_mask(&self, mask: &FixedBitSet) -> FixedBitSet {
        let mut out = FixedBitSet::with_capacity(mask.len());
        for i in mask.ones() {
            out.insert(self.perm[i]);
        }
        out
    }
}

struct Outcome {
    best: Option<Best>,
    i_max: usize,
    randomness: RandomnessState,
    pure_rotation: Option<Matrix3<f64>>,
    degeneracy: Option<DegeneracyStatus>,
    stats: EstimationStats,
    /// Some hypothesis passed verification, even if none survived as the best model.
    verified: bool,
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn minimal_models(kind: ModelKind, sample: &[Correspondence]) -> Vec<Matrix3<f64>> {
    match kind {
        ModelKind::Homography => solve_h_4pt(sample)
            .filter(|h| {
                let (mut pos, mut neg) = (false, false);
                for c in sample {
                    let z = (h * c.p1())[2];
                    pos |= z > 0.0;
                    neg |= z < 0.0;
                }
                !(pos && neg)
            })
            .into_iter()
            .collect(),
        _ => solve_f_7pt(sample).into_iter().filter(|f| orientation_consistent(f, sample)).collect(),
    }
}

struct Worker<'p, 'a> {
    p: &'p Problem<'a>,
    shared: Option<&'p Shared>,
    rng: ChaCha8Rng,
    rng_lo: ChaCha8Rng,
    rng_deg: ChaCha8Rng,
    sampler: Option<Sampler>,
    randomness: RandomnessState,
    sprt: SprtState,
    sprt_active: bool,
    probe: Option<(usize, usize, Duration)>,
    i_delta: usize,
    best: Option<Best>,
    i_max: usize,
    bound: usize,
    pure_rotation: Option<Matrix3<f64>>,
    degeneracy: Option<DegeneracyStatus>,
    stats: EstimationStats,
    verified: bool,
    samples_drawn: usize,
    valid_models: usize,
    solver_time: Duration,
    verify_time: Duration,
    verified_points: usize,
}

impl<'p, 'a> Worker<'p, 'a> {
    fn new(p: &'p Problem<'a>, shared: Option<&'p Shared>, worker: u64) -> Self {
        let cfg = p.cfg;
        let t = p.data.len();
        let sampler = if shared.is_some_and(|s| s.prosac.is_some()) {
            None
        } else {
            Some(Sampler::new(cfg.sampler, t, cfg.kind.sample_size()).expect("point count checked"))
        };
        Self {
            p,
            shared,
            rng: rng_stream(cfg.rng_seed, 4 * worker),
            rng_lo: rng_stream(cfg.rng_seed, 4 * worker + 1),
            rng_deg: rng_stream(cfg.rng_seed, 4 * worker + 2),
            sampler,
            randomness: RandomnessState::new(cfg.randomness.clone()),
            sprt: SprtState::disabled(t),
            sprt_active: false,
            probe: None,
            i_delta: 0,
            best: None,
            i_max: 0,
            bound: cfg.max_iterations,
            pure_rotation: None,
            verified: false,
            degeneracy: None,
            stats: EstimationStats::default(),
            samples_drawn: 0,
            valid_models: 0,
            solver_time: Duration::ZERO,
            verify_time: Duration::ZERO,
            verified_points: 0,
        }
    }

    fn measured(&self) -> bool {
        self.p.cfg.sprt_timing == SprtTiming::Measured
    }

    fn independent(&self, m: &Matrix3<f64>, sample: &[usize], mask: &FixedBitSet) -> usize {
        self.independent_off_plane(m, sample, mask, None)
    }

    fn independent_off_plane(&self, m: &Matrix3<f64>, sample: &[usize], mask: &FixedBitSet, plane: Option<&Matrix3<f64>>) -> usize {
        let cfg = self.p.cfg;
        if !cfg.remove_dependent {
            return mask.count_ones(..);
        }
        if let Some(h) = plane {
            return off_plane_support(m, h, &self.p.data, sample, cfg.threshold, ErrorMetric::Sampson);
        }
        let ctx = IndependenceContext::new(cfg.kind, *m, sample, cfg.threshold);
        independent_inliers(&ctx, &self.p.data, mask).0
    }

    fn term(&self) -> Termination {
        Termination {
            sample_size: self.p.cfg.kind.sample_size(),
            confidence: self.p.cfg.confidence,
            max_iterations: self.p.cfg.max_iterations,
        }
    }

    fn bound_for(&self, inliers: usize) -> usize {
        let cfg = self.p.cfg;
        max_iterations(inliers, self.p.data.len(), cfg.kind.sample_size(), cfg.confidence, cfg.max_iterations)
    }

    fn draw(&mut self, out: &mut Vec<usize>) {
        match (&mut self.sampler, self.shared.and_then(|s| s.prosac.as_ref())) {
            (Some(s), _) => s.next_sample(&mut self.rng, out),
            (None, Some(lock)) => {
                let mut g = lock.lock().unwrap_or_else(|e| e.into_inner());
                let (s, r) = &mut *g;
                s.next_sample(r, out);
            }
            (None, None) => unreachable!("worker without a sampler"),
        }
    }

    fn should_stop(&mut self) -> bool {
        match self.shared {
            None => self.stats.iterations >= self.bound,
            Some(sh) => {
                if sh.stop.load(Ordering::Acquire) {
                    return true;
                }
                let global = sh.best_count.load(Ordering::Acquire);
                let bound = self.bound.min(self.bound_for(global));
                let done = sh.iterations.fetch_add(1, Ordering::AcqRel) >= bound;
                if done {
                    sh.stop.store(true, Ordering::Release);
                }
                done
            }
        }
    }

    fn run(mut self) -> Outcome {
        let cfg = self.p.cfg;
        let s = cfg.kind.sample_size();
        let mut idx = Vec::with_capacity(s);
        let mut pts = Vec::with_capacity(s);
        while !self.should_stop() {
            self.stats.iterations += 1;
            self.draw(&mut idx);
            self.samples_drawn += 1;
            pts.clear();
            pts.extend(idx.iter().map(|&i| self.p.data[i]));
            let clock = self.measured() && !self.randomness.calibrated();
            let start = clock.then(Instant::now);
            let models = minimal_models(cfg.kind, &pts);
            if let Some(st) = start {
                self.solver_time += st.elapsed();
            }
            self.valid_models += models.len();
            for m in models {
                self.score_model(m, &idx);
                if self.pure_rotation.is_some() {
                    break;
                }
            }
            if self.pure_rotation.is_some() {
                if let Some(sh) = self.shared {
                    sh.stop.store(true, Ordering::Release);
                }
                break;
            }
        }
        // Easy scenes can terminate before the calibration window fills; the degeneracy
        // and local optimization steps still have to see the best model.
        if !self.randomness.calibrated() && !self.randomness.records.is_empty() && self.pure_rotation.is_none() {
            self.calibrate();
        }
        Outcome {
            best: self.best,
            i_max: self.i_max,
            randomness: self.randomness,
            pure_rotation: self.pure_rotation,
            degeneracy: self.degeneracy,
            stats: self.stats,
            verified: self.verified,
        }
    }

    fn score_model(&mut self, m: Matrix3<f64>, sample: &[usize]) {
        let cfg = self.p.cfg;
        let t = self.p.data.len();
        let Ok(res) = Residual::for_kind(cfg.kind, &m) else { return };
        self.stats.models_scored += 1;
        let state = if self.sprt_active { &self.sprt } else { &SprtState::disabled(t) };
        let clock = self.measured() && (!self.randomness.calibrated() || self.probe.is_some());
        let start = clock.then(Instant::now);
        let out = verify(&res, &self.p.data, state, cfg.threshold, &self.p.order);
        let elapsed = start.map(|s| s.elapsed()).unwrap_or_default();
        if !self.randomness.calibrated() {
            self.verify_time += elapsed;
            self.verified_points += out.tested;
        }
        if let Some((n, tested, time)) = self.probe.as_mut() {
            *n += 1;
            *tested += out.tested;
            *time += elapsed;
            if *n >= SPRT_PROBE {
                self.finish_probe();
            }
        }
        if !out.accepted {
            self.stats.sprt_rejections += 1;
            return;
        }
        self.verified = true;
        let mut score = Score::from_mask(out.mask).with_residual_sum(out.residual_sum);
        if !self.randomness.calibrated() {
            let ind = self.independent(&m, sample, &score.inlier_mask);
            score.independent_count = Some(ind);
            self.randomness.record(ind, score.inlier_mask.clone());
        }
        if self.best.as_ref().is_none_or(|b| better(&score, &b.score)) {
            self.new_best(m, score, sample.to_vec());
        } else if self.sprt_active {
            self.sprt.observe_bad_model(score.inlier_count as f64 / t as f64);
        }
        if !self.randomness.calibrated() && self.randomness.is_full() {
            self.calibrate();
        }
    }

    fn finish_probe(&mut self) {
        let Some((n, tested, time)) = self.probe.take() else { return };
        let t = self.p.data.len();
        self.sprt.e_w_t = tested as f64 / n as f64;
        if self.measured() && tested > 0 {
            self.sprt.t_v_w = time.as_secs_f64() / tested as f64;
        }
        self.stats.sprt_used = sprt_worthwhile(&self.sprt, t);
        if !self.stats.sprt_used {
            self.sprt_active = false;
        }
    }

    fn calibrate(&mut self) {
        let cfg = self.p.cfg;
        let t = self.p.data.len();
        let best_mask = self.best.as_ref().map(|b| b.score.inlier_mask.clone()).unwrap_or_else(|| FixedBitSet::with_capacity(t));
        let (lambda, _) = self.randomness.calibrate(&best_mask);
        self.i_delta = compute_i_delta(lambda, (lambda / t as f64).clamp(1.0 / t as f64, 0.95));
        if cfg.sprt {
            let (solver_time, verify_time, overhead) = match cfg.sprt_timing {
                SprtTiming::Fixed { model_cost, overhead } => (model_cost, 1.0, overhead),
                SprtTiming::Measured => {
                    let vt = self.verify_time.as_secs_f64() / self.verified_points.max(1) as f64;
                    (self.solver_time.as_secs_f64() / self.samples_drawn.max(1) as f64, vt, 1.0)
                }
            };
            let meas = SprtMeasurements {
                solver_time,
                verify_time,
                models_per_sample: self.valid_models as f64 / self.samples_drawn.max(1) as f64,
                lambda_hat: lambda,
                points: t,
                best_inliers: self.best.as_ref().map_or(0, |b| b.score.inlier_count),
            };
            self.sprt = calibrate(&meas);
            self.sprt.t_v_w = self.sprt.t_v * overhead;
            self.sprt_active = true;
            self.stats.sprt_used = true;
            self.probe = Some((0, 0, Duration::ZERO));
        }
        if let Some(b) = self.best.take() {
            let prev = FixedBitSet::with_capacity(t);
            self.i_max = 0;
            self.bound = cfg.max_iterations;
            self.accept_candidate(b, prev, true);
        }
    }

    fn new_best(&mut self, m: Matrix3<f64>, mut score: Score, sample: Vec<usize>) {
        let t = self.p.data.len();
        if score.independent_count.is_none() {
            score.independent_count = Some(self.independent(&m, &sample, &score.inlier_mask));
        }
        let prev = self.best.as_ref().map(|b| b.score.inlier_mask.clone()).unwrap_or_else(|| FixedBitSet::with_capacity(t));
        self.accept_candidate(Best { model: m, score, sample, minimal: true, plane: None }, prev, false);
    }

    /// Plane degeneracy check of a candidate F. Returns the model to keep, `None` when the
    /// candidate is rejected or the motion is a pure rotation. Models without a minimal
    /// sample are checked on a random minimal subset of their inliers.
    fn check_degeneracy(&mut self, cand: Best) -> Option<Best> {
        let cfg = self.p.cfg;
        if !(cfg.degensac && cfg.kind == ModelKind::Fundamental) {
            return Some(cand);
        }
        let s = cfg.kind.sample_size();
        let sample = if cand.minimal {
            cand.sample.clone()
        } else {
            let inliers: Vec<usize> = cand.score.inlier_mask.ones().collect();
            if inliers.len() < s {
                return Some(cand);
            }
            rand::seq::index::sample(&mut self.rng_deg, inliers.len(), s).into_iter().map(|k| inliers[k]).collect()
        };
        self.stats.degensac_runs += 1;
        let mut input = DegensacInput::new(cfg.calibration, self.randomness.lambda_hat.unwrap_or(0.0));
        input.image_sizes = cfg.image_sizes;
        input.parallax_confidence = cfg.nonrandomness_p;
        let v = degensac_plus(&cand.model, &sample, &input, &self.p.data, cfg.threshold, &mut self.rng_deg);
        self.degeneracy = Some(v.status);
        self.stats.models_scored += v.hypotheses;
        match v.status {
            DegeneracyStatus::NotDegenerate => Some(cand),
            DegeneracyStatus::PureRotation => {
                self.pure_rotation = v.homography;
                None
            }
            DegeneracyStatus::Rejected => None,
            _ => {
                let (Some(Model::Fundamental(f)), Some(mut sc)) = (v.model, v.support) else { return None };
                sc.independent_count = Some(self.independent_off_plane(&f, &cand.sample, &sc.inlier_mask, v.homography.as_ref()));
                Some(Best { model: f, score: sc, sample: cand.sample, minimal: false, plane: v.homography })
            }
        }
    }

    /// Runs the degeneracy check, updates the best model and the bounds, then LO.
    fn accept_candidate(&mut self, cand: Best, prev_mask: FixedBitSet, recheck: bool) {
        let calibrated = self.randomness.calibrated();
        let cand = if calibrated {
            match self.check_degeneracy(cand) {
                Some(c) => c,
                None => return,
            }
        } else {
            cand
        };
        // A recovered model replaces the best only when it is actually better.
        if !recheck && self.best.as_ref().is_some_and(|b| !better(&cand.score, &b.score)) {
            return;
        }
        if !recheck {
            self.stats.best_updates += 1;
        }
        self.install(cand);
        if calibrated {
            self.maybe_lo(&prev_mask);
        }
    }

    fn install(&mut self, b: Best) {
        let count = b.score.inlier_count;
        self.i_max = self.i_max.max(b.score.independent_count.unwrap_or(0));
        self.bound = self.bound.min(self.bound_for(count));
        if self.sprt_active {
            self.sprt.update_epsilon(count);
        }
        if let Some(sh) = self.shared {
            sh.best_count.fetch_max(count, Ordering::AcqRel);
        }
        self.best = Some(b);
    }

    fn maybe_lo(&mut self, prev_mask: &FixedBitSet) {
        let cfg = self.p.cfg;
        let Some(params) = cfg.lo else { return };
        let Some(b) = self.best.as_ref() else { return };
        if !should_run_lo(&b.score, prev_mask, self.i_delta) {
            return;
        }
        self.stats.lo_runs += 1;
        let parent = b.sample.clone();
        let plane = b.plane;
        let r = local_optimize(&b.score, params, &self.p.data, cfg.threshold, cfg.kind, self.term(), &mut self.rng_lo);
        self.bound = self.bound.min(r.max_iterations);
        self.stats.models_scored += r.scored;
        if let Some(m) = r.model {
            let mut s = r.score;
            s.independent_count = Some(self.independent_off_plane(&m, &parent, &s.inlier_mask, plane.as_ref()));
            let cand = Best { model: m, score: s, sample: parent, minimal: false, plane };
            if let Some(c) = self.check_degeneracy(cand) {
                if self.best.as_ref().is_none_or(|b| better(&c.score, &b.score)) {
                    self.install(c);
                }
            }
        }
    }
}

fn prepare<'a>(corrs: &[Correspondence], cfg: &'a VsacConfig) -> Result<Problem<'a>, EngineError> {
    cfg.validate()?;
    let s = cfg.kind.sample_size();
    if corrs.len() < s {
        return Err(EngineError::InsufficientPoints { needed: s, got: corrs.len() });
    }
    if corrs.iter().any(|c| !c.is_finite()) {
        return Err(EngineError::InvalidConfig("correspondences must be finite".into()));
    }
    let mut perm: Vec<usize> = (0..corrs.len()).collect();
    if cfg.sampler == SamplerKind::Prosac {
        perm.sort_by(|&a, &b| corrs[b].quality.total_cmp(&corrs[a].quality));
    }
    let data = perm.iter().map(|&i| corrs[i]).collect();
    let mut order: Vec<usize> = (0..corrs.len()).collect();
    order.shuffle(&mut rng_stream(cfg.rng_seed, 3));
    Ok(Problem { data, perm, order, cfg })
}

/// Robust estimation on one thread. Deterministic for a fixed seed with fixed SPRT timing.
pub fn estimate(corrs: &[Correspondence], cfg: &VsacConfig) -> Result<EstimationReport, EngineError> {
    let start = Instant::now();
    let p = prepare(corrs, cfg)?;
    let out = Worker::new(&p, None, 0).run();
    Ok(finish(&p, out, start))
}

/// Runs `cfg.thread_count` workers that share only an iteration counter, a stop flag and
/// the best inlier count; PROSAC sampling is serialized behind a lock.
pub fn estimate_parallel(corrs: &[Correspondence], cfg: &VsacConfig) -> Result<EstimationReport, EngineError> {
    if cfg.thread_count <= 1 {
        return estimate(corrs, cfg);
    }
    let start = Instant::now();
    let p = prepare(corrs, cfg)?;
    let prosac = (cfg.sampler == SamplerKind::Prosac).then(|| {
        let s = Sampler::new(SamplerKind::Prosac, p.data.len(), cfg.kind.sample_size()).expect("point count checked");
        Mutex::new((s, rng_stream(cfg.rng_seed, 1 << 32)))
    });
    let shared = Shared { iterations: AtomicUsize::new(0), stop: AtomicBool::new(false), best_count: AtomicUsize::new(0), prosac };
    let outcomes: Vec<Outcome> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..cfg.thread_count)
            .map(|w| {
                let (p, shared) = (&p, &shared);
                scope.spawn(move || Worker::new(p, Some(shared), w as u64).run())
            })
            .collect();
        handles.into_iter().filter_map(|h| h.join().ok()).collect()
    });
    if outcomes.is_empty() {
        return estimate(corrs, cfg);
    }
    let mut merged = EstimationStats::default();
    let mut i_max = 0;
    for o in &outcomes {
        merged.iterations += o.stats.iterations;
        merged.models_scored += o.stats.models_scored;
        merged.lo_runs += o.stats.lo_runs;
        merged.degensac_runs += o.stats.degensac_runs;
        merged.best_updates += o.stats.best_updates;
        merged.sprt_rejections += o.stats.sprt_rejections;
        merged.sprt_used |= o.stats.sprt_used;
        i_max = i_max.max(o.i_max);
    }
    let verified = outcomes.iter().any(|o| o.verified);
    let mut winner: Option<Outcome> = None;
    for o in outcomes {
        let take = match (&winner, &o) {
            (_, o) if o.pure_rotation.is_some() => true,
            (None, _) => true,
            (Some(w), _) if w.pure_rotation.is_some() => false,
            (Some(w), o) => match (&w.best, &o.best) {
                (None, Some(_)) => true,
                (Some(a), Some(b)) => better(&b.score, &a.score),
                _ => false,
            },
        };
        if take {
            winner = Some(o);
        }
    }
    let mut out = winner.expect("at least one worker");
    out.stats = merged;
    out.i_max = i_max;
    out.verified = verified;
    Ok(finish(&p, out, start))
}

fn classical_confidence(inliers: usize, points: usize, s: usize, iterations: usize) -> f64 {
    if points == 0 {
        return 0.0;
    }
    let w = (inliers as f64 / points as f64).powi(s as i32);
    1.0 - (1.0 - w).powf(iterations as f64)
}

fn finish(p: &Problem<'_>, mut out: Outcome, start: Instant) -> EstimationReport {
    let cfg = p.cfg;
    let t = p.data.len();
    if let Some(h) = out.pure_rotation {
        // Same plane tolerance as the degeneracy test, since the transfer error is 2D.
        let thr = cfg.threshold * PLANE_THRESHOLD_SCALE;
        let polished = final_polish(&h, &p.data, thr, cfg.polish_iters, ModelKind::Homography);
        let mask = polished.score.inlier_mask;
        let ranked = rank_inliers(ModelKind::Homography, &polished.model, &p.data, &mask);
        out.stats.wall_time = start.elapsed();
        let mut r = EstimationReport::empty(t, Verdict::PureRotation, out.stats);
        r.inlier_count = mask.count_ones(..);
        r.inlier_mask = p.to_input_mask(&mask);
        r.ranked_points = ranked.into_iter().map(|(i, res)| (p.perm[i], res)).collect();
        r.model = Some(Model::Homography(polished.model));
        r.lambda_hat = out.randomness.lambda_hat;
        r.degeneracy = Some(DegeneracyStatus::PureRotation);
        return r;
    }
    let Some(best) = out.best else {
        out.stats.wall_time = start.elapsed();
        // Hypotheses that verified but were all discarded, e.g. as degenerate, say the data
        // holds no model rather than that none could be built.
        let verdict = if out.verified { Verdict::RejectedRandom } else { Verdict::NoModel };
        return EstimationReport::empty(t, verdict, out.stats);
    };

    let calib = (!out.randomness.records.is_empty()).then(|| out.randomness.calibrate(&best.score.inlier_mask));
    let lambda = calib.map(|(l, _)| l);
    let i_max = out.i_max.max(best.score.independent_count.unwrap_or(0));
    // Without a recorded model outside the best one's support there is no sample of
    // random support to test against.
    let conf_nonrandom = match calib {
        Some((l, survivors)) if survivors > 0 => nonrandom_confidence(i_max as u64, l, out.stats.models_scored as u64),
        _ => 1.0,
    };
    let nonrandom = !cfg.randomness_test || conf_nonrandom >= cfg.nonrandomness_p;

    let (mut model, mut score) = (best.model, best.score);
    if cfg.polish_iters > 0 {
        let r = final_polish(&model, &p.data, cfg.threshold, cfg.polish_iters, cfg.kind);
        if r.score.inlier_count >= score.inlier_count {
            model = r.model;
            score = r.score;
        }
    }
    let ranked = rank_inliers(cfg.kind, &model, &p.data, &score.inlier_mask);
    let corrected = if cfg.correct_points { correct_inliers(cfg.kind, &model, &p.data, &ranked, &score.inlier_mask) } else { Vec::new() };
    out.stats.wall_time = start.elapsed();
    EstimationReport {
        model: Some(Model::from_matrix3(cfg.kind, model)),
        inlier_mask: p.to_input_mask(&score.inlier_mask),
        inlier_count: score.inlier_count,
        ranked_points: ranked.into_iter().map(|(i, r)| (p.perm[i], r)).collect(),
        corrected_points: corrected,
        confidence_best_model: classical_confidence(score.inlier_count, t, cfg.kind.sample_size(), out.stats.iterations),
        confidence_nonrandom: conf_nonrandom,
        independent_inliers: i_max,
        lambda_hat: lambda,
        degeneracy: out.degeneracy,
        verdict: if nonrandom { Verdict::Success } else { Verdict::RejectedRandom },
        stats: out.stats,
    }
}

fn correct_inliers(
    kind: ModelKind,
    m: &Matrix3<f64>,
    data: &[Correspondence],
    ranked: &[(usize, f64)],
    mask: &FixedBitSet,
) -> Vec<CorrectedPair> {
    let inliers: Vec<usize> = ranked.iter().map(|p| p.0).filter(|&i| mask.contains(i)).collect();
    match kind {
        ModelKind::Homography => {
            let a = sqrt_homography(m).or_else(|| sqrt_homography(&-m));
            inliers
                .iter()
                .map(|&i| {
                    let c = data[i];
                    let invalid = CorrectedPair { original: c, corrected: c, residual_before: f64::NAN, valid: false };
                    a.as_ref().and_then(|a| correct_pair_h(a, &c).ok()).unwrap_or(invalid)
                })
                .collect()
        }
        _ => {
            let reference: Vec<Correspondence> = inliers.iter().map(|&i| data[i]).collect();
            let e1 = oriented_epipole(m, &reference);
            inliers.iter().map(|&i| correct_pair_f(m, &e1, &data[i])).collect()
        }
    }
}
