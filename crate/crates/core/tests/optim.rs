use fixedbitset::FixedBitSet;
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vsac::geometry::*;
use vsac::metrics::evaluate_error;
use vsac::optim::*;
use vsac::randomness::jaccard;
use vsac::sampling::{better, max_iterations, Score};
use vsac::solvers::{solve_f_7pt, solve_h_4pt};
use vsac::synth::*;

fn bits(n: usize, ones: impl IntoIterator<Item = usize>) -> FixedBitSet {
    let mut m = FixedBitSet::with_capacity(n);
    ones.into_iter().for_each(|i| m.insert(i));
    m
}

#[test]
fn jaccard_examples() {
    let a = bits(30, 0..10);
    assert_eq!(jaccard(&a, &a), 1.0);
    assert_eq!(jaccard(&a, &bits(30, 10..20)), 0.0);
    assert!((jaccard(&a, &bits(30, 5..15)) - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(jaccard(&bits(30, []), &bits(30, [])), 1.0);
}

#[test]
fn lo_gate_examples() {
    let prev = bits(100, 0..40);
    let with = |m: FixedBitSet, n: usize| Score { independent_count: Some(n), ..Score::from_mask(m) };
    assert!(!should_run_lo(&with(bits(100, 50..90), 11), &prev, 12));
    assert!(!should_run_lo(&with(prev.clone(), 90), &prev, 12));
    // Overlap 0.3 and five more independent inliers than needed.
    let (a, b) = (bits(100, 0..13), bits(100, 7..20));
    assert!((jaccard(&a, &b) - 0.3).abs() < 1e-15);
    assert!(should_run_lo(&with(b, 17), &a, 12));
}

fn kind_of(scene: SceneKind) -> ModelKind {
    if scene == SceneKind::Homography {
        ModelKind::Homography
    } else {
        ModelKind::Fundamental
    }
}

/// Minimal-sample model from true inliers, as a loop would produce it.
fn minimal_fit(scene: &Scene, kind: ModelKind, rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let inl: Vec<usize> = scene.gt_mask.ones().collect();
    loop {
        let idx = index::sample(rng, inl.len(), kind.sample_size());
        let pts: Vec<_> = idx.iter().map(|k| scene.corrs[inl[k]]).collect();
        let m = match kind {
            ModelKind::Homography => solve_h_4pt(&pts),
            _ => solve_f_7pt(&pts).into_iter().find(|f| orientation_consistent(f, &pts)),
        };
        if let Some(m) = m {
            return m;
        }
    }
}

/// Best of `tries` minimal fits by support, the kind of model a sampling loop hands over.
fn best_fit(scene: &Scene, kind: ModelKind, rng: &mut ChaCha8Rng, tries: usize) -> Matrix3<f64> {
    (0..tries)
        .map(|_| minimal_fit(scene, kind, rng))
        .max_by_key(|m| score_model(kind, m, &scene.corrs, 3.0).map_or(0, |s| s.inlier_count))
        .unwrap()
}

fn gt_error(kind: ModelKind, m: &Matrix3<f64>, scene: &Scene) -> f64 {
    evaluate_error(kind, m, &scene.gt_pairs).unwrap().avg
}

fn term(kind: ModelKind) -> Termination {
    Termination { sample_size: kind.sample_size(), confidence: 0.99, max_iterations: 5000 }
}

#[test]
fn lo_on_exact_data_cannot_worsen() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..20 {
        for sk in [SceneKind::Homography, SceneKind::Fundamental] {
            let kind = kind_of(sk);
            let scene = generate_scene(&SceneSpec { noise_sigma: 0.0, inlier_ratio: 1.0, ..SceneSpec::new(sk, seed) });
            let m = minimal_fit(&scene, kind, &mut rng);
            let input = score_model(kind, &m, &scene.corrs, 1.0).unwrap();
            let before = max_iterations(input.inlier_count, scene.corrs.len(), kind.sample_size(), 0.99, 5000);
            let r = local_optimize(&input, LoParams::for_kind(kind), &scene.corrs, 1.0, kind, term(kind), &mut rng);
            assert!(!better(&input, &r.score));
            assert!(r.max_iterations <= before);
            if let Some(lo) = r.model {
                assert!(gt_error(kind, &lo, &scene) <= gt_error(kind, &m, &scene) + 1e-9);
            }
        }
    }
}

#[test]
fn lo_with_small_inlier_set_still_runs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scene = generate_scene(&SceneSpec { n_points: 40, inlier_ratio: 0.5, ..SceneSpec::new(SceneKind::Homography, 4) });
    let m = minimal_fit(&scene, ModelKind::Homography, &mut rng);
    let input = score_model(ModelKind::Homography, &m, &scene.corrs, 3.0).unwrap();
    assert!(input.inlier_count < 32);
    let kind = ModelKind::Homography;
    let r = local_optimize(&input, LoParams::for_kind(kind), &scene.corrs, 3.0, kind, term(kind), &mut rng);
    assert!(r.scored > 0);
}

#[test]
fn lo_improves_support_over_seeded_runs() {
    let kind = ModelKind::Homography;
    let h = Matrix3::new(0.9, 0.1, 30.0, -0.05, 1.05, -12.0, 1e-4, -5e-5, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let threshold = 3.0;
    let mut corrs = Vec::new();
    for _ in 0..50 {
        let (x, y) = (rng.gen_range(0.0..1000.0), rng.gen_range(0.0..700.0));
        let p = h * Vector3::new(x, y, 1.0);
        let noise: (f64, f64) = (rng.sample(rand_distr::StandardNormal), rng.sample(rand_distr::StandardNormal));
        corrs.push(Correspondence::new(x, y, p[0] / p[2] + noise.0, p[1] / p[2] + noise.1));
    }
    for _ in 0..200 {
        corrs.push(Correspondence::new(rng.gen_range(0.0..1000.0), rng.gen_range(0.0..700.0), rng.gen_range(0.0..1000.0), rng.gen_range(0.0..700.0)));
    }
    let mut counts = Vec::new();
    let mut inputs = Vec::new();
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = index::sample(&mut rng, 50, 4);
        let pts: Vec<_> = idx.iter().map(|i| corrs[i]).collect();
        let Some(m) = solve_h_4pt(&pts) else { continue };
        // Three mismatches sitting just inside the threshold of the input model.
        let mut data = corrs.clone();
        for k in 0..3 {
            let (x, y) = (100.0 + 300.0 * k as f64, 350.0);
            let p = m * Vector3::new(x, y, 1.0);
            data.push(Correspondence::new(x, y, p[0] / p[2] + 0.99 * threshold, p[1] / p[2]));
        }
        let Some(input) = score_model(kind, &m, &data, threshold) else { continue };
        let r = local_optimize(&input, LoParams::for_kind(kind), &data, threshold, kind, term(kind), &mut rng);
        inputs.push(input.inlier_count);
        counts.push(r.score.inlier_count);
    }
    inputs.sort_unstable();
    counts.sort_unstable();
    assert!(counts[counts.len() / 2] >= inputs[inputs.len() / 2]);
    assert!(counts.iter().sum::<usize>() > inputs.iter().sum::<usize>());
}

/// GT error of each polish iterate, repeating the last model when polishing stopped early.
fn iterate_errors(trace: &PolishTrace, kind: ModelKind, scene: &Scene, iters: usize) -> Vec<f64> {
    (0..=iters).map(|i| gt_error(kind, &trace.models[i.min(trace.models.len() - 1)], scene)).collect()
}

#[test]
fn polish_reduces_homography_error() {
    let kind = ModelKind::Homography;
    let scene = generate_scene(&SceneSpec::new(SceneKind::Homography, 2024));
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let m = best_fit(&scene, kind, &mut rng, 20);
    let r = final_polish(&m, &scene.corrs, 3.0, 5, kind);
    let errs = iterate_errors(&r.trace, kind, &scene, 5);
    assert!(errs.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{errs:?}");
    assert!(errs[5] < errs[1], "{errs:?}");
}

fn polish_problem(seed: u64, sk: SceneKind) -> (Scene, Matrix3<f64>) {
    let scene = generate_scene(&SceneSpec::new(sk, seed));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = best_fit(&scene, kind_of(sk), &mut rng, 20);
    (scene, m)
}

#[test]
fn normalize_once_matches_renormalizing() {
    for sk in [SceneKind::Homography, SceneKind::Fundamental] {
        let kind = kind_of(sk);
        let (mut once, mut every) = (vec![0.0; 6], vec![0.0; 6]);
        let problems = 200;
        for seed in 0..problems {
            let (scene, m) = polish_problem(seed, sk);
            let a = final_polish(&m, &scene.corrs, 3.0, 5, kind);
            let b = final_polish_renormalizing(&m, &scene.corrs, 3.0, 5, kind);
            assert!(a.trace.normalization_passes < b.trace.normalization_passes || b.trace.normalization_passes <= 1);
            for (i, (x, y)) in iterate_errors(&a.trace, kind, &scene, 5).into_iter().zip(iterate_errors(&b.trace, kind, &scene, 5)).enumerate() {
                once[i] += x / problems as f64;
                every[i] += y / problems as f64;
            }
        }
        for i in 1..=5 {
            assert!((once[i] - every[i]).abs() < 0.01, "{kind:?} iteration {i}: {} vs {}", once[i], every[i]);
        }
        assert!(once.windows(2).all(|w| w[1] <= w[0]), "{kind:?}: {once:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn lo_never_returns_worse(seed in 0u64..100_000, f in any::<bool>(), threshold in 1.0..4.0f64) {
        let sk = if f { SceneKind::Fundamental } else { SceneKind::Homography };
        let kind = kind_of(sk);
        let (scene, m) = polish_problem(seed, sk);
        let input = score_model(kind, &m, &scene.corrs, threshold).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = local_optimize(&input, LoParams::for_kind(kind), &scene.corrs, threshold, kind, term(kind), &mut rng);
        prop_assert!(!better(&input, &r.score));
        prop_assert_eq!(r.model.is_some(), better(&r.score, &input));
    }

    #[test]
    fn incremental_normal_equations_match_batch(seed in any::<u64>(), steps in 1usize..8) {
        let (scene, _) = polish_problem(seed % 1000, SceneKind::Fundamental);
        let (norm, _) = normalize_points(&scene.corrs).unwrap();
        let mut acc = PolishAccumulator::new(ModelKind::Fundamental, norm.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..steps {
            let mask = bits(norm.len(), (0..norm.len()).filter(|_| rng.gen_bool(0.5)));
            acc.update(&norm, &mask);
            let batch = acc.rebuilt(&norm);
            prop_assert!((acc.ata - batch).norm() <= 1e-8 * batch.norm().max(1.0));
            prop_assert!((acc.ata - acc.ata.transpose()).norm() <= 1e-9 * batch.norm().max(1.0));
        }
    }
}
