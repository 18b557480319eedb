use fixedbitset::FixedBitSet;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use vsac::engine::VsacConfig;
use vsac::geometry::ModelKind;
use vsac::sampling::*;

fn draws(kind: SamplerKind, points: usize, s: usize, seed: u64, n: usize) -> Vec<Vec<usize>> {
    let mut sampler = Sampler::new(kind, points, s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    (0..n)
        .map(|_| {
            sampler.next_sample(&mut rng, &mut out);
            out.clone()
        })
        .collect()
}

fn distinct(sample: &[usize]) -> bool {
    let mut v = sample.to_vec();
    v.sort_unstable();
    v.windows(2).all(|w| w[0] != w[1])
}

#[test]
fn uniform_is_reproducible() {
    let a = draws(SamplerKind::Uniform, 10, 7, 42, 100);
    assert_eq!(a, draws(SamplerKind::Uniform, 10, 7, 42, 100));
    assert_ne!(a, draws(SamplerKind::Uniform, 10, 7, 43, 100));
    assert!(a.iter().all(|s| s.len() == 7 && distinct(s) && s.iter().all(|&i| i < 10)));
}

#[test]
fn samples_never_repeat_an_index() {
    for (kind, points, s) in [(SamplerKind::Uniform, 10, 7), (SamplerKind::Prosac, 50, 7), (SamplerKind::Prosac, 8, 4)] {
        let mut sampler = Sampler::new(kind, points, s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut out = Vec::new();
        for _ in 0..1_000_000 / 3 {
            sampler.next_sample(&mut rng, &mut out);
            assert!(out.len() == s && distinct(&out) && out.iter().all(|&i| i < points));
        }
    }
}

/// Growth of the PROSAC subset: `n` and the draw count `T'_n` at which it grows next.
struct Growth {
    n: usize,
    t_n: f64,
    t_prime: f64,
    m: usize,
    points: usize,
}

impl Growth {
    fn new(points: usize, m: usize) -> Self {
        let mut t_n = PROSAC_GROWTH_MAX as f64;
        for i in 0..m {
            t_n *= (m - i) as f64 / (points - i) as f64;
        }
        Self { n: m, t_n, t_prime: 1.0, m, points }
    }

    /// Subset size in effect for draw `t` and whether point `n - 1` is forced.
    fn step(&mut self, t: u64) -> (usize, bool) {
        if t as f64 >= self.t_prime && self.n < self.points {
            let next = self.t_n * (self.n + 1) as f64 / (self.n + 1 - self.m) as f64;
            self.t_prime += (next - self.t_n).ceil();
            self.t_n = next;
            self.n += 1;
        }
        (self.n, self.t_prime >= t as f64)
    }
}

#[test]
fn prosac_follows_growth_recurrence() {
    let (points, s) = (100, 4);
    let samples = draws(SamplerKind::Prosac, points, s, 5, 20_000);
    // First draw comes from the top s + 1 points.
    assert!(samples[0].iter().all(|&i| i < s + 1));
    let mut g = Growth::new(points, s);
    let mut sampler = Sampler::new(SamplerKind::Prosac, points, s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut out = Vec::new();
    for (t, expected) in samples.iter().enumerate() {
        sampler.next_sample(&mut rng, &mut out);
        assert_eq!(&out, expected);
        let (n, forced) = g.step(t as u64 + 1);
        assert_eq!(sampler.subset_size(), n);
        assert!(out.iter().all(|&i| i < n));
        if forced {
            assert!(out.contains(&(n - 1)));
        }
    }
    assert!(g.n > s + 1);
}

#[test]
fn prosac_becomes_uniform_after_growth_budget() {
    let (points, s) = (20, 4);
    let mut sampler = Sampler::new(SamplerKind::Prosac, points, s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut out = Vec::new();
    for _ in 0..PROSAC_GROWTH_MAX {
        sampler.next_sample(&mut rng, &mut out);
    }
    let mut counts = vec![0f64; points];
    let draws = 100_000;
    for _ in 0..draws {
        sampler.next_sample(&mut rng, &mut out);
        for &i in &out {
            counts[i] += 1.0;
        }
    }
    let expected = (draws * s) as f64 / points as f64;
    let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((points - 1) as f64).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi2 {chi2}, p {p}");
}

#[test]
fn too_few_points() {
    assert_eq!(
        Sampler::new(SamplerKind::Uniform, 3, 4).unwrap_err(),
        SamplingError::InsufficientPoints { needed: 4, got: 3 }
    );
}

#[test]
fn iteration_bound_examples() {
    assert_eq!(max_iterations(500, 500, 7, 0.99, 5000), 1);
    let k = (0.01f64.ln() / (1.0 - 0.5f64.powi(7)).ln()).ceil() as usize;
    assert_eq!(k, 588);
    assert_eq!(max_iterations(250, 500, 7, 0.99, 5000), 588);
    assert_eq!(VsacConfig::new(ModelKind::Homography).max_iterations, 3000);
    assert_eq!(VsacConfig::new(ModelKind::Fundamental).max_iterations, 5000);
    assert_eq!(max_iterations(0, 500, 4, 0.99, 3000), 3000);
    assert_eq!(max_iterations(0, 500, 7, 0.99, 5000), 5000);
}

fn score(count: usize, sum: Option<f64>) -> Score {
    let mut m = FixedBitSet::with_capacity(count + 1);
    m.insert_range(..count);
    let s = Score::from_mask(m);
    match sum {
        Some(x) => s.with_residual_sum(x),
        None => s,
    }
}

#[test]
fn better_examples() {
    assert!(better(&score(10, None), &score(9, None)));
    assert!(better(&score(10, Some(4.2)), &score(10, Some(5.0))));
    assert!(!better(&score(10, Some(4.2)), &score(10, Some(4.2))));
    assert!(!better(&score(10, None), &score(10, None)));
    assert!(!better(&score(10, Some(1.0)), &score(10, None)));
}

proptest! {
    #[test]
    fn iteration_bound_is_monotone(points in 8usize..2000, s in 2usize..8, conf in 0.5..0.9999f64, a in 0.0..1.0f64, b in 0.0..1.0f64) {
        prop_assume!(points >= s);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (i_lo, i_hi) = ((lo * points as f64) as usize, (hi * points as f64) as usize);
        let k_lo = max_iterations(i_lo, points, s, conf, 100_000);
        let k_hi = max_iterations(i_hi, points, s, conf, 100_000);
        prop_assert!(k_hi <= k_lo);
        prop_assert!((1..=100_000).contains(&k_hi));
    }

    #[test]
    fn prosac_replays_identically(seed in any::<u64>(), points in 8usize..200) {
        let a = draws(SamplerKind::Prosac, points, 7, seed, 300);
        prop_assert_eq!(a, draws(SamplerKind::Prosac, points, 7, seed, 300));
    }

    #[test]
    fn better_is_a_strict_order(a in 0usize..20, b in 0usize..20, sa in prop::option::of(0.0..10.0f64), sb in prop::option::of(0.0..10.0f64)) {
        let (x, y) = (score(a, sa), score(b, sb));
        prop_assert!(!(better(&x, &y) && better(&y, &x)));
        prop_assert!(!better(&x, &x));
    }
}
