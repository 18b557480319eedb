//! Seeded synthetic two-view scenes with known geometry.

use fixedbitset::FixedBitSet;
use nalgebra::{Matrix3, Matrix3x4, Point2, Point3, Rotation3, Unit, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geometry::{skew, Calibration, Correspondence, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SceneKind {
    Homography,
    Fundamental,
    DominantPlane,
    PureRotation,
    NonMatching,
}

impl SceneKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.to_ascii_lowercase().as_str() {
            "h" | "homography" => Self::Homography,
            "f" | "fundamental" => Self::Fundamental,
            "f_dominant_plane" | "dominant_plane" | "plane" => Self::DominantPlane,
            "pure_rotation" | "rotation" => Self::PureRotation,
            "non_matching" | "random" => Self::NonMatching,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Homography => "h",
            Self::Fundamental => "f",
            Self::DominantPlane => "f_dominant_plane",
            Self::PureRotation => "pure_rotation",
            Self::NonMatching => "non_matching",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub n_points: usize,
    pub inlier_ratio: f64,
    pub noise_sigma: f64,
    /// Share of the inliers lying on the dominant plane.
    pub plane_fraction: f64,
    pub width: f64,
    pub height: f64,
    pub seed: u64,
    /// Number of held-out ground-truth pairs.
    pub gt_pairs: usize,
    /// Noise on the ground-truth pairs, as if they were hand annotated.
    pub gt_noise: f64,
    /// Share of non-matching points that are near-duplicates of another point, as
    /// produced by repeated keypoints in real matchers.
    pub duplicate_fraction: f64,
}

impl SceneSpec {
    pub fn new(kind: SceneKind, seed: u64) -> Self {
        Self {
            kind,
            n_points: 500,
            inlier_ratio: if kind == SceneKind::NonMatching { 0.0 } else { 0.5 },
            noise_sigma: 1.0,
            plane_fraction: if kind == SceneKind::DominantPlane { 0.7 } else { 0.0 },
            width: 1024.0,
            height: 768.0,
            seed,
            gt_pairs: 30,
            gt_noise: 0.0,
            duplicate_fraction: 0.3,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecError {
    #[error("expected key=value, got {0:?}")]
    Syntax(String),
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}")]
    BadValue { key: String, value: String },
    #[error("{0}")]
    Invalid(String),
}

impl SceneSpec {
    /// Builds a spec from `key=value` items such as `kind=f seed=3 ratio=0.4`. `kind`
    /// picks the defaults, so it is applied before the other keys wherever it appears.
    pub fn from_assignments<S: AsRef<str>>(items: &[S]) -> Result<Self, SpecError> {
        let mut pairs = Vec::new();
        for item in items {
            for part in item.as_ref().split([',', ' ']).filter(|p| !p.is_empty()) {
                let (k, v) = part.split_once('=').ok_or_else(|| SpecError::Syntax(part.to_string()))?;
                pairs.push((k.trim().to_ascii_lowercase(), v.trim().to_string()));
            }
        }
        let bad = |k: &str, v: &str| SpecError::BadValue { key: k.to_string(), value: v.to_string() };
        let kind = match pairs.iter().rev().find(|(k, _)| k == "kind") {
            Some((k, v)) => SceneKind::parse(v).ok_or_else(|| bad(k, v))?,
            None => SceneKind::Homography,
        };
        let mut spec = SceneSpec::new(kind, 0);
        for (k, v) in &pairs {
            let f = || v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| bad(k, v));
            let u = || v.parse::<usize>().map_err(|_| bad(k, v));
            match k.as_str() {
                "kind" => {}
                "n" | "n_points" | "points" => spec.n_points = u()?,
                "ratio" | "inlier_ratio" => spec.inlier_ratio = f()?,
                "sigma" | "noise" | "noise_sigma" => spec.noise_sigma = f()?,
                "plane" | "plane_fraction" => spec.plane_fraction = f()?,
                "width" => spec.width = f()?,
                "height" => spec.height = f()?,
                "seed" => spec.seed = v.parse().map_err(|_| bad(k, v))?,
                "gt" | "gt_pairs" => spec.gt_pairs = u()?,
                "gt_noise" => spec.gt_noise = f()?,
                "dup" | "duplicate_fraction" => spec.duplicate_fraction = f()?,
                _ => return Err(SpecError::UnknownKey(k.clone())),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        let unit = |name: &str, x: f64| {
            if (0.0..=1.0).contains(&x) {
                Ok(())
            } else {
                Err(SpecError::Invalid(format!("{name} must lie in [0, 1], got {x}")))
            }
        };
        unit("inlier_ratio", self.inlier_ratio)?;
        unit("plane_fraction", self.plane_fraction)?;
        unit("duplicate_fraction", self.duplicate_fraction)?;
        if self.noise_sigma < 0.0 || self.gt_noise < 0.0 {
            return Err(SpecError::Invalid("noise must be non-negative".into()));
        }
        if self.width <= 0.0 || self.height <= 0.0 {
            return Err(SpecError::Invalid("image size must be positive".into()));
        }
        let minimal = match self.kind {
            SceneKind::Homography | SceneKind::PureRotation => 4,
            SceneKind::Fundamental | SceneKind::DominantPlane => 7,
            SceneKind::NonMatching => 0,
        };
        if (self.inlier_ratio * self.n_points as f64).round() < minimal as f64 {
            return Err(SpecError::Invalid(format!("fewer than {minimal} inliers")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub corrs: Vec<Correspondence>,
    /// H for planar and rotation scenes, F otherwise; absent for non-matching scenes.
    pub gt_model: Option<Model>,
    pub gt_mask: FixedBitSet,
    pub gt_pairs: Vec<Correspondence>,
    pub calibration: Calibration,
    /// Baseline over mean scene depth.
    pub translation_ratio: f64,
}

struct Rig {
    k: Matrix3<f64>,
    k_inv: Matrix3<f64>,
    r: Matrix3<f64>,
    t: Vector3<f64>,
    w: f64,
    h: f64,
}

impl Rig {
    fn project2(&self, x: &Vector3<f64>) -> Option<(f64, f64)> {
        let xc = self.r * x + self.t;
        if xc[2] <= 0.1 {
            return None;
        }
        let p = self.k * xc;
        let (u, v) = (p[0] / p[2], p[1] / p[2]);
        (u >= 0.0 && u <= self.w && v >= 0.0 && v <= self.h).then_some((u, v))
    }

    fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        self.k_inv * Vector3::new(u, v, 1.0)
    }

    fn fundamental(&self) -> Matrix3<f64> {
        let f = self.k_inv.transpose() * skew(&self.t) * self.r * self.k_inv;
        f / f.norm()
    }
}

const DEPTH: (f64, f64) = (5.0, 12.0);

fn small_rotation<R: Rng>(rng: &mut R, max: f64) -> Matrix3<f64> {
    let axis = Unit::new_normalize(Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
    *Rotation3::from_axis_angle(&axis, rng.gen_range(-max..max)).matrix()
}

/// Second camera displaced sideways and turned back towards the middle of the scene.
fn make_rig<R: Rng>(rng: &mut R, spec: &SceneSpec, translate: bool) -> Rig {
    let f = spec.width.max(spec.height);
    let k = Matrix3::new(f, 0.0, spec.width / 2.0, 0.0, f, spec.height / 2.0, 0.0, 0.0, 1.0);
    let k_inv = k.try_inverse().unwrap();
    if !translate {
        return Rig { k, k_inv, r: small_rotation(rng, 0.3), t: Vector3::zeros(), w: spec.width, h: spec.height };
    }
    let ang = rng.gen_range(0.0..std::f64::consts::TAU);
    let dir = Vector3::new(ang.cos(), ang.sin() * 0.5, rng.gen_range(-0.3..0.3)).normalize();
    let center = dir * rng.gen_range(2.0..3.0);
    let target = Vector3::new(0.0, 0.0, (DEPTH.0 + DEPTH.1) / 2.0);
    let z = (target - center).normalize();
    let x = Vector3::y().cross(&z).normalize();
    let y = z.cross(&x);
    let look = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    let r = small_rotation(rng, 0.05) * look;
    let t = -r * center;
    Rig { k, k_inv, r, t, w: spec.width, h: spec.height }
}

fn uniform_pair<R: Rng>(rng: &mut R, w: f64, h: f64) -> Correspondence {
    Correspondence::new(rng.gen_range(0.0..w), rng.gen_range(0.0..h), rng.gen_range(0.0..w), rng.gen_range(0.0..h))
}

fn noisy<R: Rng>(rng: &mut R, c: Correspondence, sigma: f64) -> Correspondence {
    if sigma <= 0.0 {
        return c;
    }
    let n = Normal::new(0.0, sigma).unwrap();
    Correspondence::new(c.x1 + n.sample(rng), c.y1 + n.sample(rng), c.x2 + n.sample(rng), c.y2 + n.sample(rng))
}

/// Plane `n^T X = d` in front of the first camera.
struct Plane {
    n: Vector3<f64>,
    d: f64,
}

fn draw_plane<R: Rng>(rng: &mut R) -> Plane {
    let n = Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), 1.0).normalize();
    Plane { n, d: rng.gen_range(7.0..9.0) }
}

fn plane_point<R: Rng>(rng: &mut R, rig: &Rig, plane: &Plane) -> Option<Correspondence> {
    let (u, v) = (rng.gen_range(0.0..rig.w), rng.gen_range(0.0..rig.h));
    let ray = rig.ray(u, v);
    let s = plane.d / plane.n.dot(&ray);
    if s <= 0.0 {
        return None;
    }
    let (u2, v2) = rig.project2(&(ray * s))?;
    Some(Correspondence::new(u, v, u2, v2))
}

fn space_point<R: Rng>(rng: &mut R, rig: &Rig) -> Option<Correspondence> {
    let (u, v) = (rng.gen_range(0.0..rig.w), rng.gen_range(0.0..rig.h));
    let x = rig.ray(u, v) * rng.gen_range(DEPTH.0..DEPTH.1);
    let (u2, v2) = rig.project2(&x)?;
    Some(Correspondence::new(u, v, u2, v2))
}

fn draw<R: Rng>(rng: &mut R, mut f: impl FnMut(&mut R) -> Option<Correspondence>) -> Correspondence {
    for _ in 0..100_000 {
        if let Some(c) = f(rng) {
            return c;
        }
    }
    panic!("scene generator could not place a point");
}

/// Generates a scene; identical specs give identical scenes.
pub fn generate_scene(spec: &SceneSpec) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_points;
    let n_in = if spec.kind == SceneKind::NonMatching { 0 } else { (spec.inlier_ratio * n as f64).round() as usize };
    let translate = spec.kind != SceneKind::PureRotation;
    let rig = make_rig(&mut rng, spec, translate);
    let plane = draw_plane(&mut rng);
    let calibration = Calibration { k1: rig.k, k2: rig.k, known: true };

    let mut inliers: Vec<Correspondence> = Vec::with_capacity(n_in);
    let mut gt: Vec<Correspondence> = Vec::with_capacity(spec.gt_pairs);
    let gt_model = match spec.kind {
        SceneKind::Homography => {
            for _ in 0..n_in {
                inliers.push(draw(&mut rng, |r| plane_point(r, &rig, &plane)));
            }
            for _ in 0..spec.gt_pairs {
                gt.push(draw(&mut rng, |r| plane_point(r, &rig, &plane)));
            }
            let h = rig.k * (rig.r + rig.t * plane.n.transpose() / plane.d) * rig.k_inv;
            Some(Model::Homography(h / h.norm()))
        }
        SceneKind::PureRotation => {
            let h = rig.k * rig.r * rig.k_inv;
            let map = |r: &mut ChaCha8Rng| {
                let (u, v) = (r.gen_range(0.0..rig.w), r.gen_range(0.0..rig.h));
                rig.project2(&rig.ray(u, v)).map(|(u2, v2)| Correspondence::new(u, v, u2, v2))
            };
            for _ in 0..n_in {
                inliers.push(draw(&mut rng, map));
            }
            for _ in 0..spec.gt_pairs {
                gt.push(draw(&mut rng, map));
            }
            Some(Model::Homography(h / h.norm()))
        }
        SceneKind::Fundamental | SceneKind::DominantPlane => {
            let planar = if spec.kind == SceneKind::DominantPlane {
                (spec.plane_fraction * n_in as f64).round() as usize
            } else {
                0
            };
            for i in 0..n_in {
                inliers.push(if i < planar {
                    draw(&mut rng, |r| plane_point(r, &rig, &plane))
                } else {
                    draw(&mut rng, |r| space_point(r, &rig))
                });
            }
            for _ in 0..spec.gt_pairs {
                gt.push(draw(&mut rng, |r| space_point(r, &rig)));
            }
            Some(Model::Fundamental(rig.fundamental()))
        }
        SceneKind::NonMatching => None,
    };

    let mut items: Vec<(Correspondence, bool)> = inliers.into_iter().map(|c| (noisy(&mut rng, c, spec.noise_sigma), true)).collect();
    let n_out = n - items.len();
    if spec.kind == SceneKind::NonMatching {
        let dup_target = (spec.duplicate_fraction * n_out as f64).round() as usize;
        let mut outs: Vec<Correspondence> = Vec::with_capacity(n_out);
        let jitter = Normal::new(0.0, 0.5).unwrap();
        while outs.len() < n_out - dup_target.min(n_out) {
            outs.push(uniform_pair(&mut rng, spec.width, spec.height));
        }
        let mut dups = 0;
        while dups < dup_target.min(n_out) && !outs.is_empty() {
            let base = outs[rng.gen_range(0..outs.len())];
            let size = rng.gen_range(1..=5).min(dup_target - dups);
            for _ in 0..size {
                outs.push(Correspondence::new(
                    base.x1 + jitter.sample(&mut rng),
                    base.y1 + jitter.sample(&mut rng),
                    base.x2 + jitter.sample(&mut rng),
                    base.y2 + jitter.sample(&mut rng),
                ));
            }
            dups += size;
        }
        items.extend(outs.into_iter().map(|c| (c, false)));
    } else {
        for _ in 0..n_out {
            items.push((uniform_pair(&mut rng, spec.width, spec.height), false));
        }
    }
    items.shuffle(&mut rng);
    let mut mask = FixedBitSet::with_capacity(items.len());
    let corrs = items
        .iter()
        .enumerate()
        .map(|(i, (c, inl))| {
            let q = if *inl {
                mask.insert(i);
                rng.gen_range(0.4..1.0)
            } else {
                rng.gen_range(0.0..0.8)
            };
            c.with_quality(q)
        })
        .collect();
    let gt_pairs = gt.into_iter().map(|c| noisy(&mut rng, c, spec.gt_noise)).collect();
    let mean_depth = (DEPTH.0 + DEPTH.1) / 2.0;
    Scene { corrs, gt_model, gt_mask: mask, gt_pairs, calibration, translation_ratio: rig.t.norm() / mean_depth }
}

/// 2D-3D correspondences of a random camera viewing points in general position.
pub fn generate_p6p(seed: u64, n: usize, noise_sigma: f64) -> (Vec<(Point2<f64>, Point3<f64>)>, Matrix3x4<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = SceneSpec::new(SceneKind::Fundamental, seed);
    let rig = make_rig(&mut rng, &spec, true);
    let mut rt = Matrix3x4::zeros();
    rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&rig.r);
    rt.set_column(3, &rig.t);
    let p = rig.k * rt;
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).unwrap();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let x = Vector3::new(rng.gen_range(-4.0..4.0), rng.gen_range(-3.0..3.0), rng.gen_range(DEPTH.0..DEPTH.1));
        if let Some((u, v)) = rig.project2(&x) {
            let (du, dv) = if noise_sigma > 0.0 { (noise.sample(&mut rng), noise.sample(&mut rng)) } else { (0.0, 0.0) };
            out.push((Point2::new(u + du, v + dv), Point3::from(x)));
        }
    }
    (out, p / p.norm())
}
