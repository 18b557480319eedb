use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use vsac::bench::{run_benchmark, to_csv, to_text, BenchInput, Method};
use vsac::engine::{estimate_parallel, EstimationReport, Verdict, VsacConfig};
use vsac::geometry::{Calibration, ModelKind};
use vsac::io::{
    companion, fmt_sig, format_model, format_pairs, load_calibration, load_correspondences, save_calibration,
    save_dataset, save_model, Dataset, Format,
};
use vsac::metrics::{cross_validate, ErrorSummary};
use vsac::sampling::SamplerKind;
use vsac::synth::{generate_scene, SceneKind, SceneSpec};

/// Robust homography and fundamental matrix estimation from point correspondences.
#[derive(Parser)]
#[command(name = "vsac", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Problem {
    H,
    F,
}

impl Problem {
    fn kind(self) -> ModelKind {
        match self {
            Problem::H => ModelKind::Homography,
            Problem::F => ModelKind::Fundamental,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Estimate a model from a correspondence file.
    Estimate {
        file: PathBuf,
        #[arg(long, value_enum, default_value = "h")]
        problem: Problem,
        /// Inlier threshold in pixels.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        conf: Option<f64>,
        /// Overrides VSAC_SEED.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        max_iters: Option<usize>,
        /// Move inliers exactly onto the model.
        #[arg(long)]
        correct: bool,
        /// Intrinsics: 9 numbers for both views or 18 for K1 then K2.
        #[arg(long)]
        k: Option<PathBuf>,
        /// Write the model here.
        #[arg(long)]
        model_out: Option<PathBuf>,
        /// Write the inliers (corrected with --correct) here.
        #[arg(long)]
        inliers_out: Option<PathBuf>,
    },
    /// Generate a synthetic scene from key=value settings.
    Synth {
        /// e.g. kind=f n=500 ratio=0.4 sigma=1 seed=7
        settings: Vec<String>,
        #[arg(short, required = true)]
        o: PathBuf,
    },
    /// Run methods repeatedly over files or scene settings and report timing and error.
    Bench {
        /// Correspondence files, or scene settings such as kind=h,seed=3.
        #[arg(required = true)]
        inputs: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "vsac,plain_ransac")]
        methods: Vec<String>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Problem for correspondence files and non-matching scenes.
        #[arg(long, value_enum, default_value = "h")]
        problem: Problem,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        k: Option<PathBuf>,
        /// CSV report path.
        #[arg(short)]
        o: Option<PathBuf>,
    },
    /// Leave-one-out error of the ground-truth pairs of a file.
    Xval {
        file: PathBuf,
        #[arg(long, value_enum, default_value = "h")]
        problem: Problem,
    },
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("VSAC_SEED") {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("VSAC_SEED={v:?} is not an unsigned integer"))?)),
        Err(_) => Ok(None),
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<Option<u64>> {
    Ok(match flag {
        Some(s) => Some(s),
        None => env_seed()?,
    })
}

fn load(path: &Path) -> Result<Dataset> {
    Ok(load_correspondences(path, Format::from_path(path))?)
}

fn verdict_name(v: Verdict) -> &'static str {
    match v {
        Verdict::Success => "success",
        Verdict::RejectedRandom => "rejected_random",
        Verdict::PureRotation => "pure_rotation",
        Verdict::NoModel => "no_model",
    }
}

/// 0 success, 2 random, 3 no model, 4 pure rotation (a homography instead of the
/// requested fundamental matrix).
fn exit_code(v: Verdict) -> u8 {
    match v {
        Verdict::Success => 0,
        Verdict::RejectedRandom => 2,
        Verdict::NoModel => 3,
        Verdict::PureRotation => 4,
    }
}

fn summary(r: &EstimationReport, points: usize) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "verdict: {}", verdict_name(r.verdict));
    let _ = writeln!(s, "inliers: {} / {points}", r.inlier_count);
    let _ = writeln!(s, "independent inliers: {}", r.independent_inliers);
    if let Some(l) = r.lambda_hat {
        let _ = writeln!(s, "random support mean: {}", fmt_sig(l));
    }
    let _ = writeln!(s, "confidence: {}", fmt_sig(r.confidence_best_model));
    let _ = writeln!(s, "non-random confidence: {}", fmt_sig(r.confidence_nonrandom));
    if let Some(d) = r.degeneracy {
        let _ = writeln!(s, "degeneracy: {d:?}");
    }
    let st = &r.stats;
    let _ = writeln!(
        s,
        "iterations: {}  models: {}  lo: {}  degensac: {}  time: {:.3} ms",
        st.iterations,
        st.models_scored,
        st.lo_runs,
        st.degensac_runs,
        st.wall_time.as_secs_f64() * 1e3
    );
    if let Some(m) = &r.model {
        let _ = writeln!(s, "model ({:?}):", m.kind());
        s.push_str(&format_model(m));
    }
    s
}

#[allow(clippy::too_many_arguments)]
fn cmd_estimate(
    file: &Path,
    problem: Problem,
    threshold: Option<f64>,
    conf: Option<f64>,
    seed: Option<u64>,
    threads: usize,
    max_iters: Option<usize>,
    correct: bool,
    k: Option<&Path>,
    model_out: Option<&Path>,
    inliers_out: Option<&Path>,
) -> Result<u8> {
    let data = load(file)?;
    let mut cfg = VsacConfig::new(problem.kind());
    if let Some(s) = resolve_seed(seed)? {
        cfg.rng_seed = s;
    }
    if let Some(t) = threshold {
        cfg.threshold = t;
    }
    if let Some(c) = conf {
        cfg.confidence = c;
    }
    if let Some(m) = max_iters {
        cfg.max_iterations = m;
    }
    if data.has_quality {
        cfg.sampler = SamplerKind::Prosac;
    }
    cfg.thread_count = threads;
    cfg.correct_points = correct;
    if let Some(k) = k {
        cfg.calibration = Some(load_calibration(k)?);
    }
    let report = estimate_parallel(&data.corrs, &cfg)?;
    print!("{}", summary(&report, data.corrs.len()));
    if let (Some(path), Some(m)) = (model_out, &report.model) {
        save_model(path, m)?;
    }
    if let Some(path) = inliers_out {
        let pairs: Vec<_> = if correct {
            report.corrected_points.iter().map(|c| c.corrected).collect()
        } else {
            report.inlier_mask.ones().map(|i| data.corrs[i]).collect()
        };
        std::fs::write(path, format_pairs(&pairs, false)).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(exit_code(report.verdict))
}

fn cmd_synth(settings: &[String], out: &Path) -> Result<u8> {
    let spec = SceneSpec::from_assignments(settings)?;
    let scene = generate_scene(&spec);
    let data = Dataset { corrs: scene.corrs, has_quality: false, model_values: None, gt_pairs: Some(scene.gt_pairs) };
    save_dataset(out, &data, scene.gt_model.as_ref())?;
    save_calibration(&companion(out, "k"), &scene.calibration)?;
    println!(
        "{}: {} pairs, {} inliers, kind {}, seed {}",
        out.display(),
        data.corrs.len(),
        scene.gt_mask.count_ones(..),
        spec.kind.name(),
        spec.seed
    );
    Ok(0)
}

fn scene_kind_problem(kind: SceneKind, fallback: ModelKind) -> ModelKind {
    match kind {
        SceneKind::Homography | SceneKind::PureRotation => ModelKind::Homography,
        SceneKind::Fundamental | SceneKind::DominantPlane => ModelKind::Fundamental,
        SceneKind::NonMatching => fallback,
    }
}

fn bench_input(arg: &str, problem: ModelKind, calibration: Option<Calibration>) -> Result<BenchInput> {
    let path = Path::new(arg);
    if path.is_file() {
        let data = load(path)?;
        return Ok(BenchInput {
            name: arg.to_string(),
            kind: problem,
            corrs: data.corrs,
            gt_pairs: data.gt_pairs.unwrap_or_default(),
            calibration,
        });
    }
    if !arg.contains('=') {
        bail!("{arg}: no such file");
    }
    let spec = SceneSpec::from_assignments(&[arg])?;
    let scene = generate_scene(&spec);
    Ok(BenchInput {
        name: arg.to_string(),
        kind: scene_kind_problem(spec.kind, problem),
        corrs: scene.corrs,
        gt_pairs: scene.gt_pairs,
        calibration: calibration.or(Some(scene.calibration)),
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    inputs: &[String],
    methods: &[String],
    repeats: usize,
    problem: Problem,
    seed: Option<u64>,
    threads: usize,
    k: Option<&Path>,
    out: Option<&Path>,
) -> Result<u8> {
    let methods = methods
        .iter()
        .map(|m| Method::parse(m.trim()).with_context(|| format!("unknown method {m:?}")))
        .collect::<Result<Vec<_>>>()?;
    let calibration = k.map(load_calibration).transpose()?;
    let inputs = inputs.iter().map(|a| bench_input(a, problem.kind(), calibration)).collect::<Result<Vec<_>>>()?;
    let rows = run_benchmark(&inputs, &methods, repeats, resolve_seed(seed)?.unwrap_or(0), threads)?;
    print!("{}", to_text(&rows));
    if let Some(path) = out {
        std::fs::write(path, to_csv(&rows)).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(0)
}

fn cmd_xval(file: &Path, problem: Problem) -> Result<u8> {
    let data = load(file)?;
    // The companion ground truth when present, otherwise the file itself.
    let pairs = data.gt_pairs.unwrap_or(data.corrs);
    let ErrorSummary { med, avg, max } = cross_validate(problem.kind(), &pairs)?;
    println!("pairs: {}", pairs.len());
    println!("med: {}  avg: {}  max: {}", fmt_sig(med), fmt_sig(avg), fmt_sig(max));
    Ok(0)
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Estimate { file, problem, threshold, conf, seed, threads, max_iters, correct, k, model_out, inliers_out } => {
            cmd_estimate(
                &file,
                problem,
                threshold,
                conf,
                seed,
                threads,
                max_iters,
                correct,
                k.as_deref(),
                model_out.as_deref(),
                inliers_out.as_deref(),
            )
        }
        Command::Synth { settings, o } => cmd_synth(&settings, &o),
        Command::Bench { inputs, methods, repeats, problem, seed, threads, k, o } => {
            cmd_bench(&inputs, &methods, repeats, problem, seed, threads, k.as_deref(), o.as_deref())
        }
        Command::Xval { file, problem } => cmd_xval(&file, problem),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
