//! Benchmark campaigns: repeated estimation per method and input, timing, accuracy on
//! ground-truth pairs and win fractions, emitted as an aligned table and CSV.

use std::fmt::Write as _;
use std::time::Instant;

use thiserror::Error;

use crate::engine::{estimate_parallel, Verdict, VsacConfig};
use crate::geometry::{Calibration, Correspondence, ModelKind};
use crate::metrics::{evaluate_error, ErrorSummary};

pub const CSV_HEADER: &str = "method,input,t_med_ms,t_avg_ms,t_max_ms,eps_med,eps_avg,eps_max,win_t,win_eps,verdict";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Vsac,
    VsacNoSprt,
    VsacNoLo,
    PlainRansac,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Vsac, Method::VsacNoSprt, Method::VsacNoLo, Method::PlainRansac];

    pub fn name(self) -> &'static str {
        match self {
            Method::Vsac => "vsac",
            Method::VsacNoSprt => "vsac_no_sprt",
            Method::VsacNoLo => "vsac_no_lo",
            Method::PlainRansac => "plain_ransac",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn config(self, kind: ModelKind) -> VsacConfig {
        match self {
            Method::Vsac => VsacConfig::new(kind),
            Method::VsacNoSprt => VsacConfig { sprt: false, ..VsacConfig::new(kind) },
            Method::VsacNoLo => VsacConfig { lo: None, ..VsacConfig::new(kind) },
            Method::PlainRansac => VsacConfig::plain(kind),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchInput {
    pub name: String,
    pub kind: ModelKind,
    pub corrs: Vec<Correspondence>,
    pub gt_pairs: Vec<Correspondence>,
    pub calibration: Option<Calibration>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BenchError {
    #[error("no methods given")]
    NoMethods,
    #[error("no inputs given")]
    NoInputs,
    #[error("repeats must be positive")]
    NoRepeats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: String,
    pub input: String,
    pub t_med: f64,
    pub t_avg: f64,
    pub t_max: f64,
    pub eps_med: f64,
    pub eps_avg: f64,
    pub eps_max: f64,
    /// Share of repeats where this method had the lowest time (ties count for all).
    pub win_t: f64,
    /// Share of repeats where this method had the lowest median error.
    pub win_eps: f64,
    pub verdict: String,
}

struct Run {
    time_ms: f64,
    eps: Option<ErrorSummary>,
    verdict: String,
}

fn verdict_name(v: Verdict) -> &'static str {
    match v {
        Verdict::Success => "success",
        Verdict::RejectedRandom => "rejected_random",
        Verdict::PureRotation => "pure_rotation",
        Verdict::NoModel => "no_model",
    }
}

fn run_once(input: &BenchInput, method: Method, seed: u64, threads: usize) -> Run {
    let mut cfg = method.config(input.kind).with_seed(seed);
    cfg.calibration = input.calibration;
    cfg.thread_count = threads.max(1);
    let start = Instant::now();
    let result = estimate_parallel(&input.corrs, &cfg);
    let time_ms = start.elapsed().as_secs_f64() * 1e3;
    match result {
        Err(e) => Run { time_ms, eps: None, verdict: format!("error: {e}") },
        Ok(r) => {
            let eps = match (&r.model, input.gt_pairs.is_empty()) {
                (Some(m), false) => m.matrix3().and_then(|mm| evaluate_error(m.kind(), mm, &input.gt_pairs).ok()),
                _ => None,
            };
            Run { time_ms, eps, verdict: verdict_name(r.verdict).to_string() }
        }
    }
}

/// Runs every method `repeats` times on every input. Repeat `r` uses seed `seed + r` for
/// all methods so the per-repeat comparison is paired.
pub fn run_benchmark(
    inputs: &[BenchInput],
    methods: &[Method],
    repeats: usize,
    seed: u64,
    threads: usize,
) -> Result<Vec<BenchRow>, BenchError> {
    if methods.is_empty() {
        return Err(BenchError::NoMethods);
    }
    if inputs.is_empty() {
        return Err(BenchError::NoInputs);
    }
    if repeats == 0 {
        return Err(BenchError::NoRepeats);
    }
    let mut rows = Vec::new();
    for input in inputs {
        let runs: Vec<Vec<Run>> = methods
            .iter()
            .map(|&m| (0..repeats).map(|r| run_once(input, m, seed.wrapping_add(r as u64), threads)).collect())
            .collect();
        let mut wins_t = vec![0usize; methods.len()];
        let mut wins_eps = vec![0usize; methods.len()];
        for r in 0..repeats {
            let best_t = runs.iter().map(|v| v[r].time_ms).fold(f64::INFINITY, f64::min);
            let eps_of = |run: &Run| run.eps.map_or(f64::INFINITY, |e| e.med);
            let best_eps = runs.iter().map(|v| eps_of(&v[r])).fold(f64::INFINITY, f64::min);
            for (k, v) in runs.iter().enumerate() {
                wins_t[k] += usize::from(v[r].time_ms <= best_t);
                wins_eps[k] += usize::from(best_eps.is_finite() && eps_of(&v[r]) <= best_eps);
            }
        }
        for (k, (&method, v)) in methods.iter().zip(&runs).enumerate() {
            let times: Vec<f64> = v.iter().map(|r| r.time_ms).collect();
            let t = ErrorSummary::from_errors(&times).expect("repeats > 0");
            let meds: Vec<f64> = v.iter().filter_map(|r| r.eps.map(|e| e.med)).collect();
            let avgs: Vec<f64> = v.iter().filter_map(|r| r.eps.map(|e| e.avg)).collect();
            let maxs: Vec<f64> = v.iter().filter_map(|r| r.eps.map(|e| e.max)).collect();
            let agg = |xs: &[f64], f: fn(&ErrorSummary) -> f64| ErrorSummary::from_errors(xs).map_or(f64::NAN, |s| f(&s));
            let first = &v[0].verdict;
            let verdict = if v.iter().all(|r| &r.verdict == first) { first.clone() } else { "mixed".to_string() };
            rows.push(BenchRow {
                method: method.name().to_string(),
                input: input.name.clone(),
                t_med: t.med,
                t_avg: t.avg,
                t_max: t.max,
                eps_med: agg(&meds, |s| s.med),
                eps_avg: agg(&avgs, |s| s.avg),
                eps_max: agg(&maxs, |s| s.max),
                win_t: wins_t[k] as f64 / repeats as f64,
                win_eps: wins_eps[k] as f64 / repeats as f64,
                verdict,
            });
        }
    }
    Ok(rows)
}

fn num(v: f64) -> String {
    format!("{v:.4}")
}

fn cells(r: &BenchRow) -> [String; 11] {
    [
        r.method.clone(),
        r.input.clone(),
        num(r.t_med),
        num(r.t_avg),
        num(r.t_max),
        num(r.eps_med),
        num(r.eps_avg),
        num(r.eps_max),
        num(r.win_t),
        num(r.win_eps),
        r.verdict.clone(),
    ]
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let _ = w.write_record(CSV_HEADER.split(','));
    for r in rows {
        let _ = w.write_record(cells(r));
    }
    String::from_utf8(w.into_inner().unwrap_or_default()).unwrap_or_default()
}

/// Aligned text table with the same numbers as the CSV.
pub fn to_text(rows: &[BenchRow]) -> String {
    let header: Vec<String> = CSV_HEADER.split(',').map(str::to_string).collect();
    let body: Vec<[String; 11]> = rows.iter().map(cells).collect();
    let mut width: Vec<usize> = header.iter().map(String::len).collect();
    for row in &body {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut s = String::new();
    let line = |s: &mut String, row: &[String]| {
        let parts: Vec<String> = row.iter().zip(&width).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(s, "{}", parts.join("  ").trim_end());
    };
    line(&mut s, &header);
    for row in &body {
        line(&mut s, row);
    }
    s
}
