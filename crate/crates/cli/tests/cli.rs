use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vsac(args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_vsac"));
    cmd.args(args).env_remove("VSAC_SEED");
    if let Some(s) = seed_env {
        cmd.env("VSAC_SEED", s);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Report without the timing line, which varies between runs.
fn stable(o: &Output) -> String {
    stdout(o).lines().filter(|l| !l.starts_with("iterations:")).collect::<Vec<_>>().join("\n")
}

fn synth(dir: &Path, name: &str, settings: &str) -> String {
    let path = dir.join(name);
    let mut args = vec!["synth"];
    args.extend(settings.split_whitespace());
    let p = path.to_str().unwrap().to_string();
    args.extend(["-o", &p]);
    let o = vsac(&args, None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    p
}

#[test]
fn synth_then_estimate_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let file = synth(dir.path(), "h.txt", "kind=h seed=3 ratio=0.5");
    assert!(dir.path().join("h.model").is_file());
    assert!(dir.path().join("h.gt").is_file());
    assert!(dir.path().join("h.k").is_file());
    let model = dir.path().join("est.model");
    let inliers = dir.path().join("inl.txt");
    let o = vsac(
        &["estimate", &file, "--seed", "1", "--correct", "--model-out", model.to_str().unwrap(), "--inliers-out", inliers.to_str().unwrap()],
        None,
    );
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("verdict: success"));
    assert_eq!(fs::read_to_string(&model).unwrap().lines().count(), 3);
    assert!(fs::read_to_string(&inliers).unwrap().lines().count() > 100);

    let o = vsac(&["xval", &file], None);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("pairs: 30"));
}

#[test]
fn fundamental_with_calibration() {
    let dir = tempfile::tempdir().unwrap();
    let file = synth(dir.path(), "f.txt", "kind=dominant_plane seed=4");
    let k = dir.path().join("f.k");
    let o = vsac(&["estimate", &file, "--problem", "f", "--seed", "2", "--k", k.to_str().unwrap()], None);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
}

#[test]
fn random_input_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let file = synth(dir.path(), "r.txt", "kind=non_matching seed=5");
    let o = vsac(&["estimate", &file, "--seed", "5"], None);
    assert_eq!(code(&o), 2, "{}", stdout(&o));
    assert!(stdout(&o).contains("verdict: rejected_random"));
}

#[test]
fn collinear_input_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("line.txt");
    let text: String = (0..20).map(|i| format!("{i} {i} {} {}\n", 2 * i, 3 * i)).collect();
    fs::write(&path, text).unwrap();
    let o = vsac(&["estimate", path.to_str().unwrap()], None);
    assert_eq!(code(&o), 3, "{}", stdout(&o));
}

#[test]
fn rotation_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let file = synth(dir.path(), "rot.txt", "kind=pure_rotation seed=6");
    let k = dir.path().join("rot.k");
    let o = vsac(&["estimate", &file, "--problem", "f", "--seed", "6", "--k", k.to_str().unwrap()], None);
    assert_eq!(code(&o), 4, "{}", stdout(&o));
}

#[test]
fn usage_and_io_errors_exit_with_one() {
    assert_eq!(code(&vsac(&["estimate", "/nonexistent/pairs.txt"], None)), 1);
    assert_eq!(code(&vsac(&["frobnicate"], None)), 1);
    assert_eq!(code(&vsac(&["synth", "colour=red", "-o", "/tmp/never.txt"], None)), 1);
    let dir = tempfile::tempdir().unwrap();
    let file = synth(dir.path(), "h.txt", "kind=h seed=1");
    assert_eq!(code(&vsac(&["estimate", &file, "--threshold", "-1"], None)), 1);
    assert_eq!(code(&vsac(&["estimate", &file], Some("abc"))), 1);
    assert_eq!(code(&vsac(&["bench", &file, "--methods", "nope"], None)), 1);
}

#[test]
fn seed_flag_wins_over_environment() {
    let dir = tempfile::tempdir().unwrap();
    let file = synth(dir.path(), "f.txt", "kind=f seed=8 ratio=0.3");
    let env_only = vsac(&["estimate", &file, "--problem", "f"], Some("5"));
    let flag = vsac(&["estimate", &file, "--problem", "f", "--seed", "5"], Some("9"));
    let again = vsac(&["estimate", &file, "--problem", "f"], Some("5"));
    assert_eq!(code(&env_only), 0);
    assert_eq!(stable(&env_only), stable(&flag));
    assert_eq!(stable(&env_only), stable(&again));
    // A malformed variable is ignored when the flag is given.
    assert_eq!(code(&vsac(&["estimate", &file, "--problem", "f", "--seed", "5"], Some("abc"))), 0);
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let file = synth(dir.path(), "h.txt", "kind=h seed=2");
    let report = dir.path().join("report.csv");
    let o = vsac(&["bench", &file, "kind=f,seed=3", "--methods", "vsac,vsac_no_lo", "--repeats", "2", "-o", report.to_str().unwrap()], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&report).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "method,input,t_med_ms,t_avg_ms,t_max_ms,eps_med,eps_avg,eps_max,win_t,win_eps,verdict");
    assert_eq!(lines.count(), 4);
}
