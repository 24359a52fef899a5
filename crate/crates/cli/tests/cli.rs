use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mfglab"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env_remove("MFGLAB_WORKERS").output().expect("spawn mfglab")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Writes `body` plus an absolute `output.dir` and returns the config path and output dir.
fn config(dir: &TempDir, name: &str, body: &str) -> (PathBuf, PathBuf) {
    let out = dir.path().join(format!("{name}_out"));
    let path = dir.path().join(format!("{name}.cfg"));
    std::fs::write(&path, format!("{body}\noutput.dir = {}\n", out.display())).unwrap();
    (path, out)
}

fn table(path: &Path) -> (Vec<String>, Vec<Vec<Option<f64>>>) {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(|c| c.trim().parse().ok()).collect())
        .collect();
    (header, rows)
}

fn column(path: &Path, name: &str) -> Vec<Option<f64>> {
    let (header, rows) = table(path);
    let j = header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    rows.into_iter().map(|r| r[j]).collect()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn profile_matches_closed_form_radius() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("p");
    let o = run(&["profile", "--theta", "2", "--mass", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let meta = json(&out.join("profile.json"));
    let r_a = meta["R_a"].as_f64().unwrap();
    let oracle = 1.0 / (std::f64::consts::PI * 2f64.sqrt());
    assert!((r_a - oracle).abs() < 1e-10, "R_a = {r_a}, expected {oracle}");

    let eta = column(&out.join("profile.csv"), "eta");
    let m = column(&out.join("profile.csv"), "M");
    let centre = eta.iter().position(|e| *e == Some(0.0)).expect("eta = 0 row");
    assert!((m[centre].unwrap() - r_a.sqrt()).abs() < 1e-12);
    assert_eq!(m[0], Some(0.0));
    assert_eq!(*m.last().unwrap(), Some(0.0));
}

#[test]
fn profile_without_mass_is_a_usage_error() {
    let o = run(&["profile", "--theta", "2"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn profile_rejects_nonpositive_theta() {
    let dir = TempDir::new().unwrap();
    let o = run(&["profile", "--theta", "0", "--mass", "1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn self_similar_solve_stays_within_configured_bound() {
    let dir = TempDir::new().unwrap();
    let (cfg, out) = config(
        &dir,
        "ss",
        "theta = 2\nt0 = 1\nhorizon = 9\ninitial = self_similar\nnx = 256\ndiagnostics.error_bound = 2e-2",
    );
    let o = run(&["solve", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["report"]["converged"], Value::Bool(true));
    let err = summary["self_similar_l1_error"].as_f64().unwrap();
    assert!(err <= 2e-2, "L1 error {err}");
    assert!(summary["mass_defect"].as_f64().unwrap() <= 1e-12);
    for f in ["m.csv", "u.csv", "free_boundary.csv", "report.json", "config.txt"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
}

#[test]
fn planning_mass_mismatch_is_rejected() {
    let dir = TempDir::new().unwrap();
    let (cfg, _) = config(
        &dir,
        "plan",
        "variant = planning\nt0 = 1\nhorizon = 9\ninitial = self_similar\nterminal.mass = 1.5\nnx = 64",
    );
    let o = run(&["solve", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("compatibility condition"));
}

#[test]
fn unknown_key_is_named_in_the_error() {
    let dir = TempDir::new().unwrap();
    let (cfg, _) = config(&dir, "bad", "nx = 64\nhorizn = 2");
    let o = run(&["solve", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("horizn"));
}

#[test]
fn tiny_grid_runs() {
    let dir = TempDir::new().unwrap();
    let (cfg, out) = config(&dir, "tiny", "nx = 8\nhorizon = 0.5");
    let o = run(&["solve", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("summary.json").exists());
}

#[test]
fn critical_case_formula_derivative_vanishes() {
    let dir = TempDir::new().unwrap();
    let (cfg, out) = config(&dir, "crit", "theta = 2\nhorizon = 20\nnx = 256");
    let o = run(&["asymptotics", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let d = column(&out.join("lyapunov.csv"), "dE_formula");
    assert!(!d.is_empty());
    assert!(d.iter().all(|v| *v == Some(0.0)), "{d:?}");
    assert!(column(&out.join("lyapunov.csv"), "f_critical").iter().all(Option::is_some));
}

#[test]
fn supercritical_rate_is_near_target() {
    let dir = TempDir::new().unwrap();
    let (cfg, out) = config(&dir, "sup", "theta = 1\nhorizon = 150\nnx = 1024\nmax_iter = 1000\ndiagnostics.window = 10, 100");
    let o = run(&["asymptotics", cfg.to_str().unwrap()]);
    assert!([0, 3].contains(&code(&o)), "{}", String::from_utf8_lossy(&o.stderr));
    let rates = json(&out.join("rates.json"));
    let k = rates["exponential"]["k_fit"].as_f64().unwrap();
    let target = 1.0 / 3.0;
    assert!((rates["exponential"]["k_target"].as_f64().unwrap() - target).abs() < 1e-12);
    assert!((k - target).abs() <= 0.2 * target, "k_fit = {k}");
}

#[test]
fn subcritical_energy_is_nonpositive_and_nondecreasing() {
    let dir = TempDir::new().unwrap();
    let (cfg, out) = config(&dir, "sub", "theta = 4\nhorizon = 50\nnx = 1024");
    let o = run(&["asymptotics", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let e: Vec<f64> = column(&out.join("lyapunov.csv"), "E").into_iter().map(Option::unwrap).collect();
    let max = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(max <= 1e-6, "max E = {max:e}");
    let drop = e.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max);
    assert!(drop <= 1e-6, "largest decrease of E = {drop:e}");
}

#[test]
fn theta_sweep_tabulates_every_point() {
    let dir = TempDir::new().unwrap();
    let (cfg, out) = config(&dir, "sw", "horizon = 20\nnx = 128\nsweep.theta = 2/3, 1, 3, 4");
    let o = run(&["sweep", cfg.to_str().unwrap(), "--workers", "2"]);
    assert!([0, 3].contains(&code(&o)), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = out.join("sweep.csv");
    let theta = column(&csv, "theta");
    let alpha = column(&csv, "alpha");
    assert_eq!(theta.len(), 4);
    for ((want, t), a) in [2.0 / 3.0, 1.0, 3.0, 4.0].iter().zip(theta).zip(alpha) {
        let t = t.unwrap();
        assert!((t - want).abs() < 1e-12);
        assert!((a.unwrap() - 2.0 / (2.0 + t)).abs() < 1e-12);
    }
    for k in 0..4 {
        assert!(out.join(format!("point_{k:03}")).is_dir());
    }
}

#[test]
fn mass_sweep_scales_radius() {
    let dir = TempDir::new().unwrap();
    let (cfg, out) = config(&dir, "swm", "horizon = 20\nnx = 128\nsweep.mass = 1, 2");
    let o = run(&["sweep", cfg.to_str().unwrap()]);
    assert!([0, 3].contains(&code(&o)), "{}", String::from_utf8_lossy(&o.stderr));
    let r = column(&out.join("sweep.csv"), "R_a");
    assert_eq!(r.len(), 2);
    // theta = 2: R_a scales like mass^(2 theta / (theta + 2)) = mass
    assert!((r[1].unwrap() / r[0].unwrap() - 2.0).abs() < 1e-10);
}

#[test]
fn empty_sweep_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let (cfg, _) = config(&dir, "swe", "nx = 128");
    let o = run(&["sweep", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn runs_are_deterministic() {
    let dir = TempDir::new().unwrap();
    let (a, out_a) = config(&dir, "a", "theta = 3\nhorizon = 10\nnx = 128");
    let (b, out_b) = config(&dir, "b", "theta = 3\nhorizon = 10\nnx = 128");
    assert_eq!(code(&run(&["asymptotics", a.to_str().unwrap()])), 0);
    assert_eq!(code(&run(&["asymptotics", b.to_str().unwrap()])), 0);
    for f in ["m.csv", "u.csv", "lyapunov.csv", "metrics.csv", "rates.json", "free_boundary.csv"] {
        let x = std::fs::read(out_a.join(f)).unwrap();
        let y = std::fs::read(out_b.join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
}

#[test]
fn echoed_config_reproduces_the_run() {
    let dir = TempDir::new().unwrap();
    let (cfg, out) = config(&dir, "orig", "theta = 1\nhorizon = 8\nnx = 128");
    assert_eq!(code(&run(&["asymptotics", cfg.to_str().unwrap()])), 0);
    let echoed = json(&out.join("summary.json"))["config"].as_str().unwrap().to_string();
    let replay_out = dir.path().join("replay_out");
    let replay: String = echoed
        .lines()
        .map(|l| if l.starts_with("output.dir") { format!("output.dir = {}", replay_out.display()) } else { l.to_string() })
        .collect::<Vec<_>>()
        .join("\n");
    let replay_cfg = dir.path().join("replay.cfg");
    std::fs::write(&replay_cfg, replay).unwrap();
    assert_eq!(code(&run(&["asymptotics", replay_cfg.to_str().unwrap()])), 0);
    for f in ["m.csv", "u.csv", "lyapunov.csv", "rates.json"] {
        assert!(std::fs::read(out.join(f)).unwrap() == std::fs::read(replay_out.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn check_reports_each_invariant() {
    let dir = TempDir::new().unwrap();
    let (cfg, out) = config(&dir, "chk", "theta = 3\nhorizon = 10\nnx = 512");
    let o = run(&["check", cfg.to_str().unwrap()]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!([0, 4].contains(&code(&o)));
    let results = json(&out.join("check.json"));
    let names: Vec<&str> = results.as_array().unwrap().iter().map(|r| r["name"].as_str().unwrap()).collect();
    assert!(names.len() >= 5);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).count(), names.len());
    let mass = results.as_array().unwrap().iter().find(|r| r["name"].as_str().unwrap().contains("mass")).unwrap();
    assert_eq!(mass["pass"], Value::Bool(true));
}
