//! Command-line experiment runner.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 non-convergence,
//! 4 failed check or internal error.

mod config;
mod pipeline;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand};
use serde_json::json;

use config::ExperimentConfig;
use mfglab::profiles::coupling;
use mfglab::{Error, SelfSimilarProfile};
use pipeline::{write_csv, write_json};

/// Environment variable overriding the default number of sweep workers.
pub const WORKERS_ENV: &str = "MFGLAB_WORKERS";

#[derive(Debug)]
pub enum CliError {
    Config(Error),
    NotConverged(String),
    Check(String),
    Io(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::Domain(_) | Error::Cfl { .. } => CliError::Config(e),
            other => CliError::Check(other.to_string()),
        }
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::NotConverged(_) => 3,
            CliError::Check(_) | CliError::Io(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "{e}"),
            CliError::NotConverged(s) | CliError::Check(s) | CliError::Io(s) => f.write_str(s),
        }
    }
}

#[derive(Parser)]
#[command(name = "mfglab", version, about = "Self-similar asymptotics of first-order mean field games")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tabulate the stationary self-similar profile.
    Profile {
        #[arg(long)]
        theta: f64,
        #[arg(long)]
        mass: f64,
        /// Number of samples across the support (odd, so that eta = 0 is included).
        #[arg(long, default_value_t = 401)]
        points: usize,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Solve one configuration and dump fields, free boundary and report.
    Solve { config: PathBuf },
    /// Solve, rescale and fit decay rates.
    Asymptotics { config: PathBuf },
    /// Run the pipeline over `sweep.theta` x `sweep.mass`.
    Sweep {
        config: PathBuf,
        /// Worker threads; defaults to $MFGLAB_WORKERS, then the available cores.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Solve and run the invariant suite.
    Check { config: PathBuf },
}

fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(ExperimentConfig::from_text(&text)?)
}

fn cmd_profile(theta: f64, mass: f64, points: usize, out: &Path) -> Result<(), CliError> {
    if points < 3 || points % 2 == 0 {
        return Err(Error::Config {
            field: "points".into(),
            message: format!("must be odd and >= 3, got {points}"),
        }
        .into());
    }
    let profile = SelfSimilarProfile::new(mass, theta)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    let c = profile.support_half_width;
    let half = (points - 1) / 2;
    let rows = (0..points).map(|j| {
        let eta = if j == half { 0.0 } else { c * (j as f64 - half as f64) / half as f64 };
        let v = profile.eval_stationary(eta);
        vec![Some(eta), Some(v.m), v.u.map(|u| u + 0.0)]
    });
    write_csv(&out.join("profile.csv"), &["eta", "M", "U"], rows)?;
    write_json(
        &out.join("profile.json"),
        &json!({
            "theta": theta,
            "mass": mass,
            "R_a": profile.r_a,
            "alpha": profile.alpha,
            "support_half_width": c,
            "peak_coupling": coupling(profile.stationary_density(0.0), theta),
        }),
    )
}

fn converged_or(run: &pipeline::Run) -> Result<(), CliError> {
    let r = &run.sol.report;
    if r.converged {
        Ok(())
    } else {
        Err(CliError::NotConverged(format!(
            "not converged after {} iterations (residual {:e}, tol {:e})",
            r.iterations,
            r.residual_history.last().copied().unwrap_or(f64::NAN),
            run.config.tol
        )))
    }
}

fn cmd_solve(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let run = pipeline::solve(cfg)?;
    let dir = &cfg.output_dir;
    let mut files = pipeline::write_solve_outputs(&run, dir)?;
    files.push("summary.json".into());
    write_json(&dir.join("summary.json"), &pipeline::summary(&run, files, None))?;
    converged_or(&run)
}

/// Solve and asymptotics into one directory. Returns the run and its rates.
fn full_pipeline(cfg: &ExperimentConfig) -> Result<(pipeline::Run, serde_json::Value), CliError> {
    let run = pipeline::solve(cfg)?;
    let dir = &cfg.output_dir;
    let mut files = pipeline::write_solve_outputs(&run, dir)?;
    let asy = pipeline::asymptotics(&run);
    files.extend(pipeline::write_asymptotics(&run, &asy, dir)?);
    files.push("summary.json".into());
    write_json(&dir.join("summary.json"), &pipeline::summary(&run, files, Some(asy.rates.clone())))?;
    Ok((run, asy.rates))
}

fn cmd_asymptotics(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let (run, _) = full_pipeline(cfg)?;
    converged_or(&run)
}

fn worker_count(flag: Option<usize>) -> Result<usize, CliError> {
    let n = match (flag, std::env::var(WORKERS_ENV).ok()) {
        (Some(n), _) => n,
        (None, Some(v)) => v.trim().parse().map_err(|_| {
            CliError::Config(Error::Config {
                field: WORKERS_ENV.into(),
                message: format!("`{v}` is not a positive integer"),
            })
        })?,
        (None, None) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    if n == 0 {
        return Err(CliError::Config(Error::Config {
            field: "workers".into(),
            message: "must be positive".into(),
        }));
    }
    Ok(n)
}

fn exponent(rates: &serde_json::Value, quantity: &str) -> Option<f64> {
    rates["power_laws"]
        .as_array()?
        .iter()
        .find(|f| f["quantity"] == quantity)
        .and_then(|f| f["exponent_fit"].as_f64())
}

fn cmd_sweep(cfg: &ExperimentConfig, workers: Option<usize>) -> Result<(), CliError> {
    if cfg.sweep_theta.is_empty() && cfg.sweep_mass.is_empty() {
        return Err(CliError::Config(Error::Config {
            field: "sweep.theta".into(),
            message: "empty range: give sweep.theta and/or sweep.mass".into(),
        }));
    }
    let points = cfg.sweep_points();
    let workers = worker_count(workers)?.min(points.len());
    let results: Mutex<Vec<Option<Vec<Option<f64>>>>> = Mutex::new(vec![None; points.len()]);
    let statuses: Mutex<Vec<String>> = Mutex::new(vec![String::new(); points.len()]);
    let worst = AtomicUsize::new(0);
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                if k >= points.len() {
                    break;
                }
                let (theta, mass) = points[k];
                let mut point = cfg.clone();
                point.theta = theta;
                point.mass = mass;
                point.sweep_theta.clear();
                point.sweep_mass.clear();
                point.output_dir = cfg.output_dir.join(format!("point_{k:03}"));
                let alpha = mfglab::profiles::alpha_of(theta);
                let r_a = mfglab::profiles::compute_r_a(mass, theta).ok();
                let k_target = (theta < 2.0).then(|| mfglab::rescaling::exponential_rate_target(theta));
                let mut row = vec![Some(theta), Some(alpha), Some(mass), r_a, k_target, None, None, None, None];
                let outcome = point.validate().map_err(CliError::from).and_then(|_| full_pipeline(&point));
                let status = match outcome {
                    Ok((run, rates)) => {
                        row[5] = rates["exponential"]["k_fit"].as_f64();
                        row[6] = exponent(&rates, "density sup norm");
                        row[7] = exponent(&rates, "gradient sup norm");
                        row[8] = exponent(&rates, "gamma_R");
                        match converged_or(&run) {
                            Ok(()) => "ok".to_string(),
                            Err(e) => {
                                worst.fetch_max(e.code() as usize, Ordering::SeqCst);
                                format!("not converged: {e}")
                            }
                        }
                    }
                    Err(e) => {
                        worst.fetch_max(e.code() as usize, Ordering::SeqCst);
                        format!("error: {e}")
                    }
                };
                results.lock().unwrap()[k] = Some(row);
                statuses.lock().unwrap()[k] = status;
            });
        }
    });
    let rows = results.into_inner().unwrap();
    let statuses = statuses.into_inner().unwrap();
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::Io(format!("{}: {e}", cfg.output_dir.display())))?;
    let path = cfg.output_dir.join("sweep.csv");
    let header = [
        "theta",
        "alpha",
        "mass",
        "R_a",
        "k_target",
        "k_fit",
        "density_exponent",
        "gradient_exponent",
        "gamma_R_exponent",
    ];
    write_csv(&path, &header, rows.into_iter().map(|r| r.unwrap_or_default()))?;
    write_json(
        &cfg.output_dir.join("sweep_status.json"),
        &points
            .iter()
            .zip(&statuses)
            .enumerate()
            .map(|(k, (&(theta, mass), status))| {
                json!({ "point": format!("point_{k:03}"), "theta": theta, "mass": mass, "status": status })
            })
            .collect::<Vec<_>>(),
    )?;
    match worst.into_inner() {
        0 => Ok(()),
        3 => Err(CliError::NotConverged("some sweep points did not converge".into())),
        2 => Err(CliError::Config(Error::Domain("some sweep points were rejected".into()))),
        _ => Err(CliError::Check("some sweep points failed".into())),
    }
}

fn cmd_check(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let run = pipeline::solve(cfg)?;
    let results = pipeline::invariant_checks(&run);
    for r in &results {
        println!("{} {}: {}", if r.pass { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::Io(format!("{}: {e}", cfg.output_dir.display())))?;
    write_json(&cfg.output_dir.join("check.json"), &results)?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else if failed == ["converged"] {
        converged_or(&run)
    } else {
        Err(CliError::Check(format!("failed checks: {}", failed.join(", "))))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Profile { theta, mass, points, out } => cmd_profile(theta, mass, points, &out),
        Command::Solve { config } => load(&config).and_then(|c| cmd_solve(&c)),
        Command::Asymptotics { config } => load(&config).and_then(|c| cmd_asymptotics(&c)),
        Command::Sweep { config, workers } => load(&config).and_then(|c| cmd_sweep(&c, workers)),
        Command::Check { config } => load(&config).and_then(|c| cmd_check(&c)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
