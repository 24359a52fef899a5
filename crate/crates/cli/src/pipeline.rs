//! Solve, rescale and diagnose pipelines, and their output files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use mfglab::diagnostics::{
    displacement_convexity_check, free_boundary_rates_in, geometric_times, gradient_rate_check_in,
    hamiltonian_conservation, smoothing_check_in, RateFit,
};
use mfglab::lagrangian::{
    extract_free_boundary, fit_free_boundary, integrate_flow, mass_identity_defect, FreeBoundary, DEFAULT_FIT_BAND,
    DEFAULT_THRESHOLD,
};
use mfglab::rescaling::{
    convergence_metrics, exponential_rate_target, fit_exponential_rate, lyapunov, rescale, LyapunovTrace,
    MIN_R_SQUARED,
};
use mfglab::solver::{
    estimate_max_speed, make_bump_initial, self_similar_initial, solve_planning, solve_terminal_cost, GridSpec,
    Solution, SolverOptions,
};
use mfglab::{Error, Field, Grid, Params, SelfSimilarProfile, SolveReport, Variant};

use crate::config::{DataSpec, ExperimentConfig, FieldFormat};
use crate::CliError;

pub const VERSION: &str = concat!("mfglab ", env!("CARGO_PKG_VERSION"));

pub struct Run {
    pub config: ExperimentConfig,
    pub params: Params,
    pub grid: Grid,
    pub sol: Solution,
}

fn data_extent(spec: DataSpec, profile: &SelfSimilarProfile, t: f64) -> (f64, f64) {
    match spec {
        DataSpec::Bump { a0, b0 } => (0.5 * (a0 + b0), 0.5 * (b0 - a0)),
        DataSpec::SelfSimilar => (0.0, profile.support_edge(t)),
    }
}

fn build_data(spec: DataSpec, mass: f64, theta: f64, t: f64, grid: &Grid) -> mfglab::Result<Vec<f64>> {
    match spec {
        DataSpec::Bump { a0, b0 } => make_bump_initial(a0, b0, mass, theta, grid),
        DataSpec::SelfSimilar => self_similar_initial(&SelfSimilarProfile::new(mass, theta)?, t, grid),
    }
}

pub fn solve(config: &ExperimentConfig) -> Result<Run, CliError> {
    let params = config.params()?;
    let profile = SelfSimilarProfile::for_params(&params)?;
    let (t0, t1) = (config.t0, config.t1());
    let (center, half) = data_extent(config.initial, &profile, t0);
    let spec = GridSpec {
        nx: config.nx,
        domain_factor: config.domain_factor,
        cfl: config.cfl,
        max_speed: estimate_max_speed(center, half, &params, config.speed_safety)?,
    };
    let grid = Grid::for_run(params.alpha(), t0, t1, &spec)?;
    let m0 = build_data(config.initial, params.mass(), params.theta(), t0, &grid)?;
    let opts = SolverOptions {
        tol: config.tol,
        max_iter: config.max_iter,
        cfl: config.cfl,
        hj_scheme: config.hj_scheme,
        ..Default::default()
    };
    let sol = match params.variant() {
        Variant::Planning => {
            let mass = config.terminal_mass.unwrap_or(params.mass());
            let mt = build_data(config.terminal, mass, params.theta(), t1, &grid)?;
            solve_planning(&m0, &mt, &params, &grid, &opts)?
        }
        _ => solve_terminal_cost(&m0, &params, &grid, &opts)?,
    };
    Ok(Run {
        config: config.clone(),
        params,
        grid,
        sol,
    })
}

impl Run {
    pub fn profile(&self) -> mfglab::Result<SelfSimilarProfile> {
        SelfSimilarProfile::for_params(&self.params)
    }

    /// Free-boundary traces from the flank fit, falling back to thresholding.
    pub fn free_boundary(&self) -> mfglab::Result<FreeBoundary> {
        fit_free_boundary(&self.sol.m, self.params.theta(), DEFAULT_FIT_BAND)
            .or_else(|_| extract_free_boundary(&self.sol.m, self.params.theta(), DEFAULT_THRESHOLD))
    }

    /// `max_n |m(., t_n) - M(., t_n)|_1` against the self-similar density of the same mass.
    pub fn self_similar_error(&self) -> mfglab::Result<f64> {
        let profile = self.profile()?;
        let g = self.grid;
        let mut worst = 0.0f64;
        for n in 0..=g.nt {
            let exact = self_similar_initial(&profile, g.t(n), &g)?;
            let err = self.sol.m.row(n).iter().zip(&exact).map(|(a, b)| (a - b).abs()).sum::<f64>() * g.dx;
            worst = worst.max(err);
        }
        Ok(worst)
    }

    pub fn mass_defect(&self) -> f64 {
        let m0 = self.sol.m.integral(0);
        (0..=self.grid.nt)
            .map(|n| (self.sol.m.integral(n) - m0).abs() / m0)
            .fold(0.0, f64::max)
    }

    /// Whether the run data are the self-similar pair itself.
    pub fn is_self_similar(&self) -> bool {
        let exact_kappa = (self.params.kappa_t() - 1.0 / (1.0 - self.params.alpha())).abs() < 1e-12;
        self.config.initial == DataSpec::SelfSimilar
            && match self.params.variant() {
                Variant::Planning => {
                    self.config.terminal == DataSpec::SelfSimilar
                        && self.config.terminal_mass.map_or(true, |m| m == self.params.mass())
                }
                _ => exact_kappa,
            }
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Writes rows of numbers under a header line. Empty cells stand for undefined values.
pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<Option<f64>>>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(header).map_err(|e| io_err(path, e))?;
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| v.map(|x| format!("{x:e}")).unwrap_or_default()).collect();
        w.write_record(&cells).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn dumped_levels(run: &Run) -> Vec<usize> {
    let nt = run.grid.nt;
    let stride = if run.config.output_full { 1 } else { run.config.output_stride };
    let mut levels: Vec<usize> = (0..=nt).step_by(stride).collect();
    if levels.last() != Some(&nt) {
        levels.push(nt);
    }
    levels
}

fn write_field(dir: &Path, name: &str, field: &Field, run: &Run) -> Result<PathBuf, CliError> {
    let g = run.grid;
    let levels = dumped_levels(run);
    match run.config.output_format {
        FieldFormat::Csv => {
            let path = dir.join(format!("{name}.csv"));
            let rows = levels
                .iter()
                .flat_map(|&n| (0..g.nx).map(move |i| vec![Some(g.t(n)), Some(g.x(i)), Some(field.values()[(n, i)])]));
            write_csv(&path, &["t", "x", name], rows)?;
            Ok(path)
        }
        FieldFormat::Binary => {
            let path = dir.join(format!("{name}.bin"));
            let mut bytes = Vec::with_capacity(levels.len() * g.nx * 8);
            for &n in &levels {
                for v in field.row(n).iter() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
            fs::File::create(&path)
                .and_then(|mut f| f.write_all(&bytes))
                .map_err(|e| io_err(&path, e))?;
            let header = json!({
                "layout": "little-endian f64, row-major (time level, cell)",
                "nx": g.nx,
                "x": g.xs(),
                "t": levels.iter().map(|&n| g.t(n)).collect::<Vec<_>>(),
            });
            write_json(&dir.join(format!("{name}.json")), &header)?;
            Ok(path)
        }
    }
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Record of one run: the config echo reproduces it when fed back in.
#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub version: &'static str,
    pub config: String,
    pub report: SolveReport,
    pub grid: Grid,
    pub mass_defect: f64,
    /// Max L1 distance to the self-similar density, when the data are self-similar.
    pub self_similar_l1_error: Option<f64>,
    pub files: Vec<String>,
    pub rates: Option<Value>,
}

/// Writes fields, the free-boundary trace and the solve report into `dir`.
pub fn write_solve_outputs(run: &Run, dir: &Path) -> Result<Vec<String>, CliError> {
    create_dir(dir)?;
    let mut files = Vec::new();
    fs::write(dir.join("config.txt"), run.config.to_text()).map_err(|e| io_err(dir, e))?;
    files.push("config.txt".to_string());
    files.push(file_name(&write_field(dir, "m", &run.sol.m, run)?));
    files.push(file_name(&write_field(dir, "u", &run.sol.u, run)?));
    if let Ok(fb) = run.free_boundary() {
        let path = dir.join("free_boundary.csv");
        let rows = (0..fb.t_samples.len()).map(|k| vec![Some(fb.t_samples[k]), Some(fb.gamma_l[k]), Some(fb.gamma_r[k])]);
        write_csv(&path, &["t", "gamma_L", "gamma_R"], rows)?;
        files.push(file_name(&path));
    }
    write_json(&dir.join("report.json"), &run.sol.report)?;
    files.push("report.json".to_string());
    Ok(files)
}

pub fn summary(run: &Run, files: Vec<String>, rates: Option<Value>) -> RunSummary {
    RunSummary {
        version: VERSION,
        config: run.config.to_text(),
        report: run.sol.report.clone(),
        grid: run.grid,
        mass_defect: run.mass_defect(),
        self_similar_l1_error: if run.is_self_similar() { run.self_similar_error().ok() } else { None },
        files,
        rates,
    }
}

fn fit_json(fit: mfglab::Result<RateFit>, quantity: &str) -> Value {
    match fit {
        Ok(f) => serde_json::to_value(f).unwrap_or(Value::Null),
        Err(e) => json!({ "quantity": quantity, "error": e.to_string() }),
    }
}

/// Rescaled quantities of a finished run.
pub struct Asymptotics {
    pub trace: Option<LyapunovTrace>,
    pub trace_error: Option<String>,
    pub rates: Value,
}

pub fn tau_samples(config: &ExperimentConfig) -> Vec<f64> {
    let (lo, hi) = config.diagnostics_window();
    let (a, b) = (lo.ln(), hi.ln());
    let n = config.samples;
    (0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect()
}

pub fn lyapunov_trace(run: &Run) -> mfglab::Result<LyapunovTrace> {
    let profile = run.profile()?;
    let half = 1.5 * profile.support_half_width;
    let eta: Vec<f64> = (0..801).map(|j| -half + 2.0 * half * j as f64 / 800.0).collect();
    let state = rescale(&run.sol.u, &run.sol.m, &run.params, &tau_samples(&run.config), &eta)?;
    lyapunov(&state, &profile)
}

pub fn asymptotics(run: &Run) -> Asymptotics {
    let window = run.config.diagnostics_window();
    let tau_window = (window.0.ln(), window.1.ln());
    let (trace, trace_error) = match lyapunov_trace(run) {
        Ok(t) => (Some(t), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let theta = run.params.theta();
    let exponential = if theta < 2.0 {
        match trace.as_ref().map(|t| fit_exponential_rate(t, tau_window)) {
            Some(Ok((k, r2))) => json!({
                "k_fit": k,
                "k_target": exponential_rate_target(theta),
                "r_squared": r2,
                "meaningful": r2 >= MIN_R_SQUARED,
                "tau_window": [tau_window.0, tau_window.1],
            }),
            Some(Err(e)) => json!({ "error": e.to_string() }),
            None => json!({ "error": trace_error.clone().unwrap_or_default() }),
        }
    } else {
        Value::Null
    };
    let m = &run.sol.m;
    let mut power = vec![
        fit_json(smoothing_check_in(m, &run.params, window).map(|r| r.fit), "density sup norm"),
        fit_json(
            gradient_rate_check_in(&run.sol.u, m, &run.params, window).map(|r| r.gradient),
            "gradient sup norm",
        ),
    ];
    match run.free_boundary().and_then(|fb| free_boundary_rates_in(&fb, &run.params, window)) {
        Ok(fits) => power.extend(fits.into_iter().map(|f| fit_json(Ok(f), ""))),
        Err(e) => power.push(json!({ "quantity": "gamma_R", "error": e.to_string() })),
    }
    let rates = json!({
        "theta": theta,
        "alpha": run.params.alpha(),
        "window": [window.0, window.1],
        "exponential": exponential,
        "power_laws": power,
    });
    Asymptotics {
        trace,
        trace_error,
        rates,
    }
}

/// Writes the Lyapunov trace, metric tables and rate fits into `dir`.
pub fn write_asymptotics(run: &Run, asy: &Asymptotics, dir: &Path) -> Result<Vec<String>, CliError> {
    create_dir(dir)?;
    let mut files = Vec::new();
    if let Some(tr) = &asy.trace {
        let path = dir.join("lyapunov.csv");
        let rows = (0..tr.tau.len()).map(|k| {
            vec![
                Some(tr.tau[k]),
                Some(tr.energy[k]),
                Some(tr.d_energy_numeric[k]),
                Some(tr.d_energy_formula[k]),
                tr.f_critical.as_ref().map(|f| f[k]),
            ]
        });
        write_csv(&path, &["tau", "E", "dE_numeric", "dE_formula", "f_critical"], rows)?;
        files.push(file_name(&path));
    }
    let profile = run.profile()?;
    let (lo, hi) = run.config.diagnostics_window();
    let ts = geometric_times(lo, hi);
    let mut rows = Vec::new();
    for &p in &run.config.norms {
        for r in convergence_metrics(&run.sol.m, &run.sol.u, &profile, p, &ts)? {
            rows.push(vec![Some(r.t), Some(p), Some(r.d1), Some(r.d2), Some(r.d3)]);
        }
    }
    let path = dir.join("metrics.csv");
    write_csv(&path, &["t", "p", "D1", "D2", "D3"], rows)?;
    files.push(file_name(&path));
    let mut rates = asy.rates.clone();
    if let Some(e) = &asy.trace_error {
        rates["lyapunov_error"] = json!(e);
    }
    write_json(&dir.join("rates.json"), &rates)?;
    files.push("rates.json".to_string());
    Ok(files)
}

/// Outcome of one invariant check.
#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &str, pass: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        pass,
        detail,
    }
}

fn check_err(name: &str, e: Error) -> CheckResult {
    check(name, false, e.to_string())
}

/// The invariant suite on a finished run.
pub fn invariant_checks(run: &Run) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let report = &run.sol.report;
    out.push(check(
        "converged",
        report.converged,
        format!("{} iterations, final residual {:e}", report.iterations, report.residual_history.last().copied().unwrap_or(f64::NAN)),
    ));
    let mass = run.mass_defect();
    out.push(check("mass conservation", mass <= 1e-12, format!("relative defect {mass:e} (<= 1e-12)")));
    let theta = run.params.theta();
    for p in [2.0, theta + 1.0] {
        let name = format!("displacement convexity p = {p}");
        out.push(match displacement_convexity_check(&run.sol.m, p) {
            Ok(r) => check(
                &name,
                r.convex,
                format!("min second difference {:e} (>= -{:e})", r.min_second_difference, r.tolerance),
            ),
            Err(e) => check_err(&name, e),
        });
    }
    let tol = run.config.hamiltonian_tol;
    out.push(match hamiltonian_conservation(&run.sol.u, &run.sol.m, theta) {
        Ok(h) => check("Hamiltonian conservation", h.drift <= tol, format!("drift {:e} (<= {tol:e})", h.drift)),
        Err(e) => check_err("Hamiltonian conservation", e),
    });
    if run.params.variant() != Variant::Planning {
        out.push(match run.free_boundary() {
            Ok(fb) => check(
                "free boundary expands",
                fb.is_expanding(2.0 * run.grid.dx),
                format!("gamma_L nonincreasing and gamma_R nondecreasing up to {:e}", 2.0 * run.grid.dx),
            ),
            Err(e) => check_err("free boundary expands", e),
        });
    }
    let m0 = run.sol.m.row(0);
    let peak = m0.iter().fold(0.0f64, |a, &b| a.max(b));
    let sources: Vec<f64> = (0..run.grid.nx)
        .filter(|&i| m0[i] >= 0.6 * peak)
        .map(|i| run.grid.x(i))
        .step_by((run.grid.nx / 64).max(1))
        .collect();
    out.push(match integrate_flow(&run.sol.u, &sources) {
        Ok(flow) => {
            let d = mass_identity_defect(&run.sol.m, &flow, 1e-6);
            check("Lagrangian mass identity", d <= 2e-2, format!("defect {d:e} (<= 2e-2)"))
        }
        Err(e) => check_err("Lagrangian mass identity", e),
    });
    if (theta - 2.0).abs() > 1e-12 {
        out.push(match lyapunov_trace(run) {
            Ok(tr) => {
                let (pass, detail) = if theta < 2.0 {
                    let lo = tr.energy.iter().copied().fold(f64::INFINITY, f64::min);
                    (lo >= -1e-6, format!("min E {lo:e} (>= -1e-6)"))
                } else {
                    let hi = tr.energy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    (hi <= 1e-6, format!("max E {hi:e} (<= 1e-6)"))
                };
                check("Lyapunov sign", pass, detail)
            }
            Err(e) => check_err("Lyapunov sign", e),
        });
    }
    if run.is_self_similar() {
        let bound = run.config.error_bound;
        out.push(match run.self_similar_error() {
            Ok(e) => check("self-similar exactness", e <= bound, format!("max L1 error {e:e} (<= {bound:e})")),
            Err(e) => check_err("self-similar exactness", e),
        });
    }
    out
}
