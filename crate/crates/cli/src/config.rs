//! Flat `key = value` experiment configuration.
//!
//! Lines starting with `#` are comments. Unknown keys are rejected. Numbers accept
//! fractions such as `2/3` and `inf`. Lists are comma separated.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use mfglab::solver::{HjScheme, DEFAULT_DOMAIN_FACTOR, MAX_CFL};
use mfglab::{Error, Params, Result, Variant};

/// How the initial (or planning terminal) density is built.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DataSpec {
    /// `m = (R - c (x - center)^2)_+^(1/theta)` on `[a0, b0]`, scaled to the given mass.
    Bump { a0: f64, b0: f64 },
    /// The self-similar density at the corresponding time of the run window.
    SelfSimilar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldFormat {
    Csv,
    Binary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub theta: f64,
    pub mass: f64,
    /// Start of the run window; the run covers `[t0, t0 + horizon]`.
    pub t0: f64,
    pub horizon: f64,
    /// `None` selects `1 / (1 - alpha)`, which makes self-similar data exact.
    pub kappa_t: Option<f64>,
    pub variant: Variant,
    pub initial: DataSpec,
    pub terminal: DataSpec,
    /// Mass of the planning terminal density; defaults to `mass`.
    pub terminal_mass: Option<f64>,
    pub nx: usize,
    pub domain_factor: f64,
    pub cfl: f64,
    pub speed_safety: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub hj_scheme: HjScheme,
    pub norms: Vec<f64>,
    pub window: Option<(f64, f64)>,
    pub samples: usize,
    pub error_bound: f64,
    pub hamiltonian_tol: f64,
    pub output_dir: PathBuf,
    pub output_stride: usize,
    pub output_full: bool,
    pub output_format: FieldFormat,
    pub sweep_theta: Vec<f64>,
    pub sweep_mass: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            theta: 2.0,
            mass: 1.0,
            t0: 0.0,
            horizon: 1.0,
            kappa_t: None,
            variant: Variant::TerminalCost,
            initial: DataSpec::Bump { a0: -1.0, b0: 1.0 },
            terminal: DataSpec::SelfSimilar,
            terminal_mass: None,
            nx: 512,
            domain_factor: DEFAULT_DOMAIN_FACTOR,
            cfl: MAX_CFL,
            speed_safety: 1.5,
            tol: 5e-5,
            max_iter: 300,
            hj_scheme: HjScheme::LaxFriedrichs,
            norms: vec![1.0, f64::INFINITY],
            window: None,
            samples: 41,
            error_bound: 5e-3,
            hamiltonian_tol: 2e-2,
            output_dir: PathBuf::from("out"),
            output_stride: 10,
            output_full: false,
            output_format: FieldFormat::Csv,
            sweep_theta: Vec::new(),
            sweep_mass: Vec::new(),
        }
    }
}

fn bad(field: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.to_string(),
        message: message.into(),
    }
}

pub fn parse_number(field: &str, raw: &str) -> Result<f64> {
    let s = raw.trim();
    let value = match s.split_once('/') {
        Some((a, b)) => {
            let (a, b) = (f64::from_str(a.trim()), f64::from_str(b.trim()));
            match (a, b) {
                (Ok(a), Ok(b)) if b != 0.0 => a / b,
                _ => return Err(bad(field, format!("`{s}` is not a number or fraction"))),
            }
        }
        None => f64::from_str(s).map_err(|_| bad(field, format!("`{s}` is not a number")))?,
    };
    if value.is_nan() {
        return Err(bad(field, "NaN is not allowed"));
    }
    Ok(value)
}

fn parse_list(field: &str, raw: &str) -> Result<Vec<f64>> {
    if raw.trim().is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',').map(|s| parse_number(field, s)).collect()
}

fn parse_usize(field: &str, raw: &str) -> Result<usize> {
    raw.trim()
        .parse()
        .map_err(|_| bad(field, format!("`{}` is not a nonnegative integer", raw.trim())))
}

fn parse_bool(field: &str, raw: &str) -> Result<bool> {
    match raw.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(bad(field, format!("`{other}` is not a boolean"))),
    }
}

fn fmt_number(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:?}")
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|&x| fmt_number(x)).collect::<Vec<_>>().join(",")
}

fn scheme_name(s: HjScheme) -> &'static str {
    match s {
        HjScheme::Godunov => "godunov",
        HjScheme::GodunovEno2 => "godunov_eno2",
        HjScheme::LaxFriedrichs => "lax_friedrichs",
    }
}

const KEYS: &[&str] = &[
    "theta",
    "mass",
    "t0",
    "horizon",
    "kappa_T",
    "variant",
    "initial",
    "bump.a0",
    "bump.b0",
    "terminal",
    "terminal.a0",
    "terminal.b0",
    "terminal.mass",
    "nx",
    "domain_factor",
    "cfl",
    "speed_safety",
    "tol",
    "max_iter",
    "hj_scheme",
    "diagnostics.norms",
    "diagnostics.window",
    "diagnostics.samples",
    "diagnostics.error_bound",
    "diagnostics.hamiltonian_tol",
    "output.dir",
    "output.stride",
    "output.full",
    "output.format",
    "sweep.theta",
    "sweep.mass",
];

/// Splits a config file into raw key-value pairs.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(bad(&format!("line {}", k + 1), format!("expected `key = value`, got `{line}`")));
        };
        let key = key.trim();
        if !KEYS.contains(&key) {
            return Err(bad(key, "unknown key"));
        }
        if out.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(bad(key, "given twice"));
        }
    }
    Ok(out)
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let mut c = Self::default();
        let get = |k: &str| pairs.get(k).map(String::as_str);
        let num = |k: &str, dflt: f64| get(k).map_or(Ok(dflt), |v| parse_number(k, v));
        c.theta = num("theta", c.theta)?;
        c.mass = num("mass", c.mass)?;
        c.t0 = num("t0", c.t0)?;
        c.horizon = num("horizon", c.horizon)?;
        c.kappa_t = get("kappa_T").map(|v| parse_number("kappa_T", v)).transpose()?;
        if let Some(v) = get("variant") {
            c.variant = v.parse().map_err(|e| bad("variant", e))?;
        }
        let data = |which: &str, prefix: &str| -> Result<DataSpec> {
            match get(which).unwrap_or(if which == "initial" { "bump" } else { "self_similar" }) {
                "bump" => Ok(DataSpec::Bump {
                    a0: num(&format!("{prefix}.a0"), -1.0)?,
                    b0: num(&format!("{prefix}.b0"), 1.0)?,
                }),
                "self_similar" => Ok(DataSpec::SelfSimilar),
                other => Err(bad(which, format!("unknown data `{other}` (expected bump or self_similar)"))),
            }
        };
        c.initial = data("initial", "bump")?;
        c.terminal = data("terminal", "terminal")?;
        c.terminal_mass = get("terminal.mass").map(|v| parse_number("terminal.mass", v)).transpose()?;
        if let Some(v) = get("nx") {
            c.nx = parse_usize("nx", v)?;
        }
        c.domain_factor = num("domain_factor", c.domain_factor)?;
        c.cfl = num("cfl", c.cfl)?;
        c.speed_safety = num("speed_safety", c.speed_safety)?;
        c.tol = num("tol", c.tol)?;
        if let Some(v) = get("max_iter") {
            c.max_iter = parse_usize("max_iter", v)?;
        }
        if let Some(v) = get("hj_scheme") {
            c.hj_scheme = v.parse()?;
        }
        if let Some(v) = get("diagnostics.norms") {
            c.norms = parse_list("diagnostics.norms", v)?;
        }
        if let Some(v) = get("diagnostics.window") {
            match parse_list("diagnostics.window", v)?.as_slice() {
                [lo, hi] => c.window = Some((*lo, *hi)),
                _ => return Err(bad("diagnostics.window", "expected `lo, hi`")),
            }
        }
        if let Some(v) = get("diagnostics.samples") {
            c.samples = parse_usize("diagnostics.samples", v)?;
        }
        c.error_bound = num("diagnostics.error_bound", c.error_bound)?;
        c.hamiltonian_tol = num("diagnostics.hamiltonian_tol", c.hamiltonian_tol)?;
        if let Some(v) = get("output.dir") {
            c.output_dir = PathBuf::from(v);
        }
        if let Some(v) = get("output.stride") {
            c.output_stride = parse_usize("output.stride", v)?;
        }
        if let Some(v) = get("output.full") {
            c.output_full = parse_bool("output.full", v)?;
        }
        if let Some(v) = get("output.format") {
            c.output_format = match v {
                "csv" => FieldFormat::Csv,
                "binary" => FieldFormat::Binary,
                other => return Err(bad("output.format", format!("unknown format `{other}` (expected csv or binary)"))),
            };
        }
        if let Some(v) = get("sweep.theta") {
            c.sweep_theta = parse_list("sweep.theta", v)?;
        }
        if let Some(v) = get("sweep.mass") {
            c.sweep_mass = parse_list("sweep.mass", v)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Canonical text form; `from_text(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("theta", fmt_number(self.theta));
        put("mass", fmt_number(self.mass));
        put("t0", fmt_number(self.t0));
        put("horizon", fmt_number(self.horizon));
        if let Some(k) = self.kappa_t {
            put("kappa_T", fmt_number(k));
        }
        put("variant", self.variant.as_str().to_string());
        for (which, prefix, spec) in [("initial", "bump", self.initial), ("terminal", "terminal", self.terminal)] {
            match spec {
                DataSpec::Bump { a0, b0 } => {
                    put(which, "bump".into());
                    put(&format!("{prefix}.a0"), fmt_number(a0));
                    put(&format!("{prefix}.b0"), fmt_number(b0));
                }
                DataSpec::SelfSimilar => put(which, "self_similar".into()),
            }
        }
        if let Some(m) = self.terminal_mass {
            put("terminal.mass", fmt_number(m));
        }
        put("nx", self.nx.to_string());
        put("domain_factor", fmt_number(self.domain_factor));
        put("cfl", fmt_number(self.cfl));
        put("speed_safety", fmt_number(self.speed_safety));
        put("tol", fmt_number(self.tol));
        put("max_iter", self.max_iter.to_string());
        put("hj_scheme", scheme_name(self.hj_scheme).into());
        put("diagnostics.norms", fmt_list(&self.norms));
        if let Some((lo, hi)) = self.window {
            put("diagnostics.window", fmt_list(&[lo, hi]));
        }
        put("diagnostics.samples", self.samples.to_string());
        put("diagnostics.error_bound", fmt_number(self.error_bound));
        put("diagnostics.hamiltonian_tol", fmt_number(self.hamiltonian_tol));
        put("output.dir", self.output_dir.display().to_string());
        put("output.stride", self.output_stride.to_string());
        put("output.full", self.output_full.to_string());
        put(
            "output.format",
            match self.output_format {
                FieldFormat::Csv => "csv",
                FieldFormat::Binary => "binary",
            }
            .into(),
        );
        if !self.sweep_theta.is_empty() {
            put("sweep.theta", fmt_list(&self.sweep_theta));
        }
        if !self.sweep_mass.is_empty() {
            put("sweep.mass", fmt_list(&self.sweep_mass));
        }
        s
    }

    pub fn params(&self) -> Result<Params> {
        let kappa = self.kappa_t.unwrap_or_else(|| 1.0 / (1.0 - mfglab::profiles::alpha_of(self.theta)));
        Params::new(self.theta, self.mass, self.horizon, kappa, self.variant)
    }

    pub fn t1(&self) -> f64 {
        self.t0 + self.horizon
    }

    /// Checks every field, reporting the first offending key.
    pub fn validate(&self) -> Result<()> {
        self.params()?;
        if !(self.t0 >= 0.0) || !self.t0.is_finite() {
            return Err(bad("t0", format!("must be finite and >= 0, got {}", self.t0)));
        }
        if self.initial == DataSpec::SelfSimilar && self.t0 <= 0.0 {
            return Err(bad("t0", "self-similar initial data needs t0 > 0"));
        }
        for (which, prefix, spec) in [("initial", "bump", self.initial), ("terminal", "terminal", self.terminal)] {
            if let DataSpec::Bump { a0, b0 } = spec {
                if !(a0 < b0) || !a0.is_finite() || !b0.is_finite() {
                    return Err(bad(&format!("{prefix}.a0"), format!("{which} bump needs a0 < b0, got [{a0}, {b0}]")));
                }
            }
        }
        if let Some(m) = self.terminal_mass {
            if !(m > 0.0) || !m.is_finite() {
                return Err(bad("terminal.mass", format!("must be positive, got {m}")));
            }
        }
        if self.nx < 4 {
            return Err(bad("nx", format!("need at least 4 cells, got {}", self.nx)));
        }
        if !(self.domain_factor > 0.0) || !self.domain_factor.is_finite() {
            return Err(bad("domain_factor", format!("must be positive, got {}", self.domain_factor)));
        }
        if !(self.cfl > 0.0 && self.cfl <= MAX_CFL) {
            return Err(bad("cfl", format!("must lie in (0, {MAX_CFL}], got {}", self.cfl)));
        }
        if !(self.speed_safety >= 1.0) || !self.speed_safety.is_finite() {
            return Err(bad("speed_safety", format!("must be >= 1, got {}", self.speed_safety)));
        }
        if !(self.tol > 0.0) {
            return Err(bad("tol", format!("must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(bad("max_iter", "must be positive"));
        }
        if let Some(&p) = self.norms.iter().find(|&&p| !(p >= 1.0)) {
            return Err(bad("diagnostics.norms", format!("norm exponents must be >= 1, got {p}")));
        }
        if let Some((lo, hi)) = self.window {
            if !(lo > 0.0 && lo >= self.t0 && hi > lo && hi <= self.t1()) {
                return Err(bad(
                    "diagnostics.window",
                    format!("[{lo}, {hi}] must satisfy 0 < lo < hi inside [{}, {}]", self.t0, self.t1()),
                ));
            }
        }
        if self.samples < 3 {
            return Err(bad("diagnostics.samples", format!("need at least 3, got {}", self.samples)));
        }
        if !(self.error_bound > 0.0) {
            return Err(bad("diagnostics.error_bound", "must be positive"));
        }
        if !(self.hamiltonian_tol > 0.0) {
            return Err(bad("diagnostics.hamiltonian_tol", "must be positive"));
        }
        if self.output_stride == 0 {
            return Err(bad("output.stride", "must be positive"));
        }
        if let Some(&t) = self.sweep_theta.iter().find(|&&t| !(t > 0.0) || !t.is_finite()) {
            return Err(bad("sweep.theta", format!("values must be positive, got {t}")));
        }
        if let Some(&m) = self.sweep_mass.iter().find(|&&m| !(m > 0.0) || !m.is_finite()) {
            return Err(bad("sweep.mass", format!("values must be positive, got {m}")));
        }
        Ok(())
    }

    /// Diagnostics window: from `max(t0, 1, mid / 10)` to the middle of the run.
    pub fn diagnostics_window(&self) -> (f64, f64) {
        self.window.unwrap_or_else(|| {
            let hi = self.t0 + 0.5 * self.horizon;
            let lo = self.t0.max(1.0).max(hi / 10.0);
            if lo < hi {
                (lo, hi)
            } else {
                (self.t0.max(1e-3 * self.t1()), self.t1())
            }
        })
    }

    /// Cartesian product of the sweep lists, theta outermost.
    pub fn sweep_points(&self) -> Vec<(f64, f64)> {
        let thetas = if self.sweep_theta.is_empty() { vec![self.theta] } else { self.sweep_theta.clone() };
        let masses = if self.sweep_mass.is_empty() { vec![self.mass] } else { self.sweep_mass.clone() };
        thetas.iter().flat_map(|&t| masses.iter().map(move |&m| (t, m))).collect()
    }
}
