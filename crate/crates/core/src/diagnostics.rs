//! Power-law rate fits and structural identities evaluated on solver output.
//!
//! Every rate is an ordinary least-squares slope of log-log samples taken at geometrically
//! spaced times with ratio `2^(1/4)`.

use serde::Serialize;

use crate::error::{domain, Error, Result};
use crate::lagrangian::FreeBoundary;
use crate::profiles::{coupling, Params, Variant};
use crate::solver::{centered_gradient, Field};

/// Ratio between consecutive sample times of a rate fit.
pub const SAMPLE_RATIO: f64 = 1.189_207_115_002_721; // 2^(1/4)

/// Relative half-spacing of the 5-point stencils used on boundary traces.
const STENCIL_STEP: f64 = 0.1;

/// Cells with `m^theta` above this fraction of its maximum count as the support in the
/// gradient check.
const SUPPORT_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y = slope x + intercept`.
pub fn linear_fit(xs: &[f64], ys: &[f64], quantity: &str) -> Result<LinearFit> {
    let degenerate = |reason: String| Error::DegenerateFit {
        quantity: quantity.to_string(),
        reason,
    };
    if xs.len() != ys.len() {
        return Err(degenerate(format!("{} abscissae but {} ordinates", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(degenerate(format!("{} samples, need at least 3", xs.len())));
    }
    if ys.iter().chain(xs).any(|v| !v.is_finite()) {
        return Err(degenerate("non-finite sample".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(degenerate("abscissae have zero variance".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs.iter().zip(ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    let r_squared = if syy > 0.0 { (1.0 - sse / syy).clamp(0.0, 1.0) } else { 1.0 };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

/// A fitted power law `q(t) ~ t^exponent`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateFit {
    pub quantity: String,
    pub exponent_fit: f64,
    pub exponent_target: f64,
    pub r_squared: f64,
    pub window: (f64, f64),
    /// Whether the sampled quantity had its expected sign everywhere, when one is expected.
    pub sign_consistent: Option<bool>,
}

impl RateFit {
    pub fn deviation(&self) -> f64 {
        (self.exponent_fit - self.exponent_target).abs()
    }

    pub fn within(&self, tol: f64) -> bool {
        self.deviation() <= tol && self.sign_consistent.unwrap_or(true)
    }
}

/// `lo, lo r, lo r^2, ...` up to `hi`, with `hi` itself appended when the last step falls short.
pub fn geometric_times(lo: f64, hi: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut t = lo;
    while t <= hi * (1.0 + 1e-12) {
        out.push(t.min(hi));
        t *= SAMPLE_RATIO;
    }
    if let Some(&last) = out.last() {
        if last < hi * (1.0 - 1e-9) && hi / last > SAMPLE_RATIO.sqrt() {
            out.push(hi);
        }
    }
    out
}

fn power_fit(quantity: &str, ts: &[f64], values: &[f64], target: f64, window: (f64, f64)) -> Result<RateFit> {
    if let Some(k) = values.iter().position(|v| !(v.abs() > 0.0)) {
        return Err(Error::DegenerateFit {
            quantity: quantity.to_string(),
            reason: format!("zero value at t = {}", ts[k]),
        });
    }
    let xs: Vec<f64> = ts.iter().map(|t| t.ln()).collect();
    let ys: Vec<f64> = values.iter().map(|v| v.abs().ln()).collect();
    let fit = linear_fit(&xs, &ys, quantity)?;
    Ok(RateFit {
        quantity: quantity.to_string(),
        exponent_fit: fit.slope,
        exponent_target: target,
        r_squared: fit.r_squared,
        window,
        sign_consistent: None,
    })
}

/// Default fitting window: from `max(t0, 1)` to the middle of the run.
pub fn default_window(field: &Field) -> (f64, f64) {
    let g = field.grid();
    (g.t0.max(1.0), 0.5 * (g.t0 + g.t1))
}

fn check_window(field: &Field, window: (f64, f64), decade: bool) -> Result<()> {
    let g = field.grid();
    let (lo, hi) = window;
    if !(lo > 0.0) || lo < g.t0 - 1e-12 || hi > g.t1 + 1e-12 || !(hi > lo) {
        return domain(format!("window [{lo}, {hi}] is not inside the run [{}, {}]", g.t0, g.t1));
    }
    if decade && hi < 10.0 * lo * (1.0 - 1e-12) {
        return domain(format!("window [{lo}, {hi}] spans less than one decade"));
    }
    Ok(())
}

/// Cell values of `field` at time `t`, linear between levels.
pub fn row_at(field: &Field, t: f64) -> Result<Vec<f64>> {
    let g = field.grid();
    let s = g.time_position(t)?;
    let n = (s.floor() as usize).min(g.nt.saturating_sub(1));
    let w = s - n as f64;
    Ok(field
        .row(n)
        .iter()
        .zip(field.row((n + 1).min(g.nt)).iter())
        .map(|(a, b)| (1.0 - w) * a + w * b)
        .collect())
}

fn sup(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |acc: f64, v| acc.max(v.abs()))
}

/// Density decay: fits `|m(., t)|_inf ~ t^-alpha`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmoothingReport {
    pub fit: RateFit,
    /// `sup_t (1 + t^alpha) |m(., t)|_inf` over the window.
    pub scaled_sup: f64,
}

pub fn smoothing_check(m: &Field, params: &Params) -> Result<SmoothingReport> {
    smoothing_check_in(m, params, default_window(m))
}

pub fn smoothing_check_in(m: &Field, params: &Params, window: (f64, f64)) -> Result<SmoothingReport> {
    check_window(m, window, true)?;
    let alpha = params.alpha();
    let ts = geometric_times(window.0, window.1);
    let mut values = Vec::with_capacity(ts.len());
    for &t in &ts {
        values.push(sup(&row_at(m, t)?));
    }
    let scaled_sup = ts
        .iter()
        .zip(&values)
        .map(|(t, v)| (1.0 + t.powf(alpha)) * v)
        .fold(0.0, f64::max);
    Ok(SmoothingReport {
        fit: power_fit("density sup norm", &ts, &values, -alpha, window)?,
        scaled_sup,
    })
}

/// Savitzky-Golay first and second derivatives from 5 equispaced samples with step `h`.
fn smoothed_derivatives(f: [f64; 5], h: f64) -> (f64, f64) {
    let d1 = (-2.0 * f[0] - f[1] + f[3] + 2.0 * f[4]) / (10.0 * h);
    let d2 = (2.0 * f[0] - f[1] - 2.0 * f[2] - f[3] + 2.0 * f[4]) / (7.0 * h * h);
    (d1, d2)
}

/// Growth of the right free boundary: fits `gamma_R ~ t^alpha`, `|gamma_R'| ~ t^(alpha-1)`
/// and `|gamma_R''| ~ t^(alpha-2)`. The last fit also records whether `gamma_L'' > 0` and
/// `gamma_R'' < 0` at every sample.
pub fn free_boundary_rates(fb: &FreeBoundary, params: &Params) -> Result<Vec<RateFit>> {
    let t_first = fb.t_samples[0];
    let t_last = *fb.t_samples.last().unwrap();
    free_boundary_rates_in(fb, params, (t_first.max(1.0), 0.5 * (t_first + t_last)))
}

pub fn free_boundary_rates_in(fb: &FreeBoundary, params: &Params, window: (f64, f64)) -> Result<Vec<RateFit>> {
    let t_first = fb.t_samples[0];
    let t_last = *fb.t_samples.last().unwrap();
    let (lo, mut hi) = window;
    if params.variant() == Variant::Planning {
        hi = hi.min(0.5 * (t_first + t_last));
    }
    if !(lo > 0.0) || !(hi > lo) {
        return domain(format!("empty free-boundary window [{lo}, {hi}]"));
    }
    let reach = 1.0 + 2.0 * STENCIL_STEP;
    if lo * (1.0 - 2.0 * STENCIL_STEP) < t_first - 1e-12 || hi * reach > t_last + 1e-12 {
        return domain(format!(
            "window [{lo}, {hi}] and its stencils do not fit in the trace [{t_first}, {t_last}]"
        ));
    }
    let alpha = params.alpha();
    let ts = geometric_times(lo, hi);
    let mut pos = Vec::with_capacity(ts.len());
    let mut speed = Vec::with_capacity(ts.len());
    let mut accel = Vec::with_capacity(ts.len());
    let mut signs_ok = true;
    for &t in &ts {
        let h = STENCIL_STEP * t;
        let sample = |f: &dyn Fn(f64) -> f64| -> [f64; 5] { std::array::from_fn(|j| f(t + (j as f64 - 2.0) * h)) };
        let right = sample(&|s| fb.right_at(s));
        let left = sample(&|s| fb.left_at(s));
        let (dr, ddr) = smoothed_derivatives(right, h);
        let (_, ddl) = smoothed_derivatives(left, h);
        signs_ok &= ddr < 0.0 && ddl > 0.0;
        pos.push(fb.right_at(t));
        speed.push(dr);
        accel.push(ddr);
    }
    let mut fits = vec![
        power_fit("gamma_R", &ts, &pos, alpha, (lo, hi))?,
        power_fit("gamma_R'", &ts, &speed, alpha - 1.0, (lo, hi))?,
        power_fit("gamma_R''", &ts, &accel, alpha - 2.0, (lo, hi))?,
    ];
    fits[1].sign_consistent = Some(speed.iter().all(|&v| v > 0.0));
    fits[2].sign_consistent = Some(signs_ok);
    Ok(fits)
}

/// Gradient decay on the core of the support (`m^theta` above half its peak): fits `|u_x(., t)|_inf ~ t^(alpha-1)` and
/// `|u_t(., t)|_inf ~ t^(2(alpha-1))` with `u_t = u_x^2/2 - m^theta`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientReport {
    pub gradient: RateFit,
    pub time_derivative: RateFit,
}

pub fn gradient_rate_check(u: &Field, m: &Field, params: &Params) -> Result<GradientReport> {
    gradient_rate_check_in(u, m, params, default_window(u))
}

pub fn gradient_rate_check_in(u: &Field, m: &Field, params: &Params, window: (f64, f64)) -> Result<GradientReport> {
    if u.grid() != m.grid() {
        return domain("u and m live on different grids");
    }
    check_window(u, window, true)?;
    let alpha = params.alpha();
    let theta = params.theta();
    let dx = u.grid().dx;
    let ts = geometric_times(window.0, window.1);
    let mut grad = Vec::with_capacity(ts.len());
    let mut dt = Vec::with_capacity(ts.len());
    for &t in &ts {
        let ux = centered_gradient(&row_at(u, t)?, dx);
        let mrow = row_at(m, t)?;
        let floor = SUPPORT_FRACTION * coupling(sup(&mrow), theta);
        let (mut g, mut d) = (0.0f64, 0.0f64);
        for (gx, &mi) in ux.iter().zip(&mrow) {
            if coupling(mi, theta) > floor {
                g = g.max(gx.abs());
                d = d.max((0.5 * gx * gx - coupling(mi, theta)).abs());
            }
        }
        grad.push(g);
        dt.push(d);
    }
    if grad.windows(2).all(|w| w[0] == w[1]) {
        return Err(Error::DegenerateFit {
            quantity: "gradient sup norm".into(),
            reason: "samples have zero variance".into(),
        });
    }
    Ok(GradientReport {
        gradient: power_fit("gradient sup norm", &ts, &grad, alpha - 1.0, window)?,
        time_derivative: power_fit("time derivative sup norm", &ts, &dt, 2.0 * (alpha - 1.0), window)?,
    })
}

/// Convexity in time of `phi(t) = int m^p dx / (p (p - 1))`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvexityReport {
    pub p: f64,
    pub times: Vec<f64>,
    pub phi: Vec<f64>,
    pub min_second_difference: f64,
    pub tolerance: f64,
    pub convex: bool,
}

pub fn displacement_convexity_check(m: &Field, p: f64) -> Result<ConvexityReport> {
    if !(p > 0.0) || p == 1.0 {
        return domain(format!("exponent p must lie in (0, 1) or (1, inf), got {p}"));
    }
    let g = *m.grid();
    let pref = 1.0 / (p * (p - 1.0));
    let phi: Vec<f64> = (0..=g.nt)
        .map(|n| pref * m.row(n).iter().map(|v| v.powf(p)).sum::<f64>() * g.dx)
        .collect();
    let min_second_difference = phi
        .windows(3)
        .map(|w| w[0] - 2.0 * w[1] + w[2])
        .fold(f64::INFINITY, f64::min);
    let scale = sup(&phi).max(f64::MIN_POSITIVE);
    let tolerance = (g.dx + g.dt) * g.dt * scale;
    let min_second_difference = if min_second_difference.is_finite() { min_second_difference } else { 0.0 };
    Ok(ConvexityReport {
        p,
        times: g.ts(),
        phi,
        min_second_difference,
        tolerance,
        convex: min_second_difference >= -tolerance,
    })
}

/// Localized energy `I(t0) = int_{t0/2}^{2 t0} int ((m^((theta+eps)/2))_x)^2 dx dt` and its decay
/// `t0^-(1 - alpha (1 - eps))`.
pub fn energy_rate_check(m: &Field, params: &Params, eps: f64) -> Result<RateFit> {
    let g = m.grid();
    let window = (2.0 * g.t0.max(0.5), 0.25 * g.t1);
    energy_rate_check_in(m, params, eps, window)
}

pub fn energy_rate_check_in(m: &Field, params: &Params, eps: f64, window: (f64, f64)) -> Result<RateFit> {
    if !(eps > 0.0 && eps < 1.0) {
        return domain(format!("eps must lie in (0, 1), got {eps}"));
    }
    let g = *m.grid();
    let (lo, hi) = window;
    if !(lo > 0.0) || 0.5 * lo < g.t0 - 1e-12 || 2.0 * hi > g.t1 + 1e-12 || !(hi > lo) {
        return domain(format!(
            "window [{lo}, {hi}] needs [t0/2, 2 t0] inside the run [{}, {}]",
            g.t0, g.t1
        ));
    }
    let q = 0.5 * (params.theta() + eps);
    let level_energy: Vec<f64> = (0..=g.nt)
        .map(|n| {
            let powered: Vec<f64> = m.row(n).iter().map(|v| v.powf(q)).collect();
            centered_gradient(&powered, g.dx).iter().map(|d| d * d).sum::<f64>() * g.dx
        })
        .collect();
    let ts = geometric_times(lo, hi);
    let values: Vec<f64> = ts
        .iter()
        .map(|&t0| {
            let (a, b) = (0.5 * t0, 2.0 * t0);
            (0..=g.nt)
                .filter(|&n| g.t(n) >= a - 1e-12 && g.t(n) <= b + 1e-12)
                .map(|n| level_energy[n] * g.dt)
                .sum::<f64>()
        })
        .collect();
    power_fit("localized energy", &ts, &values, -(1.0 - params.alpha() * (1.0 - eps)), window)
}

/// Drift of `H(t) = int (m u_x^2 / 2 - m^(theta+1)/(theta+1)) dx`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HamiltonianReport {
    pub times: Vec<f64>,
    pub hamiltonian: Vec<f64>,
    /// `max_t |H(t) - H(t0)| / (|H(t0)| + 1)`.
    pub drift: f64,
}

pub fn hamiltonian_conservation(u: &Field, m: &Field, theta: f64) -> Result<HamiltonianReport> {
    if u.grid() != m.grid() {
        return domain("u and m live on different grids");
    }
    let g = *m.grid();
    let hamiltonian: Vec<f64> = (0..=g.nt)
        .map(|n| {
            let ux = u.centered_gradient(n);
            m.row(n)
                .iter()
                .zip(&ux)
                .map(|(&mi, gx)| 0.5 * mi * gx * gx - mi.powf(theta + 1.0) / (theta + 1.0))
                .sum::<f64>()
                * g.dx
        })
        .collect();
    let h0 = hamiltonian[0];
    let drift = hamiltonian.iter().map(|h| (h - h0).abs()).fold(0.0, f64::max) / (h0.abs() + 1.0);
    Ok(HamiltonianReport {
        times: g.ts(),
        hamiltonian,
        drift,
    })
}
