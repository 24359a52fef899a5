//! Continuous rescaling of a solution and the functionals built on it.
//!
//! With `eta = x t^-alpha` and `tau = log t`,
//!
//! ```text
//! mu(eta, tau) = t^alpha m(x, t),   v(eta, tau) = t^(1 - 2 alpha) u(x, t),   w = v + alpha eta^2 / 2
//! ```
//!
//! The self-similar pair becomes the stationary profile `(M_a, U_a)` and `w_eta` vanishes on
//! its support.

use ndarray::Array2;
use serde::Serialize;

use crate::diagnostics::linear_fit;
use crate::error::{domain, Error, Result};
use crate::profiles::{coupling, Params, SelfSimilarProfile, Variant};
use crate::solver::Field;

/// Densities at or below this value are treated as outside the support when differentiating `w`.
pub const DEFAULT_MU_FLOOR: f64 = 1e-8;

/// Exponential fits below this coefficient of determination are not meaningful.
pub const MIN_R_SQUARED: f64 = 0.98;

/// Rescaled fields sampled on `tau x eta`, indexed `(tau, eta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RescaledState {
    pub eta: Vec<f64>,
    pub tau: Vec<f64>,
    pub mu: Array2<f64>,
    pub v: Array2<f64>,
    pub w: Array2<f64>,
    pub theta: f64,
    pub alpha: f64,
    pub mass: f64,
}

impl RescaledState {
    /// `int mu(., tau_k) d eta` by the trapezoid rule.
    pub fn mass_at(&self, k: usize) -> f64 {
        let row: Vec<f64> = self.mu.row(k).to_vec();
        trapezoid(&self.eta, &row)
    }

    /// The stationary profile itself, with `v = U_a` extended past the support.
    pub fn stationary(profile: &SelfSimilarProfile, tau: &[f64], eta: &[f64]) -> Self {
        let shape = (tau.len(), eta.len());
        let mu = Array2::from_shape_fn(shape, |(_, j)| profile.stationary_density(eta[j]));
        let v = Array2::from_shape_fn(shape, |(_, j)| -0.5 * profile.alpha * eta[j] * eta[j]);
        let w = Array2::zeros(shape);
        Self {
            eta: eta.to_vec(),
            tau: tau.to_vec(),
            mu,
            v,
            w,
            theta: profile.theta,
            alpha: profile.alpha,
            mass: profile.mass,
        }
    }
}

/// Samples the continuous rescaling of `(u, m)` at the requested `tau` and `eta`.
///
/// For `theta <= 2` terminal-cost runs `u` is first shifted by `u(0, 1)`, which therefore
/// has to lie in the run window. Planning runs keep the normalization of the solver.
pub fn rescale(u: &Field, m: &Field, params: &Params, tau_samples: &[f64], eta_grid: &[f64]) -> Result<RescaledState> {
    if u.grid() != m.grid() {
        return domain("u and m live on different grids");
    }
    if eta_grid.len() < 3 || eta_grid.windows(2).any(|p| !(p[1] > p[0])) {
        return domain("eta grid needs at least three strictly increasing points");
    }
    let grid = m.grid();
    for &tau in tau_samples {
        let t = tau.exp();
        if grid.time_position(t).is_err() {
            return domain(format!(
                "tau = {tau} (t = {t}) outside the run window [{}, {}]",
                grid.t0, grid.t1
            ));
        }
    }
    let alpha = params.alpha();
    let shift = if params.theta() <= 2.0 && params.variant() != Variant::Planning {
        u.at(0.0, 1.0)
            .map_err(|_| Error::Domain("normalization u(0, 1) needs t = 1 inside the run window".into()))?
    } else {
        0.0
    };

    let shape = (tau_samples.len(), eta_grid.len());
    let mut mu = Array2::zeros(shape);
    let mut v = Array2::zeros(shape);
    let mut w = Array2::zeros(shape);
    for (k, &tau) in tau_samples.iter().enumerate() {
        let t = tau.exp();
        let scale = t.powf(alpha);
        let vscale = t.powf(1.0 - 2.0 * alpha);
        for (j, &eta) in eta_grid.iter().enumerate() {
            let x = scale * eta;
            mu[(k, j)] = scale * m.at(x, t)?;
            v[(k, j)] = vscale * (u.at(x, t)? - shift);
            w[(k, j)] = v[(k, j)] + 0.5 * alpha * eta * eta;
        }
    }
    Ok(RescaledState {
        eta: eta_grid.to_vec(),
        tau: tau_samples.to_vec(),
        mu,
        v,
        w,
        theta: params.theta(),
        alpha,
        mass: params.mass(),
    })
}

/// Values of the Lyapunov functional along a rescaled run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LyapunovTrace {
    pub theta: f64,
    pub tau: Vec<f64>,
    pub energy: Vec<f64>,
    pub d_energy_numeric: Vec<f64>,
    pub d_energy_formula: Vec<f64>,
    /// Critical-case functional, present when `theta = 2`.
    pub f_critical: Option<Vec<f64>>,
}

/// Critical-case functional and the right side of its derivative identity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriticalTrace {
    pub tau: Vec<f64>,
    pub f: Vec<f64>,
    pub df_formula: Vec<f64>,
    pub df_numeric: Vec<f64>,
}

fn is_critical(theta: f64) -> bool {
    (theta - 2.0).abs() < 1e-12
}

fn check_compatible(state: &RescaledState, profile: &SelfSimilarProfile) -> Result<()> {
    if (state.theta - profile.theta).abs() > 1e-12 * state.theta.max(1.0) {
        return domain(format!(
            "state has theta = {} but the profile has theta = {}",
            state.theta, profile.theta
        ));
    }
    if (state.mass - profile.mass).abs() > 1e-9 * state.mass.max(1.0) {
        return domain(format!(
            "state has mass {} but the profile has mass {}",
            state.mass, profile.mass
        ));
    }
    Ok(())
}

/// `F(mu) - F(M) - P (mu - M)` with `F(s) = s^(theta+1)/(theta+1)` and `P` the signed
/// pressure of the profile at `eta`. Nonnegative for `mu >= 0`.
pub fn entropy_gap(mu: f64, eta: f64, profile: &SelfSimilarProfile) -> f64 {
    let big_m = profile.stationary_density(eta);
    let f = |s: f64| s.powf(profile.theta + 1.0) / (profile.theta + 1.0);
    f(mu) - f(big_m) - profile.pressure(eta) * (mu - big_m)
}

/// `w_eta` by centred differences where `mu > floor`, zero elsewhere.
pub fn w_gradient(state: &RescaledState, k: usize, floor: f64) -> Vec<f64> {
    let n = state.eta.len();
    let eta = &state.eta;
    (0..n)
        .map(|j| {
            if state.mu[(k, j)] <= floor {
                return 0.0;
            }
            let (a, b) = (j.saturating_sub(1), (j + 1).min(n - 1));
            (state.w[(k, b)] - state.w[(k, a)]) / (eta[b] - eta[a])
        })
        .collect()
}

/// Evaluates the Lyapunov functional, its numerical `tau` derivative and the right side of
/// the derivative identity.
pub fn lyapunov(state: &RescaledState, profile: &SelfSimilarProfile) -> Result<LyapunovTrace> {
    lyapunov_with_floor(state, profile, DEFAULT_MU_FLOOR)
}

pub fn lyapunov_with_floor(state: &RescaledState, profile: &SelfSimilarProfile, floor: f64) -> Result<LyapunovTrace> {
    check_compatible(state, profile)?;
    let theta = state.theta;
    let prefactor = (theta - 2.0) / (theta + 2.0);
    let mut energy = Vec::with_capacity(state.tau.len());
    let mut d_formula = Vec::with_capacity(state.tau.len());
    for k in 0..state.tau.len() {
        let wx = w_gradient(state, k, floor);
        let kinetic: Vec<f64> = (0..state.eta.len()).map(|j| state.mu[(k, j)] * wx[j] * wx[j]).collect();
        let integrand: Vec<f64> = state
            .eta
            .iter()
            .enumerate()
            .map(|(j, &eta)| 0.5 * kinetic[j] - entropy_gap(state.mu[(k, j)], eta, profile))
            .collect();
        energy.push(trapezoid(&state.eta, &integrand));
        d_formula.push(prefactor * trapezoid(&state.eta, &kinetic));
    }
    let d_numeric = time_derivative(&state.tau, &energy);
    let f_critical = if is_critical(theta) {
        Some(critical_functional(state, profile)?.f)
    } else {
        None
    };
    Ok(LyapunovTrace {
        theta,
        tau: state.tau.clone(),
        energy,
        d_energy_numeric: d_numeric,
        d_energy_formula: d_formula,
        f_critical,
    })
}

/// `f(tau) = int w (mu - M_a)` together with the right side of its derivative identity,
/// `-int ((mu + M_a)/2) w_eta^2 + (mu^2 - P)(mu - M_a)`.
pub fn critical_functional(state: &RescaledState, profile: &SelfSimilarProfile) -> Result<CriticalTrace> {
    if !is_critical(state.theta) {
        return domain(format!("critical functional needs theta = 2, got {}", state.theta));
    }
    check_compatible(state, profile)?;
    let mut f = Vec::with_capacity(state.tau.len());
    let mut df = Vec::with_capacity(state.tau.len());
    for k in 0..state.tau.len() {
        let wx = w_gradient(state, k, DEFAULT_MU_FLOOR);
        let mut a = Vec::with_capacity(state.eta.len());
        let mut b = Vec::with_capacity(state.eta.len());
        for (j, &eta) in state.eta.iter().enumerate() {
            let mu = state.mu[(k, j)];
            let big_m = profile.stationary_density(eta);
            a.push(state.w[(k, j)] * (mu - big_m));
            b.push(-(0.5 * (mu + big_m) * wx[j] * wx[j] + (mu * mu - profile.pressure(eta)) * (mu - big_m)));
        }
        f.push(trapezoid(&state.eta, &a));
        df.push(trapezoid(&state.eta, &b));
    }
    let df_numeric = time_derivative(&state.tau, &f);
    Ok(CriticalTrace {
        tau: state.tau.clone(),
        f,
        df_formula: df,
        df_numeric,
    })
}

/// Distances to the self-similar solution at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub t: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
}

/// Scaled distances between `(u, m)` and the self-similar pair in `L^p`
/// (`p = f64::INFINITY` for the sup norm):
///
/// ```text
/// D1 = t^(alpha (1 - 1/p)) |m - M|_p
/// D2 = t^(2 - alpha (1 + 1/p)) |m (u_x - U_x)^2|_p
/// D3 = t^(2 - alpha (1 + 1/p)) |m (u_t - U_t)|_p
/// ```
///
/// `u_t` is taken from the Hamilton-Jacobi equation, `u_t = u_x^2/2 - m^theta`.
pub fn convergence_metrics(
    m: &Field,
    u: &Field,
    profile: &SelfSimilarProfile,
    p: f64,
    t_samples: &[f64],
) -> Result<Vec<ConvergenceRow>> {
    if !(p >= 1.0) {
        return domain(format!("norm exponent must be >= 1, got {p}"));
    }
    if u.grid() != m.grid() {
        return domain("u and m live on different grids");
    }
    let grid = *m.grid();
    let inv_p = if p.is_infinite() { 0.0 } else { 1.0 / p };
    let alpha = profile.alpha;
    let mut rows = Vec::with_capacity(t_samples.len());
    for &t in t_samples {
        let s = grid.time_position(t)?;
        if !(t > 0.0) {
            return domain(format!("metrics need t > 0, got {t}"));
        }
        let n = (s.floor() as usize).min(grid.nt.saturating_sub(1));
        let wgt = s - n as f64;
        let blend = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| (1.0 - wgt) * x + wgt * y).collect() };
        let m_row = blend(&m.row(n).to_vec(), &m.row(n + 1).to_vec());
        let ux_row = blend(&u.centered_gradient(n), &u.centered_gradient(n + 1));
        let mut e1 = Vec::with_capacity(grid.nx);
        let mut e2 = Vec::with_capacity(grid.nx);
        let mut e3 = Vec::with_capacity(grid.nx);
        for i in 0..grid.nx {
            let x = grid.x(i);
            let mi = m_row[i];
            let gx = ux_row[i] - profile.gradient(x, t);
            let ut = 0.5 * ux_row[i] * ux_row[i] - coupling(mi, profile.theta);
            e1.push(mi - profile.density(x, t));
            e2.push(mi * gx * gx);
            e3.push(mi * (ut - profile.time_derivative(x, t)));
        }
        let scale = t.powf(2.0 - alpha * (1.0 + inv_p));
        rows.push(ConvergenceRow {
            t,
            d1: t.powf(alpha * (1.0 - inv_p)) * lp_norm(&e1, grid.dx, p),
            d2: scale * lp_norm(&e2, grid.dx, p),
            d3: scale * lp_norm(&e3, grid.dx, p),
        });
    }
    Ok(rows)
}

/// Discrete `L^p` norm of cell values with spacing `dx`.
pub fn lp_norm(values: &[f64], dx: f64, p: f64) -> f64 {
    if p.is_infinite() {
        values.iter().fold(0.0, |acc: f64, v| acc.max(v.abs()))
    } else if p == 1.0 {
        values.iter().map(|v| v.abs()).sum::<f64>() * dx
    } else {
        (values.iter().map(|v| v.abs().powf(p)).sum::<f64>() * dx).powf(1.0 / p)
    }
}

/// Least-squares fit of `log E` against `tau` on `window`. Returns `(k_fit, r^2)` where
/// `E ~ exp(-2 k_fit tau)`; compare `k_fit` with `2 alpha - 1` only when `r^2 >= MIN_R_SQUARED`.
pub fn fit_exponential_rate(trace: &LyapunovTrace, window: (f64, f64)) -> Result<(f64, f64)> {
    if !(trace.theta < 2.0) {
        return domain(format!("exponential decay of E is only established for theta < 2, got {}", trace.theta));
    }
    let (lo, hi) = window;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (&tau, &e) in trace.tau.iter().zip(&trace.energy) {
        if tau < lo || tau > hi {
            continue;
        }
        if !(e > 0.0) {
            return Err(Error::DegenerateFit {
                quantity: "lyapunov".into(),
                reason: format!("E = {e:e} at tau = {tau} is not positive"),
            });
        }
        xs.push(tau);
        ys.push(e.ln());
    }
    let fit = linear_fit(&xs, &ys, "lyapunov")?;
    Ok((-0.5 * fit.slope, fit.r_squared))
}

/// Target exponential rate `2 alpha - 1 = (2 - theta)/(2 + theta)`.
pub fn exponential_rate_target(theta: f64) -> f64 {
    (2.0 - theta) / (2.0 + theta)
}

/// Trapezoid rule on a possibly non-uniform grid.
pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}

/// Centred differences, one-sided at the ends.
pub fn time_derivative(ts: &[f64], values: &[f64]) -> Vec<f64> {
    let n = ts.len();
    if n < 2 {
        return vec![0.0; n];
    }
    (0..n)
        .map(|k| {
            let (a, b) = (k.saturating_sub(1), (k + 1).min(n - 1));
            (values[b] - values[a]) / (ts[b] - ts[a])
        })
        .collect()
}
