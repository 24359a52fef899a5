//! Closed-form self-similar solutions and the scaling constants derived from them.
//!
//! For a coupling exponent `theta > 0` set `alpha = 2 / (2 + theta)`. The stationary
//! profile of mass `a` is
//!
//! ```text
//! M_a(eta) = (R_a - alpha (1 - alpha) eta^2 / 2)_+^(1/theta),   U_a(eta) = -alpha eta^2 / 2
//! ```
//!
//! and the self-similar pair is `m(x, t) = t^-alpha M_a(x t^-alpha)`,
//! `u(x, t) = t^(2 alpha - 1) U_a(x t^-alpha) + z(t)` with `z'(t) = -R_a t^(2 alpha - 2)`.

use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Result};

/// Upper bound `C_0` on the terminal-cost scale: `1/C_0 <= kappa_T <= C_0`.
pub const KAPPA_BOUND: f64 = 1.0e4;

/// Which boundary condition closes the system at the final time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    TerminalCost,
    Planning,
    InfiniteHorizon,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::TerminalCost => "terminal_cost",
            Variant::Planning => "planning",
            Variant::InfiniteHorizon => "infinite_horizon",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "terminal_cost" | "tc" => Ok(Variant::TerminalCost),
            "planning" | "p" => Ok(Variant::Planning),
            "infinite_horizon" => Ok(Variant::InfiniteHorizon),
            other => Err(format!(
                "unknown variant `{other}` (expected terminal_cost, planning or infinite_horizon)"
            )),
        }
    }
}

/// Problem parameters. `alpha` is always recomputed from `theta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Params {
    theta: f64,
    alpha: f64,
    mass: f64,
    horizon: f64,
    kappa_t: f64,
    variant: Variant,
}

impl Params {
    pub fn new(theta: f64, mass: f64, horizon: f64, kappa_t: f64, variant: Variant) -> Result<Self> {
        if !(theta.is_finite() && theta > 0.0) {
            return config("theta", format!("must be a positive real, got {theta}"));
        }
        if !(mass.is_finite() && mass > 0.0) {
            return config("mass", format!("must be a positive real, got {mass}"));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return config("horizon", format!("must be a positive real, got {horizon}"));
        }
        if !(kappa_t.is_finite() && (1.0 / KAPPA_BOUND..=KAPPA_BOUND).contains(&kappa_t)) {
            return config(
                "kappa_T",
                format!("must lie in [{}, {}], got {kappa_t}", 1.0 / KAPPA_BOUND, KAPPA_BOUND),
            );
        }
        Ok(Self {
            theta,
            alpha: alpha_of(theta),
            mass,
            horizon,
            kappa_t,
            variant,
        })
    }

    /// Terminal-cost parameters with the scale `kappa_T = 1/(1 - alpha)` under which the
    /// self-similar pair satisfies the terminal condition exactly.
    pub fn self_similar_terminal(theta: f64, mass: f64, horizon: f64) -> Result<Self> {
        let kappa = 1.0 / (1.0 - alpha_of(theta));
        Self::new(theta, mass, horizon, kappa, Variant::TerminalCost)
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn mass(&self) -> f64 {
        self.mass
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn kappa_t(&self) -> f64 {
        self.kappa_t
    }
    pub fn variant(&self) -> Variant {
        self.variant
    }

    /// Terminal-cost coefficient `c_T = kappa_T * t_final`, where `t_final` is the absolute
    /// final time of the run.
    pub fn terminal_coefficient(&self, t_final: f64) -> f64 {
        self.kappa_t * t_final
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_horizon(self, horizon: f64) -> Result<Self> {
        Self::new(self.theta, self.mass, horizon, self.kappa_t, self.variant)
    }
}

/// `alpha = 2 / (2 + theta)`.
pub fn alpha_of(theta: f64) -> f64 {
    2.0 / (2.0 + theta)
}

/// `s^theta` with an integer fast path; the coupling is evaluated on every grid cell.
#[inline]
pub fn coupling(s: f64, theta: f64) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    if theta == 1.0 {
        s
    } else if theta == 2.0 {
        s * s
    } else if theta.fract() == 0.0 && theta <= 16.0 {
        s.powi(theta as i32)
    } else {
        s.powf(theta)
    }
}

/// Adaptive Simpson quadrature on `[a, b]`. Panels are bisected until the Richardson
/// estimate of the local error falls below the panel's share of `tol`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    let fa = f(a);
    let fb = f(b);
    let c = 0.5 * (a + b);
    let fc = f(c);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fc + fb);
    simpson_step(f, a, b, fa, fb, fc, whole, tol, 50)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fb: f64,
    fc: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let c = 0.5 * (a + b);
    let d = 0.5 * (a + c);
    let e = 0.5 * (c + b);
    let fd = f(d);
    let fe = f(e);
    let left = (c - a) / 6.0 * (fa + 4.0 * fd + fc);
    let right = (b - c) / 6.0 * (fc + 4.0 * fe + fb);
    let delta = left + right - whole;
    let floor = 64.0 * f64::EPSILON * (left.abs() + right.abs());
    if depth == 0 || delta.abs() <= (15.0 * tol).max(floor) {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, c, fa, fc, fd, left, 0.5 * tol, depth - 1)
        + simpson_step(f, c, b, fc, fb, fe, right, 0.5 * tol, depth - 1)
}

/// Mass of `(R - alpha (1 - alpha) eta^2 / 2)_+^(1/theta)` by quadrature over its support.
/// The substitution `eta = w sin(phi)`, `w` the half width, removes the endpoint cusp.
pub fn profile_mass(r: f64, theta: f64) -> f64 {
    let alpha = alpha_of(theta);
    let c = 0.5 * alpha * (1.0 - alpha);
    let half_width = (r / c).sqrt();
    let power = 2.0 / theta + 1.0;
    let integrand = |phi: f64| phi.cos().max(0.0).powf(power);
    let scale = r.powf(1.0 / theta) * half_width;
    2.0 * scale * adaptive_simpson(&integrand, 0.0, std::f64::consts::FRAC_PI_2, 1e-14)
}

/// The height constant `R_a` for which the stationary profile carries mass `mass`.
///
/// Bisection on a bracket whose upper end is doubled until the mass integral exceeds the
/// target; the mass integral is strictly increasing in `R`.
pub fn compute_r_a(mass: f64, theta: f64) -> Result<f64> {
    if !(mass.is_finite() && mass > 0.0) {
        return domain(format!("mass must be positive, got {mass}"));
    }
    if !(theta.is_finite() && theta > 0.0) {
        return domain(format!("theta must be positive, got {theta}"));
    }
    let mut lo = f64::EPSILON;
    let mut hi = 1.0;
    while profile_mass(hi, theta) < mass {
        lo = hi;
        hi *= 2.0;
    }
    let target_tol = 1e-12 * mass;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let m = profile_mass(mid, theta);
        if (m - mass).abs() <= target_tol || (hi - lo) <= 4.0 * f64::EPSILON * mid {
            return Ok(mid);
        }
        if m < mass {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Value of the stationary profile at one point. `u` is `None` outside the support, where
/// the closed form does not define it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationaryValue {
    pub m: f64,
    pub u: Option<f64>,
}

/// Value of the self-similar pair at one space-time point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelfSimilarValue {
    pub m: f64,
    pub u: Option<f64>,
    pub u_x: Option<f64>,
}

/// The stationary profile `(M_a, U_a)` and its time-dependent self-similar pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SelfSimilarProfile {
    pub r_a: f64,
    pub theta: f64,
    pub alpha: f64,
    pub mass: f64,
    pub support_half_width: f64,
    /// Additive constant in `z`; zero means `z(1) = 0`.
    pub z_ref: f64,
}

impl SelfSimilarProfile {
    pub fn new(mass: f64, theta: f64) -> Result<Self> {
        let r_a = compute_r_a(mass, theta)?;
        let alpha = alpha_of(theta);
        Ok(Self {
            r_a,
            theta,
            alpha,
            mass,
            support_half_width: (2.0 * r_a / (alpha * (1.0 - alpha))).sqrt(),
            z_ref: 0.0,
        })
    }

    pub fn for_params(params: &Params) -> Result<Self> {
        Self::new(params.mass(), params.theta())
    }

    /// `alpha (1 - alpha) / 2`, the curvature of `M_a^theta`.
    pub fn curvature(&self) -> f64 {
        0.5 * self.alpha * (1.0 - self.alpha)
    }

    /// `R_a - alpha (1 - alpha) eta^2 / 2`, the (signed) pressure of the profile.
    pub fn pressure(&self, eta: f64) -> f64 {
        self.r_a - self.curvature() * eta * eta
    }

    pub fn stationary_density(&self, eta: f64) -> f64 {
        let p = self.pressure(eta);
        if p > 0.0 {
            p.powf(1.0 / self.theta)
        } else {
            0.0
        }
    }

    pub fn eval_stationary(&self, eta: f64) -> StationaryValue {
        let inside = eta.abs() <= self.support_half_width;
        StationaryValue {
            m: self.stationary_density(eta),
            u: inside.then(|| -0.5 * self.alpha * eta * eta),
        }
    }

    /// Integration constant `z(t)`; `z(1) = z_ref`.
    pub fn z(&self, t: f64) -> f64 {
        let k = 2.0 * self.alpha - 1.0;
        let base = if k.abs() < 1e-14 {
            -self.r_a * t.ln()
        } else {
            -self.r_a * (t.powf(k) - 1.0) / k
        };
        base + self.z_ref
    }

    pub fn density(&self, x: f64, t: f64) -> f64 {
        let scale = t.powf(self.alpha);
        self.stationary_density(x / scale) / scale
    }

    /// Half width of the support of the self-similar density at time `t`.
    pub fn support_edge(&self, t: f64) -> f64 {
        self.support_half_width * t.powf(self.alpha)
    }

    pub fn eval(&self, x: f64, t: f64) -> Result<SelfSimilarValue> {
        if !(t > 0.0) {
            return domain(format!("self-similar solution requires t > 0, got {t}"));
        }
        let scale = t.powf(self.alpha);
        let eta = x / scale;
        let inside = eta.abs() <= self.support_half_width * (1.0 + 1e-12);
        let u = inside.then(|| t.powf(2.0 * self.alpha - 1.0) * (-0.5 * self.alpha * eta * eta) + self.z(t));
        Ok(SelfSimilarValue {
            m: self.stationary_density(eta) / scale,
            u,
            u_x: inside.then(|| -self.alpha * x / t),
        })
    }

    /// Closed-form gradient `-alpha x / t`, extended past the support by the same formula.
    pub fn gradient(&self, x: f64, t: f64) -> f64 {
        -self.alpha * x / t
    }

    /// `u_t` of the self-similar pair from the Hamilton-Jacobi equation,
    /// `u_t = u_x^2 / 2 - m^theta`, using the extended gradient.
    pub fn time_derivative(&self, x: f64, t: f64) -> f64 {
        let g = self.gradient(x, t);
        0.5 * g * g - coupling(self.density(x, t), self.theta)
    }

    /// Copy whose `z` constant makes `u(., t_final) = kappa t_final m^theta(., t_final)` hold
    /// on the support when `kappa = 1/(1 - alpha)`.
    pub fn matched_to_terminal(&self, t_final: f64) -> Self {
        let mut out = *self;
        out.z_ref = 0.0;
        let wanted = self.r_a * t_final.powf(2.0 * self.alpha - 1.0) / (1.0 - self.alpha);
        out.z_ref = wanted - out.z(t_final);
        out
    }
}
