//! Forward-backward solver for the mean field games system on a truncated domain
//! `[-L, L]` with homogeneous Neumann conditions.
//!
//! * Hamilton-Jacobi: explicit Euler backward in time with a monotone numerical
//!   Hamiltonian of `H(p) = p^2 / 2` (Lax-Friedrichs by default, Godunov available).
//! * Continuity: conservative finite-volume upwind fluxes with face velocity `-u_x`.
//! * Coupling: fictitious play, `m_bar <- (1 - lambda_k) m_bar + lambda_k m_new` with
//!   `lambda_k = 2 / (k + k0 + 2)`.
//!
//! Densities are cell averages on a cell-centred lattice; the value function lives at the
//! same cell centres.

use std::time::Instant;

use ndarray::{Array2, ArrayView1};
use serde::Serialize;

use crate::error::{config, domain, Error, Result};
use crate::profiles::{adaptive_simpson, coupling, Params, SelfSimilarProfile};

/// Largest admissible CFL number.
pub const MAX_CFL: f64 = 0.9;

/// Default Neumann truncation factor `K` in `x_max = K (1 + t1^alpha)`.
pub const DEFAULT_DOMAIN_FACTOR: f64 = 3.0;

/// Growth of the best-response distance between iterations that doubles the averaging offset.
const DISTANCE_GROWTH: f64 = 1.25;
const OFFSET_DECAY: f64 = 0.95;
/// Iterations without a new minimum of the terminal gap that halve the terminal relaxation.
const GAP_STALL: usize = 20;
const MIN_TERMINAL_RELAXATION: f64 = 0.05;

/// Uniform space-time lattice. Cell `i` is centred at `x_min + (i + 1/2) dx`; time level
/// `n` sits at `t0 + n dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Grid {
    pub x_min: f64,
    pub x_max: f64,
    pub nx: usize,
    pub t0: f64,
    pub t1: f64,
    pub nt: usize,
    pub dx: f64,
    pub dt: f64,
}

/// How to size a grid for a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridSpec {
    pub nx: usize,
    pub domain_factor: f64,
    pub cfl: f64,
    /// Bound on `|u_x|` used to choose `dt`.
    pub max_speed: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            nx: 1024,
            domain_factor: DEFAULT_DOMAIN_FACTOR,
            cfl: MAX_CFL,
            max_speed: 1.0,
        }
    }
}

impl Grid {
    pub fn new(x_min: f64, x_max: f64, nx: usize, t0: f64, t1: f64, nt: usize) -> Result<Self> {
        if !(x_min.is_finite() && x_max.is_finite() && x_min < x_max) {
            return config("domain", format!("need x_min < x_max, got [{x_min}, {x_max}]"));
        }
        if nx < 4 {
            return config("nx", format!("need at least 4 cells, got {nx}"));
        }
        if !(t0 >= 0.0 && t1 > t0 && t1.is_finite()) {
            return config("horizon", format!("need 0 <= t0 < t1, got [{t0}, {t1}]"));
        }
        if nt == 0 {
            return config("nt", "need at least one time step");
        }
        Ok(Self {
            x_min,
            x_max,
            nx,
            t0,
            t1,
            nt,
            dx: (x_max - x_min) / nx as f64,
            dt: (t1 - t0) / nt as f64,
        })
    }

    /// Symmetric domain of half width `K (1 + t1^alpha)` with `dt` chosen so that
    /// `dt * max_speed = cfl * dx`.
    pub fn for_run(alpha: f64, t0: f64, t1: f64, spec: &GridSpec) -> Result<Self> {
        if !(spec.cfl > 0.0 && spec.cfl <= MAX_CFL) {
            return config("cfl", format!("must lie in (0, {MAX_CFL}], got {}", spec.cfl));
        }
        if !(spec.domain_factor > 0.0) {
            return config("domain_factor", format!("must be positive, got {}", spec.domain_factor));
        }
        if !(spec.max_speed > 0.0 && spec.max_speed.is_finite()) {
            return config("max_speed", format!("must be positive, got {}", spec.max_speed));
        }
        let half = truncation_radius(alpha, t1, spec.domain_factor);
        let dx = 2.0 * half / spec.nx as f64;
        let dt_max = spec.cfl * dx / spec.max_speed;
        let nt = ((t1 - t0) / dt_max).ceil().max(1.0) as usize;
        Self::new(-half, half, spec.nx, t0, t1, nt)
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        self.x_min + (i as f64 + 0.5) * self.dx
    }

    #[inline]
    pub fn t(&self, n: usize) -> f64 {
        self.t0 + n as f64 * self.dt
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.nx).map(|i| self.x(i)).collect()
    }

    pub fn ts(&self) -> Vec<f64> {
        (0..=self.nt).map(|n| self.t(n)).collect()
    }

    /// Fractional time index of `t`, or an error outside the run window.
    pub fn time_position(&self, t: f64) -> Result<f64> {
        let tol = 1e-9 * (self.t1 - self.t0).max(1.0);
        if t < self.t0 - tol || t > self.t1 + tol {
            return domain(format!("time {t} outside the run window [{}, {}]", self.t0, self.t1));
        }
        Ok(((t - self.t0) / self.dt).clamp(0.0, self.nt as f64))
    }

    /// Nearest time level to `t` (clamped to the window).
    pub fn nearest_level(&self, t: f64) -> usize {
        (((t - self.t0) / self.dt).round().max(0.0) as usize).min(self.nt)
    }

    /// Checks `x_max >= K (1 + t1^alpha)`, the condition keeping the support interior.
    pub fn check_truncation(&self, alpha: f64, domain_factor: f64) -> Result<()> {
        let needed = truncation_radius(alpha, self.t1, domain_factor);
        if self.x_max < needed * (1.0 - 1e-12) || -self.x_min < needed * (1.0 - 1e-12) {
            return config(
                "domain_factor",
                format!("domain [{}, {}] is narrower than the required radius {needed}", self.x_min, self.x_max),
            );
        }
        Ok(())
    }
}

/// `K (1 + t^alpha)`.
pub fn truncation_radius(alpha: f64, t: f64, domain_factor: f64) -> f64 {
    domain_factor * (1.0 + t.powf(alpha))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FieldKind {
    Density,
    Value,
    Velocity,
}

/// A scalar field on a [`Grid`], indexed `(time level, cell)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    values: Array2<f64>,
    grid: Grid,
    kind: FieldKind,
}

impl Field {
    pub fn zeros(grid: Grid, kind: FieldKind) -> Self {
        Self {
            values: Array2::zeros((grid.nt + 1, grid.nx)),
            grid,
            kind,
        }
    }

    pub fn from_fn(grid: Grid, kind: FieldKind, f: impl Fn(f64, f64) -> f64) -> Self {
        let values = Array2::from_shape_fn((grid.nt + 1, grid.nx), |(n, i)| f(grid.x(i), grid.t(n)));
        Self { values, grid, kind }
    }

    pub fn from_values(grid: Grid, kind: FieldKind, values: Array2<f64>) -> Result<Self> {
        if values.dim() != (grid.nt + 1, grid.nx) {
            return domain(format!(
                "field shape {:?} does not match grid ({}, {})",
                values.dim(),
                grid.nt + 1,
                grid.nx
            ));
        }
        if kind == FieldKind::Density && values.iter().any(|&v| v < 0.0) {
            return domain("density field has negative entries");
        }
        Ok(Self { values, grid, kind })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn row(&self, n: usize) -> ArrayView1<'_, f64> {
        self.values.row(n)
    }

    pub(crate) fn row_slice(&self, n: usize) -> &[f64] {
        self.values.row(n).to_slice().expect("standard layout")
    }

    pub(crate) fn row_slice_mut(&mut self, n: usize) -> &mut [f64] {
        self.values.row_mut(n).into_slice().expect("standard layout")
    }

    /// `sum_i values[n, i] dx`.
    pub fn integral(&self, n: usize) -> f64 {
        self.row_slice(n).iter().sum::<f64>() * self.grid.dx
    }

    /// Linear interpolation in space at level `n`; constant beyond the outermost centres.
    pub fn interp_level(&self, n: usize, x: f64) -> f64 {
        interp_cells(self.row_slice(n), &self.grid, x)
    }

    /// Bilinear interpolation in space and time.
    pub fn at(&self, x: f64, t: f64) -> Result<f64> {
        let s = self.grid.time_position(t)?;
        let n = (s.floor() as usize).min(self.grid.nt.saturating_sub(1));
        let w = s - n as f64;
        let a = self.interp_level(n, x);
        let b = self.interp_level(n + 1, x);
        Ok((1.0 - w) * a + w * b)
    }

    /// Spatial derivative at level `n` and position `x`, from face differences
    /// interpolated linearly between faces (zero on the Neumann boundary).
    pub fn gradient_level(&self, n: usize, x: f64) -> f64 {
        face_gradient_interp(self.row_slice(n), &self.grid, x)
    }

    /// Spatial derivative at `(x, t)`, linear in time between levels.
    pub fn gradient_at(&self, x: f64, t: f64) -> Result<f64> {
        let s = self.grid.time_position(t)?;
        let n = (s.floor() as usize).min(self.grid.nt.saturating_sub(1));
        let w = s - n as f64;
        Ok((1.0 - w) * self.gradient_level(n, x) + w * self.gradient_level(n + 1, x))
    }

    /// Centred differences at cell centres (one-sided halves at the Neumann walls).
    pub fn centered_gradient(&self, n: usize) -> Vec<f64> {
        centered_gradient(self.row_slice(n), self.grid.dx)
    }

    /// Keep every `stride`-th time level (always including the last one).
    pub fn subsample(&self, stride: usize) -> Vec<usize> {
        let stride = stride.max(1);
        let mut levels: Vec<usize> = (0..=self.grid.nt).step_by(stride).collect();
        if *levels.last().unwrap() != self.grid.nt {
            levels.push(self.grid.nt);
        }
        levels
    }
}

pub(crate) fn interp_cells(row: &[f64], grid: &Grid, x: f64) -> f64 {
    let s = (x - grid.x_min) / grid.dx - 0.5;
    if s <= 0.0 {
        return row[0];
    }
    let i = s.floor() as usize;
    if i + 1 >= row.len() {
        return row[row.len() - 1];
    }
    let w = s - i as f64;
    (1.0 - w) * row[i] + w * row[i + 1]
}

/// Face gradients `g[j] = (u[j] - u[j-1]) / dx` at `x_min + j dx`, `j = 0..=nx`, with
/// `g[0] = g[nx] = 0`.
pub(crate) fn face_gradients(row: &[f64], dx: f64, out: &mut [f64]) {
    let nx = row.len();
    out[0] = 0.0;
    out[nx] = 0.0;
    for j in 1..nx {
        out[j] = (row[j] - row[j - 1]) / dx;
    }
}

pub(crate) fn face_gradient_interp(row: &[f64], grid: &Grid, x: f64) -> f64 {
    let nx = row.len();
    let s = (x - grid.x_min) / grid.dx;
    if s <= 0.0 || s >= nx as f64 {
        return 0.0;
    }
    let j = s.floor() as usize;
    let w = s - j as f64;
    let g = |j: usize| {
        if j == 0 || j >= nx {
            0.0
        } else {
            (row[j] - row[j - 1]) / grid.dx
        }
    };
    (1.0 - w) * g(j) + w * g(j + 1)
}

pub(crate) fn centered_gradient(row: &[f64], dx: f64) -> Vec<f64> {
    let nx = row.len();
    (0..nx)
        .map(|i| {
            let left = if i == 0 { 0.0 } else { (row[i] - row[i - 1]) / dx };
            let right = if i + 1 == nx { 0.0 } else { (row[i + 1] - row[i]) / dx };
            0.5 * (left + right)
        })
        .collect()
}

/// Godunov numerical Hamiltonian for `H(p) = p^2 / 2`.
#[inline]
pub fn godunov_hamiltonian(p_minus: f64, p_plus: f64) -> f64 {
    let s = p_minus.max(0.0).max(-p_plus.min(0.0));
    0.5 * s * s
}

/// Spatial discretization of the Hamiltonian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HjScheme {
    /// First-order one-sided differences into the Godunov Hamiltonian. Monotone.
    Godunov,
    /// Second-order ENO one-sided derivatives into the Godunov Hamiltonian. Exact on
    /// quadratics, not monotone.
    GodunovEno2,
    /// Lax-Friedrichs Hamiltonian with a spatially uniform dissipation `max |D u|`.
    /// Monotone for a frozen dissipation coefficient.
    LaxFriedrichs,
}

impl std::str::FromStr for HjScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "godunov" => Ok(HjScheme::Godunov),
            "godunov_eno2" | "eno2" => Ok(HjScheme::GodunovEno2),
            "lax_friedrichs" | "lf" => Ok(HjScheme::LaxFriedrichs),
            other => config("hj_scheme", format!("unknown scheme `{other}`")),
        }
    }
}

/// Solves `-u_t + u_x^2 / 2 = m^theta` backward from `terminal_u` with the first-order
/// Godunov scheme.
///
/// The source is the trapezoidal average of the coupling at the two time levels of each
/// step. Fails with [`Error::Cfl`] if `dt max|D u| > cfl dx` at any level.
pub fn hj_backward(m: &Field, terminal_u: &[f64], theta: f64, cfl: f64) -> Result<Field> {
    hj_backward_with(m, terminal_u, theta, cfl, HjScheme::Godunov)
}

/// As [`hj_backward`] with a selectable spatial scheme.
pub fn hj_backward_with(m: &Field, terminal_u: &[f64], theta: f64, cfl: f64, scheme: HjScheme) -> Result<Field> {
    let mut u = Field::zeros(*m.grid(), FieldKind::Value);
    hj_backward_into(m, terminal_u, theta, cfl, scheme, &mut u)?;
    Ok(u)
}

#[inline]
fn minmod(a: f64, b: f64) -> f64 {
    if a * b <= 0.0 {
        0.0
    } else if a.abs() < b.abs() {
        a
    } else {
        b
    }
}

/// Reflected index for Neumann ghost cells.
#[inline]
fn reflect(i: isize, nx: usize) -> usize {
    if i < 0 {
        (-i - 1) as usize
    } else if i as usize >= nx {
        2 * nx - 1 - i as usize
    } else {
        i as usize
    }
}

/// One backward step `prev -> cur`; returns `max |D u|` over the one-sided differences of
/// `prev`.
fn hj_step(prev: &[f64], source: impl Fn(usize) -> f64, dx: f64, dt: f64, scheme: HjScheme, cur: &mut [f64]) -> f64 {
    let nx = prev.len();
    let at = |i: isize| prev[reflect(i, nx)];
    let mut max_grad = 0.0_f64;
    for i in 0..nx {
        let pm = (prev[i] - at(i as isize - 1)) / dx;
        let pp = (at(i as isize + 1) - prev[i]) / dx;
        max_grad = max_grad.max(pm.abs()).max(pp.abs());
    }
    for i in 0..nx {
        let ii = i as isize;
        let pm = (prev[i] - at(ii - 1)) / dx;
        let pp = (at(ii + 1) - prev[i]) / dx;
        let h = match scheme {
            HjScheme::Godunov => godunov_hamiltonian(pm, pp),
            HjScheme::GodunovEno2 => {
                let d2 = |j: isize| at(j + 1) - 2.0 * at(j) + at(j - 1);
                let c = d2(ii);
                let em = pm + 0.5 * minmod(c, d2(ii - 1)) / dx;
                let ep = pp - 0.5 * minmod(c, d2(ii + 1)) / dx;
                godunov_hamiltonian(em, ep)
            }
            HjScheme::LaxFriedrichs => {
                let mid = 0.5 * (pm + pp);
                0.5 * mid * mid - 0.5 * max_grad * (pp - pm)
            }
        };
        cur[i] = prev[i] + dt * (source(i) - h);
    }
    max_grad
}

pub(crate) fn hj_backward_into(
    m: &Field,
    terminal_u: &[f64],
    theta: f64,
    cfl: f64,
    scheme: HjScheme,
    u: &mut Field,
) -> Result<()> {
    let grid = *m.grid();
    let (nx, nt, dx, dt) = (grid.nx, grid.nt, grid.dx, grid.dt);
    if terminal_u.len() != nx {
        return domain(format!("terminal_u has {} entries, grid has {nx} cells", terminal_u.len()));
    }
    if terminal_u.iter().any(|v| !v.is_finite()) {
        return domain("terminal_u must be finite");
    }
    check_cfl_number(cfl)?;
    u.row_slice_mut(nt).copy_from_slice(terminal_u);

    let mut f_next: Vec<f64> = m.row_slice(nt).iter().map(|&v| coupling(v, theta)).collect();
    let mut f_cur = vec![0.0; nx];
    let limit = cfl * dx / dt;
    for n in (0..nt).rev() {
        for (f, &v) in f_cur.iter_mut().zip(m.row_slice(n)) {
            *f = coupling(v, theta);
        }
        let (mut head, tail) = u.values.view_mut().split_at(ndarray::Axis(0), n + 1);
        let prev = tail.row(0);
        let prev = prev.to_slice().expect("standard layout");
        let mut cur = head.row_mut(n);
        let cur = cur.as_slice_mut().expect("standard layout");
        let max_grad = hj_step(prev, |i| 0.5 * (f_cur[i] + f_next[i]), dx, dt, scheme, cur);
        if max_grad > limit {
            return Err(Error::Cfl {
                stage: "hj_backward",
                dt,
                limit: cfl * dx / max_grad,
                cfl,
            });
        }
        std::mem::swap(&mut f_cur, &mut f_next);
    }
    Ok(())
}

fn check_cfl_number(cfl: f64) -> Result<()> {
    if !(cfl > 0.0 && cfl <= MAX_CFL) {
        return config("cfl", format!("must lie in (0, {MAX_CFL}], got {cfl}"));
    }
    Ok(())
}

const W0: f64 = 1.0;
const W1: f64 = 0.0;

/// One-step upwind transport with reusable buffers.
struct Transport {
    grid: Grid,
    cfl: f64,
    g_now: Vec<f64>,
    g_next: Vec<f64>,
    flux: Vec<f64>,
}

impl Transport {
    fn new(grid: Grid, cfl: f64) -> Self {
        Self {
            grid,
            cfl,
            g_now: vec![0.0; grid.nx + 1],
            g_next: vec![0.0; grid.nx + 1],
            flux: vec![0.0; grid.nx + 1],
        }
    }

    /// Advances `m` from level `n` to `n + 1`; the face velocity is `-u_x` averaged over the
    /// two levels.
    fn step(&mut self, m: &[f64], u_now: &[f64], u_next: &[f64], out: &mut [f64]) -> Result<()> {
        let Grid { nx, dx, dt, .. } = self.grid;
        face_gradients(u_now, dx, &mut self.g_now);
        face_gradients(u_next, dx, &mut self.g_next);
        self.flux[0] = 0.0;
        self.flux[nx] = 0.0;
        for j in 1..nx {
            let b = -(W0 * self.g_now[j] + W1 * self.g_next[j]);
            self.flux[j] = if b >= 0.0 { b * m[j - 1] } else { b * m[j] };
        }
        let ratio = dt / dx;
        let mut worst = 0.0_f64;
        for i in 0..nx {
            let out_right = (-(W0 * self.g_now[i + 1] + W1 * self.g_next[i + 1])).max(0.0);
            let out_left = (W0 * self.g_now[i] + W1 * self.g_next[i]).max(0.0);
            worst = worst.max(out_right + out_left);
            out[i] = m[i] - ratio * (self.flux[i + 1] - self.flux[i]);
        }
        if worst * ratio > self.cfl {
            return Err(Error::Cfl {
                stage: "transport_forward",
                dt,
                limit: self.cfl * dx / worst,
                cfl: self.cfl,
            });
        }
        Ok(())
    }
}

/// Solves `m_t - (m u_x)_x = 0` forward from `m0` with conservative upwind fluxes.
///
/// Mass is conserved to rounding and nonnegativity is preserved whenever
/// `dt * (outflow speed of every cell) <= cfl * dx`, which is checked at every step.
pub fn transport_forward(m0: &[f64], u: &Field, cfl: f64) -> Result<Field> {
    let grid = *u.grid();
    validate_density(m0, grid.nx, "m0")?;
    check_cfl_number(cfl)?;
    let mut m = Field::zeros(grid, FieldKind::Density);
    m.row_slice_mut(0).copy_from_slice(m0);
    let mut tr = Transport::new(grid, cfl);
    let mut next = vec![0.0; grid.nx];
    for n in 0..grid.nt {
        tr.step(m.row_slice(n), u.row_slice(n), u.row_slice(n + 1), &mut next)?;
        m.row_slice_mut(n + 1).copy_from_slice(&next);
    }
    Ok(m)
}

fn validate_density(m0: &[f64], nx: usize, name: &str) -> Result<()> {
    if m0.len() != nx {
        return domain(format!("{name} has {} entries, grid has {nx} cells", m0.len()));
    }
    if m0.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return domain(format!("{name} must be finite and nonnegative"));
    }
    if !(m0.iter().sum::<f64>() > 0.0) {
        return domain(format!("{name} must have positive mass"));
    }
    Ok(())
}

/// Averaging rule of the fixed-point iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// `lambda_k = 2 / (k + 2)`.
    FictitiousPlay,
    /// `lambda_k = 1`.
    Picard,
}

impl Averaging {
    fn weight(self, k: usize, offset: usize, floor: f64) -> f64 {
        match self {
            Averaging::FictitiousPlay => (2.0 / ((k + offset) as f64 + 2.0)).max(floor),
            Averaging::Picard => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverOptions {
    /// Stopping tolerance: sup over time of the L1 change of the averaged density
    /// (terminal cost), or the terminal L1 gap (planning).
    pub tol: f64,
    pub max_iter: usize,
    pub cfl: f64,
    pub averaging: Averaging,
    /// Fictitious play starts at `k = averaging_offset`, so the first weight is
    /// `2 / (offset + 2)`. `None` picks `ceil(5 / dx)`.
    pub averaging_offset: Option<usize>,
    /// Lower bound on the averaging weight.
    pub min_weight: f64,
    pub hj_scheme: HjScheme,
    /// Relaxation factor of the terminal value in terminal-cost runs.
    pub terminal_relaxation: f64,
    /// Relative dual-ascent step of the planning solver, applied to the preconditioned
    /// terminal gap.
    pub planning_step: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 2000,
            cfl: MAX_CFL,
            averaging: Averaging::FictitiousPlay,
            averaging_offset: None,
            min_weight: 0.0,
            hj_scheme: HjScheme::LaxFriedrichs,
            terminal_relaxation: 0.5,
            planning_step: 0.5,
        }
    }
}

impl SolverOptions {
    fn offset_for(&self, grid: &Grid) -> usize {
        self.averaging_offset.unwrap_or_else(|| (5.0 / grid.dx).ceil() as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    pub converged: bool,
    /// Seconds of wall-clock time. Not serialized, so reports stay reproducible.
    #[serde(skip)]
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub u: Field,
    pub m: Field,
    pub report: SolveReport,
}

/// Centre of mass and effective half width of a density row. The half width is the support
/// radius of the self-similar profile with the same second moment, `sqrt((2/theta + 3) var)`.
pub fn effective_extent(row: &[f64], grid: &Grid, theta: f64) -> Result<(f64, f64)> {
    let mass: f64 = row.iter().sum::<f64>() * grid.dx;
    if !(mass > 0.0) {
        return domain("density row has empty support");
    }
    let center = row.iter().enumerate().map(|(i, &v)| v * grid.x(i)).sum::<f64>() * grid.dx / mass;
    let var = row
        .iter()
        .enumerate()
        .map(|(i, &v)| v * (grid.x(i) - center).powi(2))
        .sum::<f64>()
        * grid.dx
        / mass;
    Ok((center, ((2.0 / theta + 3.0) * var).sqrt()))
}

/// Age `s` at which the self-similar profile has the given half width.
fn self_similar_age(half: f64, params: &Params) -> Result<f64> {
    let profile = SelfSimilarProfile::for_params(params)?;
    Ok((half / profile.support_half_width).powf(1.0 / params.alpha()))
}

/// Initial guess obtained by dilating `m0` about its centre of mass like a self-similar
/// solution of the same width at the initial time.
pub fn dilation_guess(m0: &[f64], params: &Params, grid: &Grid) -> Result<Field> {
    let (center, half) = effective_extent(m0, grid, params.theta())?;
    let age0 = self_similar_age(half, params)?;
    let widths: Vec<f64> = (0..=grid.nt)
        .map(|n| half * ((age0 + grid.t(n) - grid.t0) / age0).powf(params.alpha()))
        .collect();
    Ok(dilate_rows(m0, grid, center, center, half, &widths))
}

/// Initial guess for planning runs: the shape of `m0` dilated so that its width follows
/// the self-similar law between the widths of `m0` and `m_T`, with the centre moving
/// linearly.
pub fn planning_guess(m0: &[f64], mt: &[f64], params: &Params, grid: &Grid) -> Result<Field> {
    let (c0, w0) = effective_extent(m0, grid, params.theta())?;
    let (c1, w1) = effective_extent(mt, grid, params.theta())?;
    let inv = 1.0 / params.alpha();
    let span = grid.t1 - grid.t0;
    let widths: Vec<f64> = (0..=grid.nt)
        .map(|n| {
            let s = (grid.t(n) - grid.t0) / span;
            ((1.0 - s) * w0.powf(inv) + s * w1.powf(inv)).powf(params.alpha())
        })
        .collect();
    Ok(dilate_rows(m0, grid, c0, c1, w0, &widths))
}

fn dilate_rows(m0: &[f64], grid: &Grid, c0: f64, c1: f64, w0: f64, widths: &[f64]) -> Field {
    let mass: f64 = m0.iter().sum::<f64>() * grid.dx;
    let mut field = Field::zeros(*grid, FieldKind::Density);
    field.row_slice_mut(0).copy_from_slice(m0);
    let span = grid.t1 - grid.t0;
    for n in 1..=grid.nt {
        let s = (grid.t(n) - grid.t0) / span;
        let center = (1.0 - s) * c0 + s * c1;
        let lambda = w0 / widths[n];
        let row = field.row_slice_mut(n);
        for (i, r) in row.iter_mut().enumerate() {
            let y = c0 + lambda * (grid.x(i) - center);
            *r = lambda * interp_cells(m0, grid, y).max(0.0);
        }
        let total: f64 = row.iter().sum::<f64>() * grid.dx;
        if total > 0.0 {
            let scale = mass / total;
            row.iter_mut().for_each(|v| *v *= scale);
        }
    }
    field
}

/// Rough bound on `|u_x|` for sizing `dt`: the front speed `alpha * half / age` of the
/// self-similar solution of half width `half` centred at `center`, padded by `safety`.
pub fn estimate_max_speed(center: f64, half: f64, params: &Params, safety: f64) -> Result<f64> {
    if !(half > 0.0) {
        return domain(format!("half width must be positive, got {half}"));
    }
    let age0 = self_similar_age(half, params)?;
    Ok(safety * params.alpha() * (half + center.abs()) / age0)
}

struct FixedPoint<'a> {
    m0: &'a [f64],
    theta: f64,
    grid: Grid,
    opts: SolverOptions,
    transport: Transport,
    u: Field,
    next: Vec<f64>,
    cur: Vec<f64>,
}

impl<'a> FixedPoint<'a> {
    fn new(m0: &'a [f64], theta: f64, grid: Grid, opts: SolverOptions) -> Self {
        Self {
            m0,
            theta,
            grid,
            opts,
            transport: Transport::new(grid, opts.cfl),
            u: Field::zeros(grid, FieldKind::Value),
            next: vec![0.0; grid.nx],
            cur: vec![0.0; grid.nx],
        }
    }

    /// One best response to `(m_bar, psi)` plus averaging; returns
    /// `sup_t ||m_bar_new - m_bar||_1`. The best-response terminal density is left in
    /// [`Self::response_end`].
    fn iterate(&mut self, mbar: &mut Field, psi: &[f64], weight: f64) -> Result<f64> {
        hj_backward_into(mbar, psi, self.theta, self.opts.cfl, self.opts.hj_scheme, &mut self.u)?;
        self.cur.copy_from_slice(self.m0);
        let dx = self.grid.dx;
        let mut worst = 0.0_f64;
        for n in 0..self.grid.nt {
            self.transport
                .step(&self.cur, self.u.row_slice(n), self.u.row_slice(n + 1), &mut self.next)?;
            let row = mbar.row_slice_mut(n + 1);
            let mut diff = 0.0;
            for (r, &v) in row.iter_mut().zip(&self.next) {
                let delta = weight * (v - *r);
                diff += delta.abs();
                *r += delta;
            }
            worst = worst.max(diff * dx);
            std::mem::swap(&mut self.cur, &mut self.next);
        }
        Ok(worst)
    }

    fn response_end(&self) -> &[f64] {
        &self.cur
    }

    fn final_value(&self, mbar: &Field, psi: &[f64]) -> Result<Field> {
        hj_backward_with(mbar, psi, self.theta, self.opts.cfl, self.opts.hj_scheme)
    }
}

/// Averaging weights with an adaptive offset: doubled when the best-response distance
/// grows by more than `DISTANCE_GROWTH`, relaxed toward its base value while it shrinks.
struct Schedule {
    averaging: Averaging,
    floor: f64,
    base: usize,
    offset: usize,
    previous: f64,
}

impl Schedule {
    fn new(opts: &SolverOptions, offset: usize) -> Self {
        Self {
            averaging: opts.averaging,
            floor: opts.min_weight,
            base: offset,
            offset,
            previous: f64::INFINITY,
        }
    }

    fn weight(&self, k: usize) -> f64 {
        self.averaging.weight(k, self.offset, self.floor)
    }

    fn observe(&mut self, k: usize, distance: f64) {
        if self.averaging == Averaging::FictitiousPlay {
            if distance > DISTANCE_GROWTH * self.previous {
                self.offset += k + self.offset;
            } else if distance < self.previous {
                self.offset = self.base.max((self.offset as f64 * OFFSET_DECAY) as usize);
            }
        }
        self.previous = distance;
    }
}

/// Solves `(I - beta D^2) z = r` with reflecting ends (Thomas algorithm), where
/// `beta_over_dx2 = beta / dx^2`.
fn smooth_neumann(r: &[f64], beta_over_dx2: f64) -> Vec<f64> {
    let n = r.len();
    let off = -beta_over_dx2;
    let diag = |i: usize| {
        if i == 0 || i + 1 == n {
            1.0 + beta_over_dx2
        } else {
            1.0 + 2.0 * beta_over_dx2
        }
    };
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = off / diag(0);
    d[0] = r[0] / diag(0);
    for i in 1..n {
        let denom = diag(i) - off * c[i - 1];
        c[i] = off / denom;
        d[i] = (r[i] - off * d[i - 1]) / denom;
    }
    let mut z = vec![0.0; n];
    z[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        z[i] = d[i] - c[i] * z[i + 1];
    }
    z
}

/// Gain of the best-response terminal density with respect to the terminal value, modelled
/// as `A k^2 / (1 + B k^2)`: quadratic growth over the horizon `span`, saturating at
/// `2 q / (sigma dx)` where the Lax-Friedrichs dissipation takes over. `q` is
/// `c_T theta m^theta` at its peak.
fn terminal_gain_model(q: f64, span: f64, sigma: f64, dx: f64) -> (f64, f64) {
    let a = 2.0 * q * span;
    let saturation = 2.0 * q / (sigma * dx);
    (a, a / saturation.max(1e-12))
}

/// `(I + B L)(I + (A + B) L)^{-1} r` with `L = -D^2`, the inverse of `1 + g(k)` for the
/// gain model above.
fn apply_terminal_preconditioner(r: &[f64], a: f64, b: f64, dx: f64) -> Vec<f64> {
    let dx2 = dx * dx;
    let y = smooth_neumann(r, (a + b) / dx2);
    let n = y.len();
    (0..n)
        .map(|i| {
            let left = y[if i == 0 { 0 } else { i - 1 }];
            let right = y[if i + 1 == n { n - 1 } else { i + 1 }];
            y[i] - b * (left - 2.0 * y[i] + right) / dx2
        })
        .collect()
}

/// Approximate inverse of the terminal-density response to the terminal value in
/// planning runs, `dm(T) = -2 span m (L / (1 + B L)) dpsi` with `B = span sigma dx`:
/// returns `(L^{-1} r + B r) / (2 span m_peak)`. `r` must have zero mean.
fn apply_planning_preconditioner(r: &[f64], span: f64, sigma: f64, peak: f64, dx: f64) -> Vec<f64> {
    let n = r.len();
    let scale = 1.0 / (2.0 * span * peak);
    let b = span * sigma * dx;
    let mut flux = 0.0;
    let mut phi = vec![0.0; n];
    for i in 1..n {
        flux += r[i - 1] * dx;
        phi[i] = phi[i - 1] - flux * dx;
    }
    let mean = phi.iter().sum::<f64>() / n as f64;
    phi.iter().zip(r).map(|(&p, &ri)| scale * (p - mean + b * ri)).collect()
}

/// Terminal-cost problem `u(., T) = c_T m^theta(., T)` with `c_T = kappa_T t1`, solved by
/// damped fictitious play starting from [`dilation_guess`].
///
/// The terminal value `psi` is relaxed toward `c_T m(., T)^theta` of the best response,
/// preconditioned by the inverse of a model of the terminal gain (see
/// [`terminal_gain_model`]). The relaxation factor is halved, down to
/// `MIN_TERMINAL_RELAXATION`, whenever the terminal gap goes `GAP_STALL` iterations without
/// a new minimum. The averaging offset doubles whenever the distance between the
/// best response and the average grows by more than `DISTANCE_GROWTH`, and decays back
/// geometrically while it shrinks. The recorded residual is the larger of the density
/// change and `||c_T m(., T)^theta - psi||_1 / c_T`.
///
/// Exhausting `max_iter` is not an error: the report then has `converged = false`.
pub fn solve_terminal_cost(m0: &[f64], params: &Params, grid: &Grid, opts: &SolverOptions) -> Result<Solution> {
    validate_density(m0, grid.nx, "m0")?;
    check_cfl_number(opts.cfl)?;
    let guess = dilation_guess(m0, params, grid)?;
    solve_terminal_cost_from(m0, params, guess, opts)
}

/// As [`solve_terminal_cost`], starting the iteration from a caller-supplied density.
pub fn solve_terminal_cost_from(m0: &[f64], params: &Params, guess: Field, opts: &SolverOptions) -> Result<Solution> {
    let start = Instant::now();
    let grid = *guess.grid();
    validate_density(m0, grid.nx, "m0")?;
    check_cfl_number(opts.cfl)?;
    let theta = params.theta();
    let c_t = params.terminal_coefficient(grid.t1);
    let mut mbar = guess;
    mbar.kind = FieldKind::Density;
    mbar.row_slice_mut(0).copy_from_slice(m0);
    let mut psi: Vec<f64> = mbar.row_slice(grid.nt).iter().map(|&v| c_t * coupling(v, theta)).collect();
    let mut fp = FixedPoint::new(m0, theta, grid, *opts);
    let offset = opts.offset_for(&grid);
    let mut history = Vec::new();
    let mut converged = false;
    let mut r = vec![0.0; grid.nx];
    let mut schedule = Schedule::new(opts, offset);
    let mut relaxation = opts.terminal_relaxation;
    let mut best_gap = f64::INFINITY;
    let mut stall = 0;
    for k in 0..opts.max_iter {
        let weight = schedule.weight(k);
        let change = fp.iterate(&mut mbar, &psi, weight)?;
        schedule.observe(k, change / weight);
        let end = fp.response_end();
        let mut peak = 0.0_f64;
        for (ri, (&v, &p)) in r.iter_mut().zip(end.iter().zip(&psi)) {
            let target = c_t * coupling(v, theta);
            peak = peak.max(target);
            *ri = target - p;
        }
        let gap = r.iter().map(|v| v.abs()).sum::<f64>() * grid.dx / c_t;
        if gap < best_gap {
            best_gap = gap;
            stall = 0;
        } else {
            stall += 1;
        }
        if stall >= GAP_STALL && relaxation > MIN_TERMINAL_RELAXATION {
            relaxation = (0.5 * relaxation).max(MIN_TERMINAL_RELAXATION);
            stall = 0;
        }
        let slope = psi.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max) / grid.dx;
        let sigma = slope.max(1e-3);
        let (a, b) = terminal_gain_model(theta * peak, grid.t1 - grid.t0, sigma, grid.dx);
        if relaxation > 0.0 {
            let z = apply_terminal_preconditioner(&r, a, b, grid.dx);
            for (p, dz) in psi.iter_mut().zip(&z) {
                *p += relaxation * dz;
            }
        } else {
            for (p, &v) in psi.iter_mut().zip(mbar.row_slice(grid.nt)) {
                *p = c_t * coupling(v, theta);
            }
        }
        let residual = change.max(gap);
        history.push(residual);
        if residual <= opts.tol {
            converged = true;
            break;
        }
    }
    let u = fp.final_value(&mbar, &psi)?;
    Ok(Solution {
        u,
        m: mbar,
        report: SolveReport {
            iterations: history.len(),
            residual_history: history,
            converged,
            wall_time: start.elapsed().as_secs_f64(),
        },
    })
}

/// Planning problem `m(., T) = m_T` by dual ascent on a terminal potential `psi`:
/// each fixed-point sweep with `u(., T) = psi` is followed by
/// `psi += sigma P (m(., T) - m_T)`, where `P` approximately inverts the response of the
/// terminal density to `psi`. The step `sigma` is halved when the gap more than doubles.
/// The recorded residual is the larger of the density change and the terminal gap of the
/// averaged density.
///
/// The returned value function is normalized by `int u(., T/2) m(., T/2) dx = 0`.
pub fn solve_planning(m0: &[f64], mt: &[f64], params: &Params, grid: &Grid, opts: &SolverOptions) -> Result<Solution> {
    let start = Instant::now();
    validate_density(m0, grid.nx, "m0")?;
    validate_density(mt, grid.nx, "m_T")?;
    check_cfl_number(opts.cfl)?;
    let mass0: f64 = m0.iter().sum::<f64>() * grid.dx;
    let mass1: f64 = mt.iter().sum::<f64>() * grid.dx;
    if (mass0 - mass1).abs() > 1e-10 * mass0.max(mass1) {
        return domain(format!(
            "compatibility condition violated: int m_T = {mass1} differs from int m_0 = {mass0}"
        ));
    }
    let theta = params.theta();
    let c_t = params.terminal_coefficient(grid.t1);
    let mut psi: Vec<f64> = mt.iter().map(|&v| c_t * coupling(v, theta)).collect();
    let mut mbar = planning_guess(m0, mt, params, grid)?;
    let mut fp = FixedPoint::new(m0, theta, *grid, *opts);
    let mut schedule = Schedule::new(opts, opts.offset_for(grid));
    let span = grid.t1 - grid.t0;
    let peak = mt.iter().fold(0.0_f64, |a, &b| a.max(b)).max(1e-12);
    let mut step = opts.planning_step;
    let mut history = Vec::new();
    let mut converged = false;
    let mut prev_gap = f64::INFINITY;
    let mut r = vec![0.0; grid.nx];
    for k in 0..opts.max_iter {
        let weight = schedule.weight(k);
        let change = fp.iterate(&mut mbar, &psi, weight)?;
        schedule.observe(k, change / weight);
        for (ri, (&a, &b)) in r.iter_mut().zip(fp.response_end().iter().zip(mt)) {
            *ri = a - b;
        }
        let gap = r.iter().map(|v| v.abs()).sum::<f64>() * grid.dx;
        let avg_gap: f64 = mbar.row_slice(grid.nt).iter().zip(mt).map(|(a, b)| (a - b).abs()).sum::<f64>() * grid.dx;
        let residual = change.max(avg_gap);
        history.push(residual);
        if residual <= opts.tol {
            converged = true;
            break;
        }
        if gap > 2.0 * prev_gap {
            step *= 0.5;
        }
        prev_gap = gap;
        let slope = psi.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max) / grid.dx;
        let z = apply_planning_preconditioner(&r, span, slope.max(1e-3), peak, grid.dx);
        for (p, dz) in psi.iter_mut().zip(&z) {
            *p += step * dz;
        }
    }
    let mut u = fp.final_value(&mbar, &psi)?;
    normalize_planning_value(&mut u, &mbar);
    Ok(Solution {
        u,
        m: mbar,
        report: SolveReport {
            iterations: history.len(),
            residual_history: history,
            converged,
            wall_time: start.elapsed().as_secs_f64(),
        },
    })
}

/// Shifts `u` so that `int u(., T/2) m(., T/2) dx = 0`.
pub fn normalize_planning_value(u: &mut Field, m: &Field) {
    let grid = *u.grid();
    let mid = grid.nearest_level(0.5 * (grid.t0 + grid.t1));
    let mass = m.integral(mid);
    let weighted: f64 = u.row_slice(mid).iter().zip(m.row_slice(mid)).map(|(a, b)| a * b).sum::<f64>() * grid.dx;
    let shift = weighted / mass;
    u.values.mapv_inplace(|v| v - shift);
}

/// Cell averages of `m0` with `m0^theta = c (x - a0)(b0 - x)` on `(a0, b0)` and zero
/// elsewhere; `c` is chosen by quadrature so that `int m0 = mass`.
pub fn make_bump_initial(a0: f64, b0: f64, mass: f64, theta: f64, grid: &Grid) -> Result<Vec<f64>> {
    if !(a0 < b0) {
        return domain(format!("degenerate bump interval ({a0}, {b0})"));
    }
    if !(a0 > grid.x_min && b0 < grid.x_max) {
        return domain(format!("bump ({a0}, {b0}) is not inside the domain ({}, {})", grid.x_min, grid.x_max));
    }
    if !(mass > 0.0 && theta > 0.0) {
        return domain("bump mass and theta must be positive");
    }
    let inv = 1.0 / theta;
    let shape = move |x: f64| {
        let q = (x - a0) * (b0 - x);
        if q > 0.0 {
            q.powf(inv)
        } else {
            0.0
        }
    };
    let mid = 0.5 * (a0 + b0);
    let total = adaptive_simpson(&shape, a0, mid, 1e-14) + adaptive_simpson(&shape, mid, b0, 1e-14);
    let scale = mass / total; // c^(1/theta)
    Ok(cell_averages(grid, a0, b0, |x| scale * shape(x)))
}

/// Cell averages of the self-similar density at time `t`.
pub fn self_similar_initial(profile: &SelfSimilarProfile, t: f64, grid: &Grid) -> Result<Vec<f64>> {
    if !(t > 0.0) {
        return domain(format!("self-similar data needs t > 0, got {t}"));
    }
    let edge = profile.support_edge(t);
    if !(-edge > grid.x_min && edge < grid.x_max) {
        return domain("self-similar support exceeds the domain");
    }
    Ok(cell_averages(grid, -edge, edge, |x| profile.density(x, t)))
}

/// Averages of `f` (supported in `[lo, hi]`) over each cell, integrating piecewise so that
/// the kinks at `lo` and `hi` fall on panel boundaries.
pub fn cell_averages(grid: &Grid, lo: f64, hi: f64, f: impl Fn(f64) -> f64) -> Vec<f64> {
    (0..grid.nx)
        .map(|i| {
            let a = grid.x(i) - 0.5 * grid.dx;
            let b = a + grid.dx;
            let a2 = a.max(lo);
            let b2 = b.min(hi);
            if b2 <= a2 {
                return 0.0;
            }
            adaptive_simpson(&f, a2, b2, 1e-15) / grid.dx
        })
        .collect()
}
