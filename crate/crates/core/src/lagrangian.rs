//! Lagrangian flow of optimal trajectories `gamma' = -u_x(gamma, t)`, free-boundary
//! extraction and Lagrangian-coordinate diagnostics.

use ndarray::Array2;
use serde::Serialize;

use crate::error::{domain, Error, Result};
use crate::profiles::coupling;
use crate::solver::{Field, Grid};

/// Default threshold on `m^theta` below which a cell counts as empty.
pub const DEFAULT_THRESHOLD: f64 = 1e-10;

/// Trajectories of the flow, indexed `(source, time level)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub source_points: Vec<f64>,
    pub times: Vec<f64>,
    pub gamma: Array2<f64>,
    pub gamma_x: Array2<f64>,
    /// `true` for trajectories that reached the edge of the computational domain.
    pub escaped: Vec<bool>,
}

impl FlowField {
    /// `true` when `gamma(x1, t) < gamma(x2, t)` for all neighbouring sources at all times.
    pub fn is_ordered(&self) -> bool {
        let (ns, nt) = self.gamma.dim();
        (0..nt).all(|n| (1..ns).all(|i| self.gamma[[i, n]] > self.gamma[[i - 1, n]]))
    }
}

fn velocity(u: &Field, x: f64, t: f64) -> Result<f64> {
    Ok(-u.gradient_at(x, t)?)
}

/// Midpoint (RK2) integration of `gamma' = -u_x(gamma, t)` on the time levels of `u`,
/// from `gamma(x, t0) = x`. Sources must be sorted.
pub fn integrate_flow(u: &Field, source_points: &[f64]) -> Result<FlowField> {
    let grid = *u.grid();
    if source_points.is_empty() {
        return domain("no source points");
    }
    if source_points.windows(2).any(|w| w[1] <= w[0]) {
        return domain("source points must be strictly increasing");
    }
    let ns = source_points.len();
    let nt = grid.nt + 1;
    let mut gamma = Array2::zeros((ns, nt));
    let mut escaped = vec![false; ns];
    let (lo, hi) = (grid.x_min, grid.x_max);
    for (s, &x0) in source_points.iter().enumerate() {
        if !(lo..=hi).contains(&x0) {
            return domain(format!("source point {x0} outside the domain [{lo}, {hi}]"));
        }
        let mut x = x0;
        gamma[[s, 0]] = x;
        for n in 0..grid.nt {
            let t = grid.t(n);
            let k1 = -u.gradient_level(n, x);
            let xm = x + 0.5 * grid.dt * k1;
            let k2 = velocity(u, xm, t + 0.5 * grid.dt)?;
            x += grid.dt * k2;
            if x <= lo || x >= hi {
                escaped[s] = true;
                x = x.clamp(lo, hi);
            }
            gamma[[s, n + 1]] = x;
        }
    }
    let gamma_x = source_derivative(&gamma, source_points);
    Ok(FlowField {
        source_points: source_points.to_vec(),
        times: grid.ts(),
        gamma,
        gamma_x,
        escaped,
    })
}

fn source_derivative(gamma: &Array2<f64>, xs: &[f64]) -> Array2<f64> {
    let (ns, nt) = gamma.dim();
    let mut out = Array2::zeros((ns, nt));
    if ns < 2 {
        return out;
    }
    for s in 0..ns {
        let (a, b) = if s == 0 {
            (0, 1)
        } else if s + 1 == ns {
            (ns - 2, ns - 1)
        } else {
            (s - 1, s + 1)
        };
        let h = xs[b] - xs[a];
        for n in 0..nt {
            out[[s, n]] = (gamma[[b, n]] - gamma[[a, n]]) / h;
        }
    }
    out
}

/// Free-boundary traces `{m(., t) > 0} = (gamma_L(t), gamma_R(t))`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FreeBoundary {
    pub t_samples: Vec<f64>,
    pub gamma_l: Vec<f64>,
    pub gamma_r: Vec<f64>,
    pub dgamma_l: Vec<f64>,
    pub dgamma_r: Vec<f64>,
}

impl FreeBoundary {
    fn interp(&self, values: &[f64], t: f64) -> f64 {
        let ts = &self.t_samples;
        if t <= ts[0] {
            return values[0];
        }
        let last = ts.len() - 1;
        if t >= ts[last] {
            return values[last];
        }
        let j = ts.partition_point(|&s| s <= t).max(1) - 1;
        let w = (t - ts[j]) / (ts[j + 1] - ts[j]);
        (1.0 - w) * values[j] + w * values[j + 1]
    }

    pub fn left_at(&self, t: f64) -> f64 {
        self.interp(&self.gamma_l, t)
    }

    pub fn right_at(&self, t: f64) -> f64 {
        self.interp(&self.gamma_r, t)
    }

    pub fn left_speed_at(&self, t: f64) -> f64 {
        self.interp(&self.dgamma_l, t)
    }

    pub fn right_speed_at(&self, t: f64) -> f64 {
        self.interp(&self.dgamma_r, t)
    }

    /// `gamma_L` nonincreasing and `gamma_R` nondecreasing up to `tol`.
    pub fn is_expanding(&self, tol: f64) -> bool {
        self.gamma_l.windows(2).all(|w| w[1] <= w[0] + tol) && self.gamma_r.windows(2).all(|w| w[1] >= w[0] - tol)
    }
}

/// Centred differences of `values` on `ts`, one-sided at the ends.
pub fn time_derivative(values: &[f64], ts: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n < 2 {
        return vec![0.0; n];
    }
    (0..n)
        .map(|j| {
            let (a, b) = if j == 0 {
                (0, 1)
            } else if j + 1 == n {
                (n - 2, n - 1)
            } else {
                (j - 1, j + 1)
            };
            (values[b] - values[a]) / (ts[b] - ts[a])
        })
        .collect()
}

/// Edge position of one time level. `p` holds `m^theta`; `i` is the outermost cell above
/// the threshold and `inner` its inward neighbour. `m^theta` is extrapolated linearly from
/// these two cells to its zero, which is kept inside cell `i` and the next one.
fn edge_position(p: &[f64], grid: &Grid, i: usize, inner: Option<usize>, outward: f64) -> f64 {
    let xi = grid.x(i);
    let Some(j) = inner else {
        return xi + outward * 0.5 * grid.dx;
    };
    let drop = p[j] - p[i];
    let offset = if drop > 0.0 { p[i] / drop * grid.dx } else { 0.5 * grid.dx };
    xi + outward * offset.clamp(0.0, grid.dx)
}

/// Locates `gamma_L`, `gamma_R` at every time level: the outermost cells with
/// `m^theta > threshold`, refined by linear extrapolation of `m^theta` to its zero.
pub fn extract_free_boundary(m: &Field, theta: f64, threshold: f64) -> Result<FreeBoundary> {
    let grid = *m.grid();
    let nt = grid.nt + 1;
    let mut gamma_l = Vec::with_capacity(nt);
    let mut gamma_r = Vec::with_capacity(nt);
    let mut p = vec![0.0; grid.nx];
    for n in 0..nt {
        for (pi, &v) in p.iter_mut().zip(m.row(n).iter()) {
            *pi = coupling(v, theta);
        }
        let first = p.iter().position(|&v| v > threshold);
        let last = p.iter().rposition(|&v| v > threshold);
        let (Some(a), Some(b)) = (first, last) else {
            return Err(Error::EmptySupport {
                time_index: n,
                time: grid.t(n),
            });
        };
        let inner_a = (a < b).then_some(a + 1);
        let inner_b = (b > a).then(|| b - 1);
        gamma_l.push(edge_position(&p, &grid, a, inner_a, -1.0));
        gamma_r.push(edge_position(&p, &grid, b, inner_b, 1.0));
    }
    let ts = grid.ts();
    Ok(FreeBoundary {
        dgamma_l: time_derivative(&gamma_l, &ts),
        dgamma_r: time_derivative(&gamma_r, &ts),
        t_samples: ts,
        gamma_l,
        gamma_r,
    })
}

/// Default band `(lo, hi)`, as fractions of `max m^theta`, used by [`fit_free_boundary`].
pub const DEFAULT_FIT_BAND: (f64, f64) = (0.05, 0.5);

/// Least-squares line through `(x, p)` extrapolated to `p = 0`.
fn line_root(xs: &[f64], ps: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let mp = ps.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxp: f64 = xs.iter().zip(ps).map(|(x, p)| (x - mx) * (p - mp)).sum();
    let slope = sxp / sxx;
    (slope.is_finite() && slope != 0.0).then(|| mx - mp / slope)
}

/// Least-squares parabola through `(x, p)`; returns its zero closest to `near`.
fn parabola_root(xs: &[f64], ps: &[f64], near: f64) -> Option<f64> {
    if xs.len() < 3 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let sx = xs.iter().map(|x| x - mx).fold(0.0, |a: f64, d| a.max(d.abs()));
    if !(sx > 0.0) {
        return None;
    }
    // normal equations in the scaled variable s = (x - mx) / sx
    let mut a = [[0.0; 3]; 3];
    let mut b = [0.0; 3];
    for (&x, &p) in xs.iter().zip(ps) {
        let s = (x - mx) / sx;
        let phi = [1.0, s, s * s];
        for r in 0..3 {
            b[r] += phi[r] * p;
            for c in 0..3 {
                a[r][c] += phi[r] * phi[c];
            }
        }
    }
    let det = |m: &[[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(&a);
    if !(d.abs() > 1e-12) {
        return None;
    }
    let coef = |k: usize| {
        let mut m = a;
        for r in 0..3 {
            m[r][k] = b[r];
        }
        det(&m) / d
    };
    let (c0, c1, c2) = (coef(0), coef(1), coef(2));
    let target = (near - mx) / sx;
    let root = if c2.abs() < 1e-12 * (c1.abs() + c0.abs()) {
        (c1 != 0.0).then(|| -c0 / c1)?
    } else {
        let disc = c1 * c1 - 4.0 * c2 * c0;
        if disc < 0.0 {
            return None;
        }
        let q = -0.5 * (c1 + c1.signum() * disc.sqrt());
        let r1 = q / c2;
        let r2 = if q != 0.0 { c0 / q } else { r1 };
        if (r1 - target).abs() <= (r2 - target).abs() { r1 } else { r2 }
    };
    let x = mx + sx * root;
    x.is_finite().then_some(x)
}

/// Edge of one flank of `p = m^theta`: the parabola fitted to the cells between the peak
/// and the first cell below `lo * peak`, restricted to values at most `hi * peak`,
/// extrapolated to its zero. Falls back on a line, then on the two cells around the
/// `lo * peak` crossing.
fn flank_root(p: &[f64], grid: &Grid, order: &[usize], band: (f64, f64), peak: f64) -> f64 {
    let (lo, hi) = (band.0 * peak, band.1 * peak);
    let mut xs = Vec::new();
    let mut ps = Vec::new();
    let mut last_above = order[0];
    let mut first_below = None;
    for &i in order {
        if p[i] < lo {
            first_below = Some(i);
            break;
        }
        last_above = i;
        if p[i] <= hi {
            xs.push(grid.x(i));
            ps.push(p[i]);
        }
    }
    let fallback = grid.x(last_above);
    if let Some(x) = parabola_root(&xs, &ps, fallback) {
        // a root on the wrong side of the band means the flank is not parabolic there
        let outward = (x - fallback) * (fallback - grid.x(order[0])) >= 0.0;
        if outward && (x - fallback).abs() <= (fallback - grid.x(order[0])).abs() {
            return x;
        }
    }
    if xs.len() < 2 {
        xs = vec![grid.x(last_above)];
        ps = vec![p[last_above]];
        if let Some(j) = first_below {
            xs.push(grid.x(j));
            ps.push(p[j]);
        }
    }
    if xs.len() < 2 {
        return fallback;
    }
    line_root(&xs, &ps).unwrap_or(fallback)
}

/// Locates `gamma_L`, `gamma_R` by fitting a parabola to `m^theta` on each flank, over the
/// cells whose values lie in `band` (fractions of the peak), and taking its zero.
///
/// Unlike [`extract_free_boundary`], the result ignores thin tails left by numerical
/// diffusion ahead of the front.
pub fn fit_free_boundary(m: &Field, theta: f64, band: (f64, f64)) -> Result<FreeBoundary> {
    if !(band.0 > 0.0 && band.0 < band.1 && band.1 <= 1.0) {
        return domain(format!("fit band must satisfy 0 < lo < hi <= 1, got {band:?}"));
    }
    let grid = *m.grid();
    let mut gamma_l = Vec::with_capacity(grid.nt + 1);
    let mut gamma_r = Vec::with_capacity(grid.nt + 1);
    let mut p = vec![0.0; grid.nx];
    for n in 0..=grid.nt {
        for (pi, &v) in p.iter_mut().zip(m.row(n).iter()) {
            *pi = coupling(v, theta);
        }
        let (top, peak) = p
            .iter()
            .enumerate()
            .fold((0, 0.0), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        if !(peak > 0.0) {
            return Err(Error::EmptySupport {
                time_index: n,
                time: grid.t(n),
            });
        }
        let right: Vec<usize> = (top..grid.nx).collect();
        let left: Vec<usize> = (0..=top).rev().collect();
        gamma_r.push(flank_root(&p, &grid, &right, band, peak));
        gamma_l.push(flank_root(&p, &grid, &left, band, peak));
    }
    let ts = grid.ts();
    Ok(FreeBoundary {
        dgamma_l: time_derivative(&gamma_l, &ts),
        dgamma_r: time_derivative(&gamma_r, &ts),
        t_samples: ts,
        gamma_l,
        gamma_r,
    })
}

/// `p(x, t) = m(gamma(x, t), t)^theta`, indexed like `flow.gamma`.
pub fn lagrangian_density(m: &Field, flow: &FlowField, theta: f64) -> Result<Array2<f64>> {
    let grid = m.grid();
    let (ns, nt) = flow.gamma.dim();
    if nt != grid.nt + 1 {
        return domain("flow and density have different time levels");
    }
    Ok(Array2::from_shape_fn((ns, nt), |(s, n)| {
        coupling(m.interp_level(n, flow.gamma[[s, n]]).max(0.0), theta)
    }))
}

/// Largest relative defect of `gamma_x(x, t) m(gamma(x, t), t) = m0(x)` over all
/// trajectories and times, skipping sources with `m0(x) <= floor` and escaped trajectories.
pub fn mass_identity_defect(m: &Field, flow: &FlowField, floor: f64) -> f64 {
    let (ns, nt) = flow.gamma.dim();
    let mut worst = 0.0_f64;
    for s in 0..ns {
        if flow.escaped[s] {
            continue;
        }
        let m0 = m.interp_level(0, flow.source_points[s]);
        if m0 <= floor {
            continue;
        }
        for n in 0..nt {
            let lhs = flow.gamma_x[[s, n]] * m.interp_level(n, flow.gamma[[s, n]]);
            worst = worst.max((lhs - m0).abs() / m0);
        }
    }
    worst
}

/// `sup p / inf p` over the intrinsic rectangle
/// `(x0 - t0^{-alpha/2} rho, x0 + t0^{-alpha/2} rho) x (t0 - h, t0 + h)`,
/// `h = t0^{alpha/2} (theta p(x0, t0))^{-1/2} rho`, sampled on the flow's sources and time
/// levels. `None` when the rectangle holds no samples or `p` vanishes on it.
pub fn harnack_ratio(p: &Array2<f64>, flow: &FlowField, theta: f64, alpha: f64, x0: f64, t0: f64, rho: f64) -> Option<f64> {
    let xs = &flow.source_points;
    let ts = &flow.times;
    let s0 = xs.iter().enumerate().min_by(|a, b| (a.1 - x0).abs().total_cmp(&(b.1 - x0).abs()))?.0;
    let n0 = ts.iter().enumerate().min_by(|a, b| (a.1 - t0).abs().total_cmp(&(b.1 - t0).abs()))?.0;
    let p0 = p[[s0, n0]];
    if p0 <= 0.0 {
        return None;
    }
    let half_x = t0.powf(-0.5 * alpha) * rho;
    let half_t = t0.powf(0.5 * alpha) * (theta * p0).powf(-0.5) * rho;
    let mut sup = 0.0_f64;
    let mut inf = f64::INFINITY;
    for (s, &x) in xs.iter().enumerate() {
        if (x - x0).abs() >= half_x {
            continue;
        }
        for (n, &t) in ts.iter().enumerate() {
            if (t - t0).abs() >= half_t {
                continue;
            }
            sup = sup.max(p[[s, n]]);
            inf = inf.min(p[[s, n]]);
        }
    }
    (inf > 0.0 && inf.is_finite()).then(|| sup / inf)
}

/// The three shapes of an optimal trajectory started left of the support.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryCase {
    /// `beta' = 0` on `[t, T]`.
    Stationary,
    /// Straight line from `(x, t)` to `(gamma_L(T), T)`.
    ToTerminalEdge,
    /// Straight line until `contact_time`, then along `gamma_L`.
    Tangent { contact_time: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub x: f64,
    pub t: f64,
    /// Shape of the integrated characteristic; `None` when it fits none of the cases.
    pub case: Option<TrajectoryCase>,
    /// Case predicted from the position of `x` relative to `gamma_L(T)` and the supporting
    /// line of `gamma_L` at `T`.
    pub predicted: TrajectoryCase,
    /// Largest distance between the straight part of the trajectory and its chord.
    pub linearity_residual: f64,
    pub u_x: f64,
    pub gradient_bound: f64,
}

impl ProbeReport {
    pub fn bound_holds(&self, slack: f64) -> bool {
        self.u_x.abs() <= self.gradient_bound * (1.0 + slack) + 1e-12
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryReport {
    pub probes: Vec<ProbeReport>,
    pub tolerance: f64,
}

impl TrajectoryReport {
    pub fn all_classified(&self) -> bool {
        self.probes.iter().all(|p| p.case.is_some())
    }

    pub fn max_linearity_residual(&self) -> f64 {
        self.probes.iter().map(|p| p.linearity_residual).fold(0.0, f64::max)
    }
}

/// Integrates the characteristic `beta' = -u_x(beta, s)` from each probe `(x, t)` with
/// `x < gamma_L(t)` up to the final time and classifies its shape. Positions are compared
/// with tolerance `2 dx`.
pub fn check_vanishing_trajectories(u: &Field, fb: &FreeBoundary, probes: &[(f64, f64)]) -> Result<TrajectoryReport> {
    let grid = *u.grid();
    let tol = 2.0 * grid.dx;
    let t_end = grid.t1;
    let edge_end = fb.left_at(t_end);
    let slope_end = fb.left_speed_at(t_end);
    let mut reports = Vec::with_capacity(probes.len());
    for &(x, t) in probes {
        grid.time_position(t)?;
        if x >= fb.left_at(t) {
            return domain(format!("probe ({x}, {t}) is not left of the support"));
        }
        let (times, path) = characteristic(u, &grid, x, t)?;
        let line = edge_end + slope_end * (t - t_end);
        let predicted = if x <= edge_end {
            TrajectoryCase::Stationary
        } else if x <= line {
            TrajectoryCase::ToTerminalEdge
        } else {
            TrajectoryCase::Tangent { contact_time: f64::NAN }
        };
        let contact = times
            .iter()
            .zip(&path)
            .position(|(&s, &b)| fb.left_at(s) - b <= tol);
        let time_tol = tol / slope_end.abs().max(1e-12);
        let (case, straight_end) = match contact {
            None => {
                let still = path.iter().all(|&b| (b - x).abs() <= tol);
                (still.then_some(TrajectoryCase::Stationary), path.len() - 1)
            }
            Some(j) => {
                let follows = times[j..].iter().zip(&path[j..]).all(|(&s, &b)| (b - fb.left_at(s)).abs() <= tol);
                let case = if !follows {
                    None
                } else if path.iter().all(|&b| (b - x).abs() <= tol) {
                    Some(TrajectoryCase::Stationary)
                } else if times[j] >= t_end - time_tol {
                    Some(TrajectoryCase::ToTerminalEdge)
                } else {
                    Some(TrajectoryCase::Tangent { contact_time: times[j] })
                };
                (case, j)
            }
        };
        let linearity_residual = chord_deviation(&times[..=straight_end], &path[..=straight_end]);
        let ux = u.gradient_at(x, t)?;
        let bound = fb.left_speed_at(t).abs().max(fb.right_speed_at(t).abs());
        reports.push(ProbeReport {
            x,
            t,
            case,
            predicted,
            linearity_residual,
            u_x: ux,
            gradient_bound: bound,
        });
    }
    Ok(TrajectoryReport {
        probes: reports,
        tolerance: tol,
    })
}

fn characteristic(u: &Field, grid: &Grid, x: f64, t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut times = vec![t];
    let first = ((t - grid.t0) / grid.dt).floor() as usize + 1;
    times.extend((first..=grid.nt).map(|n| grid.t(n)).filter(|&s| s > t + 1e-12 * grid.dt));
    let mut path = Vec::with_capacity(times.len());
    let mut b = x;
    path.push(b);
    for w in times.windows(2) {
        let h = w[1] - w[0];
        let k1 = velocity(u, b, w[0])?;
        let k2 = velocity(u, b + 0.5 * h * k1, w[0] + 0.5 * h)?;
        b += h * k2;
        path.push(b);
    }
    Ok((times, path))
}

fn chord_deviation(times: &[f64], path: &[f64]) -> f64 {
    let n = path.len();
    if n < 3 {
        return 0.0;
    }
    let (t0, t1) = (times[0], times[n - 1]);
    let (b0, b1) = (path[0], path[n - 1]);
    times
        .iter()
        .zip(path)
        .map(|(&s, &b)| (b - (b0 + (b1 - b0) * (s - t0) / (t1 - t0))).abs())
        .fold(0.0, f64::max)
}
