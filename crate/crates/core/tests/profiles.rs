use approx::assert_relative_eq;
use mfglab::profiles::{alpha_of, compute_r_a, coupling, profile_mass, SelfSimilarProfile};
use proptest::prelude::*;
use statrs::function::beta::beta;

/// `int (R - c eta^2)_+^(1/theta) = R^(1/theta + 1/2) c^(-1/2) B(1/2, 1/theta + 1)`, inverted for `R`.
fn r_from_beta(mass: f64, theta: f64) -> f64 {
    let alpha = alpha_of(theta);
    let c = 0.5 * alpha * (1.0 - alpha);
    let b = beta(0.5, 1.0 / theta + 1.0);
    (mass * c.sqrt() / b).powf(1.0 / (1.0 / theta + 0.5))
}

fn trapezoid_mass(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    (0..=n)
        .map(|i| {
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            w * f(a + i as f64 * h)
        })
        .sum::<f64>()
        * h
}

#[test]
fn normalization_constant_matches_beta_function() {
    for theta in [0.5, 2.0 / 3.0, 1.0, 2.0, 3.0, 4.0, 7.5] {
        for mass in [0.1, 1.0, 3.0] {
            let r = compute_r_a(mass, theta).unwrap();
            assert_relative_eq!(r, r_from_beta(mass, theta), max_relative = 1e-9);
        }
    }
}

#[test]
fn critical_constant_for_unit_mass() {
    let r = compute_r_a(1.0, 2.0).unwrap();
    assert_relative_eq!(r, 1.0 / (std::f64::consts::PI * 2f64.sqrt()), max_relative = 1e-10);
}

#[test]
fn profile_mass_inverts_normalization() {
    for theta in [1.0, 2.0, 4.0] {
        let r = compute_r_a(2.5, theta).unwrap();
        assert_relative_eq!(profile_mass(r, theta), 2.5, max_relative = 1e-10);
    }
}

#[test]
fn support_edge_is_where_pressure_vanishes() {
    let p = SelfSimilarProfile::new(1.0, 2.0).unwrap();
    assert!(p.pressure(p.support_half_width).abs() < 1e-14);
    assert_eq!(p.stationary_density(1.0001 * p.support_half_width), 0.0);
    assert!(p.eval(0.5 * p.support_edge(3.0), 3.0).unwrap().u.is_some());
    assert!(p.eval(1.01 * p.support_edge(3.0), 3.0).unwrap().u.is_none());
}

#[test]
fn closed_form_solves_both_equations() {
    // centred differences of the closed form inside the support
    for theta in [1.0, 2.0, 4.0] {
        let p = SelfSimilarProfile::new(1.0, theta).unwrap();
        let h = 1e-4;
        let u = |x: f64, t: f64| p.eval(x, t).unwrap().u.unwrap();
        for t in [1.0, 3.0, 10.0] {
            for frac in [-0.7, -0.2, 0.0, 0.4, 0.8] {
                let x = frac * p.support_edge(t);
                let ut = (u(x, t + h) - u(x, t - h)) / (2.0 * h);
                let ux = (u(x + h, t) - u(x - h, t)) / (2.0 * h);
                let hj = -ut + 0.5 * ux * ux - coupling(p.density(x, t), theta);
                assert!(hj.abs() < 1e-6, "theta {theta} t {t} x {x}: {hj}");
                let mt = (p.density(x, t + h) - p.density(x, t - h)) / (2.0 * h);
                let flux = |y: f64| p.density(y, t) * p.gradient(y, t);
                let div = (flux(x + h) - flux(x - h)) / (2.0 * h);
                assert!((mt - div).abs() < 1e-6, "theta {theta} t {t} x {x}");
            }
        }
    }
}

proptest! {
    #[test]
    fn mass_is_constant_in_time(theta in 0.5f64..6.0, t in 0.2f64..50.0) {
        let p = SelfSimilarProfile::new(1.3, theta).unwrap();
        let edge = p.support_edge(t);
        let mass = trapezoid_mass(|x| p.density(x, t), -edge, edge, 20_000);
        prop_assert!((mass - 1.3).abs() < 2e-3, "mass {}", mass);
    }

    #[test]
    fn density_obeys_scaling(theta in 0.5f64..6.0, lambda in 0.1f64..10.0, x in -1.0f64..1.0, t in 0.5f64..5.0) {
        let p = SelfSimilarProfile::new(1.0, theta).unwrap();
        let a = p.alpha;
        let lhs = p.density(lambda.powf(a) * x, lambda * t);
        let rhs = lambda.powf(-a) * p.density(x, t);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1.0));
    }

    #[test]
    fn normalization_scales_with_mass(theta in 0.5f64..6.0, a in 0.1f64..5.0, lambda in 0.2f64..5.0) {
        let r1 = compute_r_a(a, theta).unwrap();
        let r2 = compute_r_a(lambda * a, theta).unwrap();
        let expected = r1 * lambda.powf(2.0 * theta / (theta + 2.0));
        prop_assert!((r2 - expected).abs() <= 1e-8 * expected);
    }
}
