//! Numerical verification battery for the Gaussian kernel, runnable from a
//! release binary.

use std::f64::consts::PI;

use serde::Serialize;

use crate::gaussian_kernel::{
    bvn_boundary_value, bvn_upper_tail, bvn_upper_tail_drho, std_normal_cdf, std_normal_quantile, tetrachoric_invert,
    CorrelationLimit, TailQuery,
};

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn grid(lo: f64, hi: f64, steps: usize) -> impl Iterator<Item = f64> + Clone {
    (0..=steps).map(move |k| lo + (hi - lo) * k as f64 / steps as f64)
}

fn tail(c1: f64, c2: f64, rho: f64) -> f64 {
    bvn_upper_tail(&TailQuery::new(c1, c2, rho).expect("valid query")).expect("interior correlation")
}

fn quadrant() -> f64 {
    grid(-0.99, 0.99, 66)
        .map(|rho| (tail(0.0, 0.0, rho) - (0.25 + rho.asin() / (2.0 * PI))).abs())
        .fold(0.0, f64::max)
}

fn quantile_round_trip() -> f64 {
    [1e-12, 1e-6, 0.001, 0.02, 0.3, 0.5, 0.77, 0.999, 1.0 - 1e-9]
        .into_iter()
        .map(|p| (std_normal_cdf(std_normal_quantile(p).expect("p in (0,1)")) - p).abs() / p.min(1.0 - p))
        .fold(0.0, f64::max)
}

fn inversion_round_trip() -> f64 {
    let cs = [-1.0, -0.3, 0.0, 0.4, 1.0];
    let mut worst: f64 = 0.0;
    for &c1 in &cs {
        for &c2 in &cs {
            for rho in grid(-0.9, 0.9, 18) {
                let inv = tetrachoric_invert(c1, c2, tail(c1, c2, rho)).expect("valid target");
                worst = worst.max((inv.rho_hat - rho).abs());
            }
        }
    }
    worst
}

fn boundary_limits() -> f64 {
    let pairs = [(-1.0, 0.5), (0.3, -0.8), (1.2, 0.2), (-0.6, -1.4), (0.0, 1.0)];
    let edge = 1.0 - 1e-6;
    let mut worst: f64 = 0.0;
    for (c1, c2) in pairs {
        let hi = (tail(c1, c2, edge) - bvn_boundary_value(c1, c2, CorrelationLimit::Positive)).abs();
        let lo = (tail(c1, c2, -edge) - bvn_boundary_value(c1, c2, CorrelationLimit::Negative)).abs();
        worst = worst.max(hi).max(lo);
    }
    worst
}

fn derivative() -> f64 {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for c1 in grid(-1.5, 1.5, 6) {
        for c2 in grid(-1.5, 1.5, 6) {
            for rho in grid(-0.9, 0.9, 9) {
                let q = TailQuery::new(c1, c2, rho).expect("valid query");
                let fd = (tail(c1, c2, rho + h) - tail(c1, c2, rho - h)) / (2.0 * h);
                worst = worst.max((fd - bvn_upper_tail_drho(&q).expect("interior")).abs());
            }
        }
    }
    worst
}

/// Largest decrease of `ℓ` between consecutive correlations; zero when
/// monotone.
fn monotonicity() -> f64 {
    let mut worst: f64 = 0.0;
    for (c1, c2) in [(0.0, 0.0), (1.5, -1.5), (-2.0, -0.5), (0.7, 1.9)] {
        let values: Vec<f64> = grid(-0.999, 0.999, 400).map(|rho| tail(c1, c2, rho)).collect();
        for w in values.windows(2) {
            worst = worst.max(w[0] - w[1]);
        }
    }
    worst
}

/// Runs every check with tolerances multiplied by `tolerance_scale`.
pub fn run(tolerance_scale: f64) -> Vec<CheckResult> {
    let checks: [(&'static str, fn() -> f64, f64); 6] = [
        ("quadrant_closed_form", quadrant, 1e-9),
        ("quantile_round_trip", quantile_round_trip, 1e-12),
        ("inversion_round_trip", inversion_round_trip, 1e-8),
        ("boundary_limits", boundary_limits, 1e-6),
        ("derivative_vs_finite_difference", derivative, 1e-6),
        ("monotone_in_rho", monotonicity, 0.0),
    ];
    checks
        .into_iter()
        .map(|(name, f, tol)| {
            let max_error = f();
            let tolerance = tol * tolerance_scale;
            CheckResult { name, max_error, tolerance, passed: max_error <= tolerance }
        })
        .collect()
}
