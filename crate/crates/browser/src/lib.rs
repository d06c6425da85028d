use binfactor::gaussian_kernel::{bvn_boundary_value, bvn_upper_tail, tetrachoric_invert, CorrelationLimit, TailQuery};
use binfactor::moment_estimation::estimate_tetrachoric;
use binfactor::simulation_lab::{
    generate_dataset, generate_true_model, metric_max_err, metric_subspace, metric_tau_err, SimScenario,
};
use binfactor::spectral_subspace::fit_from_tetrachoric;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const MAX_CURVE_POINTS: usize = 2001;
const MAX_CELLS: usize = 4_000_000;

#[derive(Debug, Serialize)]
pub struct TailCurve {
    pub rho: Vec<f64>,
    pub ell: Vec<f64>,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Serialize)]
pub struct Inversion {
    pub rho_hat: f64,
    pub ell_at_rho: f64,
    pub iterations: usize,
    pub clamped: bool,
}

#[derive(Debug, Serialize)]
pub struct FitReport {
    pub max_err: f64,
    pub subspace_d: f64,
    pub tau_err: f64,
    pub eigvals: Vec<f64>,
    pub b_true: Vec<Vec<f64>>,
    pub b_hat: Vec<Vec<f64>>,
}

/// `ℓ(c1, c2; ρ)` on an even grid over the open interval, plus both limits.
pub fn tail_curve_report(c1: f64, c2: f64, points: usize) -> Result<TailCurve, String> {
    if !(3..=MAX_CURVE_POINTS).contains(&points) {
        return Err(format!("points must lie in 3..={MAX_CURVE_POINTS}"));
    }
    let step = 2.0 / (points - 1) as f64;
    let rho: Vec<f64> = (1..points - 1).map(|i| -1.0 + i as f64 * step).collect();
    let ell = rho
        .iter()
        .map(|&r| TailQuery::new(c1, c2, r).and_then(|q| bvn_upper_tail(&q)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    Ok(TailCurve {
        rho,
        ell,
        lower: bvn_boundary_value(c1, c2, CorrelationLimit::Negative),
        upper: bvn_boundary_value(c1, c2, CorrelationLimit::Positive),
    })
}

pub fn inversion_report(c1: f64, c2: f64, p: f64) -> Result<Inversion, String> {
    let r = tetrachoric_invert(c1, c2, p).map_err(|e| e.to_string())?;
    Ok(Inversion { rho_hat: r.rho_hat, ell_at_rho: r.ell_at_rho, iterations: r.iterations, clamped: r.clamped })
}

/// Draw one dataset, fit it, and compare against the generating model.
pub fn simulate_fit_report(d: usize, p: usize, n: usize, seed: u64) -> Result<FitReport, String> {
    if n.saturating_mul(p) > MAX_CELLS {
        return Err(format!("n × p must not exceed {MAX_CELLS}"));
    }
    let scn = SimScenario::new(d, p, n, 1, seed).map_err(|e| e.to_string())?;
    let tm = generate_true_model(&scn, 0);
    let data = generate_dataset(&tm, n, seed, 0, false);
    let (marginals, tetra) = estimate_tetrachoric(&data.y);
    let model = fit_from_tetrachoric(&marginals, &tetra, d).map_err(|e| e.to_string())?;
    let b_hat = (0..p).map(|j| model.loading(j)).collect();
    let b_true = (0..p).map(|j| tm.b.row(j).iter().copied().collect()).collect();
    Ok(FitReport {
        max_err: metric_max_err(&tetra.sigma, &tm).map_err(|e| e.to_string())?,
        subspace_d: metric_subspace(&tm.b, &model.b_hat).map_err(|e| e.to_string())?,
        tau_err: metric_tau_err(&model, &tm).map_err(|e| e.to_string())?,
        eigvals: model.eigvals.clone(),
        b_true,
        b_hat,
    })
}

fn to_json<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string())).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn tail_curve(c1: f64, c2: f64, points: usize) -> Result<String, JsValue> {
    to_json(tail_curve_report(c1, c2, points))
}

#[wasm_bindgen]
pub fn invert(c1: f64, c2: f64, p: f64) -> Result<String, JsValue> {
    to_json(inversion_report(c1, c2, p))
}

#[wasm_bindgen]
pub fn simulate_fit(d: usize, p: usize, n: usize, seed: u64) -> Result<String, JsValue> {
    to_json(simulate_fit_report(d, p, n, seed))
}
