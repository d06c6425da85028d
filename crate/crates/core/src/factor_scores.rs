//! Per-sample latent factor scores: maximise the restricted probit
//! log-likelihood
//!
//! ```text
//! L(z) = p⁻¹ Σ_j 1(τ̂_j > τ) [ y_j log Φ(x_j) + (1 - y_j) log{1 - Φ(x_j)} ],
//! x_j  = (b̂_jᵀ z - ĉ_j) / τ̂_j
//! ```
//!
//! by Fisher scoring with step halving. `L` is concave in `z`, so the
//! ascent from `z = 0` reaches the global maximiser whenever one exists.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::gaussian_kernel::{std_normal_cdf, std_normal_pdf, std_normal_sf};
use crate::moment_estimation::BinaryMatrix;
use crate::parallel::map_indexed;
use crate::spectral_subspace::FactorModel;

/// Probabilities inside the logs are kept within `[PROB_FLOOR, 1 - PROB_FLOOR]`.
pub const PROB_FLOOR: f64 = 1e-15;
const MAX_HALVINGS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    /// Percentage of components kept in the likelihood.
    pub m_percent: f64,
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Optional radius `Z_max`; iterates are projected onto `‖z‖ ≤ Z_max`.
    pub z_box: Option<f64>,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self { m_percent: 90.0, grad_tol: 1e-8, max_iter: 100, z_box: None }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.m_percent > 0.0 && self.m_percent <= 100.0) {
            return domain(format!("m must lie in (0, 100], got {}", self.m_percent));
        }
        if !(self.grad_tol > 0.0) {
            return domain(format!("gradient tolerance must be positive, got {}", self.grad_tol));
        }
        if self.max_iter < 1 {
            return domain("max_iter must be at least 1");
        }
        if let Some(r) = self.z_box {
            if !(r > 0.0) {
                return domain(format!("z_box radius must be positive, got {r}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    pub loglik: f64,
}

/// `n × d` factor scores with one convergence record per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentScores {
    pub z_hat: DMatrix<f64>,
    pub records: Vec<ConvergenceRecord>,
    /// Inclusion threshold applied to `τ̂_j`.
    pub tau: f64,
}

/// Threshold `τ` such that `⌈m p / 100⌉` of the `τ̂_j` exceed it.
///
/// Taken just below the `(100 - m)`th percentile of the values, so ties at
/// the cut point are all included.
pub fn select_tau_threshold(tau_hat: &[f64], m_percent: f64) -> f64 {
    if tau_hat.is_empty() {
        return 0.0;
    }
    let p = tau_hat.len();
    let mut sorted = tau_hat.to_vec();
    sorted.sort_by(f64::total_cmp);
    let keep = ((m_percent * p as f64 / 100.0) - 1e-9).ceil().clamp(1.0, p as f64) as usize;
    sorted[p - keep] - 1e-12
}

/// One sample's likelihood: the included components and their data.
struct RowProblem<'a> {
    b_hat: &'a DMatrix<f64>,
    c_hat: &'a [f64],
    tau_hat: &'a [f64],
    included: &'a [usize],
    y_row: &'a [u8],
    p: usize,
}

impl RowProblem<'_> {
    fn x(&self, j: usize, z: &DVector<f64>) -> f64 {
        (self.b_hat.row(j).transpose().dot(z) - self.c_hat[j]) / self.tau_hat[j]
    }

    fn loglik(&self, z: &DVector<f64>) -> f64 {
        let sum: f64 = self
            .included
            .iter()
            .map(|&j| {
                let x = self.x(j, z);
                let prob = if self.y_row[j] == 1 { std_normal_cdf(x) } else { std_normal_sf(x) };
                prob.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR).ln()
            })
            .sum();
        sum / self.p as f64
    }

    fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(z.len());
        for &j in self.included {
            let x = self.x(j, z);
            // (y - Φ) φ / {Φ (1 - Φ)} reduces to ±φ/Φ(±x)
            let score = if self.y_row[j] == 1 {
                std_normal_pdf(x) / std_normal_cdf(x).max(f64::MIN_POSITIVE)
            } else {
                -std_normal_pdf(x) / std_normal_sf(x).max(f64::MIN_POSITIVE)
            };
            g += self.b_hat.row(j).transpose() * (score / self.tau_hat[j]);
        }
        g / self.p as f64
    }

    fn fisher(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let d = z.len();
        let mut info = DMatrix::zeros(d, d);
        for &j in self.included {
            let w = fisher_weight(self.x(j, z)) / (self.tau_hat[j] * self.tau_hat[j]);
            let b = self.b_hat.row(j).transpose();
            info += &b * b.transpose() * w;
        }
        info / self.p as f64
    }
}

/// `φ(x)² / {Φ(x)(1 - Φ(x))}`, zero once both tails underflow.
fn fisher_weight(x: f64) -> f64 {
    let (lo, hi) = {
        let (c, s) = (std_normal_cdf(x), std_normal_sf(x));
        (c.min(s), c.max(s))
    };
    if lo <= 0.0 {
        return 0.0;
    }
    let pdf = std_normal_pdf(x);
    pdf * (pdf / lo) / hi
}

fn included_components(tau_hat: &[f64], tau: f64) -> Vec<usize> {
    (0..tau_hat.len()).filter(|&j| tau_hat[j] > tau).collect()
}

fn check_row(model: &FactorModel, z: &[f64], y_row: Option<&[u8]>) -> Result<()> {
    if z.len() != model.d {
        return domain(format!("z has length {}, model has d = {}", z.len(), model.d));
    }
    if let Some(y) = y_row {
        if y.len() != model.p {
            return domain(format!("data row has {} entries, model has p = {}", y.len(), model.p));
        }
    }
    Ok(())
}

fn with_problem<R>(model: &FactorModel, tau: f64, y_row: &[u8], f: impl FnOnce(&RowProblem) -> R) -> R {
    let tau_hat = model.tau_hat();
    let included = included_components(&tau_hat, tau);
    let problem = RowProblem {
        b_hat: &model.b_hat,
        c_hat: &model.c_hat,
        tau_hat: &tau_hat,
        included: &included,
        y_row,
        p: model.p,
    };
    f(&problem)
}

pub fn restricted_loglik(z: &[f64], model: &FactorModel, tau: f64, y_row: &[u8]) -> Result<f64> {
    check_row(model, z, Some(y_row))?;
    let z = DVector::from_column_slice(z);
    Ok(with_problem(model, tau, y_row, |pr| pr.loglik(&z)))
}

pub fn loglik_gradient(z: &[f64], model: &FactorModel, tau: f64, y_row: &[u8]) -> Result<Vec<f64>> {
    check_row(model, z, Some(y_row))?;
    let z = DVector::from_column_slice(z);
    Ok(with_problem(model, tau, y_row, |pr| pr.gradient(&z)).as_slice().to_vec())
}

/// Fisher information of the restricted likelihood at `z` (independent of
/// the observed row).
pub fn fisher_information(z: &[f64], model: &FactorModel, tau: f64) -> Result<DMatrix<f64>> {
    check_row(model, z, None)?;
    let z = DVector::from_column_slice(z);
    let dummy = vec![0u8; model.p];
    Ok(with_problem(model, tau, &dummy, |pr| pr.fisher(&z)))
}

/// Result of maximising one row's likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct RowFit {
    pub z: Vec<f64>,
    pub record: ConvergenceRecord,
    /// Log-likelihood at the start and after every accepted step.
    pub loglik_path: Vec<f64>,
}

/// Fisher-scoring ascent for a single row from `start`.
pub fn score_row(y_row: &[u8], model: &FactorModel, tau: f64, cfg: &ScoreConfig, start: &[f64]) -> Result<RowFit> {
    cfg.validate()?;
    check_row(model, start, Some(y_row))?;
    Ok(with_problem(model, tau, y_row, |pr| ascend(pr, cfg, DVector::from_column_slice(start))))
}

fn project(z: DVector<f64>, radius: Option<f64>) -> DVector<f64> {
    match radius {
        Some(r) if z.norm() > r => {
            let scale = r / z.norm();
            z * scale
        }
        _ => z,
    }
}

fn ascent_direction(info: DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    let d = g.len();
    if let Some(chol) = info.clone().cholesky() {
        let step = chol.solve(g);
        if step.iter().all(|v| v.is_finite()) {
            return Some(step);
        }
    }
    let trace = info.trace();
    if !(trace > 0.0) {
        return None;
    }
    let ridge = 1e-8 * trace / d as f64;
    let regularised = info + DMatrix::<f64>::identity(d, d) * ridge;
    regularised.cholesky().map(|c| c.solve(g))
}

fn ascend(pr: &RowProblem, cfg: &ScoreConfig, start: DVector<f64>) -> RowFit {
    let mut z = project(start, cfg.z_box);
    let mut loglik = pr.loglik(&z);
    let mut path = vec![loglik];
    let mut grad = pr.gradient(&z);
    let mut iterations = 0;

    while grad.norm() > cfg.grad_tol && iterations < cfg.max_iter {
        let Some(direction) = ascent_direction(pr.fisher(&z), &grad) else {
            break;
        };
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let candidate = project(&z + &direction * step, cfg.z_box);
            let value = pr.loglik(&candidate);
            if value >= loglik {
                accepted = Some((candidate, value));
                break;
            }
            step *= 0.5;
        }
        let Some((next, value)) = accepted else {
            break;
        };
        iterations += 1;
        if next == z {
            break;
        }
        z = next;
        loglik = value;
        path.push(loglik);
        grad = pr.gradient(&z);
    }

    let grad_norm = grad.norm();
    RowFit {
        z: z.as_slice().to_vec(),
        record: ConvergenceRecord { iterations, grad_norm, converged: grad_norm <= cfg.grad_tol, loglik },
        loglik_path: path,
    }
}

/// Scores for every row of `y`. Rows are independent; the output does not
/// depend on the order in which they are processed.
pub fn estimate_scores(y: &BinaryMatrix, model: &FactorModel, cfg: &ScoreConfig) -> Result<LatentScores> {
    cfg.validate()?;
    if y.p() != model.p {
        return domain(format!("data has p = {}, model has p = {}", y.p(), model.p));
    }
    let tau_hat = model.tau_hat();
    let tau = select_tau_threshold(&tau_hat, cfg.m_percent);
    let included = included_components(&tau_hat, tau);
    let start = DVector::zeros(model.d);

    let fits = map_indexed(y.n(), |i| {
        let problem = RowProblem {
            b_hat: &model.b_hat,
            c_hat: &model.c_hat,
            tau_hat: &tau_hat,
            included: &included,
            y_row: y.row(i),
            p: model.p,
        };
        ascend(&problem, cfg, start.clone())
    });

    let z_hat = DMatrix::from_fn(y.n(), model.d, |i, k| fits[i].z[k]);
    let records = fits.into_iter().map(|f| f.record).collect();
    Ok(LatentScores { z_hat, records, tau })
}

/// `n × p` matrix whose row `i` is `B̂ Ẑ_i`.
pub fn reconstruct(model: &FactorModel, scores: &LatentScores) -> Result<DMatrix<f64>> {
    if scores.z_hat.ncols() != model.d {
        return domain(format!("scores have {} columns, model has d = {}", scores.z_hat.ncols(), model.d));
    }
    Ok(&scores.z_hat * model.b_hat.transpose())
}
