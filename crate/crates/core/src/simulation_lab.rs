//! Monte Carlo laboratory: true-model generation, binary data under the
//! probit factor model, evaluation metrics and replication runs.
//!
//! Randomness is drawn from ChaCha8 substreams keyed by `(seed, purpose,
//! replication, feature)`. Because every feature owns its stream and draws
//! are sequential in `n`, a scenario with smaller `p` or `n` sees a prefix of
//! the draws of a larger one, which gives common random numbers across a grid.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::factor_scores::{estimate_scores, LatentScores, ScoreConfig};
use crate::moment_estimation::{estimate_tetrachoric, BinaryMatrix};
use crate::parallel::map_indexed;
use crate::spectral_subspace::{fit_from_tetrachoric, leading_subspace, subspace_discrepancy, sym_eigen, FactorModel};

const TAG_MODEL: u64 = 1;
const TAG_FACTORS: u64 = 2;
const TAG_NOISE: u64 = 3;

fn substream(seed: u64, tag: u64, rep: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 56) | ((rep & 0xFFFF_FFFF) << 24) | (index & 0xFF_FFFF));
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub d: usize,
    pub p: usize,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    /// Rescale each `b_j` so that `‖b_j‖² + τ_j² = 1`.
    pub normalize_rows: bool,
    /// Draw a new true model for every replication instead of once.
    pub redraw_model: bool,
}

impl SimScenario {
    pub fn new(d: usize, p: usize, n: usize, reps: usize, seed: u64) -> Result<Self> {
        let scn = Self { d, p, n, reps, seed, normalize_rows: true, redraw_model: false };
        scn.validate()?;
        Ok(scn)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 1 {
            return domain("d must be at least 1");
        }
        if self.p < self.d {
            return domain(format!("p = {} must be at least d = {}", self.p, self.d));
        }
        if self.p > 1 << 24 {
            return domain(format!("p = {} exceeds the supported maximum", self.p));
        }
        if self.n < 1 {
            return domain("n must be at least 1");
        }
        if self.reps < 1 {
            return domain("reps must be at least 1");
        }
        Ok(())
    }

    pub fn id(&self) -> String {
        format!("d{}_p{}_n{}", self.d, self.p, self.n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrueModel {
    /// `p × d` loadings.
    pub b: DMatrix<f64>,
    pub tau2: Vec<f64>,
    pub c: Vec<f64>,
}

impl TrueModel {
    pub fn p(&self) -> usize {
        self.b.nrows()
    }

    pub fn d(&self) -> usize {
        self.b.ncols()
    }

    /// `BᵀB`, diagonal under the usual identification constraints.
    pub fn sigma_b(&self) -> DMatrix<f64> {
        self.b.transpose() * &self.b
    }

    /// Latent correlation `BBᵀ + diag(τ²)`.
    pub fn population_sigma(&self) -> DMatrix<f64> {
        let mut s = &self.b * self.b.transpose();
        for j in 0..self.p() {
            s[(j, j)] += self.tau2[j];
        }
        s
    }

    pub fn marginal_probabilities(&self) -> Vec<f64> {
        self.c.iter().map(|&c| crate::gaussian_kernel::std_normal_sf(c)).collect()
    }
}

/// `β_jk ~ U(-1, 1)`, `τ_j² ~ U(0.2, 0.8)`, `c_j ~ U(-1, 1)`, one stream per
/// feature. `rep` selects the model stream when models are redrawn.
pub fn generate_true_model(scn: &SimScenario, rep: usize) -> TrueModel {
    let model_rep = if scn.redraw_model { rep as u64 + 1 } else { 0 };
    let (p, d) = (scn.p, scn.d);
    let mut b = DMatrix::zeros(p, d);
    let mut tau2 = vec![0.0_f64; p];
    let mut c = vec![0.0; p];
    for j in 0..p {
        let mut rng = substream(scn.seed, TAG_MODEL, model_rep, j as u64);
        for k in 0..d {
            b[(j, k)] = rng.random_range(-1.0..1.0);
        }
        tau2[j] = rng.random_range(0.2..0.8);
        c[j] = rng.random_range(-1.0..1.0);
        if scn.normalize_rows {
            let norm = b.row(j).norm();
            if norm > 0.0 {
                let scale = (1.0_f64 - tau2[j]).sqrt() / norm;
                b.row_mut(j).scale_mut(scale);
            }
        }
    }
    TrueModel { b, tau2, c }
}

#[derive(Debug, Clone)]
pub struct SimDataset {
    pub y: BinaryMatrix,
    /// `n × d` true factors.
    pub z_true: DMatrix<f64>,
    /// `n × p` latent continuous variables, when requested.
    pub e: Option<DMatrix<f64>>,
}

/// `Z_i ~ N(0, I_d)`, `e_i = B Z_i + ε_i`, `Y_ij = 1(e_ij > c_j)`.
pub fn generate_dataset(tm: &TrueModel, n: usize, seed: u64, rep: usize, keep_latent: bool) -> SimDataset {
    let (p, d) = (tm.p(), tm.d());
    let mut rng = substream(seed, TAG_FACTORS, rep as u64, 0);
    let z_true = DMatrix::from_row_iterator(n, d, (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let signal = &z_true * tm.b.transpose();

    let columns = map_indexed(p, |j| {
        let mut rng = substream(seed, TAG_NOISE, rep as u64, j as u64);
        let tau = tm.tau2[j].sqrt();
        (0..n).map(|i| signal[(i, j)] + tau * rng.sample::<f64, _>(StandardNormal)).collect::<Vec<f64>>()
    });

    let mut data = vec![0u8; n * p];
    for (j, col) in columns.iter().enumerate() {
        for (i, &e) in col.iter().enumerate() {
            data[i * p + j] = u8::from(e > tm.c[j]);
        }
    }
    let y = BinaryMatrix::new(n, p, data).expect("generated data is binary and rectangular");
    let e = keep_latent.then(|| DMatrix::from_fn(n, p, |i, j| columns[j][i]));
    SimDataset { y, z_true, e }
}

/// `max_{j1 ≠ j2} |σ̂_{j1j2} - b_{j1}ᵀ b_{j2}|`.
pub fn metric_max_err(sigma_hat: &DMatrix<f64>, tm: &TrueModel) -> Result<f64> {
    let p = tm.p();
    if sigma_hat.shape() != (p, p) {
        return domain(format!("Σ̂ is {:?}, true model has p = {p}", sigma_hat.shape()));
    }
    let mut worst: f64 = 0.0;
    for j1 in 0..p {
        for j2 in j1 + 1..p {
            let truth = tm.b.row(j1).dot(&tm.b.row(j2));
            worst = worst.max((sigma_hat[(j1, j2)] - truth).abs());
        }
    }
    Ok(worst)
}

pub fn metric_subspace(b_true: &DMatrix<f64>, b_hat: &DMatrix<f64>) -> Result<f64> {
    subspace_discrepancy(b_true, b_hat)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let m = values.len();
    if m == 0 {
        return f64::NAN;
    }
    if m % 2 == 1 {
        values[m / 2]
    } else {
        0.5 * (values[m / 2 - 1] + values[m / 2])
    }
}

/// Median over rows of `p^{-1/2} ‖B̂ Ẑ_i - B Z_i‖`.
pub fn metric_med_err(model: &FactorModel, scores: &LatentScores, tm: &TrueModel, z_true: &DMatrix<f64>) -> Result<f64> {
    let n = z_true.nrows();
    if scores.z_hat.nrows() != n || model.p != tm.p() || z_true.ncols() != tm.d() || scores.z_hat.ncols() != model.d {
        return domain("dimension mismatch between model, scores and ground truth");
    }
    let diff = &scores.z_hat * model.b_hat.transpose() - z_true * tm.b.transpose();
    let scale = (tm.p() as f64).sqrt();
    let mut errs: Vec<f64> = diff.row_iter().map(|r| r.norm() / scale).collect();
    Ok(median(&mut errs))
}

/// `p⁻¹ Σ_j |τ̂_j² - τ_j²|`.
pub fn metric_tau_err(model: &FactorModel, tm: &TrueModel) -> Result<f64> {
    if model.p != tm.p() {
        return domain(format!("model has p = {}, true model has p = {}", model.p, tm.p()));
    }
    let sum: f64 = model.tau2_hat.iter().zip(&tm.tau2).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum / tm.p() as f64)
}

/// `𝒟(B, Σ_d)` where `Σ_d` spans the leading eigenvectors of the exact
/// latent correlation matrix.
pub fn population_discrepancy(tm: &TrueModel) -> Result<f64> {
    let eig = sym_eigen(&tm.population_sigma())?;
    let (basis, _) = leading_subspace(&eig, tm.d())?;
    subspace_discrepancy(&tm.b, basis.matrix())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub generate: f64,
    pub fit: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub scenario: String,
    pub rep: usize,
    pub max_err: f64,
    pub subspace_d: f64,
    pub med_err: f64,
    pub tau_err: f64,
    pub times: StageTimes,
    /// Set when a stage failed; the metrics are then NaN.
    pub error: Option<String>,
}

impl MetricsRecord {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

fn seconds_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// One replication: generate, fit, score, evaluate.
pub fn run_replication(scn: &SimScenario, tm: &TrueModel, rep: usize, cfg: &ScoreConfig) -> MetricsRecord {
    let mut times = StageTimes::default();
    let outcome = (|| -> Result<(f64, f64, f64, f64)> {
        let t = Instant::now();
        let data = generate_dataset(tm, scn.n, scn.seed, rep, false);
        times.generate = seconds_since(t);

        let t = Instant::now();
        let (marginals, tetra) = estimate_tetrachoric(&data.y);
        let max_err = metric_max_err(&tetra.sigma, tm)?;
        let mut model = fit_from_tetrachoric(&marginals, &tetra, scn.d)?;
        model.info.n = scn.n;
        model.info.seed = Some(scn.seed);
        times.fit = seconds_since(t);
        let subspace_d = metric_subspace(&tm.b, &model.b_hat)?;
        let tau_err = metric_tau_err(&model, tm)?;

        let t = Instant::now();
        let scores = estimate_scores(&data.y, &model, cfg)?;
        times.score = seconds_since(t);
        let med_err = metric_med_err(&model, &scores, tm, &data.z_true)?;
        Ok((max_err, subspace_d, med_err, tau_err))
    })();

    let (max_err, subspace_d, med_err, tau_err, error) = match outcome {
        Ok((a, b, c, e)) => (a, b, c, e, None),
        Err(err) => (f64::NAN, f64::NAN, f64::NAN, f64::NAN, Some(err.to_string())),
    };
    MetricsRecord { scenario: scn.id(), rep, max_err, subspace_d, med_err, tau_err, times, error }
}

/// All replications of a scenario, ordered by replication index. A failing
/// replication yields a record with `error` set; the others still run.
pub fn run_replications(scn: &SimScenario, cfg: &ScoreConfig) -> Result<Vec<MetricsRecord>> {
    scn.validate()?;
    cfg.validate()?;
    let shared = (!scn.redraw_model).then(|| generate_true_model(scn, 0));
    Ok(map_indexed(scn.reps, |rep| match &shared {
        Some(tm) => run_replication(scn, tm, rep, cfg),
        None => run_replication(scn, &generate_true_model(scn, rep), rep, cfg),
    }))
}

/// Median of a metric over the successful records.
pub fn median_metric(records: &[MetricsRecord], metric: impl Fn(&MetricsRecord) -> f64) -> f64 {
    let mut values: Vec<f64> = records.iter().filter(|r| r.is_ok()).map(metric).collect();
    median(&mut values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scenario(d: usize, p: usize, n: usize) -> SimScenario {
        SimScenario::new(d, p, n, 2, 11).unwrap()
    }

    #[test]
    fn scenario_validation() {
        assert!(SimScenario::new(0, 5, 10, 1, 0).is_err());
        assert!(SimScenario::new(3, 2, 10, 1, 0).is_err());
        assert!(SimScenario::new(1, 2, 0, 1, 0).is_err());
        assert!(SimScenario::new(1, 2, 10, 0, 0).is_err());
        assert_eq!(scenario(2, 20, 1000).id(), "d2_p20_n1000");
    }

    #[test]
    fn model_ranges_and_normalisation() {
        let tm = generate_true_model(&scenario(2, 40, 10), 0);
        for j in 0..40 {
            assert!((0.2..=0.8).contains(&tm.tau2[j]));
            assert!((-1.0..=1.0).contains(&tm.c[j]));
            assert_abs_diff_eq!(tm.b.row(j).norm_squared() + tm.tau2[j], 1.0, epsilon = 1e-12);
        }
        let sigma = tm.population_sigma();
        for j in 0..40 {
            assert_abs_diff_eq!(sigma[(j, j)], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn literal_recipe_keeps_raw_loadings() {
        let mut scn = scenario(2, 30, 10);
        scn.normalize_rows = false;
        let tm = generate_true_model(&scn, 0);
        assert!(tm.b.iter().all(|v| (-1.0..1.0).contains(v)));
        assert!((0..30).any(|j| (tm.b.row(j).norm_squared() + tm.tau2[j] - 1.0).abs() > 1e-3));
    }

    #[test]
    fn model_is_deterministic_and_nested_in_p() {
        let small = generate_true_model(&scenario(2, 20, 10), 0);
        let large = generate_true_model(&scenario(2, 50, 10), 0);
        assert_eq!(small, generate_true_model(&scenario(2, 20, 10), 0));
        assert_eq!(small.b, large.b.rows(0, 20).into_owned());
        assert_eq!(small.c, large.c[..20]);
    }

    #[test]
    fn redrawn_models_differ_per_rep() {
        let mut scn = scenario(1, 5, 10);
        scn.redraw_model = true;
        assert_ne!(generate_true_model(&scn, 0), generate_true_model(&scn, 1));
    }

    #[test]
    fn datasets_nest_in_n_and_p() {
        let tm_small = generate_true_model(&scenario(2, 10, 10), 0);
        let tm_large = generate_true_model(&scenario(2, 25, 10), 0);
        let a = generate_dataset(&tm_small, 100, 11, 3, false);
        let b = generate_dataset(&tm_large, 250, 11, 3, false);
        for i in 0..100 {
            assert_eq!(a.y.row(i), &b.y.row(i)[..10]);
        }
        assert_eq!(a.z_true, b.z_true.rows(0, 100).into_owned());
    }

    #[test]
    fn latent_values_threshold_to_data() {
        let tm = generate_true_model(&scenario(2, 6, 10), 0);
        let ds = generate_dataset(&tm, 50, 5, 0, true);
        let e = ds.e.unwrap();
        for i in 0..50 {
            for j in 0..6 {
                assert_eq!(ds.y.get(i, j), u8::from(e[(i, j)] > tm.c[j]));
            }
        }
    }

    #[test]
    fn max_err_cases() {
        let tm = generate_true_model(&scenario(2, 6, 10), 0);
        let mut sigma = &tm.b * tm.b.transpose();
        for j in 0..6 {
            sigma[(j, j)] = 1.0;
        }
        assert_eq!(metric_max_err(&sigma, &tm).unwrap(), 0.0);
        sigma[(1, 4)] += 0.1;
        sigma[(4, 1)] += 0.1;
        assert_abs_diff_eq!(metric_max_err(&sigma, &tm).unwrap(), 0.1, epsilon = 1e-15);
        assert!(metric_max_err(&DMatrix::zeros(3, 3), &tm).is_err());
    }

    #[test]
    fn subspace_metric_extremes() {
        let b = DMatrix::from_row_slice(4, 1, &[1.0, 2.0, 0.0, 0.0]);
        let same = DMatrix::from_row_slice(4, 1, &[-0.5, -1.0, 0.0, 0.0]);
        let orth = DMatrix::from_row_slice(4, 1, &[0.0, 0.0, 3.0, 1.0]);
        assert_abs_diff_eq!(metric_subspace(&b, &same).unwrap(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(metric_subspace(&b, &orth).unwrap(), 2.0, epsilon = 1e-14);
    }

    #[test]
    fn med_err_cases() {
        let tm = generate_true_model(&scenario(2, 5, 10), 0);
        let model = FactorModel {
            d: 2,
            p: 5,
            c_hat: tm.c.clone(),
            b_hat: tm.b.clone(),
            tau2_hat: tm.tau2.clone(),
            eigvals: vec![1.0, 1.0],
            info: Default::default(),
        };
        let z = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, -1.0, 0.5, 2.0, 0.0]);
        let exact = LatentScores { z_hat: z.clone(), records: vec![], tau: 0.0 };
        assert_eq!(metric_med_err(&model, &exact, &tm, &z).unwrap(), 0.0);

        let one = z.rows(1, 1).into_owned();
        let zero = LatentScores { z_hat: DMatrix::zeros(1, 2), records: vec![], tau: 0.0 };
        let want = (&one * tm.b.transpose()).norm() / 5f64.sqrt();
        assert_abs_diff_eq!(metric_med_err(&model, &zero, &tm, &one).unwrap(), want, epsilon = 1e-15);
    }

    #[test]
    fn tau_err_and_median() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&mut []).is_nan());
    }

    #[test]
    fn replications_are_deterministic() {
        let scn = SimScenario::new(2, 8, 300, 2, 7).unwrap();
        let cfg = ScoreConfig::default();
        let strip = |mut v: Vec<MetricsRecord>| {
            v.iter_mut().for_each(|r| r.times = StageTimes::default());
            v
        };
        let a = strip(run_replications(&scn, &cfg).unwrap());
        let b = strip(run_replications(&scn, &cfg).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|r| r.is_ok() && r.max_err >= 0.0 && r.subspace_d >= 0.0 && r.med_err >= 0.0));
        assert_ne!(a[0].max_err, a[1].max_err);
    }

    #[test]
    fn population_discrepancy_is_small_and_nonnegative() {
        let tm = generate_true_model(&scenario(2, 50, 10), 0);
        let dist = population_discrepancy(&tm).unwrap();
        assert!((0.0..0.5).contains(&dist), "{dist}");
    }
}
