//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::process::Command;
use std::time::Instant;

use binfactor::factor_scores::{
    loglik_gradient, restricted_loglik, score_row, select_tau_threshold, ScoreConfig,
};
use binfactor::gaussian_kernel::{bvn_upper_tail, tetrachoric_invert, TailQuery};
use binfactor::moment_estimation::{tetrachoric_from_frequencies, thresholds_exact};
use binfactor::simulation_lab::{
    generate_dataset, generate_true_model, median_metric, population_discrepancy, run_replications, MetricsRecord,
    SimScenario, TrueModel,
};
use binfactor::spectral_subspace::{FactorModel, FitInfo};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SEED: u64 = 2024;
const REPS: usize = 50;

struct Outcome {
    id: u8,
    title: &'static str,
    passed: bool,
    detail: String,
    seconds: f64,
}

fn tail(c1: f64, c2: f64, rho: f64) -> f64 {
    bvn_upper_tail(&TailQuery::new(c1, c2, rho).unwrap()).unwrap()
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.5}")).collect::<Vec<_>>().join(" > ")
}

fn kernel_exactness() -> (bool, String) {
    let mut rhos = vec![-0.99];
    rhos.extend((-9..=9).map(|k| k as f64 / 10.0));
    rhos.push(0.99);
    let worst = rhos
        .iter()
        .map(|&r| (tail(0.0, 0.0, r) - (0.25 + r.asin() / (2.0 * PI))).abs())
        .fold(0.0, f64::max);
    (worst <= 1e-9, format!("max |error| = {worst:.2e} over {} correlations (tol 1e-9)", rhos.len()))
}

fn inversion_round_trip() -> (bool, String) {
    let cs = [-1.5, -0.5, 0.0, 0.5, 1.5];
    let rhos: Vec<f64> = (0..20).map(|k| -0.95 + 0.1 * k as f64).collect();
    let mut worst: f64 = 0.0;
    let mut worst_at = (0.0, 0.0, 0.0);
    let mut misses = 0;
    for &c1 in &cs {
        for &c2 in &cs {
            for &rho in &rhos {
                let inv = tetrachoric_invert(c1, c2, tail(c1, c2, rho)).unwrap();
                let err = (inv.rho_hat - rho).abs();
                if err > 1e-8 {
                    misses += 1;
                }
                if err > worst {
                    worst = err;
                    worst_at = (c1, c2, rho);
                }
            }
        }
    }
    (
        misses == 0,
        format!(
            "{misses} of {} grid points exceed 1e-8; max error {worst:.2e} at (c1, c2, rho) = ({}, {}, {:.2})",
            cs.len() * cs.len() * rhos.len(),
            worst_at.0,
            worst_at.1,
            worst_at.2
        ),
    )
}

fn noise_free_identifiability() -> (bool, String) {
    let tm = generate_true_model(&SimScenario::new(2, 50, 1, 1, SEED).unwrap(), 0);
    let p = tm.p();
    let sigma = tm.population_sigma();
    let marginals = thresholds_exact(&tm.marginal_probabilities()).unwrap();
    let joint = DMatrix::from_fn(p, p, |a, b| {
        if a == b {
            marginals.p_used[a]
        } else {
            tail(tm.c[a], tm.c[b], sigma[(a, b)])
        }
    });
    let est = tetrachoric_from_frequencies(&marginals, &joint);
    let worst = (&est.sigma - &sigma).amax();
    (worst <= 1e-7, format!("max |Σ̂ - Σ| = {worst:.2e} (tol 1e-7), {} clamped pairs", est.clamp_flags.len()))
}

fn population_trend() -> (bool, String) {
    let ps = [20, 50, 100];
    let seeds = 0..10u64;
    let mut per_p: Vec<Vec<f64>> = vec![Vec::new(); ps.len()];
    let mut monotone_seeds = 0;
    for seed in seeds.clone() {
        let values: Vec<f64> = ps
            .iter()
            .map(|&p| population_discrepancy(&generate_true_model(&SimScenario::new(2, p, 1, 1, seed).unwrap(), 0)).unwrap())
            .collect();
        if strictly_decreasing(&values) {
            monotone_seeds += 1;
        }
        for (k, v) in values.into_iter().enumerate() {
            per_p[k].push(v);
        }
    }
    let medians: Vec<f64> = per_p
        .iter_mut()
        .map(|v| {
            v.sort_by(f64::total_cmp);
            0.5 * (v[4] + v[5])
        })
        .collect();
    (
        strictly_decreasing(&medians),
        format!(
            "median D over seeds 0..10 at p = 20, 50, 100: {}; decreasing for {monotone_seeds}/10 seeds individually",
            fmt(&medians)
        ),
    )
}

type Lab = BTreeMap<(usize, usize, usize), Vec<MetricsRecord>>;

fn run_lab() -> (Lab, f64) {
    let t = Instant::now();
    let cfg = ScoreConfig::default();
    let mut lab = Lab::new();
    let grid = [(2, 20, 1000), (2, 20, 2000), (2, 20, 4000), (2, 50, 4000), (1, 20, 4000), (1, 50, 4000)];
    for (d, p, n) in grid {
        let scn = SimScenario::new(d, p, n, REPS, SEED).unwrap();
        let records = run_replications(&scn, &cfg).unwrap();
        assert!(records.iter().all(MetricsRecord::is_ok), "replication failure in {}", scn.id());
        lab.insert((d, p, n), records);
    }
    (lab, t.elapsed().as_secs_f64())
}

fn medians_over_n(lab: &Lab, metric: fn(&MetricsRecord) -> f64) -> Vec<f64> {
    [1000, 2000, 4000].iter().map(|&n| median_metric(&lab[&(2, 20, n)], metric)).collect()
}

fn max_err_trend(lab: &Lab) -> (bool, String) {
    let m = medians_over_n(lab, |r| r.max_err);
    let ratio = m[2] / m[0];
    (
        strictly_decreasing(&m) && ratio <= 0.6,
        format!("median MaxErr at n = 1000, 2000, 4000: {}; ratio 4000/1000 = {ratio:.3} (≤ 0.6)", fmt(&m)),
    )
}

fn subspace_trend(lab: &Lab) -> (bool, String) {
    let m = medians_over_n(lab, |r| r.subspace_d);
    let p20 = median_metric(&lab[&(2, 20, 4000)], |r| r.subspace_d);
    let p50 = median_metric(&lab[&(2, 50, 4000)], |r| r.subspace_d);
    (
        strictly_decreasing(&m) && p50 < p20,
        format!("median D at n = 1000, 2000, 4000: {}; at n = 4000, p = 20 vs 50: {p20:.5} > {p50:.5}", fmt(&m)),
    )
}

fn med_err_trend(lab: &Lab) -> (bool, String) {
    let mut ok = true;
    let mut parts = Vec::new();
    for d in [1, 2] {
        let small = &lab[&(d, 20, 4000)];
        let large = &lab[&(d, 50, 4000)];
        let wins = small.iter().zip(large).filter(|(a, b)| b.med_err < a.med_err).count();
        let share = wins as f64 / small.len() as f64;
        ok &= share >= 0.8;
        parts.push(format!("d = {d}: p = 50 below p = 20 in {wins}/{} paired replications", small.len()));
    }
    (ok, format!("{} (need ≥ 80%)", parts.join("; ")))
}

fn noise_variance_trend(lab: &Lab) -> (bool, String) {
    let m: Vec<f64> = [1000, 2000, 4000].iter().map(|&n| median_metric(&lab[&(2, 20, n)], |r| r.tau_err)).collect();
    let strs: Vec<String> = m.iter().map(|v| format!("{v:.6}")).collect();
    (strictly_decreasing(&m), format!("median mean |τ̂² - τ²| at n = 1000, 2000, 4000: {}", strs.join(", ")))
}

fn as_fitted(tm: &TrueModel) -> FactorModel {
    FactorModel {
        d: tm.d(),
        p: tm.p(),
        c_hat: tm.c.clone(),
        b_hat: tm.b.clone(),
        tau2_hat: tm.tau2.clone(),
        eigvals: vec![1.0; tm.d()],
        info: FitInfo::default(),
    }
}

/// The likelihood has a finite maximiser iff the signed loadings `s_j b_j`
/// of the included components do not fit in a closed half-plane.
fn has_finite_maximiser(m: &FactorModel, tau: f64, y: &[u8]) -> bool {
    let taus = m.tau_hat();
    let mut angles: Vec<f64> = (0..m.p)
        .filter(|&j| taus[j] > tau)
        .map(|j| {
            let s = if y[j] == 1 { 1.0 } else { -1.0 };
            (s * m.b_hat[(j, 1)]).atan2(s * m.b_hat[(j, 0)])
        })
        .collect();
    angles.sort_by(f64::total_cmp);
    let mut gap: f64 = angles[0] + 2.0 * PI - angles[angles.len() - 1];
    for w in angles.windows(2) {
        gap = gap.max(w[1] - w[0]);
    }
    gap < PI - 1e-6
}

fn optimizer_correctness() -> (bool, String) {
    let cfg = ScoreConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (mut used, mut skipped, mut seed) = (0, 0, 0u64);
    let (mut worst_grad, mut worst_restart, mut worst_norm) = (0.0f64, 0.0f64, 0.0f64);
    let mut failures = Vec::new();

    while used < 100 {
        seed += 1;
        let tm = generate_true_model(&SimScenario::new(2, 10, 1, 1, seed).unwrap(), 0);
        let y = generate_dataset(&tm, 1, seed, 0, false).y;
        let y = y.row(0);
        let m = as_fitted(&tm);
        let tau = select_tau_threshold(&m.tau_hat(), cfg.m_percent);
        if !has_finite_maximiser(&m, tau, y) {
            skipped += 1;
            continue;
        }
        used += 1;

        let z0 = [rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)];
        let g = loglik_gradient(&z0, &m, tau, y).unwrap();
        let h = 1e-6;
        let mut diff = 0.0;
        for k in 0..2 {
            let mut zp = z0;
            let mut zm = z0;
            zp[k] += h;
            zm[k] -= h;
            let fd = (restricted_loglik(&zp, &m, tau, y).unwrap() - restricted_loglik(&zm, &m, tau, y).unwrap()) / (2.0 * h);
            diff += (fd - g[k]).powi(2);
        }
        let rel = diff.sqrt() / (g[0].hypot(g[1])).max(1e-12);
        worst_grad = worst_grad.max(rel);

        let fit = score_row(y, &m, tau, &cfg, &[0.0, 0.0]).unwrap();
        let monotone = fit.loglik_path.windows(2).all(|w| w[1] >= w[0]);
        worst_norm = worst_norm.max(fit.record.grad_norm);

        let radius = 3.0 * rng.random::<f64>().sqrt();
        let angle = 2.0 * PI * rng.random::<f64>();
        let restart = score_row(y, &m, tau, &cfg, &[radius * angle.cos(), radius * angle.sin()]).unwrap();
        let gap = (fit.z[0] - restart.z[0]).abs().max((fit.z[1] - restart.z[1]).abs());
        worst_restart = worst_restart.max(gap);

        if rel > 1e-5 || !monotone || !fit.record.converged || fit.record.grad_norm > 1e-8 || gap > 1e-6 {
            failures.push(seed);
        }
    }
    (
        failures.is_empty(),
        format!(
            "100 instances ({skipped} without a finite maximiser skipped): max gradient rel. error {worst_grad:.1e}, \
             max final |grad| {worst_norm:.1e}, max restart gap {worst_restart:.1e}, failing seeds {failures:?}"
        ),
    )
}

fn cli_determinism() -> (bool, String) {
    let dir = tempfile::tempdir().unwrap();
    let exe = env!("CARGO_BIN_EXE_binfactor");
    let mut outputs = Vec::new();
    for threads in [None, Some("1"), Some("3"), None] {
        let out = dir.path().join(format!("m{}.csv", outputs.len()));
        let mut cmd = Command::new(exe);
        if let Some(t) = threads {
            cmd.args(["--threads", t]);
        }
        cmd.args(["simulate", "--p", "20,50", "--n", "1000", "--d", "2", "--reps", "4", "--seed", "11", "--out"]);
        cmd.arg(&out);
        let status = cmd.output().unwrap().status;
        assert!(status.success(), "simulate exited with {status}");
        outputs.push(std::fs::read(&out).unwrap());
    }
    let identical = outputs.windows(2).all(|w| w[0] == w[1]);
    (identical, format!("4 runs (default, 1, 3, default threads), {} bytes each, identical = {identical}", outputs[0].len()))
}

fn timed(id: u8, title: &'static str, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let t = Instant::now();
    let (passed, detail) = f();
    Outcome { id, title, passed, detail, seconds: t.elapsed().as_secs_f64() }
}

fn main() {
    let mut results = vec![
        timed(1, "kernel exactness", kernel_exactness),
        timed(2, "inversion round trip", inversion_round_trip),
        timed(3, "noise-free identifiability", noise_free_identifiability),
        timed(4, "population subspace trend in p", population_trend),
    ];

    eprintln!("running Monte Carlo scenarios ({REPS} replications each)...");
    let (lab, lab_seconds) = run_lab();
    results.push(timed(5, "MaxErr trend in n", || max_err_trend(&lab)));
    results.push(timed(6, "subspace discrepancy trend", || subspace_trend(&lab)));
    results.push(timed(7, "reconstruction error trend in p", || med_err_trend(&lab)));
    results.push(timed(8, "noise variance error trend in n", || noise_variance_trend(&lab)));
    results.push(timed(9, "optimizer correctness", optimizer_correctness));
    results.push(timed(10, "CLI determinism", cli_determinism));

    println!();
    for r in &results {
        println!(
            "[{}] {:>2}. {:<34} {} ({:.2}s)",
            if r.passed { "PASS" } else { "FAIL" },
            r.id,
            r.title,
            r.detail,
            r.seconds
        );
    }
    println!("Monte Carlo scenarios shared by criteria 5-8 took {lab_seconds:.1}s");
    let failed: Vec<u8> = results.iter().filter(|r| !r.passed).map(|r| r.id).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
