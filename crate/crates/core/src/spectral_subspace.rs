//! Eigendecomposition of the tetrachoric matrix and everything built on the
//! leading eigenvectors: loading estimate, noise variances, projection
//! matrices and the subspace discrepancy `tr(H_a - H_b)²`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::moment_estimation::{estimate_tetrachoric, BinaryMatrix, MarginalSummary, TetrachoricMatrix};

/// Relative asymmetry tolerated by [`sym_eigen`].
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Eigengap below which [`leading_subspace`] reports a warning.
pub const EIGENGAP_WARN: f64 = 1e-8;
/// Lower bound applied to estimated noise variances.
pub const TAU2_FLOOR: f64 = 1e-10;

const JACOBI_MAX_SWEEPS: usize = 100;
const ORTHONORMAL_TOL: f64 = 1e-10;

/// Eigenvalues in descending order with matching orthonormal eigenvector
/// columns.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenDecomposition {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

/// Cyclic Jacobi eigensolver for a symmetric matrix.
///
/// Rotations are applied in a fixed sweep order, so the output is a pure
/// function of the input. Ties in the eigenvalue sort keep the original
/// diagonal order.
pub fn sym_eigen(a: &DMatrix<f64>) -> Result<EigenDecomposition> {
    let p = a.nrows();
    if a.ncols() != p {
        return domain(format!("eigendecomposition needs a square matrix, got {}x{}", p, a.ncols()));
    }
    let scale = a.amax().max(1.0);
    for i in 0..p {
        for j in i + 1..p {
            if (a[(i, j)] - a[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return domain(format!("matrix is not symmetric at ({i}, {j})"));
            }
        }
    }

    let mut m = a.clone();
    // work on the symmetrised copy so both triangles agree exactly
    for i in 0..p {
        for j in i + 1..p {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    let mut v = DMatrix::<f64>::identity(p, p);

    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..p)
            .flat_map(|i| (i + 1..p).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        let diag: f64 = (0..p).map(|i| m[(i, i)] * m[(i, i)]).sum();
        if off == 0.0 || off <= 1e-30 * diag {
            break;
        }
        for k in 0..p {
            for l in k + 1..p {
                let akl = m[(k, l)];
                if akl == 0.0 {
                    continue;
                }
                let theta = (m[(l, l)] - m[(k, k)]) / (2.0 * akl);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut m, &mut v, k, l, c, s);
            }
        }
    }

    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = DMatrix::from_fn(p, p, |r, c| v[(r, order[c])]);
    Ok(EigenDecomposition { values, vectors })
}

/// Apply the Jacobi rotation in the `(k, l)` plane: `m ← Jᵀ m J`, `v ← v J`.
fn rotate(m: &mut DMatrix<f64>, v: &mut DMatrix<f64>, k: usize, l: usize, c: f64, s: f64) {
    let p = m.nrows();
    for i in 0..p {
        let mik = m[(i, k)];
        let mil = m[(i, l)];
        m[(i, k)] = c * mik - s * mil;
        m[(i, l)] = s * mik + c * mil;
    }
    for j in 0..p {
        let mkj = m[(k, j)];
        let mlj = m[(l, j)];
        m[(k, j)] = c * mkj - s * mlj;
        m[(l, j)] = s * mkj + c * mlj;
    }
    m[(k, l)] = 0.0;
    m[(l, k)] = 0.0;
    for i in 0..p {
        let vik = v[(i, k)];
        let vil = v[(i, l)];
        v[(i, k)] = c * vik - s * vil;
        v[(i, l)] = s * vik + c * vil;
    }
}

/// `p × d` matrix with orthonormal columns. `d = 0` is allowed and spans
/// the trivial subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceBasis(DMatrix<f64>);

impl SubspaceBasis {
    pub fn new(columns: DMatrix<f64>) -> Result<Self> {
        let gram = columns.transpose() * &columns;
        let d = columns.ncols();
        let dev = (gram - DMatrix::<f64>::identity(d, d)).amax();
        if d > 0 && dev > ORTHONORMAL_TOL {
            return domain(format!("basis columns are not orthonormal (deviation {dev:e})"));
        }
        Ok(Self(columns))
    }

    /// Orthonormal basis for the column span of `x` (thin QR).
    pub fn spanning(x: &DMatrix<f64>) -> Result<Self> {
        check_full_rank(x)?;
        let q = x.clone().qr().q();
        Ok(Self(q))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn ambient_dim(&self) -> usize {
        self.0.nrows()
    }
}

/// Flip each column so its largest-magnitude entry is positive (first
/// such entry on ties). Spans are unchanged.
pub fn sign_normalize(basis: &SubspaceBasis) -> SubspaceBasis {
    let mut m = basis.0.clone();
    for mut col in m.column_iter_mut() {
        let mut best = 0;
        for (i, x) in col.iter().enumerate() {
            if x.abs() > col[best].abs() {
                best = i;
            }
        }
        if !col.is_empty() && col[best] < 0.0 {
            col.neg_mut();
        }
    }
    SubspaceBasis(m)
}

/// Reported when `λ_d - λ_{d+1}` is too small for the leading subspace to
/// be well determined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigengapWarning {
    pub d: usize,
    pub gap: f64,
}

/// First `d` eigenvectors, sign-normalized.
pub fn leading_subspace(e: &EigenDecomposition, d: usize) -> Result<(SubspaceBasis, Option<EigengapWarning>)> {
    let p = e.values.len();
    if d < 1 || d > p {
        return domain(format!("factor dimension must lie in 1..={p}, got {d}"));
    }
    let basis = sign_normalize(&SubspaceBasis(e.vectors.columns(0, d).into_owned()));
    let warning = (d < p)
        .then(|| e.values[d - 1] - e.values[d])
        .filter(|&gap| gap < EIGENGAP_WARN)
        .map(|gap| EigengapWarning { d, gap });
    Ok((basis, warning))
}

/// `H = U Uᵀ` for an orthonormal basis `U`.
pub fn projection(basis: &SubspaceBasis) -> DMatrix<f64> {
    &basis.0 * basis.0.transpose()
}

/// `X (XᵀX)⁻¹ Xᵀ` for a full-column-rank `X`.
pub fn projection_of_span(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_full_rank(x)?;
    let gram = x.transpose() * x;
    let chol = match gram.cholesky() {
        Some(c) => c,
        None => return domain("matrix is rank deficient"),
    };
    Ok(x * chol.solve(&x.transpose()))
}

fn check_full_rank(x: &DMatrix<f64>) -> Result<()> {
    let d = x.ncols();
    if d == 0 {
        return Ok(());
    }
    if d > x.nrows() {
        return domain(format!("{} columns cannot be independent in dimension {}", d, x.nrows()));
    }
    let sv = x.singular_values();
    let max = sv.max();
    let min = sv.min();
    if !(max > 0.0) || min <= 1e-10 * max {
        return domain(format!("matrix is rank deficient (singular values {min:e} .. {max:e})"));
    }
    Ok(())
}

/// `tr(H_a - H_b)²`: squared Frobenius distance between the projections
/// onto the column spans of `a` and `b`.
pub fn subspace_discrepancy(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return domain(format!("ambient dimensions differ: {} vs {}", a.nrows(), b.nrows()));
    }
    let diff = projection_of_span(a)? - projection_of_span(b)?;
    Ok(diff.norm_squared().max(0.0))
}

/// Noise variances `diag{Q Σ̂ Q}` with `Q = I - H`, floored at `TAU2_FLOOR`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseVariances {
    pub tau2: Vec<f64>,
    pub floored: Vec<bool>,
}

pub fn noise_variances(sigma_hat: &DMatrix<f64>, basis: &SubspaceBasis) -> Result<NoiseVariances> {
    noise_variances_with_floor(sigma_hat, basis, TAU2_FLOOR)
}

pub fn noise_variances_with_floor(sigma_hat: &DMatrix<f64>, basis: &SubspaceBasis, floor: f64) -> Result<NoiseVariances> {
    if !(floor > 0.0) {
        return domain(format!("variance floor must be positive, got {floor}"));
    }
    let p = sigma_hat.nrows();
    if sigma_hat.ncols() != p || basis.ambient_dim() != p {
        return domain(format!(
            "dimension mismatch: sigma is {}x{}, basis lives in R^{}",
            p,
            sigma_hat.ncols(),
            basis.ambient_dim()
        ));
    }
    let q = DMatrix::<f64>::identity(p, p) - projection(basis);
    let qs = &q * sigma_hat;
    let mut tau2 = Vec::with_capacity(p);
    let mut floored = Vec::with_capacity(p);
    for j in 0..p {
        let raw = qs.row(j).dot(&q.column(j).transpose());
        floored.push(raw < floor);
        tau2.push(raw.max(floor));
    }
    Ok(NoiseVariances { tau2, floored })
}

/// Diagnostics collected while fitting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitInfo {
    pub n: usize,
    pub marginal_clamps: usize,
    pub pair_clamps: usize,
    pub tau2_floored: usize,
    pub eigengap_warning: Option<EigengapWarning>,
    pub seed: Option<u64>,
}

/// Fitted latent factor model.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    pub d: usize,
    pub p: usize,
    pub c_hat: Vec<f64>,
    /// `p × d` loadings `Σ̂_d Λ̂_d^{1/2}`.
    pub b_hat: DMatrix<f64>,
    pub tau2_hat: Vec<f64>,
    /// Leading `d` eigenvalues of `Σ̂`, before clamping at zero.
    pub eigvals: Vec<f64>,
    pub info: FitInfo,
}

impl FactorModel {
    pub fn tau_hat(&self) -> Vec<f64> {
        self.tau2_hat.iter().map(|t| t.sqrt()).collect()
    }

    /// Loading row `b̂_j`.
    pub fn loading(&self, j: usize) -> Vec<f64> {
        self.b_hat.row(j).iter().copied().collect()
    }
}

/// Full estimation pipeline on a binary data set.
pub fn fit_model(y: &BinaryMatrix, d: usize) -> Result<FactorModel> {
    fit_model_with_floor(y, d, TAU2_FLOOR)
}

pub fn fit_model_with_floor(y: &BinaryMatrix, d: usize, tau2_floor: f64) -> Result<FactorModel> {
    if d < 1 || d > y.p() {
        return domain(format!("factor dimension must lie in 1..={}, got {d}", y.p()));
    }
    let (marginals, tetra) = estimate_tetrachoric(y);
    let mut model = fit_from_tetrachoric_with_floor(&marginals, &tetra, d, tau2_floor)?;
    model.info.n = y.n();
    Ok(model)
}

/// The spectral half of the pipeline, starting from a tetrachoric matrix.
pub fn fit_from_tetrachoric(marginals: &MarginalSummary, tetra: &TetrachoricMatrix, d: usize) -> Result<FactorModel> {
    fit_from_tetrachoric_with_floor(marginals, tetra, d, TAU2_FLOOR)
}

pub fn fit_from_tetrachoric_with_floor(
    marginals: &MarginalSummary,
    tetra: &TetrachoricMatrix,
    d: usize,
    tau2_floor: f64,
) -> Result<FactorModel> {
    let p = tetra.p();
    let eig = sym_eigen(&tetra.sigma)?;
    let (basis, eigengap_warning) = leading_subspace(&eig, d)?;
    let eigvals: Vec<f64> = eig.values[..d].to_vec();
    let mut b_hat = basis.matrix().clone();
    for (k, mut col) in b_hat.column_iter_mut().enumerate() {
        col *= eigvals[k].max(0.0).sqrt();
    }
    let noise = noise_variances_with_floor(&tetra.sigma, &basis, tau2_floor)?;
    Ok(FactorModel {
        d,
        p,
        c_hat: marginals.c_hat.clone(),
        b_hat,
        tau2_hat: noise.tau2,
        eigvals,
        info: FitInfo {
            n: 0,
            marginal_clamps: marginals.clamp_count,
            pair_clamps: tetra.clamp_flags.len(),
            tau2_floored: noise.floored.iter().filter(|&&f| f).count(),
            eigengap_warning,
            seed: None,
        },
    })
}
