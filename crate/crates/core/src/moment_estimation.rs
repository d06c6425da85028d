//! Moment estimators: marginal frequencies, probit thresholds, pairwise
//! joint frequencies and the tetrachoric correlation matrix.

use nalgebra::DMatrix;

use crate::error::{domain, Result};
use crate::gaussian_kernel::{std_normal_quantile, tetrachoric_invert, RHO_CLAMP};
use crate::parallel::map_indexed;

/// Margin by which a joint frequency must sit inside its attainable range
/// before it is inverted rather than clamped.
pub const JOINT_BRACKET_MARGIN: f64 = 1e-12;

/// `n × p` matrix of 0/1 observations, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMatrix {
    n: usize,
    p: usize,
    data: Vec<u8>,
    names: Option<Vec<String>>,
}

impl BinaryMatrix {
    pub fn new(n: usize, p: usize, data: Vec<u8>) -> Result<Self> {
        if n < 1 {
            return domain("binary matrix needs at least one row");
        }
        if p < 2 {
            return domain(format!("binary matrix needs at least two columns, got {p}"));
        }
        if data.len() != n * p {
            return domain(format!("expected {} entries for {n}x{p}, got {}", n * p, data.len()));
        }
        if let Some(pos) = data.iter().position(|&v| v > 1) {
            return domain(format!(
                "entry ({}, {}) is {}, expected 0 or 1",
                pos / p + 1,
                pos % p + 1,
                data[pos]
            ));
        }
        Ok(Self { n, p, data, names: None })
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let p = rows.first().map_or(0, Vec::len);
        if let Some(i) = rows.iter().position(|r| r.len() != p) {
            return domain(format!("row {} has {} entries, expected {p}", i + 1, rows[i].len()));
        }
        Self::new(rows.len(), p, rows.concat())
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.p {
            return domain(format!("{} column names for {} columns", names.len(), self.p));
        }
        self.names = Some(names);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn names(&self) -> Option<&[String]> {
        self.names.as_deref()
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.p + j]
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.data[i * self.p..(i + 1) * self.p]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u8]> {
        self.data.chunks_exact(self.p)
    }

    /// Each column packed into 64-bit words, for fast co-occurrence counts.
    fn column_bits(&self) -> Vec<Vec<u64>> {
        let words = self.n.div_ceil(64);
        let mut bits = vec![vec![0u64; words]; self.p];
        for (i, row) in self.rows().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v == 1 {
                    bits[j][i / 64] |= 1 << (i % 64);
                }
            }
        }
        bits
    }
}

/// Marginal frequencies and the thresholds derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalSummary {
    /// Raw column frequencies.
    pub p_hat: Vec<f64>,
    /// `-Φ⁻¹` of the (clamped) frequencies.
    pub c_hat: Vec<f64>,
    /// Frequencies after clamping, i.e. the values `c_hat` was computed from.
    pub p_used: Vec<f64>,
    pub clamp_count: usize,
}

/// Tetrachoric correlation estimate with the pairs whose inversion clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct TetrachoricMatrix {
    pub sigma: DMatrix<f64>,
    /// Clamped pairs as `(j1, j2)` with `j1 < j2`, in row-major order.
    pub clamp_flags: Vec<(usize, usize)>,
}

impl TetrachoricMatrix {
    pub fn p(&self) -> usize {
        self.sigma.nrows()
    }
}

pub fn marginal_frequencies(y: &BinaryMatrix) -> Vec<f64> {
    let mut counts = vec![0usize; y.p()];
    for row in y.rows() {
        for (c, &v) in counts.iter_mut().zip(row) {
            *c += v as usize;
        }
    }
    counts.into_iter().map(|c| c as f64 / y.n() as f64).collect()
}

/// Thresholds `ĉ_j = -Φ⁻¹(P̂_j)` with frequencies clamped into
/// `[1/(2n), 1 - 1/(2n)]` so degenerate columns stay finite.
pub fn thresholds(p_hat: &[f64], n: usize) -> MarginalSummary {
    let lo = 0.5 / n.max(1) as f64;
    let hi = 1.0 - lo;
    let mut clamp_count = 0;
    let p_used: Vec<f64> = p_hat
        .iter()
        .map(|&p| {
            if p < lo || p > hi {
                clamp_count += 1;
            }
            p.clamp(lo, hi)
        })
        .collect();
    let c_hat = p_used
        .iter()
        .map(|&p| -std_normal_quantile(p).expect("clamped frequency lies in (0, 1)"))
        .collect();
    MarginalSummary { p_hat: p_hat.to_vec(), c_hat, p_used, clamp_count }
}

/// Thresholds from exact population probabilities, without clamping.
pub fn thresholds_exact(probabilities: &[f64]) -> Result<MarginalSummary> {
    let c_hat = probabilities
        .iter()
        .map(|&p| std_normal_quantile(p).map(|q| -q))
        .collect::<Result<Vec<_>>>()?;
    Ok(MarginalSummary {
        p_hat: probabilities.to_vec(),
        c_hat,
        p_used: probabilities.to_vec(),
        clamp_count: 0,
    })
}

pub fn pairwise_joint_frequency(y: &BinaryMatrix, j1: usize, j2: usize) -> Result<f64> {
    if j1 >= y.p() || j2 >= y.p() {
        return domain(format!("column index out of range for p = {}", y.p()));
    }
    if j1 == j2 {
        return domain(format!("joint frequency needs two distinct columns, got {j1} twice"));
    }
    let both = y.rows().filter(|row| row[j1] == 1 && row[j2] == 1).count();
    Ok(both as f64 / y.n() as f64)
}

/// All pairwise joint frequencies as a symmetric matrix whose diagonal
/// holds the marginal frequencies.
pub fn joint_frequency_matrix(y: &BinaryMatrix) -> DMatrix<f64> {
    let bits = y.column_bits();
    let p = y.p();
    let n = y.n() as f64;
    let mut joint = DMatrix::zeros(p, p);
    for j1 in 0..p {
        for j2 in j1..p {
            let count: u32 = bits[j1]
                .iter()
                .zip(&bits[j2])
                .map(|(a, b)| (a & b).count_ones())
                .sum();
            let f = count as f64 / n;
            joint[(j1, j2)] = f;
            joint[(j2, j1)] = f;
        }
    }
    joint
}

/// Tetrachoric matrix of a binary data set.
pub fn estimate_tetrachoric(y: &BinaryMatrix) -> (MarginalSummary, TetrachoricMatrix) {
    let marginals = thresholds(&marginal_frequencies(y), y.n());
    let joint = joint_frequency_matrix(y);
    let sigma = tetrachoric_from_frequencies(&marginals, &joint);
    (marginals, sigma)
}

/// Invert every off-diagonal joint frequency given the thresholds.
///
/// Pairs are independent and each writes its own cell, so the result does
/// not depend on evaluation order. A pair whose frequency lies within
/// [`JOINT_BRACKET_MARGIN`] of `max(0, P1 + P2 - 1)` or `min(P1, P2)` (the
/// attainable range given the marginals) is clamped to `∓(1 - RHO_CLAMP)`.
pub fn tetrachoric_from_frequencies(marginals: &MarginalSummary, joint: &DMatrix<f64>) -> TetrachoricMatrix {
    let p = marginals.c_hat.len();
    assert_eq!(joint.nrows(), p, "joint frequency matrix does not match thresholds");
    let pairs: Vec<(usize, usize)> = (0..p).flat_map(|j1| (j1 + 1..p).map(move |j2| (j1, j2))).collect();

    let solved = map_indexed(pairs.len(), |k| {
        let (j1, j2) = pairs[k];
        let (p1, p2) = (marginals.p_used[j1], marginals.p_used[j2]);
        let target = joint[(j1, j2)];
        let lower = (p1 + p2 - 1.0).max(0.0);
        let upper = p1.min(p2);
        if target >= upper - JOINT_BRACKET_MARGIN {
            (1.0 - RHO_CLAMP, true)
        } else if target <= lower + JOINT_BRACKET_MARGIN {
            (-(1.0 - RHO_CLAMP), true)
        } else {
            let inv = tetrachoric_invert(marginals.c_hat[j1], marginals.c_hat[j2], target)
                .expect("frequencies are probabilities and thresholds are finite");
            (inv.rho_hat, inv.clamped)
        }
    });

    let mut sigma = DMatrix::identity(p, p);
    let mut clamp_flags = Vec::new();
    for (&(j1, j2), &(rho, clamped)) in pairs.iter().zip(&solved) {
        sigma[(j1, j2)] = rho;
        sigma[(j2, j1)] = rho;
        if clamped {
            clamp_flags.push((j1, j2));
        }
    }
    TetrachoricMatrix { sigma, clamp_flags }
}
