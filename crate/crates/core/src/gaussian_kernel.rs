//! Standard normal primitives and the bivariate upper-tail probability
//! `ℓ(c1, c2; ρ) = P(X > c1, Y > c2)` for a standard bivariate normal pair
//! with correlation `ρ`.
//!
//! `ℓ` is evaluated as `ℓ(c1, c2; 0)` plus the integral of its
//! `ρ`-derivative (the bivariate normal density at `(c1, c2)`). Under the
//! change of variable `r = sin θ` the integrand becomes
//!
//! ```text
//! (2π)⁻¹ exp{-(c1² + c2² - 2 c1 c2 sin θ) / (2 cos² θ)}
//! ```
//!
//! which stays bounded all the way to `|ρ| = 1`, so a plain adaptive
//! Gauss–Kronrod rule handles the whole range.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, FRAC_PI_4, PI};

use crate::error::{domain, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const SQRT_2PI: f64 = 2.506_628_274_631_000_7;

/// Margin kept between the root-finding bracket and `ρ = ±1`.
pub const RHO_EDGE: f64 = 1e-12;

/// Distance from `±1` reported when an inversion target falls outside the
/// attainable range.
pub const RHO_CLAMP: f64 = 1e-6;

/// Absolute tolerance for the `θ` integral.
const QUAD_TOL: f64 = 1e-14;
const QUAD_REL_TOL: f64 = 1e-13;
const QUAD_MAX_DEPTH: u32 = 24;

/// Bracket width below which the inversion stops.
const ROOT_WIDTH_TOL: f64 = 1e-12;
const ROOT_MAX_ITER: usize = 200;

pub fn std_normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// `1 - Φ(x)` without cancellation.
pub fn std_normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x * FRAC_1_SQRT_2)
}

/// Inverse of [`std_normal_cdf`].
///
/// Acklam's rational approximation seeds two Halley refinements against
/// the erfc-based cdf. The refinement always runs in the lower tail, where
/// the cdf carries full relative precision.
pub fn std_normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return domain(format!("normal quantile needs p in (0, 1), got {p}"));
    }
    if p > 0.5 {
        // exact for p in (0.5, 1)
        Ok(-lower_quantile(1.0 - p))
    } else {
        Ok(lower_quantile(p))
    }
}

fn lower_quantile(p: f64) -> f64 {
    let mut x = acklam(p);
    for _ in 0..3 {
        let err = std_normal_cdf(x) - p;
        let u = err * SQRT_2PI * (0.5 * x * x).exp();
        if !u.is_finite() {
            break;
        }
        x -= u / (1.0 + 0.5 * x * u);
    }
    x
}

fn acklam(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// Arguments of the bivariate upper-tail probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailQuery {
    pub c1: f64,
    pub c2: f64,
    pub rho: f64,
}

impl TailQuery {
    pub fn new(c1: f64, c2: f64, rho: f64) -> Result<Self> {
        if !c1.is_finite() || !c2.is_finite() {
            return domain(format!("thresholds must be finite, got ({c1}, {c2})"));
        }
        if !(-1.0..=1.0).contains(&rho) {
            return domain(format!("correlation must lie in [-1, 1], got {rho}"));
        }
        Ok(Self { c1, c2, rho })
    }

    fn interior(&self) -> Result<()> {
        if self.rho.abs() >= 1.0 {
            return domain(format!(
                "rho = {} is on the boundary; use bvn_boundary_value",
                self.rho
            ));
        }
        Ok(())
    }
}

/// `ℓ(c1, c2; ρ)` for `|ρ| < 1`.
pub fn bvn_upper_tail(q: &TailQuery) -> Result<f64> {
    q.interior()?;
    Ok(upper_tail(q.c1, q.c2, q.rho))
}

/// `∂ℓ/∂ρ`, i.e. the standard bivariate normal density at `(c1, c2)`.
pub fn bvn_upper_tail_drho(q: &TailQuery) -> Result<f64> {
    q.interior()?;
    Ok(upper_tail_drho(q.c1, q.c2, q.rho))
}

/// Which end of the correlation range to evaluate `ℓ` at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrelationLimit {
    /// `ρ = -1`
    Negative,
    /// `ρ = +1`
    Positive,
}

/// `ℓ(c1, c2; ±1)`: the limits that bracket `ℓ` on the open interval.
pub fn bvn_boundary_value(c1: f64, c2: f64, limit: CorrelationLimit) -> f64 {
    let (c1, c2) = (c1.min(c2), c1.max(c2));
    match limit {
        CorrelationLimit::Positive => std_normal_sf(c1.max(c2)),
        CorrelationLimit::Negative => {
            if c1 + c2 <= 0.0 {
                (std_normal_sf(c1) - std_normal_cdf(c2)).max(0.0)
            } else {
                0.0
            }
        }
    }
}

pub(crate) fn upper_tail(c1: f64, c2: f64, rho: f64) -> f64 {
    let sf1 = std_normal_sf(c1);
    let sf2 = std_normal_sf(c2);
    if rho == 0.0 {
        return sf1 * sf2;
    }
    let theta_end = rho.asin();
    let cross = 2.0 * (c1 * c2);
    // c1² + c2² - 2 c1 c2 sin θ, written around whichever of 1 ∓ sin θ
    // vanishes on this side so the numerator keeps its relative precision
    let (square, sign) = if theta_end > 0.0 {
        ((c1 - c2) * (c1 - c2), 1.0)
    } else {
        ((c1 + c2) * (c1 + c2), -1.0)
    };
    let integrand = |theta: f64| {
        let half = FRAC_PI_4 - 0.5 * theta;
        let (sh, ch) = half.sin_cos();
        let one_minus_sin = 2.0 * sh * sh;
        let one_plus_sin = 2.0 * ch * ch;
        let denom = 2.0 * one_minus_sin * one_plus_sin;
        if denom == 0.0 {
            return 0.0;
        }
        let vanishing = if sign > 0.0 { one_minus_sin } else { one_plus_sin };
        let numerator = square + sign * cross * vanishing;
        (-numerator / denom).exp()
    };
    // Integrate from the nearer limit ρ = ±1, where ℓ is known exactly;
    // near either end the correction is then small and rounds monotonically.
    let value = if theta_end > 0.0 {
        bvn_boundary_value(c1, c2, CorrelationLimit::Positive)
            - adaptive_gauss_kronrod(&integrand, theta_end, FRAC_PI_2, QUAD_TOL) / (2.0 * PI)
    } else {
        bvn_boundary_value(c1, c2, CorrelationLimit::Negative)
            + adaptive_gauss_kronrod(&integrand, -FRAC_PI_2, theta_end, QUAD_TOL) / (2.0 * PI)
    };
    value.clamp(0.0, sf1.min(sf2))
}

pub(crate) fn upper_tail_drho(c1: f64, c2: f64, rho: f64) -> f64 {
    let r2 = 1.0 - rho * rho;
    let quad = ((c1 * c1 + c2 * c2) - 2.0 * rho * (c1 * c2)) / (2.0 * r2);
    (-quad).exp() / (2.0 * PI * r2.sqrt())
}

// 7-point Gauss / 15-point Kronrod pair on [-1, 1]; index 7 is the centre.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gauss_kronrod_15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let centre = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(centre);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for k in 0..7 {
        let dx = half * XGK[k];
        let pair = f(centre - dx) + f(centre + dx);
        kronrod += WGK[k] * pair;
        if k % 2 == 1 {
            gauss += WG[k / 2] * pair;
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

/// Adaptive Gauss–Kronrod integration of `f` over `[a, b]`.
///
/// The tolerance (absolute, or relative to a first estimate when that is
/// smaller) is shared among subintervals in proportion to their length. A
/// subinterval is also accepted once its error estimate is at the level of
/// rounding noise.
pub(crate) fn adaptive_gauss_kronrod<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn recurse<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol_density: f64, depth: u32) -> f64 {
        let (value, err) = gauss_kronrod_15(f, a, b);
        let noise = 64.0 * f64::EPSILON * value.abs();
        if err <= (tol_density * (b - a).abs()).max(noise) || depth >= QUAD_MAX_DEPTH {
            return value;
        }
        let mid = 0.5 * (a + b);
        recurse(f, a, mid, tol_density, depth + 1) + recurse(f, mid, b, tol_density, depth + 1)
    }
    if a == b {
        return 0.0;
    }
    // tighten for integrals far below the absolute tolerance
    let (coarse, _) = gauss_kronrod_15(f, a, b);
    let tol = tol.min(QUAD_REL_TOL * coarse.abs());
    recurse(f, a, b, tol / (b - a).abs(), 0)
}

/// Outcome of inverting `ρ ↦ ℓ(c1, c2; ρ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InversionResult {
    pub rho_hat: f64,
    pub ell_at_rho: f64,
    pub iterations: usize,
    /// The target was on or outside `(ℓ(c1,c2;-1), ℓ(c1,c2;1))`.
    pub clamped: bool,
}

/// Solve `ℓ(c1, c2; ρ) = p_target` for `ρ`.
///
/// `ℓ` is strictly increasing in `ρ`, so the root is bracketed by the
/// boundary values. Targets on or beyond either boundary return
/// `±(1 - RHO_CLAMP)` with `clamped` set.
pub fn tetrachoric_invert(c1: f64, c2: f64, p_target: f64) -> Result<InversionResult> {
    if !c1.is_finite() || !c2.is_finite() {
        return domain(format!("thresholds must be finite, got ({c1}, {c2})"));
    }
    if !(0.0..=1.0).contains(&p_target) {
        return domain(format!("target probability must lie in [0, 1], got {p_target}"));
    }

    let lower = bvn_boundary_value(c1, c2, CorrelationLimit::Negative);
    let upper = bvn_boundary_value(c1, c2, CorrelationLimit::Positive);
    if p_target <= lower || p_target >= upper {
        let rho_hat = if p_target <= lower { -(1.0 - RHO_CLAMP) } else { 1.0 - RHO_CLAMP };
        return Ok(InversionResult {
            rho_hat,
            ell_at_rho: upper_tail(c1, c2, rho_hat),
            iterations: 0,
            clamped: true,
        });
    }

    let residual = |rho: f64| upper_tail(c1, c2, rho) - p_target;
    let (root, iterations) = bracketed_root(&residual, -1.0 + RHO_EDGE, 1.0 - RHO_EDGE);
    Ok(InversionResult {
        rho_hat: root,
        ell_at_rho: upper_tail(c1, c2, root),
        iterations,
        clamped: false,
    })
}

/// Brent's bracketed root finder: inverse quadratic / secant steps with a
/// bisection fallback whenever the interpolated step is not trusted.
///
/// Expects `f(a) < 0 < f(b)`; if the function does not change sign the
/// nearer endpoint is returned.
fn bracketed_root<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, usize) {
    let (mut a, mut b) = (a, b);
    let mut fa = f(a);
    let mut fb = f(b);
    if fa >= 0.0 {
        return (a, 0);
    }
    if fb <= 0.0 {
        return (b, 0);
    }

    let (mut c, mut fc) = (a, fa);
    let mut d = b - a;
    let mut e = d;
    for iteration in 1..=ROOT_MAX_ITER {
        if (fb > 0.0) == (fc > 0.0) {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol = 2.0 * f64::EPSILON * b.abs() + 0.5 * ROOT_WIDTH_TOL;
        let half_width = 0.5 * (c - b);
        if half_width.abs() <= tol || fb == 0.0 {
            return (b, iteration);
        }
        if e.abs() >= tol && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q) = if a == c {
                (2.0 * half_width * s, 1.0 - s)
            } else {
                let q = fa / fc;
                let r = fb / fc;
                (
                    s * (2.0 * half_width * q * (q - r) - (b - a) * (r - 1.0)),
                    (q - 1.0) * (r - 1.0) * (s - 1.0),
                )
            };
            if p > 0.0 {
                q = -q;
            }
            p = p.abs();
            if 2.0 * p < (3.0 * half_width * q - (tol * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = half_width;
                e = d;
            }
        } else {
            d = half_width;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol { d } else { tol.copysign(half_width) };
        fb = f(b);
    }
    (b, ROOT_MAX_ITER)
}
