//! Real-analysis toolkit: standard normal functions, half-line quadrature,
//! bracketed scalar minimization and smallest-root search.
//!
//! Everything here is a pure function of its inputs.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::OnceLock;

use thiserror::Error;

/// Point beyond which Gaussian-dominated integrands are dropped.
/// `phi(9) < 1e-17`, so the discarded mass is below 1e-18.
pub const HALFLINE_CUTOFF: f64 = 9.0;

const GAUSS_LEGENDRE_ORDER: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("invalid tolerance: {0}")]
    InvalidTolerance(String),
    #[error("invalid bracket [{lo}, {hi}]")]
    InvalidBracket { lo: f64, hi: f64 },
    #[error("quadrature did not converge within {max_iter} subdivisions (estimated error {estimated_error:e})")]
    QuadratureNotConverged { max_iter: usize, estimated_error: f64 },
    #[error("integrand or objective is not finite at {at}")]
    NonFinite { at: f64 },
}

/// Error targets and iteration cap shared by the solvers in this module.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Tolerance {
    pub fn new(abs_tol: f64, rel_tol: f64, max_iter: usize) -> Result<Self, NumericsError> {
        let tol = Tolerance {
            abs_tol,
            rel_tol,
            max_iter,
        };
        tol.validate()?;
        Ok(tol)
    }

    pub fn absolute(abs_tol: f64) -> Self {
        Tolerance {
            abs_tol,
            rel_tol: 0.0,
            max_iter: 10_000,
        }
    }

    fn validate(&self) -> Result<(), NumericsError> {
        if !(self.abs_tol > 0.0 && self.abs_tol.is_finite()) {
            return Err(NumericsError::InvalidTolerance(format!(
                "abs_tol must be positive, got {}",
                self.abs_tol
            )));
        }
        if !(self.rel_tol >= 0.0 && self.rel_tol.is_finite()) {
            return Err(NumericsError::InvalidTolerance(format!(
                "rel_tol must be non-negative, got {}",
                self.rel_tol
            )));
        }
        if self.max_iter == 0 {
            return Err(NumericsError::InvalidTolerance(
                "max_iter must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            abs_tol: 1e-10,
            rel_tol: 0.0,
            max_iter: 10_000,
        }
    }
}

/// Outcome of a minimization or root search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarResult {
    /// The argmin (for minimization) or the root.
    pub argmin_or_root: f64,
    /// Function value at `argmin_or_root`.
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Standard normal distribution function.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// `P(|Z| <= x) = 2 Phi(x) - 1`, accurate near zero where the subtraction
/// would cancel.
pub fn std_normal_central(x: f64) -> f64 {
    libm::erf(x * FRAC_1_SQRT_2)
}

struct GaussLegendreRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendreRule {
    fn new(n: usize) -> Self {
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            // Newton iteration on P_n from the usual Chebyshev-like guess.
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, x);
            dp = if d.is_finite() { d } else { dp };
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        GaussLegendreRule { nodes, weights }
    }

    fn apply<F: Fn(f64) -> f64>(&self, f: &F, a: f64, b: f64) -> Result<f64, NumericsError> {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut sum = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            let at = mid + half * x;
            let v = f(at);
            if !v.is_finite() {
                return Err(NumericsError::NonFinite { at });
            }
            sum += w * v;
        }
        Ok(sum * half)
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

fn gauss_legendre() -> &'static GaussLegendreRule {
    static RULE: OnceLock<GaussLegendreRule> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendreRule::new(GAUSS_LEGENDRE_ORDER))
}

/// Adaptive composite Gauss-Legendre integration of `f` over `[a, b]`.
///
/// Each panel is bisected until the two-halves estimate agrees with the
/// whole-panel estimate to the panel's share of `tol.abs_tol` (or to
/// `tol.rel_tol` of the running total). `tol.max_iter` caps the number of
/// bisections.
pub fn integrate<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    tol: Tolerance,
) -> Result<f64, NumericsError> {
    tol.validate()?;
    if !(a.is_finite() && b.is_finite() && a < b) {
        return Err(NumericsError::InvalidBracket { lo: a, hi: b });
    }
    let rule = gauss_legendre();
    let width = b - a;
    const INITIAL_PANELS: usize = 4;
    let mut stack = Vec::with_capacity(64);
    for i in 0..INITIAL_PANELS {
        let lo = a + width * i as f64 / INITIAL_PANELS as f64;
        let hi = a + width * (i + 1) as f64 / INITIAL_PANELS as f64;
        stack.push((lo, hi, rule.apply(&f, lo, hi)?));
    }
    let mut total = 0.0;
    let mut splits = 0usize;
    let mut worst_err = 0.0f64;
    while let Some((lo, hi, whole)) = stack.pop() {
        let mid = 0.5 * (lo + hi);
        let left = rule.apply(&f, lo, mid)?;
        let right = rule.apply(&f, mid, hi)?;
        let refined = left + right;
        let err = (refined - whole).abs();
        let budget = (tol.abs_tol * (hi - lo) / width).max(tol.rel_tol * refined.abs());
        if err <= budget || hi - lo <= width * 1e-12 {
            total += refined;
            continue;
        }
        splits += 1;
        if splits > tol.max_iter {
            worst_err = worst_err.max(err);
            return Err(NumericsError::QuadratureNotConverged {
                max_iter: tol.max_iter,
                estimated_error: worst_err,
            });
        }
        stack.push((lo, mid, left));
        stack.push((mid, hi, right));
    }
    Ok(total)
}

/// `int_0^inf f(y) dy` for integrands bounded by the normal density.
pub fn integrate_halfline<F: Fn(f64) -> f64>(f: F, tol: Tolerance) -> Result<f64, NumericsError> {
    integrate(f, 0.0, HALFLINE_CUTOFF, tol)
}

const SCAN_POINTS: usize = 400;
const INV_PHI: f64 = 0.618_033_988_749_894_8;

/// Minimizes `f` on `[lo, hi]`.
///
/// A pre-scan (geometric when `lo > 0`, uniform otherwise) picks the best
/// grid point, then golden-section search refines inside its two
/// neighbouring cells. The returned value is never worse than the best grid
/// value.
pub fn minimize_scalar<F: Fn(f64) -> f64>(
    f: F,
    lo: f64,
    hi: f64,
    tol: Tolerance,
) -> Result<ScalarResult, NumericsError> {
    tol.validate()?;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(NumericsError::InvalidBracket { lo, hi });
    }
    let grid = scan_grid(lo, hi, SCAN_POINTS);
    let mut best = 0;
    let mut best_val = f64::INFINITY;
    for (i, &t) in grid.iter().enumerate() {
        let v = f(t);
        if v.is_nan() {
            return Err(NumericsError::NonFinite { at: t });
        }
        if v < best_val {
            best_val = v;
            best = i;
        }
    }
    let mut a = grid[best.saturating_sub(1)];
    let mut b = grid[(best + 1).min(grid.len() - 1)];

    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < tol.max_iter {
        let mid = 0.5 * (a + b);
        if (b - a).abs() <= tol.abs_tol + tol.rel_tol * mid.abs() {
            converged = true;
            break;
        }
        iterations += 1;
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let (mut x, mut fx) = if fc < fd { (c, fc) } else { (d, fd) };
    if best_val < fx {
        x = grid[best];
        fx = best_val;
    }
    if !fx.is_finite() {
        return Err(NumericsError::NonFinite { at: x });
    }
    Ok(ScalarResult {
        argmin_or_root: x,
        value: fx,
        converged,
        iterations,
    })
}

fn scan_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if lo > 0.0 {
        let ratio = (hi / lo).ln();
        (0..n)
            .map(|i| lo * (ratio * i as f64 / (n - 1) as f64).exp())
            .collect()
    } else {
        (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect()
    }
}

/// Leftmost root of `f` on `[lo, hi]`.
///
/// `f` is evaluated on the grid `lo, lo + step, ..., hi`; the first pair of
/// neighbouring grid points with a sign change (or a grid point where `f`
/// vanishes) is refined by bisection until the bracket is narrower than
/// `tol.abs_tol`. Returns `None` when the scan sees no sign change.
pub fn find_smallest_root<F: Fn(f64) -> f64>(
    f: F,
    lo: f64,
    hi: f64,
    step: f64,
    tol: Tolerance,
) -> Result<Option<ScalarResult>, NumericsError> {
    tol.validate()?;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(NumericsError::InvalidBracket { lo, hi });
    }
    if !(step > 0.0) {
        return Err(NumericsError::InvalidTolerance(format!(
            "scan step must be positive, got {step}"
        )));
    }
    let n = ((hi - lo) / step).round().max(1.0) as usize;
    let grid_point = |i: usize| if i >= n { hi } else { lo + step * i as f64 };

    let mut prev_x = grid_point(0);
    let mut prev_f = f(prev_x);
    if prev_f == 0.0 {
        return Ok(Some(exact_root(prev_x)));
    }
    for i in 1..=n {
        let x = grid_point(i);
        let fx = f(x);
        if fx == 0.0 {
            return Ok(Some(exact_root(x)));
        }
        if prev_f.is_finite() && fx.is_finite() && (prev_f < 0.0) != (fx < 0.0) {
            return Ok(Some(bisect(&f, prev_x, x, prev_f, tol)));
        }
        prev_x = x;
        prev_f = fx;
    }
    Ok(None)
}

fn exact_root(x: f64) -> ScalarResult {
    ScalarResult {
        argmin_or_root: x,
        value: 0.0,
        converged: true,
        iterations: 0,
    }
}

fn bisect<F: Fn(f64) -> f64>(f: &F, mut a: f64, mut b: f64, fa: f64, tol: Tolerance) -> ScalarResult {
    let a_negative = fa < 0.0;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < tol.max_iter {
        if b - a <= tol.abs_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let m = 0.5 * (a + b);
        let fm = f(m);
        if fm == 0.0 {
            return ScalarResult {
                argmin_or_root: m,
                value: 0.0,
                converged: true,
                iterations,
            };
        }
        if (fm < 0.0) == a_negative {
            a = m;
        } else {
            b = m;
        }
    }
    let root = 0.5 * (a + b);
    ScalarResult {
        argmin_or_root: root,
        value: f(root),
        converged,
        iterations,
    }
}
