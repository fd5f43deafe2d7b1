//! Worst-case null rejection bound of the rearrangement test and the
//! tightness grading used to decide whether a weight is recommended.
//!
//! The bound for `q` controls, weight `w` and heterogeneity cap `rho` is
//!
//! ```text
//! xi_q(w, rho) = 2^-(q+1)
//!              + int_0^inf Phi((1 - w) rho y)^(q-1) phi(y) dy
//!              + min_{t > 0} [ Phi(sqrt(q-1) w t)^(q-1) + 2 Phi(-q t) ]
//! ```
//!
//! Only the integral is tight; the other two terms are the slack.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::numerics::{
    integrate_halfline, minimize_scalar, std_normal_cdf, std_normal_pdf, NumericsError, Tolerance,
};

/// Lower end of the bracket searched for the centering minimizer.
pub const CENTERING_T_MIN: f64 = 1e-8;
/// Upper end of the bracket searched for the centering minimizer.
pub const CENTERING_T_MAX: f64 = 50.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundError {
    #[error("q must be at least {min}, got {q}")]
    TooFewControls { q: u32, min: u32 },
    #[error("weight must lie in (0, 1), got {0}")]
    WeightOutOfRange(f64),
    #[error("rho must be positive and finite, got {0}")]
    InvalidRho(f64),
    #[error("alpha must lie in (0, 0.5), got {0}")]
    InvalidAlpha(f64),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// The three additive pieces of the size bound and their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundComponents {
    pub q: u32,
    pub w: f64,
    pub rho: f64,
    /// `2^-(q+1)`.
    pub escape_term: f64,
    /// The tight oracle integral.
    pub oracle_integral: f64,
    /// Correction for centering at the control mean instead of the true mean.
    pub centering_adjustment: f64,
    pub total: f64,
}

impl BoundComponents {
    /// Share of the bound not accounted for by the tight integral.
    pub fn slack(&self) -> f64 {
        self.escape_term + self.centering_adjustment
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Grade {
    /// No weight solves the bound, or more than `alpha / 2` of it is slack.
    Infeasible,
    /// Slack between `alpha / 10` and `alpha / 2`.
    Loose,
    /// Slack at most `alpha / 10`.
    NearTight,
}

impl Grade {
    pub fn as_str(&self) -> &'static str {
        match self {
            Grade::Infeasible => "infeasible",
            Grade::Loose => "loose",
            Grade::NearTight => "near_tight",
        }
    }
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Grade {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "infeasible" => Ok(Grade::Infeasible),
            "loose" => Ok(Grade::Loose),
            "near_tight" => Ok(Grade::NearTight),
            other => Err(format!("unknown grade '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TightnessGrade {
    pub grade: Grade,
    /// Escape term plus centering adjustment at the solved weight; `None`
    /// when no weight exists.
    pub slack: Option<f64>,
}

impl TightnessGrade {
    pub fn from_slack(alpha: f64, slack: f64) -> Self {
        let grade = if slack > alpha / 2.0 {
            Grade::Infeasible
        } else if slack > alpha / 10.0 {
            Grade::Loose
        } else {
            Grade::NearTight
        };
        TightnessGrade {
            grade,
            slack: Some(slack),
        }
    }

    pub fn no_weight() -> Self {
        TightnessGrade {
            grade: Grade::Infeasible,
            slack: None,
        }
    }
}

fn quad_tol() -> Tolerance {
    Tolerance {
        abs_tol: 1e-12,
        rel_tol: 0.0,
        max_iter: 10_000,
    }
}

fn min_tol() -> Tolerance {
    Tolerance {
        abs_tol: 1e-12,
        rel_tol: 1e-10,
        max_iter: 500,
    }
}

fn check_q(q: u32, min: u32) -> Result<(), BoundError> {
    if q < min {
        return Err(BoundError::TooFewControls { q, min });
    }
    Ok(())
}

fn check_w(w: f64) -> Result<(), BoundError> {
    if !(w > 0.0 && w < 1.0) {
        return Err(BoundError::WeightOutOfRange(w));
    }
    Ok(())
}

fn check_rho(rho: f64) -> Result<(), BoundError> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(BoundError::InvalidRho(rho));
    }
    Ok(())
}

/// `min_{t>0} Phi(sqrt(q-1) w t)^(q-1) + 2 Phi(-q t)`.
pub fn centering_adjustment(q: u32, w: f64) -> Result<f64, BoundError> {
    check_q(q, 3)?;
    check_w(w)?;
    centering_unchecked(q, w)
}

pub(crate) fn centering_unchecked(q: u32, w: f64) -> Result<f64, BoundError> {
    let slope = ((q - 1) as f64).sqrt() * w;
    let power = (q - 1) as i32;
    let qf = q as f64;
    let objective = |t: f64| std_normal_cdf(slope * t).powi(power) + 2.0 * std_normal_cdf(-qf * t);
    let r = minimize_scalar(objective, CENTERING_T_MIN, CENTERING_T_MAX, min_tol())?;
    Ok(r.value)
}

/// `int_0^inf Phi((1 - w) rho y)^(q-1) phi(y) dy`.
pub fn oracle_integral(q: u32, w: f64, rho: f64) -> Result<f64, BoundError> {
    check_q(q, 2)?;
    check_w(w)?;
    check_rho(rho)?;
    oracle_integral_unchecked(q, w, rho)
}

pub(crate) fn oracle_integral_unchecked(q: u32, w: f64, rho: f64) -> Result<f64, BoundError> {
    let slope = (1.0 - w) * rho;
    let power = (q - 1) as i32;
    let v = integrate_halfline(
        |y| std_normal_cdf(slope * y).powi(power) * std_normal_pdf(y),
        quad_tol(),
    )?;
    Ok(v)
}

/// Size bound with its decomposition.
pub fn size_bound(q: u32, w: f64, rho: f64) -> Result<BoundComponents, BoundError> {
    check_q(q, 3)?;
    check_w(w)?;
    check_rho(rho)?;
    bound_unchecked(q, w, rho)
}

/// Same as [`size_bound`] but accepts the closed interval `w in [0, 1]`,
/// which the weight scan needs at its left endpoint.
pub(crate) fn bound_unchecked(q: u32, w: f64, rho: f64) -> Result<BoundComponents, BoundError> {
    let escape_term = 0.5f64.powi(q as i32 + 1);
    let oracle_integral = oracle_integral_unchecked(q, w, rho)?;
    let centering_adjustment = centering_unchecked(q, w)?;
    Ok(BoundComponents {
        q,
        w,
        rho,
        escape_term,
        oracle_integral,
        centering_adjustment,
        total: escape_term + oracle_integral + centering_adjustment,
    })
}

/// Grades an `(alpha, rho, q)` cell by how much of the bound at the solved
/// weight is slack.
pub fn classify_tightness(q: u32, alpha: f64, rho: f64) -> Result<TightnessGrade, BoundError> {
    check_q(q, 3)?;
    check_rho(rho)?;
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(BoundError::InvalidAlpha(alpha));
    }
    match crate::weights::solve_weight(q, alpha, rho)? {
        Some(w) => {
            let b = bound_unchecked(q, w, rho)?;
            Ok(TightnessGrade::from_slack(alpha, b.slack()))
        }
        None => Ok(TightnessGrade::no_weight()),
    }
}
