//! The rearrangement test.
//!
//! Given one treated estimate and `q` control estimates, the test recentres
//! everything at the control mean, splits the treated contrast `Delta` into
//! `(1 + w) Delta` and `(1 - w) Delta`, and rejects in favour of a positive
//! effect when both weighted copies sit strictly above every recentred
//! control. That is the same event as the difference-of-means statistic of
//! the recentred vector being unchanged by a descending rearrangement, but
//! the inequality form needs no floating-point equality test.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::numerics::{minimize_scalar, std_normal_cdf, std_normal_central, NumericsError, Tolerance};
use crate::weights::{self, WeightError, WeightSpec};

#[derive(Debug, Error)]
pub enum TestError {
    #[error("need at least 2 control estimates, got {0}")]
    TooFewControls(usize),
    #[error("estimate {0} is not finite")]
    NonFinite(f64),
    #[error("all control estimates are identical; at most one control may have zero variance, so check the estimation step")]
    IdenticalControls,
    #[error("weight must lie in (0, 1), got {0}")]
    WeightOutOfRange(f64),
    #[error("alpha must lie in (0, 0.5), got {0}")]
    InvalidAlpha(f64),
    #[error("rho must be positive and finite, got {0}")]
    InvalidRho(f64),
    #[error("infeasible combination alpha = {alpha}, rho = {rho}, q = {q}; see weight table")]
    Infeasible { alpha: f64, rho: f64, q: usize },
    #[error("test prepared for q = {expected} controls but the estimates have {found}")]
    ControlCountMismatch { expected: usize, found: usize },
    #[error("labels must name the treated cluster and each of the {expected} controls, got {found}")]
    LabelCount { expected: usize, found: usize },
    #[error("invalid power-bound input: {0}")]
    InvalidPowerInput(String),
    #[error("estimates file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Weight(#[from] WeightError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Treated estimate plus control estimates, e.g. cluster-level
/// regression coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateVector {
    treated: f64,
    controls: Vec<f64>,
    labels: Option<Vec<String>>,
}

impl EstimateVector {
    pub fn new(treated: f64, controls: Vec<f64>) -> Result<Self, TestError> {
        if controls.len() < 2 {
            return Err(TestError::TooFewControls(controls.len()));
        }
        if let Some(&bad) = std::iter::once(&treated)
            .chain(&controls)
            .find(|v| !v.is_finite())
        {
            return Err(TestError::NonFinite(bad));
        }
        if controls.iter().all(|&c| c == controls[0]) {
            return Err(TestError::IdenticalControls);
        }
        Ok(EstimateVector {
            treated,
            controls,
            labels: None,
        })
    }

    /// Attaches cluster identifiers: the treated cluster first, then the
    /// controls in order.
    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self, TestError> {
        if labels.len() != self.controls.len() + 1 {
            return Err(TestError::LabelCount {
                expected: self.controls.len(),
                found: labels.len(),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn treated(&self) -> f64 {
        self.treated
    }

    pub fn controls(&self) -> &[f64] {
        &self.controls
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    /// Number of control clusters.
    pub fn q(&self) -> usize {
        self.controls.len()
    }

    pub fn control_mean(&self) -> f64 {
        self.controls.iter().sum::<f64>() / self.q() as f64
    }

    /// Treated estimate minus the control mean.
    pub fn delta(&self) -> f64 {
        self.stats().scaled_delta / self.q() as f64
    }

    /// The vector with `shift` subtracted from the treated entry only.
    pub fn shifted(&self, shift: f64) -> Self {
        EstimateVector {
            treated: self.treated - shift,
            controls: self.controls.clone(),
            labels: self.labels.clone(),
        }
    }

    /// Every entry negated.
    pub fn negated(&self) -> Self {
        self.affine(-1.0, 0.0)
    }

    /// `scale * (x - offset)` applied to every entry.
    pub fn affine(&self, scale: f64, offset: f64) -> Self {
        EstimateVector {
            treated: scale * (self.treated - offset),
            controls: self.controls.iter().map(|c| scale * (c - offset)).collect(),
            labels: self.labels.clone(),
        }
    }

    /// Number of pairs of controls with exactly equal values. More than one
    /// such pair is outside the setting the size guarantee covers.
    pub fn coincident_control_pairs(&self) -> usize {
        let mut sorted = self.controls.clone();
        sorted.sort_by(f64::total_cmp);
        let mut pairs = 0;
        let mut run = 1usize;
        for i in 1..=sorted.len() {
            if i < sorted.len() && sorted[i] == sorted[i - 1] {
                run += 1;
            } else {
                pairs += run * (run - 1) / 2;
                run = 1;
            }
        }
        pairs
    }

    fn warnings(&self) -> Vec<String> {
        let pairs = self.coincident_control_pairs();
        if pairs > 1 {
            vec![format!(
                "{pairs} pairs of control estimates coincide exactly; the size guarantee allows at most one zero-variance control"
            )]
        } else {
            Vec::new()
        }
    }

    /// Recentred quantities multiplied by `q`, computed relative to the
    /// first control so that common location shifts cancel exactly.
    fn stats(&self) -> ScaledStats {
        let pivot = self.controls[0];
        let q = self.q() as f64;
        let sum: f64 = self.controls.iter().map(|c| c - pivot).sum();
        let mut max_r = f64::NEG_INFINITY;
        let mut min_r = f64::INFINITY;
        for c in &self.controls {
            let r = q * (c - pivot) - sum;
            max_r = max_r.max(r);
            min_r = min_r.min(r);
        }
        ScaledStats {
            scaled_delta: q * (self.treated - pivot) - sum,
            max_r,
            min_r,
        }
    }

    /// Parses an estimates file with header `cluster,estimate,treated` and
    /// exactly one row with `treated` equal to 1.
    pub fn parse_csv(text: &str) -> Result<Self, TestError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let header_ok = lines
            .next()
            .map(|(_, h)| {
                let cols: Vec<&str> = h.split(',').map(str::trim).collect();
                cols == ["cluster", "estimate", "treated"]
            })
            .unwrap_or(false);
        if !header_ok {
            return Err(TestError::Parse {
                line: 1,
                message: "expected header 'cluster,estimate,treated'".into(),
            });
        }
        let mut treated: Option<(String, f64)> = None;
        let mut controls = Vec::new();
        let mut labels = Vec::new();
        for (i, line) in lines {
            let line_no = i + 1;
            let bad = |message: String| TestError::Parse {
                line: line_no,
                message,
            };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(bad(format!("expected 3 fields, found {}", fields.len())));
            }
            let estimate: f64 = fields[1]
                .parse()
                .map_err(|_| bad(format!("bad estimate '{}'", fields[1])))?;
            match fields[2] {
                "1" => {
                    if treated.is_some() {
                        return Err(bad("more than one treated cluster".into()));
                    }
                    treated = Some((fields[0].to_string(), estimate));
                }
                "0" => {
                    labels.push(fields[0].to_string());
                    controls.push(estimate);
                }
                other => return Err(bad(format!("treated must be 0 or 1, got '{other}'"))),
            }
        }
        let (treated_label, treated) = treated.ok_or(TestError::Parse {
            line: 0,
            message: "no row has treated = 1".into(),
        })?;
        let mut all_labels = vec![treated_label];
        all_labels.extend(labels);
        EstimateVector::new(treated, controls)?.with_labels(all_labels)
    }
}

#[derive(Debug, Clone, Copy)]
struct ScaledStats {
    scaled_delta: f64,
    max_r: f64,
    min_r: f64,
}

/// The recentred weighted vector
/// `((1+w) Delta, (1-w) Delta, X_01 - mean, ..., X_0q - mean)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SVector(Vec<f64>);

impl SVector {
    pub fn entries(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for SVector {
    fn from(v: Vec<f64>) -> Self {
        SVector(v)
    }
}

fn check_weight(w: f64) -> Result<(), TestError> {
    if !(w > 0.0 && w < 1.0) {
        return Err(TestError::WeightOutOfRange(w));
    }
    Ok(())
}

pub fn build_s(x: &EstimateVector, w: f64) -> Result<SVector, TestError> {
    check_weight(w)?;
    let pivot = x.controls[0];
    let q = x.q() as f64;
    let mean = x.controls.iter().map(|c| c - pivot).sum::<f64>() / q;
    let delta = (x.treated - pivot) - mean;
    let mut entries = Vec::with_capacity(x.q() + 2);
    entries.push((1.0 + w) * delta);
    entries.push((1.0 - w) * delta);
    entries.extend(x.controls.iter().map(|c| (c - pivot) - mean));
    Ok(SVector(entries))
}

/// Difference-of-means statistic: mean of the first two entries minus the
/// mean of the rest.
pub fn t_stat(s: &[f64]) -> f64 {
    assert!(s.len() >= 4, "statistic needs at least two controls");
    let rest = &s[2..];
    0.5 * (s[0] + s[1]) - rest.iter().sum::<f64>() / rest.len() as f64
}

/// Stable descending sort.
pub fn rearrange_desc(s: &SVector) -> SVector {
    let mut v = s.0.clone();
    v.sort_by(|a, b| b.total_cmp(a));
    SVector(v)
}

/// Upper-tail decision at weight `w`: both weighted treated contrasts
/// strictly exceed every recentred control. Exact ties do not reject.
pub fn reject_upper(x: &EstimateVector, w: f64) -> bool {
    let s = x.stats();
    let d = s.scaled_delta;
    ((1.0 + w) * d).min((1.0 - w) * d) > s.max_r
}

fn reject_lower(x: &EstimateVector, w: f64) -> bool {
    let s = x.stats();
    let d = -s.scaled_delta;
    ((1.0 + w) * d).min((1.0 - w) * d) > -s.min_r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Alternative: treated parameter larger.
    Upper,
    /// Alternative: treated parameter smaller.
    Lower,
    TwoSided,
}

impl Direction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::Upper => "upper",
            Direction::Lower => "lower",
            Direction::TwoSided => "two-sided",
        }
    }

    /// Level at which the weight is chosen for an overall level `alpha`.
    pub fn weight_level(&self, alpha: f64) -> f64 {
        match self {
            Direction::TwoSided => alpha / 2.0,
            _ => alpha,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "upper" => Ok(Direction::Upper),
            "lower" => Ok(Direction::Lower),
            "two-sided" | "two_sided" => Ok(Direction::TwoSided),
            other => Err(format!(
                "direction must be upper, lower or two-sided, got '{other}'"
            )),
        }
    }
}

/// Quantities behind a decision, in the orientation that was tested (for
/// two-sided tests, the orientation matching the sign of `delta`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diagnostics {
    /// Treated estimate (after the shift) minus control mean.
    pub delta: f64,
    /// Largest recentred control.
    pub max_recentered_control: f64,
    /// Smaller of the two weighted treated contrasts.
    pub min_weighted_pair: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestDecision {
    pub reject: bool,
    pub direction: Direction,
    /// Overall level requested.
    pub alpha: f64,
    /// Level at which the weight was chosen (`alpha / 2` for two-sided).
    pub alpha_used: f64,
    pub rho: f64,
    pub w_used: f64,
    pub shift: f64,
    pub diagnostics: Diagnostics,
    pub warnings: Vec<String>,
}

fn check_alpha_rho(alpha: f64, rho: f64) -> Result<(), TestError> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(TestError::InvalidAlpha(alpha));
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(TestError::InvalidRho(rho));
    }
    Ok(())
}

/// A configured rearrangement test for a fixed number of controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RearrangementTest {
    alpha: f64,
    rho: f64,
    q: usize,
    direction: Direction,
    weight: f64,
}

impl RearrangementTest {
    /// Solves for the weight at `(alpha, rho, q)`, or at `alpha / 2` for a
    /// two-sided test.
    pub fn new(alpha: f64, rho: f64, q: usize, direction: Direction) -> Result<Self, TestError> {
        Self::from_source(alpha, rho, q, direction, weights::weight)
    }

    /// As [`Self::new`], taking weights from `source` (e.g. a cached table).
    /// `source` returns `None` for cells without a recommended weight.
    pub fn from_source<F>(
        alpha: f64,
        rho: f64,
        q: usize,
        direction: Direction,
        source: F,
    ) -> Result<Self, TestError>
    where
        F: FnOnce(WeightSpec) -> Result<Option<f64>, WeightError>,
    {
        check_alpha_rho(alpha, rho)?;
        let level = direction.weight_level(alpha);
        let infeasible = TestError::Infeasible {
            alpha: level,
            rho,
            q,
        };
        let Ok(q32) = u32::try_from(q) else {
            return Err(infeasible);
        };
        let spec = match WeightSpec::new(level, rho, q32) {
            Ok(spec) => spec,
            Err(WeightError::InvalidQ(_)) => return Err(infeasible),
            Err(e) => return Err(e.into()),
        };
        let weight = source(spec)?.ok_or(infeasible)?;
        Ok(RearrangementTest {
            alpha,
            rho,
            q,
            direction,
            weight,
        })
    }

    /// Uses a weight obtained elsewhere, e.g. from a weight table.
    pub fn with_weight(
        alpha: f64,
        rho: f64,
        q: usize,
        direction: Direction,
        weight: f64,
    ) -> Result<Self, TestError> {
        check_alpha_rho(alpha, rho)?;
        check_weight(weight)?;
        Ok(RearrangementTest {
            alpha,
            rho,
            q,
            direction,
            weight,
        })
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn q(&self) -> usize {
        self.q
    }

    /// Decision only; the hot path for simulations.
    pub fn rejects(&self, x: &EstimateVector) -> bool {
        match self.direction {
            Direction::Upper => reject_upper(x, self.weight),
            Direction::Lower => reject_lower(x, self.weight),
            Direction::TwoSided => reject_upper(x, self.weight) || reject_lower(x, self.weight),
        }
    }

    /// Tests `H0: treated parameter = control parameter + shift`.
    pub fn decide(&self, x: &EstimateVector, shift: f64) -> Result<TestDecision, TestError> {
        if x.q() != self.q {
            return Err(TestError::ControlCountMismatch {
                expected: self.q,
                found: x.q(),
            });
        }
        let shifted = x.shifted(shift);
        let reject = self.rejects(&shifted);
        let stats = shifted.stats();
        let q = self.q as f64;
        let use_lower = match self.direction {
            Direction::Upper => false,
            Direction::Lower => true,
            Direction::TwoSided => stats.scaled_delta < 0.0,
        };
        let w = self.weight;
        let diagnostics = if use_lower {
            let d = -stats.scaled_delta / q;
            Diagnostics {
                delta: d,
                max_recentered_control: -stats.min_r / q,
                min_weighted_pair: ((1.0 + w) * d).min((1.0 - w) * d),
            }
        } else {
            let d = stats.scaled_delta / q;
            Diagnostics {
                delta: d,
                max_recentered_control: stats.max_r / q,
                min_weighted_pair: ((1.0 + w) * d).min((1.0 - w) * d),
            }
        };
        Ok(TestDecision {
            reject,
            direction: self.direction,
            alpha: self.alpha,
            alpha_used: self.direction.weight_level(self.alpha),
            rho: self.rho,
            w_used: w,
            shift,
            diagnostics,
            warnings: x.warnings(),
        })
    }
}

/// Runs the test end to end, solving for the weight.
pub fn run_test(
    x: &EstimateVector,
    alpha: f64,
    rho: f64,
    direction: Direction,
    shift: f64,
) -> Result<TestDecision, TestError> {
    RearrangementTest::new(alpha, rho, x.q(), direction)?.decide(x, shift)
}

/// Largest heterogeneity cap on a grid at which the test still rejects.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustnessOutcome {
    /// `None` when the test does not reject even at the smallest grid value.
    pub rho: Option<f64>,
    /// The test rejects all the way up to the end of the grid.
    pub saturated: bool,
    /// Weight used at the reported `rho`.
    pub weight: Option<f64>,
}

/// Scans `rho = step, 2 step, ...` up to `rho_max` for the last value at
/// which the test rejects.
///
/// Rejection and feasibility are both monotone in `rho`, so the grid is
/// searched by bisection on the grid index.
pub fn robustness_rho(
    x: &EstimateVector,
    alpha: f64,
    direction: Direction,
    rho_max: f64,
    step: f64,
) -> Result<RobustnessOutcome, TestError> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(TestError::InvalidRho(step));
    }
    check_alpha_rho(alpha, rho_max)?;
    let last = ((rho_max / step) + 1e-9).floor() as u64;
    if last == 0 {
        return Err(TestError::InvalidRho(rho_max));
    }
    let grid = |k: u64| k as f64 * step;
    let rejects_at = |k: u64| -> Result<Option<f64>, TestError> {
        match RearrangementTest::new(alpha, grid(k), x.q(), direction) {
            Ok(t) => Ok(t.rejects(x).then_some(t.weight())),
            Err(TestError::Infeasible { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let Some(first_w) = rejects_at(1)? else {
        return Ok(RobustnessOutcome {
            rho: None,
            saturated: false,
            weight: None,
        });
    };
    if let Some(w) = rejects_at(last)? {
        return Ok(RobustnessOutcome {
            rho: Some(grid(last)),
            saturated: true,
            weight: Some(w),
        });
    }
    let (mut lo, mut hi, mut lo_w) = (1u64, last, first_w);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        match rejects_at(mid)? {
            Some(w) => {
                lo = mid;
                lo_w = w;
            }
            None => hi = mid,
        }
    }
    Ok(RobustnessOutcome {
        rho: Some(grid(lo)),
        saturated: false,
        weight: Some(lo_w),
    })
}

/// Inputs of the power lower bound under independent normal estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerBoundInput {
    pub delta: f64,
    pub sigma_treated: f64,
    pub sigma_controls: Vec<f64>,
    pub w: f64,
}

impl PowerBoundInput {
    pub fn new(
        delta: f64,
        sigma_treated: f64,
        sigma_controls: Vec<f64>,
        w: f64,
    ) -> Result<Self, TestError> {
        let bad = |m: &str| Err(TestError::InvalidPowerInput(m.to_string()));
        if !(delta > 0.0 && delta.is_finite()) {
            return bad("delta must be positive");
        }
        if !(sigma_treated > 0.0 && sigma_treated.is_finite()) {
            return bad("treated scale must be positive");
        }
        if sigma_controls.is_empty() || sigma_controls.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return bad("control scales must be positive");
        }
        if !(w > 0.0 && w < 1.0) {
            return bad("weight must lie in (0, 1)");
        }
        Ok(PowerBoundInput {
            delta,
            sigma_treated,
            sigma_controls,
            w,
        })
    }
}

/// Lower bound on the rejection probability of the upper-tail test,
/// uniform in the common mean:
///
/// `sup_t Phi(delta/sigma - (1+w)/(1-w) t) prod_k (2 Phi(sigma t / sigma_k) - 1)`.
pub fn power_lower_bound(inp: &PowerBoundInput) -> Result<f64, TestError> {
    let ratio = (1.0 + inp.w) / (1.0 - inp.w);
    let signal = inp.delta / inp.sigma_treated;
    let scales: Vec<f64> = inp
        .sigma_controls
        .iter()
        .map(|s| inp.sigma_treated / s)
        .collect();
    let objective = |t: f64| {
        let prod: f64 = scales.iter().map(|s| std_normal_central(s * t)).product();
        -(std_normal_cdf(signal - ratio * t) * prod)
    };
    // Beyond t_max the first factor is below Phi(-40).
    let t_max = (signal + 40.0) / ratio;
    let tol = Tolerance {
        abs_tol: 1e-14,
        rel_tol: 1e-12,
        max_iter: 500,
    };
    let r = minimize_scalar(objective, 1e-12 * t_max, t_max, tol)?;
    Ok((-r.value).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(t: f64, c: &[f64]) -> EstimateVector {
        EstimateVector::new(t, c.to_vec()).unwrap()
    }

    #[test]
    fn build_s_by_hand() {
        let x = ev(5.0, &[1.0, 2.0, 3.0]);
        assert_eq!(build_s(&x, 0.5).unwrap().entries(), &[4.5, 1.5, -1.0, 0.0, 1.0]);
        let x = ev(2.0, &[1.0, 2.0, 3.0]);
        assert_eq!(build_s(&x, 0.3).unwrap().entries(), &[0.0, 0.0, -1.0, 0.0, 1.0]);
        let shifted = ev(12.0, &[8.0, 9.0, 10.0]);
        assert_eq!(build_s(&shifted, 0.5).unwrap(), build_s(&ev(5.0, &[1.0, 2.0, 3.0]), 0.5).unwrap());
        assert!(matches!(build_s(&x, 1.0), Err(TestError::WeightOutOfRange(_))));
        assert!(matches!(build_s(&x, 0.0), Err(TestError::WeightOutOfRange(_))));
    }

    #[test]
    fn statistic_and_rearrangement() {
        let s = SVector::from(vec![4.5, 1.5, -1.0, 0.0, 1.0]);
        assert_eq!(t_stat(s.entries()), 3.0);
        assert_eq!(rearrange_desc(&s).entries(), &[4.5, 1.5, 1.0, 0.0, -1.0]);
        let sorted = rearrange_desc(&s);
        assert_eq!(rearrange_desc(&sorted), sorted);
        assert_eq!(t_stat(&[0.0; 5]), 0.0);
        let x = ev(3.7, &[0.2, -1.1, 0.9, 2.4]);
        let s = build_s(&x, 0.4).unwrap();
        assert!((t_stat(s.entries()) - (x.treated() - x.control_mean())).abs() < 1e-12);
    }

    #[test]
    fn rearrangement_keeps_tied_order() {
        let s = SVector::from(vec![1.0, 2.0, 2.0, 1.0]);
        let r = rearrange_desc(&s);
        assert_eq!(r.entries(), &[2.0, 2.0, 1.0, 1.0]);
        assert_eq!(t_stat(r.entries()), 1.0);
    }

    #[test]
    fn upper_rule_by_hand() {
        let x = ev(5.0, &[1.0, 2.0, 3.0]);
        assert!(reject_upper(&x, 0.5));
        assert!(!reject_upper(&x, 0.9));
        assert!(!reject_upper(&ev(0.0, &[1.0, 2.0, 3.0]), 0.5));
        // (1 - w) Delta == max recentred control exactly: no rejection.
        assert!(!reject_upper(&ev(4.0, &[1.0, 2.0, 3.0]), 0.5));
    }

    #[test]
    fn estimate_vector_validation() {
        assert!(matches!(EstimateVector::new(1.0, vec![1.0]), Err(TestError::TooFewControls(1))));
        assert!(matches!(
            EstimateVector::new(1.0, vec![2.0, 2.0, 2.0]),
            Err(TestError::IdenticalControls)
        ));
        assert!(matches!(
            EstimateVector::new(f64::NAN, vec![1.0, 2.0]),
            Err(TestError::NonFinite(_))
        ));
        let x = ev(1.0, &[0.0, 0.0, 1.0, 1.0, 2.0]);
        assert_eq!(x.coincident_control_pairs(), 2);
        assert_eq!(ev(1.0, &[0.0, 0.0, 1.0]).coincident_control_pairs(), 1);
    }

    #[test]
    fn decision_reports_weight_and_warnings() {
        let t = RearrangementTest::with_weight(0.05, 2.0, 5, Direction::Upper, 0.5).unwrap();
        let x = ev(9.0, &[0.0, 0.0, 1.0, 1.0, 2.0]);
        let d = t.decide(&x, 0.0).unwrap();
        assert!(d.reject);
        assert_eq!(d.w_used, 0.5);
        assert_eq!(d.warnings.len(), 1);
        assert!((d.diagnostics.delta - 8.2).abs() < 1e-12);
        let wrong_q = ev(1.0, &[0.0, 1.0]);
        assert!(matches!(t.decide(&wrong_q, 0.0), Err(TestError::ControlCountMismatch { .. })));
    }

    #[test]
    fn shift_by_delta_never_rejects() {
        let x = ev(6.0, &[0.1, -0.4, 0.3, 0.2, -0.5, 0.0, 0.25]);
        for dir in [Direction::Upper, Direction::Lower, Direction::TwoSided] {
            let t = RearrangementTest::with_weight(0.05, 2.0, x.q(), dir, 0.3).unwrap();
            assert!(!t.decide(&x, x.delta()).unwrap().reject, "{dir}");
        }
    }

    #[test]
    fn lower_is_upper_of_negation() {
        let x = ev(-4.0, &[0.3, -0.2, 0.5, 0.1]);
        let up = RearrangementTest::with_weight(0.05, 2.0, 4, Direction::Upper, 0.4).unwrap();
        let low = RearrangementTest::with_weight(0.05, 2.0, 4, Direction::Lower, 0.4).unwrap();
        assert!(low.rejects(&x));
        assert_eq!(low.rejects(&x), up.rejects(&x.negated()));
        let d = low.decide(&x, 0.0).unwrap();
        assert!(d.diagnostics.delta > 0.0);
    }

    #[test]
    fn infeasible_cells_are_explicit() {
        let x = ev(5.0, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let err = run_test(&x, 0.05, 2.0, Direction::Upper, 0.0).unwrap_err();
        assert!(err.to_string().contains("infeasible combination"));
        assert!(matches!(run_test(&x, 0.6, 2.0, Direction::Upper, 0.0), Err(TestError::InvalidAlpha(_))));
    }

    #[test]
    fn direction_parsing() {
        assert_eq!("two-sided".parse::<Direction>().unwrap(), Direction::TwoSided);
        assert_eq!("lower".parse::<Direction>().unwrap(), Direction::Lower);
        assert!("sideways".parse::<Direction>().is_err());
        assert_eq!(Direction::TwoSided.weight_level(0.05), 0.025);
    }

    #[test]
    fn estimates_csv() {
        let text = "cluster,estimate,treated\nA,1.0,0\nB,2.0,0\nT,5.0,1\nC,3.0,0\n";
        let x = EstimateVector::parse_csv(text).unwrap();
        assert_eq!(x.treated(), 5.0);
        assert_eq!(x.controls(), &[1.0, 2.0, 3.0]);
        assert_eq!(x.labels().unwrap()[0], "T");
        assert!(EstimateVector::parse_csv("cluster,estimate,treated\nA,1,0\nB,2,0\n").is_err());
        assert!(EstimateVector::parse_csv("cluster,estimate,treated\nA,1,1\nB,2,1\nC,3,0\n").is_err());
        assert!(EstimateVector::parse_csv("a,b,c\n").is_err());
    }

    #[test]
    fn power_bound_limits() {
        let big = PowerBoundInput::new(50.0, 1.0, vec![1.0; 5], 0.5).unwrap();
        assert!(power_lower_bound(&big).unwrap() >= 0.999);
        let near_one = PowerBoundInput::new(2.0, 1.0, vec![1.0; 5], 0.9999).unwrap();
        assert!(power_lower_bound(&near_one).unwrap() <= 1e-3);
        assert!(PowerBoundInput::new(-1.0, 1.0, vec![1.0], 0.5).is_err());
        assert!(PowerBoundInput::new(1.0, 1.0, vec![0.0], 0.5).is_err());
    }

    #[test]
    fn power_bound_matches_grid_supremum() {
        let inp = PowerBoundInput::new(2.0, 1.0, vec![1.0; 3], 0.5).unwrap();
        let oracle = (1..=1_000_000)
            .map(|i| {
                let t = i as f64 * 1e-5;
                let prod = (2.0 * std_normal_cdf(t) - 1.0).powi(3);
                std_normal_cdf(2.0 - 3.0 * t) * prod
            })
            .fold(0.0f64, f64::max);
        let b = power_lower_bound(&inp).unwrap();
        assert!(b >= oracle - 1e-12);
        assert!(b - oracle < 1e-9, "{b} vs {oracle}");
    }
}
