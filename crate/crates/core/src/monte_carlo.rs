//! Seeded simulation of two-way fixed-effects panels and rejection-rate
//! experiments.
//!
//! Replication `i` of every cell draws from a generator seeded with
//! `SHA-256(SEED_DOMAIN || master_seed || i)` (little-endian integers). Cells
//! therefore share innovation draws: methods, effect sizes and
//! heterogeneity levels are compared on the same data, and counts are
//! integer sums, so results do not depend on the number of worker threads.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::conley_taber::{conley_taber_balanced, CtError};
use crate::estimators::{BalancedPanel, EstimatorError, PanelData};
use crate::test_engine::{Direction, RearrangementTest, TestError};

pub type SimRng = ChaCha12Rng;

/// Domain-separation prefix of the seed hash. Changing it changes every
/// simulated number.
pub const SEED_DOMAIN: &[u8] = b"rearrange/replication/v1";

/// Periods simulated and discarded before the first observed period when
/// no closed-form stationary law is available.
pub const BURN_IN: usize = 100;

pub const MIN_REPLICATIONS: u64 = 100;

pub const SIM_HEADER: &str =
    "method,q,gamma,sigma,delta,innovation,alpha,rho,replications,reject_rate,mc_se,master_seed";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("need at least {MIN_REPLICATIONS} replications, got {0}")]
    TooFewReplications(u64),
    #[error(transparent)]
    Test(#[from] TestError),
    #[error(transparent)]
    ConleyTaber(#[from] CtError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Innovation {
    Gaussian,
    /// `(chi^2_2 - 2) / 2`: mean zero, unit variance, right skewed.
    CenteredChi2,
}

impl Innovation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Innovation::Gaussian => "gaussian",
            Innovation::CenteredChi2 => "centered_chi2",
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Innovation::Gaussian => rng.sample(StandardNormal),
            // chi^2_2 / 2 is a unit exponential.
            Innovation::CenteredChi2 => rng.sample::<f64, _>(Exp1) - 1.0,
        }
    }
}

impl fmt::Display for Innovation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Innovation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gaussian" | "normal" => Ok(Innovation::Gaussian),
            "centered_chi2" | "chi2" => Ok(Innovation::CenteredChi2),
            other => Err(format!("innovation must be gaussian or chi2, got '{other}'")),
        }
    }
}

/// `Y[t,k] = delta * post_t * treated_k + eta_t + zeta_k + U[t,k]`, with AR(1)
/// errors whose innovations are scaled by `sigma_treated` in the treated
/// cluster only.
#[derive(Debug, Clone, PartialEq)]
pub struct DgpConfig {
    pub q: usize,
    pub periods: usize,
    pub post_periods: usize,
    pub gamma: f64,
    pub sigma_treated: f64,
    pub delta: f64,
    pub innovation: Innovation,
    /// Time effects; empty means all zero.
    pub eta: Vec<f64>,
    /// Cluster effects, treated cluster last; empty means all zero.
    pub zeta: Vec<f64>,
}

impl DgpConfig {
    /// Ten periods, the last four treated, `gamma = 0.5`, homogeneous
    /// gaussian errors, no effect.
    pub fn new(q: usize) -> Self {
        DgpConfig {
            q,
            periods: 10,
            post_periods: 4,
            gamma: 0.5,
            sigma_treated: 1.0,
            delta: 0.0,
            innovation: Innovation::Gaussian,
            eta: Vec::new(),
            zeta: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if self.q < 2 {
            return bad(format!("q must be at least 2, got {}", self.q));
        }
        if !(self.post_periods > 0 && self.post_periods < self.periods) {
            return bad(format!(
                "post periods must lie in 1..{}, got {}",
                self.periods, self.post_periods
            ));
        }
        if !(self.gamma.abs() < 1.0) {
            return bad(format!("|gamma| must be below 1, got {}", self.gamma));
        }
        if !(self.sigma_treated >= 0.0 && self.sigma_treated.is_finite()) {
            return bad(format!("sigma must be nonnegative, got {}", self.sigma_treated));
        }
        if !self.delta.is_finite() {
            return bad("delta must be finite".into());
        }
        if !self.eta.is_empty() && self.eta.len() != self.periods {
            return bad(format!("eta needs {} entries", self.periods));
        }
        if !self.zeta.is_empty() && self.zeta.len() != self.q + 1 {
            return bad(format!("zeta needs {} entries", self.q + 1));
        }
        Ok(())
    }

    fn first_post(&self) -> usize {
        self.periods - self.post_periods
    }

    /// Standard deviation of a cluster's post-minus-pre mean under the
    /// stationary error law.
    pub fn estimate_scale(&self, treated: bool) -> f64 {
        let pre = self.first_post();
        let a: Vec<f64> = (0..self.periods)
            .map(|t| {
                if t < pre {
                    -1.0 / pre as f64
                } else {
                    1.0 / self.post_periods as f64
                }
            })
            .collect();
        let mut var = 0.0;
        for (i, ai) in a.iter().enumerate() {
            for (j, aj) in a.iter().enumerate() {
                var += ai * aj * self.gamma.powi((i as i32 - j as i32).abs());
            }
        }
        let s = if treated { self.sigma_treated } else { 1.0 };
        s * (var / (1.0 - self.gamma * self.gamma)).sqrt()
    }
}

/// Draws one cluster-by-period panel; the treated cluster is the last.
pub fn simulate_balanced<R: Rng + ?Sized>(cfg: &DgpConfig, rng: &mut R) -> BalancedPanel {
    let clusters = cfg.q + 1;
    let first_post = cfg.first_post();
    let mut values = Vec::with_capacity(clusters * cfg.periods);
    let stationary_sd = (1.0 - cfg.gamma * cfg.gamma).sqrt().recip();
    for k in 0..clusters {
        let treated = k == cfg.q;
        let scale = if treated { cfg.sigma_treated } else { 1.0 };
        let mut u = match cfg.innovation {
            Innovation::Gaussian => scale * stationary_sd * cfg.innovation.draw(rng),
            Innovation::CenteredChi2 => {
                let mut u = 0.0;
                for _ in 0..BURN_IN {
                    u = cfg.gamma * u + scale * cfg.innovation.draw(rng);
                }
                u
            }
        };
        for t in 0..cfg.periods {
            if t > 0 {
                u = cfg.gamma * u + scale * cfg.innovation.draw(rng);
            }
            let mut y = u;
            if treated && t >= first_post {
                y += cfg.delta;
            }
            if let Some(e) = cfg.eta.get(t) {
                y += e;
            }
            if let Some(z) = cfg.zeta.get(k) {
                y += z;
            }
            values.push(y);
        }
    }
    BalancedPanel::new(clusters, cfg.periods, first_post, cfg.q, values)
        .expect("validated config yields a valid panel")
}

/// Draws one panel in long form with integer times `0..periods`.
pub fn simulate_panel(cfg: &DgpConfig, seed: u64) -> Result<PanelData, SimError> {
    cfg.validate()?;
    let mut rng = replication_rng(seed, 0);
    Ok(simulate_balanced(cfg, &mut rng).to_panel_data())
}

/// Generator for replication `rep` under `master_seed`.
pub fn replication_rng(master_seed: u64, rep: u64) -> SimRng {
    let mut h = Sha256::new();
    h.update(SEED_DOMAIN);
    h.update(master_seed.to_le_bytes());
    h.update(rep.to_le_bytes());
    let seed: [u8; 32] = h.finalize().into();
    SimRng::from_seed(seed)
}

/// Runs `trial` for replications `0..reps` in parallel and sums the counts
/// it records into a vector of length `width`.
pub fn tally<F>(reps: u64, master_seed: u64, width: usize, trial: F) -> Result<Vec<u64>, SimError>
where
    F: Fn(&mut SimRng, &mut [u64]) -> Result<(), SimError> + Sync,
{
    (0..reps)
        .into_par_iter()
        .try_fold(
            || vec![0u64; width],
            |mut acc, i| {
                let mut rng = replication_rng(master_seed, i);
                trial(&mut rng, &mut acc)?;
                Ok(acc)
            },
        )
        .try_reduce(
            || vec![0u64; width],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                Ok(a)
            },
        )
}

/// Rejection frequency with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateEstimate {
    pub rejections: u64,
    pub replications: u64,
    pub rate: f64,
    pub mc_standard_error: f64,
}

impl RateEstimate {
    pub fn new(rejections: u64, replications: u64) -> Self {
        let r = rejections as f64 / replications as f64;
        RateEstimate {
            rejections,
            replications,
            rate: r,
            mc_standard_error: (r * (1.0 - r) / replications as f64).sqrt(),
        }
    }
}

/// Fraction of replications in which `trial` returns true.
pub fn estimate_rate<F>(reps: u64, master_seed: u64, trial: F) -> Result<RateEstimate, SimError>
where
    F: Fn(&mut SimRng) -> Result<bool, SimError> + Sync,
{
    let counts = tally(reps, master_seed, 1, |rng, acc| {
        acc[0] += u64::from(trial(rng)?);
        Ok(())
    })?;
    Ok(RateEstimate::new(counts[0], reps))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Rearrangement {
        alpha: f64,
        rho: f64,
        direction: Direction,
    },
    ConleyTaber {
        alpha: f64,
    },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Rearrangement { direction, .. } => match direction {
                Direction::Upper => "rearrangement",
                Direction::Lower => "rearrangement_lower",
                Direction::TwoSided => "rearrangement_two_sided",
            },
            Method::ConleyTaber { .. } => "conley_taber",
        }
    }

    pub fn alpha(&self) -> f64 {
        match self {
            Method::Rearrangement { alpha, .. } | Method::ConleyTaber { alpha } => *alpha,
        }
    }

    pub fn rho(&self) -> Option<f64> {
        match self {
            Method::Rearrangement { rho, .. } => Some(*rho),
            Method::ConleyTaber { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub method: Method,
    pub cfg: DgpConfig,
    pub replications: u64,
    pub rejections: u64,
    pub reject_rate: f64,
    pub mc_standard_error: f64,
    pub master_seed: u64,
}

impl SimResult {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{:.6},{:.6},{}",
            self.method.name(),
            self.cfg.q,
            self.cfg.gamma,
            self.cfg.sigma_treated,
            self.cfg.delta,
            self.cfg.innovation,
            self.method.alpha(),
            self.method.rho().map(|r| r.to_string()).unwrap_or_default(),
            self.replications,
            self.reject_rate,
            self.mc_standard_error,
            self.master_seed
        )
    }
}

pub fn results_to_csv(results: &[SimResult]) -> String {
    let mut out = String::from(SIM_HEADER);
    out.push('\n');
    for r in results {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

enum Prepared {
    Rearrangement(RearrangementTest),
    ConleyTaber(f64),
}

fn prepare(cfg: &DgpConfig, methods: &[Method]) -> Result<Vec<Prepared>, SimError> {
    methods
        .iter()
        .map(|m| match *m {
            Method::Rearrangement {
                alpha,
                rho,
                direction,
            } => Ok(Prepared::Rearrangement(RearrangementTest::new(
                alpha, rho, cfg.q, direction,
            )?)),
            Method::ConleyTaber { alpha } => {
                if !(alpha > 0.0 && alpha < 1.0) {
                    return Err(CtError::InvalidAlpha(alpha).into());
                }
                Ok(Prepared::ConleyTaber(alpha))
            }
        })
        .collect()
}

/// Evaluates every method on the same `reps` panels drawn from `cfg`.
pub fn simulate_cell(
    cfg: &DgpConfig,
    methods: &[Method],
    reps: u64,
    master_seed: u64,
) -> Result<Vec<SimResult>, SimError> {
    cfg.validate()?;
    if reps < MIN_REPLICATIONS {
        return Err(SimError::TooFewReplications(reps));
    }
    let prepared = prepare(cfg, methods)?;
    let counts = tally(reps, master_seed, methods.len(), |rng, acc| {
        let panel = simulate_balanced(cfg, rng);
        let mut estimates = None;
        for (slot, p) in acc.iter_mut().zip(&prepared) {
            let reject = match p {
                Prepared::Rearrangement(test) => {
                    if estimates.is_none() {
                        estimates = Some(panel.cluster_estimates()?);
                    }
                    test.rejects(estimates.as_ref().expect("just computed"))
                }
                Prepared::ConleyTaber(alpha) => conley_taber_balanced(&panel, *alpha)?.reject,
            };
            *slot += u64::from(reject);
        }
        Ok(())
    })?;
    Ok(methods
        .iter()
        .zip(counts)
        .map(|(m, c)| {
            let est = RateEstimate::new(c, reps);
            SimResult {
                method: *m,
                cfg: cfg.clone(),
                replications: reps,
                rejections: c,
                reject_rate: est.rate,
                mc_standard_error: est.mc_standard_error,
                master_seed,
            }
        })
        .collect())
}

pub fn rejection_rate(
    cfg: &DgpConfig,
    method: Method,
    reps: u64,
    master_seed: u64,
) -> Result<SimResult, SimError> {
    Ok(simulate_cell(cfg, &[method], reps, master_seed)?.remove(0))
}

/// Cartesian grid of DGP parameters around a base configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SimGrid {
    pub base: DgpConfig,
    pub qs: Vec<usize>,
    pub gammas: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub deltas: Vec<f64>,
    pub innovations: Vec<Innovation>,
}

impl SimGrid {
    /// Singleton grid at `cfg`.
    pub fn single(cfg: DgpConfig) -> Self {
        SimGrid {
            qs: vec![cfg.q],
            gammas: vec![cfg.gamma],
            sigmas: vec![cfg.sigma_treated],
            deltas: vec![cfg.delta],
            innovations: vec![cfg.innovation],
            base: cfg,
        }
    }

    /// Configurations in canonical order: q, innovation, gamma, delta, then
    /// sigma varying fastest.
    pub fn cells(&self) -> Vec<DgpConfig> {
        let mut out = Vec::new();
        for &q in &self.qs {
            for &innovation in &self.innovations {
                for &gamma in &self.gammas {
                    for &delta in &self.deltas {
                        for &sigma in &self.sigmas {
                            let mut c = self.base.clone();
                            c.q = q;
                            c.innovation = innovation;
                            c.gamma = gamma;
                            c.delta = delta;
                            c.sigma_treated = sigma;
                            out.push(c);
                        }
                    }
                }
            }
        }
        out
    }

    /// Heterogeneity grid `1, 1.05, ..., 2.5`.
    pub fn sigma_grid() -> Vec<f64> {
        (0..=30).map(|i| 1.0 + 0.05 * i as f64).collect()
    }

    fn base_sweep(q: usize, gamma: f64, innovation: Innovation, deltas: Vec<f64>) -> Self {
        SimGrid {
            base: DgpConfig::new(q),
            qs: vec![q],
            gammas: vec![gamma],
            sigmas: Self::sigma_grid(),
            deltas,
            innovations: vec![innovation],
        }
    }

    /// Null rejection study: q = 50 normal, q = 15 normal, q = 50 centred
    /// chi-squared, all with gamma = 0.5.
    pub fn null_study() -> Vec<SimGrid> {
        vec![
            Self::base_sweep(50, 0.5, Innovation::Gaussian, vec![0.0]),
            Self::base_sweep(15, 0.5, Innovation::Gaussian, vec![0.0]),
            Self::base_sweep(50, 0.5, Innovation::CenteredChi2, vec![0.0]),
        ]
    }

    /// Power study at effects 2 and 3: the null-study models plus q = 50
    /// with gamma 0.1 and 0.9.
    pub fn power_study() -> Vec<SimGrid> {
        let d = vec![2.0, 3.0];
        vec![
            Self::base_sweep(50, 0.5, Innovation::Gaussian, d.clone()),
            Self::base_sweep(15, 0.5, Innovation::Gaussian, d.clone()),
            Self::base_sweep(50, 0.1, Innovation::Gaussian, d.clone()),
            Self::base_sweep(50, 0.9, Innovation::Gaussian, d.clone()),
            Self::base_sweep(50, 0.5, Innovation::CenteredChi2, d),
        ]
    }
}

/// One result per (cell, method), cells in grid order and methods in the
/// order given.
pub fn run_grid(
    grids: &[SimGrid],
    methods: &[Method],
    reps: u64,
    master_seed: u64,
) -> Result<Vec<SimResult>, SimError> {
    if grids.is_empty() || methods.is_empty() {
        return Err(SimError::InvalidConfig("empty grid or method list".into()));
    }
    let cells: Vec<DgpConfig> = grids.iter().flat_map(SimGrid::cells).collect();
    if cells.is_empty() {
        return Err(SimError::InvalidConfig("grid has no cells".into()));
    }
    for cell in &cells {
        cell.validate()?;
        prepare(cell, methods)?;
    }
    let mut out = Vec::with_capacity(cells.len() * methods.len());
    for cell in &cells {
        out.extend(simulate_cell(cell, methods, reps, master_seed)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v)
    }

    fn draws(cfg: &DgpConfig, reps: u64) -> Vec<BalancedPanel> {
        (0..reps)
            .map(|i| simulate_balanced(cfg, &mut replication_rng(3, i)))
            .collect()
    }

    #[test]
    fn white_noise_outcomes() {
        let mut cfg = DgpConfig::new(9);
        cfg.gamma = 0.0;
        let xs: Vec<f64> = draws(&cfg, 1_000)
            .iter()
            .flat_map(|p| p.values().to_vec())
            .collect();
        assert!(xs.len() >= 100_000);
        let (m, v) = moments(&xs);
        assert!(m.abs() < 0.02);
        assert!((v - 1.0).abs() < 0.02, "variance {v}");
    }

    #[test]
    fn ar1_stationary_variance() {
        let cfg = DgpConfig::new(9);
        for t in [0, 9] {
            let xs: Vec<f64> = draws(&cfg, 10_000)
                .iter()
                .flat_map(|p| (0..10).map(move |k| p.series(k)[t]).collect::<Vec<_>>())
                .collect();
            let (_, v) = moments(&xs);
            assert!((v - 4.0 / 3.0).abs() < 0.03 * 4.0 / 3.0, "t = {t}: {v}");
        }
    }

    #[test]
    fn chi2_innovation_moments() {
        let mut rng = replication_rng(5, 0);
        let xs: Vec<f64> = (0..200_000).map(|_| Innovation::CenteredChi2.draw(&mut rng)).collect();
        let (m, v) = moments(&xs);
        let se = (1.0 / xs.len() as f64).sqrt();
        assert!(m.abs() < 3.0 * se);
        assert!((v - 1.0).abs() < 0.02);
        let skew = xs.iter().map(|x| (x - m).powi(3)).sum::<f64>() / xs.len() as f64 / v.powf(1.5);
        assert!(skew > 1.5, "skewness {skew}");
    }

    #[test]
    fn estimate_scale_matches_simulation() {
        let mut cfg = DgpConfig::new(9);
        cfg.sigma_treated = 2.0;
        let panels = draws(&cfg, 20_000);
        let treated: Vec<f64> = panels.iter().map(|p| p.mean_shift(9)).collect();
        let control: Vec<f64> = panels.iter().map(|p| p.mean_shift(0)).collect();
        let (_, vt) = moments(&treated);
        let (_, vc) = moments(&control);
        assert!((vt.sqrt() / cfg.estimate_scale(true) - 1.0).abs() < 0.03);
        assert!((vc.sqrt() / cfg.estimate_scale(false) - 1.0).abs() < 0.03);
    }

    #[test]
    fn treatment_enters_treated_post_cells_only() {
        let mut cfg = DgpConfig::new(4);
        let a = simulate_balanced(&cfg, &mut replication_rng(1, 2));
        cfg.delta = 1.5;
        let b = simulate_balanced(&cfg, &mut replication_rng(1, 2));
        for k in 0..5 {
            for t in 0..10 {
                let d = b.series(k)[t] - a.series(k)[t];
                let want = if k == 4 && t >= 6 { 1.5 } else { 0.0 };
                assert!((d - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn seeds_are_stable_and_distinct() {
        let x: f64 = replication_rng(7, 0).sample(StandardNormal);
        let y: f64 = replication_rng(7, 0).sample(StandardNormal);
        let z: f64 = replication_rng(7, 1).sample(StandardNormal);
        assert_eq!(x, y);
        assert_ne!(x, z);
    }

    #[test]
    fn config_validation() {
        let mut cfg = DgpConfig::new(10);
        cfg.gamma = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = DgpConfig::new(10);
        cfg.post_periods = 10;
        assert!(cfg.validate().is_err());
        assert!(DgpConfig::new(1).validate().is_err());
        let m = Method::ConleyTaber { alpha: 0.05 };
        assert!(matches!(
            rejection_rate(&DgpConfig::new(10), m, 10, 1),
            Err(SimError::TooFewReplications(10))
        ));
    }

    #[test]
    fn infeasible_method_fails_before_simulating() {
        let m = Method::Rearrangement {
            alpha: 0.05,
            rho: 2.0,
            direction: Direction::Upper,
        };
        assert!(matches!(
            rejection_rate(&DgpConfig::new(10), m, 1_000, 1),
            Err(SimError::Test(TestError::Infeasible { .. }))
        ));
    }

    #[test]
    fn grid_presets_have_expected_shape() {
        assert_eq!(SimGrid::sigma_grid().len(), 31);
        let cells: usize = SimGrid::null_study().iter().map(|g| g.cells().len()).sum();
        assert_eq!(cells, 93);
        let cells: usize = SimGrid::power_study().iter().map(|g| g.cells().len()).sum();
        assert_eq!(cells, 310);
    }
}
