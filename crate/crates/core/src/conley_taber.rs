//! Placebo-quantile comparison test for a single treated cluster.
//!
//! The treatment coefficient from a two-way fixed-effects regression is
//! compared with the distribution of placebo coefficients obtained by
//! regressing each control cluster's residuals on a constant and the post
//! indicator.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::estimators::{BalancedPanel, PanelData};

#[derive(Debug, Error)]
pub enum CtError {
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("fixed-effects design is rank deficient: {0}")]
    RankDeficient(String),
    #[error("within transformation did not converge after {0} sweeps")]
    NotConverged(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtResult {
    pub delta_hat: f64,
    /// One per control cluster, in sorted cluster order.
    pub placebo_coefficients: Vec<f64>,
    pub critical_value: f64,
    pub reject: bool,
    pub alpha: f64,
}

const DEMEAN_TOL: f64 = 1e-10;
const DEMEAN_MAX_SWEEPS: usize = 10_000;

/// Observations indexed by cluster and time.
struct Indexed {
    cluster: Vec<usize>,
    time: Vec<usize>,
    post: Vec<bool>,
    y: Vec<f64>,
    n_clusters: usize,
    n_times: usize,
    treated: usize,
}

impl Indexed {
    fn from_panel(panel: &PanelData) -> Self {
        let groups = panel.by_cluster();
        let cluster_ix: BTreeMap<&str, usize> =
            groups.keys().enumerate().map(|(i, c)| (*c, i)).collect();
        let mut times: Vec<i64> = panel.rows().iter().map(|r| r.time).collect();
        times.sort_unstable();
        times.dedup();
        let time_ix: BTreeMap<i64, usize> = times.iter().enumerate().map(|(i, t)| (*t, i)).collect();
        let rows = panel.rows();
        Indexed {
            cluster: rows.iter().map(|r| cluster_ix[r.cluster.as_str()]).collect(),
            time: rows.iter().map(|r| time_ix[&r.time]).collect(),
            post: rows.iter().map(|r| r.time >= panel.first_post_time()).collect(),
            y: rows.iter().map(|r| r.outcome).collect(),
            n_clusters: cluster_ix.len(),
            n_times: times.len(),
            treated: cluster_ix[panel.treated_cluster()],
        }
    }

    fn from_balanced(panel: &BalancedPanel) -> Self {
        let (k, t) = (panel.clusters(), panel.periods());
        Indexed {
            cluster: (0..k * t).map(|i| i / t).collect(),
            time: (0..k * t).map(|i| i % t).collect(),
            post: (0..k * t).map(|i| i % t >= panel.first_post()).collect(),
            y: panel.values().to_vec(),
            n_clusters: k,
            n_times: t,
            treated: panel.treated(),
        }
    }

    /// Removes cluster and time means by alternating projections.
    fn demean(&self, v: &mut [f64]) -> Result<(), CtError> {
        let mut sums = vec![0.0; self.n_clusters.max(self.n_times)];
        let mut counts = vec![0usize; sums.len()];
        let scale = v.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        for _ in 0..DEMEAN_MAX_SWEEPS {
            let mut change = 0.0f64;
            for groups in [&self.cluster, &self.time] {
                sums.iter_mut().for_each(|s| *s = 0.0);
                counts.iter_mut().for_each(|c| *c = 0);
                for (g, x) in groups.iter().zip(v.iter()) {
                    sums[*g] += x;
                    counts[*g] += 1;
                }
                for (g, x) in groups.iter().zip(v.iter_mut()) {
                    let m = sums[*g] / counts[*g] as f64;
                    change = change.max(m.abs());
                    *x -= m;
                }
            }
            if change <= DEMEAN_TOL * scale {
                return Ok(());
            }
        }
        Err(CtError::NotConverged(DEMEAN_MAX_SWEEPS))
    }

    fn run(&self, alpha: f64) -> Result<CtResult, CtError> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(CtError::InvalidAlpha(alpha));
        }
        let mut d: Vec<f64> = self
            .cluster
            .iter()
            .zip(&self.post)
            .map(|(&k, &p)| if k == self.treated && p { 1.0 } else { 0.0 })
            .collect();
        let mut y = self.y.clone();
        self.demean(&mut d)?;
        self.demean(&mut y)?;
        let dd: f64 = d.iter().map(|x| x * x).sum();
        let treated_cells = d.len() as f64;
        if dd <= 1e-12 * treated_cells {
            return Err(CtError::RankDeficient(
                "treatment indicator is absorbed by the fixed effects".into(),
            ));
        }
        let delta_hat = d.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / dd;
        // Post-minus-pre mean of residuals, per cluster: the slope of a
        // regression on a constant and the post indicator.
        let mut acc = vec![[0.0f64; 4]; self.n_clusters];
        for i in 0..y.len() {
            let e = y[i] - delta_hat * d[i];
            let a = &mut acc[self.cluster[i]];
            if self.post[i] {
                a[2] += e;
                a[3] += 1.0;
            } else {
                a[0] += e;
                a[1] += 1.0;
            }
        }
        let placebo_coefficients: Vec<f64> = acc
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != self.treated)
            .map(|(_, a)| a[2] / a[3] - a[0] / a[1])
            .collect();
        let critical_value = upper_order_statistic(&placebo_coefficients, alpha);
        Ok(CtResult {
            delta_hat,
            reject: delta_hat > critical_value,
            placebo_coefficients,
            critical_value,
            alpha,
        })
    }
}

/// The `ceil((1 - alpha) q)`-th smallest value, clamped to `1..=q`.
pub fn upper_order_statistic(values: &[f64], alpha: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = sorted.len();
    let rank = (((1.0 - alpha) * q as f64) - 1e-9).ceil() as usize;
    sorted[rank.clamp(1, q) - 1]
}

pub fn conley_taber_test(panel: &PanelData, alpha: f64) -> Result<CtResult, CtError> {
    Indexed::from_panel(panel).run(alpha)
}

/// Same procedure on a balanced cluster-by-period panel.
pub fn conley_taber_balanced(panel: &BalancedPanel, alpha: f64) -> Result<CtResult, CtError> {
    Indexed::from_balanced(panel).run(alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn panel(values: Vec<f64>, clusters: usize) -> BalancedPanel {
        BalancedPanel::new(clusters, values.len() / clusters, 2, 0, values).unwrap()
    }

    #[test]
    fn order_statistic_convention() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(upper_order_statistic(&v, 0.05), 19.0);
        assert_eq!(upper_order_statistic(&v, 0.10), 18.0);
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(upper_order_statistic(&v, 0.1), 9.0);
        assert_eq!(upper_order_statistic(&v, 0.01), 10.0);
    }

    #[test]
    fn additive_model_is_fit_exactly() {
        // y = cluster effect + time effect + 2.5 on treated post cells.
        let (k, t) = (4, 4);
        let values: Vec<f64> = (0..k * t)
            .map(|i| {
                let (c, s) = (i / t, i % t);
                c as f64 * 1.3 + (s as f64).powi(2) + if c == 0 && s >= 2 { 2.5 } else { 0.0 }
            })
            .collect();
        let r = conley_taber_balanced(&panel(values, k), 0.05).unwrap();
        assert!((r.delta_hat - 2.5).abs() < 1e-9);
        assert!(r.placebo_coefficients.iter().all(|p| p.abs() < 1e-9));
    }

    #[test]
    fn general_and_balanced_paths_agree() {
        let values: Vec<f64> = (0..60).map(|i| ((i * 17 % 13) as f64 * 0.7).cos()).collect();
        let bp = BalancedPanel::new(6, 10, 6, 5, values).unwrap();
        let a = conley_taber_balanced(&bp, 0.1).unwrap();
        let b = conley_taber_test(&bp.to_panel_data(), 0.1).unwrap();
        assert!((a.delta_hat - b.delta_hat).abs() < 1e-10);
        for (x, y) in a.placebo_coefficients.iter().zip(&b.placebo_coefficients) {
            assert!((x - y).abs() < 1e-10);
        }
        assert_eq!(a.reject, b.reject);
    }

    #[test]
    fn large_effect_rejects() {
        let values: Vec<f64> = (0..30)
            .map(|i| ((i * 7 % 5) as f64) + if i / 3 == 0 && i % 3 >= 2 { 100.0 } else { 0.0 })
            .collect();
        let bp = BalancedPanel::new(10, 3, 2, 0, values).unwrap();
        let r = conley_taber_balanced(&bp, 0.01).unwrap();
        assert!(r.placebo_coefficients.iter().all(|p| r.delta_hat > *p));
        assert!(r.reject);
        assert!(matches!(conley_taber_balanced(&bp, 0.0), Err(CtError::InvalidAlpha(_))));
    }
}
