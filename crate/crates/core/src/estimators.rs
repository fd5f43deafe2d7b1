//! Cluster-level estimates from raw data.
//!
//! Each cluster is fit as its own least-squares regression, so slopes on
//! covariates are cluster specific. The coefficient of interest (the post
//! indicator for panels, the intercept for cross sections) becomes one entry
//! of an [`EstimateVector`].

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::test_engine::{EstimateVector, TestError};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("design is rank deficient; collinear columns: {}", .0.join(", "))]
    RankDeficient(Vec<String>),
    #[error("design has {rows} rows but {cols} columns")]
    TooFewRows { rows: usize, cols: usize },
    #[error("response has {found} entries, design has {expected} rows")]
    LengthMismatch { expected: usize, found: usize },
    #[error("treated cluster '{0}' does not appear in the data")]
    MissingTreated(String),
    #[error("cluster '{0}' has no pre-period observations")]
    NoPre(String),
    #[error("cluster '{0}' has no post-period observations")]
    NoPost(String),
    #[error("cluster '{cluster}': {message}")]
    Cluster { cluster: String, message: String },
    #[error("need at least 2 control clusters, got {0}")]
    TooFewClusters(usize),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Test(#[from] TestError),
}

/// Relative pivot size below which a column counts as collinear.
const RANK_TOL: f64 = 1e-10;

/// Least squares via Householder QR. Rank failures name the offending
/// columns as `x0`, `x1`, ...
pub fn ols(y: &[f64], design: &DMatrix<f64>) -> Result<Vec<f64>, EstimatorError> {
    let names: Vec<String> = (0..design.ncols()).map(|j| format!("x{j}")).collect();
    ols_named(y, design, &names)
}

/// As [`ols`], with caller-supplied column names for diagnostics.
pub fn ols_named(
    y: &[f64],
    design: &DMatrix<f64>,
    names: &[String],
) -> Result<Vec<f64>, EstimatorError> {
    let (n, p) = design.shape();
    if y.len() != n {
        return Err(EstimatorError::LengthMismatch {
            expected: n,
            found: y.len(),
        });
    }
    if n < p {
        return Err(EstimatorError::TooFewRows { rows: n, cols: p });
    }
    let qr = design.clone().qr();
    let r = qr.r();
    let scale = (0..p)
        .map(|j| design.column(j).norm())
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let collinear: Vec<String> = (0..p)
        .filter(|&j| r[(j, j)].abs() <= RANK_TOL * scale)
        .map(|j| names.get(j).cloned().unwrap_or_else(|| format!("x{j}")))
        .collect();
    if !collinear.is_empty() {
        return Err(EstimatorError::RankDeficient(collinear));
    }
    let qty = qr.q().transpose() * DVector::from_column_slice(y);
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| EstimatorError::RankDeficient(names.to_vec()))?;
    Ok(beta.iter().copied().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelRow {
    pub unit: String,
    pub cluster: String,
    pub time: i64,
    pub outcome: f64,
    pub covariates: Vec<f64>,
}

/// Panel observations with the treated cluster and the first post period.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    rows: Vec<PanelRow>,
    treated_cluster: String,
    first_post_time: i64,
}

impl PanelData {
    pub fn new(
        rows: Vec<PanelRow>,
        treated_cluster: impl Into<String>,
        first_post_time: i64,
    ) -> Result<Self, EstimatorError> {
        let treated_cluster = treated_cluster.into();
        let mut seen: BTreeMap<&str, (bool, bool, usize)> = BTreeMap::new();
        for row in &rows {
            let entry = seen
                .entry(row.cluster.as_str())
                .or_insert((false, false, row.covariates.len()));
            if row.time < first_post_time {
                entry.0 = true;
            } else {
                entry.1 = true;
            }
            if entry.2 != row.covariates.len() {
                return Err(EstimatorError::Cluster {
                    cluster: row.cluster.clone(),
                    message: "covariate count varies within the cluster".into(),
                });
            }
        }
        if !seen.contains_key(treated_cluster.as_str()) {
            return Err(EstimatorError::MissingTreated(treated_cluster));
        }
        for (cluster, (pre, post, _)) in &seen {
            if !pre {
                return Err(EstimatorError::NoPre(cluster.to_string()));
            }
            if !post {
                return Err(EstimatorError::NoPost(cluster.to_string()));
            }
        }
        if seen.len() < 3 {
            return Err(EstimatorError::TooFewClusters(seen.len().saturating_sub(1)));
        }
        Ok(PanelData {
            rows,
            treated_cluster,
            first_post_time,
        })
    }

    pub fn rows(&self) -> &[PanelRow] {
        &self.rows
    }

    pub fn treated_cluster(&self) -> &str {
        &self.treated_cluster
    }

    pub fn first_post_time(&self) -> i64 {
        self.first_post_time
    }

    /// Rows grouped by cluster, clusters in sorted id order.
    pub(crate) fn by_cluster(&self) -> BTreeMap<&str, Vec<&PanelRow>> {
        let mut groups: BTreeMap<&str, Vec<&PanelRow>> = BTreeMap::new();
        for row in &self.rows {
            groups.entry(row.cluster.as_str()).or_default().push(row);
        }
        groups
    }

    /// Parses `unit,cluster,time,outcome[,x1,...]`.
    pub fn parse_csv(
        text: &str,
        treated_cluster: &str,
        first_post_time: i64,
    ) -> Result<Self, EstimatorError> {
        let records = read_records(text, &["unit", "cluster", "time", "outcome"])?;
        let rows = records
            .into_iter()
            .map(|(line, fields)| {
                let time = fields[2].parse().map_err(|_| EstimatorError::Parse {
                    line,
                    message: format!("bad time '{}'", fields[2]),
                })?;
                Ok(PanelRow {
                    unit: fields[0].clone(),
                    cluster: fields[1].clone(),
                    time,
                    outcome: parse_real(&fields[3], line)?,
                    covariates: parse_reals(&fields[4..], line)?,
                })
            })
            .collect::<Result<Vec<_>, EstimatorError>>()?;
        PanelData::new(rows, treated_cluster, first_post_time)
    }

    pub fn read_csv(
        path: &Path,
        treated_cluster: &str,
        first_post_time: i64,
    ) -> Result<Self, EstimatorError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_csv(&text, treated_cluster, first_post_time)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossSectionRow {
    pub unit: String,
    pub cluster: String,
    pub outcome: f64,
    pub covariates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossSectionData {
    rows: Vec<CrossSectionRow>,
    treated_cluster: String,
}

impl CrossSectionData {
    pub fn new(
        rows: Vec<CrossSectionRow>,
        treated_cluster: impl Into<String>,
    ) -> Result<Self, EstimatorError> {
        let treated_cluster = treated_cluster.into();
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for row in &rows {
            let c = *counts.entry(row.cluster.as_str()).or_insert(row.covariates.len());
            if c != row.covariates.len() {
                return Err(EstimatorError::Cluster {
                    cluster: row.cluster.clone(),
                    message: "covariate count varies within the cluster".into(),
                });
            }
        }
        if !counts.contains_key(treated_cluster.as_str()) {
            return Err(EstimatorError::MissingTreated(treated_cluster));
        }
        if counts.len() < 3 {
            return Err(EstimatorError::TooFewClusters(counts.len().saturating_sub(1)));
        }
        Ok(CrossSectionData {
            rows,
            treated_cluster,
        })
    }

    pub fn rows(&self) -> &[CrossSectionRow] {
        &self.rows
    }

    pub fn treated_cluster(&self) -> &str {
        &self.treated_cluster
    }

    /// Parses `unit,cluster,outcome[,x1,...]`.
    pub fn parse_csv(text: &str, treated_cluster: &str) -> Result<Self, EstimatorError> {
        let records = read_records(text, &["unit", "cluster", "outcome"])?;
        let rows = records
            .into_iter()
            .map(|(line, fields)| {
                Ok(CrossSectionRow {
                    unit: fields[0].clone(),
                    cluster: fields[1].clone(),
                    outcome: parse_real(&fields[2], line)?,
                    covariates: parse_reals(&fields[3..], line)?,
                })
            })
            .collect::<Result<Vec<_>, EstimatorError>>()?;
        CrossSectionData::new(rows, treated_cluster)
    }

    pub fn read_csv(path: &Path, treated_cluster: &str) -> Result<Self, EstimatorError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_csv(&text, treated_cluster)
    }
}

fn read_records(
    text: &str,
    leading: &[&str],
) -> Result<Vec<(usize, Vec<String>)>, EstimatorError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    if header.len() < leading.len() || header.iter().zip(leading).any(|(h, want)| h != *want) {
        return Err(EstimatorError::Parse {
            line: 1,
            message: format!("header must start with '{}'", leading.join(",")),
        });
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        out.push((line, record.iter().map(str::to_string).collect()));
    }
    Ok(out)
}

fn parse_real(field: &str, line: usize) -> Result<f64, EstimatorError> {
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(EstimatorError::Parse {
            line,
            message: format!("bad number '{field}'"),
        }),
    }
}

fn parse_reals(fields: &[String], line: usize) -> Result<Vec<f64>, EstimatorError> {
    fields.iter().map(|f| parse_real(f, line)).collect()
}

/// One cluster's regression.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionFit {
    /// Post-indicator coefficient for panels, intercept for cross sections.
    pub target: f64,
    /// Remaining coefficients (covariates, plus the intercept for panels
    /// fit without unit effects).
    pub slope_coefficients: Vec<f64>,
    pub cluster: String,
    pub n_obs: usize,
}

fn covariate_names(k: usize) -> impl Iterator<Item = String> {
    (1..=k).map(|j| format!("x{j}"))
}

/// Within-cluster panel fit.
///
/// If some unit is observed at more than one time, unit fixed effects are
/// removed by demeaning within unit (for two periods this is first
/// differencing), and the demeaned outcome is regressed on the demeaned
/// post indicator and covariates. Otherwise the outcome is regressed on an
/// intercept, the post indicator and covariates.
fn fit_panel_cluster(
    cluster: &str,
    rows: &[&PanelRow],
    first_post: i64,
) -> Result<RegressionFit, EstimatorError> {
    let k = rows[0].covariates.len();
    let mut per_unit: HashMap<&str, usize> = HashMap::new();
    for r in rows {
        *per_unit.entry(r.unit.as_str()).or_default() += 1;
    }
    let unit_effects = per_unit.values().any(|&c| c > 1);
    let wrap = |e: EstimatorError| match e {
        EstimatorError::RankDeficient(_) | EstimatorError::TooFewRows { .. } => {
            EstimatorError::Cluster {
                cluster: cluster.to_string(),
                message: e.to_string(),
            }
        }
        other => other,
    };
    let post = |r: &PanelRow| if r.time >= first_post { 1.0 } else { 0.0 };
    if unit_effects {
        // Columns: post, covariates; all demeaned within unit.
        let mut sums: HashMap<&str, Vec<f64>> = HashMap::new();
        for r in rows {
            let s = sums.entry(r.unit.as_str()).or_insert_with(|| vec![0.0; k + 2]);
            s[0] += r.outcome;
            s[1] += post(r);
            for (j, x) in r.covariates.iter().enumerate() {
                s[j + 2] += x;
            }
        }
        let used: Vec<&&PanelRow> = rows
            .iter()
            .filter(|r| per_unit[r.unit.as_str()] > 1)
            .collect();
        let n = used.len();
        let mut y = Vec::with_capacity(n);
        let mut design = DMatrix::zeros(n, k + 1);
        for (i, r) in used.iter().enumerate() {
            let s = &sums[r.unit.as_str()];
            let m = per_unit[r.unit.as_str()] as f64;
            y.push(r.outcome - s[0] / m);
            design[(i, 0)] = post(r) - s[1] / m;
            for j in 0..k {
                design[(i, j + 1)] = r.covariates[j] - s[j + 2] / m;
            }
        }
        let names: Vec<String> = std::iter::once("post".to_string())
            .chain(covariate_names(k))
            .collect();
        let beta = ols_named(&y, &design, &names).map_err(wrap)?;
        Ok(RegressionFit {
            target: beta[0],
            slope_coefficients: beta[1..].to_vec(),
            cluster: cluster.to_string(),
            n_obs: n,
        })
    } else {
        let n = rows.len();
        let mut y = Vec::with_capacity(n);
        let mut design = DMatrix::zeros(n, k + 2);
        for (i, r) in rows.iter().enumerate() {
            y.push(r.outcome);
            design[(i, 0)] = 1.0;
            design[(i, 1)] = post(r);
            for j in 0..k {
                design[(i, j + 2)] = r.covariates[j];
            }
        }
        let names: Vec<String> = ["intercept".to_string(), "post".to_string()]
            .into_iter()
            .chain(covariate_names(k))
            .collect();
        let beta = ols_named(&y, &design, &names).map_err(wrap)?;
        let mut slopes = vec![beta[0]];
        slopes.extend_from_slice(&beta[2..]);
        Ok(RegressionFit {
            target: beta[1],
            slope_coefficients: slopes,
            cluster: cluster.to_string(),
            n_obs: n,
        })
    }
}

/// Per-cluster difference-in-differences fits, clusters in sorted id order.
pub fn did_cluster_fits(panel: &PanelData) -> Result<Vec<RegressionFit>, EstimatorError> {
    let groups: Vec<(&str, Vec<&PanelRow>)> = panel.by_cluster().into_iter().collect();
    groups
        .par_iter()
        .map(|(cluster, rows)| fit_panel_cluster(cluster, rows, panel.first_post_time))
        .collect()
}

/// Post-indicator coefficient of each cluster's regression, treated first.
pub fn did_cluster_estimates(panel: &PanelData) -> Result<EstimateVector, EstimatorError> {
    let fits = did_cluster_fits(panel)?;
    to_estimates(fits, &panel.treated_cluster)
}

/// Per-cluster intercept fits, clusters in sorted id order.
pub fn cluster_treatment_fits(data: &CrossSectionData) -> Result<Vec<RegressionFit>, EstimatorError> {
    let mut groups: BTreeMap<&str, Vec<&CrossSectionRow>> = BTreeMap::new();
    for row in &data.rows {
        groups.entry(row.cluster.as_str()).or_default().push(row);
    }
    let groups: Vec<_> = groups.into_iter().collect();
    groups
        .par_iter()
        .map(|(cluster, rows)| {
            let k = rows[0].covariates.len();
            let n = rows.len();
            let mut design = DMatrix::zeros(n, k + 1);
            let mut y = Vec::with_capacity(n);
            for (i, r) in rows.iter().enumerate() {
                y.push(r.outcome);
                design[(i, 0)] = 1.0;
                for j in 0..k {
                    design[(i, j + 1)] = r.covariates[j];
                }
            }
            let names: Vec<String> = std::iter::once("intercept".to_string())
                .chain(covariate_names(k))
                .collect();
            let beta = ols_named(&y, &design, &names).map_err(|e| EstimatorError::Cluster {
                cluster: cluster.to_string(),
                message: e.to_string(),
            })?;
            Ok(RegressionFit {
                target: beta[0],
                slope_coefficients: beta[1..].to_vec(),
                cluster: cluster.to_string(),
                n_obs: n,
            })
        })
        .collect()
}

/// Intercept of each cluster's regression, treated first.
pub fn cluster_treatment_estimates(data: &CrossSectionData) -> Result<EstimateVector, EstimatorError> {
    let fits = cluster_treatment_fits(data)?;
    to_estimates(fits, &data.treated_cluster)
}

fn to_estimates(fits: Vec<RegressionFit>, treated: &str) -> Result<EstimateVector, EstimatorError> {
    let mut treated_fit = None;
    let mut controls = Vec::with_capacity(fits.len());
    let mut labels = vec![treated.to_string()];
    for fit in fits {
        if fit.cluster == treated {
            treated_fit = Some(fit.target);
        } else {
            controls.push(fit.target);
            labels.push(fit.cluster);
        }
    }
    let treated_value =
        treated_fit.ok_or_else(|| EstimatorError::MissingTreated(treated.to_string()))?;
    Ok(EstimateVector::new(treated_value, controls)?.with_labels(labels)?)
}

/// Cluster-by-period outcomes on a common time grid, one value per cell.
///
/// Cheap to build and fit, so simulations use it instead of [`PanelData`].
#[derive(Debug, Clone, PartialEq)]
pub struct BalancedPanel {
    clusters: usize,
    periods: usize,
    first_post: usize,
    treated: usize,
    /// Row-major by cluster: `values[k * periods + t]`.
    values: Vec<f64>,
}

impl BalancedPanel {
    pub fn new(
        clusters: usize,
        periods: usize,
        first_post: usize,
        treated: usize,
        values: Vec<f64>,
    ) -> Result<Self, EstimatorError> {
        if clusters < 3 {
            return Err(EstimatorError::TooFewClusters(clusters.saturating_sub(1)));
        }
        if first_post == 0 || first_post >= periods {
            return Err(EstimatorError::Parse {
                line: 0,
                message: format!("first post period {first_post} outside 1..{periods}"),
            });
        }
        if treated >= clusters || values.len() != clusters * periods {
            return Err(EstimatorError::LengthMismatch {
                expected: clusters * periods,
                found: values.len(),
            });
        }
        Ok(BalancedPanel {
            clusters,
            periods,
            first_post,
            treated,
            values,
        })
    }

    pub fn clusters(&self) -> usize {
        self.clusters
    }

    pub fn periods(&self) -> usize {
        self.periods
    }

    pub fn first_post(&self) -> usize {
        self.first_post
    }

    pub fn treated(&self) -> usize {
        self.treated
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn series(&self, cluster: usize) -> &[f64] {
        &self.values[cluster * self.periods..(cluster + 1) * self.periods]
    }

    /// Post mean minus pre mean for one cluster, which is the post-indicator
    /// coefficient of a regression on a constant and the indicator.
    pub fn mean_shift(&self, cluster: usize) -> f64 {
        let s = self.series(cluster);
        let (pre, post) = s.split_at(self.first_post);
        post.iter().sum::<f64>() / post.len() as f64 - pre.iter().sum::<f64>() / pre.len() as f64
    }

    /// Same numbers as [`did_cluster_estimates`] on [`Self::to_panel_data`].
    pub fn cluster_estimates(&self) -> Result<EstimateVector, TestError> {
        let controls = (0..self.clusters)
            .filter(|&k| k != self.treated)
            .map(|k| self.mean_shift(k))
            .collect();
        EstimateVector::new(self.mean_shift(self.treated), controls)
    }

    /// Cluster id used by [`Self::to_panel_data`]; zero padded so sorted
    /// order matches index order.
    pub fn cluster_id(&self, k: usize) -> String {
        format!("c{k:04}")
    }

    /// Long-format panel with times `0..periods`, one unit per cluster.
    pub fn to_panel_data(&self) -> PanelData {
        let rows = (0..self.clusters)
            .flat_map(|k| {
                let id = self.cluster_id(k);
                (0..self.periods).map(move |t| (k, t, id.clone()))
            })
            .map(|(k, t, id)| PanelRow {
                unit: id.clone(),
                cluster: id,
                time: t as i64,
                outcome: self.values[k * self.periods + t],
                covariates: Vec::new(),
            })
            .collect();
        PanelData::new(rows, self.cluster_id(self.treated), self.first_post as i64)
            .expect("balanced panel is valid by construction")
    }
}
