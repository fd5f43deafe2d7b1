//! Weights that make the size bound equal to the nominal level, the
//! persisted weight table and its on-disk cache.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::numerics::{find_smallest_root, Tolerance};
use crate::size_bound::{bound_unchecked, BoundError, Grade, TightnessGrade};

/// Spacing of the scan that brackets the smallest solution in `w`.
pub const WEIGHT_SCAN_STEP: f64 = 1e-3;
/// Width of the final bisection bracket around the weight.
pub const WEIGHT_ROOT_TOL: f64 = 1e-10;

/// Header line of the weight table file.
pub const TABLE_HEADER: &str = "alpha,rho,q,weight,grade";

/// Environment variable that overrides the weight cache location.
pub const CACHE_ENV: &str = "REARRANGE_CACHE";

/// Significance levels tabulated in the shipped table.
pub const DEFAULT_ALPHAS: [f64; 5] = [0.10, 0.05, 0.025, 0.01, 0.005];
/// Heterogeneity caps tabulated in the shipped table.
pub const DEFAULT_RHOS: [f64; 8] = [2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
/// Control-cluster counts tabulated in the shipped table.
pub const DEFAULT_QS: [u32; 9] = [10, 15, 20, 25, 30, 35, 40, 45, 49];

const DEFAULT_TABLE_CSV: &str = include_str!("../data/default_weights.csv");

#[derive(Debug, Error)]
pub enum WeightError {
    #[error("alpha must lie in (0, 0.5), got {0}")]
    InvalidAlpha(f64),
    #[error("rho must be positive and finite, got {0}")]
    InvalidRho(f64),
    #[error("q must be at least 3, got {0}")]
    InvalidQ(u32),
    #[error(transparent)]
    Bound(#[from] BoundError),
    #[error("weight table line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("weight table I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Index of one weight: significance level, heterogeneity cap, controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightSpec {
    pub alpha: f64,
    pub rho: f64,
    pub q: u32,
}

impl WeightSpec {
    pub fn new(alpha: f64, rho: f64, q: u32) -> Result<Self, WeightError> {
        if !(alpha > 0.0 && alpha < 0.5) {
            return Err(WeightError::InvalidAlpha(alpha));
        }
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(WeightError::InvalidRho(rho));
        }
        if q < 3 {
            return Err(WeightError::InvalidQ(q));
        }
        Ok(WeightSpec { alpha, rho, q })
    }

    fn key(&self) -> (u64, u64, u32) {
        (self.alpha.to_bits(), self.rho.to_bits(), self.q)
    }
}

/// `inf { w in (0,1) : xi_q(w, rho) <= alpha }`, regardless of tightness.
///
/// When the bound starts above `alpha` at `w = 0` this is the smallest
/// solution of `xi_q(w, rho) = alpha`. When the bound is already below
/// `alpha` at `w = 0` (very small `rho`) every weight controls size and the
/// result is the first weight the bisection can resolve. `None` when no
/// weight brings the bound down to `alpha`.
pub fn solve_weight(q: u32, alpha: f64, rho: f64) -> Result<Option<f64>, BoundError> {
    let xi = |w: f64| bound_unchecked(q, w, rho).map(|b| b.total - alpha);
    let at_zero = xi(0.0)?;
    if at_zero <= 0.0 {
        return Ok(Some(WEIGHT_ROOT_TOL));
    }
    // The root search takes a plain closure; remember the first failure.
    let failure = std::cell::RefCell::new(None);
    let f = |w: f64| match xi(w) {
        Ok(v) => v,
        Err(e) => {
            failure.borrow_mut().get_or_insert(e);
            f64::NAN
        }
    };
    let tol = Tolerance {
        abs_tol: WEIGHT_ROOT_TOL,
        rel_tol: 0.0,
        max_iter: 200,
    };
    let root = find_smallest_root(f, 0.0, 1.0 - WEIGHT_SCAN_STEP, WEIGHT_SCAN_STEP, tol)?;
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    Ok(root.map(|r| r.argmin_or_root))
}

/// One evaluated cell of the weight table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightRow {
    pub spec: WeightSpec,
    /// Present iff the grade is not infeasible.
    pub weight: Option<f64>,
    pub grade: TightnessGrade,
}

/// Solves and grades one cell.
pub fn evaluate(spec: WeightSpec) -> Result<WeightRow, WeightError> {
    let grade = match solve_weight(spec.q, spec.alpha, spec.rho)? {
        Some(w) => {
            let b = bound_unchecked(spec.q, w, spec.rho)?;
            let grade = TightnessGrade::from_slack(spec.alpha, b.slack());
            let weight = (grade.grade != Grade::Infeasible).then_some(w);
            return Ok(WeightRow { spec, weight, grade });
        }
        None => TightnessGrade::no_weight(),
    };
    Ok(WeightRow {
        spec,
        weight: None,
        grade,
    })
}

/// Recommended weight for a cell: the smallest solution of the bound
/// equation, or `None` when the cell is infeasible or not recommended.
pub fn weight(spec: WeightSpec) -> Result<Option<f64>, WeightError> {
    Ok(evaluate(spec)?.weight)
}

/// Rows of `(alpha, rho, q, weight, grade)` in canonical order: alpha
/// descending, then rho ascending, then q ascending.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightTable {
    pub rows: Vec<WeightRow>,
}

fn canonical_cmp(a: &WeightSpec, b: &WeightSpec) -> std::cmp::Ordering {
    b.alpha
        .total_cmp(&a.alpha)
        .then(a.rho.total_cmp(&b.rho))
        .then(a.q.cmp(&b.q))
}

/// Evaluates every `(alpha, rho, q)` combination.
pub fn generate_table(alphas: &[f64], rhos: &[f64], qs: &[u32]) -> Result<WeightTable, WeightError> {
    generate_table_with(alphas, rhos, qs, &WeightTable::default())
}

/// As [`generate_table`], copying rows already present in `known`.
pub fn generate_table_with(
    alphas: &[f64],
    rhos: &[f64],
    qs: &[u32],
    known: &WeightTable,
) -> Result<WeightTable, WeightError> {
    let mut specs = Vec::with_capacity(alphas.len() * rhos.len() * qs.len());
    for &alpha in alphas {
        for &rho in rhos {
            for &q in qs {
                specs.push(WeightSpec::new(alpha, rho, q)?);
            }
        }
    }
    specs.sort_by(canonical_cmp);
    specs.dedup_by(|a, b| a.key() == b.key());
    let rows = specs
        .into_par_iter()
        .map(|spec| match known.get(&spec) {
            Some(row) => Ok(*row),
            None => evaluate(spec),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(WeightTable { rows })
}

impl WeightTable {
    /// The table shipped with the crate.
    pub fn builtin() -> WeightTable {
        WeightTable::parse(DEFAULT_TABLE_CSV).expect("shipped weight table is well formed")
    }

    pub fn get(&self, spec: &WeightSpec) -> Option<&WeightRow> {
        self.rows.iter().find(|r| r.spec.key() == spec.key())
    }

    /// Inserts or replaces a row, keeping canonical order.
    pub fn upsert(&mut self, row: WeightRow) {
        match self
            .rows
            .binary_search_by(|probe| canonical_cmp(&probe.spec, &row.spec))
        {
            Ok(i) => self.rows[i] = row,
            Err(i) => self.rows.insert(i, row),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(32 * (self.rows.len() + 1));
        out.push_str(TABLE_HEADER);
        out.push('\n');
        for r in &self.rows {
            let weight = r.weight.map(|w| format!("{w:.6}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.spec.alpha, r.spec.rho, r.spec.q, weight, r.grade.grade
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<WeightTable, WeightError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == TABLE_HEADER => {}
            _ => {
                return Err(WeightError::Parse {
                    line: 1,
                    message: format!("expected header '{TABLE_HEADER}'"),
                })
            }
        }
        let mut by_key = BTreeMap::new();
        for (i, line) in lines {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| WeightError::Parse {
                line: line_no,
                message,
            };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 5 {
                return Err(bad(format!("expected 5 fields, found {}", fields.len())));
            }
            let alpha: f64 = fields[0].parse().map_err(|_| bad("bad alpha".into()))?;
            let rho: f64 = fields[1].parse().map_err(|_| bad("bad rho".into()))?;
            let q: u32 = fields[2].parse().map_err(|_| bad("bad q".into()))?;
            let weight = if fields[3].is_empty() {
                None
            } else {
                Some(fields[3].parse::<f64>().map_err(|_| bad("bad weight".into()))?)
            };
            let grade: Grade = fields[4].parse().map_err(bad)?;
            if weight.is_some() != (grade != Grade::Infeasible) {
                return Err(bad("weight must be present exactly when grade is feasible".into()));
            }
            if let Some(w) = weight {
                if !(w > 0.0 && w < 1.0) {
                    return Err(bad(format!("weight {w} outside (0, 1)")));
                }
            }
            let spec = WeightSpec::new(alpha, rho, q).map_err(|e| bad(e.to_string()))?;
            let row = WeightRow {
                spec,
                weight,
                grade: TightnessGrade { grade, slack: None },
            };
            by_key.insert(spec.key(), row);
        }
        let mut rows: Vec<WeightRow> = by_key.into_values().collect();
        rows.sort_by(|a, b| canonical_cmp(&a.spec, &b.spec));
        Ok(WeightTable { rows })
    }

    pub fn read(path: &Path) -> Result<WeightTable, WeightError> {
        WeightTable::parse(&fs::read_to_string(path)?)
    }

    /// Writes the table by replacing the whole file, so readers never see
    /// a partially written table.
    pub fn write(&self, path: &Path) -> Result<(), WeightError> {
        write_atomic(path, self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Weight for `spec`: the table entry when present, otherwise computed.
pub fn lookup(table: &WeightTable, spec: &WeightSpec) -> Result<Option<f64>, WeightError> {
    match table.get(spec) {
        Some(row) => Ok(row.weight),
        None => weight(*spec),
    }
}

/// Writes `bytes` to a temporary file next to `path` and renames it over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Location of the user weight cache: `$REARRANGE_CACHE` if set, otherwise
/// `$HOME/.cache/rearrange/weights.csv`.
pub fn default_cache_path() -> PathBuf {
    if let Some(p) = std::env::var_os(CACHE_ENV) {
        return PathBuf::from(p);
    }
    let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    home.join(".cache").join("rearrange").join("weights.csv")
}

/// Shipped table plus a user cache of weights computed on demand.
#[derive(Debug)]
pub struct WeightCache {
    path: PathBuf,
    builtin: WeightTable,
    user: WeightTable,
}

impl WeightCache {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, WeightError> {
        let path = path.into();
        let user = if path.exists() {
            WeightTable::read(&path)?
        } else {
            WeightTable::default()
        };
        Ok(WeightCache {
            path,
            builtin: WeightTable::builtin(),
            user,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Weight for `spec`, computing and persisting it on a miss.
    pub fn weight(&mut self, spec: &WeightSpec) -> Result<Option<f64>, WeightError> {
        if let Some(row) = self.builtin.get(spec).or_else(|| self.user.get(spec)) {
            return Ok(row.weight);
        }
        let row = evaluate(*spec)?;
        // Another process may have extended the cache since we loaded it.
        if self.path.exists() {
            if let Ok(current) = WeightTable::read(&self.path) {
                for r in current.rows {
                    if self.user.get(&r.spec).is_none() {
                        self.user.upsert(r);
                    }
                }
            }
        }
        self.user.upsert(row);
        self.user.write(&self.path)?;
        Ok(row.weight)
    }
}
