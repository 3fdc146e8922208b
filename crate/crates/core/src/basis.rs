//! Basis expansions `B(x) = (B_1(x), ..., B_K(x))` balanced by the solver.
//!
//! Column order is fixed: the intercept (if requested), then the
//! per-dimension terms for `x1`, `x2`, ... in index order, then product
//! terms in lexicographic order of their index tuples.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Threshold below which the smallest Gram eigenvalue is flagged degenerate.
pub const DEGENERATE_EIGENVALUE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BasisKind {
    /// `x_1, ..., x_d`.
    Raw,
    /// `x_i, x_i^2, ..., x_i^degree` for every dimension, no cross terms.
    Polynomial { degree: u32 },
    /// `x_i` followed by hinges `(x_i - knot)_+` for every knot of dimension `i`.
    /// A single knot list is shared by all dimensions.
    Spline { knots: Vec<Vec<f64>> },
    /// `x_i`, then products of `2..=order` distinct covariates.
    Interactions { order: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub kind: BasisKind,
    #[serde(default)]
    pub include_intercept: bool,
}

impl BasisSpec {
    pub fn raw() -> Self {
        Self { kind: BasisKind::Raw, include_intercept: false }
    }

    pub fn polynomial(degree: u32) -> Self {
        Self { kind: BasisKind::Polynomial { degree }, include_intercept: false }
    }

    pub fn interactions(order: u32) -> Self {
        Self { kind: BasisKind::Interactions { order }, include_intercept: false }
    }

    pub fn spline(knots: Vec<Vec<f64>>) -> Self {
        Self { kind: BasisKind::Spline { knots }, include_intercept: false }
    }

    pub fn with_intercept(mut self) -> Self {
        self.include_intercept = true;
        self
    }

    /// Checks the spec against covariate dimension `d` and returns `K`.
    pub fn validate(&self, d: usize) -> Result<usize> {
        if d == 0 {
            return Err(Error::InvalidArgument("basis needs at least one covariate".into()));
        }
        let per_dim = match &self.kind {
            BasisKind::Raw => d,
            BasisKind::Polynomial { degree } => {
                if *degree < 1 {
                    return Err(Error::InvalidArgument("polynomial degree must be >= 1".into()));
                }
                d * *degree as usize
            }
            BasisKind::Spline { knots } => {
                if knots.len() != 1 && knots.len() != d {
                    return Err(Error::InvalidArgument(format!(
                        "spline needs 1 or {d} knot lists, got {}",
                        knots.len()
                    )));
                }
                for list in knots {
                    if list.iter().any(|k| !k.is_finite()) || list.windows(2).any(|w| w[0] >= w[1]) {
                        return Err(Error::InvalidArgument("knots must be finite and strictly increasing".into()));
                    }
                }
                (0..d).map(|i| 1 + self.knots_for(i).len()).sum()
            }
            BasisKind::Interactions { order } => {
                if *order < 1 {
                    return Err(Error::InvalidArgument("interaction order must be >= 1".into()));
                }
                (1..=(*order as usize).min(d)).map(|r| binomial(d, r)).sum()
            }
        };
        Ok(per_dim + usize::from(self.include_intercept))
    }

    fn knots_for(&self, dim: usize) -> &[f64] {
        match &self.kind {
            BasisKind::Spline { knots } if knots.len() == 1 => &knots[0],
            BasisKind::Spline { knots } => &knots[dim],
            _ => &[],
        }
    }

    /// Column labels for covariate names `names`.
    pub fn column_names(&self, names: &[String]) -> Vec<String> {
        let d = names.len();
        let mut out = Vec::new();
        if self.include_intercept {
            out.push("1".to_string());
        }
        match &self.kind {
            BasisKind::Raw => out.extend(names.iter().cloned()),
            BasisKind::Polynomial { degree } => {
                for name in names {
                    out.push(name.clone());
                    for p in 2..=*degree {
                        out.push(format!("{name}^{p}"));
                    }
                }
            }
            BasisKind::Spline { .. } => {
                for (i, name) in names.iter().enumerate() {
                    out.push(name.clone());
                    for k in self.knots_for(i) {
                        out.push(format!("({name}-{k})+"));
                    }
                }
            }
            BasisKind::Interactions { order } => {
                out.extend(names.iter().cloned());
                for r in 2..=(*order as usize).min(d) {
                    for combo in combinations(d, r) {
                        let label: Vec<&str> = combo.iter().map(|&i| names[i].as_str()).collect();
                        out.push(label.join("*"));
                    }
                }
            }
        }
        out
    }

    /// Evaluates `B(x)` for a single covariate vector.
    pub fn eval(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        if self.include_intercept {
            out.push(1.0);
        }
        match &self.kind {
            BasisKind::Raw => out.extend_from_slice(x),
            BasisKind::Polynomial { degree } => {
                for &v in x {
                    let mut p = v;
                    out.push(p);
                    for _ in 2..=*degree {
                        p *= v;
                        out.push(p);
                    }
                }
            }
            BasisKind::Spline { .. } => {
                for (i, &v) in x.iter().enumerate() {
                    out.push(v);
                    for &k in self.knots_for(i) {
                        out.push((v - k).max(0.0));
                    }
                }
            }
            BasisKind::Interactions { order } => {
                out.extend_from_slice(x);
                for r in 2..=(*order as usize).min(x.len()) {
                    for combo in combinations(x.len(), r) {
                        out.push(combo.iter().map(|&i| x[i]).product());
                    }
                }
            }
        }
    }
}

impl fmt::Display for BasisSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            BasisKind::Raw => write!(f, "raw")?,
            BasisKind::Polynomial { degree } => write!(f, "poly:{degree}")?,
            BasisKind::Interactions { order } => write!(f, "interact:{order}")?,
            BasisKind::Spline { knots } => {
                let lists: Vec<String> = knots
                    .iter()
                    .map(|l| l.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","))
                    .collect();
                write!(f, "spline:{}", lists.join(";"))?
            }
        }
        if self.include_intercept {
            write!(f, "+intercept")?;
        }
        Ok(())
    }
}

/// Parses `raw`, `poly:<degree>`, `interact:<order>` or
/// `spline:<k1,k2,...>[;<knots for dim 2>...]`, optionally suffixed with
/// `+intercept`.
impl FromStr for BasisSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (body, include_intercept) = match s.strip_suffix("+intercept") {
            Some(b) => (b, true),
            None => (s, false),
        };
        let bad = || Error::InvalidArgument(format!("unrecognized basis spec '{s}'"));
        let (name, arg) = match body.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (body, None),
        };
        let kind = match (name, arg) {
            ("raw", None) => BasisKind::Raw,
            ("poly" | "polynomial", Some(a)) => BasisKind::Polynomial { degree: a.parse().map_err(|_| bad())? },
            ("interact" | "interactions", Some(a)) => {
                BasisKind::Interactions { order: a.parse().map_err(|_| bad())? }
            }
            ("spline", Some(a)) => {
                let knots = a
                    .split(';')
                    .map(|list| list.split(',').map(|k| k.trim().parse::<f64>().map_err(|_| bad())).collect())
                    .collect::<Result<Vec<Vec<f64>>>>()?;
                BasisKind::Spline { knots }
            }
            _ => return Err(bad()),
        };
        Ok(Self { kind, include_intercept })
    }
}

fn binomial(n: usize, r: usize) -> usize {
    (0..r).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// All `r`-subsets of `0..n` in lexicographic order.
fn combinations(n: usize, r: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..r).collect();
    if r == 0 || r > n {
        return out;
    }
    loop {
        out.push(cur.clone());
        let mut i = r;
        while i > 0 && cur[i - 1] == n - r + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return out;
        }
        cur[i - 1] += 1;
        for j in i..r {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

/// Row-major `n x K` matrix of basis values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisMatrix {
    values: Vec<f64>,
    n: usize,
    k: usize,
    pub spec: Option<BasisSpec>,
    pub column_names: Vec<String>,
    /// Set when `K > n`; the expansion is still usable but the growth
    /// condition `K = o(n^{1/2})` is clearly violated.
    pub warnings: Vec<String>,
}

impl BasisMatrix {
    /// Wraps explicit rows, e.g. a hand-built design.
    pub fn from_rows(rows: &[Vec<f64>], column_names: Option<Vec<String>>) -> Result<Self> {
        let k = rows.first().map(|r| r.len()).unwrap_or(0);
        if k == 0 {
            return Err(Error::Dimension("basis needs at least one column".into()));
        }
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Dimension("ragged basis rows".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("basis values must be finite".into()));
        }
        let names = column_names.unwrap_or_else(|| (1..=k).map(|j| format!("b{j}")).collect());
        if names.len() != k {
            return Err(Error::Dimension("column name count differs from K".into()));
        }
        Ok(Self {
            values: rows.iter().flatten().copied().collect(),
            n: rows.len(),
            k,
            spec: None,
            column_names: names,
            warnings: Vec::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.k..(i + 1) * self.k]
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.values[i * self.k + k]
    }

    /// Mean of every column over the given rows.
    pub fn mean_over(&self, rows: &[usize]) -> Vec<f64> {
        let mut m = vec![0.0; self.k];
        for &i in rows {
            for (a, v) in m.iter_mut().zip(self.row(i)) {
                *a += v;
            }
        }
        let len = rows.len().max(1) as f64;
        m.iter_mut().for_each(|a| *a /= len);
        m
    }

    /// Population standard deviation of every column over all rows.
    pub fn column_sd(&self) -> Vec<f64> {
        let all: Vec<usize> = (0..self.n).collect();
        let mean = self.mean_over(&all);
        let mut ss = vec![0.0; self.k];
        for i in 0..self.n {
            for (k, v) in self.row(i).iter().enumerate() {
                ss[k] += (v - mean[k]).powi(2);
            }
        }
        ss.into_iter().map(|s| (s / self.n.max(1) as f64).sqrt()).collect()
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.k, &self.values)
    }
}

/// Expands every unit's covariates under `spec`.
pub fn expand(ds: &Dataset, spec: &BasisSpec) -> Result<BasisMatrix> {
    let k = spec.validate(ds.d())?;
    let mut values = Vec::with_capacity(ds.n() * k);
    let mut buf = Vec::with_capacity(k);
    for u in ds.units() {
        spec.eval(&u.x, &mut buf);
        debug_assert_eq!(buf.len(), k);
        values.extend_from_slice(&buf);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("basis expansion produced non-finite values".into()));
    }
    let mut warnings = Vec::new();
    if k > ds.n() {
        warnings.push(format!("K = {k} exceeds n = {}; growth condition K = o(n^(1/2)) violated", ds.n()));
    }
    Ok(BasisMatrix {
        values,
        n: ds.n(),
        k,
        spec: Some(spec.clone()),
        column_names: spec.column_names(ds.covariate_names()),
        warnings,
    })
}

/// Sample analogues of the basis regularity constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularityReport {
    pub n: usize,
    pub k: usize,
    /// `max_i ||B(X_i)||_2 / sqrt(K)`.
    pub sup_norm_over_sqrt_k: f64,
    /// Largest eigenvalue of `(1/n) sum_i B(X_i) B(X_i)^T`.
    pub gram_max_eigenvalue: f64,
    /// Smallest eigenvalue of the same matrix.
    pub gram_min_eigenvalue: f64,
    pub degenerate: bool,
    pub k_exceeds_n: bool,
}

pub fn check_regularity(bm: &BasisMatrix) -> RegularityReport {
    let (n, k) = (bm.n(), bm.k());
    let sup = (0..n)
        .map(|i| bm.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let b = bm.to_dmatrix();
    let gram = (b.transpose() * &b) / n.max(1) as f64;
    let eig = SymmetricEigen::new(gram).eigenvalues;
    let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    RegularityReport {
        n,
        k,
        sup_norm_over_sqrt_k: sup / (k as f64).sqrt(),
        gram_max_eigenvalue: max,
        gram_min_eigenvalue: min,
        degenerate: min <= DEGENERATE_EIGENVALUE,
        k_exceeds_n: k > n,
    }
}
