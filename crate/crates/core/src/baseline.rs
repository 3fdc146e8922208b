//! Nearest-neighbour matching with replacement, kept as a comparator for
//! the balance-matching estimator.
//!
//! Each source unit is matched to its `M` closest opposite-arm units.
//! Distances are ranked by `(distance, target index)`, so exact ties go to
//! the unit that appears first in the dataset.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimator::ate_matched;
use crate::solver::{Direction, MatchPair, MatchSolution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Euclidean,
    /// Distance under the pooled within-arm sample covariance.
    Mahalanobis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NnSpec {
    pub metric: Metric,
    pub num_matches: u32,
}

impl Default for NnSpec {
    fn default() -> Self {
        Self { metric: Metric::Euclidean, num_matches: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnOutcome {
    pub solution: MatchSolution,
    pub metric_used: Metric,
    /// Why Mahalanobis fell back to Euclidean, if it did.
    pub fallback: Option<String>,
}

/// Pooled within-arm covariance `sum_arms sum_i (x_i - mean_arm)(x_i - mean_arm)^T / (n - 2)`.
fn pooled_covariance(ds: &Dataset) -> Option<DMatrix<f64>> {
    let d = ds.d();
    let n = ds.n();
    if n <= 2 {
        return None;
    }
    let mut cov = DMatrix::zeros(d, d);
    for idx in [ds.treated_indices(), ds.control_indices()] {
        if idx.is_empty() {
            continue;
        }
        let mut mean = DVector::zeros(d);
        for &i in &idx {
            mean += DVector::from_column_slice(&ds.units()[i].x);
        }
        mean /= idx.len() as f64;
        for &i in &idx {
            let r = DVector::from_column_slice(&ds.units()[i].x) - &mean;
            cov += &r * r.transpose();
        }
    }
    Some(cov / (n - 2) as f64)
}

/// Coordinates in which Euclidean distance equals the requested metric.
fn whitened(ds: &Dataset, metric: Metric) -> (Vec<Vec<f64>>, Metric, Option<String>) {
    let raw = || ds.units().iter().map(|u| u.x.clone()).collect::<Vec<_>>();
    if metric == Metric::Euclidean {
        return (raw(), Metric::Euclidean, None);
    }
    let Some(cov) = pooled_covariance(ds) else {
        return (raw(), Metric::Euclidean, Some("too few units for a pooled covariance".into()));
    };
    let max_diag = cov.diagonal().iter().copied().fold(0.0f64, f64::max);
    let chol = if max_diag > 0.0 { cov.cholesky() } else { None };
    let Some(chol) = chol.filter(|c| {
        let l = c.l();
        let dmin = l.diagonal().iter().map(|v| v * v).fold(f64::INFINITY, f64::min);
        dmin > 1e-12 * max_diag
    }) else {
        return (raw(), Metric::Euclidean, Some("pooled covariance is singular".into()));
    };
    let l = chol.l();
    let coords = ds
        .units()
        .iter()
        .map(|u| {
            let z = l.solve_lower_triangular(&DVector::from_column_slice(&u.x)).expect("nonsingular factor");
            z.iter().copied().collect()
        })
        .collect();
    (coords, Metric::Mahalanobis, None)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn nn_match(ds: &Dataset, spec: &NnSpec, dir: Direction) -> Result<NnOutcome> {
    if spec.num_matches == 0 {
        return Err(Error::InvalidArgument("number of matches must be at least 1".into()));
    }
    let (sources, targets) = dir.split(&ds.arms());
    if targets.is_empty() {
        return Err(Error::EmptyArm(format!("{} has no targets", dir.label())));
    }
    let m = spec.num_matches as usize;
    if m > targets.len() {
        return Err(Error::InvalidArgument(format!("M = {m} exceeds the {} available targets", targets.len())));
    }
    let (coords, metric_used, fallback) = whitened(ds, spec.metric);
    let mut pairs = Vec::with_capacity(sources.len() * m);
    let mut ranked: Vec<(f64, usize)> = Vec::with_capacity(targets.len());
    for &s in &sources {
        ranked.clear();
        ranked.extend(targets.iter().map(|&t| (sq_dist(&coords[s], &coords[t]), t)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if m < ranked.len() {
            ranked.select_nth_unstable_by(m - 1, cmp);
        }
        pairs.extend(ranked[..m].iter().map(|&(_, t)| MatchPair { source: s, target: t }));
    }
    pairs.sort();
    Ok(NnOutcome {
        solution: MatchSolution { m: spec.num_matches, pairs, direction: dir, with_replacement: true },
        metric_used,
        fallback,
    })
}

/// Matched difference-in-means with nearest-neighbour matches in both directions.
pub fn ate_nn(ds: &Dataset, spec: &NnSpec) -> Result<f64> {
    let t2c = nn_match(ds, spec, Direction::TreatedToControl)?;
    let c2t = nn_match(ds, spec, Direction::ControlToTreated)?;
    ate_matched(ds, &t2c.solution, &c2t.solution)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Unit;

    fn ds(rows: &[(bool, f64, Vec<f64>)]) -> Dataset {
        let units = rows
            .iter()
            .enumerate()
            .map(|(i, (t, y, x))| Unit { id: format!("u{i}"), treated: *t, y: *y, x: x.clone() })
            .collect();
        Dataset::new(units).unwrap()
    }

    #[test]
    fn nearest_control() {
        let d = ds(&[(true, 0.0, vec![1.0]), (false, 0.0, vec![0.9]), (false, 0.0, vec![3.0])]);
        let out = nn_match(&d, &NnSpec::default(), Direction::TreatedToControl).unwrap();
        assert_eq!(out.solution.pairs, vec![MatchPair { source: 0, target: 1 }]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let d = ds(&[(true, 0.0, vec![1.0]), (false, 0.0, vec![2.0]), (false, 0.0, vec![0.0])]);
        let out = nn_match(&d, &NnSpec::default(), Direction::TreatedToControl).unwrap();
        assert_eq!(out.solution.pairs[0].target, 1);
    }

    #[test]
    fn twins_give_zero_effect() {
        let d = ds(&[
            (true, 1.0, vec![0.1, 0.2]),
            (true, 4.0, vec![0.7, 0.3]),
            (false, 4.0, vec![0.7, 0.3]),
            (false, 1.0, vec![0.1, 0.2]),
        ]);
        assert_eq!(ate_nn(&d, &NnSpec::default()).unwrap(), 0.0);
        let maha = NnSpec { metric: Metric::Mahalanobis, num_matches: 1 };
        assert_eq!(ate_nn(&d, &maha).unwrap(), 0.0);
    }

    #[test]
    fn too_many_matches() {
        let d = ds(&[(true, 0.0, vec![1.0]), (false, 0.0, vec![0.9])]);
        let spec = NnSpec { metric: Metric::Euclidean, num_matches: 2 };
        assert!(nn_match(&d, &spec, Direction::TreatedToControl).is_err());
    }

    #[test]
    fn singular_covariance_falls_back() {
        // Second covariate is constant: the pooled covariance is singular.
        let d = ds(&[
            (true, 0.0, vec![0.0, 1.0]),
            (true, 0.0, vec![1.0, 1.0]),
            (false, 0.0, vec![0.2, 1.0]),
            (false, 0.0, vec![0.8, 1.0]),
        ]);
        let spec = NnSpec { metric: Metric::Mahalanobis, num_matches: 1 };
        let out = nn_match(&d, &spec, Direction::TreatedToControl).unwrap();
        assert_eq!(out.metric_used, Metric::Euclidean);
        assert!(out.fallback.is_some());
        out.solution.validate(&d.arms()).unwrap();
    }

    #[test]
    fn mahalanobis_rescales_axes() {
        // Second axis has large spread, so the control far along it is closer.
        let mut rows = vec![(true, 0.0, vec![0.0, 0.0])];
        rows.push((false, 0.0, vec![1.0, 0.0]));
        rows.push((false, 0.0, vec![0.0, 3.0]));
        for i in 0..6 {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            rows.push((i < 3, 0.0, vec![0.01 * s, 20.0 * s]));
        }
        let d = ds(&rows);
        let e = nn_match(&d, &NnSpec::default(), Direction::TreatedToControl).unwrap();
        let m = nn_match(&d, &NnSpec { metric: Metric::Mahalanobis, num_matches: 1 }, Direction::TreatedToControl).unwrap();
        assert_eq!(m.metric_used, Metric::Mahalanobis);
        assert_eq!(e.solution.targets_by_source(d.n())[0], vec![1]);
        assert_eq!(m.solution.targets_by_source(d.n())[0], vec![2]);
    }
}
