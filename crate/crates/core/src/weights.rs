//! Implied weights of a matching and balance residuals in weighted form.
//!
//! A unit matched `c` times in a direction with multiplicity `M` carries
//! weight `c / M`; in the estimator it enters with `1/n + c/(nM)`. Units
//! sharing treatment and bitwise-identical covariates receive the mean
//! weight of their class, which leaves both the estimate and every balance
//! residual unchanged.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::basis::BasisMatrix;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::solver::{BalanceSpec, Direction, MatchSolution, STRICT_TOLERANCE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpliedWeights {
    treated: Vec<bool>,
    /// Times each unit was used as a match target.
    counts: Vec<u32>,
    /// Multiplicity of the direction in which the unit's arm is the target arm.
    multiplicity: Vec<Option<u32>>,
    raw: Vec<f64>,
    averaged: Vec<f64>,
}

impl ImpliedWeights {
    pub fn n(&self) -> usize {
        self.treated.len()
    }

    pub fn treated(&self) -> &[bool] {
        &self.treated
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn multiplicity(&self, i: usize) -> Option<u32> {
        self.multiplicity[i]
    }

    /// `count / M` before tie-averaging.
    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    /// Final weights `w_T`/`w_C` after tie-averaging.
    pub fn weights(&self) -> &[f64] {
        &self.averaged
    }

    /// `1/n + w/n`, the per-unit weight of the estimator.
    pub fn estimator_form(&self) -> Vec<f64> {
        let n = self.n() as f64;
        self.averaged.iter().map(|w| (1.0 + w) / n).collect()
    }

    /// Same weights with tie-averaging undone.
    pub fn before_averaging(&self) -> Self {
        Self { averaged: self.raw.clone(), ..self.clone() }
    }

    /// Whether weights are present for the arm of `treated`.
    pub fn has_arm(&self, treated: bool) -> bool {
        (0..self.n()).any(|i| self.treated[i] == treated && self.multiplicity[i].is_some())
    }
}

/// Derives implied weights from one or two (opposite-direction) solutions.
pub fn implied_weights(sols: &[&MatchSolution], ds: &Dataset) -> Result<ImpliedWeights> {
    if sols.is_empty() || sols.len() > 2 {
        return Err(Error::InvalidArgument("expected one or two solutions".into()));
    }
    if sols.len() == 2 && sols[0].direction == sols[1].direction {
        return Err(Error::InvalidArgument("two solutions must have opposite directions".into()));
    }
    let n = ds.n();
    let arms = ds.arms();
    let mut counts = vec![0u32; n];
    let mut multiplicity = vec![None; n];
    for sol in sols {
        sol.validate(&arms).map_err(|e| Error::IdMismatch(format!("solution does not fit dataset: {e}")))?;
        let target_arm = !sol.direction.source_is_treated();
        for i in 0..n {
            if arms[i] == target_arm {
                multiplicity[i] = Some(sol.m);
            }
        }
        for p in &sol.pairs {
            counts[p.target] += 1;
        }
    }
    let raw: Vec<f64> = (0..n)
        .map(|i| match multiplicity[i] {
            Some(m) => counts[i] as f64 / m as f64,
            None => 0.0,
        })
        .collect();

    let mut classes: HashMap<(bool, Vec<u64>), Vec<usize>> = HashMap::new();
    for (i, u) in ds.units().iter().enumerate() {
        let key = (u.treated, u.x.iter().map(|v| v.to_bits()).collect());
        classes.entry(key).or_default().push(i);
    }
    let mut averaged = raw.clone();
    for members in classes.values().filter(|m| m.len() > 1) {
        let mean = members.iter().map(|&i| raw[i]).sum::<f64>() / members.len() as f64;
        for &i in members {
            averaged[i] = mean;
        }
    }
    Ok(ImpliedWeights { treated: arms, counts, multiplicity, raw, averaged })
}

/// Residual imbalance of one direction in weighted form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionBalance {
    pub direction: Direction,
    /// `|mean_S B_k - (1/S) sum_targets w_j B_k(X_j)|` per basis column.
    pub residuals: Vec<f64>,
    /// Residuals divided by `delta_k` (0 for unconstrained columns).
    pub normalized: Vec<f64>,
    pub worst_column: Option<String>,
    pub worst_normalized: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub directions: Vec<DirectionBalance>,
    pub pass: bool,
}

pub fn check_balance(w: &ImpliedWeights, bm: &BasisMatrix, spec: &BalanceSpec) -> Result<BalanceReport> {
    if bm.n() != w.n() || spec.k() != bm.k() {
        return Err(Error::Dimension("weights, basis and tolerances disagree".into()));
    }
    let mut directions = Vec::new();
    for dir in [Direction::TreatedToControl, Direction::ControlToTreated] {
        let src = dir.source_is_treated();
        if !w.has_arm(!src) {
            continue;
        }
        let sources: Vec<usize> = (0..w.n()).filter(|&i| w.treated[i] == src).collect();
        let s = sources.len() as f64;
        let mut residuals = vec![0.0; bm.k()];
        for (k, r) in residuals.iter_mut().enumerate() {
            let src_sum: f64 = sources.iter().map(|&i| bm.get(i, k)).sum();
            let tgt_sum: f64 = (0..w.n()).filter(|&j| w.treated[j] != src).map(|j| w.averaged[j] * bm.get(j, k)).sum();
            *r = (src_sum - tgt_sum).abs() / s;
        }
        let normalized: Vec<f64> = residuals
            .iter()
            .zip(&spec.delta)
            .map(|(r, d)| if d.is_infinite() { 0.0 } else { r / d })
            .collect();
        let worst = normalized.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1));
        let pass = residuals.iter().zip(&spec.delta).all(|(r, d)| d.is_infinite() || *r < d - STRICT_TOLERANCE);
        directions.push(DirectionBalance {
            direction: dir,
            worst_column: worst.map(|(k, _)| bm.column_names[k].clone()),
            worst_normalized: worst.map_or(0.0, |(_, v)| *v),
            residuals,
            normalized,
            pass,
        });
    }
    let pass = directions.iter().all(|d| d.pass);
    Ok(BalanceReport { directions, pass })
}

/// Writes `id,z,weight_raw,weight_estimator_form` using the final weights.
pub fn write_weights<W: Write>(w: &ImpliedWeights, ds: &Dataset, writer: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["id", "z", "weight_raw", "weight_estimator_form"])?;
    let est = w.estimator_form();
    for (i, u) in ds.units().iter().enumerate() {
        out.write_record([
            u.id.clone(),
            if u.treated { "1" } else { "0" }.to_string(),
            w.averaged[i].to_string(),
            est[i].to_string(),
        ])?;
    }
    out.flush().map_err(|source| Error::Io { path: "<weights>".into(), source })?;
    Ok(())
}
