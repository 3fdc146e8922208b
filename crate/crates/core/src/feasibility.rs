//! Diagnostics for whether the balance program should admit a solution:
//! the box-probability constant `rho`, the implied sample-size bound, and a
//! propensity-overlap report.
//!
//! `rho` is the smallest probability that a control's basis vector falls in
//! one of the `3^K` axis-aligned boxes centred at
//! `E[B(X) | Z = 1] + (3/2) delta . b`, `b in {-1, 0, 1}^K`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{expand, BasisMatrix, BasisSpec};
use crate::error::{Error, Result};
use crate::simlab::DgpSpec;
use crate::solver::BalanceSpec;

/// Largest `K` whose `3^K` boxes are enumerated exactly.
pub const EXACT_BOX_LIMIT: usize = 12;

/// Number of boxes sampled when `K` exceeds [`EXACT_BOX_LIMIT`].
pub const SAMPLED_BOXES: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoReport {
    /// Minimum box probability (an estimate when computed from draws).
    pub rho: f64,
    /// Binomial standard error of the minimizing box's frequency.
    pub std_error: f64,
    /// Offsets `b` of the minimizing box.
    pub argmin: Vec<i8>,
    pub k: usize,
    /// Boxes evaluated and the total number of boxes.
    pub boxes_evaluated: usize,
    pub boxes_total: f64,
    /// Fraction of all boxes that were evaluated (1 for exact enumeration).
    pub box_coverage: f64,
    pub treated_mean: Vec<f64>,
    pub box_side: Vec<f64>,
    pub control_draws: usize,
    /// Some box received no control draws: `rho = 0` and the bound is vacuous.
    pub vacuous: bool,
}

/// Centre of box `b`: `mean + 1.5 * delta * b`.
pub fn box_center(treated_mean: &[f64], delta: &[f64], b: &[i8]) -> Vec<f64> {
    treated_mean.iter().zip(delta).zip(b).map(|((m, d), &s)| m + 1.5 * d * s as f64).collect()
}

/// Minimum over boxes of the fraction of `control_rows` inside the box
/// (closed, side `box_side_k` per axis).
pub fn rho_boxes(
    treated_mean: &[f64],
    control_rows: &[&[f64]],
    delta: &BalanceSpec,
    box_side: &[f64],
    seed: u64,
) -> Result<RhoReport> {
    let k = treated_mean.len();
    if k == 0 || delta.k() != k || box_side.len() != k {
        return Err(Error::Dimension("treated mean, tolerances and box sides must share K >= 1".into()));
    }
    if delta.delta.iter().chain(box_side).any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::InvalidArgument("box construction needs finite positive tolerances and sides".into()));
    }
    if control_rows.is_empty() {
        return Err(Error::EmptyArm("no control draws".into()));
    }
    if control_rows.iter().any(|r| r.len() != k) {
        return Err(Error::Dimension("control rows must have K entries".into()));
    }
    let half: Vec<f64> = box_side.iter().map(|s| s / 2.0).collect();
    // Per row and axis, which offsets in {-1, 0, 1} contain the coordinate (bit mask).
    let masks: Vec<Vec<u8>> = control_rows
        .iter()
        .map(|row| {
            (0..k)
                .map(|a| {
                    let mut m = 0u8;
                    for (bit, s) in [-1i8, 0, 1].into_iter().enumerate() {
                        let c = treated_mean[a] + 1.5 * delta.delta[a] * s as f64;
                        if (row[a] - c).abs() <= half[a] {
                            m |= 1 << bit;
                        }
                    }
                    m
                })
                .collect()
        })
        .collect();
    let total = 3f64.powi(k as i32);
    let offsets: Vec<Vec<i8>> = if k <= EXACT_BOX_LIMIT {
        (0..3usize.pow(k as u32))
            .map(|mut code| {
                (0..k)
                    .map(|_| {
                        let s = (code % 3) as i8 - 1;
                        code /= 3;
                        s
                    })
                    .collect()
            })
            .collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..SAMPLED_BOXES).map(|_| (0..k).map(|_| rng.gen_range(-1i8..=1)).collect()).collect()
    };
    let c = control_rows.len();
    let mut best: Option<(usize, usize)> = None;
    for (bi, b) in offsets.iter().enumerate() {
        let count = masks
            .iter()
            .filter(|m| m.iter().zip(b).all(|(mask, &s)| mask & (1 << (s + 1) as u8) != 0))
            .count();
        if best.is_none_or(|(_, bc)| count < bc) {
            best = Some((bi, count));
        }
    }
    let (bi, count) = best.expect("at least one box");
    let rho = count as f64 / c as f64;
    Ok(RhoReport {
        rho,
        std_error: (rho * (1.0 - rho) / c as f64).sqrt(),
        argmin: offsets[bi].clone(),
        k,
        boxes_evaluated: offsets.len(),
        boxes_total: total,
        box_coverage: (offsets.len() as f64 / total).min(1.0),
        treated_mean: treated_mean.to_vec(),
        box_side: box_side.to_vec(),
        control_draws: c,
        vacuous: count == 0,
    })
}

/// `rho` from an observed sample: treated-arm sample mean, control rows.
pub fn rho_from_sample(
    bm: &BasisMatrix,
    arms: &[bool],
    delta: &BalanceSpec,
    box_side: Option<&[f64]>,
    seed: u64,
) -> Result<RhoReport> {
    if arms.len() != bm.n() {
        return Err(Error::Dimension("arms and basis rows differ".into()));
    }
    let treated: Vec<usize> = (0..arms.len()).filter(|&i| arms[i]).collect();
    if treated.is_empty() {
        return Err(Error::EmptyArm("no treated units".into()));
    }
    let mean = bm.mean_over(&treated);
    let controls: Vec<&[f64]> = (0..arms.len()).filter(|&i| !arms[i]).map(|i| bm.row(i)).collect();
    let side = box_side.map(<[f64]>::to_vec).unwrap_or_else(|| delta.delta.clone());
    rho_boxes(&mean, &controls, delta, &side, seed)
}

/// `rho` from `draws` units simulated from a DGP.
pub fn rho_from_dgp(
    dgp: &DgpSpec,
    basis: &BasisSpec,
    delta: &BalanceSpec,
    box_side: Option<&[f64]>,
    draws: usize,
    seed: u64,
) -> Result<RhoReport> {
    let ds = crate::simlab::dgp_sample(dgp, draws, seed)?;
    let bm = expand(&ds, basis)?;
    rho_from_sample(&bm, &ds.arms(), delta, box_side, seed)
}

/// `ceil(log_{1 - rho}(delta0 * 2^{-K}))`.
pub fn sample_size_bound(rho: f64, delta0: f64, k: usize) -> Result<u64> {
    if rho <= 0.0 || rho >= 1.0 || rho.is_nan() {
        return Err(Error::NoFiniteBound(format!("rho = {rho} gives no finite bound")));
    }
    if !(delta0 > 0.0 && delta0 < 1.0) {
        return Err(Error::InvalidArgument(format!("delta0 = {delta0} outside (0,1)")));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    let target = delta0.ln() - k as f64 * std::f64::consts::LN_2;
    let bound = (target / (1.0 - rho).ln()).ceil();
    if !bound.is_finite() || bound > u64::MAX as f64 {
        return Err(Error::NoFiniteBound(format!("bound {bound} not representable")));
    }
    Ok(bound.max(1.0) as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    /// `min_i min(pi_i, 1 - pi_i)`.
    pub margin: f64,
    /// `c / (ln K + n K^{-r})`.
    pub threshold: f64,
    pub pass: bool,
    pub k: usize,
    pub n: usize,
    pub r_pi: f64,
    pub c_const: f64,
    pub note: String,
}

pub const OVERLAP_NOTE: &str =
    "heuristic: the rate constant is user-supplied, so this check is advisory and never gates the solver";

pub fn overlap_report(pi: &[f64], k: usize, n: usize, r_pi: f64, c_const: f64) -> Result<OverlapReport> {
    if pi.is_empty() {
        return Err(Error::InvalidArgument("no propensity values".into()));
    }
    if let Some(p) = pi.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::InvalidArgument(format!("propensity {p} outside (0,1)")));
    }
    if k == 0 || n == 0 {
        return Err(Error::InvalidArgument("K and n must be positive".into()));
    }
    if c_const < 0.0 || !c_const.is_finite() || !r_pi.is_finite() {
        return Err(Error::InvalidArgument("constant and rate must be finite, constant nonnegative".into()));
    }
    let margin = pi.iter().map(|p| p.min(1.0 - p)).fold(f64::INFINITY, f64::min);
    let kf = k as f64;
    let threshold = c_const / (kf.ln() + n as f64 * kf.powf(-r_pi));
    Ok(OverlapReport { margin, threshold, pass: margin >= threshold, k, n, r_pi, c_const, note: OVERLAP_NOTE.into() })
}

/// Logistic-regression propensity on the basis (plus intercept) fitted by
/// Newton iterations with a small ridge; predictions are clipped to
/// `[1e-6, 1 - 1e-6]`.
pub fn estimate_propensity(bm: &BasisMatrix, arms: &[bool]) -> Result<Vec<f64>> {
    use nalgebra::{DMatrix, DVector};
    let n = bm.n();
    if arms.len() != n {
        return Err(Error::Dimension("arms and basis rows differ".into()));
    }
    let p = bm.k() + 1;
    let x = DMatrix::from_fn(n, p, |i, c| if c == 0 { 1.0 } else { bm.get(i, c - 1) });
    let y = DVector::from_iterator(n, arms.iter().map(|&t| if t { 1.0 } else { 0.0 }));
    let mut beta = DVector::zeros(p);
    for _ in 0..50 {
        let eta = &x * &beta;
        let mu = eta.map(|e| 1.0 / (1.0 + (-e).exp()));
        let w = mu.map(|m| (m * (1.0 - m)).max(1e-10));
        let grad = x.transpose() * (&y - &mu) - &beta * 1e-6;
        let xw = DMatrix::from_fn(n, p, |i, c| x[(i, c)] * w[i]);
        let hess = x.transpose() * xw + DMatrix::identity(p, p) * 1e-6;
        let Some(step) = hess.lu().solve(&grad) else { break };
        beta += &step;
        if step.amax() < 1e-10 {
            break;
        }
    }
    Ok((0..n)
        .map(|i| {
            let e: f64 = (0..p).map(|c| x[(i, c)] * beta[c]).sum();
            (1.0 / (1.0 + (-e).exp())).clamp(1e-6, 1.0 - 1e-6)
        })
        .collect())
}

/// Combined diagnostics written under the key `"feasibility"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub rho: Option<RhoReport>,
    pub rho_value: f64,
    pub delta0: f64,
    pub k: usize,
    pub n_min: Option<u64>,
    pub n_actual: Option<usize>,
    /// `n_actual >= n_min` when both are known.
    pub sample_size_sufficient: Option<bool>,
    pub overlap: Option<OverlapReport>,
    pub vacuous: bool,
}

impl FeasibilityReport {
    pub fn new(rho: Option<RhoReport>, rho_value: f64, delta0: f64, k: usize, n_actual: Option<usize>) -> Self {
        let n_min = sample_size_bound(rho_value, delta0, k).ok();
        Self {
            vacuous: n_min.is_none(),
            sample_size_sufficient: n_min.zip(n_actual).map(|(b, n)| n as u64 >= b),
            rho,
            rho_value,
            delta0,
            k,
            n_min,
            n_actual,
            overlap: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bound_formula() {
        assert_eq!(sample_size_bound(0.5, 0.05, 2).unwrap(), 7);
        assert!(matches!(sample_size_bound(0.0, 0.05, 2), Err(Error::NoFiniteBound(_))));
        assert!(matches!(sample_size_bound(1.0, 0.05, 2), Err(Error::NoFiniteBound(_))));
        assert!(sample_size_bound(0.5, 1.0, 2).is_err());
    }

    #[test]
    fn bound_monotonicity() {
        let base = sample_size_bound(0.5, 0.05, 2).unwrap();
        assert!(sample_size_bound(0.999, 0.05, 2).unwrap() < base);
        assert!(sample_size_bound(0.5, 0.5, 2).unwrap() <= base);
        assert!(sample_size_bound(0.5, 0.05, 5).unwrap() > base);
    }

    #[test]
    fn one_dimensional_centers() {
        let c: Vec<f64> = [-1i8, 0, 1].iter().flat_map(|&b| box_center(&[2.0], &[0.1], &[b])).collect();
        for (got, want) in c.iter().zip([1.85, 2.0, 2.15]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_controls_give_side_over_width() {
        // Controls on an even grid over [0, 10]; boxes of side 0.3 around 5.
        let rows: Vec<Vec<f64>> = (0..100_000).map(|i| (i as f64 + 0.5) / 10_000.0).map(|v| vec![v]).collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let spec = BalanceSpec::uniform(1, 0.2).unwrap();
        let r = rho_boxes(&[5.0], &refs, &spec, &[0.3], 0).unwrap();
        assert!((r.rho - 0.03).abs() < 1e-4, "{}", r.rho);
        assert_eq!(r.boxes_evaluated, 3);
        assert!(!r.vacuous);
    }

    #[test]
    fn disjoint_support_is_vacuous() {
        let rows = [vec![10.0], vec![11.0]];
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let r = rho_boxes(&[0.0], &refs, &BalanceSpec::uniform(1, 0.1).unwrap(), &[0.1], 0).unwrap();
        assert_eq!(r.rho, 0.0);
        assert!(r.vacuous);
        let rep = FeasibilityReport::new(Some(r), 0.0, 0.05, 1, Some(2));
        assert!(rep.vacuous && rep.n_min.is_none());
    }

    #[test]
    fn rho_shrinks_with_side() {
        let rows: Vec<Vec<f64>> = (0..500).map(|i| vec![(i as f64 * 0.618).fract(), (i as f64 * 0.414).fract()]).collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let spec = BalanceSpec::uniform(2, 0.05).unwrap();
        let mut prev = f64::INFINITY;
        for side in [0.5, 0.3, 0.2, 0.1, 0.05] {
            let r = rho_boxes(&[0.5, 0.5], &refs, &spec, &[side, side], 0).unwrap();
            assert!(r.rho <= prev);
            prev = r.rho;
        }
    }

    #[test]
    fn overlap_examples() {
        let r = overlap_report(&[0.5; 10], 3, 10, 1.0, 1.0).unwrap();
        assert_eq!(r.margin, 0.5);
        assert!(r.pass);
        let r = overlap_report(&[0.5, 0.001], 4, 100, 2.0, 1.0).unwrap();
        assert!((r.threshold - 1.0 / (4f64.ln() + 100.0 / 16.0)).abs() < 1e-12);
        assert!((r.threshold - 0.130).abs() < 1e-3);
        assert!(!r.pass);
        let r = overlap_report(&[0.001], 4, 100, 2.0, 0.0).unwrap();
        assert!(r.pass);
        assert!(overlap_report(&[1.0], 4, 100, 2.0, 1.0).is_err());
    }

    #[test]
    fn propensity_fit_recovers_balanced_design() {
        let bm = BasisMatrix::from_rows(&(0..40).map(|i| vec![(i % 5) as f64]).collect::<Vec<_>>(), None).unwrap();
        let arms: Vec<bool> = (0..40).map(|i| i % 2 == 0).collect();
        let p = estimate_propensity(&bm, &arms).unwrap();
        assert!(p.iter().all(|v| (v - 0.5).abs() < 0.2));
    }
}
