//! Difference-in-means estimators on matched samples and the plug-in
//! variance based on the efficient influence function.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::basis::BasisMatrix;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::simlab::DgpSpec;
use crate::solver::{Direction, MatchSolution};
use crate::weights::ImpliedWeights;

/// Ridge penalty added to the scaled normal equations when an arm's basis
/// regression is singular.
pub const RIDGE_PENALTY: f64 = 1e-8;

pub const ATT_CAVEAT: &str =
    "ATT is reported as a point estimate only; no plug-in variance is provided for the ATT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimand {
    Ate,
    Att,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub estimand: Estimand,
    pub point: f64,
    /// Estimated asymptotic variance of `sqrt(n) (mu_hat - mu)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance: Option<f64>,
    /// `variance / n`, the variance of the point estimate itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance_per_observation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci: Option<(f64, f64)>,
    pub confidence_level: f64,
    pub n_used: usize,
    pub ridge_fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caveat: Option<String>,
}

impl EstimateResult {
    pub fn std_error(&self) -> Option<f64> {
        self.variance_per_observation.map(f64::sqrt)
    }
}

fn check_pair(t2c: &MatchSolution, c2t: &MatchSolution) -> Result<()> {
    if t2c.direction != Direction::TreatedToControl || c2t.direction != Direction::ControlToTreated {
        return Err(Error::InvalidArgument("expected (treated_to_control, control_to_treated) solutions".into()));
    }
    Ok(())
}

/// Mean outcome of each source's matched targets, indexed by unit.
fn matched_means(ds: &Dataset, sol: &MatchSolution) -> Result<Vec<Option<f64>>> {
    let n = ds.n();
    let mut sum = vec![0.0; n];
    let mut cnt = vec![0usize; n];
    for p in &sol.pairs {
        if p.source >= n || p.target >= n {
            return Err(Error::IdMismatch(format!("pair {p:?} outside dataset")));
        }
        sum[p.source] += ds.units()[p.target].y;
        cnt[p.source] += 1;
    }
    Ok((0..n).map(|i| (cnt[i] > 0).then(|| sum[i] / cnt[i] as f64)).collect())
}

/// Each treated unit minus the mean of its matched controls, plus the mean
/// of each control's matched treated minus the control, averaged over `n`.
pub fn ate_matched(ds: &Dataset, t2c: &MatchSolution, c2t: &MatchSolution) -> Result<f64> {
    check_pair(t2c, c2t)?;
    let from_t = matched_means(ds, t2c)?;
    let from_c = matched_means(ds, c2t)?;
    let mut total = 0.0;
    for (i, u) in ds.units().iter().enumerate() {
        let (own, other) = if u.treated { (u.y, from_t[i]) } else { (u.y, from_c[i]) };
        let other = other.ok_or_else(|| Error::InvalidArgument(format!("unit {} has no matches", u.id)))?;
        total += if u.treated { own - other } else { other - own };
    }
    Ok(total / ds.n() as f64)
}

/// Weighted form: `(1/n) [sum_T (1 + w_T) Y - sum_C (1 + w_C) Y]`.
pub fn ate_weighted(ds: &Dataset, w: &ImpliedWeights) -> Result<f64> {
    if w.n() != ds.n() {
        return Err(Error::Dimension("weights and dataset differ in length".into()));
    }
    if !w.has_arm(true) || !w.has_arm(false) {
        return Err(Error::InvalidArgument("ATE weighting needs weights for both arms".into()));
    }
    let s: f64 = ds
        .units()
        .iter()
        .zip(w.weights())
        .map(|(u, wi)| if u.treated { (1.0 + wi) * u.y } else { -(1.0 + wi) * u.y })
        .sum();
    Ok(s / ds.n() as f64)
}

/// Mean over treated units of `Y_i` minus the mean of their matched controls.
pub fn att_matched(ds: &Dataset, t2c: &MatchSolution) -> Result<f64> {
    if t2c.direction != Direction::TreatedToControl {
        return Err(Error::InvalidArgument("ATT needs a treated_to_control solution".into()));
    }
    let means = matched_means(ds, t2c)?;
    let mut total = 0.0;
    let mut t = 0usize;
    for (i, u) in ds.units().iter().enumerate().filter(|(_, u)| u.treated) {
        let m = means[i].ok_or_else(|| Error::InvalidArgument(format!("unit {} has no matches", u.id)))?;
        total += u.y - m;
        t += 1;
    }
    if t == 0 {
        return Err(Error::EmptyArm("no treated units".into()));
    }
    Ok(total / t as f64)
}

/// Least-squares fit of `y` on the rows `idx` of `design`.
/// Returns coefficients and whether the ridge fallback was used.
fn fit_arm(design: &DMatrix<f64>, y: &[f64], idx: &[usize]) -> (DVector<f64>, bool) {
    let p = design.ncols();
    let x = DMatrix::from_fn(idx.len(), p, |r, c| design[(idx[r], c)]);
    let yv = DVector::from_iterator(idx.len(), idx.iter().map(|&i| y[i]));
    let m = idx.len().max(1) as f64;
    let gram = x.transpose() * &x / m;
    let rhs = x.transpose() * yv / m;
    let eig = SymmetricEigen::new(gram.clone()).eigenvalues;
    let max = eig.iter().copied().fold(0.0f64, f64::max);
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let well_posed = idx.len() >= p && max > 0.0 && min > max * 1e-12;
    if well_posed {
        if let Some(ch) = gram.clone().cholesky() {
            return (ch.solve(&rhs), false);
        }
    }
    let ridged = gram + DMatrix::identity(p, p) * RIDGE_PENALTY;
    let coef = ridged
        .clone()
        .cholesky()
        .map(|ch| ch.solve(&rhs))
        .unwrap_or_else(|| ridged.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(p)));
    (coef, true)
}

/// Plug-in estimate of the efficiency bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PluginVariance {
    pub variance: f64,
    pub ridge_fallback: bool,
}

/// Sample variance of the estimated influence function
/// `S_i = Z_i n w_i (Y_i - Y1(X_i)) - (1 - Z_i) n w_i (Y_i - Y0(X_i)) + Y1(X_i) - Y0(X_i) - mu_hat`,
/// where `n w_i = 1 + w_T/C(X_i)` stands in for the inverse propensity and
/// `Yz(x) = B(x)^T lambda_z` comes from per-arm least squares on the basis
/// (with an intercept appended unless a constant column is present).
pub fn variance_plugin(
    ds: &Dataset,
    t2c: &MatchSolution,
    c2t: &MatchSolution,
    bm: &BasisMatrix,
    w: &ImpliedWeights,
) -> Result<PluginVariance> {
    check_pair(t2c, c2t)?;
    let n = ds.n();
    if bm.n() != n || w.n() != n {
        return Err(Error::Dimension("basis, weights and dataset differ in length".into()));
    }
    let mu_hat = ate_weighted(ds, w)?;
    let has_constant = (0..bm.k()).any(|k| {
        let v = bm.get(0, k);
        v != 0.0 && (0..n).all(|i| bm.get(i, k) == v)
    });
    let extra = usize::from(!has_constant);
    let design = DMatrix::from_fn(n, bm.k() + extra, |i, c| if c < extra { 1.0 } else { bm.get(i, c - extra) });
    let y = ds.outcomes();
    let treated = ds.treated_indices();
    let control = ds.control_indices();
    let (l1, r1) = fit_arm(&design, &y, &treated);
    let (l0, r0) = fit_arm(&design, &y, &control);
    let fit1 = &design * l1;
    let fit0 = &design * l0;
    let s: Vec<f64> = (0..n)
        .map(|i| {
            let nw = 1.0 + w.weights()[i];
            let resid = if ds.units()[i].treated { nw * (y[i] - fit1[i]) } else { -nw * (y[i] - fit0[i]) };
            resid + fit1[i] - fit0[i] - mu_hat
        })
        .collect();
    let mean = s.iter().sum::<f64>() / n as f64;
    let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
    Ok(PluginVariance { variance: var, ridge_fallback: r1 || r0 })
}

/// Two-sided normal quantile `z_{alpha/2}` for a confidence level.
pub fn normal_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("confidence level {level} outside (0,1)")));
    }
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(std.inverse_cdf(0.5 + level / 2.0))
}

/// ATE with plug-in variance and normal confidence interval.
pub fn estimate_ate(
    ds: &Dataset,
    t2c: &MatchSolution,
    c2t: &MatchSolution,
    bm: &BasisMatrix,
    w: &ImpliedWeights,
    level: f64,
) -> Result<EstimateResult> {
    let z = normal_quantile(level)?;
    let point = ate_matched(ds, t2c, c2t)?;
    let pv = variance_plugin(ds, t2c, c2t, bm, w)?;
    let per_obs = pv.variance / ds.n() as f64;
    let half = z * per_obs.sqrt();
    Ok(EstimateResult {
        estimand: Estimand::Ate,
        point,
        variance: Some(pv.variance),
        variance_per_observation: Some(per_obs),
        ci: Some((point - half, point + half)),
        confidence_level: level,
        n_used: ds.n(),
        ridge_fallback: pv.ridge_fallback,
        caveat: None,
    })
}

/// ATT point estimate; variance fields are absent by contract.
pub fn estimate_att(ds: &Dataset, t2c: &MatchSolution, level: f64) -> Result<EstimateResult> {
    normal_quantile(level)?;
    Ok(EstimateResult {
        estimand: Estimand::Att,
        point: att_matched(ds, t2c)?,
        variance: None,
        variance_per_observation: None,
        ci: None,
        confidence_level: level,
        n_used: ds.n(),
        ridge_fallback: false,
        caveat: Some(ATT_CAVEAT.to_string()),
    })
}

/// Monte Carlo value with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McValue {
    pub value: f64,
    pub std_error: f64,
    pub draws: usize,
}

/// Monte Carlo integral of
/// `var(Y(1)|X)/pi(X) + var(Y(0)|X)/(1 - pi(X)) + (tau(X) - mu)^2`
/// over covariate draws; draw `i` uses its own stream of the seed.
pub fn oracle_efficiency_bound(dgp: &DgpSpec, draws: usize, seed: u64) -> Result<McValue> {
    if draws < 2 {
        return Err(Error::InvalidArgument("need at least two draws".into()));
    }
    let mu = dgp.true_ate();
    let mut x = vec![0.0; dgp.d()];
    let vals: Vec<f64> = (0..draws)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            dgp.draw_covariates(&mut rng, &mut x);
            let p = dgp.propensity(&x);
            let tau = dgp.outcome_mean(true, &x) - dgp.outcome_mean(false, &x);
            dgp.conditional_variance(true, &x) / p
                + dgp.conditional_variance(false, &x) / (1.0 - p)
                + (tau - mu).powi(2)
        })
        .collect();
    let mean = vals.iter().sum::<f64>() / draws as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
    Ok(McValue { value: mean, std_error: (var / draws as f64).sqrt(), draws })
}
