//! Synthetic data-generating processes with known truth and the Monte Carlo
//! harness that measures bias, RMSE, spread and interval coverage.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{ate_nn, NnSpec};
use crate::basis::{expand, BasisSpec};
use crate::data::{Dataset, Unit};
use crate::error::{Error, Result};
use crate::estimator::estimate_ate;
use crate::solver::{solve_both_directions, BalanceSpec, MPolicy, SolverConfig};
use crate::weights::implied_weights;

/// Marginal law of one covariate; covariates are drawn independently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum CovariateLaw {
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, sd: f64 },
}

impl CovariateLaw {
    fn first_moment(&self) -> f64 {
        match *self {
            CovariateLaw::Uniform { low, high } => (low + high) / 2.0,
            CovariateLaw::Normal { mean, .. } => mean,
        }
    }

    fn second_moment(&self) -> f64 {
        match *self {
            CovariateLaw::Uniform { low, high } => (low * low + low * high + high * high) / 3.0,
            CovariateLaw::Normal { mean, sd } => mean * mean + sd * sd,
        }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            CovariateLaw::Uniform { low, high } => low + (high - low) * rng.gen::<f64>(),
            CovariateLaw::Normal { mean, sd } => mean + sd * rng.sample::<f64, _>(StandardNormal),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Propensity {
    Constant { p: f64 },
    /// `pi(x) = 1 / (1 + exp(-(intercept + coefficients . x)))`.
    Logistic { intercept: f64, coefficients: Vec<f64> },
}

/// `f(x) = intercept + sum_k linear_k x_k + sum_k quadratic_k x_k^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub intercept: f64,
    pub linear: Vec<f64>,
    pub quadratic: Vec<f64>,
}

impl OutcomeModel {
    fn eval(&self, x: &[f64]) -> f64 {
        let lin: f64 = self.linear.iter().zip(x).map(|(b, v)| b * v).sum();
        let quad: f64 = self.quadratic.iter().zip(x).map(|(b, v)| b * v * v).sum();
        self.intercept + lin + quad
    }

    fn expectation(&self, laws: &[CovariateLaw]) -> f64 {
        let lin: f64 = self.linear.iter().zip(laws).map(|(b, l)| b * l.first_moment()).sum();
        let quad: f64 = self.quadratic.iter().zip(laws).map(|(b, l)| b * l.second_moment()).sum();
        self.intercept + lin + quad
    }
}

/// Fully specified synthetic model with homoskedastic Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub name: String,
    pub covariates: Vec<CovariateLaw>,
    pub propensity: Propensity,
    pub control: OutcomeModel,
    pub treated: OutcomeModel,
    pub noise_sd: f64,
}

impl DgpSpec {
    pub fn d(&self) -> usize {
        self.covariates.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        if d == 0 {
            return Err(Error::InvalidArgument("a DGP needs at least one covariate".into()));
        }
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return Err(Error::InvalidArgument("noise scale must be finite and nonnegative".into()));
        }
        for m in [&self.control, &self.treated] {
            if m.linear.len() > d || m.quadratic.len() > d {
                return Err(Error::Dimension("outcome coefficients exceed covariate dimension".into()));
            }
        }
        for law in &self.covariates {
            let ok = match *law {
                CovariateLaw::Uniform { low, high } => low.is_finite() && high.is_finite() && low < high,
                CovariateLaw::Normal { mean, sd } => mean.is_finite() && sd.is_finite() && sd > 0.0,
            };
            if !ok {
                return Err(Error::InvalidArgument(format!("invalid covariate law {law:?}")));
            }
        }
        match &self.propensity {
            Propensity::Constant { p } if !(*p > 0.0 && *p < 1.0) => {
                Err(Error::InvalidArgument("constant propensity must lie in (0,1)".into()))
            }
            Propensity::Logistic { intercept, coefficients }
                if coefficients.len() > d || !intercept.is_finite() || coefficients.iter().any(|c| !c.is_finite()) =>
            {
                Err(Error::InvalidArgument("logistic propensity coefficients are invalid".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn propensity(&self, x: &[f64]) -> f64 {
        match &self.propensity {
            Propensity::Constant { p } => *p,
            Propensity::Logistic { intercept, coefficients } => {
                let eta = intercept + coefficients.iter().zip(x).map(|(b, v)| b * v).sum::<f64>();
                1.0 / (1.0 + (-eta).exp())
            }
        }
    }

    pub fn outcome_mean(&self, treated: bool, x: &[f64]) -> f64 {
        if treated { self.treated.eval(x) } else { self.control.eval(x) }
    }

    pub fn conditional_variance(&self, _treated: bool, _x: &[f64]) -> f64 {
        self.noise_sd * self.noise_sd
    }

    /// Closed form from the first two covariate moments.
    pub fn true_ate(&self) -> f64 {
        self.treated.expectation(&self.covariates) - self.control.expectation(&self.covariates)
    }

    pub fn draw_covariates<R: Rng>(&self, rng: &mut R, x: &mut Vec<f64>) {
        x.clear();
        x.extend(self.covariates.iter().map(|law| law.draw(rng)));
    }

    /// Draws `n` units: covariates, then `Z ~ Bernoulli(pi(X))`, then the
    /// observed outcome `Y(Z)`. Counterfactuals are not stored.
    pub fn sample_with<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Dataset> {
        self.validate()?;
        if n < 2 {
            return Err(Error::InvalidArgument("sample size must be at least 2".into()));
        }
        let mut units = Vec::with_capacity(n);
        let mut x = Vec::with_capacity(self.d());
        for i in 0..n {
            self.draw_covariates(rng, &mut x);
            let treated = rng.gen::<f64>() < self.propensity(&x);
            let noise: f64 = rng.sample(StandardNormal);
            let y = self.outcome_mean(treated, &x) + self.noise_sd * noise;
            units.push(Unit { id: format!("u{i}"), treated, y, x: x.clone() });
        }
        let names = (1..=self.d()).map(|k| format!("x{k}")).collect();
        Dataset::with_names(units, names)
    }
}

/// Heterogeneous-effect DGP: `X ~ U(0,1)^2`, logistic propensity,
/// `Y(0) = 1 + x1 + x2^2`, `Y(1) = Y(0) + 1 + x1`, unit noise; ATE 1.5.
pub fn dgp_a() -> DgpSpec {
    DgpSpec {
        name: "dgp_a".into(),
        covariates: vec![CovariateLaw::Uniform { low: 0.0, high: 1.0 }; 2],
        propensity: Propensity::Logistic { intercept: -0.3, coefficients: vec![0.8, 0.4] },
        control: OutcomeModel { intercept: 1.0, linear: vec![1.0, 0.0], quadratic: vec![0.0, 1.0] },
        treated: OutcomeModel { intercept: 2.0, linear: vec![2.0, 0.0], quadratic: vec![0.0, 1.0] },
        noise_sd: 1.0,
    }
}

/// Randomized design: `X ~ U(0,1)^2`, `pi = 1/2`, `Y(0) = x1 + x2/2`,
/// constant effect `tau`, noise scale `sigma`; efficiency bound `4 sigma^2`.
pub fn dgp_b(sigma: f64, tau: f64) -> DgpSpec {
    DgpSpec {
        name: "dgp_b".into(),
        covariates: vec![CovariateLaw::Uniform { low: 0.0, high: 1.0 }; 2],
        propensity: Propensity::Constant { p: 0.5 },
        control: OutcomeModel { intercept: 0.0, linear: vec![1.0, 0.5], quadratic: vec![] },
        treated: OutcomeModel { intercept: tau, linear: vec![1.0, 0.5], quadratic: vec![] },
        noise_sd: sigma,
    }
}

/// Eight-dimensional DGP for the nearest-neighbour contrast: `X ~ U(0,1)^8`,
/// propensity logistic in the covariate sum, linear outcomes, effect 1.
pub fn dgp_c() -> DgpSpec {
    DgpSpec {
        name: "dgp_c".into(),
        covariates: vec![CovariateLaw::Uniform { low: 0.0, high: 1.0 }; 8],
        propensity: Propensity::Logistic { intercept: -4.0, coefficients: vec![1.0; 8] },
        control: OutcomeModel { intercept: 0.0, linear: vec![2.0; 8], quadratic: vec![] },
        treated: OutcomeModel { intercept: 1.0, linear: vec![2.0; 8], quadratic: vec![] },
        noise_sd: 1.0,
    }
}

/// Built-in DGP by name (`dgp_a`, `dgp_b`, `dgp_c`; `a`/`b`/`c` also accepted).
pub fn builtin(name: &str) -> Result<DgpSpec> {
    match name.to_ascii_lowercase().replace('-', "_").as_str() {
        "dgp_a" | "a" => Ok(dgp_a()),
        "dgp_b" | "b" => Ok(dgp_b(1.0, 1.0)),
        "dgp_c" | "c" => Ok(dgp_c()),
        _ => Err(Error::InvalidArgument(format!("unknown DGP '{name}'"))),
    }
}

pub fn dgp_sample(spec: &DgpSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.sample_with(n, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    BalanceMatch,
    NnMatch,
}

impl EstimatorKind {
    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::BalanceMatch => "balance_match",
            EstimatorKind::NnMatch => "nn_match",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "balance_match" | "balance" => Ok(EstimatorKind::BalanceMatch),
            "nn_match" | "nn" => Ok(EstimatorKind::NnMatch),
            _ => Err(Error::InvalidArgument(format!("unknown estimator '{s}'"))),
        }
    }
}

/// How balance tolerances are chosen in each replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DeltaPolicy {
    /// `delta_k = c * n^{-1/2} * sd(B_k)` from the replicate's own sample.
    Schedule { c: f64 },
    Fixed { delta: Vec<f64> },
}

impl DeltaPolicy {
    pub fn resolve(&self, bm: &crate::basis::BasisMatrix) -> Result<BalanceSpec> {
        match self {
            DeltaPolicy::Schedule { c } => BalanceSpec::schedule(bm, *c),
            DeltaPolicy::Fixed { delta } if delta.len() == bm.k() => BalanceSpec::new(delta.clone()),
            DeltaPolicy::Fixed { delta } => Err(Error::Dimension(format!(
                "{} tolerances for {} basis functions",
                delta.len(),
                bm.k()
            ))),
        }
    }
}

impl Default for DeltaPolicy {
    fn default() -> Self {
        DeltaPolicy::Schedule { c: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub dgp: DgpSpec,
    pub estimators: Vec<EstimatorKind>,
    pub n_grid: Vec<usize>,
    pub replications: usize,
    pub base_seed: u64,
    pub delta: DeltaPolicy,
    pub basis: BasisSpec,
    pub nn: NnSpec,
    pub confidence_level: f64,
    pub m_policy: MPolicy,
    pub solver: SolverConfig,
}

impl ExperimentSpec {
    pub fn new(dgp: DgpSpec, estimators: Vec<EstimatorKind>, n_grid: Vec<usize>, replications: usize) -> Self {
        Self {
            dgp,
            estimators,
            n_grid,
            replications,
            base_seed: 0,
            delta: DeltaPolicy::default(),
            basis: BasisSpec::raw(),
            nn: NnSpec::default(),
            confidence_level: 0.95,
            m_policy: MPolicy::Maximize,
            solver: SolverConfig::default(),
        }
    }
}

/// Stream index of replicate `rep` in grid cell `cell`; the sample is drawn
/// from `ChaCha8(base_seed)` on this stream, so replicates never share draws.
pub fn replicate_stream(cell: usize, rep: usize) -> u64 {
    ((cell as u64) << 32) | rep as u64
}

/// Outcome of one estimator on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub estimator: EstimatorKind,
    pub n: usize,
    pub replicate: usize,
    pub stream: u64,
    /// `None` when the balance program had no solution.
    pub estimate: Option<f64>,
    pub plugin_variance: Option<f64>,
    pub covered: Option<bool>,
    pub multiplicities: Option<(u32, u32)>,
}

/// Summary of one (estimator, n) cell. Statistics are over feasible
/// replicates; `sd` is the population standard deviation so that
/// `rmse^2 = bias^2 + sd^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub estimator: EstimatorKind,
    pub n: usize,
    pub replications: usize,
    pub infeasible: usize,
    pub bias: Option<f64>,
    pub rmse: Option<f64>,
    pub sd: Option<f64>,
    pub mean_se: Option<f64>,
    pub coverage: Option<f64>,
    /// Mean of `V_hat / n`, comparable with `sd^2`.
    pub mean_plugin_variance: Option<f64>,
    pub mean_estimate: Option<f64>,
}

impl McRow {
    pub fn is_empty(&self) -> bool {
        self.bias.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub version: String,
    pub experiment: ExperimentSpec,
    pub true_ate: f64,
    pub base_seed: u64,
    pub seed_rule: String,
    pub rows: Vec<McRow>,
}

impl McReport {
    pub fn row(&self, estimator: EstimatorKind, n: usize) -> Option<&McRow> {
        self.rows.iter().find(|r| r.estimator == estimator && r.n == n)
    }

    /// CSV with columns `estimator,n,replications,infeasible,bias,rmse,sd,mean_se,coverage`;
    /// empty cells are written as empty fields.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["estimator", "n", "replications", "infeasible", "bias", "rmse", "sd", "mean_se", "coverage"])?;
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            out.write_record([
                r.estimator.label().to_string(),
                r.n.to_string(),
                r.replications.to_string(),
                r.infeasible.to_string(),
                f(r.bias),
                f(r.rmse),
                f(r.sd),
                f(r.mean_se),
                f(r.coverage),
            ])?;
        }
        out.flush().map_err(|source| Error::Io { path: "<mc report>".into(), source })?;
        Ok(())
    }
}

fn run_balance(exp: &ExperimentSpec, ds: &Dataset, stream: u64, truth: f64) -> Result<ReplicateResult> {
    let bm = expand(ds, &exp.basis)?;
    let spec = exp.delta.resolve(&bm)?;
    let cfg = SolverConfig { seed: exp.solver.seed ^ stream, ..exp.solver.clone() };
    let both = solve_both_directions(&bm, &ds.arms(), &spec, true, exp.m_policy, &cfg)?;
    let mut res = ReplicateResult {
        estimator: EstimatorKind::BalanceMatch,
        n: ds.n(),
        replicate: 0,
        stream,
        estimate: None,
        plugin_variance: None,
        covered: None,
        multiplicities: None,
    };
    if let Some((t2c, c2t)) = both.solutions() {
        let w = implied_weights(&[t2c, c2t], ds)?;
        let est = estimate_ate(ds, t2c, c2t, &bm, &w, exp.confidence_level)?;
        res.estimate = Some(est.point);
        res.plugin_variance = est.variance_per_observation;
        res.covered = est.ci.map(|(lo, hi)| lo <= truth && truth <= hi);
        res.multiplicities = Some((t2c.m, c2t.m));
    }
    Ok(res)
}

fn run_replicate(exp: &ExperimentSpec, cell: usize, rep: usize, truth: f64) -> Result<Vec<ReplicateResult>> {
    let n = exp.n_grid[cell];
    let stream = replicate_stream(cell, rep);
    let mut rng = ChaCha8Rng::seed_from_u64(exp.base_seed);
    rng.set_stream(stream);
    let ds = exp.dgp.sample_with(n, &mut rng)?;
    let mut out = Vec::with_capacity(exp.estimators.len());
    for &kind in &exp.estimators {
        let mut r = if ds.treated_indices().is_empty() || ds.control_indices().is_empty() {
            ReplicateResult {
                estimator: kind,
                n,
                replicate: rep,
                stream,
                estimate: None,
                plugin_variance: None,
                covered: None,
                multiplicities: None,
            }
        } else {
            match kind {
                EstimatorKind::BalanceMatch => run_balance(exp, &ds, stream, truth)?,
                EstimatorKind::NnMatch => ReplicateResult {
                    estimator: kind,
                    n,
                    replicate: rep,
                    stream,
                    estimate: Some(ate_nn(&ds, &exp.nn)?),
                    plugin_variance: None,
                    covered: None,
                    multiplicities: None,
                },
            }
        };
        r.replicate = rep;
        out.push(r);
    }
    Ok(out)
}

fn summarize_cell(kind: EstimatorKind, n: usize, results: &[&ReplicateResult], truth: f64) -> McRow {
    let est: Vec<f64> = results.iter().filter_map(|r| r.estimate).collect();
    let infeasible = results.len() - est.len();
    let mut row = McRow {
        estimator: kind,
        n,
        replications: results.len(),
        infeasible,
        bias: None,
        rmse: None,
        sd: None,
        mean_se: None,
        coverage: None,
        mean_plugin_variance: None,
        mean_estimate: None,
    };
    if est.is_empty() {
        return row;
    }
    let m = est.len() as f64;
    let mean = est.iter().sum::<f64>() / m;
    let sd = (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / m).sqrt();
    let bias = mean - truth;
    row.mean_estimate = Some(mean);
    row.bias = Some(bias);
    row.sd = Some(sd);
    row.rmse = Some((bias * bias + sd * sd).sqrt());
    let vars: Vec<f64> = results.iter().filter_map(|r| r.plugin_variance).collect();
    if !vars.is_empty() {
        let k = vars.len() as f64;
        row.mean_se = Some(vars.iter().map(|v| v.sqrt()).sum::<f64>() / k);
        row.mean_plugin_variance = Some(vars.iter().sum::<f64>() / k);
    }
    let cov: Vec<bool> = results.iter().filter_map(|r| r.covered).collect();
    if !cov.is_empty() {
        row.coverage = Some(cov.iter().filter(|c| **c).count() as f64 / cov.len() as f64);
    }
    row
}

/// Per-replicate results in (cell, replicate, estimator) order. Replicates
/// run on the current rayon pool; the output order is fixed.
pub fn run_replicates(exp: &ExperimentSpec) -> Result<Vec<ReplicateResult>> {
    exp.dgp.validate()?;
    if !(exp.confidence_level > 0.0 && exp.confidence_level < 1.0) {
        return Err(Error::InvalidArgument("confidence level must lie in (0,1)".into()));
    }
    if exp.n_grid.iter().any(|&n| n < 2) {
        return Err(Error::InvalidArgument("every sample size must be at least 2".into()));
    }
    if exp.estimators.is_empty() {
        return Ok(Vec::new());
    }
    let truth = exp.dgp.true_ate();
    let jobs: Vec<(usize, usize)> =
        (0..exp.n_grid.len()).flat_map(|c| (0..exp.replications).map(move |r| (c, r))).collect();
    let nested: Vec<Result<Vec<ReplicateResult>>> =
        jobs.par_iter().map(|&(c, r)| run_replicate(exp, c, r, truth)).collect();
    let mut out = Vec::with_capacity(jobs.len() * exp.estimators.len());
    for r in nested {
        out.extend(r?);
    }
    Ok(out)
}

/// Summarizes per-replicate results into an [`McReport`].
pub fn summarize_replicates(exp: &ExperimentSpec, results: &[ReplicateResult]) -> McReport {
    let truth = exp.dgp.true_ate();
    let mut rows = Vec::new();
    for &kind in &exp.estimators {
        for &n in &exp.n_grid {
            let cell: Vec<&ReplicateResult> = results.iter().filter(|r| r.estimator == kind && r.n == n).collect();
            rows.push(summarize_cell(kind, n, &cell, truth));
        }
    }
    McReport {
        version: crate::VERSION.to_string(),
        experiment: exp.clone(),
        true_ate: truth,
        base_seed: exp.base_seed,
        seed_rule: "ChaCha8(base_seed) on stream (cell << 32) | replicate; solver seed = solver.seed ^ stream".into(),
        rows,
    }
}

pub fn run_monte_carlo(exp: &ExperimentSpec) -> Result<McReport> {
    let results = run_replicates(exp)?;
    Ok(summarize_replicates(exp, &results))
}

/// Least-squares slope of `ln rmse` on `ln n` over the estimator's nonempty cells.
pub fn rate_fit(report: &McReport, estimator: EstimatorKind) -> Result<f64> {
    let pts: Vec<(f64, f64)> = report
        .rows
        .iter()
        .filter(|r| r.estimator == estimator)
        .filter_map(|r| r.rmse.filter(|v| *v > 0.0).map(|v| ((r.n as f64).ln(), v.ln())))
        .collect();
    if pts.len() < 3 {
        return Err(Error::InvalidArgument(format!("rate fit needs at least 3 nonempty cells, got {}", pts.len())));
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}
