//! Subcommand implementations.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::{json, Value};

use balmatch::baseline::{Metric, NnSpec};
use balmatch::basis::{check_regularity, expand, BasisMatrix, BasisSpec};
use balmatch::data::{load_dataset, Dataset};
use balmatch::estimator::{estimate_att, estimate_ate};
use balmatch::feasibility::{estimate_propensity, overlap_report, rho_from_sample, FeasibilityReport};
use balmatch::simlab::{builtin, run_monte_carlo, DeltaPolicy, EstimatorKind, ExperimentSpec};
use balmatch::solver::{
    oracle_max_m, read_matches, solve_balance_match, write_matches, BalanceSpec, Direction, MPolicy,
    MatchSolution, SolveOutcome, SolverConfig,
};
use balmatch::weights::{check_balance, implied_weights, write_weights};
use balmatch::VERSION;

use crate::config::{
    input_path, merge_with_file, out_dir, parse_list, Common, DiagnoseArgs, EstimandArg, EstimateArgs, MatchArgs,
    OracleArgs, Replacement, SimulateArgs,
};
use crate::{Status, UsageError};

const DEFAULT_SCHEDULE: f64 = 0.5;

fn init_threads(common: &Common) -> Result<()> {
    if let Some(t) = common.threads {
        if t == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global().context("configuring thread pool")?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

/// Report envelope: version, command, merged config and seed.
fn envelope<C: Serialize>(command: &str, config: &C, seed: u64) -> Result<serde_json::Map<String, Value>> {
    let mut m = serde_json::Map::new();
    m.insert("version".into(), json!(VERSION));
    m.insert("command".into(), json!(command));
    m.insert("config".into(), serde_json::to_value(config)?);
    m.insert("seed".into(), json!(seed));
    Ok(m)
}

/// Dataset, basis matrix and tolerances from the shared settings.
struct Problem {
    ds: Dataset,
    basis: BasisSpec,
    bm: BasisMatrix,
    spec: BalanceSpec,
}

fn load_problem(common: &Common, subcommand: &'static str) -> Result<Problem> {
    let path = input_path(common, subcommand)?;
    let ds = load_dataset(path).with_context(|| format!("data: loading {}", path.display()))?;
    let basis: BasisSpec = common.basis.as_deref().unwrap_or("raw").parse().context("basis")?;
    let bm = expand(&ds, &basis).context("basis")?;
    let spec = match &common.delta {
        Some(s) => {
            let mut d = parse_list(s, "--delta")?;
            if d.len() == 1 {
                d = vec![d[0]; bm.k()];
            }
            if d.len() != bm.k() {
                bail!("--delta has {} values for {} basis functions", d.len(), bm.k());
            }
            BalanceSpec::new(d).context("solver")?
        }
        None => BalanceSpec::schedule(&bm, common.delta_schedule.unwrap_or(DEFAULT_SCHEDULE)).context("solver")?,
    };
    Ok(Problem { ds, basis, bm, spec })
}

fn policy(common: &Common) -> Result<MPolicy> {
    MPolicy::parse(common.m_policy.as_deref().unwrap_or("max")).context("--m-policy")
}

fn with_replacement(common: &Common) -> bool {
    common.replacement.unwrap_or(Replacement::With) == Replacement::With
}

fn solver_config(common: &Common) -> SolverConfig {
    SolverConfig { seed: common.seed.unwrap_or(0), ..SolverConfig::default() }
}

fn directions(arg: Option<&str>, with_replacement: bool) -> Result<Vec<Direction>> {
    let dirs = match arg.unwrap_or(if with_replacement { "both" } else { "treated_to_control" }) {
        "both" => vec![Direction::TreatedToControl, Direction::ControlToTreated],
        other => vec![Direction::parse(other)?],
    };
    if !with_replacement && dirs.contains(&Direction::ControlToTreated) {
        bail!("matching without replacement is supported for treated_to_control only");
    }
    Ok(dirs)
}

fn solve(p: &Problem, dirs: &[Direction], common: &Common) -> Result<Vec<SolveOutcome>> {
    p.ds.require_both_arms().context("data")?;
    let arms = p.ds.arms();
    let pol = policy(common)?;
    let cfg = solver_config(common);
    dirs.iter()
        .map(|&d| {
            solve_balance_match(&p.bm, &arms, &p.spec, d, with_replacement(common), pol, &cfg)
                .with_context(|| format!("solver: {}", d.label()))
        })
        .collect()
}

/// Writes matches.csv and weights.csv for the solved directions and
/// returns the balance report of the implied weights.
fn write_solution_files(p: &Problem, sols: &[&MatchSolution], dir: &Path) -> Result<Option<Value>> {
    write_matches(sols, &p.ds, create(&dir.join("matches.csv"))?).context("writing matches")?;
    if sols.is_empty() {
        return Ok(None);
    }
    let w = implied_weights(sols, &p.ds).context("weights")?;
    write_weights(&w, &p.ds, create(&dir.join("weights.csv"))?).context("writing weights")?;
    let balance = check_balance(&w, &p.bm, &p.spec).context("weights")?;
    Ok(Some(serde_json::to_value(balance)?))
}

pub fn run_match(args: MatchArgs) -> Result<Status> {
    let args = merge_with_file(args)?;
    let c = &args.common;
    init_threads(c)?;
    let p = load_problem(c, "match")?;
    let dirs = directions(args.direction.as_deref(), with_replacement(c))?;
    let outcomes = solve(&p, &dirs, c)?;
    let out = out_dir(c)?;
    let sols: Vec<&MatchSolution> = outcomes.iter().filter_map(|o| o.solution.as_ref()).collect();
    let balance = write_solution_files(&p, &sols, &out)?;
    let infeasible: Vec<&str> =
        outcomes.iter().filter(|o| o.solution.is_none()).map(|o| o.report.direction.label()).collect();
    let mut rep = envelope("match", &args, c.seed.unwrap_or(0))?;
    rep.insert("basis".into(), json!(p.basis.to_string()));
    rep.insert("columns".into(), json!(p.bm.column_names));
    rep.insert("basis_warnings".into(), json!(p.bm.warnings));
    rep.insert("regularity".into(), serde_json::to_value(check_regularity(&p.bm))?);
    rep.insert("delta".into(), serde_json::to_value(&p.spec.delta)?);
    rep.insert("feasible".into(), json!(infeasible.is_empty()));
    rep.insert("infeasible_directions".into(), json!(infeasible));
    rep.insert("directions".into(), serde_json::to_value(outcomes.iter().map(|o| &o.report).collect::<Vec<_>>())?);
    rep.insert("balance".into(), balance.unwrap_or(Value::Null));
    write_json(&out.join("report.json"), &Value::Object(rep))?;
    for o in &outcomes {
        match o.report.chosen_m {
            Some(m) => println!("{}: M = {m}", o.report.direction.label()),
            None => println!(
                "{}: infeasible (worst violation {:.4} on {})",
                o.report.direction.label(),
                o.report.worst_violation,
                o.report.worst_column.as_deref().unwrap_or("-")
            ),
        }
    }
    Ok(if infeasible.is_empty() { Status::Success } else { Status::Infeasible })
}

pub fn run_estimate(args: EstimateArgs) -> Result<Status> {
    let args = merge_with_file(args)?;
    let c = &args.common;
    init_threads(c)?;
    let p = load_problem(c, "estimate")?;
    let estimand = args.estimand.unwrap_or(EstimandArg::Ate);
    let level = args.level.unwrap_or(0.95);
    let out = out_dir(c)?;
    let mut rep = envelope("estimate", &args, c.seed.unwrap_or(0))?;
    let wanted = match estimand {
        EstimandArg::Ate => vec![Direction::TreatedToControl, Direction::ControlToTreated],
        EstimandArg::Att => vec![Direction::TreatedToControl],
    };
    let sols: Vec<MatchSolution> = match &args.matches {
        Some(path) => {
            let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let all = read_matches(f, &p.ds, with_replacement(c)).context("solver: reading matches")?;
            wanted
                .iter()
                .map(|d| {
                    all.iter()
                        .find(|s| s.direction == *d)
                        .cloned()
                        .with_context(|| format!("match file has no {} pairs", d.label()))
                })
                .collect::<Result<_>>()?
        }
        None => {
            if estimand == EstimandArg::Ate && !with_replacement(c) {
                bail!("the ATE needs both directions, which requires matching with replacement");
            }
            let outcomes = solve(&p, &wanted, c)?;
            rep.insert(
                "directions".into(),
                serde_json::to_value(outcomes.iter().map(|o| &o.report).collect::<Vec<_>>())?,
            );
            let infeasible: Vec<&str> =
                outcomes.iter().filter(|o| o.solution.is_none()).map(|o| o.report.direction.label()).collect();
            if !infeasible.is_empty() {
                rep.insert("infeasible_directions".into(), json!(infeasible));
                rep.insert("estimate".into(), Value::Null);
                write_json(&out.join("estimate.json"), &Value::Object(rep))?;
                println!("infeasible: {}", infeasible.join(", "));
                return Ok(Status::Infeasible);
            }
            outcomes.into_iter().filter_map(|o| o.solution).collect()
        }
    };
    let refs: Vec<&MatchSolution> = sols.iter().collect();
    let w = implied_weights(&refs, &p.ds).context("weights")?;
    let result = match estimand {
        EstimandArg::Ate => estimate_ate(&p.ds, &sols[0], &sols[1], &p.bm, &w, level),
        EstimandArg::Att => estimate_att(&p.ds, &sols[0], level),
    }
    .context("estimator")?;
    rep.insert("multiplicities".into(), json!(sols.iter().map(|s| json!({"direction": s.direction, "m": s.m})).collect::<Vec<_>>()));
    rep.insert("balance".into(), serde_json::to_value(check_balance(&w, &p.bm, &p.spec).context("weights")?)?);
    rep.insert("estimate".into(), serde_json::to_value(&result)?);
    write_json(&out.join("estimate.json"), &Value::Object(rep))?;
    match result.ci {
        Some((lo, hi)) => println!("{:?}: {} [{lo}, {hi}]", result.estimand, result.point),
        None => println!("{:?}: {}", result.estimand, result.point),
    }
    Ok(Status::Success)
}

pub fn run_simulate(args: SimulateArgs) -> Result<Status> {
    let args = merge_with_file(args)?;
    let c = &args.common;
    init_threads(c)?;
    let dgp = builtin(args.dgp.as_deref().unwrap_or("dgp_b")).context("simlab")?;
    let grid: Vec<usize> = args
        .n
        .as_deref()
        .unwrap_or("200,400,800")
        .split(',')
        .map(|t| t.trim().parse::<usize>().with_context(|| format!("--n: '{t}' is not a sample size")))
        .collect::<Result<_>>()?;
    let estimators: Vec<EstimatorKind> = args
        .estimators
        .as_deref()
        .unwrap_or("balance_match,nn_match")
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(EstimatorKind::parse)
        .collect::<balmatch::Result<_>>()?;
    let mut exp = ExperimentSpec::new(dgp, estimators, grid, args.reps.unwrap_or(100));
    exp.base_seed = c.seed.unwrap_or(0);
    exp.basis = c.basis.as_deref().unwrap_or("raw").parse().context("basis")?;
    exp.delta = match &c.delta {
        Some(s) => DeltaPolicy::Fixed { delta: parse_list(s, "--delta")? },
        None => DeltaPolicy::Schedule { c: c.delta_schedule.unwrap_or(DEFAULT_SCHEDULE) },
    };
    exp.m_policy = policy(c)?;
    exp.confidence_level = args.level.unwrap_or(0.95);
    let metric = match args.nn_metric.as_deref().unwrap_or("euclidean") {
        "euclidean" => Metric::Euclidean,
        "mahalanobis" => Metric::Mahalanobis,
        other => bail!("unknown --nn-metric '{other}'"),
    };
    exp.nn = NnSpec { metric, num_matches: args.nn_matches.unwrap_or(1) };
    if !with_replacement(c) {
        bail!("simulations match with replacement");
    }
    let report = run_monte_carlo(&exp).context("simlab")?;
    let out = out_dir(c)?;
    report.write_csv(create(&out.join("mc_report.csv"))?).context("writing mc_report.csv")?;
    let mut rep = envelope("simulate", &args, exp.base_seed)?;
    rep.insert("report".into(), serde_json::to_value(&report)?);
    write_json(&out.join("mc_report.json"), &Value::Object(rep))?;
    println!("{} cells written to {}", report.rows.len(), out.display());
    Ok(Status::Success)
}

pub fn run_diagnose(args: DiagnoseArgs) -> Result<Status> {
    let args = merge_with_file(args)?;
    let c = &args.common;
    init_threads(c)?;
    let delta0 = args.delta0.unwrap_or(0.05);
    let usage = |message: &str| UsageError { subcommand: "diagnose", message: message.to_string() };
    let report = if let Some(rho) = args.rho {
        let k = args.k.ok_or_else(|| usage("--k is required with --rho"))?;
        FeasibilityReport::new(None, rho, delta0, k, None)
    } else if c.input.is_some() {
        let p = load_problem(c, "diagnose")?;
        let side = args.box_side.as_deref().map(|s| parse_list(s, "--box-side")).transpose()?.map(|mut v| {
            if v.len() == 1 {
                v = vec![v[0]; p.bm.k()];
            }
            v
        });
        let arms = p.ds.arms();
        let rho = rho_from_sample(&p.bm, &arms, &p.spec, side.as_deref(), c.seed.unwrap_or(0)).context("feasibility")?;
        let pi = estimate_propensity(&p.bm, &arms).context("feasibility")?;
        let overlap = overlap_report(&pi, p.bm.k(), p.ds.n(), args.r_pi.unwrap_or(1.0), args.c_const.unwrap_or(1.0))
            .context("feasibility")?;
        let value = rho.rho;
        let mut r = FeasibilityReport::new(Some(rho), value, delta0, p.bm.k(), Some(p.ds.n()));
        r.overlap = Some(overlap);
        r
    } else {
        return Err(usage("either --rho (with --k) or --input is required").into());
    };
    let out = out_dir(c)?;
    let mut rep = envelope("diagnose", &args, c.seed.unwrap_or(0))?;
    rep.insert("feasibility".into(), serde_json::to_value(&report)?);
    write_json(&out.join("feasibility.json"), &Value::Object(rep))?;
    match report.n_min {
        Some(n) => println!("n_min = {n}"),
        None => println!("no finite sample-size bound (rho = {})", report.rho_value),
    }
    Ok(Status::Success)
}

pub fn run_oracle(args: OracleArgs) -> Result<Status> {
    let args = merge_with_file(args)?;
    let c = &args.common;
    init_threads(c)?;
    let p = load_problem(c, "oracle")?;
    let dir = Direction::parse(args.direction.as_deref().unwrap_or("treated_to_control"))?;
    let m = oracle_max_m(&p.bm, &p.ds.arms(), &p.spec, dir, with_replacement(c)).context("oracle")?;
    let out = out_dir(c)?;
    let mut rep = envelope("oracle", &args, c.seed.unwrap_or(0))?;
    rep.insert("direction".into(), json!(dir));
    rep.insert("m".into(), json!(m));
    write_json(&out.join("oracle.json"), &Value::Object(rep))?;
    match m {
        Some(m) => {
            println!("M = {m}");
            Ok(Status::Success)
        }
        None => {
            println!("infeasible");
            Ok(Status::Infeasible)
        }
    }
}
