//! Command-line settings, optional JSON config files and their merge.
//!
//! Every subcommand's settings are plain `Option` fields so that a value
//! given on the command line overrides the same key from `--config`, and
//! the merged result can be echoed verbatim into output reports.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::UsageError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Replacement {
    With,
    Without,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimandArg {
    Ate,
    Att,
}

/// Settings shared by every subcommand.
#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Common {
    /// Dataset CSV with columns id,z,y,<covariates...>.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Basis expansion: raw, poly:<d>, interact:<o>, spline:<knots>; append +intercept to add a constant.
    #[arg(long)]
    pub basis: Option<String>,
    /// Balance tolerances: one value for every basis function or a comma-separated list ("inf" disables one).
    #[arg(long)]
    pub delta: Option<String>,
    /// Constant c of the schedule delta_k = c * n^(-1/2) * sd(B_k); used when --delta is absent (default 0.5).
    #[arg(long)]
    pub delta_schedule: Option<f64>,
    #[arg(long, value_enum)]
    pub replacement: Option<Replacement>,
    /// Multiplicity policy: max, fixed:<m> or below:<m>.
    #[arg(long)]
    pub m_policy: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: current directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker thread cap.
    #[arg(long)]
    pub threads: Option<usize>,
    /// JSON file with the same keys as the flags (snake_case); flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// both, treated_to_control (t2c) or control_to_treated (c2t).
    #[arg(long)]
    pub direction: Option<String>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub estimand: Option<EstimandArg>,
    /// Existing match CSV to use instead of solving.
    #[arg(long)]
    pub matches: Option<PathBuf>,
    /// Confidence level of the interval (default 0.95).
    #[arg(long)]
    pub level: Option<f64>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Built-in DGP: dgp_a, dgp_b or dgp_c (default dgp_b).
    #[arg(long)]
    pub dgp: Option<String>,
    /// Comma-separated sample sizes (default 200,400,800).
    #[arg(long)]
    pub n: Option<String>,
    /// Replications per sample size (default 100).
    #[arg(long)]
    pub reps: Option<usize>,
    /// Comma-separated estimators from balance_match, nn_match; empty for none.
    #[arg(long)]
    pub estimators: Option<String>,
    /// Nearest-neighbour metric: euclidean or mahalanobis.
    #[arg(long)]
    pub nn_metric: Option<String>,
    #[arg(long)]
    pub nn_matches: Option<u32>,
    #[arg(long)]
    pub level: Option<f64>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Known rho; skips the box computation (requires --k).
    #[arg(long)]
    pub rho: Option<f64>,
    /// Allowed failure probability (default 0.05).
    #[arg(long)]
    pub delta0: Option<f64>,
    /// Number of basis functions when --rho is given.
    #[arg(long)]
    pub k: Option<usize>,
    /// Box side lengths (one value or a list); default equals the tolerances.
    #[arg(long)]
    pub box_side: Option<String>,
    /// Rate r_pi of the overlap threshold (default 1).
    #[arg(long)]
    pub r_pi: Option<f64>,
    /// Constant of the overlap threshold (default 1).
    #[arg(long)]
    pub c_const: Option<f64>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// treated_to_control (default) or control_to_treated.
    #[arg(long)]
    pub direction: Option<String>,
}

/// Access to the shared settings of any subcommand.
pub trait HasCommon {
    fn common(&self) -> &Common;
}

macro_rules! has_common {
    ($($t:ty),*) => {$(
        impl HasCommon for $t {
            fn common(&self) -> &Common {
                &self.common
            }
        }
    )*};
}
has_common!(MatchArgs, EstimateArgs, SimulateArgs, DiagnoseArgs, OracleArgs);

fn strip_nulls(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m.into_iter().filter(|(_, v)| !v.is_null()).collect(),
        _ => Map::new(),
    }
}

/// Overlays command-line values onto the config file named by `--config`.
pub fn merge_with_file<T>(flags: T) -> Result<T>
where
    T: HasCommon + Serialize + DeserializeOwned + Default,
{
    let Some(path) = flags.common().config.clone() else {
        return Ok(flags);
    };
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display()))?;
    let file: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let Value::Object(mut merged) = file else {
        bail!("config {} must contain a JSON object", path.display());
    };
    let known = strip_keys(&T::default())?;
    if let Some(key) = merged.keys().find(|k| !known.contains(k)) {
        bail!("config {}: unknown key '{key}'", path.display());
    }
    merged.extend(strip_nulls(serde_json::to_value(&flags)?));
    serde_json::from_value(Value::Object(merged)).with_context(|| format!("config {}", path.display()))
}

fn strip_keys<T: Serialize>(t: &T) -> Result<Vec<String>> {
    match serde_json::to_value(t)? {
        Value::Object(m) => Ok(m.keys().cloned().collect()),
        _ => Ok(Vec::new()),
    }
}

/// Parses one number or a comma-separated list; `inf` is accepted.
pub fn parse_list(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            let t = t.trim();
            match t {
                "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
                _ => t.parse::<f64>().with_context(|| format!("{what}: '{t}' is not a number")),
            }
        })
        .collect()
}

pub fn out_dir(common: &Common) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating output directory {}", dir.display()))?;
    Ok(dir)
}

pub fn input_path<'a>(common: &'a Common, subcommand: &'static str) -> Result<&'a Path> {
    common
        .input
        .as_deref()
        .ok_or_else(|| UsageError { subcommand, message: "--input is required".into() }.into())
}
