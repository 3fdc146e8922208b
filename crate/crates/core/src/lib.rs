//! Matching for aggregate covariate balance.
//!
//! The crate solves the integer program that maximizes the match
//! multiplicity `M` subject to basis-function balance constraints, turns a
//! solution into implied unit weights, evaluates the difference-in-means
//! treatment-effect estimator with an influence-function variance, and ships
//! a Monte Carlo harness for checking the estimator's large-sample behaviour.
//!
//! Module map:
//!
//! - [`data`]: units, datasets, CSV ingestion and summaries.
//! - [`basis`]: covariate expansions `B(x)` and regularity diagnostics.
//! - [`solver`]: count-vector search, greedy realization, multiplicity search,
//!   and the brute-force oracle.
//! - [`weights`]: implied weights and balance residuals.
//! - [`estimator`]: ATE/ATT point estimates and the plug-in variance.
//! - [`baseline`]: nearest-neighbour matching comparator.
//! - [`feasibility`]: box-probability constant, sample-size bound, overlap.
//! - [`simlab`]: data-generating processes and the Monte Carlo driver.

pub mod baseline;
pub mod basis;
pub mod data;
pub mod error;
pub mod estimator;
pub mod feasibility;
mod lp;
pub mod simlab;
pub mod solver;
pub mod weights;

pub use error::{Error, Result};

/// Version string embedded in every JSON report.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
