//! `balmatch`: balance matching, estimation, simulation and diagnostics
//! from the command line.
//!
//! Exit status: 0 on success, 2 when the balance program (or oracle) has no
//! solution, 1 on usage, input or internal errors.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};

use config::{DiagnoseArgs, EstimateArgs, MatchArgs, OracleArgs, SimulateArgs};

#[derive(Parser, Debug)]
#[command(name = "balmatch", version, about = "Matching for aggregate covariate balance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the balance program and write matches, weights and a balance report.
    Match(MatchArgs),
    /// Match (or load matches) and estimate the ATE or ATT.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo experiment on a built-in DGP.
    Simulate(SimulateArgs),
    /// Feasibility diagnostics: box constant, sample-size bound, overlap.
    Diagnose(DiagnoseArgs),
    /// Brute-force largest feasible multiplicity for tiny instances.
    Oracle(OracleArgs),
}

/// Outcome of a command that ran to completion.
pub enum Status {
    Success,
    Infeasible,
}

/// Error that should be reported together with a subcommand's usage text.
#[derive(Debug)]
pub struct UsageError {
    pub subcommand: &'static str,
    pub message: String,
}

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Match(a) => commands::run_match(a),
        Command::Estimate(a) => commands::run_estimate(a),
        Command::Simulate(a) => commands::run_simulate(a),
        Command::Diagnose(a) => commands::run_diagnose(a),
        Command::Oracle(a) => commands::run_oracle(a),
    };
    match result {
        Ok(Status::Success) => ExitCode::SUCCESS,
        Ok(Status::Infeasible) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(u) = e.downcast_ref::<UsageError>() {
                let mut cmd = Cli::command();
                if let Some(sub) = cmd.find_subcommand_mut(u.subcommand) {
                    eprintln!("\n{}", sub.render_usage());
                }
            }
            ExitCode::from(1)
        }
    }
}
