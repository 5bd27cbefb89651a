//! `simcert` command-line front end: project files, subcommands and reports.

pub mod commands;
pub mod project;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use simcert_core::spsf::DEFAULT_TOL;
use simcert_core::{DegreeMode, RhoExtVariant};

pub use commands::{Outcome, Settings, Status};

#[derive(Debug, Parser)]
#[command(name = "simcert", version, about = "Certified abstractions of interconnected linear stochastic systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Absolute tolerance of the certificate checks, scaled by term magnitudes.
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
    /// Multiplier of the internal-input gain: `in_degree` or `paper_N_minus_1`.
    #[arg(long, value_parser = parse_degree_mode)]
    pub degree_mode: Option<DegreeMode>,
    /// Leading factor of the external-input gain: `as_printed` (default) or
    /// `symmetric`; the bare flag selects `symmetric`.
    #[arg(long, num_args = 0..=1, default_missing_value = "symmetric", value_parser = parse_variant)]
    pub rho_ext_variant: Option<RhoExtVariant>,
    /// Round gains conservatively (lambda down, delta up) to this many decimals.
    #[arg(long)]
    pub gain_decimals: Option<u32>,
}

impl CommonArgs {
    pub fn settings(&self) -> Settings {
        Settings {
            tol: self.tol,
            rho_ext_variant: self.rho_ext_variant.unwrap_or_default(),
            degree_mode: self.degree_mode,
            gain_decimals: self.gain_decimals,
        }
    }
}

fn parse_degree_mode(s: &str) -> Result<DegreeMode, String> {
    s.parse()
}

fn parse_variant(s: &str) -> Result<RhoExtVariant, String> {
    match s {
        "as_printed" | "as-printed" => Ok(RhoExtVariant::AsPrinted),
        "symmetric" => Ok(RhoExtVariant::Symmetric),
        other => Err(format!("unknown rho_ext variant `{other}`")),
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Verify every stored certificate.
    Check {
        #[arg(long)]
        project: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Build certificates and write them into the project.
    Abstract {
        #[arg(long)]
        project: PathBuf,
        /// Subsystem id; all abstractions when omitted.
        #[arg(long)]
        subsystem: Option<usize>,
        #[arg(long)]
        pi: Option<f64>,
        #[arg(long)]
        kappa_hat: Option<f64>,
        /// Output file; the project is updated in place when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Small-gain composition of the certified subsystems.
    Compose {
        #[arg(long)]
        project: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Finite-horizon closeness bound.
    Bound {
        #[arg(long)]
        project: PathBuf,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        horizon: Option<u64>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Monte Carlo validation of the closeness bound.
    Simulate {
        #[arg(long)]
        project: PathBuf,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        horizon: Option<u64>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (results do not depend on this).
        #[arg(long)]
        threads: Option<usize>,
        /// Write every trial's outputs to this CSV file.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Regression run of the built-in four-subsystem example.
    #[command(name = "paper-example")]
    ReferenceExample {
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        threads: Option<usize>,
        /// Write the example as a project file.
        #[arg(long)]
        dump_project: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
}

pub fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Check { project, common } => commands::cmd_check(&project, &common.settings()),
        Command::Abstract {
            project,
            subsystem,
            pi,
            kappa_hat,
            out,
            common,
        } => commands::cmd_abstract(
            &project,
            subsystem,
            pi,
            kappa_hat,
            out.as_deref(),
            &common.settings(),
        ),
        Command::Compose { project, common } => commands::cmd_compose(&project, &common.settings()),
        Command::Bound {
            project,
            epsilon,
            horizon,
            common,
        } => commands::cmd_bound(&project, epsilon, horizon, &common.settings()),
        Command::Simulate {
            project,
            epsilon,
            horizon,
            trials,
            seed,
            threads,
            csv,
            common,
        } => commands::cmd_simulate(
            &project,
            &commands::SimulateOptions {
                epsilon,
                horizon,
                trials,
                seed,
                threads,
                csv,
            },
            &common.settings(),
        ),
        Command::ReferenceExample {
            trials,
            seed,
            threads,
            dump_project,
            common,
        } => commands::cmd_reference_example(
            &commands::ExampleOptions {
                trials,
                seed,
                threads,
                dump_project,
            },
            &common.settings(),
        ),
    }
}
