mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use shonan::io::{KappaPolicy, ResultFormat};
use shonan::local_solver::GaugeMode;
use shonan::staircase::Method;

#[derive(Debug, Parser)]
#[command(name = "shonan", version, about = "Certifiable rotation averaging")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Solve one g2o instance.
    Solve,
    /// Write a synthetic cycle graph and its ground truth.
    Synth,
    /// Sweep methods and initializations over one instance.
    Bench,
    /// Check a given SO(d) assignment for global optimality.
    Certify,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Flags {
    /// g2o dataset.
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    /// Assignment to certify, as a result table with rotations.
    #[arg(long, global = true)]
    pub assignment: Option<PathBuf>,
    /// Method preset; bench accepts a comma-separated list.
    #[arg(long, global = true, value_delimiter = ',')]
    pub method: Vec<Method>,
    /// First staircase level; for certify, the embedding dimension.
    #[arg(long, global = true)]
    pub pmin: Option<usize>,
    #[arg(long, global = true)]
    pub pmax: Option<usize>,
    /// Rotation noise in radians for synthetic graphs.
    #[arg(long, global = true, default_value_t = 0.2)]
    pub sigma: f64,
    /// Node count for synthetic graphs.
    #[arg(long, global = true)]
    pub n: Option<usize>,
    /// Number of random initializations in a bench sweep.
    #[arg(long, global = true, default_value_t = 10)]
    pub seeds: u64,
    /// Initialization seed for solve; graph seed for synth and bench.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, default_value = "unit")]
    pub kappa: KappaPolicy,
    /// Overrides the preset's gauge handling.
    #[arg(long, global = true)]
    pub gauge: Option<GaugeMode>,
    #[arg(long = "eig-tol", global = true)]
    pub eig_tol: Option<f64>,
    #[arg(long = "cert-threshold", global = true, default_value_t = shonan::certifier::DEFAULT_THRESHOLD, allow_hyphen_values = true)]
    pub cert_threshold: f64,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Output format; defaults to the extension of --out, else json.
    #[arg(long, global = true)]
    pub format: Option<ResultFormat>,
    /// Print the effective configuration and exit.
    #[arg(long = "dump-config", global = true)]
    pub dump_config: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors share the failure status; 2 means "uncertified".
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
