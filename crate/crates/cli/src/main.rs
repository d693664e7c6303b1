use std::path::PathBuf;
use std::process::ExitCode;

use besov_transfer::config::{Analysis, RunConfig, RunError};
use besov_transfer::dynamics::MapSpec;
use besov_transfer::pipeline::Session;
use clap::{Args, Parser, Subcommand};

/// Atomic Besov transfer-operator analyses of piecewise expanding maps.
///
/// Exit status: 0 ok, 2 config error, 3 assumption failure, 4 numeric failure.
#[derive(Parser)]
#[command(name = "besov-transfer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON run config; without one the doubling map at defaults is used.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory, overriding the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Base seed, overriding the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Cap on the basis size of the truncated matrix.
    #[arg(long, global = true, value_name = "N")]
    max_cells: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Check grid axioms, parameters, ledger completeness and Lebesgue boundedness.
    Validate,
    /// Per-branch constant ledger.
    Ledger,
    /// Truncated transfer matrix as sparse triplets.
    Matrix,
    /// Invariant density and its support.
    Density,
    /// Eigenvalues and peripheral spectrum.
    Spectrum,
    /// Decay of correlations.
    Decay,
    /// Asymptotic variance of the configured observable.
    Clt,
    /// Lasota–Yorke fit.
    Ly,
    /// Bound ledger with formulas.
    Bounds,
    /// Formula, role and current values of a bound.
    Explain { name: String },
    /// Every analysis listed in the config.
    Run,
}

fn load(common: &Common) -> Result<RunConfig, RunError> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::new(MapSpec::doubling()),
    };
    if let Some(out) = &common.out {
        config.output = out.clone();
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(cap) = common.max_cells {
        config.caps.max_cells = cap;
    }
    config.validate()?;
    Ok(config)
}

fn execute(cli: Cli) -> Result<(), RunError> {
    let config = load(&cli.common)?;
    let mut session = Session::new(config);
    let analysis = match cli.command {
        Command::Explain { name } => {
            print!("{}", session.explain(&name)?);
            return Ok(());
        }
        Command::Run => None,
        Command::Validate => Some(Analysis::Validate),
        Command::Ledger => Some(Analysis::Ledger),
        Command::Matrix => Some(Analysis::Matrix),
        Command::Density => Some(Analysis::Density),
        Command::Spectrum => Some(Analysis::Spectrum),
        Command::Decay => Some(Analysis::Decay),
        Command::Clt => Some(Analysis::Clt),
        Command::Ly => Some(Analysis::Ly),
        Command::Bounds => Some(Analysis::Bounds),
    };
    let result = match analysis {
        Some(a) => session.run_analysis(a),
        None => session.run(),
    };
    for path in session.written() {
        println!("{}", path.display());
    }
    result
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
