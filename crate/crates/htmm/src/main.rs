use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use htmm::commands::{self, parse_m_grid, parse_nu0, Outcome, EXIT_FAILURE};
use htmm::htmm_core::estimator::{EstimatorError, Nu0Mode};
use htmm::htmm_core::moments::moment_set;
use htmm::Error;

#[derive(Parser)]
#[command(name = "htmm", version, about = "Two-timescale fluorescence trace models: simulate, moments, estimate")]
struct Cli {
    /// Suppress the terminal report.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutDir {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// Parsed `--m-grid` value.
#[derive(Clone)]
struct Grid(Vec<usize>);

#[derive(Subcommand)]
enum Command {
    /// Simulate traces from a JSON simulation config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        out: OutDir,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Closed-form mean and covariance from a JSON file with `gamma` and `camera`.
    Moments {
        #[arg(long)]
        config: PathBuf,
        /// Trace length.
        #[arg(short = 'T', long = "frames")]
        frames: usize,
        #[command(flatten)]
        out: OutDir,
    },
    /// Estimate the number of fluorophores from a trace CSV.
    Estimate {
        /// Trace CSV with `t,y` or `replicate,t,y` columns.
        trace: PathBuf,
        /// Camera JSON (`a`, `f2`, `o`, `sigma`).
        #[arg(long)]
        camera: PathBuf,
        #[command(flatten)]
        out: OutDir,
        /// Fit options JSON; the flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Candidate counts, e.g. `1-20` or `1,2,4-6`.
        #[arg(long, value_parser = |s: &str| parse_m_grid(s).map(Grid))]
        m_grid: Option<Grid>,
        /// Number of dark states.
        #[arg(long)]
        r: Option<usize>,
        /// Initial bright probability: `free` or a value in [0, 1].
        #[arg(long, value_parser = parse_nu0)]
        nu0: Option<Nu0Mode>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Amplification factor from per-pixel mean/variance pairs.
    Calibrate {
        /// CSV with `mean` and `var` columns.
        #[arg(long)]
        config: PathBuf,
        /// Excess noise factor of the camera.
        #[arg(long, default_value_t = 2.0)]
        f2: f64,
        #[command(flatten)]
        out: OutDir,
    },
    /// Run the oracle equivalence checks.
    Verify {
        /// Maximum number of hidden paths an enumeration may visit.
        #[arg(long)]
        budget: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutDir,
    },
}

fn run(command: Command) -> Result<Outcome, Error> {
    match command {
        Command::Simulate { config, out, seed, replicates } => {
            commands::simulate(&commands::SimulateArgs { config, out: out.out, seed, replicates })
        }
        Command::Moments { config, frames, out } => {
            commands::moments(&commands::MomentsArgs { config, t_len: frames, out: out.out })
        }
        Command::Estimate { trace, camera, out, config, m_grid, r, nu0, seed } => {
            let m_grid = m_grid.map(|g| g.0);
            commands::estimate(&commands::EstimateArgs { trace, camera, out: out.out, config, m_grid, r, nu0, seed })
        }
        Command::Calibrate { config, f2, out } => {
            commands::calibrate(&commands::CalibrateArgs { stats: config, f2, out: out.out })
        }
        Command::Verify { budget, seed, out } => {
            commands::verify(&commands::VerifyArgs { budget, seed, out: out.out }, moment_set)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(outcome) => {
            if !cli.quiet {
                print!("{}", outcome.report);
            }
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Estimator(EstimatorError::NoConvergence(_)) => commands::EXIT_NO_CONVERGENCE,
                _ => EXIT_FAILURE,
            };
            ExitCode::from(code as u8)
        }
    }
}
