use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ocn_cli::{cmd_check, cmd_eval, cmd_generate, cmd_train, exit_code, CheckArgs, Common, EvalArgs, Status, TrainArgs};

#[derive(Parser)]
#[command(name = "ocn", version, about = "Learn vector fields from trajectory data")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonFlags {
    /// Run configuration (JSON)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named experiment preset
    #[arg(long)]
    preset: Option<String>,
    /// Seed for sampling and initialisation
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

impl From<CommonFlags> for Common {
    fn from(f: CommonFlags) -> Self {
        Common { config: f.config, preset: f.preset, seed: f.seed, out: f.out }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample trajectories of the true system
    Generate {
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Fit a network to a dataset
    Train {
        #[command(flatten)]
        common: CommonFlags,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Warm-start checkpoint
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Override the iteration budget
        #[arg(long)]
        iterations: Option<usize>,
        /// Zero the wall-clock column of the history
        #[arg(long)]
        no_timing: bool,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Compare learned and true dynamics
    Eval {
        #[command(flatten)]
        common: CommonFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Evaluate on this many unseen initial points
        #[arg(long)]
        unseen: Option<usize>,
        /// Prediction horizon
        #[arg(long)]
        horizon: Option<f64>,
        /// Write per-trajectory losses to histogram.csv
        #[arg(long)]
        histogram: bool,
    },
    /// Verify gradients and the conserved bilinear form
    Check {
        #[command(flatten)]
        common: CommonFlags,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Generate { common } => cmd_generate(&common.into()).map(|_| Status::Pass),
        Cmd::Train { common, dataset, checkpoint, iterations, no_timing, quiet } => {
            let a = TrainArgs { dataset, checkpoint, iterations, no_timing, quiet };
            cmd_train(&common.into(), &a).map(|_| Status::Pass)
        }
        Cmd::Eval { common, checkpoint, dataset, unseen, horizon, histogram } => {
            let a = EvalArgs { checkpoint, dataset, unseen, horizon, histogram };
            cmd_eval(&common.into(), &a).map(|o| {
                for f in &o.files {
                    eprintln!("wrote {}", f.display());
                }
                Status::Pass
            })
        }
        Cmd::Check { common, checkpoint } => cmd_check(&common.into(), &CheckArgs { checkpoint }).map(|(_, s)| s),
    };
    match res {
        Ok(Status::Pass) => ExitCode::SUCCESS,
        Ok(Status::Fail) => {
            eprintln!("check failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
