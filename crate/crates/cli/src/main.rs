//! The `gmmc` command-line tool.

use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gmmc_cli::commands::{
    cmd_eval, cmd_means, cmd_sample, cmd_train, CommandError, EvalArgs, MeansArgs, SampleArgs,
    Suite,
};

#[derive(Parser)]
#[command(
    name = "gmmc",
    version,
    about = "Train, sample and evaluate Max-Mahalanobis energy classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate maximally separated class means.
    Means {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = gmmc::centroids::DEFAULT_SCALE)]
        scale: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw class-conditional samples from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Zero-based class index.
        #[arg(long)]
        class: usize,
        #[arg(long)]
        count: usize,
        /// staged, noise_injected or sgld.
        #[arg(long, default_value = "staged")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        step_size: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use the estimated gamma^2 rather than unit gamma.
        #[arg(long)]
        estimated_gamma: bool,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labeled CSV, or an experiment config (its test split is used).
        #[arg(long)]
        dataset: PathBuf,
        /// calibration, ood, robustness or all.
        #[arg(long, default_value = "all")]
        suite: Suite,
        #[arg(long)]
        out: PathBuf,
        /// Out-of-distribution CSV.
        #[arg(long)]
        ood: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), CommandError> {
    let mut stdout = io::stdout().lock();
    match cli.command {
        Command::Means {
            classes,
            dim,
            scale,
            out,
        } => cmd_means(
            &MeansArgs {
                classes,
                dim,
                scale,
                out,
            },
            &mut stdout,
        )
        .map(drop),
        Command::Train { config, out } => cmd_train(&config, out.as_deref(), &mut stdout).map(drop),
        Command::Sample {
            checkpoint,
            class,
            count,
            mode,
            out,
            steps,
            step_size,
            seed,
            estimated_gamma,
        } => cmd_sample(
            &SampleArgs {
                checkpoint,
                class,
                count,
                mode,
                out,
                steps,
                step_size,
                seed,
                estimated_gamma,
            },
            &mut stdout,
        )
        .map(drop),
        Command::Eval {
            checkpoint,
            dataset,
            suite,
            out,
            ood,
            seed,
        } => cmd_eval(
            &EvalArgs {
                checkpoint,
                dataset,
                suite,
                out,
                ood,
                seed,
            },
            &mut stdout,
        )
        .map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind.code() as u8)
        }
    }
}
