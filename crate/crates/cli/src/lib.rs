//! Experiment runner for command-conditioned CartPole agents.

pub mod commands;
pub mod config;
pub mod curve;
pub mod error;
pub mod plot;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use error::CliError;

use commands::Overrides;

#[derive(Debug, Parser)]
#[command(name = "gudrl", version, about = "Train and evaluate command-conditioned CartPole agents")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Suppress progress output.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Args, Clone, Default)]
pub struct CommonFlags {
    /// Saved run config (`config.txt`) to start from.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seeds: `3`, `0..4` (inclusive), `2..=3` or `0,2,5`.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Dataset file for il/offline training or command statistics.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output directory (default: $GUDRL_OUT/<name> or runs/<name>).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub env_steps: Option<u64>,
    #[arg(long)]
    pub train_steps: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long)]
    pub eval_episodes: Option<usize>,
    /// Act greedily instead of sampling.
    #[arg(long)]
    pub greedy: bool,
}

impl From<&CommonFlags> for Overrides {
    fn from(f: &CommonFlags) -> Self {
        Overrides {
            config: f.config.clone(),
            seeds: f.seeds.clone(),
            dataset: f.dataset.clone(),
            out: f.out.clone(),
            env_steps: f.env_steps,
            train_steps: f.train_steps,
            eval_every: f.eval_every,
            eval_episodes: f.eval_episodes,
            greedy: f.greedy,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one agent per seed and write curves, checkpoints and a plot.
    Train {
        /// online, il, offline, gcrl or meta.
        #[arg(long)]
        setting: Option<String>,
        #[command(flatten)]
        flags: CommonFlags,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        setting: Option<String>,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        flags: CommonFlags,
    },
    /// Build the imitation and offline datasets from an online agent.
    GenDataset {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Train an online agent first and include its full history.
        #[arg(long)]
        train_first: bool,
        /// Evaluation rollouts of the online agent.
        #[arg(long, default_value_t = 1000)]
        rollouts: usize,
        #[command(flatten)]
        flags: CommonFlags,
    },
    /// Plot curve files for one setting.
    Plot {
        #[arg(long)]
        setting: String,
        /// Curve CSV files.
        #[arg(required = true)]
        curves: Vec<PathBuf>,
        /// Dataset whose mean return is drawn as a dashed line.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Output SVG path.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let quiet = cli.quiet;
    match &cli.command {
        Command::Train { setting, flags } => {
            let outcome = commands::cmd_train(setting.as_deref(), &flags.into(), quiet)?;
            if !quiet {
                for s in &outcome.seeds {
                    let r = s.final_report();
                    println!("seed {}: final return {:.2} ± {:.2}", s.seed, r.mean, r.std);
                }
                println!("wrote {}", outcome.config.out.display());
            }
            Ok(())
        }
        Command::Eval { setting, ckpt, flags } => {
            commands::cmd_eval(setting.as_deref(), ckpt, &flags.into(), quiet).map(|_| ())
        }
        Command::GenDataset {
            ckpt,
            train_first,
            rollouts,
            flags,
        } => commands::cmd_gen_dataset(ckpt.as_deref(), *train_first, *rollouts, &flags.into(), quiet).map(|_| ()),
        Command::Plot {
            setting,
            curves,
            dataset,
            out,
        } => commands::cmd_plot(setting, curves, dataset.as_deref(), out),
    }
}
