use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use delt_core::DeltError;

mod commands;
mod config;

#[derive(Parser, Debug)]
#[command(name = "delt", version, about = "Diversity-driven EarlyLate dataset distillation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Run configuration (JSON); flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for synthesis, post-training and teacher training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Concurrent recovery jobs.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    /// `cpu` or `cuda[:N]`.
    #[arg(long, global = true, default_value = "cpu")]
    pub device: String,
    /// Root directory of benchmark datasets.
    #[arg(long, global = true, env = "DELT_DATA_ROOT")]
    pub data_root: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a teacher and freeze it.
    Squeeze {
        /// Checkpoint to write.
        #[arg(long, default_value = "teacher.safetensors")]
        out: PathBuf,
    },
    /// Build, score and select the initialization patches of every class.
    Rank {
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Directory for per-class pool caches and the selection.
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize a distilled dataset.
    Distill {
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Run directory to create.
        #[arg(long)]
        out: PathBuf,
        /// Replace an existing run directory.
        #[arg(long)]
        force: bool,
        /// Constant-iteration loop (every image trained for all iterations).
        #[arg(long)]
        baseline: bool,
    },
    /// Post-train a student and report top-1 on the validation split.
    Eval {
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Distilled run directory.
        #[arg(long, conflicts_with = "random_real")]
        run: Option<PathBuf>,
        /// Train on this many random real images per class instead.
        #[arg(long)]
        random_real: Option<usize>,
        /// Results table to append to.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Intra-class cosine similarity of a distilled set.
    Diversity {
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        run: PathBuf,
        /// Directory for the series file and chart.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Image-iteration and wall-time report.
    Cost {
        /// Run directories with iteration logs (first is the baseline unless --baseline).
        #[arg(long)]
        run: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        baseline: usize,
        /// Directory for the series file and chart.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a named experiment end to end.
    Reproduce {
        /// digits-ipc10 or cifar10-ipc10
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Download a small benchmark into the data root.
    Fetch {
        /// cifar10 or tiny_imagenet
        dataset: String,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<DeltError>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
