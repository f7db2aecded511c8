//! `graphdg` command line: generate synthetic multi-domain graphs, train,
//! evaluate, ablate, diagnose shift, and verify gradients.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use graphdg::cli;
use graphdg::meta::AblationMode;

#[derive(Parser)]
#[command(name = "graphdg", version, about = "Meta-learned domain generalization on graphs")]
struct Args {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write one graph file per configured domain plus a manifest.
    Generate,
    /// Meta-train on the scenario's source graphs.
    Train {
        /// Continue from a checkpoint, keeping epoch numbering.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune a checkpoint on a target graph over a sweep of step counts.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Comma-separated step counts; defaults to the config's sweep.
        #[arg(long, value_delimiter = ',')]
        steps: Vec<usize>,
    },
    /// Compare training variants over the configured seed set.
    Ablate {
        /// Restrict to a comma-separated subset of modes.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<String>,
    },
    /// Energy scores, pairwise JS distances, and embedding exports.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated graph files.
        #[arg(long, value_delimiter = ',')]
        graphs: Vec<PathBuf>,
    },
    /// Finite-difference check of every hand-derived gradient.
    Gradcheck,
}

fn require_config(args: &Args) -> graphdg::Result<cli::RunConfig> {
    let path = args
        .config
        .as_ref()
        .ok_or_else(|| graphdg::Error::Config("this command needs --config".into()))?;
    cli::load_run_config(path, args.seed, args.out.clone())
}

fn require_out(args: &Args) -> graphdg::Result<PathBuf> {
    args.out
        .clone()
        .ok_or_else(|| graphdg::Error::Config("this command needs --out".into()))
}

fn run(args: &Args) -> graphdg::Result<bool> {
    match &args.command {
        Command::Generate => {
            cli::cmd_generate(&require_config(args)?, args.force)?;
            Ok(true)
        }
        Command::Train { resume } => {
            cli::cmd_train(&require_config(args)?, args.force, resume.as_deref())?;
            Ok(true)
        }
        Command::Eval {
            checkpoint,
            target,
            steps,
        } => {
            let out = require_out(args)?;
            cli::cmd_eval(checkpoint, target, steps, &out, args.force, args.seed)?;
            Ok(true)
        }
        Command::Ablate { modes } => {
            let filter = if modes.is_empty() {
                None
            } else {
                Some(
                    modes
                        .iter()
                        .map(|m| m.parse::<AblationMode>())
                        .collect::<graphdg::Result<Vec<_>>>()?,
                )
            };
            cli::cmd_ablate(&require_config(args)?, args.force, filter.as_deref())?;
            Ok(true)
        }
        Command::Diagnose { checkpoint, graphs } => {
            let out = require_out(args)?;
            cli::cmd_diagnose(checkpoint, graphs, &out, args.force)?;
            Ok(true)
        }
        Command::Gradcheck => cli::cmd_gradcheck(&mut std::io::stdout()),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let args = Args::parse();
    match run(&args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}
