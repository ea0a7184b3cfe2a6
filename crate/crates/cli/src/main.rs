use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hrhf_cli::{cmd_ablate, cmd_eval, cmd_gen_data, cmd_invert, cmd_train, CliError, CliResult, RunConfig, Study};

#[derive(Parser)]
#[command(name = "hrhf", version, about = "Class-incremental segmentation with inverted replay")]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render train and test scenes with a manifest.
    GenData,
    /// Train every step of the configured method.
    Train,
    /// Synthesize fake samples from a checkpoint.
    Invert {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate a checkpoint on the test scenes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare variants of one design choice.
    Ablate {
        #[arg(long, value_enum)]
        study: Option<Study>,
    },
}

fn run(cli: Cli) -> CliResult<PathBuf> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out = o;
    }
    match cli.command {
        Command::GenData => cmd_gen_data(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Invert { checkpoint } => cmd_invert(&cfg, &checkpoint),
        Command::Eval { checkpoint } => cmd_eval(&cfg, &checkpoint).map(|(p, _)| p),
        Command::Ablate { study } => {
            if let Some(s) = study {
                cfg.ablate.study = s;
            }
            cmd_ablate(&cfg).map(|(p, _)| p)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(path) => {
            println!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let e: CliError = e;
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
