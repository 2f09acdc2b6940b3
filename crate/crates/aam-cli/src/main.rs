//! `aam` — corpus generation, reward-model training with adaptive
//! margins, evaluation, gradient checking, and run comparison.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use aam_cli::commands;
use aam_cli::config::{KvConfig, Reader};
use aam_cli::error::Result;

#[derive(Parser)]
#[command(name = "aam", version, about = "Reward modeling with act-adaptive margins")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Flat key=value config file; omit to run on defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key after the file (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory for artifacts and the run manifest.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Shorthand for --set seed=N.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic preference corpus with a planted reward.
    GenData(RunArgs),
    /// Train the reward model under the configured margin mode.
    Train(RunArgs),
    /// Evaluate a checkpoint on a held-out corpus.
    Eval(RunArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(RunArgs),
    /// Compare evaluation reports sharing one corpus.
    Compare(RunArgs),
}

fn build_reader(args: &RunArgs) -> Result<Reader> {
    let mut cfg = match &args.config {
        Some(path) => KvConfig::load(path)?,
        None => KvConfig::default(),
    };
    cfg.apply_overrides(&args.set)?;
    if let Some(seed) = args.seed {
        cfg.set("seed", seed.to_string());
    }
    Ok(Reader::new(cfg))
}

fn run(cli: Cli) -> Result<String> {
    let (args, runner): (&RunArgs, fn(Reader, &std::path::Path) -> Result<String>) =
        match &cli.command {
            Command::GenData(a) => (a, commands::gen_data),
            Command::Train(a) => (a, commands::train),
            Command::Eval(a) => (a, commands::eval),
            Command::Gradcheck(a) => (a, commands::gradcheck),
            Command::Compare(a) => (a, commands::compare),
        };
    std::fs::create_dir_all(&args.out)?;
    let reader = build_reader(args)?;
    runner(reader, &args.out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: class={}: {err}", err.class());
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
