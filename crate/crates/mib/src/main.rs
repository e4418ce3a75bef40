use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mib::commands::{self, Options};
use mib::reproduce::Suite;

/// Background-modeled losses for incremental and weakly-supervised
/// segmentation on synthetic scenes.
#[derive(Debug, Parser)]
#[command(name = "mib", version)]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training seed; base seed of `gradcheck`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 is the reference mode.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    threads: u16,
    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic dataset described by the config.
    Generate,
    /// Train every step of the configured run.
    Train,
    /// Score a saved checkpoint on the test scenes.
    Eval {
        /// Step to evaluate; the last saved one by default.
        #[arg(long)]
        step: Option<usize>,
    },
    /// Check every loss gradient and the model backward pass.
    Gradcheck,
    /// Run the seeded benchmark suites and check their outcomes.
    Reproduce {
        #[arg(value_enum)]
        suite: Suite,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let opts = Options {
        config: cli.config,
        seed: cli.seed,
        threads: usize::from(cli.threads),
        out: cli.out,
    };
    let mut out = std::io::stdout().lock();
    let result = match cli.command {
        Command::Generate => commands::generate(&opts, &mut out).map(drop),
        Command::Train => commands::train(&opts, &mut out).map(drop),
        Command::Eval { step } => commands::eval(&opts, step, &mut out).map(drop),
        Command::Gradcheck => commands::gradcheck(&opts, &mut out).map(drop),
        Command::Reproduce { suite } => commands::reproduce(&opts, suite, &mut out).map(drop),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
