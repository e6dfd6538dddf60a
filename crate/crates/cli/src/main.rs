//! `zstar`: command-line driver for the toy style-transfer pipeline.

mod commands;
mod error;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "zstar",
    version,
    about = "Zero-shot style transfer with a toy diffusion model"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output root. Defaults to $ZSTAR_OUT, then `./out`.
    #[arg(long, global = true, env = "ZSTAR_OUT", default_value = "out")]
    out: PathBuf,
    /// Force single-threaded, order-fixed reductions. The current
    /// implementation is always single-threaded, so this only documents
    /// intent in scripts.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Log verbosity (`error`, `warn`, `info`, `debug`).
    #[arg(long, global = true, default_value = "info")]
    log: String,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic content and style families as PNGs.
    GenData(commands::GenData),
    /// Train the denoiser on a generated dataset.
    Train(commands::Train),
    /// DDIM-invert an image and store its latent trajectory.
    Invert(commands::Invert),
    /// Sample an image from a stored trajectory or from seeded noise.
    Sample(commands::Sample),
    /// Stylize a content image with one or more style images.
    Transfer(commands::Transfer),
    /// Sweep injection settings and tabulate the metrics.
    Ablate(commands::Ablate),
    /// Run the self-contained invariant suite.
    Verify(commands::Verify),
    /// Check sweep orderings or write attention diagnostics.
    Analyze(commands::Analyze),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    match &cli.command {
        Command::GenData(c) => c.run(g),
        Command::Train(c) => c.run(g),
        Command::Invert(c) => c.run(g),
        Command::Sample(c) => c.run(g),
        Command::Transfer(c) => c.run(g),
        Command::Ablate(c) => c.run(g),
        Command::Verify(c) => c.run(g),
        Command::Analyze(c) => c.run(g),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.global.log)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
