use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gprg_cli::{commands, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "gprg", version, about = "Rotating GP ground states by preconditioned Riemannian gradient")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Field snapshot: the starting state for `solve`, the analysed state otherwise.
    #[arg(long)]
    field: Option<PathBuf>,
    /// Base output directory (replaces `outputs.directory`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the initial-guess and perturbation seeds.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured stages and write histories, the final field and a summary.
    Solve(Common),
    /// Tangent Hessian eigenvalues, Morse–Bott verdict and pencil bounds of a field.
    Spectrum(Common),
    /// Fixed-step rate experiments around a converged field.
    Rates(Common),
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.outputs.directory = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.apply_seed(seed);
    }
    Ok(cfg)
}

fn required_field(common: &Common) -> Result<&PathBuf, CliError> {
    common
        .field
        .as_ref()
        .ok_or_else(|| CliError::Input("--field is required for this command".into()))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Solve(c) => {
            let mut cfg = load(&c)?;
            if let Some(f) = c.field {
                cfg.initial = gprg_cli::config::InitialConfig::Field { path: f };
            }
            commands::solve(&cfg)
        }
        Command::Spectrum(c) => commands::spectrum(&load(&c)?, required_field(&c)?),
        Command::Rates(c) => commands::rates(&load(&c)?, required_field(&c)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gprg: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
