use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use safecritic_cli::commands;
use safecritic_cli::{Algorithm, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "safecritic", version, about = "Binary safety critic experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; unspecified keys keep their defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set b2e.total_episodes=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train b2e or sbe critics, one run per seed.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides `algorithm` from the configuration.
        #[arg(long, value_parser = ["b2e", "sbe"])]
        algorithm: Option<String>,
        /// Output root (beats `output_dir` and SAFECRITIC_OUTPUT).
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(short, long)]
        quiet: bool,
    },
    /// Grid ground-truth safe sets at the configured resolutions.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Certify fixed points on seeded random finite MDPs.
    Atlas {
        #[command(flatten)]
        common: Common,
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Replace the verifier input with a corrupted candidate set.
        #[arg(long, hide = true)]
        corrupt_verifier: bool,
    },
    /// Evaluate a saved critic checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report directory (default: `eval/` next to the checkpoint).
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Print the effective configuration as TOML.
    PrintConfig {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common, extra: &[String]) -> Result<RunConfig, CliError> {
    let mut overrides = common.overrides.clone();
    overrides.extend_from_slice(extra);
    RunConfig::load(common.config.as_deref(), &overrides)
}

fn run(cli: Cli) -> Result<Option<PathBuf>, CliError> {
    match cli.command {
        Command::Train {
            common,
            algorithm,
            output,
            quiet,
        } => {
            let extra: Vec<String> = algorithm.map(|a| format!("algorithm={a}")).into_iter().collect();
            let config = load(&common, &extra)?;
            commands::cmd_train(&config, output.as_deref(), !quiet).map(Some)
        }
        Command::Oracle { common, output } => {
            let mut config = load(&common, &[])?;
            config.algorithm = Algorithm::Oracle;
            commands::cmd_oracle(&config, output.as_deref()).map(Some)
        }
        Command::Atlas {
            common,
            output,
            corrupt_verifier,
        } => {
            let mut config = load(&common, &[])?;
            config.algorithm = Algorithm::Atlas;
            commands::cmd_atlas(&config, output.as_deref(), corrupt_verifier).map(Some)
        }
        Command::Eval {
            common,
            checkpoint,
            output,
        } => {
            let config = load(&common, &[])?;
            commands::cmd_eval(&config, &checkpoint, output.as_deref()).map(Some)
        }
        Command::PrintConfig { common } => {
            print!("{}", load(&common, &[])?.to_toml());
            Ok(None)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Some(dir)) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
