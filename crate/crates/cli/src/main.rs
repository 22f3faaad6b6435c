mod commands;
mod exit;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

use exit::{CliError, Code};

/// Fit, apply and compare I-prior regression models.
#[derive(Parser)]
#[command(name = "iprior", version, about)]
struct Cli {
    /// More log output (-v info, -vv debug). `RUST_LOG` overrides.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model described by a config file and write its artifacts.
    Fit {
        config: PathBuf,
        /// Output directory (overrides `[output] dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict at the rows of a CSV with a saved model.
    Predict {
        model: PathBuf,
        data: PathBuf,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit several configs on the same data and rank them by BIC.
    Compare {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        /// Also write the comparison as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump the centered training Gram of one covariate.
    Gram {
        config: PathBuf,
        #[arg(long)]
        covariate: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("IPRIOR_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::new(Code::Config, format!("IPRIOR_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::new(Code::Config, e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Fit { config, out } => commands::cmd_fit(&config, out),
        Command::Predict { model, data, out } => commands::cmd_predict(&model, &data, out.as_deref()),
        Command::Compare { configs, out } => commands::cmd_compare(&configs, out.as_deref()),
        Command::Gram { config, covariate, out } => commands::cmd_gram(&config, &covariate, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
