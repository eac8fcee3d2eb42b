use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};

use madec_cli::commands::{self, Fault, ParityArgs};
use madec_cli::exit::CliError;

#[derive(Parser)]
#[command(name = "madec", version, about = "Modality-adaptive contrastive decoding on a synthetic benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode the configured suite and write metrics, traces and a manifest.
    Run {
        config: PathBuf,
        /// Run directory; overrides `output_dir` from the config.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Evaluate the configured strategy over a list of gammas.
    Sweep {
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<f64>>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Per-category weight distribution and prompt robustness.
    Weights {
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare a bridge against the in-process synthetic provider.
    Parity {
        #[arg(long)]
        address: Option<String>,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Spec JSON; a random spec from `--seed` otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        timeout_ms: u64,
        /// Bridge command and arguments, after `--`.
        #[arg(last = true)]
        command: Vec<String>,
    },
    /// Rebuild the suite and re-verify every certificate.
    SuiteCheck { config: PathBuf },
    /// Re-decode traces of a finished run and compare.
    Replay {
        run_dir: PathBuf,
        /// Check every trace instead of one per category.
        #[arg(long)]
        all: bool,
    },
    /// Serve a synthetic spec over the wire protocol (stdio unless `--listen`).
    MockBridge {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, value_enum)]
        fault: Option<Fault>,
        #[arg(long)]
        listen: Option<String>,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, output } => commands::run(&config, output.as_deref()).map(drop),
        Command::Sweep { config, gammas, output } => commands::sweep(&config, gammas, output.as_deref()).map(drop),
        Command::Weights { config, output } => commands::weights(&config, output.as_deref()).map(drop),
        Command::Parity {
            address,
            n,
            seed,
            spec,
            timeout_ms,
            command,
        } => commands::parity(ParityArgs {
            command: &command,
            address: address.as_deref(),
            n,
            seed,
            spec: spec.as_deref(),
            timeout: Duration::from_millis(timeout_ms),
        })
        .map(drop),
        Command::SuiteCheck { config } => commands::suite_check(&config),
        Command::Replay { run_dir, all } => commands::replay(&run_dir, all),
        Command::MockBridge { seed, spec, fault, listen } => commands::mock_bridge(seed, spec.as_deref(), fault, listen.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // clap uses 2 for usage errors, which is also our config code.
            return ExitCode::from(if e.use_stderr() { madec_cli::exit::CONFIG } else { madec_cli::exit::OK });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
