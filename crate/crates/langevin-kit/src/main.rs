use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use langevin_kit::cli::{self, CliError, EXIT_FAIL, EXIT_PASS};

#[derive(Parser)]
#[command(name = "langevin-kit", version, about = "Run kinetic Langevin discretization experiments from a JSON config")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write results.csv and meta.json.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and validate a config without running it.
    Validate { config: PathBuf },
}

fn run(args: Args) -> Result<i32, CliError> {
    match args.command {
        Command::Validate { config } => {
            let cfg = cli::load_config(&config, None, None)?;
            println!("ok: {:?} experiment, {} timestep(s)", cfg.experiment, cfg.gammas().len());
            Ok(EXIT_PASS)
        }
        Command::Run { config, seed, out } => {
            cli::configure_threads()?;
            let cfg = cli::load_config(&config, seed, out)?;
            let summary = cli::run_config(&cfg)?;
            for note in &summary.notes {
                eprintln!("note: {note}");
            }
            let verdict = if summary.passed { "PASS" } else { "FAIL" };
            println!("{verdict}: results in {}", summary.output.display());
            Ok(if summary.passed { EXIT_PASS } else { EXIT_FAIL })
        }
    }
}

fn main() -> ExitCode {
    let code = match run(Args::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
