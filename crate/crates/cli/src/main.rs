use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "liaison", version, about = "Constrained Lagrangian mechanics runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a scenario file and write trajectory and summary files.
    Run {
        /// Scenario file (TOML)
        file: PathBuf,
        /// Output directory
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Run a scenario under two reaction models and report the divergence.
    Compare {
        /// Scenario file (TOML)
        file: PathBuf,
        /// First model: ideal | appell_chetaev | vakonomic | parametric
        #[arg(long)]
        model_a: String,
        /// Second model: ideal | appell_chetaev | vakonomic | parametric
        #[arg(long)]
        model_b: String,
        /// Output directory
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Parse and check a scenario without integrating.
    Validate {
        /// Scenario file (TOML)
        file: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { file, output } => liaison_cli::commands::run(&file, &output),
        Command::Compare {
            file,
            model_a,
            model_b,
            output,
        } => liaison_cli::commands::compare(&file, &model_a, &model_b, &output),
        Command::Validate { file } => {
            let mut stdout = std::io::stdout();
            liaison_cli::commands::validate(&file, &mut stdout)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
