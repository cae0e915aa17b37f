use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flode::commands::{load_config, run, Command, Invocation};

#[derive(Parser)]
#[command(name = "flode", version, about = "Fit functional linear ODE models and their baselines")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset and its ground truth
    Simulate(Common),
    /// Fit the ODE model to a dataset
    Fit(Common),
    /// Bootstrap bands for the coefficient functions
    Bootstrap(Common),
    /// Export the induced coefficient surfaces
    Surface(Common),
    /// Cross-validated prediction error of each method
    Cv(Common),
    /// Simulation study against the baselines
    Compare(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Fit written by `flode fit`
    #[arg(long)]
    fit: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Cmd::Simulate(a) => (Command::Simulate, a),
        Cmd::Fit(a) => (Command::Fit, a),
        Cmd::Bootstrap(a) => (Command::Bootstrap, a),
        Cmd::Surface(a) => (Command::Surface, a),
        Cmd::Cv(a) => (Command::Cv, a),
        Cmd::Compare(a) => (Command::Compare, a),
    };
    let result = load_config(&args.config, args.seed).and_then(|config| {
        let inv = Invocation {
            config,
            data: args.data,
            fit: args.fit,
            out_dir: args.out,
        };
        run(command, &inv)
    });
    match result {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
