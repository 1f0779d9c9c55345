use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use parabolic_cli::{config_or_default, execute, Command, Overrides, EXIT_USAGE};

/// Thread count of the worker pool; the machine's core count when unset.
const THREADS_VAR: &str = "PARABOLIC_THREADS";

#[derive(Parser)]
#[command(name = "parabolic", version, about = "Parabolic maximal functions, weights, truncation and solver studies")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(clap::Args)]
struct Common {
    /// TOML configuration (`schema = 1`); defaults when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory, overriding `out` in the configuration.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Random seed, overriding `seed` in the configuration.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Sub {
    /// Maximal function of the forcing.
    Maximal(Common),
    /// Weight built from the maximal function and its A_p constants.
    Weights(Common),
    /// Whitney cover of a level set of the maximal function.
    Whitney(Common),
    /// Lipschitz truncation along a level ladder.
    Truncate(Common),
    /// Nonlinear solve.
    Solve(Common),
    /// One of the built-in studies.
    Study(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common) = match cli.command {
        Sub::Maximal(c) => (Command::Maximal, c),
        Sub::Weights(c) => (Command::Weights, c),
        Sub::Whitney(c) => (Command::Whitney, c),
        Sub::Truncate(c) => (Command::Truncate, c),
        Sub::Solve(c) => (Command::Solve, c),
        Sub::Study(c) => (Command::Study, c),
    };
    if let Ok(v) = std::env::var(THREADS_VAR) {
        let n = match v.parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => {
                eprintln!("{THREADS_VAR} must be a positive integer, got `{v}`");
                return ExitCode::from(EXIT_USAGE as u8);
            }
        };
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("cannot size the worker pool: {e}");
            return ExitCode::from(EXIT_USAGE as u8);
        }
    }
    let cfg = match config_or_default(common.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(EXIT_USAGE as u8);
        }
    };
    let (code, line) = execute(command, &cfg, &Overrides { out: common.out, seed: common.seed });
    if code == 0 {
        println!("{line}");
    } else {
        eprintln!("{line}");
    }
    ExitCode::from(code as u8)
}
