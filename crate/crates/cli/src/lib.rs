//! Batch front end of the `parabolic` crate: TOML configuration, one runner
//! per subcommand and atomic CSV, SVG and JSON output.

// `!(x > 0.0)` is how NaN gets rejected along with the rest
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod report;
pub mod run;

use std::path::{Path, PathBuf};

pub use config::{load_config, parse_config, ConfigError, RunConfig};
pub use report::{emit, loglog_svg, Artifact, Outcome};
pub use run::{run, Command, RunError};

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CRITERIA: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Command-line overrides applied on top of the configuration file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// Runs `command`, writes its outputs and returns the exit code together
/// with the line to print.
pub fn execute(command: Command, cfg: &RunConfig, ov: &Overrides) -> (i32, String) {
    let mut cfg = cfg.clone();
    if ov.seed.is_some() {
        cfg.seed = ov.seed;
    }
    let dir = ov.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let outcome = match run(command, &cfg) {
        Ok(o) => o,
        Err(RunError::Usage(m)) => return (EXIT_USAGE, format!("{}: {m}", command.as_str())),
        Err(RunError::Failed(m)) => return (EXIT_CRITERIA, format!("{}: {m}", command.as_str())),
    };
    match emit(&outcome, &dir, cfg.seed) {
        Ok(_) => {
            let code = if outcome.passed() { EXIT_OK } else { EXIT_CRITERIA };
            (code, outcome.summary_line(&dir))
        }
        Err(m) => (EXIT_CRITERIA, format!("{}: output rejected: {m}", command.as_str())),
    }
}

/// Configuration from `path`, or the defaults when there is none.
pub fn config_or_default(path: Option<&Path>) -> Result<RunConfig, ConfigError> {
    path.map_or_else(|| Ok(RunConfig::default()), load_config)
}
