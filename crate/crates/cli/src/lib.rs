//! Scenario files, run orchestration and CSV output for the `vpcharge`
//! command-line driver.

mod error;
pub mod ladder;
pub mod output;
pub mod run;
pub mod scenario;

pub use error::{CliError, ParseError};
pub use ladder::{cmd_ladder, LadderReport};
pub use run::{cmd_run, RunReport};
pub use scenario::{parse_scenario, Scenario};

pub const EXIT_OK: i32 = 0;
/// Parse, I/O and other failures that are not run outcomes.
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_COLLAPSE: i32 = 2;
pub const EXIT_PRECONDITION: i32 = 3;

/// Environment variable overriding the worker-thread count.
pub const WORKERS_ENV: &str = "VPCHARGE_WORKERS";
