//! Configuration, run ledger and experiment stages behind the `tapm` binary.

pub mod config;
pub mod error;
pub mod ledger;
pub mod pipeline;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
pub use pipeline::Context;
