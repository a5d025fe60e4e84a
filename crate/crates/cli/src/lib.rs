//! Configuration-driven runner for the dnpr-core experiments.

pub mod accounting;
pub mod config;
pub mod error;
pub mod figures;
pub mod output;
pub mod run;

pub use config::{parse_config, RunConfig};
pub use error::{CliError, CliResult};
pub use run::{run, ResultEnvelope, RunOutput};
