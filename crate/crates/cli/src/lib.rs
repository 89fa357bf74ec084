//! Library side of the `paranet` command: run configuration, checkpoints,
//! dataset ingestion, training, synthesis, benchmarking and analysis.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod infer;
pub mod models;
pub mod toy;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{ModelKind, Preset, RunConfig};
pub use error::{CliError, CliResult};
