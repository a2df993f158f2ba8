//! Command-line pipeline for toy distribution matching distillation: TOML
//! configuration, binary checkpoints, and the stage commands that chain
//! teacher training, pair generation, distillation, sampling and evaluation
//! through one output directory.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;

pub use checkpoint::{Checkpoint, CheckpointError, CheckpointMeta, CheckpointRole};
pub use commands::Run;
pub use config::RunConfig;
pub use error::{CliError, CliResult};
