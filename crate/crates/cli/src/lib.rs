//! Pipeline orchestration for the `crossview-heat` command.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod pipeline;
mod stages;

pub use cli::{execute, Cli, Command, Outcome};
pub use error::{CliError, Result};
pub use pipeline::{Pipeline, RunManifest, Stage, StageStatus};
pub use stages::associate_files;
