//! File formats, configuration and the command verbs around `diffusion-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod ppm;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use error::{CliError, Result};
