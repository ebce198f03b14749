//! File formats, checkpoints, run configuration and the command
//! implementations behind the `genrec` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod formats;

pub use config::RunConfig;
pub use error::{Error, Result};
