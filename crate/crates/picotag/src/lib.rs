//! File formats, configuration and command workflows around `picotag-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod word2vec;

pub use config::RunConfig;
pub use error::{CliError, ErrorKind};
