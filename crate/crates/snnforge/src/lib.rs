//! File formats, configuration and the command pipeline behind the
//! `snnforge` binary.

pub mod commands;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod image_io;
pub mod model_io;
pub mod summary;
pub mod tensor_io;

pub use error::{CliError, Result};
