//! Files, datasets and the command line around `patchnet-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod image_io;
pub mod report;

pub use error::{Error, Result};
