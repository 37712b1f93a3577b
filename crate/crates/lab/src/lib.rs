//! File formats, run directories and experiment commands around `tvlab-core`.

#![forbid(unsafe_code)]

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod run;

pub use config::LabConfig;
pub use error::{LabError, Result};
