//! Filesystem side of the ucloudnet segmentation model: the on-disk image
//! dataset, checkpoint files, run configuration files and report writers.
//! The `ucloudnet` binary is built on top of these.

pub mod config;
pub mod dataset;
pub mod error;
pub mod io;
pub mod report;

pub use error::{Error, Result};
