//! Checkpoint and text file helpers.

use std::fs;
use std::path::Path;

use ucloudnet_core::checkpoint;
use ucloudnet_core::train::{RunConfig, TrainState};
use ucloudnet_core::{DType, Element};

use crate::error::{Error, Result};

/// Writes through a temporary sibling and renames it into place, so a reader
/// never sees a half-written file and the previous version survives a crash.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint<T: Element>(path: &Path, state: &TrainState<T>, cfg: &RunConfig) -> Result<()> {
    write_atomic(path, &checkpoint::encode(state, cfg))
}

pub fn peek_checkpoint(path: &Path) -> Result<(RunConfig, DType)> {
    Ok(checkpoint::peek(&read(path)?)?)
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<(TrainState<T>, RunConfig)> {
    let bytes = read(path)?;
    checkpoint::decode(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
