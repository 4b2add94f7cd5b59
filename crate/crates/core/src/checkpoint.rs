//! The checkpoint container: a directory holding the quantizer, model
//! parameters, optimizer state, config snapshot and run metadata.
//!
//! Layout:
//!
//! ```text
//! <dir>/stats.json, codebook.json     frozen Q block (fit-quantizer)
//! <dir>/model.safetensors             E_R, HGST, E_C, decoder
//! <dir>/optimizer.safetensors         Adam moments
//! <dir>/train_state.json              step, epoch, rng, best validation loss
//! <dir>/config.json                   effective run configuration
//! <dir>/VERSION                       tool version that wrote the directory
//! ```

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const MODEL_FILE: &str = "model.safetensors";
pub const OPTIMIZER_FILE: &str = "optimizer.safetensors";
pub const TRAIN_STATE_FILE: &str = "train_state.json";
pub const CONFIG_FILE: &str = "config.json";
pub const VERSION_FILE: &str = "VERSION";

/// Version string in `git describe` style, fixed at build time.
pub fn version_string() -> String {
    format!("vcaug {} ({})", env!("CARGO_PKG_VERSION"), env!("VCAUG_GIT_DESCRIBE"))
}

/// Write `bytes` to a temporary sibling and rename it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    std::io::Write::write_all(&mut tmp, bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::validation(format!("{}: {e}", path.display())))
}

pub fn write_version(dir: &Path) -> Result<()> {
    write_atomic(&dir.join(VERSION_FILE), format!("{}\n", version_string()).as_bytes())
}
