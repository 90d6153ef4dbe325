//! Persistent artifacts: the binary bank container, memory accounting and
//! experiment configuration.

mod bank;
mod config;
mod models;
mod report;

pub use bank::{
    decode_bank, encode_bank, load_bank, load_checkpoint, load_store, save_bank, save_checkpoint, save_store,
    BankHeader, BankRecords, EpisodeBank, NamedArray, BANK_MAGIC, BANK_VERSION,
};
pub use config::{parse_config, parse_config_str, CONFIG_KEYS};
pub use models::{load_models, save_models, ModelManifest, SavedModels};
pub use report::{format_megabytes, memory_report, payload_bytes, MemoryReport};

use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
