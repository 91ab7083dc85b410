//! Command implementations behind the `ccra` binary and the on-disk formats
//! they use.
//!
//! Exit codes: 0 success, 1 check failure, 2 configuration error, 3 I/O or
//! shape error.

mod commands;
pub mod heatmap;
pub mod run_config;
pub mod tensor_file;

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::error::CcraError;

pub use commands::{cmd_forward, cmd_gradcheck, cmd_heatmap, cmd_params, cmd_variants};
pub use heatmap::{HeatmapFormat, MapSelect};
pub use run_config::{load_run_config, parse_run_config, render_run_config};
pub use tensor_file::{read_tensor, write_tensor};

/// Environment variable that overrides the config seed.
pub const SEED_ENV: &str = "CCRA_SEED";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CliError {
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::CheckFailed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Shape(_) | CliError::Io(_) => 3,
        }
    }
}

impl From<CcraError> for CliError {
    fn from(e: CcraError) -> Self {
        match e.root() {
            CcraError::InvalidConfig(_) | CcraError::UnknownVariant(_) => {
                CliError::Config(e.to_string())
            }
            _ if e.is_shape_error() => CliError::Shape(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

/// The seed that replaces the config file's seed, if any: the flag wins over
/// the environment value.
pub fn seed_override(flag: Option<u64>, env: Option<&str>) -> Result<Option<u64>, CliError> {
    if flag.is_some() {
        return Ok(flag);
    }
    env.map(|v| {
        v.trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{SEED_ENV}='{v}' is not an unsigned integer")))
    })
    .transpose()
}

/// Writes to a temporary file in the target directory, then renames it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Io(format!("cannot write {}: {e}", path.display()));
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}
