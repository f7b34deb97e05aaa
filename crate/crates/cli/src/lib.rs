//! Library side of the `riskloop` binary: configuration and task loading,
//! and the run / sweep / report / replay commands.

pub mod commands;
pub mod tasks;

use std::path::{Path, PathBuf};

use riskloop_core::engine::EngineConfig;
use riskloop_core::error::CoreError;
use riskloop_core::providers::ProviderError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("tasks {path}: {message}")]
    Tasks { path: PathBuf, message: String },
    #[error("unknown sweep parameter {0:?} (expected one of N, tau_sim, K_max, R, lambda, beta)")]
    UnknownParam(String),
    #[error("bad sweep value {0:?}")]
    BadValue(String),
    #[error("no trace files in {0}")]
    NoTraces(PathBuf),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("provider: {0}")]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("replay found {0} inconsistent trace file(s)")]
    ReplayMismatch(usize),
}

pub(crate) fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

/// Reads a flat TOML file whose keys are engine config fields. Missing keys
/// take their defaults; unknown keys are rejected.
pub fn load_config(path: Option<&Path>) -> Result<EngineConfig, CliError> {
    let Some(path) = path else {
        return Ok(EngineConfig::default());
    };
    let config_err = |message: String| CliError::Config {
        path: path.to_path_buf(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| config_err(e.to_string()))?;
    let cfg: EngineConfig = toml::from_str(&text).map_err(|e| config_err(e.to_string().trim_end().to_string()))?;
    cfg.validate().map_err(|e| config_err(e.to_string()))?;
    Ok(cfg)
}
