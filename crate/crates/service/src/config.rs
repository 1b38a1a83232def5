use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub const ENV_PORT: &str = "HISTOLOOP_PORT";
pub const ENV_DATA_ROOT: &str = "HISTOLOOP_DATA_ROOT";
pub const ENV_BIND: &str = "HISTOLOOP_BIND";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("{var}={value:?} is not valid: {reason}")]
    Env { var: &'static str, value: String, reason: String },
}

/// Service settings. Read from a TOML file, then overridden by
/// `HISTOLOOP_PORT`, `HISTOLOOP_DATA_ROOT` and `HISTOLOOP_BIND`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    /// 0 picks a free port; the bound address is printed on startup.
    pub port: u16,
    pub data_root: PathBuf,
    /// k for new sessions when the request does not give one.
    pub default_k: usize,
    pub default_seed: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { bind: "127.0.0.1".into(), port: 8750, data_root: PathBuf::from("data"), default_k: 32, default_seed: 0 }
    }
}

impl ServiceConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        toml::from_str(&text).map_err(|source| ConfigError::Parse { path: path.into(), source })
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = get(ENV_PORT) {
            self.port = v.parse().map_err(|e: std::num::ParseIntError| ConfigError::Env {
                var: ENV_PORT,
                value: v.clone(),
                reason: e.to_string(),
            })?;
        }
        if let Some(v) = get(ENV_DATA_ROOT) {
            self.data_root = PathBuf::from(v);
        }
        if let Some(v) = get(ENV_BIND) {
            self.bind = v;
        }
        Ok(())
    }

    /// File (if any) plus process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut config = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        config.apply_env(|k| std::env::var(k).ok())?;
        Ok(config)
    }
}
