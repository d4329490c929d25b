//! `gateway.toml`.
//!
//! ```toml
//! state_dir = "state"            # created if missing; DADA_STATE_DIR overrides
//! context = "context.json"
//! mud_dir = "mud"
//! window_len_s = 60
//! unmanaged = "allow_log"         # allow_log | allow | drop
//! listen = "127.0.0.1:8080"
//! bus = "mqtt://127.0.0.1:1883"   # optional
//!
//! [profiler]
//! alert_threshold = 3.0
//! isolate_threshold = 6.0
//! identification_gate = 4.0
//! ```
//!
//! Relative paths resolve against the directory holding the config file.

use std::fs;
use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use dada_core::datapath::UnmanagedPolicy;
use dada_core::profiler::ProfilerConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const STATE_DIR_ENV: &str = "DADA_STATE_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid `{key}`: {message}")]
    Invalid { key: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    #[serde(default = "default_state_dir")]
    pub state_dir: PathBuf,
    pub context: PathBuf,
    pub mud_dir: PathBuf,
    #[serde(default)]
    pub profiler: ProfilerConfig,
    #[serde(default = "default_window_len")]
    pub window_len_s: u64,
    #[serde(default)]
    pub unmanaged: UnmanagedPolicy,
    #[serde(default)]
    pub bus: Option<String>,
    #[serde(default = "default_listen")]
    pub listen: SocketAddr,
}

fn default_state_dir() -> PathBuf {
    PathBuf::from("state")
}

fn default_window_len() -> u64 {
    60
}

fn default_listen() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 8080))
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

impl GatewayConfig {
    /// Parses and validates `text`. Relative paths resolve against `path`'s directory.
    pub fn from_toml(text: &str, path: &Path, state_override: Option<PathBuf>) -> Result<Self, ConfigError> {
        let mut cfg: GatewayConfig = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
            ConfigError::Parse {
                path: path.to_path_buf(),
                line,
                column,
                message: e.message().to_string(),
            }
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(dir) = state_override {
            cfg.state_dir = dir;
        }
        for p in [&mut cfg.state_dir, &mut cfg.context, &mut cfg.mud_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = &self.profiler;
        for (key, v) in [
            ("profiler.alert_threshold", p.alert_threshold),
            ("profiler.isolate_threshold", p.isolate_threshold),
            ("profiler.identification_gate", p.identification_gate),
        ] {
            if v.is_nan() || v <= 0.0 {
                return Err(ConfigError::Invalid {
                    key: key.into(),
                    message: format!("must be > 0, got {v}"),
                });
            }
        }
        if self.window_len_s == 0 {
            return Err(ConfigError::Invalid {
                key: "window_len_s".into(),
                message: "must be > 0".into(),
            });
        }
        if let Some(bus) = &self.bus {
            parse_bus_endpoint(bus)?;
        }
        Ok(())
    }
}

/// `mqtt://host:port` or `host:port` (port defaults to 1883).
pub fn parse_bus_endpoint(s: &str) -> Result<(String, u16), ConfigError> {
    let invalid = |m: &str| ConfigError::Invalid {
        key: "bus".into(),
        message: format!("{m}: {s:?}"),
    };
    let rest = s.strip_prefix("mqtt://").unwrap_or(s);
    let (host, port) = match rest.rsplit_once(':') {
        Some((h, p)) => (h, p.parse().map_err(|_| invalid("bad port"))?),
        None => (rest, 1883),
    };
    if host.is_empty() {
        return Err(invalid("missing host"));
    }
    Ok((host.to_string(), port))
}

/// Reads the config file, applies `DADA_STATE_DIR` and creates the state directory.
pub fn load_config(path: &Path) -> Result<GatewayConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let state_override = std::env::var_os(STATE_DIR_ENV).map(PathBuf::from);
    let cfg = GatewayConfig::from_toml(&text, path, state_override)?;
    fs::create_dir_all(&cfg.state_dir).map_err(|source| ConfigError::Io {
        path: cfg.state_dir.clone(),
        source,
    })?;
    Ok(cfg)
}
