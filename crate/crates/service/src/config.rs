use std::fmt;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use deepinsight_core::gateway::GatewayConfig;
use deepinsight_core::judge::JudgeConfig;
use deepinsight_core::reward::VerifierConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Trainer-side default group size.
pub const DEFAULT_GROUP_SIZE: usize = 16;

pub const DEFAULT_TOKEN_ENV: &str = "DEEPINSIGHT_SERVICE_TOKEN";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid value for {var}: {message}")]
    Env { var: &'static str, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub gateway: GatewayConfig,
    pub verifier: VerifierConfig,
    pub judge: JudgeConfig,
    /// Largest accepted rollout group (G).
    pub group_size: usize,
    pub audit_dir: PathBuf,
    /// Idle time after which an unscored lease returns to the queue.
    pub lease_ttl_secs: u64,
    /// Every request answers within this budget or gets a 503.
    pub request_timeout_ms: u64,
    /// Environment variable holding the shared bearer token. Auth is off
    /// when the variable is unset.
    pub token_env: String,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            gateway: GatewayConfig::default(),
            verifier: VerifierConfig::default(),
            judge: JudgeConfig::default(),
            group_size: DEFAULT_GROUP_SIZE,
            audit_dir: PathBuf::from("audit-store"),
            lease_ttl_secs: 900,
            request_timeout_ms: 300_000,
            token_env: DEFAULT_TOKEN_ENV.into(),
        }
    }
}

impl ServiceConfig {
    /// Defaults, overlaid with the TOML file if given, then with
    /// `DEEPINSIGHT_BIND`, `DEEPINSIGHT_ENDPOINT` and `DEEPINSIGHT_AUDIT_DIR`.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ConfigError::Read {
                    path: p.to_path_buf(),
                    message: e.to_string(),
                })?;
                toml::from_str(&text).map_err(|e| ConfigError::Parse {
                    path: p.to_path_buf(),
                    message: e.to_string(),
                })?
            }
            None => Self::default(),
        };
        config.apply_env(|k| std::env::var(k).ok())?;
        config.validate()?;
        Ok(config)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = get("DEEPINSIGHT_BIND") {
            self.bind = v
                .parse()
                .map_err(|e: std::net::AddrParseError| ConfigError::Env {
                    var: "DEEPINSIGHT_BIND",
                    message: e.to_string(),
                })?;
        }
        if let Some(v) = get("DEEPINSIGHT_ENDPOINT") {
            self.gateway.endpoint = v;
        }
        if let Some(v) = get("DEEPINSIGHT_AUDIT_DIR") {
            self.audit_dir = PathBuf::from(v);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.group_size == 0 {
            return Err(ConfigError::Invalid("group_size must be at least 1".into()));
        }
        if self.request_timeout_ms == 0 {
            return Err(ConfigError::Invalid(
                "request_timeout_ms must be positive".into(),
            ));
        }
        if self.gateway.max_in_flight == 0 {
            return Err(ConfigError::Invalid(
                "gateway.max_in_flight must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn request_timeout(&self) -> Duration {
        Duration::from_millis(self.request_timeout_ms)
    }

    pub fn lease_ttl(&self) -> Duration {
        Duration::from_secs(self.lease_ttl_secs)
    }

    pub fn bearer_token(&self) -> Option<BearerToken> {
        std::env::var(&self.token_env)
            .ok()
            .filter(|t| !t.is_empty())
            .map(BearerToken)
    }
}

/// Shared secret for the API. Never printed.
#[derive(Clone)]
pub struct BearerToken(String);

impl BearerToken {
    pub fn new(token: impl Into<String>) -> Self {
        Self(token.into())
    }

    /// Length-independent comparison against an `Authorization` header value.
    pub fn matches_header(&self, header: &str) -> bool {
        let Some(given) = header.strip_prefix("Bearer ") else {
            return false;
        };
        let (a, b) = (given.as_bytes(), self.0.as_bytes());
        let mut diff = a.len() ^ b.len();
        for i in 0..a.len().max(b.len()) {
            diff |= (a.get(i).copied().unwrap_or(0) ^ b.get(i).copied().unwrap_or(0)) as usize;
        }
        diff == 0
    }
}

impl fmt::Debug for BearerToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("BearerToken(***)")
    }
}
