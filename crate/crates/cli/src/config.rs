//! Effective settings. Precedence: flags > environment > config file > defaults.

use std::path::Path;

use deepinsight_core::corpus::AnnotatorConfig;
use deepinsight_service::ServiceConfig;
use serde::Serialize;

use crate::args::Cli;
use crate::error::CliError;

#[derive(Debug, Clone, Default, Serialize)]
pub struct Settings {
    /// Top-level keys of the config file, plus the gateway, verifier and
    /// judge tables.
    pub service: ServiceConfig,
    /// The `[annotator]` table.
    pub annotator: AnnotatorConfig,
}

impl Settings {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| e.to_string())?;
        let annotator = match table.remove("annotator") {
            Some(v) => v
                .try_into()
                .map_err(|e: toml::de::Error| format!("[annotator]: {e}"))?,
            None => AnnotatorConfig::default(),
        };
        let service = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| e.to_string())?;
        Ok(Self { service, annotator })
    }

    pub fn load(cli: &Cli) -> Result<Self, CliError> {
        let mut s = match &cli.config {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        s.service
            .apply_env(|k| std::env::var(k).ok())
            .map_err(|e| CliError::Usage(e.to_string()))?;
        if let Some(endpoint) = &cli.endpoint {
            s.service.gateway.endpoint = endpoint.clone();
        }
        if let Some(n) = cli.max_in_flight {
            if n == 0 {
                return Err(CliError::Usage("--max-in-flight must be at least 1".into()));
            }
            s.service.gateway.max_in_flight = n;
            s.annotator.max_in_flight = n;
            s.service.judge.max_in_flight = n;
        }
        s.service
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(s)
    }
}
