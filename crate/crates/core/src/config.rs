//! Service configuration: a TOML file with environment overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scheduler::{BatchPolicy, Resource};
use crate::simlab::SimConfig;

pub const DEFAULT_API_PORT: u16 = 7431;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("bad value for {var}: {value}")]
    Env { var: &'static str, value: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApiSection {
    pub bind: String,
    pub port: u16,
    pub token: String,
    /// Directory served under `/console`.
    pub console_dir: Option<PathBuf>,
}

impl Default for ApiSection {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".into(),
            port: DEFAULT_API_PORT,
            token: String::new(),
            console_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySection {
    pub bind: String,
    pub port: u16,
    pub token: String,
}

impl Default for GatewaySection {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".into(),
            port: crate::gateway::DEFAULT_GATEWAY_PORT,
            token: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecordsSection {
    /// Chains live in `<dir>/records/`.
    pub dir: PathBuf,
}

impl Default for RecordsSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("lab-data"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub latency_ms: u64,
    pub fault_rate: f64,
    pub time_scale: f64,
    pub seed: u64,
}

impl Default for SimSection {
    fn default() -> Self {
        let d = SimConfig::default();
        Self {
            latency_ms: d.latency_ms,
            fault_rate: d.fault_rate,
            time_scale: d.time_scale,
            seed: d.seed,
        }
    }
}

impl From<&SimSection> for SimConfig {
    fn from(s: &SimSection) -> Self {
        SimConfig {
            latency_ms: s.latency_ms,
            fault_rate: s.fault_rate,
            time_scale: s.time_scale,
            seed: s.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub api: ApiSection,
    pub gateway: GatewaySection,
    pub scheduler: BatchPolicy,
    pub records: RecordsSection,
    pub sim: SimSection,
    pub resources: Vec<Resource>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            api: ApiSection::default(),
            gateway: GatewaySection::default(),
            scheduler: BatchPolicy::default(),
            records: RecordsSection::default(),
            sim: SimSection::default(),
            resources: default_resources(),
        }
    }
}

/// A small bench: one liquid handler, one plate reader, two GPUs, two operators.
pub fn default_resources() -> Vec<Resource> {
    vec![
        Resource::new("liquid-handler-1", "liquid_handler", 1),
        Resource::new("plate-reader-1", "plate_reader", 1),
        Resource::new("gpu-node-1", "gpu", 2),
        Resource::new("operators", "personnel", 2),
    ]
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    /// Reads `path` if given (defaults otherwise) and applies the environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.to_owned(),
                    source,
                })?;
                Self::parse(&text)?
            }
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    /// Applies `LAB_*` overrides looked up through `var`.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        let port = |name: &'static str, v: String| {
            v.parse::<u16>().map_err(|_| ConfigError::Env {
                var: name,
                value: v,
            })
        };
        if let Some(v) = var("LAB_API_PORT") {
            self.api.port = port("LAB_API_PORT", v)?;
        }
        if let Some(v) = var("LAB_API_TOKEN") {
            self.api.token = v;
        }
        if let Some(v) = var("LAB_GATEWAY_PORT") {
            self.gateway.port = port("LAB_GATEWAY_PORT", v)?;
        }
        if let Some(v) = var("LAB_GATEWAY_TOKEN") {
            self.gateway.token = v;
        }
        if let Some(v) = var("LAB_RECORDS_DIR") {
            self.records.dir = v.into();
        }
        Ok(())
    }
}
