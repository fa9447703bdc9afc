//! The kit configuration file, `perspectra.config.json`.
//!
//! ```json
//! {
//!   "endpoints": {
//!     "llama": {"base_url": "http://localhost:8000", "model": "llama-3-8b-instruct", "kind": "generation"},
//!     "embed": {"base_url": "http://localhost:8001", "model": "bge-small", "kind": "embedding"}
//!   },
//!   "defaults": {"temperature": 0.1, "max_tokens": 256, "seed": 42, "max_in_flight": 4},
//!   "paths": {"data_dir": "data"}
//! }
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::llmio::{ClientConfig, EndpointConfig, EndpointKind, GenDefaults, RetryPolicy};
use crate::promptkit::GuideRegistry;

pub const DEFAULT_CONFIG_FILE: &str = "perspectra.config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Defaults {
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: u64,
    pub max_in_flight: usize,
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub timeout_secs: u64,
}

impl Default for Defaults {
    fn default() -> Self {
        let retry = RetryPolicy::default();
        let gen = GenDefaults::default();
        Self {
            temperature: gen.temperature,
            max_tokens: gen.max_tokens,
            seed: gen.seed,
            max_in_flight: 4,
            max_attempts: retry.max_attempts,
            base_delay_ms: retry.base_delay.as_millis() as u64,
            max_delay_ms: retry.max_delay.as_millis() as u64,
            timeout_secs: 120,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Data store directory; relative paths resolve against the config file.
    pub data_dir: Option<PathBuf>,
    /// Optional guide registry override file.
    pub guides: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KitConfig {
    pub endpoints: BTreeMap<String, EndpointConfig>,
    pub defaults: Defaults,
    pub paths: Paths,
    /// Directory the config was loaded from.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl KitConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let config: KitConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut config = Self::from_json(&text, &path.display().to_string())?;
        config.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.defaults;
        if d.max_tokens < 1 {
            return Err(ConfigError::Invalid("defaults.max_tokens must be at least 1".into()));
        }
        if d.temperature.is_nan() || d.temperature < 0.0 {
            return Err(ConfigError::Invalid("defaults.temperature must be non-negative".into()));
        }
        if d.max_in_flight < 1 || d.max_attempts < 1 {
            return Err(ConfigError::Invalid(
                "defaults.max_in_flight and defaults.max_attempts must be at least 1".into(),
            ));
        }
        for (name, ep) in &self.endpoints {
            if ep.base_url.trim().is_empty() || ep.model.trim().is_empty() {
                return Err(ConfigError::Invalid(format!("endpoint {name:?} needs base_url and model")));
            }
        }
        Ok(())
    }

    /// The named endpoint, which must be of `kind`.
    pub fn endpoint(&self, name: &str, kind: EndpointKind) -> Result<&EndpointConfig, ConfigError> {
        let ep = self
            .endpoints
            .get(name)
            .ok_or_else(|| ConfigError::UnknownEndpoint(name.to_string()))?;
        if ep.kind != kind {
            return Err(ConfigError::WrongKind {
                name: name.to_string(),
                expected: kind.as_str(),
                actual: ep.kind.as_str(),
            });
        }
        Ok(ep)
    }

    /// The named endpoint, or the first (by name) of `kind` when `name` is `None`.
    pub fn resolve(&self, name: Option<&str>, kind: EndpointKind) -> Result<(String, &EndpointConfig), ConfigError> {
        match name {
            Some(n) => Ok((n.to_string(), self.endpoint(n, kind)?)),
            None => self
                .endpoints
                .iter()
                .find(|(_, ep)| ep.kind == kind)
                .map(|(n, ep)| (n.clone(), ep))
                .ok_or(ConfigError::NoEndpoint(kind.as_str())),
        }
    }

    pub fn client_config(&self, api_key: Option<String>) -> ClientConfig {
        let d = &self.defaults;
        ClientConfig {
            retry: RetryPolicy {
                max_attempts: d.max_attempts,
                base_delay: Duration::from_millis(d.base_delay_ms),
                max_delay: Duration::from_millis(d.max_delay_ms),
                ..RetryPolicy::default()
            },
            max_in_flight: d.max_in_flight,
            timeout: Duration::from_secs(d.timeout_secs),
            api_key,
        }
    }

    pub fn gen_defaults(&self) -> GenDefaults {
        GenDefaults {
            max_tokens: self.defaults.max_tokens,
            temperature: self.defaults.temperature,
            seed: self.defaults.seed,
        }
    }

    fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.resolve_path(self.paths.data_dir.as_deref().unwrap_or(Path::new("data")))
    }

    pub fn guide_registry(&self) -> Result<GuideRegistry, ConfigError> {
        let Some(path) = &self.paths.guides else {
            return Ok(GuideRegistry::default());
        };
        let path = self.resolve_path(path);
        let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        GuideRegistry::with_overrides(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}
