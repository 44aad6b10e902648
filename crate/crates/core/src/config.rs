//! TOML configuration: provider endpoints, model profiles, generation and
//! execution settings. Every field has a default, so an empty file is valid.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::ModelRef;
use crate::gateway::{GatewayOptions, HttpBackend, ProviderEndpoint, RetryPolicy};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub base_url: String,
    pub requests_per_minute: Option<u32>,
    pub timeout_secs: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            base_url: "http://127.0.0.1:8000/v1".into(),
            requests_per_minute: None,
            timeout_secs: 60,
        }
    }
}

/// A named model profile used by the agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelProfile {
    pub provider: String,
    pub model: String,
    #[serde(default = "agent_temperature")]
    pub temperature: f64,
    #[serde(default = "agent_max_tokens")]
    pub max_tokens: u32,
}

fn agent_temperature() -> f64 {
    0.3
}

fn agent_max_tokens() -> u32 {
    2048
}

impl ModelProfile {
    pub fn new(provider: &str, model: &str) -> Self {
        ModelProfile {
            provider: provider.into(),
            model: model.into(),
            temperature: agent_temperature(),
            max_tokens: agent_max_tokens(),
        }
    }

    pub fn model_ref(&self) -> ModelRef {
        ModelRef {
            provider: self.provider.clone(),
            model: self.model.clone(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub reviewer: bool,
    pub max_review_loops: u32,
    /// Models a Prompt node queries when the user names none.
    pub default_models: Vec<String>,
    pub prompt_temperature: f64,
    pub prompt_max_tokens: u32,
    pub samples_per_prompt: u32,
    pub evaluator_language: String,
    pub structured_attempts: u32,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            reviewer: false,
            max_review_loops: 1,
            default_models: vec!["openai/gpt-4o".into(), "anthropic/claude-3-5-sonnet".into()],
            prompt_temperature: 0.7,
            prompt_max_tokens: 512,
            samples_per_prompt: 1,
            evaluator_language: crate::executor::BUILTIN_LANGUAGE.into(),
            structured_attempts: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunnerConfig {
    pub command: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutionConfig {
    pub evaluator_timeout_ms: u64,
    pub parallel_evaluators: bool,
    /// External evaluator runners keyed by language id.
    pub runners: BTreeMap<String, RunnerConfig>,
}

impl Default for ExecutionConfig {
    fn default() -> Self {
        ExecutionConfig { evaluator_timeout_ms: 5000, parallel_evaluators: false, runners: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub providers: BTreeMap<String, ProviderConfig>,
    pub frontend_model: ModelProfile,
    pub backend_model: ModelProfile,
    pub generation: GenerationConfig,
    pub execution: ExecutionConfig,
    pub max_in_flight: usize,
    pub retries: u32,
    pub backoff_ms: u64,
    pub prompts_dir: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            providers: BTreeMap::new(),
            frontend_model: ModelProfile::new("anthropic", "claude-3-5-sonnet"),
            backend_model: ModelProfile::new("openai", "gpt-4o"),
            generation: GenerationConfig::default(),
            execution: ExecutionConfig::default(),
            max_in_flight: 8,
            retries: 3,
            backoff_ms: 500,
            prompts_dir: None,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Config, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
        let mut cfg = Config::from_toml(&text)?;
        if let Some(dir) = &cfg.prompts_dir {
            if dir.is_relative() {
                cfg.prompts_dir = path.parent().map(|p| p.join(dir));
            }
        }
        Ok(cfg)
    }

    pub fn gateway_options(&self) -> GatewayOptions {
        GatewayOptions {
            max_in_flight: self.max_in_flight,
            requests_per_minute: self
                .providers
                .iter()
                .filter_map(|(k, p)| p.requests_per_minute.map(|r| (k.clone(), r)))
                .collect(),
            retry: RetryPolicy { retries: self.retries, base_backoff: Duration::from_millis(self.backoff_ms) },
            ..GatewayOptions::default()
        }
    }

    /// HTTP backend for every configured provider, keys from the environment.
    pub fn http_backend(&self) -> HttpBackend {
        HttpBackend::new(
            self.providers
                .iter()
                .map(|(id, p)| {
                    (id.clone(), ProviderEndpoint::from_env(id, p.base_url.clone(), Duration::from_secs(p.timeout_secs)))
                })
                .collect(),
        )
    }

    pub fn default_models(&self) -> Vec<ModelRef> {
        self.generation
            .default_models
            .iter()
            .filter_map(|label| ModelRef::parse_label(label, &self.backend_model.provider))
            .map(|mut m| {
                m.temperature = self.generation.prompt_temperature;
                m.max_tokens = self.generation.prompt_max_tokens;
                m
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
    }

    #[test]
    fn parses_profiles_and_overrides() {
        let cfg = Config::from_toml(
            r#"
            max_in_flight = 2
            [providers.openai]
            base_url = "https://api.openai.com/v1"
            requests_per_minute = 60

            [backend_model]
            provider = "openai"
            model = "gpt-4o-mini"
            temperature = 0.1

            [generation]
            reviewer = true
            default_models = ["openai/a", "b"]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.backend_model.model, "gpt-4o-mini");
        assert_eq!(cfg.backend_model.max_tokens, 2048);
        assert!(cfg.generation.reviewer);
        assert_eq!(cfg.gateway_options().requests_per_minute["openai"], 60);
        let models = cfg.default_models();
        assert_eq!(models[1].label(), "openai/b");
        assert_eq!(models[0].temperature, 0.7);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::from_toml("reviewer = true").is_err());
    }
}
