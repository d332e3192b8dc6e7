//! Project configuration, read from TOML.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::BackendProfile;
use crate::prompting::{PreventivePreamble, PromptKit};
use crate::repair::RepairConfig;
use crate::sandbox::ToolchainConfig;
use crate::stage::DEFAULT_RETRY_LIMIT;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("config key `{key}`: {message}")]
pub struct ConfigError {
    /// The offending key, or empty when the file as a whole is bad.
    pub key: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockKind {
    /// Ticks once per reading; runs are reproducible.
    #[default]
    Logical,
    Wall,
}

fn default_language() -> String {
    "python".into()
}

fn default_retry_limit() -> u32 {
    DEFAULT_RETRY_LIMIT
}

fn default_exemplar_k() -> usize {
    PromptKit::DEFAULT_EXEMPLAR_K
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectConfig {
    #[serde(default = "default_language")]
    pub language: String,
    /// Profile used by stages without an entry in `stage_backends`.
    pub backend: String,
    pub backends: Vec<BackendProfile>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub stage_backends: BTreeMap<String, String>,
    #[serde(default = "default_retry_limit")]
    pub retry_limit: u32,
    #[serde(default = "default_exemplar_k")]
    pub exemplar_k: usize,
    /// Run the generated unit tests after integration.
    #[serde(default = "default_true")]
    pub run_unit_tests: bool,
    #[serde(default)]
    pub clock: ClockKind,
    #[serde(default = "ToolchainConfig::python")]
    pub toolchain: ToolchainConfig,
    #[serde(default)]
    pub repair: RepairConfig,
    #[serde(default)]
    pub preamble: PreventivePreamble,
}

fn key_of(message: &str) -> String {
    for marker in ["unknown field `", "missing field `"] {
        if let Some(rest) = message.split(marker).nth(1) {
            if let Some(end) = rest.find('`') {
                return rest[..end].to_string();
            }
        }
    }
    String::new()
}

impl ProjectConfig {
    pub fn parse(text: &str) -> Result<ProjectConfig, ConfigError> {
        let cfg: ProjectConfig = toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            ConfigError {
                key: key_of(&message),
                message,
            }
        })?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ProjectConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            key: String::new(),
            message: format!("{}: {e}", path.display()),
        })?;
        ProjectConfig::parse(&text)
    }

    fn check(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, message: String| {
            Err(ConfigError {
                key: key.into(),
                message,
            })
        };
        for p in &self.backends {
            if let Err(e) = p.validate() {
                return bad("backends", e.to_string());
            }
        }
        if self.profile(&self.backend).is_none() {
            return bad("backend", format!("no profile named `{}`", self.backend));
        }
        for (stage, name) in &self.stage_backends {
            if self.profile(name).is_none() {
                return bad("stage_backends", format!("stage `{stage}` names unknown profile `{name}`"));
            }
        }
        if self.exemplar_k == 0 {
            return bad("exemplar_k", "must be at least 1".into());
        }
        if self.language != self.toolchain.language {
            return bad(
                "language",
                format!("`{}` does not match the toolchain language `{}`", self.language, self.toolchain.language),
            );
        }
        if let Err(e) = self.toolchain.validate() {
            return bad("toolchain", e.to_string());
        }
        Ok(())
    }

    pub fn profile(&self, name: &str) -> Option<&BackendProfile> {
        self.backends.iter().find(|p| p.name == name)
    }

    /// The profile a stage's sessions are opened on.
    pub fn profile_for(&self, stage: &str) -> &BackendProfile {
        let name = self.stage_backends.get(stage).unwrap_or(&self.backend);
        self.profile(name).expect("checked when parsed")
    }

    /// Rewrites relative stub script paths against `base`.
    pub fn anchor_stub_paths(&mut self, base: &Path) {
        for p in &mut self.backends {
            if let Some(script) = p.stub_script() {
                let path = Path::new(script);
                if path.is_relative() {
                    p.endpoint = format!("stub:{}", base.join(path).display());
                }
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn prompt_kit(&self) -> PromptKit {
        let mut kit = PromptKit::builtin(&self.language);
        kit.exemplar_k = self.exemplar_k;
        kit.preamble = self.preamble;
        kit
    }
}
