//! Application configuration: TOML with `${VAR}` interpolation.
//!
//! ```toml
//! dataset = "asqa"
//! workers = 2
//!
//! [paths]
//! corpus = "corpus.jsonl"
//!
//! [search]
//! max_iterations = 30
//!
//! [backends.default]
//! kind = "openai"
//! base_url = "http://localhost:8000/v1"
//! model = "policy-model"
//! route = "chat"
//!
//! [backends.judge]
//! kind = "scripted"
//! fixture = "judge.json"
//! ```
//!
//! Roles missing from `[backends]` fall back to `backends.default`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    BackendError, BackendSet, EntailmentBackend, OpenAiBackend, OpenAiConfig, PolicyBackend, Role,
    ScoringBackend, ScriptedBackend,
};
use crate::mcts::SearchConfig;
use crate::protocol::{DatasetTag, PromptTemplate};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("environment variable {0} referenced by config is not set")]
    MissingVar(String),
    #[error("no backend configured for role {0} and no default")]
    MissingRole(Role),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendSpec {
    Scripted {
        fixture: PathBuf,
    },
    #[serde(rename = "openai")]
    OpenAi(OpenAiConfig),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    pub default: Option<BackendSpec>,
    pub policy: Option<BackendSpec>,
    pub reflector: Option<BackendSpec>,
    pub scorer_policy: Option<BackendSpec>,
    pub scorer_reference: Option<BackendSpec>,
    pub judge: Option<BackendSpec>,
}

impl BackendsConfig {
    pub fn spec(&self, role: Role) -> Result<&BackendSpec, ConfigError> {
        let specific = match role {
            Role::Policy => &self.policy,
            // the reflector is the policy model unless configured separately
            Role::Reflector => {
                if self.reflector.is_some() {
                    &self.reflector
                } else {
                    &self.policy
                }
            }
            Role::ScorerPolicy => &self.scorer_policy,
            Role::ScorerReference => &self.scorer_reference,
            Role::Judge => &self.judge,
        };
        specific
            .as_ref()
            .or(self.default.as_ref())
            .ok_or(ConfigError::MissingRole(role))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// JSON Lines corpus for `ask`.
    pub corpus: Option<PathBuf>,
    /// Prebuilt index; takes precedence over `corpus`.
    pub index: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    /// Prompt template file; the built-in one for the dataset otherwise.
    pub template: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
}

fn default_dataset() -> DatasetTag {
    DatasetTag::Asqa
}
fn default_workers() -> usize {
    1
}
fn default_log_level() -> String {
    "warn".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    #[serde(default = "default_dataset")]
    pub dataset: DatasetTag,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_log_level")]
    pub log_level: String,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub backends: BackendsConfig,
}

/// Replaces every `${NAME}` with the value of environment variable `NAME`.
pub fn interpolate_env(text: &str) -> Result<String, ConfigError> {
    let re = Regex::new(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("static regex");
    let mut missing = None;
    let out = re.replace_all(text, |c: &regex::Captures<'_>| match std::env::var(&c[1]) {
        Ok(v) => v,
        Err(_) => {
            missing.get_or_insert_with(|| c[1].to_string());
            String::new()
        }
    });
    match missing {
        Some(var) => Err(ConfigError::MissingVar(var)),
        None => Ok(out.into_owned()),
    }
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl AppConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: AppConfig = toml::from_str(&interpolate_env(text)?)
            .map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads TOML, or JSON when the extension is `.json`. A JSON report is
    /// accepted too, in which case its embedded `config` snapshot is used.
    /// Relative paths are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = if path.extension().is_some_and(|e| e == "json") {
            let mut v: serde_json::Value = serde_json::from_str(&interpolate_env(&text)?)
                .map_err(|e| ConfigError::Parse(e.to_string()))?;
            if let Some(inner) = v.get_mut("config") {
                v = inner.take();
            }
            let cfg: AppConfig =
                serde_json::from_value(v).map_err(|e| ConfigError::Parse(e.to_string()))?;
            cfg.validate()?;
            cfg
        } else {
            Self::from_toml_str(&text)?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        for slot in [
            &mut p.corpus,
            &mut p.index,
            &mut p.dataset,
            &mut p.template,
            &mut p.report_dir,
        ] {
            resolve(base, slot);
        }
        let b = &mut self.backends;
        for spec in [
            &mut b.default,
            &mut b.policy,
            &mut b.reflector,
            &mut b.scorer_policy,
            &mut b.scorer_reference,
            &mut b.judge,
        ]
        .into_iter()
        .flatten()
        {
            if let BackendSpec::Scripted { fixture } = spec {
                if fixture.is_relative() {
                    *fixture = base.join(&*fixture);
                }
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.search
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.workers == 0 {
            return Err(ConfigError::Invalid("workers must be at least 1".into()));
        }
        if self.log_level.parse::<log::LevelFilter>().is_err() {
            return Err(ConfigError::Invalid(format!(
                "unknown log level {:?}",
                self.log_level
            )));
        }
        Ok(())
    }

    pub fn template(&self) -> Result<PromptTemplate, ConfigError> {
        match &self.paths.template {
            Some(p) => PromptTemplate::load(self.dataset, p)
                .map_err(|e| ConfigError::Invalid(e.to_string())),
            None => Ok(PromptTemplate::builtin(self.dataset)),
        }
    }

    /// Instantiates the five roles. Roles with identical specs share one
    /// backend instance.
    pub fn build_backends(&self) -> Result<BackendSet, ConfigError> {
        #[derive(Clone)]
        enum Built {
            Scripted(Arc<ScriptedBackend>),
            OpenAi(Arc<OpenAiBackend>),
        }
        let mut cache: HashMap<String, Built> = HashMap::new();
        let mut get = |role: Role| -> Result<Built, ConfigError> {
            let spec = self.backends.spec(role)?;
            let key = serde_json::to_string(spec).expect("spec serializes");
            if let Some(b) = cache.get(&key) {
                return Ok(b.clone());
            }
            let built = match spec {
                BackendSpec::Scripted { fixture } => {
                    Built::Scripted(Arc::new(ScriptedBackend::load(fixture)?))
                }
                BackendSpec::OpenAi(c) => Built::OpenAi(Arc::new(OpenAiBackend::new(c.clone())?)),
            };
            cache.insert(key, built.clone());
            Ok(built)
        };
        let policy = |b: &Built| -> Arc<dyn PolicyBackend> {
            match b {
                Built::Scripted(s) => s.clone(),
                Built::OpenAi(o) => o.clone(),
            }
        };
        let scorer = |b: &Built| -> Arc<dyn ScoringBackend> {
            match b {
                Built::Scripted(s) => s.clone(),
                Built::OpenAi(o) => o.clone(),
            }
        };
        let judge = |b: &Built| -> Arc<dyn EntailmentBackend> {
            match b {
                Built::Scripted(s) => s.clone(),
                Built::OpenAi(o) => o.clone(),
            }
        };
        Ok(BackendSet::new(
            policy(&get(Role::Policy)?),
            policy(&get(Role::Reflector)?),
            scorer(&get(Role::ScorerPolicy)?),
            scorer(&get(Role::ScorerReference)?),
            judge(&get(Role::Judge)?),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = AppConfig::from_toml_str(
            r#"
            dataset = "qampari"
            [search]
            max_iterations = 5
            [backends.default]
            kind = "scripted"
            fixture = "w.json"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.dataset, DatasetTag::Qampari);
        assert_eq!(cfg.search.max_iterations, 5);
        assert_eq!(cfg.search.max_children, 3);
        assert!(matches!(
            cfg.backends.spec(Role::Judge).unwrap(),
            BackendSpec::Scripted { .. }
        ));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(AppConfig::from_toml_str("bogus = 1").is_err());
        assert!(AppConfig::from_toml_str("[search]\nmax_iteration = 5").is_err());
        let openai = r#"
            [backends.policy]
            kind = "openai"
            base_url = "http://x"
            model = "m"
            route = "chat"
            temprature = 0.1
        "#;
        assert!(AppConfig::from_toml_str(openai).is_err());
    }

    #[test]
    fn env_interpolation() {
        std::env::set_var("CITETREE_TEST_MODEL", "served-model");
        let out = interpolate_env("model = \"${CITETREE_TEST_MODEL}\"").unwrap();
        assert_eq!(out, "model = \"served-model\"");
        assert!(matches!(
            interpolate_env("${CITETREE_DEFINITELY_UNSET}"),
            Err(ConfigError::MissingVar(v)) if v == "CITETREE_DEFINITELY_UNSET"
        ));
    }

    #[test]
    fn missing_role_is_reported() {
        let cfg = AppConfig::from_toml_str("").unwrap();
        assert!(matches!(
            cfg.backends.spec(Role::Policy),
            Err(ConfigError::MissingRole(Role::Policy))
        ));
    }

    #[test]
    fn invalid_search_values_rejected() {
        assert!(AppConfig::from_toml_str("[search]\nmax_depth = 0").is_err());
        assert!(AppConfig::from_toml_str("workers = 0").is_err());
    }
}
