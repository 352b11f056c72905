//! Service configuration: a TOML file plus `BLOCKRAG_*` environment overrides.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use blockrag_core::index::{Embedder, HttpEmbedder, ReferenceEmbedder};
use blockrag_core::ingestion::{AdapterConfig, AdapterSet};
use blockrag_core::llm::{HttpLlm, LlmAdapter, MockLlm};
use blockrag_core::{Engine, EngineBuilder};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub host: String,
    pub port: u16,
    pub data_dir: PathBuf,
    pub k: usize,
    /// Adapter config file (TOML or JSON). Reference adapters when absent.
    pub adapters: Option<PathBuf>,
    pub embedder: EmbedderConfig,
    pub llm: LlmConfig,
    /// Uploads processed at once; the rest wait in line.
    pub ingest_workers: usize,
    pub timeout_secs: u64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            data_dir: PathBuf::from("data"),
            k: blockrag_core::index::DEFAULT_K,
            adapters: None,
            embedder: EmbedderConfig::default(),
            llm: LlmConfig::default(),
            ingest_workers: 2,
            timeout_secs: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderMode {
    #[default]
    Reference,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub mode: EmbedderMode,
    pub endpoint: Option<String>,
    /// Recorded in the index; an index built by another embedder is refused.
    pub name: String,
    pub dimension: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self { mode: EmbedderMode::Reference, endpoint: None, name: "external".into(), dimension: 384 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmMode {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub mode: LlmMode,
    pub endpoint: Option<String>,
}

impl ServerConfig {
    /// Reads `path` when given, then applies the process environment.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let config = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        config.with_env(|k| std::env::var(k).ok())
    }

    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut config: Self = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if config.data_dir.is_relative() {
            config.data_dir = base.join(&config.data_dir);
        }
        if let Some(a) = config.adapters.as_mut().filter(|a| a.is_relative()) {
            *a = base.join(&*a);
        }
        Ok(config)
    }

    pub fn with_env(mut self, env: impl Fn(&str) -> Option<String>) -> anyhow::Result<Self> {
        let get = |k: &str| env(k).filter(|v| !v.is_empty());
        if let Some(v) = get("BLOCKRAG_HOST") {
            self.host = v;
        }
        if let Some(v) = get("BLOCKRAG_PORT") {
            self.port = v.parse().with_context(|| format!("BLOCKRAG_PORT={v}"))?;
        }
        if let Some(v) = get("BLOCKRAG_DATA_DIR") {
            self.data_dir = v.into();
        }
        if let Some(v) = get("BLOCKRAG_K") {
            self.k = v.parse().with_context(|| format!("BLOCKRAG_K={v}"))?;
        }
        if let Some(v) = get("BLOCKRAG_ADAPTERS") {
            self.adapters = Some(v.into());
        }
        if let Some(v) = get("BLOCKRAG_EMBEDDER_MODE") {
            self.embedder.mode = parse_mode(&v, "BLOCKRAG_EMBEDDER_MODE")?;
        }
        if let Some(v) = get("BLOCKRAG_EMBEDDER_ENDPOINT") {
            self.embedder.endpoint = Some(v);
        }
        if let Some(v) = get("BLOCKRAG_LLM_MODE") {
            self.llm.mode = parse_mode(&v, "BLOCKRAG_LLM_MODE")?;
        }
        if let Some(v) = get("BLOCKRAG_LLM_ENDPOINT") {
            self.llm.endpoint = Some(v);
        }
        Ok(self)
    }

    fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }

    pub fn adapter_set(&self) -> anyhow::Result<AdapterSet> {
        let Some(path) = &self.adapters else {
            return Ok(AdapterSet::reference());
        };
        let config = AdapterConfig::load(path)?.with_env(|k| std::env::var(k).ok());
        Ok(AdapterSet::from_config(&config)?)
    }

    pub fn embedder_impl(&self) -> anyhow::Result<Arc<dyn Embedder>> {
        Ok(match self.embedder.mode {
            EmbedderMode::Reference => Arc::new(ReferenceEmbedder),
            EmbedderMode::Http => {
                let Some(endpoint) = &self.embedder.endpoint else { bail!("http embedder needs an endpoint") };
                Arc::new(HttpEmbedder::new(&self.embedder.name, self.embedder.dimension, endpoint, self.timeout()))
            }
        })
    }

    pub fn llm_impl(&self) -> anyhow::Result<Arc<dyn LlmAdapter>> {
        Ok(match self.llm.mode {
            LlmMode::Mock => Arc::new(MockLlm::echo()),
            LlmMode::Http => {
                let Some(endpoint) = &self.llm.endpoint else { bail!("http llm needs an endpoint") };
                Arc::new(HttpLlm::new(endpoint, self.timeout()))
            }
        })
    }

    /// Engine builder with everything but clock and ids taken from the config.
    pub fn engine_builder(&self) -> anyhow::Result<EngineBuilder> {
        Ok(Engine::builder()
            .data_dir(&self.data_dir)
            .k(self.k)
            .adapters(self.adapter_set()?)
            .embedder(self.embedder_impl()?)
            .llm(self.llm_impl()?))
    }

    pub fn build_engine(&self) -> anyhow::Result<Engine> {
        Ok(self.engine_builder()?.build()?)
    }
}

fn parse_mode<T: for<'de> Deserialize<'de>>(value: &str, var: &str) -> anyhow::Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_ascii_lowercase()))
        .with_context(|| format!("{var}={value}"))
}
