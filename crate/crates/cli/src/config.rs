//! Run configuration: a TOML file merged with command-line flags.
//!
//! Precedence is flags > config file > built-in defaults. The defaults are
//! the standard settings: a 2048-token context budget, 64-token chunks, the
//! 5..35 x {0,1} sweep grid, and the best-probability method.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use ftrag_core::embedding::{
    CachedProvider, EmbeddingCache, EmbeddingProvider, HttpEmbeddingProvider, HttpProviderConfig,
    LocalHashProvider, ProviderId,
};
use ftrag_core::inference::{HttpBackend, HttpBackendConfig, InferenceBackend, ScriptedBackend};
use ftrag_core::optimizer::{DEFAULT_CHUNK_NUMBERS, DEFAULT_WINDOW_SIZES};

pub const DEFAULT_BUDGET: usize = 2048;
pub const DEFAULT_MAX_CHUNK_TOKENS: usize = 64;
pub const DEFAULT_THETA: f64 = 0.5;

/// The config file schema. Every field is optional; flags override.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub corpus: Option<PathBuf>,
    pub budget: Option<usize>,
    pub max_chunk_tokens: Option<usize>,
    pub method: Option<String>,
    pub theta: Option<f64>,
    pub jobs: Option<usize>,
    pub chunk_numbers: Option<Vec<usize>>,
    pub window_sizes: Option<Vec<usize>>,
    #[serde(default, rename = "provider")]
    pub providers: Vec<ProviderSpec>,
    pub backend: Option<BackendSpec>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// One embedding provider entry.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum ProviderSpec {
    Local {
        name: String,
        dim: usize,
        #[serde(default)]
        seed: u64,
        index: Option<PathBuf>,
    },
    Http {
        name: String,
        dim: usize,
        base_url: String,
        model: String,
        api_key_env: Option<String>,
        batch_size: Option<usize>,
        timeout_secs: Option<u64>,
        max_in_flight: Option<usize>,
        /// Optional persistent embedding cache file.
        cache: Option<PathBuf>,
        index: Option<PathBuf>,
    },
}

impl ProviderSpec {
    pub fn name(&self) -> &str {
        match self {
            ProviderSpec::Local { name, .. } | ProviderSpec::Http { name, .. } => name,
        }
    }

    pub fn provider_id(&self) -> ProviderId {
        match self {
            ProviderSpec::Local { name, dim, .. } | ProviderSpec::Http { name, dim, .. } => {
                ProviderId::new(name.clone(), *dim)
            }
        }
    }

    pub fn index_path(&self) -> Option<&PathBuf> {
        match self {
            ProviderSpec::Local { index, .. } | ProviderSpec::Http { index, .. } => index.as_ref(),
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            ProviderSpec::Local { seed, .. } => Some(*seed),
            ProviderSpec::Http { .. } => None,
        }
    }

    pub fn build(&self) -> Result<Box<dyn EmbeddingProvider>> {
        match self {
            ProviderSpec::Local { name, dim, seed, .. } => Ok(Box::new(
                LocalHashProvider::new(name.clone(), *dim, *seed)
                    .with_context(|| format!("provider `{name}`"))?,
            )),
            ProviderSpec::Http {
                name,
                dim,
                base_url,
                model,
                api_key_env,
                batch_size,
                timeout_secs,
                max_in_flight,
                cache,
                ..
            } => {
                let api_key = api_key_env
                    .as_ref()
                    .and_then(|env| std::env::var(env).ok());
                let inner = HttpEmbeddingProvider::new(HttpProviderConfig {
                    name: name.clone(),
                    dim: *dim,
                    base_url: base_url.clone(),
                    model: model.clone(),
                    api_key,
                    batch_size: batch_size.unwrap_or(32),
                    timeout_secs: timeout_secs.unwrap_or(30),
                    max_in_flight: max_in_flight.unwrap_or(4),
                })
                .with_context(|| format!("provider `{name}`"))?;
                match cache {
                    Some(path) => {
                        let cache = EmbeddingCache::open(path)
                            .with_context(|| format!("opening cache for `{name}`"))?;
                        Ok(Box::new(CachedProvider::new(Box::new(inner), cache)))
                    }
                    None => Ok(Box::new(inner)),
                }
            }
        }
    }
}

/// The inference backend entry.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum BackendSpec {
    Scripted {
        fixture: PathBuf,
    },
    Http {
        base_url: String,
        model: String,
        api_key_env: Option<String>,
        logprobs: Option<usize>,
        timeout_secs: Option<u64>,
        retries: Option<usize>,
        max_in_flight: Option<usize>,
    },
}

impl BackendSpec {
    pub fn build(&self) -> Result<Box<dyn InferenceBackend>> {
        match self {
            BackendSpec::Scripted { fixture } => Ok(Box::new(
                ScriptedBackend::from_path(fixture).context("loading scripted backend fixture")?,
            )),
            BackendSpec::Http {
                base_url,
                model,
                api_key_env,
                logprobs,
                timeout_secs,
                retries,
                max_in_flight,
            } => Ok(Box::new(
                HttpBackend::new(HttpBackendConfig {
                    base_url: base_url.clone(),
                    model: model.clone(),
                    api_key_env: api_key_env.clone(),
                    logprobs: logprobs.unwrap_or(5),
                    timeout_secs: timeout_secs.unwrap_or(60),
                    retries: retries.unwrap_or(0),
                    max_in_flight: max_in_flight.unwrap_or(4),
                })
                .context("building http backend")?,
            )),
        }
    }
}

/// Grid lists after merging flags, config, and defaults.
pub fn resolve_grid_lists(
    flag_chunk_numbers: Option<&[usize]>,
    flag_window_sizes: Option<&[usize]>,
    config: &FileConfig,
) -> (Vec<usize>, Vec<usize>) {
    let chunk_numbers = flag_chunk_numbers
        .map(|v| v.to_vec())
        .or_else(|| config.chunk_numbers.clone())
        .unwrap_or_else(|| DEFAULT_CHUNK_NUMBERS.to_vec());
    let window_sizes = flag_window_sizes
        .map(|v| v.to_vec())
        .or_else(|| config.window_sizes.clone())
        .unwrap_or_else(|| DEFAULT_WINDOW_SIZES.to_vec());
    (chunk_numbers, window_sizes)
}

/// Local-embedder seeds per provider name, recorded into report headers.
pub fn seeds_of(providers: &[ProviderSpec]) -> BTreeMap<String, u64> {
    providers
        .iter()
        .filter_map(|p| p.seed().map(|s| (p.name().to_string(), s)))
        .collect()
}

/// Select providers for this run: `--provider NAME` narrows to one entry
/// (which must exist in the config unless local flags define it inline).
pub fn select_providers(
    config: &FileConfig,
    name: Option<&str>,
    local_dim: Option<usize>,
    local_seed: Option<u64>,
    index: Option<&Path>,
) -> Result<Vec<ProviderSpec>> {
    match name {
        None => {
            if config.providers.is_empty() {
                bail!("no providers configured; pass --provider with --local-dim or add [[provider]] entries to the config");
            }
            Ok(config.providers.clone())
        }
        Some(name) => {
            let mut spec = match config.providers.iter().find(|p| p.name() == name) {
                Some(spec) => spec.clone(),
                None => {
                    let dim = local_dim.with_context(|| {
                        format!("provider `{name}` not in config; define it inline with --local-dim [--local-seed]")
                    })?;
                    ProviderSpec::Local {
                        name: name.to_string(),
                        dim,
                        seed: local_seed.unwrap_or(0),
                        index: None,
                    }
                }
            };
            // Inline flags override the config entry for local providers.
            if let ProviderSpec::Local { dim, seed, .. } = &mut spec {
                if let Some(d) = local_dim {
                    *dim = d;
                }
                if let Some(s) = local_seed {
                    *seed = s;
                }
            }
            if let Some(path) = index {
                match &mut spec {
                    ProviderSpec::Local { index, .. } | ProviderSpec::Http { index, .. } => {
                        *index = Some(path.to_path_buf());
                    }
                }
            }
            Ok(vec![spec])
        }
    }
}
