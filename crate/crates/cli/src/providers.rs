//! Provider selection. Everything defaults to offline implementations;
//! remote adapters read their endpoints and credentials from the
//! environment.

use std::env;

use schemalink_core::embedding::{EmbeddingProvider, HashEmbedder, RemoteEmbedder};
use schemalink_core::llm::{RemoteChatModel, ScriptedModel, TextModelProvider};

use crate::error::{CliResult, Failure};

pub const DEFAULT_HASH_DIMENSION: usize = 256;

pub const ENV_EMBED_URL: &str = "SCHEMALINK_EMBED_URL";
pub const ENV_EMBED_TOKEN: &str = "SCHEMALINK_EMBED_TOKEN";
pub const ENV_EMBED_DIM: &str = "SCHEMALINK_EMBED_DIM";
pub const ENV_LLM_URL: &str = "SCHEMALINK_LLM_URL";
pub const ENV_LLM_TOKEN: &str = "SCHEMALINK_LLM_TOKEN";
pub const ENV_LLM_MODEL: &str = "SCHEMALINK_LLM_MODEL";
pub const ENV_KEYWORD_LLM_MODEL: &str = "SCHEMALINK_KEYWORD_LLM_MODEL";

const HASH_NAME_PREFIX: &str = "hash-v1:";

fn required_env(name: &str) -> CliResult<String> {
    env::var(name)
        .ok()
        .filter(|v| !v.trim().is_empty())
        .ok_or_else(|| Failure::provider(format!("remote provider needs {name} to be set")))
}

/// `hash`, `hash:DIM` or `remote`.
pub fn embedder(selector: &str) -> CliResult<Box<dyn EmbeddingProvider>> {
    let selector = selector.trim();
    if selector == "hash" {
        return Ok(Box::new(HashEmbedder::new(DEFAULT_HASH_DIMENSION)?));
    }
    if let Some(dim) = selector.strip_prefix("hash:") {
        let dim: usize = dim
            .parse()
            .map_err(|_| Failure::config(format!("invalid hash dimension in `{selector}`")))?;
        return Ok(Box::new(HashEmbedder::new(dim)?));
    }
    if selector == "remote" {
        let url = required_env(ENV_EMBED_URL)?;
        let dim: usize = required_env(ENV_EMBED_DIM)?
            .parse()
            .map_err(|_| Failure::config(format!("{ENV_EMBED_DIM} must be a positive integer")))?;
        return Ok(Box::new(RemoteEmbedder::new(url, env::var(ENV_EMBED_TOKEN).ok(), dim)));
    }
    Err(Failure::config(format!(
        "unknown embedding provider `{selector}` (expected hash, hash:DIM or remote)"
    )))
}

/// The embedder an index was built with, unless `selector` overrides it.
pub fn embedder_for_index(index_provider: &str, selector: Option<&str>) -> CliResult<Box<dyn EmbeddingProvider>> {
    if let Some(selector) = selector {
        return embedder(selector);
    }
    match index_provider.strip_prefix(HASH_NAME_PREFIX) {
        Some(dim) => embedder(&format!("hash:{dim}")),
        None if index_provider.starts_with("remote:") => embedder("remote"),
        None => Err(Failure::config(format!(
            "index was built with unknown provider `{index_provider}`; pass --embedder"
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelRole {
    Main,
    Keyword,
}

/// `scripted` or `remote`.
pub fn model(selector: &str, role: ModelRole) -> CliResult<Box<dyn TextModelProvider>> {
    match selector.trim() {
        "scripted" => Ok(Box::new(ScriptedModel::new())),
        "remote" => {
            let url = required_env(ENV_LLM_URL)?;
            let name = match role {
                ModelRole::Keyword => env::var(ENV_KEYWORD_LLM_MODEL)
                    .ok()
                    .filter(|v| !v.trim().is_empty())
                    .map_or_else(|| required_env(ENV_LLM_MODEL), Ok)?,
                ModelRole::Main => required_env(ENV_LLM_MODEL)?,
            };
            Ok(Box::new(RemoteChatModel::new(url, name, env::var(ENV_LLM_TOKEN).ok())))
        }
        other => Err(Failure::config(format!(
            "unknown model provider `{other}` (expected scripted or remote)"
        ))),
    }
}
