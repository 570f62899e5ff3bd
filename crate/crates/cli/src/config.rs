use std::path::Path;

use clap::Args;
use schemalink_core::catalog::EntityKind;
use schemalink_core::eval::EvalOptions;
use schemalink_core::linker::PipelineConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliResult, Failure};

/// Contents of a `--config` TOML file. Command-line flags win over it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub pipeline: PipelineConfig,
    pub providers: ProviderSettings,
    pub eval: EvalOptions,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSettings {
    /// `hash`, `hash:DIM` or `remote`.
    pub embedder: Option<String>,
    /// `scripted` or `remote`.
    pub model: Option<String>,
    pub keyword_model: Option<String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| Failure::config(format!("config file: {e}")))
    }
}

/// Parses a snake_case enum name through its serde representation.
pub fn parse_named<T: DeserializeOwned>(what: &str, value: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(value.trim().to_string()))
        .map_err(|_| format!("invalid {what} `{value}`"))
}

pub fn parse_kinds(value: &str) -> CliResult<std::collections::BTreeSet<EntityKind>> {
    if value.trim() == "all" {
        return Ok(EntityKind::ALL.into_iter().collect());
    }
    let kinds = EntityKind::parse_list(value).map_err(Failure::usage)?;
    if kinds.is_empty() {
        return Err(Failure::usage("--types must name at least one entity type"));
    }
    Ok(kinds)
}

pub fn parse_cutoffs(value: &str) -> CliResult<Vec<usize>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .ok()
                .filter(|n| *n > 0)
                .ok_or_else(|| Failure::usage(format!("invalid recall cutoff `{s}`")))
        })
        .collect()
}

/// Pipeline settings that override the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct PipelineArgs {
    /// Tables kept in the candidate schema.
    #[arg(long)]
    pub top_tables: Option<usize>,
    /// Hits kept per (query, entity type) search.
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Comma-separated entity types to search, or `all`.
    #[arg(long)]
    pub types: Option<String>,
    /// `llm` or `fallback`.
    #[arg(long)]
    pub keyword_source: Option<String>,
    /// `keywords_and_question`, `keywords_only`, `question_only` or `appended`.
    #[arg(long)]
    pub query_mode: Option<String>,
    /// Enable entropy calibration of keyword scores.
    #[arg(long)]
    pub entropy: bool,
    /// Softmax sharpness for entropy calibration.
    #[arg(long)]
    pub entropy_alpha: Option<f64>,
    /// Include table descriptions in rendered schemas.
    #[arg(long)]
    pub table_descriptions: bool,
}

impl PipelineArgs {
    pub fn apply(&self, mut config: PipelineConfig) -> CliResult<PipelineConfig> {
        if let Some(n) = self.top_tables {
            config.table_budget = n;
        }
        if let Some(k) = self.top_k {
            config.per_query_top_k = k;
        }
        if let Some(types) = &self.types {
            config.enabled_types = Some(parse_kinds(types)?);
        }
        if let Some(s) = &self.keyword_source {
            config.keyword_source = parse_named("keyword source", s).map_err(Failure::usage)?;
        }
        if let Some(m) = &self.query_mode {
            config.query_mode = parse_named("query mode", m).map_err(Failure::usage)?;
        }
        if self.entropy {
            config.entropy_calibration = true;
        }
        if let Some(a) = self.entropy_alpha {
            config.entropy_alpha = a;
        }
        if self.table_descriptions {
            config.include_table_descriptions = true;
        }
        config.validate()?;
        Ok(config)
    }
}

/// Loads the config file, if any.
pub fn load(path: Option<&Path>) -> CliResult<ConfigFile> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::from(e).context(p.display()))?;
            ConfigFile::parse(&text)
        }
    }
}
