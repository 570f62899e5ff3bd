//! Text-model providers and the prompting tasks built on them: table
//! prediction, SQL generation with self-correction, and table-description
//! synthesis.

pub mod parse;
pub mod prompts;
mod scripted;
mod tasks;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use prompts::{PromptError, PromptKind, PROMPT_SET_VERSION};
pub use scripted::{ScriptRule, ScriptedModel};
pub use tasks::{
    describe_catalog, generate_sql, predict_tables, synthesize_table_description, AttemptOutcome,
    DescribeFailure, PredictedTable, QueryExecutor, QueryRows, SqlAttempt, SqlRequest, SqlResult,
    TablePrediction, DEFAULT_MAX_CORRECTIONS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    /// Network or service failure; the call may be retried.
    #[error("model transport failure: {0}")]
    Transport(String),
    #[error("model rejected the request: {0}")]
    Rejected(String),
}

impl ModelError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ModelError::Transport(_))
    }
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("could not parse the {prompt} reply after a retry")]
    Parse { prompt: PromptKind, reply: String },
    #[error("{0} must not be empty")]
    EmptyInput(&'static str),
}

/// A chat-completion model: messages in, raw completion text out.
pub trait TextModelProvider: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ModelError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 4096,
        }
    }
}

/// HTTP adapter: POSTs `{"model", "messages", "temperature", "max_tokens"}`
/// and expects `{"content": "..."}`.
#[derive(Debug, Clone)]
pub struct RemoteChatModel {
    pub endpoint: String,
    pub model: String,
    pub token: Option<String>,
    pub params: ModelParams,
    pub max_retries: usize,
    pub timeout: Duration,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    content: String,
}

impl RemoteChatModel {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, token: Option<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            token,
            params: ModelParams::default(),
            max_retries: 2,
            timeout: Duration::from_secs(120),
        }
    }

    fn call(&self, messages: &[ChatMessage]) -> Result<String, ModelError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut request = agent.post(&self.endpoint);
        if let Some(token) = &self.token {
            request = request.header("Authorization", &format!("Bearer {token}"));
        }
        let body = ChatRequest {
            model: &self.model,
            messages,
            temperature: self.params.temperature,
            max_tokens: self.params.max_tokens,
        };
        let mut response = request.send_json(&body).map_err(|e| match e {
            ureq::Error::StatusCode(code) if (400..500).contains(&code) => {
                ModelError::Rejected(format!("HTTP {code}"))
            }
            other => ModelError::Transport(other.to_string()),
        })?;
        let reply: ChatResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| ModelError::Transport(format!("bad response body: {e}")))?;
        Ok(reply.content)
    }
}

impl TextModelProvider for RemoteChatModel {
    fn name(&self) -> &str {
        &self.model
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ModelError> {
        let mut attempt = 0;
        loop {
            match self.call(messages) {
                Err(e) if e.is_retryable() && attempt < self.max_retries => {
                    attempt += 1;
                    tracing::warn!(error = %e, attempt, model = %self.model, "retrying completion");
                    std::thread::sleep(Duration::from_millis(100 * attempt as u64));
                }
                other => return other,
            }
        }
    }
}
