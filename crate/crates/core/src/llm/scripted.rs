use std::sync::Mutex;

use super::{ChatMessage, ModelError, PromptKind, Role, TextModelProvider};
use crate::nlq::fallback_keywords;

/// Canned replies for one (prompt, subject) pair, served in order; the last
/// one repeats once the sequence is exhausted.
///
/// The subject is the `{QUESTION}` slot, or the table name for
/// description prompts.
#[derive(Debug, Clone)]
pub struct ScriptRule {
    pub prompt: PromptKind,
    pub subject: String,
    pub replies: Vec<Result<String, ModelError>>,
}

/// Deterministic offline model.
///
/// Conversations are matched against scripted rules by the subject of their
/// opening prompt. Anything unscripted gets a template answer:
/// keyword prompts get the rule-based keyword list, table prediction lists
/// the schema's tables in order, SQL generation selects from the first
/// table, and description prompts get a one-line summary.
#[derive(Debug, Default)]
pub struct ScriptedModel {
    rules: Vec<ScriptRule>,
    served: Mutex<Vec<usize>>,
    log: Mutex<Vec<Vec<ChatMessage>>>,
}

impl ScriptedModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_rule(mut self, rule: ScriptRule) -> Self {
        self.rules.push(rule);
        self.served.get_mut().unwrap().push(0);
        self
    }

    pub fn with_replies<S: Into<String>>(
        self,
        prompt: PromptKind,
        subject: impl Into<String>,
        replies: impl IntoIterator<Item = S>,
    ) -> Self {
        self.with_rule(ScriptRule {
            prompt,
            subject: subject.into(),
            replies: replies.into_iter().map(|r| Ok(r.into())).collect(),
        })
    }

    pub fn with_reply(self, prompt: PromptKind, subject: impl Into<String>, reply: impl Into<String>) -> Self {
        self.with_replies(prompt, subject, [reply.into()])
    }

    pub fn with_error(self, prompt: PromptKind, subject: impl Into<String>, error: ModelError) -> Self {
        self.with_rule(ScriptRule {
            prompt,
            subject: subject.into(),
            replies: vec![Err(error)],
        })
    }

    /// Every conversation received so far, in call order.
    pub fn transcripts(&self) -> Vec<Vec<ChatMessage>> {
        self.log.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().unwrap().len()
    }
}

fn first_table_line(schema: &str) -> Option<&str> {
    schema.lines().find_map(|l| l.strip_prefix("<table>"))
}

fn schema_tables(schema: &str) -> Vec<(String, String)> {
    let mut db = String::new();
    let mut out = Vec::new();
    for line in schema.lines() {
        if let Some(name) = line.strip_prefix("<db>") {
            db = name.to_string();
        } else if let Some(name) = line.strip_prefix("<table>") {
            out.push((db.clone(), name.to_string()));
        }
    }
    out
}

fn default_reply(kind: PromptKind, slots: &std::collections::BTreeMap<&str, String>) -> String {
    match kind {
        PromptKind::KeywordExtraction => {
            serde_json::to_string(&fallback_keywords(&slots["QUESTION"]).keywords).unwrap()
        }
        PromptKind::TablePrediction => {
            let tables = schema_tables(&slots["SCHEMA"]);
            let mut body = String::new();
            let mut current: Option<&str> = None;
            for (rank, (db, table)) in tables.iter().enumerate() {
                if current != Some(db.as_str()) {
                    if current.is_some() {
                        body.push_str("  </database>\n");
                    }
                    body.push_str(&format!("  <database name=\"{db}\">\n"));
                    current = Some(db);
                }
                body.push_str(&format!("    <table rank=\"{}\">{table}</table>\n", rank + 1));
            }
            if current.is_some() {
                body.push_str("  </database>\n");
            }
            format!("<thinking>\nTables listed in schema order.\n</thinking>\n\n<relevant_tables>\n{body}</relevant_tables>")
        }
        PromptKind::SqlGeneration => {
            let tables = schema_tables(&slots["DATABASE_SCHEMA"]);
            let (db, table) = tables.first().cloned().unwrap_or_default();
            format!(
                "<thinking>\nSelecting from the first table.\n</thinking>\n\n<database>\n{db}\n</database>\n\n<sql_query>\nSELECT * FROM {table}\n</sql_query>"
            )
        }
        PromptKind::TableDescription => {
            let schema = &slots["TABLE_SCHEMA"];
            let table = first_table_line(schema).unwrap_or("table");
            let columns: Vec<&str> = schema
                .lines()
                .filter_map(|l| l.strip_prefix('('))
                .filter_map(|l| l.split(':').next())
                .collect();
            format!(
                "<thinking>\nSummarizing the columns.\n</thinking>\n\n<description>\nThe {table} table records {}.\n</description>",
                columns.join(", ")
            )
        }
    }
}

impl TextModelProvider for ScriptedModel {
    fn name(&self) -> &str {
        "scripted"
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ModelError> {
        self.log.lock().unwrap().push(messages.to_vec());
        let opening = messages
            .iter()
            .find(|m| m.role == Role::User)
            .ok_or_else(|| ModelError::Rejected("no user message".into()))?;
        let (kind, slots) = PromptKind::detect(&opening.content)
            .ok_or_else(|| ModelError::Rejected("unrecognized prompt".into()))?;
        let subject = match kind {
            PromptKind::TableDescription => first_table_line(&slots["TABLE_SCHEMA"]).unwrap_or_default().to_string(),
            _ => slots["QUESTION"].clone(),
        };
        if let Some(i) = self
            .rules
            .iter()
            .position(|r| r.prompt == kind && r.subject == subject)
        {
            let rule = &self.rules[i];
            let mut served = self.served.lock().unwrap();
            let n = served[i];
            served[i] += 1;
            return rule.replies[n.min(rule.replies.len() - 1)].clone();
        }
        Ok(default_reply(kind, &slots))
    }
}
