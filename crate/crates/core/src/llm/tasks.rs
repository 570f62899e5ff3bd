use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::parse::{parse_description, parse_relevant_tables, parse_sql_reply};
use super::{ChatMessage, LlmError, PromptKind, TextModelProvider};
use crate::catalog::{Catalog, RenderOptions, TableRef};

pub const DEFAULT_MAX_CORRECTIONS: usize = 3;

/// Sends `messages`, parsing the reply; an unparseable reply is retried once.
fn complete_parsed<T>(
    provider: &dyn TextModelProvider,
    messages: &[ChatMessage],
    prompt: PromptKind,
    parse: impl Fn(&str) -> Option<T>,
) -> Result<(String, T), LlmError> {
    let mut last = String::new();
    for attempt in 0..2 {
        let reply = provider.complete(messages)?;
        if let Some(parsed) = parse(&reply) {
            return Ok((reply, parsed));
        }
        tracing::warn!(%prompt, attempt, model = provider.name(), "unparseable reply");
        last = reply;
    }
    Err(LlmError::Parse { prompt, reply: last })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictedTable {
    pub table: TableRef,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TablePrediction {
    /// Ranked 1, 2, 3, ... in list order.
    pub tables: Vec<PredictedTable>,
    pub thinking: Option<String>,
    /// Predicted tables outside the allowed set, as `db.table`.
    pub dropped: Vec<String>,
}

impl TablePrediction {
    pub fn table_refs(&self) -> Vec<TableRef> {
        self.tables.iter().map(|p| p.table.clone()).collect()
    }
}

/// Asks the model to rank the tables of `candidate_schema` for `question`.
///
/// Entries are ordered by the model's rank (reply order breaks ties),
/// duplicates and tables outside `allowed` are dropped, and the survivors
/// are renumbered from 1.
pub fn predict_tables(
    candidate_schema: &str,
    question: &str,
    provider: &dyn TextModelProvider,
    allowed: &BTreeSet<TableRef>,
) -> Result<TablePrediction, LlmError> {
    if candidate_schema.trim().is_empty() {
        return Err(LlmError::EmptyInput("candidate schema"));
    }
    let prompt = PromptKind::TablePrediction.render(&[("SCHEMA", candidate_schema), ("QUESTION", question)])?;
    let (_, parsed) = complete_parsed(
        provider,
        &[ChatMessage::user(prompt)],
        PromptKind::TablePrediction,
        parse_relevant_tables,
    )?;

    let mut entries = parsed.entries;
    entries.sort_by_key(|e| e.rank);
    let mut seen = BTreeSet::new();
    let mut tables = Vec::new();
    let mut dropped = Vec::new();
    for e in entries {
        let table = TableRef::new(e.database, e.table);
        if !allowed.contains(&table) {
            tracing::warn!(%table, "model predicted a table outside the candidate schema");
            dropped.push(table.to_string());
            continue;
        }
        if seen.insert(table.clone()) {
            tables.push(PredictedTable {
                table,
                rank: tables.len() + 1,
            });
        }
    }
    Ok(TablePrediction {
        tables,
        thinking: parsed.thinking,
        dropped,
    })
}

/// Generates a retrieval-oriented description of one table.
pub fn synthesize_table_description(
    table_schema: &str,
    provider: &dyn TextModelProvider,
) -> Result<String, LlmError> {
    if table_schema.trim().is_empty() {
        return Err(LlmError::EmptyInput("table schema"));
    }
    let prompt = PromptKind::TableDescription.render(&[("TABLE_SCHEMA", table_schema)])?;
    let (_, description) = complete_parsed(
        provider,
        &[ChatMessage::user(prompt)],
        PromptKind::TableDescription,
        parse_description,
    )?;
    Ok(description)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescribeFailure {
    pub table: String,
    pub error: String,
}

/// Fills in missing table descriptions (all of them with `overwrite`).
///
/// Tables whose synthesis fails keep their previous description and are
/// reported.
pub fn describe_catalog(
    catalog: &Catalog,
    provider: &dyn TextModelProvider,
    overwrite: bool,
) -> (Catalog, Vec<DescribeFailure>) {
    let targets: Vec<TableRef> = catalog
        .table_refs()
        .filter(|t| {
            overwrite
                || catalog
                    .table(t)
                    .is_some_and(|t| t.description.as_deref().is_none_or(|d| d.trim().is_empty()))
        })
        .collect();
    let options = RenderOptions {
        include_table_descriptions: false,
    };
    let results: Vec<(TableRef, Result<String, String>)> = targets
        .into_par_iter()
        .map(|t| {
            let result = catalog
                .render_table(&t, &options)
                .map_err(|e| e.to_string())
                .and_then(|schema| synthesize_table_description(&schema, provider).map_err(|e| e.to_string()));
            (t, result)
        })
        .collect();

    let mut out = catalog.clone();
    let mut failures = Vec::new();
    for (t, result) in results {
        match result {
            Ok(text) => {
                let table = out
                    .databases
                    .iter_mut()
                    .filter(|d| d.name == t.database)
                    .flat_map(|d| d.tables.iter_mut())
                    .find(|x| x.name == t.table)
                    .expect("table came from this catalog");
                table.description = Some(text);
            }
            Err(error) => {
                tracing::warn!(table = %t, %error, "description synthesis failed");
                failures.push(DescribeFailure {
                    table: t.to_string(),
                    error,
                });
            }
        }
    }
    (out, failures)
}

pub type QueryRows = Vec<Vec<String>>;

/// Runs generated SQL against a database; errors are reported back to the
/// model as text.
pub trait QueryExecutor: Send + Sync {
    fn execute(&self, database: Option<&str>, sql: &str) -> Result<QueryRows, String>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "detail")]
pub enum AttemptOutcome {
    /// No executor was supplied.
    Unchecked,
    Rows(usize),
    Empty,
    Error(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SqlAttempt {
    pub database: Option<String>,
    pub sql: String,
    pub outcome: AttemptOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SqlResult {
    pub database: Option<String>,
    pub sql: String,
    pub correction_rounds: usize,
    pub transcript: Vec<SqlAttempt>,
}

#[derive(Debug, Clone)]
pub struct SqlRequest<'a> {
    pub schema: &'a str,
    pub question: &'a str,
    pub dialect_instruction: &'a str,
    pub max_corrections: usize,
}

fn follow_up(outcome: &AttemptOutcome) -> Option<String> {
    match outcome {
        AttemptOutcome::Error(e) => Some(format!(
            "Executing the SQL query failed with the following error:\n{e}\n\nPlease correct the query and answer again in the same XML format."
        )),
        AttemptOutcome::Empty => Some(
            "Executing the SQL query returned no rows: the output table is empty. Please revise the query and answer again in the same XML format."
                .to_string(),
        ),
        AttemptOutcome::Unchecked | AttemptOutcome::Rows(_) => None,
    }
}

/// Generates SQL, executing and correcting it in the same conversation until
/// it returns rows or `max_corrections` follow-ups have been sent. The last
/// attempt is returned either way.
pub fn generate_sql(
    request: &SqlRequest<'_>,
    provider: &dyn TextModelProvider,
    executor: Option<&dyn QueryExecutor>,
) -> Result<SqlResult, LlmError> {
    if request.schema.trim().is_empty() {
        return Err(LlmError::EmptyInput("database schema"));
    }
    let prompt = PromptKind::SqlGeneration.render(&[
        ("DIALECT_INSTRUCTION", request.dialect_instruction),
        ("DATABASE_SCHEMA", request.schema),
        ("QUESTION", request.question),
    ])?;
    let mut messages = vec![ChatMessage::user(prompt)];
    let mut transcript = Vec::new();
    loop {
        let (reply, parsed) = complete_parsed(provider, &messages, PromptKind::SqlGeneration, parse_sql_reply)?;
        let outcome = match executor {
            None => AttemptOutcome::Unchecked,
            Some(ex) => match ex.execute(parsed.database.as_deref(), &parsed.sql) {
                Ok(rows) if rows.is_empty() => AttemptOutcome::Empty,
                Ok(rows) => AttemptOutcome::Rows(rows.len()),
                Err(e) => AttemptOutcome::Error(e),
            },
        };
        let next = follow_up(&outcome);
        transcript.push(SqlAttempt {
            database: parsed.database,
            sql: parsed.sql,
            outcome,
        });
        let rounds = transcript.len() - 1;
        match next {
            Some(message) if rounds < request.max_corrections => {
                messages.push(ChatMessage::assistant(reply));
                messages.push(ChatMessage::user(message));
            }
            _ => {
                let last = transcript.last().unwrap();
                return Ok(SqlResult {
                    database: last.database.clone(),
                    sql: last.sql.clone(),
                    correction_rounds: rounds,
                    transcript,
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::parse_catalog;
    use crate::llm::{ModelError, ScriptedModel};
    use std::sync::Mutex;

    const FIGURE_QUESTION: &str = "Where is Amy Firth's hometown? Hometown refers to city, county, state";

    fn allowed(items: &[(&str, &str)]) -> BTreeSet<TableRef> {
        items.iter().map(|(d, t)| TableRef::new(*d, *t)).collect()
    }

    #[test]
    fn prediction_keeps_rank_order_and_guards_hallucinations() {
        let reply = r#"<thinking>x</thinking>
<relevant_tables>
  <database name="d">
    <table rank="2">b</table>
    <table rank="1">a</table>
    <table rank="3">ghost</table>
    <table rank="4">a</table>
  </database>
</relevant_tables>"#;
        let model = ScriptedModel::new().with_reply(PromptKind::TablePrediction, "q", reply);
        let p = predict_tables("<db>d</db>", "q", &model, &allowed(&[("d", "a"), ("d", "b")])).unwrap();
        let got: Vec<_> = p.tables.iter().map(|t| (t.table.table.as_str(), t.rank)).collect();
        assert_eq!(got, [("a", 1), ("b", 2)]);
        assert_eq!(p.dropped, ["d.ghost"]);
        assert_eq!(p.thinking.as_deref(), Some("x"));
    }

    #[test]
    fn figure_three_answer() {
        let reply = r#"<thinking>
Hometown maps to a place, so tables holding people and places matter.
</thinking>

<relevant_tables>
  <database name="law_episode">
    <table rank="1">person</table>
  </database>
  <database name="regional_sales">
    <table rank="2">`store locations`</table>
  </database>
  <database name="student_club">
    <table rank="3">zip_code</table>
    <table rank="4">member</table>
  </database>
  <database name="retail_complains">
    <table rank="5">district</table>
  </database>
</relevant_tables>"#;
        let model = ScriptedModel::new().with_reply(PromptKind::TablePrediction, FIGURE_QUESTION, reply);
        let expected = [
            "law_episode.person",
            "regional_sales.store locations",
            "student_club.zip_code",
            "student_club.member",
            "retail_complains.district",
        ];
        let pool: BTreeSet<TableRef> = expected.iter().map(|s| s.parse().unwrap()).collect();
        let p = predict_tables("<db>x</db>", FIGURE_QUESTION, &model, &pool).unwrap();
        let names: Vec<String> = p.tables.iter().map(|t| t.table.to_string()).collect();
        assert_eq!(names, expected);
    }

    #[test]
    fn unparseable_prediction_retries_once_then_fails() {
        let model = ScriptedModel::new().with_replies(PromptKind::TablePrediction, "q", ["nope", "still nope"]);
        let err = predict_tables("<db>d</db>", "q", &model, &BTreeSet::new()).unwrap_err();
        assert!(matches!(err, LlmError::Parse { prompt: PromptKind::TablePrediction, .. }));
        assert_eq!(model.call_count(), 2);

        let model = ScriptedModel::new().with_replies(
            PromptKind::TablePrediction,
            "q",
            ["nope", "<relevant_tables></relevant_tables>"],
        );
        assert!(predict_tables("<db>d</db>", "q", &model, &BTreeSet::new()).unwrap().tables.is_empty());
        assert!(matches!(
            predict_tables(" ", "q", &model, &BTreeSet::new()),
            Err(LlmError::EmptyInput(_))
        ));
    }

    #[test]
    fn description_synthesis() {
        let model = ScriptedModel::new().with_reply(
            PromptKind::TableDescription,
            "member",
            "<thinking>t</thinking>\n<description>\nClub members.\n</description>",
        );
        let schema = "<db>club\n\n<table>member\n<schema>\n(id:int),\n</schema>\n</table>\n\n</db>";
        assert_eq!(synthesize_table_description(schema, &model).unwrap(), "Club members.");

        let model = ScriptedModel::new().with_reply(PromptKind::TableDescription, "member", "Club members.");
        assert!(matches!(
            synthesize_table_description(schema, &model),
            Err(LlmError::Parse { .. })
        ));
    }

    #[test]
    fn describe_catalog_reports_failures_and_keeps_catalog() {
        let catalog = parse_catalog(
            r#"{"version":1,"databases":[{"name":"d","tables":[
                {"name":"a","columns":[{"name":"x","data_type":"int"}]},
                {"name":"b","description":"kept","columns":[{"name":"y","data_type":"int"}]},
                {"name":"c","columns":[{"name":"z","data_type":"int"}]}]}]}"#,
        )
        .unwrap();
        let model = ScriptedModel::new().with_reply(PromptKind::TableDescription, "c", "no tags");
        let (described, failures) = describe_catalog(&catalog, &model, false);
        let descs: Vec<Option<&str>> = described.databases[0]
            .tables
            .iter()
            .map(|t| t.description.as_deref())
            .collect();
        assert_eq!(descs, [Some("The a table records x."), Some("kept"), None]);
        assert_eq!(failures.len(), 1);
        assert_eq!(failures[0].table, "d.c");
    }

    struct Scripted(Mutex<Vec<Result<QueryRows, String>>>);

    impl QueryExecutor for Scripted {
        fn execute(&self, _: Option<&str>, _: &str) -> Result<QueryRows, String> {
            let mut q = self.0.lock().unwrap();
            if q.len() > 1 {
                q.remove(0)
            } else {
                q[0].clone()
            }
        }
    }

    fn request<'a>() -> SqlRequest<'a> {
        SqlRequest {
            schema: "<db>d\n\n<table>t\n<schema>\n</schema>\n</table>\n\n</db>",
            question: "q",
            dialect_instruction: "Use SQLite.",
            max_corrections: DEFAULT_MAX_CORRECTIONS,
        }
    }

    #[test]
    fn sql_without_executor_is_one_round() {
        let model = ScriptedModel::new();
        let r = generate_sql(&request(), &model, None).unwrap();
        assert_eq!(r.correction_rounds, 0);
        assert_eq!(r.sql, "SELECT * FROM t");
        assert_eq!(r.database.as_deref(), Some("d"));
        assert_eq!(r.transcript[0].outcome, AttemptOutcome::Unchecked);
        assert_eq!(model.call_count(), 1);
    }

    #[test]
    fn sql_succeeding_first_time() {
        let ex = Scripted(Mutex::new(vec![Ok(vec![vec!["1".into()]])]));
        let r = generate_sql(&request(), &ScriptedModel::new(), Some(&ex)).unwrap();
        assert_eq!(r.correction_rounds, 0);
        assert_eq!(r.transcript[0].outcome, AttemptOutcome::Rows(1));
    }

    #[test]
    fn sql_self_correction_conversation() {
        let model = ScriptedModel::new().with_replies(
            PromptKind::SqlGeneration,
            "q",
            [
                "<database>d</database><sql_query>SELEC 1</sql_query>",
                "<database>d</database><sql_query>SELECT 1</sql_query>",
            ],
        );
        let ex = Scripted(Mutex::new(vec![Err("syntax error near SELEC".into()), Ok(vec![vec!["1".into()]])]));
        let r = generate_sql(&request(), &model, Some(&ex)).unwrap();
        assert_eq!(r.correction_rounds, 1);
        assert_eq!(r.transcript.len(), 2);
        assert_eq!(r.sql, "SELECT 1");
        let second_call = &model.transcripts()[1];
        assert_eq!(second_call.len(), 3);
        assert_eq!(second_call[1].content, "<database>d</database><sql_query>SELEC 1</sql_query>");
        assert!(second_call[2].content.contains("syntax error near SELEC"));
    }

    #[test]
    fn sql_corrections_are_bounded() {
        let ex = Scripted(Mutex::new(vec![Ok(vec![])]));
        let model = ScriptedModel::new();
        let r = generate_sql(&request(), &model, Some(&ex)).unwrap();
        assert_eq!(r.correction_rounds, DEFAULT_MAX_CORRECTIONS);
        assert_eq!(r.transcript.len(), DEFAULT_MAX_CORRECTIONS + 1);
        assert!(model.transcripts()[1][2].content.contains("the output table is empty"));
    }

    #[test]
    fn sql_parse_and_transport_failures() {
        let model = ScriptedModel::new().with_reply(PromptKind::SqlGeneration, "q", "SELECT 1");
        assert!(matches!(generate_sql(&request(), &model, None), Err(LlmError::Parse { .. })));
        let model = ScriptedModel::new().with_error(PromptKind::SqlGeneration, "q", ModelError::Transport("down".into()));
        assert!(matches!(generate_sql(&request(), &model, None), Err(LlmError::Model(_))));
    }
}
