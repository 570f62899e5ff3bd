//! Benchmark datasets, recall and token metrics, cost estimates, and the
//! evaluation harness comparing entity-level linking with table-as-document
//! baselines.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{CalibrationWeights, WEIGHTS_FORMAT_VERSION};
use crate::catalog::{Catalog, CatalogError, EntityId, EntityKind, SchemaEntity, TableRef, TableSelection, CATALOG_FORMAT_VERSION};
use crate::embedding::{cosine_similarity, embed_texts, EmbeddingError, EmbeddingProvider};
use crate::index::{Bm25Error, Bm25Index, Bm25Params, EntityIndex, Tokenizer, INDEX_FORMAT_VERSION};
use crate::linker::{link, LinkError, LinkResult, PipelineConfig, Providers};
use crate::llm::{
    generate_sql, predict_tables, PromptKind, QueryExecutor, QueryRows, SqlRequest, TextModelProvider,
    DEFAULT_MAX_CORRECTIONS, PROMPT_SET_VERSION,
};
use crate::nlq::KeywordSource;

pub use crate::text::count_tokens;

pub const DEFAULT_RECALL_AT: [usize; 3] = [5, 15, 50];
pub const DEFAULT_SQL_TABLE_BUDGET: usize = 15;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("question {0} has no gold tables")]
    EmptyGold(String),
    #[error("duplicate question id {0}")]
    DuplicateId(String),
    #[error("question {question_id}: gold table {table} is not in the catalog")]
    UnknownGoldTable { question_id: String, table: TableRef },
    #[error("recall cutoffs must be positive")]
    InvalidCutoff,
    #[error("method {0} needs {1}")]
    Missing(EvalMethod, &'static str),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Bm25(#[from] Bm25Error),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("cannot serialize report: {0}")]
    Serialize(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub question_id: String,
    pub question: String,
    pub gold_tables: BTreeSet<TableRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_sql: Option<String>,
}

/// Parses one JSON record per line; blank lines are skipped.
pub fn parse_dataset(text: &str) -> Result<Vec<BenchmarkRecord>, EvalError> {
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: BenchmarkRecord = serde_json::from_str(line).map_err(|e| EvalError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if record.gold_tables.is_empty() {
            return Err(EvalError::EmptyGold(record.question_id));
        }
        if !ids.insert(record.question_id.clone()) {
            return Err(EvalError::DuplicateId(record.question_id));
        }
        out.push(record);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<BenchmarkRecord>, EvalError> {
    parse_dataset(&fs::read_to_string(path)?)
}

pub fn write_dataset(path: &Path, records: &[BenchmarkRecord]) -> Result<(), EvalError> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(|e| EvalError::Serialize(e.to_string()))?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Checks every gold table exists in `catalog`.
pub fn validate_dataset(records: &[BenchmarkRecord], catalog: &Catalog) -> Result<(), EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    for r in records {
        if let Some(t) = r.gold_tables.iter().find(|t| catalog.table(t).is_none()) {
            return Err(EvalError::UnknownGoldTable {
                question_id: r.question_id.clone(),
                table: t.clone(),
            });
        }
    }
    Ok(())
}

/// `n` records drawn without replacement under `seed`, in dataset order.
pub fn sample_records(records: &[BenchmarkRecord], n: usize, seed: u64) -> Vec<BenchmarkRecord> {
    if n >= records.len() {
        return records.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, records.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| records[i].clone()).collect()
}

/// Share of `gold` found in the first `n` predictions.
pub fn recall_at_n(predicted: &[TableRef], gold: &BTreeSet<TableRef>, n: usize) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    let found: BTreeSet<&TableRef> = predicted.iter().take(n).filter(|t| gold.contains(*t)).collect();
    found.len() as f64 / gold.len() as f64
}

pub fn macro_average(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// USD per 1,000 input tokens for each model role.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriceTable {
    pub keyword_model: f64,
    pub main_model: f64,
    pub embedder: f64,
}

impl Default for PriceTable {
    fn default() -> Self {
        Self {
            keyword_model: 0.0008,
            main_model: 0.003,
            embedder: 0.0001,
        }
    }
}

/// Input tokens sent to each model role.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenTally {
    pub keyword_model: u64,
    pub main_model: u64,
    pub embedder: u64,
}

impl std::ops::AddAssign for TokenTally {
    fn add_assign(&mut self, rhs: Self) {
        self.keyword_model += rhs.keyword_model;
        self.main_model += rhs.main_model;
        self.embedder += rhs.embedder;
    }
}

pub fn estimate_cost(tally: &TokenTally, prices: &PriceTable) -> f64 {
    tally.keyword_model as f64 / 1000.0 * prices.keyword_model
        + tally.main_model as f64 / 1000.0 * prices.main_model
        + tally.embedder as f64 / 1000.0 * prices.embedder
}

/// Percentage of each entity type's entities that survive filtering.
/// Types absent from `full` are omitted.
pub fn entity_usage(filtered: &BTreeSet<EntityId>, full: &[SchemaEntity]) -> BTreeMap<EntityKind, f64> {
    let mut counts: BTreeMap<EntityKind, (usize, usize)> = BTreeMap::new();
    for e in full {
        let c = counts.entry(e.kind).or_default();
        c.1 += 1;
        if filtered.contains(&e.id) {
            c.0 += 1;
        }
    }
    counts
        .into_iter()
        .map(|(k, (kept, total))| (k, kept as f64 / total as f64 * 100.0))
        .collect()
}

/// Decides whether a predicted result set answers like the gold one.
pub trait ResultComparator: Send + Sync {
    fn equivalent(&self, gold: &QueryRows, predicted: &QueryRows) -> bool;
}

/// Order-insensitive equality of row multisets.
#[derive(Debug, Clone, Copy, Default)]
pub struct MultisetComparator;

impl ResultComparator for MultisetComparator {
    fn equivalent(&self, gold: &QueryRows, predicted: &QueryRows) -> bool {
        let mut a = gold.clone();
        let mut b = predicted.clone();
        a.sort();
        b.sort();
        a == b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMethod {
    /// Tables ranked by calibrated entity relevance.
    EntityRetriever,
    /// Entity retrieval under the table budget, then model table prediction.
    EntityFull,
    /// BM25 over one document per table.
    Bm25Tabledoc,
    /// Embedding similarity over one document per table.
    DenseTabledoc,
}

impl EvalMethod {
    pub const ALL: [EvalMethod; 4] = [
        EvalMethod::EntityRetriever,
        EvalMethod::EntityFull,
        EvalMethod::Bm25Tabledoc,
        EvalMethod::DenseTabledoc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalMethod::EntityRetriever => "entity_retriever",
            EvalMethod::EntityFull => "entity_full",
            EvalMethod::Bm25Tabledoc => "bm25_tabledoc",
            EvalMethod::DenseTabledoc => "dense_tabledoc",
        }
    }

    fn is_entity_level(self) -> bool {
        matches!(self, EvalMethod::EntityRetriever | EvalMethod::EntityFull)
    }
}

impl fmt::Display for EvalMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// Recall cutoffs.
    pub at: Vec<usize>,
    pub bm25_tokenizer: Tokenizer,
    pub bm25_params: Bm25Params,
    /// Baselines fill the entity linker's schema token budget, then run
    /// table prediction over that pool.
    pub budget_matched: bool,
    pub generate_sql: bool,
    /// Tables whose full schemas baselines pass to SQL generation.
    pub sql_table_budget: usize,
    pub dialect_instruction: String,
    pub max_corrections: usize,
    pub prices: PriceTable,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            at: DEFAULT_RECALL_AT.to_vec(),
            bm25_tokenizer: Tokenizer::Word,
            bm25_params: Bm25Params::default(),
            budget_matched: false,
            generate_sql: false,
            sql_table_budget: DEFAULT_SQL_TABLE_BUDGET,
            dialect_instruction: "The database engine is SQLite.".to_string(),
            max_corrections: DEFAULT_MAX_CORRECTIONS,
            prices: PriceTable::default(),
        }
    }
}

/// Everything a benchmark run reads.
#[derive(Clone, Copy)]
pub struct EvalContext<'a> {
    pub catalog: &'a Catalog,
    /// Required by the entity methods and by budget matching.
    pub index: Option<&'a EntityIndex>,
    pub weights: &'a CalibrationWeights,
    pub config: &'a PipelineConfig,
    pub embedder: &'a dyn EmbeddingProvider,
    pub keyword_model: Option<&'a dyn TextModelProvider>,
    /// Table prediction and SQL generation.
    pub main_model: Option<&'a dyn TextModelProvider>,
    pub executor: Option<&'a dyn QueryExecutor>,
    pub comparator: &'a dyn ResultComparator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallPoint {
    pub n: usize,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionResult {
    pub question_id: String,
    /// Final ranking, cut at the largest recall cutoff.
    pub ranked_tables: Vec<TableRef>,
    pub recall: Vec<RecallPoint>,
    /// Recall of the table pool handed to table prediction.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool_recall: Option<f64>,
    pub prediction_schema_tokens: usize,
    pub generation_schema_tokens: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub keywords: Vec<String>,
    /// Per keyword, how many tables carry a table or column name containing it.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub keyword_overlap: BTreeMap<String, usize>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub entity_usage: BTreeMap<EntityKind, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sql: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub execution_correct: Option<bool>,
    pub tokens: TokenTally,
    /// Recoverable failure (for example an unparseable prediction that fell
    /// back to the retriever ranking).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaTokenTotals {
    pub prediction: usize,
    pub generation: usize,
    pub total: usize,
    pub mean_per_question: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentVersions {
    pub package: String,
    pub prompt_set: String,
    pub catalog_format: u32,
    pub index_format: u32,
    pub weights_format: u32,
    pub embedder: String,
    pub keyword_model: Option<String>,
    pub main_model: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: EvalMethod,
    pub question_count: usize,
    pub macro_recall: Vec<RecallPoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool_recall: Option<f64>,
    pub schema_tokens: SchemaTokenTotals,
    /// Mean per-question percentage of each type's entities in the
    /// candidate schema.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub entity_usage: BTreeMap<EntityKind, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub execution_accuracy: Option<f64>,
    pub tokens: TokenTally,
    pub cost_usd: f64,
    pub config: PipelineConfig,
    pub options: EvalOptions,
    pub versions: ComponentVersions,
    pub questions: Vec<QuestionResult>,
}

impl EvalReport {
    pub fn recall_at(&self, n: usize) -> Option<f64> {
        self.macro_recall.iter().find(|p| p.n == n).map(|p| p.recall)
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| EvalError::Serialize(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }
}

/// One document per table: its full rendered schema.
struct TableDocs {
    tables: Vec<TableRef>,
    texts: Vec<String>,
}

impl TableDocs {
    fn build(catalog: &Catalog, config: &PipelineConfig) -> Result<Self, EvalError> {
        let tables: Vec<TableRef> = catalog.table_refs().collect();
        let texts = tables
            .iter()
            .map(|t| catalog.render_table(t, &config.render_options()))
            .collect::<Result<_, _>>()?;
        Ok(Self { tables, texts })
    }

    /// Tables sorted by descending score, ties by ascending name.
    fn rank(&self, scores: &[f64]) -> Vec<TableRef> {
        let mut order: Vec<usize> = (0..self.tables.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then_with(|| self.tables[a].to_string().cmp(&self.tables[b].to_string()))
        });
        order.into_iter().map(|i| self.tables[i].clone()).collect()
    }
}

enum Baseline {
    Bm25(Bm25Index),
    Dense(Vec<crate::embedding::Embedding>),
    None,
}

struct Prepared<'a> {
    ctx: EvalContext<'a>,
    method: EvalMethod,
    options: &'a EvalOptions,
    docs: TableDocs,
    baseline: Baseline,
    /// Lowercased table and column names per table, for keyword overlap.
    names: Vec<(TableRef, Vec<String>)>,
    full_entities: Vec<SchemaEntity>,
}

fn providers<'a>(ctx: &EvalContext<'a>) -> Providers<'a> {
    Providers {
        embedder: ctx.embedder,
        keyword_model: ctx.keyword_model,
    }
}

impl Prepared<'_> {
    fn index(&self) -> Result<&EntityIndex, EvalError> {
        self.ctx.index.ok_or(EvalError::Missing(self.method, "an entity index"))
    }

    fn main_model(&self) -> Result<&dyn TextModelProvider, EvalError> {
        self.ctx.main_model.ok_or(EvalError::Missing(self.method, "a main model"))
    }

    fn link(&self, question: &str, config: &PipelineConfig) -> Result<LinkResult, EvalError> {
        Ok(link(question, self.index()?, self.ctx.catalog, self.ctx.weights, config, &providers(&self.ctx))?)
    }

    fn render_full(&self, tables: &[TableRef]) -> Result<String, EvalError> {
        let selection: Vec<TableSelection> = tables.iter().cloned().map(TableSelection::full).collect();
        Ok(self.ctx.catalog.render(&selection, &self.ctx.config.render_options())?)
    }

    fn keyword_tokens(&self, question: &str, link: &LinkResult) -> TokenTally {
        let mut t = TokenTally {
            embedder: link.queries.iter().map(|q| count_tokens(q) as u64).sum(),
            ..Default::default()
        };
        if self.ctx.config.keyword_source == KeywordSource::Llm && self.ctx.keyword_model.is_some() {
            let prompt = PromptKind::KeywordExtraction
                .render(&[("QUESTION", question)])
                .unwrap_or_default();
            t.keyword_model = count_tokens(&prompt) as u64;
        }
        t
    }

    fn keyword_overlap(&self, keywords: &[String]) -> BTreeMap<String, usize> {
        keywords
            .iter()
            .map(|k| {
                let needle = k.to_lowercase();
                let n = self
                    .names
                    .iter()
                    .filter(|(_, names)| names.iter().any(|n| n.contains(&needle)))
                    .count();
                (k.clone(), n)
            })
            .collect()
    }

    fn baseline_ranking(&self, question: &str, tally: &mut TokenTally) -> Result<Vec<TableRef>, EvalError> {
        match &self.baseline {
            Baseline::Bm25(index) => Ok(self.docs.rank(&index.scores(question))),
            Baseline::Dense(vectors) => {
                let q = embed_texts(self.ctx.embedder, &[question])?.remove(0);
                tally.embedder += count_tokens(question) as u64;
                let scores: Vec<f64> = vectors
                    .iter()
                    .map(|v| cosine_similarity(q.as_slice(), v.as_slice()))
                    .collect::<Result<_, _>>()?;
                Ok(self.docs.rank(&scores))
            }
            Baseline::None => unreachable!("baseline ranking requested for an entity method"),
        }
    }

    /// Runs table prediction over `schema`; on failure keeps `fallback`.
    fn predict(
        &self,
        schema: &str,
        question: &str,
        pool: &[TableRef],
        result: &mut QuestionResult,
    ) -> Result<Vec<TableRef>, EvalError> {
        let model = self.main_model()?;
        let prompt = PromptKind::TablePrediction
            .render(&[("SCHEMA", schema), ("QUESTION", question)])
            .unwrap_or_default();
        result.tokens.main_model += count_tokens(&prompt) as u64;
        result.prediction_schema_tokens = count_tokens(schema);
        let allowed: BTreeSet<TableRef> = pool.iter().cloned().collect();
        match predict_tables(schema, question, model, &allowed) {
            Ok(p) => Ok(p.table_refs()),
            Err(e) => {
                tracing::warn!(error = %e, "table prediction failed; keeping the retrieval ranking");
                result.warning = Some(format!("table prediction failed: {e}"));
                Ok(pool.to_vec())
            }
        }
    }

    fn evaluate(&self, record: &BenchmarkRecord) -> Result<QuestionResult, EvalError> {
        let max_at = self.options.at.iter().copied().max().unwrap_or(1);
        let config = self.ctx.config;
        let mut result = QuestionResult {
            question_id: record.question_id.clone(),
            ranked_tables: Vec::new(),
            recall: Vec::new(),
            pool_recall: None,
            prediction_schema_tokens: 0,
            generation_schema_tokens: 0,
            keywords: Vec::new(),
            keyword_overlap: BTreeMap::new(),
            entity_usage: BTreeMap::new(),
            sql: None,
            execution_correct: None,
            tokens: TokenTally::default(),
            warning: None,
        };
        let q = record.question.as_str();

        let (ranked, generation_tables) = match self.method {
            EvalMethod::EntityRetriever | EvalMethod::EntityFull => {
                let wide = PipelineConfig {
                    table_budget: config.table_budget.max(max_at),
                    ..config.clone()
                };
                let linked = self.link(q, &wide)?;
                result.tokens += self.keyword_tokens(q, &linked);
                result.keywords = linked.keywords.keywords.clone();
                result.keyword_overlap = self.keyword_overlap(&result.keywords);

                let budget = &linked.candidates[..linked.candidates.len().min(config.table_budget)];
                let filtered: BTreeSet<EntityId> = budget
                    .iter()
                    .flat_map(|c| c.best_hits.iter().map(|h| h.entity_id.clone()))
                    .collect();
                result.entity_usage = entity_usage(&filtered, &self.full_entities);
                let pool: Vec<TableRef> = budget.iter().map(|c| c.table.clone()).collect();

                if self.method == EvalMethod::EntityRetriever {
                    let ranked = linked.ranked_tables();
                    let generation = ranked.iter().take(self.options.sql_table_budget).cloned().collect();
                    (ranked, generation)
                } else {
                    result.pool_recall = Some(recall_at_n(&pool, &record.gold_tables, pool.len()));
                    let schema = crate::linker::build_candidate_schema(self.ctx.catalog, budget, config)?;
                    let predicted = self.predict(&schema, q, &pool, &mut result)?;
                    (predicted.clone(), predicted)
                }
            }
            EvalMethod::Bm25Tabledoc | EvalMethod::DenseTabledoc => {
                let ranked = self.baseline_ranking(q, &mut result.tokens)?;
                if self.options.budget_matched {
                    let linked = self.link(q, config)?;
                    let budget = linked.accounting.schema_tokens;
                    let mut used = 0;
                    let mut pool = Vec::new();
                    for t in &ranked {
                        let i = self.docs.tables.iter().position(|x| x == t).unwrap();
                        let cost = count_tokens(&self.docs.texts[i]);
                        if !pool.is_empty() && used + cost > budget {
                            break;
                        }
                        used += cost;
                        pool.push(t.clone());
                    }
                    result.pool_recall = Some(recall_at_n(&pool, &record.gold_tables, pool.len()));
                    if self.ctx.main_model.is_some() {
                        let schema = self.render_full(&pool)?;
                        let predicted = self.predict(&schema, q, &pool, &mut result)?;
                        (predicted.clone(), predicted)
                    } else {
                        (pool.clone(), pool)
                    }
                } else {
                    let generation = ranked.iter().take(self.options.sql_table_budget).cloned().collect();
                    (ranked, generation)
                }
            }
        };

        result.recall = self
            .options
            .at
            .iter()
            .map(|&n| RecallPoint {
                n,
                recall: recall_at_n(&ranked, &record.gold_tables, n),
            })
            .collect();
        result.ranked_tables = ranked.into_iter().take(max_at).collect();

        let generation_schema = if generation_tables.is_empty() {
            String::new()
        } else {
            self.render_full(&generation_tables)?
        };
        result.generation_schema_tokens = count_tokens(&generation_schema);

        if self.options.generate_sql && !generation_schema.is_empty() {
            let model = self.main_model()?;
            let request = SqlRequest {
                schema: &generation_schema,
                question: q,
                dialect_instruction: &self.options.dialect_instruction,
                max_corrections: self.options.max_corrections,
            };
            let prompt_tokens = PromptKind::SqlGeneration
                .render(&[
                    ("DIALECT_INSTRUCTION", request.dialect_instruction),
                    ("DATABASE_SCHEMA", request.schema),
                    ("QUESTION", q),
                ])
                .map(|p| count_tokens(&p))
                .unwrap_or_default();
            match generate_sql(&request, model, self.ctx.executor) {
                Ok(sql) => {
                    result.tokens.main_model += (prompt_tokens * (sql.correction_rounds + 1)) as u64;
                    if let (Some(ex), Some(gold_sql)) = (self.ctx.executor, &record.gold_sql) {
                        let gold_db = record.gold_tables.iter().next().map(|t| t.database.as_str());
                        result.execution_correct = Some(
                            match (ex.execute(gold_db, gold_sql), ex.execute(sql.database.as_deref(), &sql.sql)) {
                                (Ok(g), Ok(p)) => self.ctx.comparator.equivalent(&g, &p),
                                _ => false,
                            },
                        );
                    }
                    result.sql = Some(sql.sql);
                }
                Err(e) => {
                    result.tokens.main_model += prompt_tokens as u64;
                    result.warning = Some(format!("SQL generation failed: {e}"));
                    if record.gold_sql.is_some() && self.ctx.executor.is_some() {
                        result.execution_correct = Some(false);
                    }
                }
            }
        }
        Ok(result)
    }
}

/// Evaluates `method` on every record. Questions run in parallel; the report
/// is assembled in dataset order.
pub fn run_benchmark(
    ctx: &EvalContext<'_>,
    dataset: &[BenchmarkRecord],
    method: EvalMethod,
    options: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    validate_dataset(dataset, ctx.catalog)?;
    if options.at.is_empty() || options.at.contains(&0) {
        return Err(EvalError::InvalidCutoff);
    }
    ctx.config.validate()?;
    if method.is_entity_level() && ctx.index.is_none() {
        return Err(EvalError::Missing(method, "an entity index"));
    }
    if method == EvalMethod::EntityFull && ctx.main_model.is_none() {
        return Err(EvalError::Missing(method, "a main model"));
    }
    if options.budget_matched && ctx.index.is_none() {
        return Err(EvalError::Missing(method, "an entity index for budget matching"));
    }
    if options.generate_sql && ctx.main_model.is_none() {
        return Err(EvalError::Missing(method, "a main model for SQL generation"));
    }

    let docs = TableDocs::build(ctx.catalog, ctx.config)?;
    let baseline = match method {
        EvalMethod::Bm25Tabledoc => {
            let corpus: Vec<(String, String)> = docs
                .tables
                .iter()
                .map(ToString::to_string)
                .zip(docs.texts.iter().cloned())
                .collect();
            Baseline::Bm25(Bm25Index::build(&corpus, options.bm25_tokenizer, options.bm25_params)?)
        }
        EvalMethod::DenseTabledoc => {
            let texts: Vec<&str> = docs.texts.iter().map(String::as_str).collect();
            let vectors = texts
                .par_chunks(64)
                .map(|chunk| embed_texts(ctx.embedder, chunk))
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .flatten()
                .collect();
            Baseline::Dense(vectors)
        }
        _ => Baseline::None,
    };
    let names = ctx
        .catalog
        .databases
        .iter()
        .flat_map(|db| {
            db.tables.iter().map(move |t| {
                let mut names = vec![t.name.to_lowercase()];
                names.extend(t.columns.iter().map(|c| c.name.to_lowercase()));
                (TableRef::new(&db.name, &t.name), names)
            })
        })
        .collect();
    let prepared = Prepared {
        ctx: *ctx,
        method,
        options,
        docs,
        baseline,
        names,
        full_entities: ctx.index.map(|i| i.entities().cloned().collect()).unwrap_or_default(),
    };

    let questions: Vec<QuestionResult> = dataset
        .par_iter()
        .map(|r| prepared.evaluate(r))
        .collect::<Result<_, _>>()?;

    let macro_recall = options
        .at
        .iter()
        .enumerate()
        .map(|(i, &n)| RecallPoint {
            n,
            recall: macro_average(&questions.iter().map(|q| q.recall[i].recall).collect::<Vec<_>>()),
        })
        .collect();
    let pools: Vec<f64> = questions.iter().filter_map(|q| q.pool_recall).collect();
    let prediction: usize = questions.iter().map(|q| q.prediction_schema_tokens).sum();
    let generation: usize = questions.iter().map(|q| q.generation_schema_tokens).sum();
    let mut tokens = TokenTally::default();
    for q in &questions {
        tokens += q.tokens;
    }
    let mut usage: BTreeMap<EntityKind, f64> = BTreeMap::new();
    for q in &questions {
        for (k, v) in &q.entity_usage {
            *usage.entry(*k).or_default() += v / questions.len() as f64;
        }
    }
    let executed: Vec<f64> = questions
        .iter()
        .filter_map(|q| q.execution_correct)
        .map(|c| if c { 1.0 } else { 0.0 })
        .collect();

    Ok(EvalReport {
        method,
        question_count: questions.len(),
        macro_recall,
        pool_recall: (!pools.is_empty()).then(|| macro_average(&pools)),
        schema_tokens: SchemaTokenTotals {
            prediction,
            generation,
            total: prediction + generation,
            mean_per_question: (prediction + generation) as f64 / questions.len() as f64,
        },
        entity_usage: usage,
        execution_accuracy: (!executed.is_empty()).then(|| macro_average(&executed)),
        cost_usd: estimate_cost(&tokens, &options.prices),
        tokens,
        config: ctx.config.clone(),
        options: options.clone(),
        versions: ComponentVersions {
            package: env!("CARGO_PKG_VERSION").to_string(),
            prompt_set: PROMPT_SET_VERSION.to_string(),
            catalog_format: CATALOG_FORMAT_VERSION,
            index_format: INDEX_FORMAT_VERSION,
            weights_format: WEIGHTS_FORMAT_VERSION,
            embedder: ctx.embedder.name().to_string(),
            keyword_model: ctx.keyword_model.map(|m| m.name().to_string()),
            main_model: ctx.main_model.map(|m| m.name().to_string()),
        },
        questions,
    })
}
