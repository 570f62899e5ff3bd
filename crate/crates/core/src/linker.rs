//! Inference-time schema linking: keyword fan-out retrieval, calibrated
//! table ranking under a table budget, and candidate schema rendering.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{
    apply_entropy_calibration, apply_type_weights, auc, entity_type_weights, recall_curve,
    CalibrationError, CalibrationWeights, RecallCurve, DEFAULT_ENTROPY_ALPHA,
};
use crate::catalog::{Catalog, CatalogError, EntityFilter, EntityId, EntityKind, RenderOptions, TableRef, TableSelection};
use crate::embedding::{embed_texts, Embedding, EmbeddingProvider};
use crate::index::{EntityIndex, IndexError, RetrievalHit};
use crate::llm::TextModelProvider;
use crate::nlq::{extract_keywords, fallback_keywords, retrieval_queries, KeywordSet, KeywordSource, QueryMode};
use crate::text::count_tokens;

pub const DEFAULT_PER_QUERY_TOP_K: usize = 100;
pub const DEFAULT_TABLE_BUDGET: usize = 50;

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("question must not be empty")]
    EmptyQuestion,
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("retrieval for the question failed: {0}")]
    Retrieval(#[from] IndexError),
    #[error("{0}; the index and catalog are out of sync, rebuild the index")]
    CatalogDrift(#[from] CatalogError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Hits kept per (query, entity type) search.
    pub per_query_top_k: usize,
    /// Tables kept in the candidate schema.
    pub table_budget: usize,
    /// Entity types searched; `None` searches every type in the index.
    pub enabled_types: Option<BTreeSet<EntityKind>>,
    pub keyword_source: KeywordSource,
    pub query_mode: QueryMode,
    pub entropy_calibration: bool,
    pub entropy_alpha: f64,
    /// Render `<desc>` sections in schemas built from the catalog.
    pub include_table_descriptions: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            per_query_top_k: DEFAULT_PER_QUERY_TOP_K,
            table_budget: DEFAULT_TABLE_BUDGET,
            enabled_types: None,
            keyword_source: KeywordSource::Fallback,
            query_mode: QueryMode::KeywordsAndQuestion,
            entropy_calibration: false,
            entropy_alpha: DEFAULT_ENTROPY_ALPHA,
            include_table_descriptions: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), LinkError> {
        if self.per_query_top_k == 0 {
            return Err(LinkError::Config("per_query_top_k must be at least 1".into()));
        }
        if self.table_budget == 0 {
            return Err(LinkError::Config("table_budget must be at least 1".into()));
        }
        if !(self.entropy_alpha > 0.0 && self.entropy_alpha.is_finite()) {
            return Err(LinkError::Config("entropy_alpha must be positive".into()));
        }
        if self.enabled_types.as_ref().is_some_and(BTreeSet::is_empty) {
            return Err(LinkError::Config("enabled_types must not be empty".into()));
        }
        Ok(())
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions {
            include_table_descriptions: self.include_table_descriptions,
        }
    }

    /// Enabled types that the index actually holds.
    pub fn searched_kinds(&self, index: &EntityIndex) -> Vec<EntityKind> {
        index
            .kinds()
            .filter(|k| self.enabled_types.as_ref().is_none_or(|e| e.contains(k)))
            .collect()
    }
}

#[derive(Clone, Copy)]
pub struct Providers<'a> {
    pub embedder: &'a dyn EmbeddingProvider,
    /// Used when the config asks for model-extracted keywords.
    pub keyword_model: Option<&'a dyn TextModelProvider>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableCandidate {
    pub table: TableRef,
    pub score: f64,
    /// Distinct (entity, query) matches on this table.
    pub support: usize,
    /// Each entity's best hit, descending calibrated score.
    pub best_hits: Vec<RetrievalHit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkAccounting {
    pub query_count: usize,
    pub failed_queries: Vec<String>,
    pub hit_count: usize,
    pub filtered_entity_count: usize,
    pub schema_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkResult {
    pub keywords: KeywordSet,
    pub queries: Vec<String>,
    pub candidates: Vec<TableCandidate>,
    pub filtered_entities: Vec<EntityId>,
    pub candidate_schema: String,
    pub accounting: LinkAccounting,
}

impl LinkResult {
    pub fn ranked_tables(&self) -> Vec<TableRef> {
        self.candidates.iter().map(|c| c.table.clone()).collect()
    }
}

/// Wall-clock milliseconds per stage, kept apart from [`LinkResult`] so that
/// results compare byte for byte across runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub keywords_ms: f64,
    pub retrieval_ms: f64,
    pub ranking_ms: f64,
    pub schema_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub hits: Vec<RetrievalHit>,
    pub failed_queries: Vec<String>,
}

/// Keywords for `question` from the configured source.
pub fn question_keywords(question: &str, config: &PipelineConfig, providers: &Providers<'_>) -> KeywordSet {
    match (config.keyword_source, providers.keyword_model) {
        (KeywordSource::Llm, Some(model)) => extract_keywords(question, model),
        (KeywordSource::Llm, None) => {
            tracing::warn!("no keyword model configured; using rule-based keywords");
            fallback_keywords(question)
        }
        (KeywordSource::Fallback, _) => fallback_keywords(question),
    }
}

type EmbeddedQuery = (String, Embedding);

/// Embeds every query. Queries are batched; if the batch fails each one is
/// retried alone. A failure on `queries[0]` (the question) is fatal, other
/// failures drop that query.
fn embed_queries(
    queries: &[String],
    index: &EntityIndex,
    embedder: &dyn EmbeddingProvider,
) -> Result<(Vec<EmbeddedQuery>, Vec<String>), LinkError> {
    if embedder.dimension() != index.dimension() {
        return Err(IndexError::DimensionMismatch {
            index: index.dimension(),
            provider: embedder.dimension(),
        }
        .into());
    }
    let texts: Vec<&str> = queries.iter().map(String::as_str).collect();
    match embed_texts(embedder, &texts) {
        Ok(vectors) => Ok((queries.iter().cloned().zip(vectors).collect(), Vec::new())),
        Err(e) => {
            tracing::warn!(error = %e, "batched query embedding failed; embedding queries one by one");
            let mut ok = Vec::new();
            let mut failed = Vec::new();
            for (i, q) in queries.iter().enumerate() {
                match index.embed_query(q, embedder) {
                    Ok(v) => ok.push((q.clone(), v)),
                    Err(e) if i == 0 => return Err(e.into()),
                    Err(e) => {
                        tracing::warn!(query = %q, error = %e, "dropping keyword query");
                        failed.push(q.clone());
                    }
                }
            }
            Ok((ok, failed))
        }
    }
}

fn search_all(
    embedded: &[(String, Embedding)],
    kinds: &[EntityKind],
    index: &EntityIndex,
    k: usize,
) -> Vec<RetrievalHit> {
    let jobs: Vec<(&(String, Embedding), EntityKind)> = embedded
        .iter()
        .flat_map(|q| kinds.iter().map(move |kind| (q, *kind)))
        .collect();
    jobs.into_par_iter()
        .flat_map_iter(|((text, vector), kind)| index.search(vector, text, kind, k))
        .collect()
}

/// Top `per_query_top_k` hits for every (query, enabled type) pair.
/// `queries[0]` must be the question itself.
pub fn retrieve_all(
    queries: &[String],
    index: &EntityIndex,
    config: &PipelineConfig,
    embedder: &dyn EmbeddingProvider,
) -> Result<Retrieval, LinkError> {
    if queries.first().is_none_or(|q| q.trim().is_empty()) {
        return Err(LinkError::EmptyQuestion);
    }
    config.validate()?;
    let (embedded, failed_queries) = embed_queries(queries, index, embedder)?;
    let hits = search_all(&embedded, &config.searched_kinds(index), index, config.per_query_top_k);
    Ok(Retrieval { hits, failed_queries })
}

fn better_hit(a: &RetrievalHit, b: &RetrievalHit) -> bool {
    a.calibrated_score
        .total_cmp(&b.calibrated_score)
        .then_with(|| b.query_text.cmp(&a.query_text))
        .is_gt()
}

/// Orders candidates: score descending, then support descending, then
/// `db.table` ascending.
pub fn candidate_order(a: &TableCandidate, b: &TableCandidate) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| b.support.cmp(&a.support))
        .then_with(|| a.table.to_string().cmp(&b.table.to_string()))
}

/// Calibrates hits and ranks their tables.
///
/// Entropy calibration (when enabled) runs first, then type weights. Each
/// entity keeps its best calibrated hit across queries; a table scores the
/// maximum over its entities. The ranking is truncated to the table budget.
pub fn rank_tables(
    mut hits: Vec<RetrievalHit>,
    weights: &CalibrationWeights,
    config: &PipelineConfig,
) -> Vec<TableCandidate> {
    if config.entropy_calibration {
        apply_entropy_calibration(&mut hits, config.entropy_alpha);
    }
    apply_type_weights(&mut hits, weights);

    let mut support: BTreeMap<TableRef, HashSet<(&EntityId, &str)>> = BTreeMap::new();
    for h in &hits {
        support
            .entry(h.table_ref())
            .or_default()
            .insert((&h.entity_id, h.query_text.as_str()));
    }
    let support: BTreeMap<TableRef, usize> = support.into_iter().map(|(t, s)| (t, s.len())).collect();

    let mut best: BTreeMap<&EntityId, &RetrievalHit> = BTreeMap::new();
    for h in &hits {
        match best.get(&h.entity_id) {
            Some(cur) if !better_hit(h, cur) => {}
            _ => {
                best.insert(&h.entity_id, h);
            }
        }
    }

    let mut by_table: BTreeMap<TableRef, Vec<RetrievalHit>> = BTreeMap::new();
    for h in best.into_values() {
        by_table.entry(h.table_ref()).or_default().push(h.clone());
    }
    let mut candidates: Vec<TableCandidate> = by_table
        .into_iter()
        .map(|(table, mut best_hits)| {
            best_hits.sort_by(|a, b| {
                b.calibrated_score
                    .total_cmp(&a.calibrated_score)
                    .then_with(|| a.entity_id.cmp(&b.entity_id))
            });
            TableCandidate {
                score: best_hits[0].calibrated_score,
                support: support[&table],
                table,
                best_hits,
            }
        })
        .collect();
    candidates.sort_by(candidate_order);
    candidates.truncate(config.table_budget);
    candidates
}

/// Renders the candidates, in rank order, restricted to their retained
/// entities.
pub fn build_candidate_schema(
    catalog: &Catalog,
    candidates: &[TableCandidate],
    config: &PipelineConfig,
) -> Result<String, LinkError> {
    let selection: Vec<TableSelection> = candidates
        .iter()
        .map(|c| {
            let mut filter = EntityFilter::default();
            for h in &c.best_hits {
                filter.insert(h.column.as_deref(), h.kind);
            }
            TableSelection {
                table: c.table.clone(),
                filter: Some(filter),
            }
        })
        .collect();
    Ok(catalog.render(&selection, &config.render_options())?)
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Runs the full pipeline for one question and reports stage timings.
pub fn link_timed(
    question: &str,
    index: &EntityIndex,
    catalog: &Catalog,
    weights: &CalibrationWeights,
    config: &PipelineConfig,
    providers: &Providers<'_>,
) -> Result<(LinkResult, StageTimings), LinkError> {
    if question.trim().is_empty() {
        return Err(LinkError::EmptyQuestion);
    }
    config.validate()?;
    let mut timings = StageTimings::default();

    let start = Instant::now();
    let keywords = question_keywords(question, config, providers);
    let queries = retrieval_queries(&keywords, config.query_mode);
    timings.keywords_ms = ms(start);

    let start = Instant::now();
    let retrieval = retrieve_all(&queries, index, config, providers.embedder)?;
    let hit_count = retrieval.hits.len();
    timings.retrieval_ms = ms(start);

    let start = Instant::now();
    let candidates = rank_tables(retrieval.hits, weights, config);
    timings.ranking_ms = ms(start);

    let start = Instant::now();
    let candidate_schema = build_candidate_schema(catalog, &candidates, config)?;
    timings.schema_ms = ms(start);

    let filtered_entities: Vec<EntityId> = candidates
        .iter()
        .flat_map(|c| c.best_hits.iter().map(|h| h.entity_id.clone()))
        .collect();
    let accounting = LinkAccounting {
        query_count: queries.len(),
        failed_queries: retrieval.failed_queries,
        hit_count,
        filtered_entity_count: filtered_entities.len(),
        schema_tokens: count_tokens(&candidate_schema),
    };
    tracing::debug!(
        question,
        queries = accounting.query_count,
        hits = hit_count,
        tables = candidates.len(),
        "linked question"
    );
    Ok((
        LinkResult {
            keywords,
            queries,
            candidates,
            filtered_entities,
            candidate_schema,
            accounting,
        },
        timings,
    ))
}

pub fn link(
    question: &str,
    index: &EntityIndex,
    catalog: &Catalog,
    weights: &CalibrationWeights,
    config: &PipelineConfig,
    providers: &Providers<'_>,
) -> Result<LinkResult, LinkError> {
    link_timed(question, index, catalog, weights, config, providers).map(|(r, _)| r)
}

/// One labelled training question.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub question: String,
    pub gold_tables: BTreeSet<TableRef>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedWeights {
    pub weights: CalibrationWeights,
    pub curves: Vec<RecallCurve>,
}

/// Fits entity-type weights on training questions.
///
/// For each searched type, the linker runs restricted to that type with
/// uniform weights and no entropy step, tables ranked by their best entity
/// similarity; the type's AUC is taken over `n_max` recall points.
pub fn fit_type_weights(
    samples: &[TrainingSample],
    index: &EntityIndex,
    config: &PipelineConfig,
    providers: &Providers<'_>,
    n_max: usize,
) -> Result<FittedWeights, LinkError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(CalibrationError::EmptyTraining.into());
    }
    let embedded: Vec<Vec<EmbeddedQuery>> = samples
        .par_iter()
        .map(|s| {
            let keywords = question_keywords(&s.question, config, providers);
            let queries = retrieval_queries(&keywords, config.query_mode);
            embed_queries(&queries, index, providers.embedder).map(|(e, _)| e)
        })
        .collect::<Result<_, _>>()?;

    let ranking_config = PipelineConfig {
        table_budget: n_max.max(1),
        entropy_calibration: false,
        ..config.clone()
    };
    let uniform = CalibrationWeights::uniform();
    let mut curves = Vec::new();
    let mut aucs = BTreeMap::new();
    for kind in config.searched_kinds(index) {
        let rankings: Vec<(Vec<TableRef>, BTreeSet<TableRef>)> = embedded
            .par_iter()
            .zip(samples)
            .map(|(queries, sample)| {
                let hits = search_all(queries, &[kind], index, config.per_query_top_k);
                let ranked = rank_tables(hits, &uniform, &ranking_config)
                    .into_iter()
                    .map(|c| c.table)
                    .collect();
                (ranked, sample.gold_tables.clone())
            })
            .collect();
        let curve = recall_curve(kind, &rankings, n_max)?;
        aucs.insert(kind, auc(&curve));
        curves.push(curve);
    }
    let mut weights = entity_type_weights(&aucs)?;
    weights.n_max = n_max;
    weights.training_sample_count = samples.len();
    Ok(FittedWeights { weights, curves })
}
