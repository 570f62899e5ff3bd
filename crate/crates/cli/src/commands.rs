use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use schemalink_core::calibration::CalibrationWeights;
use schemalink_core::catalog::{decompose, parse_catalog, Catalog, EntityKind, TableRef, TableSelection};
use schemalink_core::embedding::EmbeddingProvider;
use schemalink_core::eval::{
    parse_dataset, run_benchmark, sample_records, validate_dataset, EvalContext, EvalMethod, MultisetComparator,
};
use schemalink_core::index::EntityIndex;
use schemalink_core::linker::{fit_type_weights, link_timed, LinkResult, PipelineConfig, Providers, StageTimings, TrainingSample};
use schemalink_core::llm::{
    describe_catalog, generate_sql, predict_tables, SqlRequest, SqlResult, TablePrediction, TextModelProvider,
};
use serde::Serialize;
use serde_json::json;

use crate::config::{parse_cutoffs, parse_kinds, ConfigFile};
use crate::error::{CliResult, Failure};
use crate::manifest::{manifest_path_for, Recorder};
use crate::providers::{self, ModelRole};
use crate::{CalibrateArgs, DescribeArgs, EvalArgs, IndexArgs, IndexBuildArgs, LinkArgs};

const INDEX_FILE: &str = "index.json";
const CATALOG_FILE: &str = "catalog.json";
const MANIFEST_FILE: &str = "manifest.json";
const DEFAULT_DIALECT: &str = "The database engine is SQLite.";

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("output serializes"));
}

fn to_json_bytes(value: &impl Serialize) -> Vec<u8> {
    let mut text = serde_json::to_string_pretty(value).expect("output serializes");
    text.push('\n');
    text.into_bytes()
}

fn load_catalog(rec: &mut Recorder, path: &Path) -> CliResult<Catalog> {
    let text = rec.read_string(path)?;
    parse_catalog(&text).map_err(|e| Failure::from(e).context(path.display()))
}

pub fn index_build(file: &ConfigFile, a: IndexBuildArgs) -> CliResult<()> {
    let mut rec = Recorder::new("index build");
    let catalog = load_catalog(&mut rec, &a.catalog)?;
    let kinds = parse_kinds(&a.types)?;
    let selector = a
        .provider
        .or_else(|| file.providers.embedder.clone())
        .unwrap_or_else(|| "hash".to_string());
    let embedder = providers::embedder(&selector)?;
    rec.provider("embedder", embedder.name());
    rec.config(&json!({ "types": kinds, "provider": selector }));

    let start = Instant::now();
    let entities = decompose(&catalog, &kinds);
    rec.stage("decompose", ms(start));
    let start = Instant::now();
    let index = EntityIndex::build(entities, embedder.as_ref())?;
    rec.stage("embed", ms(start));

    fs::create_dir_all(&a.out)?;
    let index_path = a.out.join(INDEX_FILE);
    rec.check_output(&index_path)?;
    index.save(&index_path)?;
    rec.output(&index_path);
    rec.write(&a.out.join(CATALOG_FILE), catalog.to_document().as_bytes())?;

    let counts: BTreeMap<EntityKind, usize> = index.kinds().map(|k| (k, index.partition_size(k))).collect();
    tracing::info!(entities = index.len(), dimension = index.dimension(), "index built");
    rec.finish(&a.out.join(MANIFEST_FILE))?;
    print_json(&json!({
        "out": a.out,
        "entities": index.len(),
        "dimension": index.dimension(),
        "provider": index.provider_name(),
        "entities_per_type": counts,
    }));
    Ok(())
}

pub fn describe(file: &ConfigFile, a: DescribeArgs) -> CliResult<()> {
    let mut rec = Recorder::new("describe");
    let catalog = load_catalog(&mut rec, &a.catalog)?;
    let selector = a
        .provider
        .or_else(|| file.providers.model.clone())
        .unwrap_or_else(|| "scripted".to_string());
    let model = providers::model(&selector, ModelRole::Main)?;
    rec.provider("model", model.name());
    rec.config(&json!({ "provider": selector, "overwrite": a.overwrite }));

    let start = Instant::now();
    let (described, failures) = describe_catalog(&catalog, model.as_ref(), a.overwrite);
    rec.stage("describe", ms(start));
    for f in &failures {
        tracing::warn!(table = %f.table, error = %f.error, "description synthesis failed");
        rec.warn(format!("{}: {}", f.table, f.error));
    }
    let changed = catalog
        .table_refs()
        .filter(|t| catalog.table(t).map(|x| &x.description) != described.table(t).map(|x| &x.description))
        .count();
    rec.write(&a.out, described.to_document().as_bytes())?;
    rec.finish(&manifest_path_for(&a.out))?;
    print_json(&json!({
        "out": a.out,
        "tables": catalog.table_count(),
        "described": changed,
        "failures": failures,
    }));
    Ok(())
}

/// An index with its catalog and the providers used against it.
struct Loaded {
    catalog: Catalog,
    index: EntityIndex,
    embedder: Box<dyn EmbeddingProvider>,
    model: Box<dyn TextModelProvider>,
    keyword_model: Box<dyn TextModelProvider>,
}

impl Loaded {
    fn providers(&self) -> Providers<'_> {
        Providers {
            embedder: self.embedder.as_ref(),
            keyword_model: Some(self.keyword_model.as_ref()),
        }
    }
}

fn load_index(rec: &mut Recorder, file: &ConfigFile, a: &IndexArgs) -> CliResult<Loaded> {
    let index_path = a.index.join(INDEX_FILE);
    rec.digest(&index_path)?;
    let index = EntityIndex::load(&index_path).map_err(|e| Failure::from(e).context(index_path.display()))?;
    let catalog_path: PathBuf = a.catalog.clone().unwrap_or_else(|| a.index.join(CATALOG_FILE));
    let catalog = load_catalog(rec, &catalog_path)?;

    let embed_spec = a.embedder.clone().or_else(|| file.providers.embedder.clone());
    let embedder = providers::embedder_for_index(index.provider_name(), embed_spec.as_deref())?;
    if embedder.dimension() != index.dimension() {
        return Err(Failure::config(format!(
            "embedder dimension {} does not match index dimension {}",
            embedder.dimension(),
            index.dimension()
        )));
    }
    let model_spec = a
        .model
        .clone()
        .or_else(|| file.providers.model.clone())
        .unwrap_or_else(|| "scripted".to_string());
    let keyword_spec = a
        .keyword_model
        .clone()
        .or_else(|| file.providers.keyword_model.clone())
        .unwrap_or_else(|| model_spec.clone());
    let model = providers::model(&model_spec, ModelRole::Main)?;
    let keyword_model = providers::model(&keyword_spec, ModelRole::Keyword)?;
    rec.provider("embedder", embedder.name());
    rec.provider("model", model.name());
    rec.provider("keyword_model", keyword_model.name());
    Ok(Loaded {
        catalog,
        index,
        embedder,
        model,
        keyword_model,
    })
}

fn load_weights(rec: &mut Recorder, path: Option<&Path>) -> CliResult<CalibrationWeights> {
    match path {
        None => Ok(CalibrationWeights::uniform()),
        Some(p) => {
            rec.digest(p)?;
            CalibrationWeights::load(p).map_err(|e| Failure::from(e).context(p.display()))
        }
    }
}

pub fn calibrate(file: &ConfigFile, a: CalibrateArgs) -> CliResult<()> {
    let mut rec = Recorder::new("calibrate");
    let loaded = load_index(&mut rec, file, &a.index)?;
    let config = a.pipeline.apply(file.pipeline.clone())?;
    let records = parse_dataset(&rec.read_string(&a.train)?).map_err(|e| Failure::from(e).context(a.train.display()))?;
    validate_dataset(&records, &loaded.catalog)?;
    let sampled = sample_records(&records, a.samples, a.seed);
    rec.config(&json!({
        "pipeline": config,
        "n_max": a.n_max,
        "samples": a.samples,
        "seed": a.seed,
        "used_samples": sampled.len(),
    }));
    let samples: Vec<TrainingSample> = sampled
        .into_iter()
        .map(|r| TrainingSample {
            question: r.question,
            gold_tables: r.gold_tables,
        })
        .collect();

    let start = Instant::now();
    let fitted = fit_type_weights(&samples, &loaded.index, &config, &loaded.providers(), a.n_max)?;
    rec.stage("fit", ms(start));
    for (kind, w) in &fitted.weights.weights {
        tracing::info!(kind = %kind, weight = *w, auc = fitted.weights.aucs.get(kind).copied().unwrap_or_default(), "entity type weight");
    }
    rec.check_output(&a.out)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fitted.weights.save(&a.out)?;
    rec.output(&a.out);
    rec.finish(&manifest_path_for(&a.out))?;
    print_json(&json!({
        "out": a.out,
        "samples": samples.len(),
        "aucs": fitted.weights.aucs,
        "weights": fitted.weights.weights,
    }));
    Ok(())
}

#[derive(Serialize)]
struct TableSummary {
    table: TableRef,
    score: f64,
    support: usize,
}

#[derive(Serialize)]
struct LinkOutput {
    question: String,
    keywords: Vec<String>,
    keyword_source: schemalink_core::nlq::KeywordSource,
    queries: Vec<String>,
    tables: Vec<TableSummary>,
    candidate_schema: String,
    accounting: schemalink_core::linker::LinkAccounting,
    timings: StageTimings,
    #[serde(skip_serializing_if = "Option::is_none")]
    prediction: Option<TablePrediction>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sql: Option<SqlResult>,
}

fn link_output(question: &str, result: LinkResult, timings: StageTimings) -> LinkOutput {
    LinkOutput {
        question: question.to_string(),
        keywords: result.keywords.keywords,
        keyword_source: result.keywords.source,
        queries: result.queries,
        tables: result
            .candidates
            .into_iter()
            .map(|c| TableSummary {
                table: c.table,
                score: c.score,
                support: c.support,
            })
            .collect(),
        candidate_schema: result.candidate_schema,
        accounting: result.accounting,
        timings,
        prediction: None,
        sql: None,
    }
}

pub fn link(file: &ConfigFile, a: LinkArgs) -> CliResult<()> {
    let mut rec = Recorder::new("link");
    let loaded = load_index(&mut rec, file, &a.index)?;
    let weights = load_weights(&mut rec, a.weights.as_deref())?;
    let config = a.pipeline.apply(file.pipeline.clone())?;
    let dialect = a.dialect.clone().unwrap_or_else(|| DEFAULT_DIALECT.to_string());
    rec.config(&json!({
        "pipeline": config,
        "question": a.question,
        "predict": a.predict || a.sql,
        "sql": a.sql,
        "dialect": dialect,
    }));

    let (result, timings) = link_timed(&a.question, &loaded.index, &loaded.catalog, &weights, &config, &loaded.providers())?;
    rec.stage("keywords", timings.keywords_ms);
    rec.stage("retrieval", timings.retrieval_ms);
    rec.stage("ranking", timings.ranking_ms);
    rec.stage("schema", timings.schema_ms);
    tracing::info!(
        keywords_ms = timings.keywords_ms,
        retrieval_ms = timings.retrieval_ms,
        ranking_ms = timings.ranking_ms,
        schema_ms = timings.schema_ms,
        tables = result.candidates.len(),
        schema_tokens = result.accounting.schema_tokens,
        "linked question"
    );
    if a.schema_only && !(a.predict || a.sql) && a.out.is_none() {
        println!("{}", result.candidate_schema);
        return Ok(());
    }

    let allowed: BTreeSet<TableRef> = result.candidates.iter().map(|c| c.table.clone()).collect();
    let ranked = result.ranked_tables();
    let mut output = link_output(&a.question, result, timings);
    if a.predict || a.sql {
        let start = Instant::now();
        let prediction = predict_tables(&output.candidate_schema, &a.question, loaded.model.as_ref(), &allowed)?;
        rec.stage("prediction", ms(start));
        if a.sql {
            let mut tables = prediction.table_refs();
            if tables.is_empty() {
                rec.warn("table prediction was empty; generating SQL over the candidate tables");
                tables = ranked;
            }
            let selection: Vec<TableSelection> = tables.into_iter().map(TableSelection::full).collect();
            let schema = loaded.catalog.render(&selection, &config.render_options())?;
            let request = SqlRequest {
                schema: &schema,
                question: &a.question,
                dialect_instruction: &dialect,
                max_corrections: 0,
            };
            let start = Instant::now();
            output.sql = Some(generate_sql(&request, loaded.model.as_ref(), None)?);
            rec.stage("sql", ms(start));
        }
        output.prediction = Some(prediction);
    }

    match &a.out {
        Some(out) => {
            rec.write(out, &to_json_bytes(&output))?;
            rec.finish(&manifest_path_for(out))?;
        }
        None if a.schema_only => println!("{}", output.candidate_schema),
        None => print_json(&output),
    }
    Ok(())
}

pub fn eval(file: &ConfigFile, a: EvalArgs) -> CliResult<()> {
    let mut rec = Recorder::new("eval");
    let method = EvalMethod::from_str(&a.method).map_err(Failure::usage)?;
    let loaded = load_index(&mut rec, file, &a.index)?;
    let weights = load_weights(&mut rec, a.weights.as_deref())?;
    let config: PipelineConfig = a.pipeline.apply(file.pipeline.clone())?;
    let mut options = file.eval.clone();
    if let Some(at) = &a.at {
        options.at = parse_cutoffs(at)?;
    }
    options.budget_matched |= a.budget_matched;
    options.generate_sql |= a.sql;

    let records = parse_dataset(&rec.read_string(&a.dataset)?).map_err(|e| Failure::from(e).context(a.dataset.display()))?;
    let records = match a.sample {
        Some(n) => sample_records(&records, n, a.seed),
        None => records,
    };
    rec.config(&json!({
        "method": method,
        "pipeline": config,
        "options": options,
        "sample": a.sample,
        "seed": a.seed,
    }));

    let ctx = EvalContext {
        catalog: &loaded.catalog,
        index: Some(&loaded.index),
        weights: &weights,
        config: &config,
        embedder: loaded.embedder.as_ref(),
        keyword_model: Some(loaded.keyword_model.as_ref()),
        main_model: Some(loaded.model.as_ref()),
        executor: None,
        comparator: &MultisetComparator,
    };
    let start = Instant::now();
    let report = run_benchmark(&ctx, &records, method, &options)?;
    rec.stage("benchmark", ms(start));
    for q in report.questions.iter().filter_map(|q| q.warning.as_ref().map(|w| (q, w))) {
        rec.warn(format!("{}: {}", q.0.question_id, q.1));
    }
    for p in &report.macro_recall {
        tracing::info!(method = %method, n = p.n, recall = p.recall, "macro recall");
    }
    rec.write(&a.out, &to_json_bytes(&report))?;
    rec.finish(&manifest_path_for(&a.out))?;
    print_json(&json!({
        "out": a.out,
        "method": method,
        "questions": report.question_count,
        "macro_recall": report.macro_recall,
        "schema_tokens": report.schema_tokens,
        "cost_usd": report.cost_usd,
    }));
    Ok(())
}
