//! Exact vector index over schema entities, partitioned by entity kind.
//!
//! Search is flat: every entity of the requested kind is scored with
//! [`cosine_similarity`](crate::embedding::cosine_similarity) and the top `k` are returned, ties broken by
//! ascending entity id. Indexes are write-once; rebuild to change.

pub mod bm25;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::{EntityId, EntityKind, SchemaEntity, TableRef};
use crate::embedding::{embed_texts, Embedding, EmbeddingError, EmbeddingProvider};

pub use bm25::{Bm25Error, Bm25Index, Bm25Params, Tokenizer};

/// Version written to and required from index files.
pub const INDEX_FORMAT_VERSION: u32 = 1;
const INDEX_FORMAT_NAME: &str = "schemalink-index";
const EMBED_BATCH: usize = 96;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("cannot build an index from zero entities")]
    Empty,
    #[error("duplicate entity id `{0}`")]
    DuplicateId(EntityId),
    #[error("k must be at least 1")]
    InvalidK,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("provider dimension {provider} does not match index dimension {index}")]
    DimensionMismatch { index: usize, provider: usize },
    #[error("index file version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("index file checksum mismatch (file is truncated or corrupt)")]
    Checksum,
    #[error("corrupt index file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One (query, entity) match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub entity_id: EntityId,
    pub kind: EntityKind,
    pub database: String,
    pub table: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
    /// Keyword or question that produced the match.
    pub query_text: String,
    pub raw_score: f64,
    /// Equal to `raw_score` until a calibration step rewrites it.
    pub calibrated_score: f64,
}

impl RetrievalHit {
    pub fn table_ref(&self) -> TableRef {
        TableRef::new(&self.database, &self.table)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexRecord {
    pub entity: SchemaEntity,
    pub vector: Embedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityIndex {
    dimension: usize,
    provider: String,
    records: Vec<IndexRecord>,
    /// Squared L2 norm of each record vector.
    norms: Vec<f64>,
    partitions: BTreeMap<EntityKind, Vec<usize>>,
}

fn squared_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, x| acc + x * x)
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).fold(0.0, |acc, (a, b)| acc + a * b)
}

/// Same arithmetic as [`crate::embedding::cosine_similarity`], with the
/// norms supplied.
fn cosine_with_norms(u: &[f64], nu: f64, v: &[f64], nv: f64) -> f64 {
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    (dot(u, v) / (nu * nv).sqrt()).clamp(-1.0, 1.0)
}

#[derive(Debug, Serialize, Deserialize)]
struct FileHeader {
    format: String,
    version: u32,
    dimension: usize,
    provider: String,
    entity_count: usize,
    checksum: String,
}

impl EntityIndex {
    /// Embeds every entity with `provider` and stores it.
    pub fn build(
        entities: Vec<SchemaEntity>,
        provider: &dyn EmbeddingProvider,
    ) -> Result<Self, IndexError> {
        if entities.is_empty() {
            return Err(IndexError::Empty);
        }
        let mut ids = HashSet::new();
        for e in &entities {
            if !ids.insert(&e.id) {
                return Err(IndexError::DuplicateId(e.id.clone()));
            }
        }
        let batches: Vec<Vec<Embedding>> = entities
            .par_chunks(EMBED_BATCH)
            .map(|chunk| {
                let texts: Vec<&str> = chunk.iter().map(|e| e.text.as_str()).collect();
                embed_texts(provider, &texts)
            })
            .collect::<Result<_, _>>()?;
        let records = entities
            .into_iter()
            .zip(batches.into_iter().flatten())
            .map(|(entity, vector)| IndexRecord { entity, vector })
            .collect();
        Ok(Self::from_records(provider.dimension(), provider.name().to_string(), records))
    }

    fn from_records(dimension: usize, provider: String, records: Vec<IndexRecord>) -> Self {
        let mut partitions: BTreeMap<EntityKind, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            partitions.entry(r.entity.kind).or_default().push(i);
        }
        let norms = records.iter().map(|r| squared_norm(r.vector.as_slice())).collect();
        Self {
            dimension,
            provider,
            records,
            norms,
            partitions,
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Name of the provider the index was built with.
    pub fn provider_name(&self) -> &str {
        &self.provider
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[IndexRecord] {
        &self.records
    }

    pub fn entities(&self) -> impl Iterator<Item = &SchemaEntity> {
        self.records.iter().map(|r| &r.entity)
    }

    /// Entity kinds present in the index.
    pub fn kinds(&self) -> impl Iterator<Item = EntityKind> + '_ {
        self.partitions.keys().copied()
    }

    pub fn partition_size(&self, kind: EntityKind) -> usize {
        self.partitions.get(&kind).map_or(0, Vec::len)
    }

    /// Embeds `text` and returns the `k` best entities of `kind`.
    pub fn query(
        &self,
        text: &str,
        kind: EntityKind,
        k: usize,
        provider: &dyn EmbeddingProvider,
    ) -> Result<Vec<RetrievalHit>, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        let vector = self.embed_query(text, provider)?;
        Ok(self.search(&vector, text, kind, k))
    }

    /// Embeds a query string, checking the provider matches the index.
    pub fn embed_query(
        &self,
        text: &str,
        provider: &dyn EmbeddingProvider,
    ) -> Result<Embedding, IndexError> {
        if provider.dimension() != self.dimension {
            return Err(IndexError::DimensionMismatch {
                index: self.dimension,
                provider: provider.dimension(),
            });
        }
        Ok(embed_texts(provider, &[text])?.remove(0))
    }

    /// Top-`k` search with a precomputed query vector.
    ///
    /// Returns fewer than `k` hits when the partition is smaller and nothing
    /// for a kind absent from the index.
    pub fn search(&self, query: &Embedding, query_text: &str, kind: EntityKind, k: usize) -> Vec<RetrievalHit> {
        let Some(members) = self.partitions.get(&kind) else {
            return Vec::new();
        };
        assert_eq!(query.dimension(), self.dimension, "query dimension must match the index");
        let q = query.as_slice();
        let nq = squared_norm(q);
        let mut scored: Vec<(f64, usize)> = members
            .iter()
            .map(|&i| (cosine_with_norms(q, nq, self.records[i].vector.as_slice(), self.norms[i]), i))
            .collect();
        let by_rank = |a: &(f64, usize), b: &(f64, usize)| {
            b.0.total_cmp(&a.0)
                .then_with(|| self.records[a.1].entity.id.cmp(&self.records[b.1].entity.id))
        };
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, by_rank);
            scored.truncate(k);
        }
        scored.sort_unstable_by(by_rank);
        scored
            .into_iter()
            .map(|(score, i)| {
                let e = &self.records[i].entity;
                RetrievalHit {
                    entity_id: e.id.clone(),
                    kind: e.kind,
                    database: e.database.clone(),
                    table: e.table.clone(),
                    column: e.column.clone(),
                    query_text: query_text.to_string(),
                    raw_score: score,
                    calibrated_score: score,
                }
            })
            .collect()
    }

    /// Writes a one-line JSON header followed by the JSON record body.
    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let body = serde_json::to_vec(&self.records)
            .map_err(|e| IndexError::Corrupt(e.to_string()))?;
        let header = FileHeader {
            format: INDEX_FORMAT_NAME.to_string(),
            version: INDEX_FORMAT_VERSION,
            dimension: self.dimension,
            provider: self.provider.clone(),
            entity_count: self.records.len(),
            checksum: hex::encode(Sha256::digest(&body)),
        };
        let mut out = serde_json::to_vec(&header).map_err(|e| IndexError::Corrupt(e.to_string()))?;
        out.push(b'\n');
        out.extend_from_slice(&body);
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        let split = bytes
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| IndexError::Corrupt("missing header".into()))?;
        let header: FileHeader = serde_json::from_slice(&bytes[..split])
            .map_err(|e| IndexError::Corrupt(format!("bad header: {e}")))?;
        if header.format != INDEX_FORMAT_NAME {
            return Err(IndexError::Corrupt(format!("unknown format `{}`", header.format)));
        }
        if header.version != INDEX_FORMAT_VERSION {
            return Err(IndexError::Version {
                found: header.version,
                expected: INDEX_FORMAT_VERSION,
            });
        }
        let body = &bytes[split + 1..];
        if hex::encode(Sha256::digest(body)) != header.checksum {
            return Err(IndexError::Checksum);
        }
        let records: Vec<IndexRecord> =
            serde_json::from_slice(body).map_err(|e| IndexError::Corrupt(e.to_string()))?;
        if records.len() != header.entity_count {
            return Err(IndexError::Corrupt(format!(
                "header declares {} entities, body holds {}",
                header.entity_count,
                records.len()
            )));
        }
        if let Some(r) = records.iter().find(|r| r.vector.dimension() != header.dimension) {
            return Err(IndexError::Corrupt(format!(
                "entity `{}` has dimension {}, header declares {}",
                r.entity.id,
                r.vector.dimension(),
                header.dimension
            )));
        }
        Ok(Self::from_records(header.dimension, header.provider, records))
    }
}
