//! Entity-level schema linking for text-to-SQL over large catalogs.
//!
//! Build time: a [`catalog::Catalog`] is split into typed schema entities
//! ([`catalog::decompose`]), embedded, and stored in an
//! [`index::EntityIndex`]. Inference time: a question is decomposed into
//! keywords ([`nlq`]), every keyword and the question itself are searched
//! against every entity type, scores are reweighted per entity type
//! ([`calibration`]), and the best tables are kept within a budget and
//! rendered as a candidate schema ([`linker`]). The [`llm`] module drives
//! table prediction and SQL generation over that schema; [`eval`] measures
//! recall and token cost.

pub mod calibration;
pub mod catalog;
pub mod embedding;
pub mod eval;
pub mod index;
pub mod linker;
pub mod llm;
pub mod nlq;
pub mod text;

#[cfg(test)]
pub(crate) mod testing;
