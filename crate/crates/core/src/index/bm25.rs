//! Okapi BM25 over small document collections, with word or character
//! shingle tokenization.
//!
//! `score(D, Q) = Σ idf(t) · tf·(k1 + 1) / (tf + k1·(1 − b + b·|D|/avgdl))`
//! over the distinct terms of `Q`, with the non-negative
//! `idf(t) = ln((N − df + 0.5) / (df + 0.5) + 1)`.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::word_tokens;

#[derive(Debug, Error, PartialEq)]
pub enum Bm25Error {
    #[error("cannot build a BM25 index over zero documents")]
    EmptyCorpus,
    #[error("invalid BM25 parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "k")]
pub enum Tokenizer {
    Word,
    /// Overlapping `k`-character windows of each word; shorter words are kept whole.
    CharShingle(usize),
}

impl Tokenizer {
    pub fn tokens(&self, text: &str) -> Vec<String> {
        let words = word_tokens(text);
        match *self {
            Tokenizer::Word => words,
            Tokenizer::CharShingle(k) => words
                .iter()
                .flat_map(|w| {
                    let chars: Vec<char> = w.chars().collect();
                    if chars.len() <= k {
                        vec![w.clone()]
                    } else {
                        chars.windows(k).map(|win| win.iter().collect()).collect()
                    }
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone)]
pub struct Bm25Index {
    doc_ids: Vec<String>,
    tokenizer: Tokenizer,
    params: Bm25Params,
    postings: HashMap<String, Vec<(usize, u32)>>,
    doc_lens: Vec<f64>,
    avgdl: f64,
}

impl Bm25Index {
    pub fn build(
        docs: &[(String, String)],
        tokenizer: Tokenizer,
        params: Bm25Params,
    ) -> Result<Self, Bm25Error> {
        if docs.is_empty() {
            return Err(Bm25Error::EmptyCorpus);
        }
        if let Tokenizer::CharShingle(k) = tokenizer {
            if k < 2 {
                return Err(Bm25Error::InvalidParams(format!("shingle size {k} < 2")));
            }
        }
        if params.k1.is_nan() || params.k1 <= 0.0 || !(0.0..=1.0).contains(&params.b) {
            return Err(Bm25Error::InvalidParams(format!(
                "k1 = {}, b = {}",
                params.k1, params.b
            )));
        }
        let mut postings: HashMap<String, Vec<(usize, u32)>> = HashMap::new();
        let mut doc_lens = Vec::with_capacity(docs.len());
        for (i, (_, text)) in docs.iter().enumerate() {
            let tokens = tokenizer.tokens(text);
            doc_lens.push(tokens.len() as f64);
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (t, n) in tf {
                postings.entry(t).or_default().push((i, n));
            }
        }
        let total: f64 = doc_lens.iter().sum();
        let avgdl = if total > 0.0 { total / docs.len() as f64 } else { 1.0 };
        Ok(Self {
            doc_ids: docs.iter().map(|(id, _)| id.clone()).collect(),
            tokenizer,
            params,
            postings,
            doc_lens,
            avgdl,
        })
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_ids.len() as f64;
        let df = self.postings.get(term).map_or(0, Vec::len) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Scores every document; index `i` holds the score of the `i`-th document.
    pub fn scores(&self, query: &str) -> Vec<f64> {
        let Bm25Params { k1, b } = self.params;
        let mut scores = vec![0.0; self.doc_ids.len()];
        let terms: BTreeSet<String> = self.tokenizer.tokens(query).into_iter().collect();
        for term in &terms {
            let Some(postings) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(term);
            for &(doc, tf) in postings {
                let tf = f64::from(tf);
                let norm = 1.0 - b + b * self.doc_lens[doc] / self.avgdl;
                scores[doc] += idf * tf * (k1 + 1.0) / (tf + k1 * norm);
            }
        }
        scores
    }

    /// The `k` best documents, descending score, ties by ascending doc id.
    /// Documents sharing no term with the query score 0 and still rank.
    pub fn query(&self, text: &str, k: usize) -> Vec<(String, f64)> {
        let scores = self.scores(text);
        let mut ranked: Vec<(usize, f64)> = scores.into_iter().enumerate().collect();
        ranked.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.doc_ids[a.0].cmp(&self.doc_ids[b.0]))
        });
        ranked
            .into_iter()
            .take(k)
            .map(|(i, s)| (self.doc_ids[i].clone(), s))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn docs(items: &[(&str, &str)]) -> Vec<(String, String)> {
        items
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect()
    }

    #[test]
    fn unique_single_term_document_ranks_first() {
        let idx = Bm25Index::build(
            &docs(&[("a", "orders customers"), ("b", "zebra"), ("c", "orders items")]),
            Tokenizer::Word,
            Bm25Params::default(),
        )
        .unwrap();
        assert_eq!(idx.query("zebra", 3)[0].0, "b");
    }

    #[test]
    fn common_term_falls_back_to_length_normalization() {
        let idx = Bm25Index::build(
            &docs(&[
                ("d1", "apple banana"),
                ("d2", "apple apple cherry"),
                ("d3", "apple"),
            ]),
            Tokenizer::Word,
            Bm25Params::default(),
        )
        .unwrap();
        // hand evaluation: N = 3, df = 3, avgdl = 6 / 3 = 2
        let idf = ((3.0f64 - 3.0 + 0.5) / (3.0 + 0.5) + 1.0).ln();
        let d1 = idf * (1.0 * 2.2) / (1.0 + 1.2 * (0.25 + 0.75 * 2.0 / 2.0));
        let d2 = idf * (2.0 * 2.2) / (2.0 + 1.2 * (0.25 + 0.75 * 3.0 / 2.0));
        let d3 = idf * (1.0 * 2.2) / (1.0 + 1.2 * (0.25 + 0.75 * 1.0 / 2.0));
        let got = idx.query("apple", 3);
        let ids: Vec<&str> = got.iter().map(|(d, _)| d.as_str()).collect();
        assert_eq!(ids, ["d3", "d2", "d1"]);
        for ((_, s), e) in got.iter().zip([d3, d2, d1]) {
            assert!((s - e).abs() < 1e-12, "{s} vs {e}");
        }
        assert!(idx.idf("apple") < idx.idf("banana"));
    }

    #[test]
    fn shingles_match_morphological_variants() {
        let shingles = Tokenizer::CharShingle(4);
        let q: BTreeSet<_> = shingles.tokens("races").into_iter().collect();
        let d: BTreeSet<_> = shingles.tokens("race").into_iter().collect();
        assert_eq!(q.intersection(&d).cloned().collect::<Vec<_>>(), ["race"]);

        let idx = Bm25Index::build(
            &docs(&[("circuits", "circuit country"), ("races", "race year")]),
            shingles,
            Bm25Params::default(),
        )
        .unwrap();
        let got = idx.query("races", 2);
        assert_eq!(got[0].0, "races");
        assert!(got[0].1 > 0.0);
        assert_eq!(got[1].1, 0.0);
    }

    #[test]
    fn invalid_parameters() {
        let d = docs(&[("a", "x")]);
        assert_eq!(
            Bm25Index::build(&[], Tokenizer::Word, Bm25Params::default()).unwrap_err(),
            Bm25Error::EmptyCorpus
        );
        assert!(Bm25Index::build(&d, Tokenizer::CharShingle(1), Bm25Params::default()).is_err());
        assert!(Bm25Index::build(&d, Tokenizer::Word, Bm25Params { k1: 0.0, b: 0.5 }).is_err());
        assert!(Bm25Index::build(&d, Tokenizer::Word, Bm25Params { k1: 1.0, b: 1.5 }).is_err());
    }

    proptest! {
        #[test]
        fn scores_are_nonnegative_and_zero_without_overlap(
            corpus in prop::collection::vec("[a-e ]{0,20}", 1..8),
            query in "[a-h ]{1,12}",
        ) {
            let d: Vec<(String, String)> = corpus
                .iter()
                .enumerate()
                .map(|(i, t)| (format!("doc{i:02}"), t.clone()))
                .collect();
            let idx = Bm25Index::build(&d, Tokenizer::Word, Bm25Params::default()).unwrap();
            let q: BTreeSet<String> = word_tokens(&query).into_iter().collect();
            for (i, s) in idx.scores(&query).into_iter().enumerate() {
                prop_assert!(s >= 0.0);
                let doc: BTreeSet<String> = word_tokens(&d[i].1).into_iter().collect();
                if q.is_disjoint(&doc) {
                    prop_assert_eq!(s, 0.0);
                }
            }
        }
    }
}
