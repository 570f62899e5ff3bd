//! Question decomposition into retrieval keywords.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::llm::parse::parse_string_list;
use crate::llm::{ChatMessage, PromptKind, TextModelProvider};
use crate::text::word_tokens;

/// Words dropped by [`fallback_keywords`].
pub const STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "all", "also", "am", "among", "an", "and", "any", "are", "as",
    "at", "be", "been", "before", "being", "below", "between", "both", "but", "by", "can",
    "could", "did", "do", "does", "doing", "done", "down", "during", "each", "else", "every",
    "few", "find", "for", "from", "give", "had", "has", "have", "having", "he", "her", "here",
    "hers", "him", "his", "how", "i", "if", "in", "into", "is", "it", "its", "just", "list",
    "many", "may", "me", "might", "more", "most", "much", "must", "my", "no", "nor", "not", "of",
    "off", "on", "only", "onto", "or", "other", "our", "out", "over", "own", "per", "please",
    "refer", "refers", "respectively", "same", "shall", "she", "should", "show", "so", "some",
    "such", "tell", "than", "that", "the", "their", "theirs", "them", "then", "there", "these",
    "they", "this", "those", "through", "to", "too", "under", "up", "us", "very", "was", "we",
    "were", "what", "when", "where", "which", "who", "whom", "whose", "why", "will", "with",
    "without", "would", "you", "your",
];

/// Tokens shorter than this are dropped by [`fallback_keywords`].
pub const MIN_KEYWORD_CHARS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeywordSource {
    Llm,
    #[default]
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordSet {
    pub question: String,
    /// Distinct after trimming and case folding, in extraction order.
    pub keywords: Vec<String>,
    pub source: KeywordSource,
}

/// How keywords become retrieval queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// The question and every keyword, each as its own query.
    #[default]
    KeywordsAndQuestion,
    KeywordsOnly,
    QuestionOnly,
    /// The question, plus the question with each keyword appended.
    Appended,
}

fn dedupe(items: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut seen = HashSet::new();
    items
        .into_iter()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty() && seen.insert(s.to_lowercase()))
        .collect()
}

/// Rule-based keywords: content unigrams in first-occurrence order, then
/// bigrams of content tokens that were adjacent in the question.
pub fn fallback_keywords(question: &str) -> KeywordSet {
    let tokens = word_tokens(question);
    let keep: Vec<bool> = tokens
        .iter()
        .map(|t| t.chars().count() >= MIN_KEYWORD_CHARS && !STOPWORDS.contains(&t.as_str()))
        .collect();
    let unigrams = tokens
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(t, _)| t.clone());
    let bigrams = tokens
        .windows(2)
        .zip(keep.windows(2))
        .filter(|(_, k)| k[0] && k[1])
        .map(|(t, _)| format!("{} {}", t[0], t[1]));
    let mut keywords = dedupe(unigrams.chain(bigrams));
    if keywords.is_empty() {
        keywords.push(question.to_string());
    }
    KeywordSet {
        question: question.to_string(),
        keywords,
        source: KeywordSource::Fallback,
    }
}

/// Asks `provider` for keywords; unparseable replies are retried once, and
/// any remaining failure degrades to [`fallback_keywords`].
pub fn extract_keywords(question: &str, provider: &dyn TextModelProvider) -> KeywordSet {
    let prompt = match PromptKind::KeywordExtraction.render(&[("QUESTION", question)]) {
        Ok(p) => p,
        Err(e) => {
            tracing::warn!(error = %e, "keyword prompt failed to render");
            return fallback_keywords(question);
        }
    };
    let messages = [ChatMessage::user(prompt)];
    for attempt in 0..2 {
        match provider.complete(&messages) {
            Ok(reply) => {
                if let Some(list) = parse_string_list(&reply) {
                    let keywords = dedupe(list);
                    if !keywords.is_empty() {
                        return KeywordSet {
                            question: question.to_string(),
                            keywords,
                            source: KeywordSource::Llm,
                        };
                    }
                }
                tracing::warn!(attempt, "keyword reply is not a list of strings");
            }
            Err(e) => {
                tracing::warn!(error = %e, "keyword extraction failed; using rule-based keywords");
                break;
            }
        }
    }
    fallback_keywords(question)
}

/// Retrieval queries for `set` under `mode`, distinct after case folding.
/// The question itself comes first.
pub fn retrieval_queries(set: &KeywordSet, mode: QueryMode) -> Vec<String> {
    let q = set.question.clone();
    let items: Vec<String> = match mode {
        QueryMode::KeywordsAndQuestion => std::iter::once(q).chain(set.keywords.iter().cloned()).collect(),
        QueryMode::KeywordsOnly if set.keywords.is_empty() => vec![q],
        QueryMode::KeywordsOnly => set.keywords.clone(),
        QueryMode::QuestionOnly => vec![q],
        QueryMode::Appended => std::iter::once(q.clone())
            .chain(set.keywords.iter().map(|k| format!("{q} {k}")))
            .collect(),
    };
    dedupe(items)
}
