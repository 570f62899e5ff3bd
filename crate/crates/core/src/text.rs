//! Word tokenization shared by the hash embedder, keyword fallback and BM25,
//! plus the character-based token estimate.

/// Lowercases `text` and splits it on every character that is neither
/// alphanumeric nor an underscore. Empty pieces are dropped.
pub fn word_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Character count used for token accounting and shingling.
pub fn char_len(text: &str) -> usize {
    text.chars().count()
}

/// Estimated model tokens at 3.5 characters per token, rounded up.
pub fn count_tokens(text: &str) -> usize {
    (2 * char_len(text)).div_ceil(7)
}
