//! Versioned prompt templates and their `{SLOT}` substitution.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PROMPT_SET_VERSION: &str = "v1";

const TABLE_PREDICTION: &str = include_str!("../../assets/prompts/v1/table_prediction.txt");
const SQL_GENERATION: &str = include_str!("../../assets/prompts/v1/sql_generation.txt");
const KEYWORD_EXTRACTION: &str = include_str!("../../assets/prompts/v1/keyword_extraction.txt");
const TABLE_DESCRIPTION: &str = include_str!("../../assets/prompts/v1/table_description.txt");

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("prompt {prompt} is missing a value for slot {{{slot}}}")]
    MissingSlot { prompt: PromptKind, slot: &'static str },
    #[error("prompt {prompt} has no slot named {{{slot}}}")]
    UnknownSlot { prompt: PromptKind, slot: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    TablePrediction,
    SqlGeneration,
    KeywordExtraction,
    TableDescription,
}

enum Segment<'a> {
    Literal(&'a str),
    Slot(&'static str),
}

impl PromptKind {
    pub const ALL: [PromptKind; 4] = [
        PromptKind::TablePrediction,
        PromptKind::SqlGeneration,
        PromptKind::KeywordExtraction,
        PromptKind::TableDescription,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::TablePrediction => "table_prediction",
            PromptKind::SqlGeneration => "sql_generation",
            PromptKind::KeywordExtraction => "keyword_extraction",
            PromptKind::TableDescription => "table_description",
        }
    }

    /// Template text; the asset file's final newline is not part of it.
    pub fn template(self) -> &'static str {
        let raw = match self {
            PromptKind::TablePrediction => TABLE_PREDICTION,
            PromptKind::SqlGeneration => SQL_GENERATION,
            PromptKind::KeywordExtraction => KEYWORD_EXTRACTION,
            PromptKind::TableDescription => TABLE_DESCRIPTION,
        };
        raw.strip_suffix('\n').unwrap_or(raw)
    }

    pub fn slots(self) -> &'static [&'static str] {
        match self {
            PromptKind::TablePrediction => &["SCHEMA", "QUESTION"],
            PromptKind::SqlGeneration => &["DIALECT_INSTRUCTION", "DATABASE_SCHEMA", "QUESTION"],
            PromptKind::KeywordExtraction => &["QUESTION"],
            PromptKind::TableDescription => &["TABLE_SCHEMA"],
        }
    }

    fn segments(self) -> Vec<Segment<'static>> {
        let template = self.template();
        let mut out = Vec::new();
        let mut rest = template;
        let mut literal_start = 0;
        let mut offset = 0;
        while let Some(open) = rest.find('{') {
            let after = &rest[open + 1..];
            let slot = after
                .find('}')
                .and_then(|close| self.slots().iter().find(|s| **s == &after[..close]));
            match slot {
                Some(slot) => {
                    out.push(Segment::Literal(&template[literal_start..offset + open]));
                    out.push(Segment::Slot(slot));
                    let consumed = open + slot.len() + 2;
                    offset += consumed;
                    literal_start = offset;
                    rest = &rest[consumed..];
                }
                None => {
                    offset += open + 1;
                    rest = &rest[open + 1..];
                }
            }
        }
        out.push(Segment::Literal(&template[literal_start..]));
        out
    }

    /// Substitutes every slot in one pass; values are inserted verbatim and
    /// never rescanned.
    pub fn render(self, values: &[(&str, &str)]) -> Result<String, PromptError> {
        for (name, _) in values {
            if !self.slots().contains(name) {
                return Err(PromptError::UnknownSlot {
                    prompt: self,
                    slot: name.to_string(),
                });
            }
        }
        let mut out = String::with_capacity(self.template().len());
        for seg in self.segments() {
            match seg {
                Segment::Literal(s) => out.push_str(s),
                Segment::Slot(slot) => {
                    let value = values
                        .iter()
                        .find(|(n, _)| *n == slot)
                        .map(|(_, v)| *v)
                        .ok_or(PromptError::MissingSlot { prompt: self, slot })?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }

    /// Recovers the slot values from a rendering of this template, or `None`
    /// if `rendered` is not one.
    pub fn extract(self, rendered: &str) -> Option<BTreeMap<&'static str, String>> {
        let segments = self.segments();
        let mut values = BTreeMap::new();
        let mut rest = rendered;
        let mut pending: Option<&'static str> = None;
        let last = segments.len() - 1;
        for (i, seg) in segments.into_iter().enumerate() {
            match seg {
                Segment::Slot(s) => pending = Some(s),
                Segment::Literal(lit) => match pending.take() {
                    None => rest = rest.strip_prefix(lit)?,
                    Some(slot) if i == last => {
                        values.insert(slot, rest.strip_suffix(lit)?.to_string());
                        rest = "";
                    }
                    Some(slot) => {
                        let at = rest.find(lit)?;
                        values.insert(slot, rest[..at].to_string());
                        rest = &rest[at + lit.len()..];
                    }
                },
            }
        }
        rest.is_empty().then_some(values)
    }

    /// Identifies which template produced `rendered`.
    pub fn detect(rendered: &str) -> Option<(PromptKind, BTreeMap<&'static str, String>)> {
        Self::ALL
            .into_iter()
            .find_map(|k| k.extract(rendered).map(|v| (k, v)))
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn every_template_contains_exactly_its_slots() {
        for kind in PromptKind::ALL {
            for slot in kind.slots() {
                assert_eq!(kind.template().matches(&format!("{{{slot}}}")).count(), 1, "{kind} {slot}");
            }
            assert!(!kind.template().contains('\\'), "{kind} has a stray escape");
            assert!(!kind.template().ends_with('\n'));
        }
    }

    #[test]
    fn keyword_prompt_ends_with_question_instructions() {
        let p = PromptKind::KeywordExtraction.render(&[("QUESTION", "zip")]).unwrap();
        assert!(p.contains("\nQuestion: zip\n\nPlease provide your findings as a json list"));
        assert!(p.ends_with("Only output the json list with no explanations."));
        assert!(p.contains("MAX(COUNT(person_id))"));
    }

    #[test]
    fn values_are_not_rescanned() {
        let p = PromptKind::TablePrediction
            .render(&[("SCHEMA", "{QUESTION}"), ("QUESTION", "q")])
            .unwrap();
        assert!(p.contains("### Schema:\n{QUESTION}\n\n### User Question:\nq\n"));
    }

    #[test]
    fn slot_errors() {
        assert_eq!(
            PromptKind::TablePrediction.render(&[("SCHEMA", "s")]),
            Err(PromptError::MissingSlot {
                prompt: PromptKind::TablePrediction,
                slot: "QUESTION"
            })
        );
        assert!(matches!(
            PromptKind::KeywordExtraction.render(&[("QUESTION", "q"), ("SCHEMA", "s")]),
            Err(PromptError::UnknownSlot { .. })
        ));
    }

    #[test]
    fn detect_tells_templates_apart() {
        let p = PromptKind::TableDescription.render(&[("TABLE_SCHEMA", "<db>d</db>")]).unwrap();
        let (kind, values) = PromptKind::detect(&p).unwrap();
        assert_eq!(kind, PromptKind::TableDescription);
        assert_eq!(values["TABLE_SCHEMA"], "<db>d</db>");
        assert!(PromptKind::detect("hello").is_none());
    }

    proptest! {
        #[test]
        fn extract_inverts_render(
            schema in "[a-z<>/ \n]{0,40}",
            question in "[A-Za-z?' ]{1,40}",
            dialect in "[A-Za-z. ]{0,20}",
        ) {
            let p = PromptKind::SqlGeneration
                .render(&[("DIALECT_INSTRUCTION", &dialect), ("DATABASE_SCHEMA", &schema), ("QUESTION", &question)])
                .unwrap();
            let v = PromptKind::SqlGeneration.extract(&p).unwrap();
            prop_assert_eq!(&v["QUESTION"], &question);
            prop_assert_eq!(&v["DATABASE_SCHEMA"], &schema);
            prop_assert_eq!(&v["DIALECT_INSTRUCTION"], &dialect);
        }
    }
}
