//! Deterministic word-level toy vocabulary shared by the text encoder and
//! the decoder.
//!
//! The id space is built from fixed special tokens, a built-in connective
//! word list, the class names, and the schema's attribute and level names,
//! in that order, deduplicated. The same vocabulary serves text encoding,
//! masked-token prediction, and vocabulary-restricted classification.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::soft_targets::{MetadataSchema, MISSING_LEVEL};
use crate::{config_err, domain_err};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const MASK: u32 = 3;
/// First id assignable to a real word.
pub const FIRST_WORD: u32 = 4;

pub const MAX_VOCAB: usize = 512;

/// Connective words available to the synthetic corpus and the special-token
/// seed lists.
pub const BUILTIN_WORDS: &[&str] = &[
    "image", "begin", "end", "text", "answer", "patient", "lesion", "risk", "elevated",
    "associated", "with", "of", "suggests", "history", "presents", "finding", "indicates",
    "strong", "weak", "report", "summary", "factor", "diagnosis", "photo", "scan", "study",
    "shows", "case", "evidence", "links", "correlates", "increased", "likelihood", "profile",
    "marker", "observed", "pattern", "supports", "classification", "category", "systematic",
    "review", "and", "in", "the", "at", "a", "as", "age",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// Builds the id space from the schema and class vocabulary.
    pub fn build(schema: &MetadataSchema, classes: &[String]) -> Result<Self> {
        let mut words: Vec<String> = Vec::new();
        let mut index: BTreeMap<String, u32> = BTreeMap::new();
        let specials = ["[pad]", "[unk]", "[cls]", "[mask]"];
        for s in specials {
            index.insert(s.to_string(), words.len() as u32);
            words.push(s.to_string());
        }
        let push = |w: &str, words: &mut Vec<String>, index: &mut BTreeMap<String, u32>| {
            let w = normalize_word(w);
            if w.is_empty() || index.contains_key(&w) {
                return;
            }
            index.insert(w.clone(), words.len() as u32);
            words.push(w);
        };
        for w in BUILTIN_WORDS {
            push(w, &mut words, &mut index);
        }
        for c in classes {
            push(c, &mut words, &mut index);
        }
        for attr in &schema.attributes {
            push(&attr.name, &mut words, &mut index);
            for level in &attr.levels {
                push(level, &mut words, &mut index);
            }
        }
        push(MISSING_LEVEL, &mut words, &mut index);
        if words.len() > MAX_VOCAB {
            return Err(config_err!(
                "vocabulary of {} words exceeds the {MAX_VOCAB}-id budget",
                words.len()
            ));
        }
        Ok(Vocabulary { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(&normalize_word(word)).copied()
    }

    /// Id for a word, or an error naming it (used for class tokens where
    /// falling back to `[unk]` would be a bug).
    pub fn require_id(&self, word: &str) -> Result<u32> {
        self.id(word)
            .ok_or_else(|| CoreError::Vocabulary(alloc::format!("word '{word}' not in vocabulary")))
    }

    pub fn word(&self, id: u32) -> Result<&str> {
        self.words
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or_else(|| {
                CoreError::Vocabulary(alloc::format!(
                    "id {id} out of vocabulary (size {})",
                    self.words.len()
                ))
            })
    }

    /// Whitespace tokenization with punctuation stripping; unknown words map
    /// to `[unk]`.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(normalize_word)
            .filter(|w| !w.is_empty())
            .map(|w| self.index.get(&w).copied().unwrap_or(UNK))
            .collect()
    }

    /// Checks that every id is in range (ids may come from files).
    pub fn validate_ids(&self, ids: &[u32]) -> Result<()> {
        for &id in ids {
            if id as usize >= self.words.len() {
                return Err(CoreError::Vocabulary(alloc::format!(
                    "id {id} out of vocabulary (size {})",
                    self.words.len()
                )));
            }
        }
        Ok(())
    }
}

fn normalize_word(w: &str) -> String {
    w.trim_matches(|c: char| c.is_ascii_punctuation() && c != '[' && c != ']' && c != '_')
        .to_lowercase()
}

/// Renders the visually relevant attributes of a record into the token
/// sequence consumed by the text encoder: `name: level` fragments in schema
/// order. Attributes missing from the record render the `missing` level.
pub fn render_metadata_tokens(
    record: &BTreeMap<String, String>,
    schema: &MetadataSchema,
    vocab: &Vocabulary,
) -> Result<Vec<u32>> {
    let mut ids = Vec::new();
    for attr in &schema.attributes {
        if !attr.visually_relevant {
            continue;
        }
        let level = record
            .get(&attr.name)
            .map(|s| s.as_str())
            .unwrap_or(MISSING_LEVEL);
        ids.push(vocab.require_id(&attr.name)?);
        ids.push(vocab.require_id(level).unwrap_or(UNK));
    }
    if ids.is_empty() {
        return Err(domain_err!(
            "record renders to an empty token sequence; no visually relevant attributes"
        ));
    }
    Ok(ids)
}
