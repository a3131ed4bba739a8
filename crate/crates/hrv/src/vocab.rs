//! Concept vocabulary: named concepts, each with a set of concept-words.
//!
//! HRV rows are indexed by concept, candidate keys by concept-word, so the
//! vocabulary fixes both orderings. Sub-token counts are *declared* here
//! rather than inferred from a tokenizer — the toolkit has to know how many
//! key rows a word contributes before it ever talks to a model.

use crate::error::{HrvError, Result};
use crate::rng::Fnv1a;

/// One concept-word plus the number of semantic tokens it encodes to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptWord {
    pub text: String,
    pub sub_tokens: usize,
}

impl ConceptWord {
    pub fn new(text: impl Into<String>, sub_tokens: usize) -> Self {
        ConceptWord {
            text: text.into(),
            sub_tokens,
        }
    }

    /// Single-token word.
    pub fn single(text: impl Into<String>) -> Self {
        ConceptWord::new(text, 1)
    }
}

/// A named concept and its words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptEntry {
    pub name: String,
    pub words: Vec<ConceptWord>,
}

/// Validated, ordered set of concepts.
///
/// Construction enforces every structural rule the rest of the toolkit
/// leans on: at least two concepts, unique printable names, non-empty word
/// lists, sub-token counts ≥ 1. Indices into the entry list are the concept
/// indices used by HRV tensors and matrices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptVocabulary {
    entries: Vec<ConceptEntry>,
}

/// Shipped default vocabulary: 34 visual concepts, 10 words each.
const BUILTIN_TSV: &str = include_str!("../data/concepts.tsv");

impl ConceptVocabulary {
    pub fn new(entries: Vec<ConceptEntry>) -> Result<Self> {
        if entries.len() < 2 {
            return Err(HrvError::Vocab(format!(
                "need at least 2 concepts, got {}",
                entries.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for entry in &entries {
            if entry.name.is_empty() {
                return Err(HrvError::Vocab("empty concept name".into()));
            }
            if entry.name.contains(['\t', '\n', '\r']) {
                return Err(HrvError::Vocab(format!(
                    "concept name {:?} contains a tab or newline",
                    entry.name
                )));
            }
            if !seen.insert(entry.name.as_str()) {
                return Err(HrvError::Vocab(format!(
                    "duplicate concept name {:?}",
                    entry.name
                )));
            }
            if entry.words.is_empty() {
                return Err(HrvError::Vocab(format!(
                    "concept {:?} has no words",
                    entry.name
                )));
            }
            let mut words_seen = std::collections::HashSet::new();
            for word in &entry.words {
                if word.text.is_empty() {
                    return Err(HrvError::Vocab(format!(
                        "concept {:?} has an empty word",
                        entry.name
                    )));
                }
                if word.text.contains(['\t', '\n', '\r', ',', '#']) {
                    return Err(HrvError::Vocab(format!(
                        "word {:?} in concept {:?} contains a reserved character",
                        word.text, entry.name
                    )));
                }
                if word.sub_tokens == 0 {
                    return Err(HrvError::Vocab(format!(
                        "word {:?} in concept {:?} declares 0 sub-tokens",
                        word.text, entry.name
                    )));
                }
                if !words_seen.insert(word.text.as_str()) {
                    return Err(HrvError::Vocab(format!(
                        "duplicate word {:?} in concept {:?}",
                        word.text, entry.name
                    )));
                }
            }
        }
        Ok(ConceptVocabulary { entries })
    }

    /// The vocabulary shipped with the crate (34 concepts × 10 words).
    pub fn builtin() -> Self {
        Self::from_tsv_str(BUILTIN_TSV).expect("builtin vocabulary data is valid")
    }

    /// Number of concepts, `N`.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ConceptEntry] {
        &self.entries
    }

    pub fn entry(&self, concept: usize) -> &ConceptEntry {
        &self.entries[concept]
    }

    /// Concept index by name.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Like [`index_of`](Self::index_of) but with a useful error.
    pub fn require(&self, name: &str) -> Result<usize> {
        self.index_of(name)
            .ok_or_else(|| HrvError::UnknownConcept(name.to_string()))
    }

    /// Declared sub-token count for a word, if it appears in any concept.
    pub fn sub_tokens_of(&self, text: &str) -> Option<usize> {
        self.entries
            .iter()
            .flat_map(|e| &e.words)
            .find(|w| w.text == text)
            .map(|w| w.sub_tokens)
    }

    /// Parse the TSV grammar: one concept per line,
    /// `name<TAB>word[,word...]`, where a word may carry a `#k` sub-token
    /// suffix (default 1). `#`-prefixed lines and blank lines are skipped.
    pub fn from_tsv_str(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, words_field) = line.split_once('\t').ok_or_else(|| {
                HrvError::Vocab(format!("line {}: expected <concept>\\t<words>", lineno + 1))
            })?;
            let mut words = Vec::new();
            for raw in words_field.split(',') {
                let raw = raw.trim();
                if raw.is_empty() {
                    return Err(HrvError::Vocab(format!(
                        "line {}: empty word in concept {:?}",
                        lineno + 1,
                        name
                    )));
                }
                let word = match raw.rsplit_once('#') {
                    Some((text, count)) => {
                        let sub_tokens = count.parse::<usize>().map_err(|_| {
                            HrvError::Vocab(format!(
                                "line {}: bad sub-token count in {:?}",
                                lineno + 1,
                                raw
                            ))
                        })?;
                        ConceptWord::new(text.trim(), sub_tokens)
                    }
                    None => ConceptWord::single(raw),
                };
                words.push(word);
            }
            entries.push(ConceptEntry {
                name: name.trim().to_string(),
                words,
            });
        }
        Self::new(entries)
    }

    /// Serialize back to the TSV grammar. Single-token words omit the
    /// redundant `#1` suffix, so `from_tsv_str(to_tsv(v)) == v`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for entry in &self.entries {
            out.push_str(&entry.name);
            out.push('\t');
            for (i, word) in entry.words.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&word.text);
                if word.sub_tokens != 1 {
                    out.push('#');
                    out.push_str(&word.sub_tokens.to_string());
                }
            }
            out.push('\n');
        }
        out
    }

    /// Stable 64-bit content fingerprint. Any change to concept order,
    /// names, words, or sub-token counts changes the fingerprint; it is
    /// what traces and HRV provenance headers embed.
    pub fn fingerprint(&self) -> u64 {
        let mut hash = Fnv1a::new();
        for entry in &self.entries {
            hash.update(entry.name.as_bytes());
            hash.update(&[0x1f]);
            for word in &entry.words {
                hash.update(word.text.as_bytes());
                hash.update(&[0x1e]);
                hash.update(word.sub_tokens.to_string().as_bytes());
                hash.update(&[0x1e]);
            }
            hash.update(&[0x1d]);
        }
        hash.finish()
    }
}
