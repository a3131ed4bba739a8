//! Crate-wide error type and result alias.
//!
//! Everything fallible in this crate funnels into [`HrvError`] so callers
//! (notably the CLI) can map failures onto a small set of outcomes: bad
//! input data, a violated hook contract, or a broken precondition. Variants
//! carry enough context to name the offending word, head, or file position
//! instead of a bare "invalid input".

use thiserror::Error;

use crate::heads::HeadId;

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, HrvError>;

#[derive(Debug, Error)]
pub enum HrvError {
    /// A matrix or vector had the wrong dimensions for the operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An operation's documented precondition was violated by the caller.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A concept name that is not part of the vocabulary in use.
    #[error("unknown concept {0:?}")]
    UnknownConcept(String),

    /// A head identifier outside the adapter's enumeration.
    #[error("unknown head {0}")]
    UnknownHead(HeadId),

    /// The vocabulary itself is malformed (duplicate names, empty word
    /// lists, too few concepts, bad TSV syntax, ...).
    #[error("invalid vocabulary: {0}")]
    Vocab(String),

    /// Key-bank construction failed for a specific (word, head) pair —
    /// typically the encoder produced fewer semantic tokens than the
    /// vocabulary declares for the word.
    #[error("key bank: word {word:?} at head {head}: {detail}")]
    KeyBank {
        word: String,
        head: HeadId,
        detail: String,
    },

    /// Text could not be encoded (e.g. a prompt overflowing the toy
    /// engine's token slots).
    #[error("encoding failed: {0}")]
    Encode(String),

    /// A generation hook broke its contract (wrong-shaped map, ...).
    /// Names the timestep and head so the offending transform call is
    /// identifiable.
    #[error("hook contract violated at t={timestep}, head {head}: {detail}")]
    Hook {
        timestep: usize,
        head: HeadId,
        detail: String,
    },

    /// Trace bytes did not start with the expected format tag.
    #[error("trace version mismatch: {0}")]
    TraceVersion(String),

    /// Trace bytes ended before the declared sections were complete.
    #[error("trace truncated: {0}")]
    TraceTruncated(String),

    /// Trace value bytes do not match the stored checksum.
    #[error("trace checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    TraceChecksum { stored: u64, computed: u64 },

    /// Trace structure is damaged in some other way (bad field, stray
    /// line, unparseable number).
    #[error("trace malformed at line {line}: {detail}")]
    TraceMalformed { line: usize, detail: String },

    /// A data file other than a trace (HRV/1, raw tensor dump, vocabulary
    /// TSV, config) failed to parse.
    #[error("malformed {format} data: {detail}")]
    Format {
        format: &'static str,
        detail: String,
    },

    /// Source/target prompts could not be aligned for an edit.
    #[error("prompt alignment failed: {0}")]
    Alignment(String),

    /// A scoring callback failed while evaluating a weakening curve.
    #[error("scorer failed for prompt {prompt_index} at k={weaken_count}: {source}")]
    Scorer {
        prompt_index: usize,
        weaken_count: usize,
        source: Box<HrvError>,
    },
}

impl HrvError {
    /// True for errors that indicate broken *input data* (files, formats,
    /// vocabularies) rather than programmer error or hook misbehavior.
    /// The CLI maps these to its data-error exit code.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            HrvError::Vocab(_)
                | HrvError::KeyBank { .. }
                | HrvError::Encode(_)
                | HrvError::TraceVersion(_)
                | HrvError::TraceTruncated(_)
                | HrvError::TraceChecksum { .. }
                | HrvError::TraceMalformed { .. }
                | HrvError::Format { .. }
                | HrvError::UnknownConcept(_)
                | HrvError::Alignment(_)
        )
    }

    /// True when a generation hook violated its contract.
    pub fn is_hook_error(&self) -> bool {
        if let HrvError::Scorer { source, .. } = self {
            return source.is_hook_error();
        }
        matches!(self, HrvError::Hook { .. })
    }
}
