//! The boundary between HRV math and any diffusion pipeline.
//!
//! Everything upstream of this module is pure linear algebra; everything
//! that knows about latents, encoders, or denoising sits behind
//! [`AttentionAdapter`]. The toy engine is the reference implementation;
//! a real pipeline plugs in by answering the same four questions: what
//! heads exist, how does a head project keys, how does a word encode, and
//! how does a generation run with hooks observing or rewriting CA maps.

use ndarray::Array2;

use crate::attention::CaMap;
use crate::error::{HrvError, Result};
use crate::heads::{HeadDesc, HeadId};
use crate::vocab::ConceptWord;

/// Token embeddings for one piece of text: one row per token slot, plus a
/// mask marking which slots hold semantic (non-reserved) tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbedding {
    pub rows: Array2<f64>,
    pub semantic: Vec<bool>,
}

impl TokenEmbedding {
    pub fn new(rows: Array2<f64>, semantic: Vec<bool>) -> Result<Self> {
        if rows.nrows() != semantic.len() {
            return Err(HrvError::Shape(format!(
                "{} embedding rows but {} mask entries",
                rows.nrows(),
                semantic.len()
            )));
        }
        Ok(TokenEmbedding { rows, semantic })
    }

    /// Slot indices of semantic tokens, in order.
    pub fn semantic_indices(&self) -> Vec<usize> {
        self.semantic
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
            .collect()
    }

    pub fn semantic_count(&self) -> usize {
        self.semantic.iter().filter(|&&s| s).count()
    }
}

/// Map-rewriting hook called once per (timestep, head) during generation,
/// on the row-stochastic CA map over prompt tokens, before value
/// weighting. Must return a map of the same shape; the engine enforces
/// that and reports violations as hook-contract errors naming (t, head).
pub type MapTransform<'a> = dyn FnMut(HeadId, usize, &CaMap) -> CaMap + 'a;

/// Captured query matrices from one generation: `Q^(t,h)` for every
/// timestep and head, indexed `[t][flat head]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureSet {
    queries: Vec<Vec<Array2<f64>>>,
}

impl CaptureSet {
    /// Wrap captures, checking the grid is rectangular: every timestep
    /// holds one query matrix per head.
    pub fn new(queries: Vec<Vec<Array2<f64>>>) -> Result<Self> {
        if let Some(first) = queries.first() {
            let heads = first.len();
            for (t, row) in queries.iter().enumerate() {
                if row.len() != heads {
                    return Err(HrvError::Shape(format!(
                        "capture row t={t} has {} heads, expected {heads}",
                        row.len()
                    )));
                }
            }
        }
        Ok(CaptureSet { queries })
    }

    pub fn timesteps(&self) -> usize {
        self.queries.len()
    }

    pub fn head_count(&self) -> usize {
        self.queries.first().map_or(0, Vec::len)
    }

    pub fn query(&self, t: usize, flat_head: usize) -> &Array2<f64> {
        &self.queries[t][flat_head]
    }
}

/// Everything one generation produced: inputs, the latent trajectory
/// (initial state plus one snapshot per timestep), and captured queries
/// when capture was requested.
#[derive(Debug, Clone)]
pub struct GenerationRun {
    /// Engine label, recorded into traces and provenance headers.
    pub engine: String,
    pub prompt: Vec<String>,
    pub seed: u64,
    pub timesteps: usize,
    /// `timesteps + 1` latent snapshots; `trajectory[0]` is the initial
    /// latent, `trajectory[t]` the state after timestep `t`.
    pub trajectory: Vec<Array2<f64>>,
    pub captures: Option<CaptureSet>,
}

impl GenerationRun {
    /// Final latent state.
    pub fn final_latent(&self) -> &Array2<f64> {
        self.trajectory
            .last()
            .expect("a generation run always has an initial latent")
    }
}

/// A diffusion pipeline as seen by the HRV toolkit.
pub trait AttentionAdapter {
    /// All cross-attention heads, sorted by [`HeadId`] (layer-major). The
    /// position of a head in this list is its flat index everywhere else.
    fn enumerate_heads(&self) -> Vec<HeadDesc>;

    /// Encode one concept-word standalone, as its own text.
    fn encode_word(&self, word: &ConceptWord) -> Result<TokenEmbedding>;

    /// Apply head `flat_head`'s key projection to token embeddings,
    /// returning one key row per token slot.
    fn project_keys(&self, flat_head: usize, tokens: &TokenEmbedding) -> Result<Array2<f64>>;

    /// Run a generation. Deterministic given (prompt, seed, transform);
    /// captures queries per (t, head) when `capture` is set.
    fn generate_with_hooks(
        &self,
        prompt: &[String],
        seed: u64,
        transform: Option<&mut MapTransform>,
        capture: bool,
    ) -> Result<GenerationRun>;
}

/// Check an adapter's head enumeration: layer-major order, no duplicates.
pub fn validate_enumeration(heads: &[HeadDesc]) -> Result<()> {
    if heads.is_empty() {
        return Err(HrvError::Precondition("adapter exposes no heads".into()));
    }
    for pair in heads.windows(2) {
        if pair[0].id >= pair[1].id {
            return Err(HrvError::Precondition(format!(
                "head enumeration not strictly layer-major: {} then {}",
                pair[0].id, pair[1].id
            )));
        }
    }
    Ok(())
}
