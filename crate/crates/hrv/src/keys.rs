//! Per-head key material for vocabulary words, and candidate-key assembly.
//!
//! An HRV build never attends over the *prompt* — it attends over the
//! vocabulary. For each head we pre-project every concept-word's semantic
//! tokens through that head's key projection once ([`KeyBank`]), then at
//! each (timestep, head) sample one word per concept and stack their key
//! rows into a candidate matrix ([`CandidateKeys`]) for the captured
//! queries to attend over.

use std::ops::Range;

use ndarray::{Array2, Axis};

use crate::adapter::{validate_enumeration, AttentionAdapter};
use crate::error::{HrvError, Result};
use crate::heads::HeadDesc;
use crate::rng::DrawStream;
use crate::vocab::ConceptVocabulary;

/// Key rows for every (head, concept-word) pair, plus the head geometry
/// needed to use them. Self-describing: carries the vocabulary it was
/// built from, so a trace embedding a bank needs no other model state.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyBank {
    heads: Vec<HeadDesc>,
    vocab: ConceptVocabulary,
    /// `rows[flat_head][concept][word]` is an `n_i × F` matrix of key rows
    /// for the word's semantic tokens under that head's projection.
    rows: Vec<Vec<Vec<Array2<f64>>>>,
}

impl KeyBank {
    /// Build the bank from an adapter: encode each word standalone, push
    /// it through every head's key projection, keep the semantic rows.
    pub fn build<A: AttentionAdapter + ?Sized>(
        vocab: &ConceptVocabulary,
        adapter: &A,
    ) -> Result<Self> {
        let heads = adapter.enumerate_heads();
        validate_enumeration(&heads)?;

        // Encode every word once; projection is the per-head part.
        let mut encoded = Vec::with_capacity(vocab.len());
        for entry in vocab.entries() {
            let mut per_word = Vec::with_capacity(entry.words.len());
            for word in &entry.words {
                per_word.push((word, adapter.encode_word(word)?));
            }
            encoded.push(per_word);
        }

        let mut rows = Vec::with_capacity(heads.len());
        for (flat, head) in heads.iter().enumerate() {
            let mut per_concept = Vec::with_capacity(vocab.len());
            for per_word in &encoded {
                let mut word_rows = Vec::with_capacity(per_word.len());
                for (word, embedding) in per_word {
                    let semantic = embedding.semantic_indices();
                    if semantic.len() != word.sub_tokens {
                        return Err(HrvError::KeyBank {
                            word: word.text.clone(),
                            head: head.id,
                            detail: format!(
                                "encoder produced {} semantic tokens, vocabulary declares {}",
                                semantic.len(),
                                word.sub_tokens
                            ),
                        });
                    }
                    let projected = adapter.project_keys(flat, embedding)?;
                    if projected.ncols() != head.feature_dim {
                        return Err(HrvError::KeyBank {
                            word: word.text.clone(),
                            head: head.id,
                            detail: format!(
                                "projected keys are {} wide, head feature dim is {}",
                                projected.ncols(),
                                head.feature_dim
                            ),
                        });
                    }
                    let picked = projected.select(Axis(0), &semantic);
                    word_rows.push(picked);
                }
                per_concept.push(word_rows);
            }
            rows.push(per_concept);
        }
        Ok(KeyBank {
            heads,
            vocab: vocab.clone(),
            rows,
        })
    }

    /// Reassemble a bank from stored parts (the trace reader's path),
    /// revalidating every shape against the vocabulary's declarations.
    pub fn from_parts(
        heads: Vec<HeadDesc>,
        vocab: ConceptVocabulary,
        rows: Vec<Vec<Vec<Array2<f64>>>>,
    ) -> Result<Self> {
        validate_enumeration(&heads)?;
        if rows.len() != heads.len() {
            return Err(HrvError::Shape(format!(
                "{} head row sets for {} heads",
                rows.len(),
                heads.len()
            )));
        }
        for (flat, per_concept) in rows.iter().enumerate() {
            let head = &heads[flat];
            if per_concept.len() != vocab.len() {
                return Err(HrvError::Shape(format!(
                    "head {} has {} concepts of keys, vocabulary has {}",
                    head.id,
                    per_concept.len(),
                    vocab.len()
                )));
            }
            for (c, word_rows) in per_concept.iter().enumerate() {
                let entry = vocab.entry(c);
                if word_rows.len() != entry.words.len() {
                    return Err(HrvError::Shape(format!(
                        "head {}, concept {:?}: {} word matrices for {} words",
                        head.id,
                        entry.name,
                        word_rows.len(),
                        entry.words.len()
                    )));
                }
                for (w, matrix) in word_rows.iter().enumerate() {
                    let word = &entry.words[w];
                    if matrix.nrows() != word.sub_tokens || matrix.ncols() != head.feature_dim {
                        return Err(HrvError::KeyBank {
                            word: word.text.clone(),
                            head: head.id,
                            detail: format!(
                                "stored keys are {}×{}, expected {}×{}",
                                matrix.nrows(),
                                matrix.ncols(),
                                word.sub_tokens,
                                head.feature_dim
                            ),
                        });
                    }
                }
            }
        }
        Ok(KeyBank { heads, vocab, rows })
    }

    pub fn heads(&self) -> &[HeadDesc] {
        &self.heads
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn vocab(&self) -> &ConceptVocabulary {
        &self.vocab
    }

    /// Key rows for one (head, concept, word) triple.
    pub fn word_keys(&self, flat_head: usize, concept: usize, word: usize) -> &Array2<f64> {
        &self.rows[flat_head][concept][word]
    }
}

/// One head's sampled candidate-key matrix: `N′ × F` stacked key rows and
/// the half-open row ranges mapping each concept to its rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateKeys {
    matrix: Array2<f64>,
    segments: Vec<Range<usize>>,
}

impl CandidateKeys {
    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    /// Per-concept row ranges; consecutive, non-overlapping, covering all
    /// rows of [`matrix`](Self::matrix).
    pub fn segments(&self) -> &[Range<usize>] {
        &self.segments
    }

    /// Total candidate rows, `N′`.
    pub fn total_rows(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Sample one word per concept (uniformly over the concept's words) and
/// stack their key rows for the given head.
///
/// The sampler is the only source of randomness and its consumption is
/// part of the replay contract: concepts are visited in vocabulary order,
/// each multi-word concept consumes draws until one index is accepted, and
/// single-word concepts consume none.
pub fn assemble_candidate_keys(
    bank: &KeyBank,
    flat_head: usize,
    sampler: &mut DrawStream,
) -> Result<CandidateKeys> {
    if flat_head >= bank.head_count() {
        return Err(HrvError::Precondition(format!(
            "flat head index {flat_head} out of range: bank holds {} heads",
            bank.head_count()
        )));
    }
    let feature_dim = bank.heads()[flat_head].feature_dim;
    let vocab = bank.vocab();

    let mut picks = Vec::with_capacity(vocab.len());
    let mut total = 0usize;
    for (c, entry) in vocab.entries().iter().enumerate() {
        let w = if entry.words.len() == 1 {
            0
        } else {
            sampler.next_index(entry.words.len())
        };
        let keys = bank.word_keys(flat_head, c, w);
        total += keys.nrows();
        picks.push(keys);
    }

    let mut matrix = Array2::zeros((total, feature_dim));
    let mut segments = Vec::with_capacity(picks.len());
    let mut offset = 0usize;
    for keys in picks {
        let next = offset + keys.nrows();
        matrix.slice_mut(ndarray::s![offset..next, ..]).assign(keys);
        segments.push(offset..next);
        offset = next;
    }
    Ok(CandidateKeys { matrix, segments })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{GenerationRun, MapTransform, TokenEmbedding};
    use crate::heads::HeadId;
    use crate::rng::Fnv1a;
    use crate::vocab::{ConceptEntry, ConceptVocabulary, ConceptWord};

    /// Deterministic fake pipeline: embeddings derive from the token text
    /// hash, each head's "projection" multiplies by (flat index + 2).
    /// `broken_word` simulates an encoder that loses a word's semantic
    /// tokens.
    struct FakePipe {
        heads: Vec<HeadDesc>,
        broken_word: Option<String>,
    }

    impl FakePipe {
        fn new(head_count: u32) -> Self {
            let heads = (0..head_count)
                .map(|h| HeadDesc {
                    id: HeadId::new(0, h),
                    feature_dim: 4,
                    proj_dim: 4,
                    spatial_side: 2,
                })
                .collect();
            FakePipe {
                heads,
                broken_word: None,
            }
        }
    }

    impl AttentionAdapter for FakePipe {
        fn enumerate_heads(&self) -> Vec<HeadDesc> {
            self.heads.clone()
        }

        fn encode_word(&self, word: &ConceptWord) -> crate::error::Result<TokenEmbedding> {
            let n = word.sub_tokens;
            let rows = Array2::from_shape_fn((n + 2, 4), |(i, j)| {
                (Fnv1a::hash(format!("{}/{i}/{j}", word.text).as_bytes()) % 1000) as f64 / 1000.0
            });
            let mut semantic = vec![true; n + 2];
            semantic[0] = false;
            semantic[n + 1] = false;
            if self.broken_word.as_deref() == Some(&word.text) {
                semantic.fill(false);
            }
            TokenEmbedding::new(rows, semantic)
        }

        fn project_keys(
            &self,
            flat_head: usize,
            tokens: &TokenEmbedding,
        ) -> crate::error::Result<Array2<f64>> {
            Ok(&tokens.rows * (flat_head as f64 + 2.0))
        }

        fn generate_with_hooks(
            &self,
            _prompt: &[String],
            _seed: u64,
            _transform: Option<&mut MapTransform>,
            _capture: bool,
        ) -> crate::error::Result<GenerationRun> {
            Err(HrvError::Precondition("FakePipe does not generate".into()))
        }
    }

    fn small_vocab() -> ConceptVocabulary {
        ConceptVocabulary::new(vec![
            ConceptEntry {
                name: "Color".into(),
                words: vec![ConceptWord::single("white")],
            },
            ConceptEntry {
                name: "Plants".into(),
                words: vec![ConceptWord::new("oak tree", 2)],
            },
        ])
        .unwrap()
    }

    #[test]
    fn bank_holds_one_entry_per_head_word_pair() {
        let vocab = small_vocab();
        let pipe = FakePipe::new(3);
        let bank = KeyBank::build(&vocab, &pipe).unwrap();
        assert_eq!(bank.head_count(), 3);
        for head in 0..3 {
            // Single-token word: one key row.
            assert_eq!(bank.word_keys(head, 0, 0).nrows(), 1);
            // Two-sub-token word: two key rows.
            assert_eq!(bank.word_keys(head, 1, 0).nrows(), 2);
        }
        // Per-head projections differ.
        assert_ne!(bank.word_keys(0, 0, 0), bank.word_keys(1, 0, 0));
    }

    #[test]
    fn rebuilding_the_bank_is_deterministic() {
        let vocab = small_vocab();
        let pipe = FakePipe::new(2);
        let a = KeyBank::build(&vocab, &pipe).unwrap();
        let b = KeyBank::build(&vocab, &pipe).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn semantic_shortfall_names_word_and_head() {
        let vocab = small_vocab();
        let mut pipe = FakePipe::new(2);
        pipe.broken_word = Some("oak tree".into());
        match KeyBank::build(&vocab, &pipe) {
            Err(HrvError::KeyBank { word, head, .. }) => {
                assert_eq!(word, "oak tree");
                assert_eq!(head, HeadId::new(0, 0));
            }
            other => panic!("expected KeyBank error, got {other:?}"),
        }
    }

    #[test]
    fn assembly_stacks_segments_in_concept_order() {
        let vocab = small_vocab();
        let pipe = FakePipe::new(1);
        let bank = KeyBank::build(&vocab, &pipe).unwrap();
        let mut sampler = DrawStream::new(7);
        let keys = assemble_candidate_keys(&bank, 0, &mut sampler).unwrap();
        // Color contributes 1 row, oak tree 2 → N′ = 3.
        assert_eq!(keys.total_rows(), 3);
        assert_eq!(keys.segments(), &[0..1, 1..3]);
        assert_eq!(keys.matrix().row(0), bank.word_keys(0, 0, 0).row(0));
    }

    #[test]
    fn single_word_concepts_make_assembly_fully_deterministic() {
        let vocab = small_vocab(); // every concept has exactly one word
        let pipe = FakePipe::new(1);
        let bank = KeyBank::build(&vocab, &pipe).unwrap();
        let a = assemble_candidate_keys(&bank, 0, &mut DrawStream::new(1)).unwrap();
        let b = assemble_candidate_keys(&bank, 0, &mut DrawStream::new(999)).unwrap();
        assert_eq!(a, b, "no randomness should be consumed");
    }

    #[test]
    fn same_seed_reproduces_the_same_assembly() {
        // Multi-word concepts so the sampler actually matters.
        let vocab = ConceptVocabulary::new(vec![
            ConceptEntry {
                name: "A".into(),
                words: vec![
                    ConceptWord::single("a1"),
                    ConceptWord::single("a2"),
                    ConceptWord::single("a3"),
                ],
            },
            ConceptEntry {
                name: "B".into(),
                words: vec![ConceptWord::single("b1"), ConceptWord::new("b2", 2)],
            },
        ])
        .unwrap();
        let pipe = FakePipe::new(2);
        let bank = KeyBank::build(&vocab, &pipe).unwrap();
        let a = assemble_candidate_keys(&bank, 1, &mut DrawStream::new(42)).unwrap();
        let b = assemble_candidate_keys(&bank, 1, &mut DrawStream::new(42)).unwrap();
        assert_eq!(a, b);

        // Across many seeds both words of B should get picked sometimes,
        // showing the sampler actually drives the choice.
        let mut sizes = std::collections::HashSet::new();
        for seed in 0..32 {
            let keys = assemble_candidate_keys(&bank, 0, &mut DrawStream::new(seed)).unwrap();
            sizes.insert(keys.total_rows());
        }
        assert_eq!(sizes, [2usize, 3].into_iter().collect());
    }

    #[test]
    fn thirty_four_single_token_concepts_give_34_unit_segments() {
        let entries = (0..34)
            .map(|i| ConceptEntry {
                name: format!("C{i}"),
                words: vec![ConceptWord::single(format!("w{i}"))],
            })
            .collect();
        let vocab = ConceptVocabulary::new(entries).unwrap();
        let pipe = FakePipe::new(1);
        let bank = KeyBank::build(&vocab, &pipe).unwrap();
        let keys = assemble_candidate_keys(&bank, 0, &mut DrawStream::new(0)).unwrap();
        assert_eq!(keys.total_rows(), 34);
        assert_eq!(keys.segments().len(), 34);
        for (i, seg) in keys.segments().iter().enumerate() {
            assert_eq!(seg.clone(), i..i + 1);
        }
    }

    #[test]
    fn stored_parts_are_revalidated() {
        let vocab = small_vocab();
        let pipe = FakePipe::new(2);
        let bank = KeyBank::build(&vocab, &pipe).unwrap();
        let heads = bank.heads().to_vec();

        // Tamper: wrong row count for the two-sub-token word.
        let mut rows: Vec<Vec<Vec<Array2<f64>>>> = (0..2)
            .map(|h| {
                (0..2)
                    .map(|c| (0..1).map(|w| bank.word_keys(h, c, w).clone()).collect())
                    .collect()
            })
            .collect();
        rows[1][1][0] = Array2::zeros((1, 4));
        match KeyBank::from_parts(heads, vocab, rows) {
            Err(HrvError::KeyBank { word, head, .. }) => {
                assert_eq!(word, "oak tree");
                assert_eq!(head, HeadId::new(0, 1));
            }
            other => panic!("expected KeyBank error, got {other:?}"),
        }
    }
}
