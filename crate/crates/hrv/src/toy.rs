//! A miniature deterministic cross-attention "diffusion" engine.
//!
//! No noise schedule, no guidance, no learned weights — just seeded random
//! projections and a latent that drifts toward whatever the attention maps
//! route to it. That is exactly enough to exercise every piece of HRV
//! machinery end to end: head relevance construction, ordered weakening,
//! steering, and two-prompt edits, all bit-for-bit reproducible.
//!
//! The engine's ground-truth lever is *planting*: biasing one head's key
//! projection toward a concept's embedding direction, which makes that
//! head route the concept measurably. Recovery of planted heads by the
//! HRV build, and energy loss when they are weakened, are the oracles the
//! acceptance tests lean on.

use ndarray::{Array1, Array2};

use crate::adapter::{AttentionAdapter, CaptureSet, GenerationRun, MapTransform, TokenEmbedding};
use crate::attention::{softmax_ca_map, CaMap};
use crate::error::{HrvError, Result};
use crate::heads::{HeadDesc, HeadId};
use crate::relevance::RescalingVector;
use crate::rng::{derive_seed, streams, DrawStream, Fnv1a};
use crate::steering::{ae_hrv_loss, p2p_hrv_maps, Alignment, TokenSpan};
use crate::vocab::{ConceptVocabulary, ConceptWord};

/// Engine geometry and dynamics. The defaults are the smallest sizes at
/// which multi-layer head ordering, multi-token words, and weakening
/// curves are all non-degenerate while the full test suite stays fast.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    /// Embedding/feature width F (also the per-head projection dim).
    pub feature_dim: usize,
    /// Token slots per prompt encoding, start and end tokens included.
    pub token_slots: usize,
    /// Spatial side R; the latent holds R² feature rows.
    pub spatial_side: usize,
    pub layers: usize,
    pub heads_per_layer: usize,
    pub timesteps: usize,
    /// Latent update step size η.
    pub step_size: f64,
    pub master_seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            feature_dim: 16,
            token_slots: 8,
            spatial_side: 4,
            layers: 3,
            heads_per_layer: 4,
            timesteps: 5,
            step_size: 0.1,
            master_seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn head_count(&self) -> usize {
        self.layers * self.heads_per_layer
    }

    /// Semantic-token capacity: every encoding spends one slot on the
    /// start token and at least one on the end token.
    pub fn semantic_capacity(&self) -> usize {
        self.token_slots.saturating_sub(2)
    }

    fn validate(&self) -> Result<()> {
        let all_positive = self.feature_dim > 0
            && self.token_slots > 2
            && self.spatial_side > 0
            && self.layers > 0
            && self.heads_per_layer > 0
            && self.timesteps > 0
            && self.step_size > 0.0;
        if !all_positive {
            return Err(HrvError::Precondition(
                "toy config fields must all be positive (and token_slots > 2)".into(),
            ));
        }
        Ok(())
    }

    /// Parse a flat `key=value` file; unspecified keys keep their
    /// defaults. Blank lines and `#` comments are allowed.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let fail = |detail: String| HrvError::Format {
            format: "ToyConfig",
            detail,
        };
        let mut config = ToyConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| fail(format!("line {}: expected key=value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = || {
                fail(format!(
                    "line {}: bad value {value:?} for {key}",
                    lineno + 1
                ))
            };
            match key {
                "feature_dim" => config.feature_dim = value.parse().map_err(|_| bad())?,
                "token_slots" => config.token_slots = value.parse().map_err(|_| bad())?,
                "spatial_side" => config.spatial_side = value.parse().map_err(|_| bad())?,
                "layers" => config.layers = value.parse().map_err(|_| bad())?,
                "heads_per_layer" => config.heads_per_layer = value.parse().map_err(|_| bad())?,
                "timesteps" => config.timesteps = value.parse().map_err(|_| bad())?,
                "step_size" => config.step_size = value.parse().map_err(|_| bad())?,
                "master_seed" => config.master_seed = value.parse().map_err(|_| bad())?,
                other => return Err(fail(format!("line {}: unknown key {other:?}", lineno + 1))),
            }
        }
        config.validate()?;
        Ok(config)
    }
}

/// One planting assignment: bias `head`'s key projection toward `concept`
/// with strength `gain`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantAssignment {
    pub head: HeadId,
    pub concept: String,
    pub gain: f64,
}

/// A set of planting assignments; at most one concept per head.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlantSpec {
    pub assignments: Vec<PlantAssignment>,
}

impl PlantSpec {
    /// Every listed head gets the same gain. The conventional strong gain
    /// for ground-truth fixtures is [`PlantSpec::DEFAULT_GAIN`].
    pub fn uniform(assignments: &[(HeadId, &str)], gain: f64) -> Self {
        PlantSpec {
            assignments: assignments
                .iter()
                .map(|(head, concept)| PlantAssignment {
                    head: *head,
                    concept: (*concept).to_string(),
                    gain,
                })
                .collect(),
        }
    }

    pub const DEFAULT_GAIN: f64 = 10.0;
}

/// Per-head projection matrices, all F×F.
#[derive(Debug, Clone, PartialEq)]
struct HeadParams {
    w_q: Array2<f64>,
    w_k: Array2<f64>,
    w_v: Array2<f64>,
    w_o: Array2<f64>,
}

/// The three runs a two-prompt edit produces: the source prompt alone,
/// the target prompt alone, and the target generated under composed
/// maps. All three share one seed and therefore one initial latent.
#[derive(Debug, Clone)]
pub struct EditRun {
    pub source: GenerationRun,
    pub target: GenerationRun,
    pub edited: GenerationRun,
}

/// The engine: immutable after construction and planting, so concurrent
/// generations can share it freely.
#[derive(Debug, Clone)]
pub struct ToyEngine {
    config: ToyConfig,
    vocab: ConceptVocabulary,
    heads: Vec<HeadDesc>,
    params: Vec<HeadParams>,
    /// Per flat head: the concept planted into it, if any.
    planted: Vec<Option<usize>>,
}

/// Embedding seed tags, so a word literally spelled like a special token
/// can never collide with one.
const TAG_TOKEN: u8 = 0x01;
const TAG_START: u8 = 0x02;
const TAG_END: u8 = 0x03;
/// Seed tag for the shared latent mean direction (see
/// [`ToyEngine::latent_mean`]).
const TAG_MEAN: u8 = 0x04;

impl ToyEngine {
    pub fn new(config: ToyConfig, vocab: ConceptVocabulary) -> Result<Self> {
        config.validate()?;
        let f = config.feature_dim;
        let sigma = 1.0 / (f as f64).sqrt();

        let mut heads = Vec::with_capacity(config.head_count());
        let mut params = Vec::with_capacity(config.head_count());
        for layer in 0..config.layers {
            for head in 0..config.heads_per_layer {
                let id = HeadId::new(layer as u32, head as u32);
                heads.push(HeadDesc {
                    id,
                    feature_dim: f,
                    proj_dim: f,
                    spatial_side: config.spatial_side,
                });
                // Parameters are a pure function of (master seed, head id),
                // independent of enumeration order. Draw order is part of
                // the determinism contract: W_Q, W_K, then the two
                // near-identity output-side maps.
                let head_seed = derive_seed(
                    config.master_seed,
                    streams::HEAD_PARAMS,
                    ((layer as u64) << 32) | head as u64,
                );
                let mut stream = DrawStream::new(head_seed);
                let mut gaussian =
                    |scale: f64| Array2::from_shape_fn((f, f), |_| scale * stream.next_normal());
                let w_q = gaussian(sigma);
                let w_k = gaussian(sigma);
                let w_v = Array2::eye(f) + gaussian(0.1 * sigma);
                let w_o = Array2::eye(f) + gaussian(0.1 * sigma);
                params.push(HeadParams { w_q, w_k, w_v, w_o });
            }
        }
        let planted = vec![None; heads.len()];
        Ok(ToyEngine {
            config,
            vocab,
            heads,
            params,
            planted,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn vocab(&self) -> &ConceptVocabulary {
        &self.vocab
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    fn flat_index(&self, id: HeadId) -> Result<usize> {
        self.heads
            .iter()
            .position(|desc| desc.id == id)
            .ok_or(HrvError::UnknownHead(id))
    }

    // ── embeddings ───────────────────────────────────────────────────

    /// Unit-norm embedding drawn from a stream seeded by tagged text, so
    /// embeddings are a pure function of the token's text.
    fn embedding_from_seed(&self, seed: u64) -> Array1<f64> {
        let f = self.config.feature_dim;
        let mut stream = DrawStream::new(seed);
        let mut row = Array1::from_shape_fn(f, |_| stream.next_normal());
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
        row
    }

    fn token_seed(tag: u8, text: &str) -> u64 {
        let mut h = Fnv1a::new();
        h.update(&[tag]);
        h.update(text.as_bytes());
        h.finish()
    }

    /// Sub-token texts for a word: a single-token word embeds from its own
    /// text; a k-token word embeds from `word#0` … `word#k-1`.
    fn sub_token_texts(text: &str, sub_tokens: usize) -> Vec<String> {
        if sub_tokens == 1 {
            vec![text.to_string()]
        } else {
            (0..sub_tokens).map(|i| format!("{text}#{i}")).collect()
        }
    }

    /// Encode pre-expanded (text, sub-token count) pieces into the fixed
    /// slot layout: slot 0 = start token, then the semantic sub-tokens in
    /// order, then the end token filling every remaining slot.
    fn encode_pieces(&self, pieces: &[(&str, usize)]) -> Result<TokenEmbedding> {
        let slots = self.config.token_slots;
        let f = self.config.feature_dim;
        let semantic_total: usize = pieces.iter().map(|(_, k)| k).sum();
        if semantic_total > self.config.semantic_capacity() {
            return Err(HrvError::Encode(format!(
                "prompt expands to {semantic_total} semantic tokens; the engine fits {}",
                self.config.semantic_capacity()
            )));
        }

        let mut rows = Array2::zeros((slots, f));
        let mut semantic = vec![false; slots];
        rows.row_mut(0)
            .assign(&self.embedding_from_seed(Self::token_seed(TAG_START, "")));
        let mut slot = 1;
        for (text, k) in pieces {
            for sub in Self::sub_token_texts(text, *k) {
                rows.row_mut(slot)
                    .assign(&self.embedding_from_seed(Self::token_seed(TAG_TOKEN, &sub)));
                semantic[slot] = true;
                slot += 1;
            }
        }
        let end = self.embedding_from_seed(Self::token_seed(TAG_END, ""));
        for s in slot..slots {
            rows.row_mut(s).assign(&end);
        }
        TokenEmbedding::new(rows, semantic)
    }

    /// Sub-token count for a prompt word: the vocabulary's declaration if
    /// the word is a concept-word, otherwise 1 (filler words are single
    /// tokens by definition).
    fn word_width(&self, word: &str) -> usize {
        self.vocab.sub_tokens_of(word).unwrap_or(1)
    }

    /// Encode a prompt (word list) into the slot layout.
    pub fn encode_text(&self, words: &[String]) -> Result<TokenEmbedding> {
        let pieces: Vec<(&str, usize)> = words
            .iter()
            .map(|w| (w.as_str(), self.word_width(w)))
            .collect();
        self.encode_pieces(&pieces)
    }

    /// Slot spans the prompt's words occupy after encoding — the geometry
    /// steering transforms need to aim at a word.
    pub fn token_spans(&self, words: &[String]) -> Result<Vec<TokenSpan>> {
        // Validate the prompt fits by encoding it (cheap at toy scale).
        self.encode_text(words)?;
        let mut spans = Vec::with_capacity(words.len());
        let mut slot = 1;
        for word in words {
            let width = self.word_width(word);
            spans.push(TokenSpan::new(slot..slot + width, word.clone())?);
            slot += width;
        }
        Ok(spans)
    }

    /// The span of the first occurrence of `word` in the prompt.
    pub fn span_of(&self, words: &[String], word: &str) -> Result<TokenSpan> {
        self.token_spans(words)?
            .into_iter()
            .find(|span| span.label == word)
            .ok_or_else(|| {
                HrvError::Precondition(format!("word {word:?} does not occur in the prompt"))
            })
    }

    // ── planting ─────────────────────────────────────────────────────

    /// Fixed unit direction every initial latent row leans toward. Real
    /// latents share global statistics; giving the toy's spatial rows a
    /// common mean is what makes a head's queries have a *typical*
    /// direction at all — the hook planting needs to be visible above
    /// chance (see [`ToyEngine::plant`]).
    fn latent_mean(&self) -> Array1<f64> {
        self.embedding_from_seed(Self::token_seed(TAG_MEAN, ""))
    }

    /// Where this head's queries point on average: the unit image of the
    /// latent mean under the head's query projection.
    fn mean_query_direction(&self, flat_head: usize) -> Array1<f64> {
        let m = self.latent_mean().dot(&self.params[flat_head].w_q);
        let norm = m.dot(&m).sqrt();
        m / norm
    }

    /// Unit direction of a concept: the normalized mean of all its words'
    /// sub-token embeddings.
    pub fn concept_direction(&self, concept: &str) -> Result<Array1<f64>> {
        let index = self.vocab.require(concept)?;
        let f = self.config.feature_dim;
        let mut mean = Array1::zeros(f);
        let mut count = 0usize;
        for word in &self.vocab.entry(index).words {
            for sub in Self::sub_token_texts(&word.text, word.sub_tokens) {
                mean += &self.embedding_from_seed(Self::token_seed(TAG_TOKEN, &sub));
                count += 1;
            }
        }
        mean /= count as f64;
        let norm = mean.dot(&mean).sqrt();
        if norm == 0.0 {
            return Err(HrvError::Precondition(format!(
                "concept {concept:?} has a zero mean embedding"
            )));
        }
        Ok(mean / norm)
    }

    /// Specialize each assigned head in its concept by biasing the head's
    /// key projection: `W_K += gain · u m̂ᵀ`, where `u` is the concept
    /// direction and `m̂` the head's mean query direction. Tokens aligned
    /// with the concept then produce keys pointing where the head's
    /// queries typically point, so the head reliably routes attention to
    /// that concept — a sign-consistent logit boost, not one that washes
    /// out over random queries. A gain of 0 records the assignment but
    /// leaves every projection bit-for-bit unchanged.
    pub fn plant(&mut self, spec: &PlantSpec) -> Result<()> {
        // Validate every assignment before touching anything.
        let mut staged = Vec::with_capacity(spec.assignments.len());
        for assignment in &spec.assignments {
            let flat = self.flat_index(assignment.head)?;
            self.vocab.require(&assignment.concept)?;
            if self.planted[flat].is_some() || staged.iter().any(|(f, _, _)| *f == flat) {
                return Err(HrvError::Precondition(format!(
                    "head {} planted twice; one concept per head",
                    assignment.head
                )));
            }
            let direction = self.concept_direction(&assignment.concept)?;
            staged.push((flat, direction, assignment));
        }
        for (flat, u, assignment) in staged {
            let f = self.config.feature_dim;
            if assignment.gain != 0.0 {
                let m = self.mean_query_direction(flat);
                let outer = Array2::from_shape_fn((f, f), |(i, j)| u[i] * m[j]);
                self.params[flat].w_k = &self.params[flat].w_k + &(outer * assignment.gain);
            }
            self.planted[flat] = Some(self.vocab.require(&assignment.concept)?);
        }
        Ok(())
    }

    /// Flat indices of the heads planted for `concept`.
    pub fn planted_heads(&self, concept: &str) -> Result<Vec<usize>> {
        let index = self.vocab.require(concept)?;
        Ok(self
            .planted
            .iter()
            .enumerate()
            .filter_map(|(flat, &p)| (p == Some(index)).then_some(flat))
            .collect())
    }

    // ── scoring ──────────────────────────────────────────────────────

    /// Concept energy of a finished run: mean over spatial positions of
    /// the final latent's inner product with the concept direction. The
    /// more attention mass the generation routed from the concept's
    /// tokens into the latent, the higher this is.
    pub fn score_planted(&self, run: &GenerationRun, concept: &str) -> Result<f64> {
        let direction = self.concept_direction(concept)?;
        let latent = run.final_latent();
        if latent.ncols() != direction.len() {
            return Err(HrvError::Shape(format!(
                "final latent is {} wide, engine features are {}",
                latent.ncols(),
                direction.len()
            )));
        }
        let rows = latent.nrows() as f64;
        Ok(latent.dot(&direction).sum() / rows)
    }

    // ── generation ───────────────────────────────────────────────────

    /// Weight of the shared mean inside initial latent rows, relative to
    /// unit noise. Large enough that a planted head's logit boost is
    /// sign-consistent across queries; small enough that unplanted heads
    /// don't saturate on whichever concept their fixed geometry happens
    /// to favor.
    const LATENT_MEAN_WEIGHT: f64 = 0.3;

    /// Initial latent: each spatial row is the unit sum of the weighted
    /// shared mean direction and a fresh unit noise vector, so rows are
    /// diverse but queries derived from them have a typical direction
    /// per head.
    fn initial_latent(&self, seed: u64) -> Array2<f64> {
        let spatial = self.config.spatial_side * self.config.spatial_side;
        let f = self.config.feature_dim;
        let mean = self.latent_mean() * Self::LATENT_MEAN_WEIGHT;
        let mut stream =
            DrawStream::new(derive_seed(self.config.master_seed, streams::LATENT, seed));
        let mut z = Array2::zeros((spatial, f));
        for mut row in z.rows_mut() {
            let mut noise = Array1::from_shape_fn(f, |_| stream.next_normal());
            let norm = noise.dot(&noise).sqrt();
            if norm > 0.0 {
                noise /= norm;
            }
            let mut v = &mean + &noise;
            let norm = v.dot(&v).sqrt();
            if norm > 0.0 {
                v /= norm;
            }
            row.assign(&v);
        }
        z
    }

    /// Run one generation with optional per-(t, head) map transform and
    /// query capture. See the adapter trait for the hook contract.
    fn run_generation(
        &self,
        prompt: &[String],
        seed: u64,
        mut transform: Option<&mut MapTransform>,
        capture: bool,
    ) -> Result<GenerationRun> {
        if prompt.is_empty() {
            return Err(HrvError::Precondition(
                "cannot generate from an empty prompt".into(),
            ));
        }
        let embeddings = self.encode_text(prompt)?;
        let slots = self.config.token_slots;
        let spatial = self.config.spatial_side * self.config.spatial_side;
        let eta = self.config.step_size;
        let head_count = self.heads.len();

        // Text-side projections are timestep-independent.
        let keys: Vec<Array2<f64>> = self
            .params
            .iter()
            .map(|p| embeddings.rows.dot(&p.w_k))
            .collect();
        let values: Vec<Array2<f64>> = self
            .params
            .iter()
            .map(|p| embeddings.rows.dot(&p.w_v))
            .collect();

        let mut z = self.initial_latent(seed);
        let mut trajectory = Vec::with_capacity(self.config.timesteps + 1);
        trajectory.push(z.clone());
        let mut captured: Vec<Vec<Array2<f64>>> = Vec::new();

        for t in 0..self.config.timesteps {
            let mut capture_row = Vec::with_capacity(if capture { head_count } else { 0 });
            let mut acc: Array2<f64> = Array2::zeros((spatial, self.config.feature_dim));
            for (flat, params) in self.params.iter().enumerate() {
                let desc = &self.heads[flat];
                let q = z.dot(&params.w_q);
                if capture {
                    capture_row.push(q.clone());
                }
                let map = softmax_ca_map(&q, &keys[flat], desc.proj_dim)?;
                let map = match transform.as_mut() {
                    Some(hook) => {
                        let out = hook(desc.id, t, &map);
                        if out.rows() != spatial || out.cols() != slots {
                            return Err(HrvError::Hook {
                                timestep: t,
                                head: desc.id,
                                detail: format!(
                                    "transform returned a {}×{} map, expected {spatial}×{slots}",
                                    out.rows(),
                                    out.cols()
                                ),
                            });
                        }
                        out
                    }
                    None => map,
                };
                acc += &map.values().dot(&values[flat]).dot(&params.w_o);
            }
            z = z + acc * (eta / head_count as f64);
            trajectory.push(z.clone());
            if capture {
                captured.push(capture_row);
            }
        }

        let captures = if capture {
            Some(CaptureSet::new(captured)?)
        } else {
            None
        };
        Ok(GenerationRun {
            engine: "toy".into(),
            prompt: prompt.to_vec(),
            seed,
            timesteps: self.config.timesteps,
            trajectory,
            captures,
        })
    }

    /// Generation with per-timestep latent guidance against the neglect
    /// loss: before each attention step, take one gradient-descent step on
    /// the latent, with the gradient estimated by central finite
    /// differences (step `fd_step`, conventionally 1e-3) of the loss over
    /// the rescaled target spans.
    pub fn generate_guided(
        &self,
        prompt: &[String],
        seed: u64,
        target_spans: &[TokenSpan],
        r: &RescalingVector,
        fd_step: f64,
        guidance_rate: f64,
    ) -> Result<GenerationRun> {
        if prompt.is_empty() {
            return Err(HrvError::Precondition(
                "cannot generate from an empty prompt".into(),
            ));
        }
        if fd_step <= 0.0 {
            return Err(HrvError::Precondition(format!(
                "finite-difference step must be positive, got {fd_step}"
            )));
        }
        if r.len() != self.heads.len() {
            return Err(HrvError::Shape(format!(
                "rescaling vector has {} entries for {} heads",
                r.len(),
                self.heads.len()
            )));
        }
        let embeddings = self.encode_text(prompt)?;
        for span in target_spans {
            if span.range.end > self.config.token_slots {
                return Err(HrvError::Precondition(format!(
                    "target span {:?} exceeds {} token slots",
                    span.range, self.config.token_slots
                )));
            }
        }
        let keys: Vec<Array2<f64>> = self
            .params
            .iter()
            .map(|p| embeddings.rows.dot(&p.w_k))
            .collect();
        let values: Vec<Array2<f64>> = self
            .params
            .iter()
            .map(|p| embeddings.rows.dot(&p.w_v))
            .collect();
        let spatial = self.config.spatial_side * self.config.spatial_side;
        let eta = self.config.step_size;
        let head_count = self.heads.len();

        let loss_of = |z: &Array2<f64>| -> Result<f64> {
            let maps: Result<Vec<_>> = self
                .params
                .iter()
                .enumerate()
                .map(|(flat, p)| {
                    softmax_ca_map(&z.dot(&p.w_q), &keys[flat], self.heads[flat].proj_dim)
                })
                .collect();
            Ok(ae_hrv_loss(&maps?, target_spans, r)?.0)
        };

        let mut z = self.initial_latent(seed);
        let mut trajectory = Vec::with_capacity(self.config.timesteps + 1);
        trajectory.push(z.clone());
        for _ in 0..self.config.timesteps {
            // Guidance: z ← z − rate · ∇loss, central differences.
            let mut gradient = Array2::zeros(z.raw_dim());
            for idx in 0..z.len() {
                let (i, j) = (idx / z.ncols(), idx % z.ncols());
                let original = z[[i, j]];
                z[[i, j]] = original + fd_step;
                let plus = loss_of(&z)?;
                z[[i, j]] = original - fd_step;
                let minus = loss_of(&z)?;
                z[[i, j]] = original;
                gradient[[i, j]] = (plus - minus) / (2.0 * fd_step);
            }
            z = z - gradient * guidance_rate;

            // Attention step, identical to the plain generation path.
            let mut acc: Array2<f64> = Array2::zeros((spatial, self.config.feature_dim));
            for (flat, params) in self.params.iter().enumerate() {
                let q = z.dot(&params.w_q);
                let map = softmax_ca_map(&q, &keys[flat], self.heads[flat].proj_dim)?;
                acc += &map.values().dot(&values[flat]).dot(&params.w_o);
            }
            z = z + acc * (eta / head_count as f64);
            trajectory.push(z.clone());
        }
        Ok(GenerationRun {
            engine: "toy".into(),
            prompt: prompt.to_vec(),
            seed,
            timesteps: self.config.timesteps,
            trajectory,
            captures: None,
        })
    }

    /// Run a two-prompt edit: generate the source prompt, then generate
    /// the target prompt with each head's map assembled from both runs —
    /// the edited token keeps the target's own attention, every other
    /// column takes the source's layout scaled by that head's relevance,
    /// and past timestep `tau_c` the target runs free.
    ///
    /// `sa_rate` carries the source's *structure* across: during the
    /// first `round(sa_rate · T)` timesteps the edited run computes its
    /// queries from the source's latent at the same timestep instead of
    /// its own, while values and updates stay on its own latent. Both
    /// runs share `seed`, so they start from the same latent.
    #[allow(clippy::too_many_arguments)]
    pub fn run_edit(
        &self,
        source_prompt: &[String],
        target_prompt: &[String],
        edited: &TokenSpan,
        r: &RescalingVector,
        tau_c: usize,
        sa_rate: f64,
        seed: u64,
    ) -> Result<EditRun> {
        if !(0.0..=1.0).contains(&sa_rate) {
            return Err(HrvError::Precondition(format!(
                "structure-transfer rate must lie in [0, 1], got {sa_rate}"
            )));
        }
        if r.len() != self.heads.len() {
            return Err(HrvError::Shape(format!(
                "rescaling vector has {} entries for {} heads",
                r.len(),
                self.heads.len()
            )));
        }
        let slots = self.config.token_slots;
        if edited.range.end > slots {
            return Err(HrvError::Precondition(format!(
                "edited span {:?} exceeds {slots} token slots",
                edited.range
            )));
        }

        // Source pass, recording every (t, head) map in emission order.
        let head_count = self.heads.len();
        let mut source_maps: Vec<CaMap> = Vec::with_capacity(self.config.timesteps * head_count);
        let source = {
            let mut recorder = |_id: HeadId, _t: usize, map: &CaMap| {
                source_maps.push(map.clone());
                map.clone()
            };
            self.run_generation(source_prompt, seed, Some(&mut recorder), false)?
        };

        // Plain target pass, for reference against the edited one.
        let target = self.run_generation(target_prompt, seed, None, false)?;

        // Edited pass: target text, composed maps, optional source queries.
        let embeddings = self.encode_text(target_prompt)?;
        let keys: Vec<Array2<f64>> = self
            .params
            .iter()
            .map(|p| embeddings.rows.dot(&p.w_k))
            .collect();
        let values: Vec<Array2<f64>> = self
            .params
            .iter()
            .map(|p| embeddings.rows.dot(&p.w_v))
            .collect();
        let spatial = self.config.spatial_side * self.config.spatial_side;
        let eta = self.config.step_size;
        let alignment = Alignment::positional(slots, slots)?;
        let structure_steps = (sa_rate * self.config.timesteps as f64).round() as usize;

        let mut z = self.initial_latent(seed);
        let mut trajectory = Vec::with_capacity(self.config.timesteps + 1);
        trajectory.push(z.clone());
        for t in 0..self.config.timesteps {
            let query_latent = if t < structure_steps {
                &source.trajectory[t]
            } else {
                &z
            };
            let mut acc: Array2<f64> = Array2::zeros((spatial, self.config.feature_dim));
            for (flat, params) in self.params.iter().enumerate() {
                let q = query_latent.dot(&params.w_q);
                let m_tgt = softmax_ca_map(&q, &keys[flat], self.heads[flat].proj_dim)?;
                let m_src = &source_maps[t * head_count + flat];
                let map = p2p_hrv_maps(m_src, &m_tgt, t, tau_c, edited, &alignment, r.get(flat))?;
                acc += &map.values().dot(&values[flat]).dot(&params.w_o);
            }
            z = z + acc * (eta / head_count as f64);
            trajectory.push(z.clone());
        }

        let edited_run = GenerationRun {
            engine: "toy".into(),
            prompt: target_prompt.to_vec(),
            seed,
            timesteps: self.config.timesteps,
            trajectory,
            captures: None,
        };
        Ok(EditRun {
            source,
            target,
            edited: edited_run,
        })
    }

    // ── prompt sampling ──────────────────────────────────────────────

    /// Filler words for sampled prompts: never part of any vocabulary, so
    /// they encode as single unknown tokens.
    pub const FILLERS: [&'static str; 6] = ["a", "the", "of", "photo", "with", "on"];

    /// Seeded random prompts mixing vocabulary concept-words and fillers,
    /// each fitting the engine's semantic capacity.
    pub fn sample_prompts(&self, count: usize, seed: u64) -> Vec<Vec<String>> {
        let mut stream =
            DrawStream::new(derive_seed(self.config.master_seed, streams::PROMPTS, seed));
        let capacity = self.config.semantic_capacity();
        (0..count)
            .map(|_| {
                let target = 3 + stream.next_index(capacity.saturating_sub(2).max(1));
                let target = target.min(capacity);
                let mut words = Vec::new();
                let mut used = 0usize;
                while used < target {
                    let budget = target - used;
                    // Half fillers, half vocabulary words that still fit.
                    let pick_vocab = stream.next_index(2) == 0;
                    let word = if pick_vocab {
                        let c = stream.next_index(self.vocab.len());
                        let entry = self.vocab.entry(c);
                        let w = stream.next_index(entry.words.len());
                        let word = &entry.words[w];
                        if word.sub_tokens <= budget {
                            Some(word.text.clone())
                        } else {
                            None
                        }
                    } else {
                        None
                    };
                    let word = word.unwrap_or_else(|| {
                        Self::FILLERS[stream.next_index(Self::FILLERS.len())].to_string()
                    });
                    used += self.word_width(&word);
                    words.push(word);
                }
                words
            })
            .collect()
    }

    /// Seeded prompts guaranteed to contain one word of `concept`
    /// (uniformly chosen), padded with fillers around it.
    pub fn concept_prompts(
        &self,
        concept: &str,
        count: usize,
        seed: u64,
    ) -> Result<Vec<Vec<String>>> {
        let index = self.vocab.require(concept)?;
        let mut stream = DrawStream::new(derive_seed(
            self.config.master_seed,
            streams::PROMPTS,
            seed ^ 0x636f, /* distinct stream from sample_prompts */
        ));
        let capacity = self.config.semantic_capacity();
        let entry = self.vocab.entry(index);
        Ok((0..count)
            .map(|_| {
                let fitting: Vec<&ConceptWord> = entry
                    .words
                    .iter()
                    .filter(|w| w.sub_tokens <= capacity)
                    .collect();
                // A vocabulary whose every word overflows the engine would
                // already have failed key-bank construction; pick among
                // the fitting ones.
                let word = fitting[stream.next_index(fitting.len())];
                let slack = capacity - word.sub_tokens;
                let filler_count = if slack == 0 {
                    0
                } else {
                    stream.next_index(slack + 1)
                };
                let position = stream.next_index(filler_count + 1);
                let mut words = Vec::with_capacity(filler_count + 1);
                for i in 0..=filler_count {
                    if i == position {
                        words.push(word.text.clone());
                    }
                    if i < filler_count {
                        words.push(
                            Self::FILLERS[stream.next_index(Self::FILLERS.len())].to_string(),
                        );
                    }
                }
                words
            })
            .collect())
    }
}

impl AttentionAdapter for ToyEngine {
    fn enumerate_heads(&self) -> Vec<HeadDesc> {
        self.heads.clone()
    }

    fn encode_word(&self, word: &ConceptWord) -> Result<TokenEmbedding> {
        self.encode_pieces(&[(word.text.as_str(), word.sub_tokens)])
    }

    fn project_keys(&self, flat_head: usize, tokens: &TokenEmbedding) -> Result<Array2<f64>> {
        let params = self.params.get(flat_head).ok_or_else(|| {
            HrvError::Precondition(format!(
                "flat head {flat_head} out of range; engine has {} heads",
                self.params.len()
            ))
        })?;
        Ok(tokens.rows.dot(&params.w_k))
    }

    fn generate_with_hooks(
        &self,
        prompt: &[String],
        seed: u64,
        transform: Option<&mut MapTransform>,
        capture: bool,
    ) -> Result<GenerationRun> {
        self.run_generation(prompt, seed, transform, capture)
    }
}
