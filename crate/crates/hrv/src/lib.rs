//! Head relevance vectors for cross-attention diffusion pipelines.
//!
//! This crate measures which cross-attention heads a text-to-image
//! generator routes each concept through, and then uses that measurement:
//!
//! - **Build**: replay generations, and at every (timestep, head) ask the
//!   attention map which concept's tokens it attends to most. Counting
//!   those wins and normalizing yields one relevance vector per concept
//!   ([`HrvMatrix`]).
//! - **Analyze**: weaken heads in relevance order and watch concept
//!   expression fall off; compare against random orders; inspect
//!   per-timestep structure and cross-concept similarity.
//! - **Steer**: turn relevance rows into per-head rescaling factors that
//!   strengthen, suppress, or swap concepts during generation.
//!
//! Everything is deterministic: seeded draws, explicit head enumeration
//! order, and lossless hex-float serialization make runs reproducible to
//! the bit.

// Numeric loops here walk several parallel structures (count tensors,
// capture sets, seeded draw streams) per index; the index form keeps the
// iteration order visibly tied to the stream order it must match.
#![allow(clippy::needless_range_loop)]

pub mod accumulate;
pub mod adapter;
pub mod analysis;
pub mod attention;
pub mod build;
pub mod error;
pub mod heads;
pub mod hexfloat;
pub mod keys;
pub mod relevance;
pub mod rng;
pub mod steering;
pub mod tolerances;
pub mod toy;
pub mod trace;
pub mod vocab;

pub use accumulate::{read_raw_tensor, select_concept, write_raw_tensor, RawHrvTensor};
pub use adapter::{AttentionAdapter, CaptureSet, GenerationRun, MapTransform, TokenEmbedding};
pub use analysis::{
    area_between, cosine_matrix, default_ks, order_curve, random_order, scale_stats,
    scale_stats_from_traces, scale_stats_online, timestep_vectors, weakening_curve, CosineMatrix,
    HeadScale, TimestepVectors, WeakeningCurve,
};
pub use attention::{attention_logits, softmax_ca_map, CaMap};
pub use build::{
    accumulate_generation, build_online, build_shard, rebuild_from_traces, run_seeds, BuildResult,
    OnRun,
};
pub use error::{HrvError, Result};
pub use heads::{HeadDesc, HeadId};
pub use keys::{assemble_candidate_keys, CandidateKeys, KeyBank};
pub use relevance::{
    head_order, normalize_hrv, rescaling_vector, Direction, HrvMatrix, NormalizeOutcome,
    RescalingVector,
};
pub use rng::DrawStream;
pub use steering::{
    ae_hrv_loss, apply_ordered_weakening, apply_token_rescale, p2p_hrv_maps, Alignment, TokenSpan,
    WeakenPlan,
};
pub use toy::{EditRun, PlantAssignment, PlantSpec, ToyConfig, ToyEngine};
pub use trace::{read_trace, write_trace, TraceFile};
pub use vocab::{ConceptEntry, ConceptVocabulary, ConceptWord};
