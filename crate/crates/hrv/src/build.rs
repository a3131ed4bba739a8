//! The HRV build driver: run generations, replay their captured queries
//! against sampled candidate keys, and accumulate argmax counts into a
//! head relevance matrix.
//!
//! Two entry points produce identical results: [`build_online`] drives an
//! engine directly, while [`rebuild_from_traces`] replays trace files
//! emitted by an earlier online build. Byte-for-byte agreement between
//! the two is part of the determinism contract and is enforced by the
//! acceptance suite.

use crate::accumulate::{select_concept, RawHrvTensor};
use crate::adapter::{AttentionAdapter, CaptureSet, GenerationRun};
use crate::attention::softmax_ca_map;
use crate::error::{HrvError, Result};
use crate::keys::{assemble_candidate_keys, KeyBank};
use crate::relevance::{normalize_hrv, HrvMatrix};
use crate::rng::{derive_seed, streams, DrawStream, Fnv1a};
use crate::trace::TraceFile;

/// Everything a finished build produces. `matrix` is the normalized HRV;
/// `raw` keeps the per-timestep counts for timestep-resolved analysis and
/// for exact merging with other builds.
#[derive(Debug, Clone, PartialEq)]
pub struct BuildResult {
    pub raw: RawHrvTensor,
    pub matrix: HrvMatrix,
    /// Concepts that were never selected anywhere (rows left at zero).
    pub zero_rows: Vec<usize>,
    pub runs: usize,
    pub engine: String,
    /// Digest of the ordered per-run (generation seed, sampler seed)
    /// pairs. The same runs replayed from traces yield the same value, so
    /// it can stand in for a master seed in output provenance.
    pub seed_fingerprint: u64,
    pub vocab_fingerprint: u64,
}

impl BuildResult {
    /// One-line provenance comment embedded in serialized outputs.
    pub fn provenance(&self) -> String {
        format!(
            "engine={} runs={} seed-fingerprint={:016x} vocab-fingerprint={:016x}",
            self.engine, self.runs, self.seed_fingerprint, self.vocab_fingerprint
        )
    }
}

/// Callback invoked once per accepted generation during an online build:
/// `(prompt index, run, sampler seed)`. The usual job is writing a trace
/// file; errors abort the build.
pub type OnRun<'a> = dyn FnMut(usize, &GenerationRun, u64) -> Result<()> + 'a;

fn seed_digest(pairs: &[(u64, u64)]) -> u64 {
    let mut hash = Fnv1a::new();
    hash.update(&(pairs.len() as u64).to_le_bytes());
    for (generation, sampler) in pairs {
        hash.update(&generation.to_le_bytes());
        hash.update(&sampler.to_le_bytes());
    }
    hash.finish()
}

/// Replay one generation's captured queries and record one argmax per
/// (timestep, head) into `raw`. The sampler must be freshly seeded with
/// the run's sampler seed; candidate assembly consumes it in (t, head)
/// iteration order, which is part of the format contract with traces.
pub fn accumulate_generation(
    raw: &mut RawHrvTensor,
    captures: &CaptureSet,
    bank: &KeyBank,
    sampler: &mut DrawStream,
) -> Result<()> {
    if captures.timesteps() != raw.timesteps() {
        return Err(HrvError::Shape(format!(
            "captures cover {} timesteps, tensor expects {}",
            captures.timesteps(),
            raw.timesteps()
        )));
    }
    if captures.head_count() != raw.heads() || bank.head_count() != raw.heads() {
        return Err(HrvError::Shape(format!(
            "head counts disagree: captures {}, bank {}, tensor {}",
            captures.head_count(),
            bank.head_count(),
            raw.heads()
        )));
    }
    if bank.vocab().len() != raw.concepts() {
        return Err(HrvError::Shape(format!(
            "bank knows {} concepts, tensor expects {}",
            bank.vocab().len(),
            raw.concepts()
        )));
    }
    for t in 0..raw.timesteps() {
        for flat in 0..raw.heads() {
            let candidates = assemble_candidate_keys(bank, flat, sampler)?;
            let query = captures.query(t, flat);
            let map = softmax_ca_map(query, candidates.matrix(), bank.heads()[flat].proj_dim)?;
            let winner = select_concept(&map, candidates.segments())?;
            raw.record(winner, t, flat)?;
        }
    }
    raw.complete_sweep();
    Ok(())
}

/// Per-run seeds: a build over P prompts derives independent generation
/// and sampler seeds from the master seed and the prompt's index, so any
/// contiguous shard of the prompt list can be built separately and merged
/// without changing a single count.
pub fn run_seeds(master_seed: u64, prompt_index: u64) -> (u64, u64) {
    (
        derive_seed(master_seed, streams::GENERATION, prompt_index),
        derive_seed(master_seed, streams::SAMPLER, prompt_index),
    )
}

/// Counts, the per-run seed pairs consumed, and the adapter's engine name.
type SliceAccumulation = (RawHrvTensor, Vec<(u64, u64)>, String);

fn accumulate_prompt_slice(
    adapter: &dyn AttentionAdapter,
    bank: &KeyBank,
    prompts: &[Vec<String>],
    master_seed: u64,
    first_index: u64,
    mut on_run: Option<&mut OnRun<'_>>,
) -> Result<SliceAccumulation> {
    if prompts.is_empty() {
        return Err(HrvError::Precondition(
            "need at least one prompt to build".into(),
        ));
    }
    let mut raw: Option<RawHrvTensor> = None;
    let mut engine = String::new();
    let mut seeds = Vec::with_capacity(prompts.len());
    for (offset, prompt) in prompts.iter().enumerate() {
        let index = first_index + offset as u64;
        let (gen_seed, sampler_seed) = run_seeds(master_seed, index);
        let run = adapter.generate_with_hooks(prompt, gen_seed, None, true)?;
        let captures = run.captures.as_ref().ok_or_else(|| {
            HrvError::Precondition("adapter returned a run without captures".into())
        })?;
        let raw = raw.get_or_insert_with(|| {
            engine = run.engine.clone();
            RawHrvTensor::new(bank.vocab().len(), run.timesteps, bank.head_count())
        });
        let mut sampler = DrawStream::new(sampler_seed);
        accumulate_generation(raw, captures, bank, &mut sampler)?;
        seeds.push((gen_seed, sampler_seed));
        if let Some(hook) = on_run.as_mut() {
            hook(index as usize, &run, sampler_seed)?;
        }
    }
    Ok((raw.expect("at least one prompt"), seeds, engine))
}

/// Build the raw count tensor for a contiguous shard of a prompt list
/// whose global indices start at `first_index`. Sharding exists so large
/// builds can be split and [`RawHrvTensor::merge`]d back exactly.
pub fn build_shard(
    adapter: &dyn AttentionAdapter,
    bank: &KeyBank,
    prompts: &[Vec<String>],
    master_seed: u64,
    first_index: u64,
) -> Result<RawHrvTensor> {
    let (raw, _, _) =
        accumulate_prompt_slice(adapter, bank, prompts, master_seed, first_index, None)?;
    Ok(raw)
}

fn finish(
    raw: RawHrvTensor,
    bank_vocab_names: Vec<String>,
    vocab_fingerprint: u64,
    seeds: &[(u64, u64)],
    engine: String,
) -> Result<BuildResult> {
    raw.verify_complete()?;
    let outcome = normalize_hrv(&raw, &bank_vocab_names)?;
    Ok(BuildResult {
        raw,
        matrix: outcome.matrix,
        zero_rows: outcome.zero_rows,
        runs: seeds.len(),
        engine,
        seed_fingerprint: seed_digest(seeds),
        vocab_fingerprint,
    })
}

fn vocab_names(bank: &KeyBank) -> Vec<String> {
    bank.vocab()
        .entries()
        .iter()
        .map(|e| e.name.clone())
        .collect()
}

/// Drive the engine over every prompt and build the HRV. Per-prompt seeds
/// come from [`run_seeds`], so the result is a pure function of
/// `(engine, bank, prompts, master_seed)`.
pub fn build_online(
    adapter: &dyn AttentionAdapter,
    bank: &KeyBank,
    prompts: &[Vec<String>],
    master_seed: u64,
    on_run: Option<&mut OnRun<'_>>,
) -> Result<BuildResult> {
    let (raw, seeds, engine) =
        accumulate_prompt_slice(adapter, bank, prompts, master_seed, 0, on_run)?;
    finish(
        raw,
        vocab_names(bank),
        bank.vocab().fingerprint(),
        &seeds,
        engine,
    )
}

/// Rebuild the HRV from previously written trace files, in the order
/// given. The traces must all come from the same build: same engine, same
/// head layout, same vocabulary, and bit-identical key banks.
pub fn rebuild_from_traces(traces: &[TraceFile]) -> Result<BuildResult> {
    let first = traces
        .first()
        .ok_or_else(|| HrvError::Precondition("need at least one trace to rebuild".into()))?;
    for (i, trace) in traces.iter().enumerate().skip(1) {
        if trace.engine != first.engine {
            return Err(HrvError::Precondition(format!(
                "trace {i} came from engine {:?}, trace 0 from {:?}",
                trace.engine, first.engine
            )));
        }
        if trace.timesteps != first.timesteps {
            return Err(HrvError::Precondition(format!(
                "trace {i} has {} timesteps, trace 0 has {}",
                trace.timesteps, first.timesteps
            )));
        }
        if trace.bank != first.bank {
            return Err(HrvError::Precondition(format!(
                "trace {i} carries a different key bank than trace 0"
            )));
        }
    }
    let bank = &first.bank;
    let mut raw = RawHrvTensor::new(bank.vocab().len(), first.timesteps, bank.head_count());
    let mut seeds = Vec::with_capacity(traces.len());
    for trace in traces {
        let mut sampler = DrawStream::new(trace.sampler_seed);
        accumulate_generation(&mut raw, &trace.captures, bank, &mut sampler)?;
        seeds.push((trace.seed, trace.sampler_seed));
    }
    finish(
        raw,
        vocab_names(bank),
        bank.vocab().fingerprint(),
        &seeds,
        first.engine.clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::HeadId;
    use crate::relevance::Direction;
    use crate::toy::{PlantSpec, ToyConfig, ToyEngine};
    use crate::trace::{read_trace, write_trace};
    use crate::vocab::{ConceptEntry, ConceptVocabulary, ConceptWord};

    fn vocab() -> ConceptVocabulary {
        ConceptVocabulary::new(vec![
            ConceptEntry {
                name: "Color".into(),
                words: vec![ConceptWord::single("white"), ConceptWord::single("red")],
            },
            ConceptEntry {
                name: "Plants".into(),
                words: vec![ConceptWord::new("oak tree", 2), ConceptWord::single("fern")],
            },
            ConceptEntry {
                name: "Sky".into(),
                words: vec![ConceptWord::single("cloud")],
            },
        ])
        .unwrap()
    }

    fn engine(master_seed: u64) -> ToyEngine {
        let config = ToyConfig {
            master_seed,
            ..ToyConfig::default()
        };
        ToyEngine::new(config, vocab()).unwrap()
    }

    fn bank_for(engine: &ToyEngine) -> KeyBank {
        KeyBank::build(engine.vocab(), engine).unwrap()
    }

    #[test]
    fn every_sweep_records_exactly_t_times_h_counts() {
        let engine = engine(3);
        let bank = bank_for(&engine);
        let prompts = engine.sample_prompts(6, 1);
        let result = build_online(&engine, &bank, &prompts, 3, None).unwrap();
        assert_eq!(result.runs, 6);
        assert_eq!(result.raw.sweeps(), 6);
        let total: u64 = result.raw.concept_head_totals().iter().flatten().sum();
        assert_eq!(total, 6 * 5 * 12, "one count per (prompt, t, head)");
        // Non-zero HRV rows carry mass H.
        for n in 0..result.matrix.concept_count() {
            let mass: f64 = (0..result.matrix.head_count())
                .map(|h| result.matrix.value(n, h))
                .sum();
            assert!(
                mass == 0.0 || (mass - 12.0).abs() < 1e-9,
                "row {n} mass {mass}"
            );
        }
    }

    #[test]
    fn identical_inputs_build_identical_results() {
        let engine = engine(5);
        let bank = bank_for(&engine);
        let prompts = engine.sample_prompts(4, 9);
        let a = build_online(&engine, &bank, &prompts, 5, None).unwrap();
        let b = build_online(&engine, &bank, &prompts, 5, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            a.matrix.to_hrv1(Some(&a.provenance())),
            b.matrix.to_hrv1(Some(&b.provenance()))
        );
        // A different master seed moves at least the fingerprint.
        let c = build_online(&engine, &bank, &prompts, 6, None).unwrap();
        assert_ne!(a.seed_fingerprint, c.seed_fingerprint);
    }

    #[test]
    fn sharded_builds_merge_to_the_full_build_exactly() {
        let engine = engine(7);
        let bank = bank_for(&engine);
        let prompts = engine.sample_prompts(7, 2);
        let full = build_online(&engine, &bank, &prompts, 7, None).unwrap();

        let s0 = build_shard(&engine, &bank, &prompts[0..2], 7, 0).unwrap();
        let s1 = build_shard(&engine, &bank, &prompts[2..5], 7, 2).unwrap();
        let s2 = build_shard(&engine, &bank, &prompts[5..7], 7, 5).unwrap();
        let merged = s0.merge(&s1).unwrap().merge(&s2).unwrap();
        assert_eq!(merged, full.raw);
    }

    #[test]
    fn traces_rebuild_the_online_result_byte_for_byte() {
        let engine = engine(11);
        let bank = bank_for(&engine);
        let prompts = engine.sample_prompts(3, 4);
        let mut trace_texts: Vec<String> = Vec::new();
        let mut on_run = |_: usize, run: &GenerationRun, sampler_seed: u64| -> Result<()> {
            trace_texts.push(write_trace(run, &bank, sampler_seed)?);
            Ok(())
        };
        let online = build_online(&engine, &bank, &prompts, 11, Some(&mut on_run)).unwrap();
        assert_eq!(trace_texts.len(), 3);

        let traces: Vec<TraceFile> = trace_texts.iter().map(|t| read_trace(t).unwrap()).collect();
        let rebuilt = rebuild_from_traces(&traces).unwrap();
        assert_eq!(rebuilt.raw, online.raw);
        assert_eq!(rebuilt.seed_fingerprint, online.seed_fingerprint);
        assert_eq!(
            online.matrix.to_hrv1(Some(&online.provenance())),
            rebuilt.matrix.to_hrv1(Some(&rebuilt.provenance())),
            "online and trace-rebuilt serializations must match byte for byte"
        );
    }

    #[test]
    fn rebuild_rejects_traces_from_different_builds() {
        let engine_a = engine(13);
        let engine_b = engine(14); // different master seed ⇒ different bank
        let bank_a = bank_for(&engine_a);
        let bank_b = bank_for(&engine_b);
        let prompts = engine_a.sample_prompts(1, 1);

        let run_a = engine_a
            .generate_with_hooks(&prompts[0], 1, None, true)
            .unwrap();
        let run_b = engine_b
            .generate_with_hooks(&prompts[0], 1, None, true)
            .unwrap();
        let trace_a = read_trace(&write_trace(&run_a, &bank_a, 10).unwrap()).unwrap();
        let trace_b = read_trace(&write_trace(&run_b, &bank_b, 11).unwrap()).unwrap();
        match rebuild_from_traces(&[trace_a, trace_b]) {
            Err(HrvError::Precondition(msg)) => {
                assert!(msg.contains("key bank"), "message was {msg:?}")
            }
            other => panic!("expected Precondition, got {other:?}"),
        }
        assert!(rebuild_from_traces(&[]).is_err());
    }

    #[test]
    fn empty_prompt_list_is_refused() {
        let engine = engine(17);
        let bank = bank_for(&engine);
        assert!(matches!(
            build_online(&engine, &bank, &[], 17, None),
            Err(HrvError::Precondition(_))
        ));
    }

    #[test]
    fn planted_heads_rise_to_the_top_of_their_concepts_ordering() {
        let mut engine = engine(19);
        let planted_heads = [(HeadId::new(0, 2), "Sky"), (HeadId::new(2, 1), "Sky")];
        engine
            .plant(&PlantSpec::uniform(&planted_heads, PlantSpec::DEFAULT_GAIN))
            .unwrap();
        let bank = bank_for(&engine);
        let prompts = engine.sample_prompts(12, 3);
        let result = build_online(&engine, &bank, &prompts, 19, None).unwrap();

        let expected = engine.planted_heads("Sky").unwrap();
        assert_eq!(expected, vec![2, 9]);
        let sky = result.matrix.require("Sky").unwrap();
        let order = crate::relevance::head_order(&result.matrix, sky, Direction::Morhf).unwrap();
        let mut top: Vec<usize> = order[..2].to_vec();
        top.sort_unstable();
        assert_eq!(top, expected, "the two planted heads should rank first");
    }
}
