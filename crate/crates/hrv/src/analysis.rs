//! Analysis over built relevance matrices: ordered-weakening curves, the
//! area between them, per-timestep views, row similarity, and logit-scale
//! audits.
//!
//! The weakening curve is the workhorse: weaken the first `k` heads of an
//! ordering during generation, score the outcome, and watch how fast the
//! score decays as `k` grows. Orderings that front-load the heads a
//! concept actually depends on (most-relevant-head-first) decay faster
//! than orderings that back-load them; the signed area between the two
//! curves quantifies how much faster, and random orderings give the
//! chance baseline.

use std::cell::RefCell;

use ndarray::Array2;
use rayon::prelude::*;

use crate::accumulate::RawHrvTensor;
use crate::adapter::{AttentionAdapter, CaptureSet, GenerationRun};
use crate::attention::attention_logits;
use crate::error::{HrvError, Result};
use crate::keys::{assemble_candidate_keys, KeyBank};
use crate::relevance::{head_order, Direction, HrvMatrix};
use crate::rng::{derive_seed, streams, DrawStream};
use crate::steering::{apply_ordered_weakening, WeakenPlan};
use crate::trace::TraceFile;

/// Scores of one weakening sweep: `scores[j]` is the mean score over all
/// prompts with the first `ks[j]` heads of the ordering weakened. The
/// `concept` names what the scorer measured; `direction` names the
/// ordering that was swept (`"morhf"`, `"lerhf"`, or a baseline label
/// such as `"random-1"`).
#[derive(Debug, Clone, PartialEq)]
pub struct WeakeningCurve {
    pub ks: Vec<usize>,
    pub scores: Vec<f64>,
    pub concept: String,
    pub direction: String,
}

/// The default weakening grid: up to 13 evenly spaced integers from 0 to
/// `head_count` inclusive (fewer when `head_count < 12` collapses
/// neighbors).
pub fn default_ks(head_count: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = (0..=12)
        .map(|i| ((i * head_count) as f64 / 12.0).round() as usize)
        .collect();
    ks.dedup();
    ks
}

/// A seeded random head ordering, the chance baseline an informed
/// ordering has to beat. Distinct `order_seed`s give independent
/// permutations under the same master seed.
pub fn random_order(head_count: usize, master_seed: u64, order_seed: u64) -> Vec<usize> {
    let mut stream = DrawStream::new(derive_seed(
        master_seed,
        streams::ORDER_BASELINE,
        order_seed,
    ));
    stream.permutation(head_count)
}

/// Sweep a concept's informed weakening curve: order the heads by the
/// concept's relevance row in `direction`, then for every `(prompt, k)`
/// pair generate with the first `k` heads of that ordering weakened by
/// `factor` and score the run.
///
/// Per-prompt generation seeds are derived exactly as the HRV build
/// derives them, so the mandatory `k = 0` column scores the same runs
/// the build saw (weakening zero heads is bit-for-bit the identity).
/// `masks[i]` flags the semantic token columns of prompt `i`'s encoding.
#[allow(clippy::too_many_arguments)]
pub fn weakening_curve<S>(
    adapter: &(dyn AttentionAdapter + Sync),
    prompts: &[Vec<String>],
    masks: &[Vec<bool>],
    master_seed: u64,
    hrv: &HrvMatrix,
    concept: &str,
    direction: Direction,
    factor: f64,
    ks: &[usize],
    scorer: S,
) -> Result<WeakeningCurve>
where
    S: Fn(usize, &GenerationRun) -> Result<f64> + Sync,
{
    let row = hrv.require(concept)?;
    let order = head_order(hrv, row, direction)?;
    order_curve(
        adapter,
        prompts,
        masks,
        master_seed,
        &order,
        concept,
        &direction.to_string(),
        factor,
        ks,
        scorer,
    )
}

/// Sweep the weakening grid along an explicit head ordering. This is the
/// general engine behind [`weakening_curve`]; random-baseline orderings
/// go through it directly, labeled so the resulting curve says where its
/// ordering came from.
///
/// Evaluations run in parallel; scores are reduced in ascending
/// `(k, prompt)` order, so the result — including which failure is
/// reported — is independent of scheduling. Failures are wrapped with
/// the `(prompt, k)` coordinates that produced them.
#[allow(clippy::too_many_arguments)]
pub fn order_curve<S>(
    adapter: &(dyn AttentionAdapter + Sync),
    prompts: &[Vec<String>],
    masks: &[Vec<bool>],
    master_seed: u64,
    order: &[usize],
    concept: &str,
    direction: &str,
    factor: f64,
    ks: &[usize],
    scorer: S,
) -> Result<WeakeningCurve>
where
    S: Fn(usize, &GenerationRun) -> Result<f64> + Sync,
{
    if prompts.is_empty() {
        return Err(HrvError::Precondition("need at least one prompt".into()));
    }
    if prompts.len() != masks.len() {
        return Err(HrvError::Shape(format!(
            "{} prompts but {} semantic masks",
            prompts.len(),
            masks.len()
        )));
    }
    let plan = WeakenPlan::new(order.to_vec(), 0, factor)?;
    let heads = adapter.enumerate_heads();
    if plan.head_count() != heads.len() {
        return Err(HrvError::Shape(format!(
            "ordering covers {} heads, adapter has {}",
            plan.head_count(),
            heads.len()
        )));
    }
    if ks.is_empty() {
        return Err(HrvError::Precondition(
            "need at least one weakening count".into(),
        ));
    }
    if ks[0] != 0 {
        return Err(HrvError::Precondition(
            "weakening grid must start at k = 0 (the unweakened column)".into(),
        ));
    }
    if !ks.windows(2).all(|w| w[0] < w[1]) {
        return Err(HrvError::Precondition(
            "weakening grid must be strictly increasing".into(),
        ));
    }
    if *ks.last().expect("grid is non-empty") > plan.head_count() {
        return Err(HrvError::Precondition(format!(
            "cannot weaken {} of {} heads",
            ks.last().expect("grid is non-empty"),
            plan.head_count()
        )));
    }

    let grid: Vec<(usize, usize)> = (0..ks.len())
        .flat_map(|kj| (0..prompts.len()).map(move |p| (kj, p)))
        .collect();
    // Indexed parallel collect preserves grid order, so scanning the
    // cells front to back reports the first failure deterministically.
    let cells: Vec<Result<f64>> = grid
        .par_iter()
        .map(|&(kj, p)| {
            score_weakened(
                adapter,
                &heads,
                &prompts[p],
                &masks[p],
                master_seed,
                p,
                &plan,
                ks[kj],
                &scorer,
            )
        })
        .collect();

    let mut scores = vec![0.0f64; ks.len()];
    for (&(kj, p), cell) in grid.iter().zip(cells) {
        let score = cell.map_err(|e| HrvError::Scorer {
            prompt_index: p,
            weaken_count: ks[kj],
            source: Box::new(e),
        })?;
        scores[kj] += score;
    }
    for s in &mut scores {
        *s /= prompts.len() as f64;
    }
    Ok(WeakeningCurve {
        ks: ks.to_vec(),
        scores,
        concept: concept.to_string(),
        direction: direction.to_string(),
    })
}

#[allow(clippy::too_many_arguments)]
fn score_weakened<S>(
    adapter: &(dyn AttentionAdapter + Sync),
    heads: &[crate::heads::HeadDesc],
    prompt: &[String],
    mask: &[bool],
    master_seed: u64,
    prompt_index: usize,
    plan: &WeakenPlan,
    k: usize,
    scorer: &S,
) -> Result<f64>
where
    S: Fn(usize, &GenerationRun) -> Result<f64> + Sync,
{
    let plan_k = plan.with_k(k)?;
    let gen_seed = derive_seed(master_seed, streams::GENERATION, prompt_index as u64);
    // The map hook cannot return an error, so the first failure inside it
    // is parked here and surfaced after the run.
    let failure: RefCell<Option<HrvError>> = RefCell::new(None);
    let mut hook = |id: crate::heads::HeadId, _t: usize, map: &crate::attention::CaMap| {
        let flat = heads.iter().position(|d| d.id == id);
        let applied = flat
            .ok_or(HrvError::UnknownHead(id))
            .and_then(|flat| apply_ordered_weakening(map, mask, &plan_k, flat));
        match applied {
            Ok(weakened) => weakened,
            Err(e) => {
                let mut slot = failure.borrow_mut();
                if slot.is_none() {
                    *slot = Some(e);
                }
                map.clone()
            }
        }
    };
    let run = adapter.generate_with_hooks(prompt, gen_seed, Some(&mut hook), false)?;
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    scorer(prompt_index, &run)
}

/// Signed area between two weakening curves over the same grid, with the
/// weakened-head count normalized to `[0, 1]` and the result scaled by
/// 100. Positive when `upper` sits above `lower`; swapping the arguments
/// flips the sign exactly.
pub fn area_between(
    upper: &WeakeningCurve,
    lower: &WeakeningCurve,
    head_count: usize,
) -> Result<f64> {
    if upper.ks != lower.ks {
        return Err(HrvError::Precondition(
            "curves were sampled on different weakening grids".into(),
        ));
    }
    if upper.ks.len() < 2 {
        return Err(HrvError::Precondition(
            "need at least two grid points to integrate".into(),
        ));
    }
    if head_count == 0 {
        return Err(HrvError::Precondition("head count must be positive".into()));
    }
    if !upper.ks.windows(2).all(|w| w[0] < w[1]) {
        return Err(HrvError::Precondition(
            "weakening grid must be strictly increasing".into(),
        ));
    }
    let x = |k: usize| k as f64 / head_count as f64;
    let mut area = 0.0;
    for j in 0..upper.ks.len() - 1 {
        let d0 = upper.scores[j] - lower.scores[j];
        let d1 = upper.scores[j + 1] - lower.scores[j + 1];
        area += (x(upper.ks[j + 1]) - x(upper.ks[j])) * (d0 + d1) / 2.0;
    }
    Ok(100.0 * area)
}

/// Timestep-resolved views of a raw count tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepVectors {
    /// `concept_means[n, h]`: mean count over timesteps.
    pub concept_means: Array2<f64>,
    /// `timestep_means[t, h]`: mean count over concepts.
    pub timestep_means: Array2<f64>,
}

pub fn timestep_vectors(raw: &RawHrvTensor) -> TimestepVectors {
    let (n, t, h) = (raw.concepts(), raw.timesteps(), raw.heads());
    let mut concept_means = Array2::zeros((n, h));
    let mut timestep_means = Array2::zeros((t, h));
    for ni in 0..n {
        for ti in 0..t {
            for hi in 0..h {
                let c = raw.count(ni, ti, hi) as f64;
                concept_means[[ni, hi]] += c / t as f64;
                timestep_means[[ti, hi]] += c / n as f64;
            }
        }
    }
    TimestepVectors {
        concept_means,
        timestep_means,
    }
}

/// Pairwise cosine similarity between row vectors. Rows with zero mass
/// have no direction; they are reported and every entry touching them is
/// left at zero (their diagonal included).
#[derive(Debug, Clone, PartialEq)]
pub struct CosineMatrix {
    pub values: Array2<f64>,
    pub zero_rows: Vec<usize>,
}

/// Cosine similarity of every pair of rows — relevance rows, per-timestep
/// mean vectors, anything with one vector of head weights per row.
pub fn cosine_matrix(rows: &Array2<f64>) -> Result<CosineMatrix> {
    let n = rows.nrows();
    if n == 0 {
        return Err(HrvError::Precondition("no rows to compare".into()));
    }
    let norms: Vec<f64> = rows.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let zero_rows: Vec<usize> = (0..n).filter(|&i| norms[i] == 0.0).collect();
    if zero_rows.len() == n {
        return Err(HrvError::Precondition(
            "every row is zero; nothing to compare".into(),
        ));
    }
    let mut values = Array2::zeros((n, n));
    for i in 0..n {
        if norms[i] == 0.0 {
            continue;
        }
        for j in 0..n {
            if norms[j] == 0.0 {
                continue;
            }
            let dot = rows.row(i).dot(&rows.row(j));
            values[[i, j]] = dot / (norms[i] * norms[j]);
        }
    }
    Ok(CosineMatrix { values, zero_rows })
}

/// Typical attention logit magnitude per head, over the same candidate
/// draws an HRV build would make.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadScale {
    pub mean: f64,
    /// Population standard deviation over all `(run, timestep)` samples.
    pub std: f64,
}

/// Audit the logit scale of every head over a set of captured runs:
/// replay each run's candidate sampler in build iteration order against
/// the captured queries and record the mean absolute pre-softmax logit
/// per `(run, t, head)`. Heads whose keys run hot (planted, or just
/// lucky geometry) show up directly. All-zero queries yield a scale of
/// exactly zero.
pub fn scale_stats(bank: &KeyBank, runs: &[(&CaptureSet, u64)]) -> Result<Vec<HeadScale>> {
    if runs.is_empty() {
        return Err(HrvError::Precondition(
            "need at least one captured run".into(),
        ));
    }
    let heads = bank.head_count();
    let mut samples: Vec<Vec<f64>> = vec![Vec::new(); heads];
    for &(captures, sampler_seed) in runs {
        if captures.head_count() != heads {
            return Err(HrvError::Shape(format!(
                "run captured {} heads, bank has {heads}",
                captures.head_count()
            )));
        }
        let mut sampler = DrawStream::new(sampler_seed);
        for t in 0..captures.timesteps() {
            for flat in 0..heads {
                let candidates = assemble_candidate_keys(bank, flat, &mut sampler)?;
                let logits = attention_logits(
                    captures.query(t, flat),
                    candidates.matrix(),
                    bank.heads()[flat].proj_dim,
                )?;
                let total: f64 = logits.iter().map(|v| v.abs()).sum();
                samples[flat].push(total / logits.len() as f64);
            }
        }
    }
    Ok(samples
        .into_iter()
        .map(|s| {
            let n = s.len() as f64;
            let mean = s.iter().sum::<f64>() / n;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            HeadScale {
                mean,
                std: var.sqrt(),
            }
        })
        .collect())
}

/// [`scale_stats`] over freshly generated runs: regenerate each prompt
/// with the exact seeds an HRV build over the same prompts would use,
/// capture the queries, and audit those.
pub fn scale_stats_online(
    adapter: &dyn AttentionAdapter,
    bank: &KeyBank,
    prompts: &[Vec<String>],
    master_seed: u64,
) -> Result<Vec<HeadScale>> {
    if prompts.is_empty() {
        return Err(HrvError::Precondition("need at least one prompt".into()));
    }
    let mut captured: Vec<(CaptureSet, u64)> = Vec::with_capacity(prompts.len());
    for (i, prompt) in prompts.iter().enumerate() {
        let gen_seed = derive_seed(master_seed, streams::GENERATION, i as u64);
        let sampler_seed = derive_seed(master_seed, streams::SAMPLER, i as u64);
        let run = adapter.generate_with_hooks(prompt, gen_seed, None, true)?;
        let captures = run.captures.ok_or_else(|| {
            HrvError::Precondition("adapter returned a run without captures".into())
        })?;
        captured.push((captures, sampler_seed));
    }
    let runs: Vec<(&CaptureSet, u64)> = captured.iter().map(|(c, s)| (c, *s)).collect();
    scale_stats(bank, &runs)
}

/// [`scale_stats`] over trace files: audit the recorded queries of every
/// trace against the first trace's key bank. All traces must come from
/// the same engine and bank, exactly as a rebuild would require.
pub fn scale_stats_from_traces(traces: &[TraceFile]) -> Result<Vec<HeadScale>> {
    let first = traces
        .first()
        .ok_or_else(|| HrvError::Precondition("need at least one trace to audit".into()))?;
    for (i, trace) in traces.iter().enumerate().skip(1) {
        if trace.engine != first.engine {
            return Err(HrvError::Precondition(format!(
                "trace {i} came from engine {:?}, trace 0 from {:?}",
                trace.engine, first.engine
            )));
        }
        if trace.bank != first.bank {
            return Err(HrvError::Precondition(format!(
                "trace {i} was captured against a different key bank than trace 0"
            )));
        }
    }
    let runs: Vec<(&CaptureSet, u64)> = traces
        .iter()
        .map(|t| (&t.captures, t.sampler_seed))
        .collect();
    scale_stats(&first.bank, &runs)
}
