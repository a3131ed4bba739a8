//! Raw HRV accumulation: concept selection and the count tensor.
//!
//! The accounting rule is deliberately blunt: at every (timestep, head)
//! of every generation, exactly one concept wins and its cell gets +1.
//! Keeping raw counts as integers until normalization makes merging
//! associative and bit-exact, so a build can be sharded any way at all.

use std::ops::Range;

use crate::attention::CaMap;
use crate::error::{HrvError, Result};

/// Pick the concept a head attends to most, given a CA map over candidate
/// keys and the per-concept row segments of the candidate matrix.
///
/// Multi-token segments are collapsed by averaging over the token axis,
/// then attention is averaged over spatial positions; the argmax breaks
/// ties toward the lower concept index.
pub fn select_concept(map: &CaMap, segments: &[Range<usize>]) -> Result<usize> {
    if segments.is_empty() {
        return Err(HrvError::Precondition("no concept segments".into()));
    }
    let mut expected = 0usize;
    for (i, seg) in segments.iter().enumerate() {
        if seg.start != expected || seg.is_empty() {
            return Err(HrvError::Precondition(format!(
                "segment {i} ({seg:?}) does not tile the candidate columns"
            )));
        }
        expected = seg.end;
    }
    if expected != map.cols() {
        return Err(HrvError::Shape(format!(
            "segments cover {expected} columns, map has {}",
            map.cols()
        )));
    }

    let column_means = map.spatial_mean();
    let mut best = 0usize;
    let mut best_strength = f64::NEG_INFINITY;
    for (n, seg) in segments.iter().enumerate() {
        let strength = column_means[seg.clone()].iter().sum::<f64>() / seg.len() as f64;
        if strength > best_strength {
            best = n;
            best_strength = strength;
        }
    }
    Ok(best)
}

/// Integer count tensor over (concept, timestep, head), plus the number of
/// completed sweeps.
///
/// One *sweep* is a full generation's worth of updates: one increment per
/// (timestep, head). The central invariant — counts at each (t, h) summed
/// over concepts equal the sweep count — is what [`verify_complete`]
/// checks and what merging preserves.
///
/// [`verify_complete`]: RawHrvTensor::verify_complete
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawHrvTensor {
    counts: Vec<u64>,
    concepts: usize,
    timesteps: usize,
    heads: usize,
    sweeps: u64,
}

impl RawHrvTensor {
    pub fn new(concepts: usize, timesteps: usize, heads: usize) -> Self {
        RawHrvTensor {
            counts: vec![0; concepts * timesteps * heads],
            concepts,
            timesteps,
            heads,
            sweeps: 0,
        }
    }

    pub fn concepts(&self) -> usize {
        self.concepts
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Completed sweeps (generations accumulated).
    pub fn sweeps(&self) -> u64 {
        self.sweeps
    }

    #[inline]
    fn index(&self, concept: usize, t: usize, head: usize) -> usize {
        debug_assert!(concept < self.concepts && t < self.timesteps && head < self.heads);
        (concept * self.timesteps + t) * self.heads + head
    }

    pub fn count(&self, concept: usize, t: usize, head: usize) -> u64 {
        self.counts[self.index(concept, t, head)]
    }

    /// Record one selection: +1 in exactly one cell.
    pub fn record(&mut self, concept: usize, t: usize, head: usize) -> Result<()> {
        if concept >= self.concepts || t >= self.timesteps || head >= self.heads {
            return Err(HrvError::Precondition(format!(
                "record({concept}, {t}, {head}) outside a {}×{}×{} tensor",
                self.concepts, self.timesteps, self.heads
            )));
        }
        let idx = self.index(concept, t, head);
        self.counts[idx] += 1;
        Ok(())
    }

    /// Mark one generation's updates complete. Callers must have recorded
    /// exactly one selection per (timestep, head) since the last mark.
    pub fn complete_sweep(&mut self) {
        self.sweeps += 1;
    }

    /// Check count conservation: for every (t, h), counts summed over
    /// concepts equal the sweep count.
    pub fn verify_complete(&self) -> Result<()> {
        for t in 0..self.timesteps {
            for h in 0..self.heads {
                let sum: u64 = (0..self.concepts).map(|n| self.count(n, t, h)).sum();
                if sum != self.sweeps {
                    return Err(HrvError::Precondition(format!(
                        "cell (t={t}, h={h}) holds {sum} counts for {} sweeps",
                        self.sweeps
                    )));
                }
            }
        }
        Ok(())
    }

    /// Exact merge of two shards. Commutative and associative, so any
    /// merge tree over a partition of the generations yields the same
    /// tensor as sequential accumulation.
    pub fn merge(&self, other: &RawHrvTensor) -> Result<RawHrvTensor> {
        if self.concepts != other.concepts
            || self.timesteps != other.timesteps
            || self.heads != other.heads
        {
            return Err(HrvError::Shape(format!(
                "merging {}×{}×{} with {}×{}×{}",
                self.concepts,
                self.timesteps,
                self.heads,
                other.concepts,
                other.timesteps,
                other.heads
            )));
        }
        let mut out = self.clone();
        for (dst, src) in out.counts.iter_mut().zip(&other.counts) {
            *dst = dst
                .checked_add(*src)
                .ok_or_else(|| HrvError::Precondition("count overflow while merging".into()))?;
        }
        out.sweeps = out
            .sweeps
            .checked_add(other.sweeps)
            .ok_or_else(|| HrvError::Precondition("sweep overflow while merging".into()))?;
        Ok(out)
    }

    /// Marginalize out the timestep axis: per-(concept, head) totals.
    pub fn concept_head_totals(&self) -> Vec<Vec<u64>> {
        let mut totals = vec![vec![0u64; self.heads]; self.concepts];
        for n in 0..self.concepts {
            for t in 0..self.timesteps {
                for h in 0..self.heads {
                    totals[n][h] += self.count(n, t, h);
                }
            }
        }
        totals
    }

    /// Reassemble a tensor from dumped counts, enforcing count
    /// conservation against the recorded sweep count.
    pub fn from_parts(
        concepts: usize,
        timesteps: usize,
        heads: usize,
        counts: Vec<u64>,
        sweeps: u64,
    ) -> Result<Self> {
        if counts.len() != concepts * timesteps * heads {
            return Err(HrvError::Shape(format!(
                "{} counts cannot fill a {concepts}×{timesteps}×{heads} tensor",
                counts.len()
            )));
        }
        let raw = RawHrvTensor {
            counts,
            concepts,
            timesteps,
            heads,
            sweeps,
        };
        raw.verify_complete()?;
        Ok(raw)
    }
}

/// Serialize a raw count tensor with its concept names. The format is
/// line-oriented: an `HRVRAW/1` tag, one dimension line, optional `# `
/// comments, then one line per (concept, timestep) holding the name, the
/// timestep, and the per-head counts. Counts are integers, so the round
/// trip is exact.
pub fn write_raw_tensor(
    raw: &RawHrvTensor,
    names: &[String],
    provenance: Option<&str>,
) -> Result<String> {
    if names.len() != raw.concepts() {
        return Err(HrvError::Shape(format!(
            "{} names for {} concepts",
            names.len(),
            raw.concepts()
        )));
    }
    for name in names {
        if name.is_empty() || name.contains('\t') || name.contains('\n') {
            return Err(HrvError::Format {
                format: "HRVRAW/1",
                detail: format!("concept name {name:?} cannot be serialized"),
            });
        }
    }
    let mut out = String::new();
    out.push_str("HRVRAW/1\n");
    out.push_str(&format!(
        "N={} T={} H={} SWEEPS={}\n",
        raw.concepts(),
        raw.timesteps(),
        raw.heads(),
        raw.sweeps()
    ));
    if let Some(p) = provenance {
        out.push_str("# ");
        out.push_str(p);
        out.push('\n');
    }
    for (n, name) in names.iter().enumerate() {
        for t in 0..raw.timesteps() {
            out.push_str(name);
            out.push('\t');
            out.push_str(&t.to_string());
            out.push('\t');
            for h in 0..raw.heads() {
                if h > 0 {
                    out.push(' ');
                }
                out.push_str(&raw.count(n, t, h).to_string());
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// Parse a dump produced by [`write_raw_tensor`]. Comments are skipped;
/// dimensions, line order, and count conservation are all enforced.
pub fn read_raw_tensor(text: &str) -> Result<(RawHrvTensor, Vec<String>)> {
    let bad = |detail: String| HrvError::Format {
        format: "HRVRAW/1",
        detail,
    };
    let mut lines = text.lines();
    match lines.next() {
        Some("HRVRAW/1") => {}
        other => return Err(bad(format!("expected HRVRAW/1 tag, found {other:?}"))),
    }
    let dims = lines
        .next()
        .ok_or_else(|| bad("missing dimension line".into()))?;
    let mut n = None;
    let mut t = None;
    let mut h = None;
    let mut sweeps = None;
    for field in dims.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| bad(format!("bad dimension field {field:?}")))?;
        let parsed: u64 = value
            .parse()
            .map_err(|_| bad(format!("bad dimension value {field:?}")))?;
        match key {
            "N" => n = Some(parsed as usize),
            "T" => t = Some(parsed as usize),
            "H" => h = Some(parsed as usize),
            "SWEEPS" => sweeps = Some(parsed),
            _ => return Err(bad(format!("unknown dimension field {field:?}"))),
        }
    }
    let (n, t, h, sweeps) = match (n, t, h, sweeps) {
        (Some(n), Some(t), Some(h), Some(s)) => (n, t, h, s),
        _ => return Err(bad(format!("incomplete dimension line {dims:?}"))),
    };

    let mut names: Vec<String> = Vec::with_capacity(n);
    let mut counts = vec![0u64; n * t * h];
    let mut row = 0usize;
    for line in lines {
        if line.starts_with('#') {
            continue;
        }
        if row >= n * t {
            return Err(bad(format!("more than {} count lines", n * t)));
        }
        let (ni, ti) = (row / t, row % t);
        let mut fields = line.splitn(3, '\t');
        let name = fields
            .next()
            .ok_or_else(|| bad(format!("count line {row} is empty")))?;
        let step: usize = fields
            .next()
            .ok_or_else(|| bad(format!("count line {row} has no timestep")))?
            .parse()
            .map_err(|_| bad(format!("count line {row} has a bad timestep")))?;
        let rest = fields
            .next()
            .ok_or_else(|| bad(format!("count line {row} has no counts")))?;
        if ti == 0 {
            names.push(name.to_string());
        } else if names[ni] != name {
            return Err(bad(format!(
                "concept {ni} renames itself from {:?} to {name:?}",
                names[ni]
            )));
        }
        if step != ti {
            return Err(bad(format!(
                "count line {row} claims timestep {step}, expected {ti}"
            )));
        }
        let mut wrote = 0usize;
        for (hi, field) in rest.split_whitespace().enumerate() {
            if hi >= h {
                return Err(bad(format!("count line {row} has more than {h} heads")));
            }
            counts[(ni * t + ti) * h + hi] = field
                .parse()
                .map_err(|_| bad(format!("bad count {field:?} on line {row}")))?;
            wrote += 1;
        }
        if wrote != h {
            return Err(bad(format!(
                "count line {row} has {wrote} heads, expected {h}"
            )));
        }
        row += 1;
    }
    if row != n * t {
        return Err(bad(format!("found {row} count lines, expected {}", n * t)));
    }
    let raw = RawHrvTensor::from_parts(n, t, h, counts, sweeps)?;
    Ok((raw, names))
}
