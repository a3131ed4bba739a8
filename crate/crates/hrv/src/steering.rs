//! Attention-map interventions: per-token rescaling, ordered weakening,
//! two-prompt edit assembly, and the neglect loss for latent guidance.
//!
//! Every function here is a pure map-in/map-out transform, so all of them
//! compose freely inside a generation hook and are safe under any parallel
//! schedule. None of them renormalize: value weighting downstream is
//! linear, and renormalizing would silently undo the intervention
//! (negative weakening factors would make it ill-defined anyway).

use std::ops::Range;

use ndarray::Array2;

use crate::attention::CaMap;
use crate::error::{HrvError, Result};
use crate::relevance::RescalingVector;

/// A labeled run of token-slot columns within a prompt's encoded length —
/// the columns a word occupies, including sub-token expansion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSpan {
    pub range: Range<usize>,
    pub label: String,
}

impl TokenSpan {
    pub fn new(range: Range<usize>, label: impl Into<String>) -> Result<Self> {
        if range.is_empty() {
            return Err(HrvError::Precondition(format!(
                "token span {range:?} is empty"
            )));
        }
        Ok(TokenSpan {
            range,
            label: label.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.range.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects empty ranges
    }
}

fn check_span(span: &TokenSpan, cols: usize) -> Result<()> {
    if span.range.end > cols {
        return Err(HrvError::Precondition(format!(
            "span {:?} ({:?}) exceeds the map's {cols} columns",
            span.range, span.label
        )));
    }
    Ok(())
}

/// Multiply the columns covered by `spans` by `r_h`, leaving every other
/// column — special tokens included — bit-for-bit untouched. No
/// renormalization; the stochastic flag survives only when `r_h = 1`.
pub fn apply_token_rescale(map: &CaMap, spans: &[TokenSpan], r_h: f64) -> Result<CaMap> {
    let mut marked = vec![false; map.cols()];
    for span in spans {
        check_span(span, map.cols())?;
        for j in span.range.clone() {
            marked[j] = true;
        }
    }
    let mut out = map.clone();
    for (j, &m) in marked.iter().enumerate() {
        if m {
            out.scale_column(j, r_h);
        }
    }
    Ok(out)
}

/// An ordered-weakening schedule: which heads to weaken (a prefix of a
/// head permutation) and by what factor.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakenPlan {
    order: Vec<usize>,
    /// `rank[flat_head]` = the head's position in `order`.
    rank: Vec<usize>,
    k: usize,
    factor: f64,
}

impl WeakenPlan {
    /// The default weakening factor: strong sign-flipping suppression.
    pub const DEFAULT_FACTOR: f64 = -2.0;

    /// `order` must be a permutation of all flat head indices; the first
    /// `k` of it are the heads to weaken.
    pub fn new(order: Vec<usize>, k: usize, factor: f64) -> Result<Self> {
        let heads = order.len();
        if k > heads {
            return Err(HrvError::Precondition(format!(
                "cannot weaken {k} of {heads} heads"
            )));
        }
        let mut rank = vec![usize::MAX; heads];
        for (pos, &h) in order.iter().enumerate() {
            if h >= heads || rank[h] != usize::MAX {
                return Err(HrvError::Precondition(format!(
                    "weakening order is not a permutation: head {h} at position {pos}"
                )));
            }
            rank[h] = pos;
        }
        Ok(WeakenPlan {
            order,
            rank,
            k,
            factor,
        })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn factor(&self) -> f64 {
        self.factor
    }

    pub fn head_count(&self) -> usize {
        self.order.len()
    }

    /// Same order and factor, different prefix length.
    pub fn with_k(&self, k: usize) -> Result<Self> {
        WeakenPlan::new(self.order.clone(), k, self.factor)
    }

    /// Is this head among the first `k` of the order?
    pub fn is_weakened(&self, flat_head: usize) -> bool {
        self.rank.get(flat_head).is_some_and(|&r| r < self.k)
    }
}

/// If `flat_head` is scheduled by the plan, multiply every semantic-token
/// column of the map by the plan's factor; otherwise return the map
/// unchanged. Special-token columns are never touched.
pub fn apply_ordered_weakening(
    map: &CaMap,
    semantic_mask: &[bool],
    plan: &WeakenPlan,
    flat_head: usize,
) -> Result<CaMap> {
    if semantic_mask.len() != map.cols() {
        return Err(HrvError::Shape(format!(
            "semantic mask covers {} slots, map has {} columns",
            semantic_mask.len(),
            map.cols()
        )));
    }
    if flat_head >= plan.head_count() {
        return Err(HrvError::Precondition(format!(
            "flat head {flat_head} not resolvable against a {}-head plan",
            plan.head_count()
        )));
    }
    let mut out = map.clone();
    if plan.is_weakened(flat_head) {
        for (j, &sem) in semantic_mask.iter().enumerate() {
            if sem {
                out.scale_column(j, plan.factor());
            }
        }
    }
    Ok(out)
}

/// Token correspondence from target-prompt columns to source-prompt
/// columns. Only positional alignment is supported: prompts must encode to
/// the same length, and column `j` maps to column `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    target_to_source: Vec<usize>,
}

impl Alignment {
    /// Identity alignment between equal-length encodings.
    pub fn positional(source_cols: usize, target_cols: usize) -> Result<Self> {
        if source_cols != target_cols {
            return Err(HrvError::Alignment(format!(
                "positional alignment needs equal lengths, got source {source_cols} vs target {target_cols}"
            )));
        }
        Ok(Alignment {
            target_to_source: (0..target_cols).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.target_to_source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_to_source.is_empty()
    }

    pub fn source_of(&self, target_col: usize) -> usize {
        self.target_to_source[target_col]
    }
}

/// Assemble the edited map for one (timestep, head) of a two-prompt edit.
///
/// Three cases, exactly one of which applies per column:
///
/// 1. `t > tau_c`: the replacement window is over — the whole output is
///    the target map, untouched.
/// 2. `t ≤ tau_c`, column inside the edited span: keep the target's own
///    column, unmodified (the edit must be allowed to express itself).
/// 3. `t ≤ tau_c`, any other column (special tokens included): take the
///    aligned source column scaled by `r_h`, injecting the source prompt's
///    layout weighted by the head's relevance.
///
/// With `r_h = 1` everywhere this is plain source-map replacement with
/// edited-token preservation. The assembled map mixes two distributions,
/// so its stochastic flag is cleared except in case 1's verbatim clone.
pub fn p2p_hrv_maps(
    m_src: &CaMap,
    m_tgt: &CaMap,
    t: usize,
    tau_c: usize,
    edited: &TokenSpan,
    alignment: &Alignment,
    r_h: f64,
) -> Result<CaMap> {
    if t > tau_c {
        return Ok(m_tgt.clone());
    }
    if m_src.rows() != m_tgt.rows() {
        return Err(HrvError::Shape(format!(
            "source map has {} spatial rows, target {}",
            m_src.rows(),
            m_tgt.rows()
        )));
    }
    if alignment.len() != m_tgt.cols() {
        return Err(HrvError::Alignment(format!(
            "alignment covers {} target columns, map has {}",
            alignment.len(),
            m_tgt.cols()
        )));
    }
    check_span(edited, m_tgt.cols())?;

    let mut values = Array2::zeros((m_tgt.rows(), m_tgt.cols()));
    for j in 0..m_tgt.cols() {
        if edited.range.contains(&j) {
            values.column_mut(j).assign(&m_tgt.values().column(j));
        } else {
            let sj = alignment.source_of(j);
            if sj >= m_src.cols() {
                return Err(HrvError::Alignment(format!(
                    "target column {j} aligns to source column {sj}, source has {}",
                    m_src.cols()
                )));
            }
            let scaled = m_src.values().column(sj).mapv(|v| r_h * v);
            values.column_mut(j).assign(&scaled);
        }
    }
    Ok(CaMap::raw(values))
}

/// Neglect loss over target spans: rescale each head's map on the spans by
/// that head's factor, average the maps over heads, collapse each span to
/// a per-position strength (mean over its token columns), take the span's
/// peak position, and report `1 − strength` for the weakest span.
///
/// Returns `(loss, index of the most neglected span)`.
pub fn ae_hrv_loss(
    maps: &[CaMap],
    target_spans: &[TokenSpan],
    r: &RescalingVector,
) -> Result<(f64, usize)> {
    if target_spans.is_empty() {
        return Err(HrvError::Precondition(
            "neglect loss needs at least one target span".into(),
        ));
    }
    if maps.is_empty() {
        return Err(HrvError::Precondition(
            "neglect loss needs at least one map".into(),
        ));
    }
    if maps.len() != r.len() {
        return Err(HrvError::Shape(format!(
            "{} maps for a {}-head rescaling vector",
            maps.len(),
            r.len()
        )));
    }
    let (rows, cols) = (maps[0].rows(), maps[0].cols());
    for (h, map) in maps.iter().enumerate() {
        if map.rows() != rows || map.cols() != cols {
            return Err(HrvError::Shape(format!(
                "map {h} is {}×{}, map 0 is {rows}×{cols}",
                map.rows(),
                map.cols()
            )));
        }
    }
    for span in target_spans {
        check_span(span, cols)?;
    }

    let mut mean = Array2::zeros((rows, cols));
    for (h, map) in maps.iter().enumerate() {
        let rescaled = apply_token_rescale(map, target_spans, r.get(h))?;
        mean += rescaled.values();
    }
    mean /= maps.len() as f64;

    let mut loss = f64::NEG_INFINITY;
    let mut neglected = 0;
    for (i, span) in target_spans.iter().enumerate() {
        let width = span.len() as f64;
        let mut strength = f64::NEG_INFINITY;
        for row in mean.rows() {
            let collapsed: f64 = span.range.clone().map(|j| row[j]).sum::<f64>() / width;
            strength = strength.max(collapsed);
        }
        let span_loss = 1.0 - strength;
        if span_loss > loss {
            loss = span_loss;
            neglected = i;
        }
    }
    Ok((loss, neglected))
}
