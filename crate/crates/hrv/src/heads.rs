//! Cross-attention head identity and geometry.

use std::fmt;
use std::str::FromStr;

/// Identifies one cross-attention head as (layer, head-within-layer).
///
/// Ordering is lexicographic — all heads of layer 0 before all heads of
/// layer 1 — which is also the enumeration order adapters must use. A
/// head's *flat index* is its position in that enumeration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HeadId {
    pub layer: u32,
    pub head: u32,
}

impl HeadId {
    pub fn new(layer: u32, head: u32) -> Self {
        HeadId { layer, head }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.H{}", self.layer, self.head)
    }
}

impl FromStr for HeadId {
    type Err = String;

    /// Accepts the display form `L<layer>.H<head>` and the bare pair
    /// `<layer>.<head>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s
            .split_once('.')
            .ok_or_else(|| format!("expected layer.head, got {s:?}"))?;
        let layer = a
            .trim_start_matches(['L', 'l'])
            .parse::<u32>()
            .map_err(|_| format!("bad layer in {s:?}"))?;
        let head = b
            .trim_start_matches(['H', 'h'])
            .parse::<u32>()
            .map_err(|_| format!("bad head in {s:?}"))?;
        Ok(HeadId { layer, head })
    }
}

/// Static description of one head: identity plus the shapes its matrices
/// carry. Feature and projection dimensions may differ per head on real
/// pipelines, so they live here rather than in a global config.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadDesc {
    pub id: HeadId,
    /// Width of query/key rows (columns of Q and K).
    pub feature_dim: usize,
    /// Projection dimension `d` whose square root scales attention logits.
    pub proj_dim: usize,
    /// Spatial side length; the head attends from `spatial_side²` positions.
    pub spatial_side: usize,
}

impl HeadDesc {
    /// Number of spatial query positions (rows of this head's CA maps).
    pub fn spatial_len(&self) -> usize {
        self.spatial_side * self.spatial_side
    }
}
