//! Normalized head relevance, steering vectors, head orderings, and the
//! HRV/1 text format.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};

use crate::accumulate::RawHrvTensor;
use crate::error::{HrvError, Result};
use crate::hexfloat;
use crate::tolerances;

/// Normalized head relevance: one row per concept, one column per head,
/// each non-zero row scaled to an L1 mass equal to the head count. A
/// uniform (uninformative) concept therefore sits at exactly 1.0 per head,
/// which is what makes the entries usable as rescaling factors.
#[derive(Debug, Clone, PartialEq)]
pub struct HrvMatrix {
    names: Vec<String>,
    values: Array2<f64>,
}

/// Outcome of normalization; `zero_rows` lists concepts that never won a
/// single selection (kept in the matrix as all-zero rows).
#[derive(Debug, Clone)]
pub struct NormalizeOutcome {
    pub matrix: HrvMatrix,
    pub zero_rows: Vec<usize>,
}

/// Collapse a raw count tensor over timesteps and scale each concept row
/// to L1 = head count. Zero rows are preserved and reported, not dropped —
/// row indices must keep matching the vocabulary.
pub fn normalize_hrv(raw: &RawHrvTensor, names: &[String]) -> Result<NormalizeOutcome> {
    if names.len() != raw.concepts() {
        return Err(HrvError::Shape(format!(
            "{} names for {} concept rows",
            names.len(),
            raw.concepts()
        )));
    }
    let heads = raw.heads();
    let totals = raw.concept_head_totals();
    let mut values = Array2::zeros((raw.concepts(), heads));
    let mut zero_rows = Vec::new();
    for (n, row) in totals.iter().enumerate() {
        let mass: u64 = row.iter().sum();
        if mass == 0 {
            zero_rows.push(n);
            continue;
        }
        let scale = heads as f64 / mass as f64;
        for (h, &c) in row.iter().enumerate() {
            values[[n, h]] = c as f64 * scale;
        }
    }
    let matrix = HrvMatrix {
        names: names.to_vec(),
        values,
    };
    Ok(NormalizeOutcome { matrix, zero_rows })
}

impl HrvMatrix {
    /// Wrap pre-computed values, enforcing the row-mass invariant: every
    /// row's L1 norm is either 0 or the head count (within tolerance).
    pub fn new(names: Vec<String>, values: Array2<f64>) -> Result<Self> {
        if names.len() != values.nrows() {
            return Err(HrvError::Shape(format!(
                "{} names for {} rows",
                names.len(),
                values.nrows()
            )));
        }
        let heads = values.ncols() as f64;
        for (n, row) in values.rows().into_iter().enumerate() {
            let mass: f64 = row.iter().map(|v| v.abs()).sum();
            if mass != 0.0 && (mass - heads).abs() > tolerances::ROW_SUM {
                return Err(HrvError::Precondition(format!(
                    "row {n} has L1 mass {mass}, expected 0 or {heads}"
                )));
            }
        }
        Ok(HrvMatrix { names, values })
    }

    pub fn concept_count(&self) -> usize {
        self.values.nrows()
    }

    pub fn head_count(&self) -> usize {
        self.values.ncols()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.index_of(name)
            .ok_or_else(|| HrvError::UnknownConcept(name.to_string()))
    }

    pub fn row(&self, concept: usize) -> ArrayView1<'_, f64> {
        self.values.row(concept)
    }

    pub fn value(&self, concept: usize, head: usize) -> f64 {
        self.values[[concept, head]]
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    // ── HRV/1 text format ────────────────────────────────────────────
    //
    // Line 1: `HRV/1`
    // Line 2: `N=<concepts> H=<heads>`
    // Then optional `#`-prefixed comment lines (provenance), then exactly
    // N data lines: `<name><TAB><v1> <v2> … <vH>` with values in lossless
    // hexadecimal floating-point.

    /// Serialize to HRV/1. `provenance`, when given, is emitted as a
    /// comment line after the dimensions.
    pub fn to_hrv1(&self, provenance: Option<&str>) -> String {
        let mut out = String::new();
        out.push_str("HRV/1\n");
        out.push_str(&format!(
            "N={} H={}\n",
            self.concept_count(),
            self.head_count()
        ));
        if let Some(p) = provenance {
            out.push_str("# ");
            out.push_str(p);
            out.push('\n');
        }
        for (name, row) in self.names.iter().zip(self.values.rows()) {
            out.push_str(name);
            out.push('\t');
            for (h, v) in row.iter().enumerate() {
                if h > 0 {
                    out.push(' ');
                }
                out.push_str(&hexfloat::format_f64(*v));
            }
            out.push('\n');
        }
        out
    }

    /// Parse HRV/1 text. Values round-trip bit-exactly through
    /// [`to_hrv1`](Self::to_hrv1).
    pub fn from_hrv1_str(text: &str) -> Result<Self> {
        let fail = |detail: String| HrvError::Format {
            format: "HRV/1",
            detail,
        };
        let mut lines = text.lines();
        match lines.next() {
            Some("HRV/1") => {}
            Some(other) => return Err(fail(format!("bad format tag {other:?}"))),
            None => return Err(fail("empty input".into())),
        }
        let dims = lines
            .next()
            .ok_or_else(|| fail("missing dimensions line".into()))?;
        let (n_part, h_part) = dims
            .split_once(' ')
            .ok_or_else(|| fail(format!("bad dimensions line {dims:?}")))?;
        let n: usize = n_part
            .strip_prefix("N=")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fail(format!("bad concept count in {dims:?}")))?;
        let h: usize = h_part
            .strip_prefix("H=")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fail(format!("bad head count in {dims:?}")))?;

        let mut names = Vec::with_capacity(n);
        let mut values = Array2::zeros((n, h));
        let mut row = 0usize;
        for line in lines {
            if line.starts_with('#') {
                continue;
            }
            if line.is_empty() {
                continue;
            }
            if row >= n {
                return Err(fail(format!("more than {n} data rows")));
            }
            let (name, rest) = line
                .split_once('\t')
                .ok_or_else(|| fail(format!("row {row}: missing tab separator")))?;
            if name.is_empty() {
                return Err(fail(format!("row {row}: empty concept name")));
            }
            let mut count = 0usize;
            for (j, token) in rest.split(' ').enumerate() {
                if j >= h {
                    return Err(fail(format!("row {row}: more than {h} values")));
                }
                let v = hexfloat::parse_f64(token)
                    .ok_or_else(|| fail(format!("row {row}: bad value {token:?}")))?;
                values[[row, j]] = v;
                count = j + 1;
            }
            if count != h {
                return Err(fail(format!("row {row}: {count} values, expected {h}")));
            }
            names.push(name.to_string());
            row += 1;
        }
        if row != n {
            return Err(fail(format!("{row} data rows, expected {n}")));
        }
        // Served-back data passes through the same invariant gate as
        // freshly normalized matrices.
        Self::new(names, values)
    }
}

/// Which end of a concept's relevance ranking comes first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Most relevant head first.
    Morhf,
    /// Least relevant head first.
    Lerhf,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Morhf => "morhf",
            Direction::Lerhf => "lerhf",
        })
    }
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "morhf" => Ok(Direction::Morhf),
            "lerhf" => Ok(Direction::Lerhf),
            other => Err(format!("unknown direction {other:?} (morhf|lerhf)")),
        }
    }
}

/// Rank a concept's heads by relevance. Returns a permutation of flat head
/// indices; ties break toward the lower index in both directions, so the
/// two orders are exact reverses only when all values are distinct.
pub fn head_order(hrv: &HrvMatrix, concept: usize, direction: Direction) -> Result<Vec<usize>> {
    if concept >= hrv.concept_count() {
        return Err(HrvError::Precondition(format!(
            "concept index {concept} out of range ({} rows)",
            hrv.concept_count()
        )));
    }
    let row = hrv.row(concept);
    let mut order: Vec<usize> = (0..hrv.head_count()).collect();
    order.sort_by(|&a, &b| {
        let cmp = row[a].total_cmp(&row[b]);
        let cmp = match direction {
            Direction::Morhf => cmp.reverse(),
            Direction::Lerhf => cmp,
        };
        cmp.then(a.cmp(&b))
    });
    Ok(order)
}

/// Per-head rescaling factors for steering, with the provenance that
/// produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct RescalingVector {
    values: Vec<f64>,
    pub desired: String,
    pub undesired: Option<String>,
}

impl RescalingVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, head: usize) -> f64 {
        self.values[head]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// All-ones vector: steering with it is the identity.
    pub fn identity(heads: usize) -> Self {
        RescalingVector {
            values: vec![1.0; heads],
            desired: String::new(),
            undesired: None,
        }
    }
}

/// Build the rescaling vector for strengthening `desired`, optionally
/// adjusting away from `undesired`:
///
/// - strengthen: `r = hrv[desired]`
/// - adjust:     `r = 2·hrv[desired] − hrv[undesired]`
///
/// With `undesired == desired` the adjustment cancels term-for-term
/// (`2v − v` is exact in floating point), so adjusting toward a concept
/// against itself *equals* plain strengthening, bit for bit.
pub fn rescaling_vector(
    hrv: &HrvMatrix,
    desired: &str,
    undesired: Option<&str>,
) -> Result<RescalingVector> {
    let d = hrv.require(desired)?;
    let d_row = hrv.row(d);
    let values = match undesired {
        None => d_row.to_vec(),
        Some(u_name) => {
            let u = hrv.require(u_name)?;
            let u_row = hrv.row(u);
            d_row
                .iter()
                .zip(u_row.iter())
                .map(|(&dv, &uv)| 2.0 * dv - uv)
                .collect()
        }
    };
    Ok(RescalingVector {
        values,
        desired: desired.to_string(),
        undesired: undesired.map(str::to_string),
    })
}
