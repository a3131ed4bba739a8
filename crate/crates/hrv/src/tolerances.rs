//! Numeric tolerances, each with its justification. Tests and validators
//! reference these constants instead of re-inventing magic numbers.

/// Row sums of stochastic maps and L1 norms of normalized HRV rows.
/// Softmax rows and the final row scaling are each one pass of summation
/// and division over at most a few thousand f64 terms; 1e-9 leaves three
/// orders of magnitude of slack over worst-case accumulation error while
/// still catching any real defect.
pub const ROW_SUM: f64 = 1e-9;

/// Agreement between an analytic reduction (axis means, cosines) and its
/// brute-force loop oracle. Both sides do the same handful of operations
/// in different orders; 1e-12 is tight enough to catch a wrong axis or a
/// dropped term, loose enough for reassociation error.
pub const REDUCTION_ORACLE: f64 = 1e-12;

/// Agreement for heavier recomputation (logit scale statistics, shift
/// invariance of softmax) where exp/log round-off compounds.
pub const RECOMPUTE: f64 = 1e-9;
