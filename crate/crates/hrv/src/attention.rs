//! Cross-attention maps and the softmax that produces them.

use ndarray::Array2;

use crate::error::{HrvError, Result};
use crate::tolerances;

/// One head's cross-attention map at one timestep: spatial query positions
/// (rows) against text-token keys (columns).
///
/// The `row_stochastic` flag records whether rows are still probability
/// distributions. Fresh softmax output is row-stochastic; steering
/// transforms that rescale columns clear the flag rather than
/// renormalizing, because the value-weighting step downstream is linear
/// and renormalization would silently undo the steering.
#[derive(Debug, Clone, PartialEq)]
pub struct CaMap {
    values: Array2<f64>,
    row_stochastic: bool,
}

impl CaMap {
    /// Wrap values that claim to be row-stochastic; each row sum is
    /// checked against [`tolerances::ROW_SUM`].
    pub fn stochastic(values: Array2<f64>) -> Result<Self> {
        for (i, row) in values.rows().into_iter().enumerate() {
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > tolerances::ROW_SUM {
                return Err(HrvError::Precondition(format!(
                    "row {i} of a stochastic map sums to {sum}, not 1"
                )));
            }
        }
        Ok(CaMap {
            values,
            row_stochastic: true,
        })
    }

    /// Wrap arbitrary values (no distribution claim).
    pub fn raw(values: Array2<f64>) -> Self {
        CaMap {
            values,
            row_stochastic: false,
        }
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn row_stochastic(&self) -> bool {
        self.row_stochastic
    }

    /// Consume into the raw value matrix.
    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    /// Multiply one column by `factor`. Scaling by exactly 1.0 is an
    /// identity and keeps the row-stochastic flag; anything else clears it.
    pub fn scale_column(&mut self, col: usize, factor: f64) {
        if factor == 1.0 {
            return;
        }
        for v in self.values.column_mut(col) {
            *v *= factor;
        }
        self.row_stochastic = false;
    }

    /// Mean of each column over the spatial (row) axis.
    pub fn spatial_mean(&self) -> Vec<f64> {
        let rows = self.rows() as f64;
        (0..self.cols())
            .map(|j| self.values.column(j).sum() / rows)
            .collect()
    }
}

/// Attention logits `Q·Kᵀ/√d` — shared by the softmax below and by scale
/// statistics, which need the pre-softmax magnitudes.
pub fn attention_logits(
    q: &Array2<f64>,
    keys: &Array2<f64>,
    proj_dim: usize,
) -> Result<Array2<f64>> {
    if proj_dim == 0 {
        return Err(HrvError::Precondition("projection dimension is 0".into()));
    }
    if q.ncols() != keys.ncols() {
        return Err(HrvError::Shape(format!(
            "query feature dim {} != key feature dim {}",
            q.ncols(),
            keys.ncols()
        )));
    }
    if keys.nrows() == 0 {
        return Err(HrvError::Precondition("no keys to attend to".into()));
    }
    let scale = 1.0 / (proj_dim as f64).sqrt();
    Ok(q.dot(&keys.t()) * scale)
}

/// Row-wise softmax of `Q·Kᵀ/√d`.
///
/// Numerically stable (max-subtracted), so queries and keys of any
/// magnitude produce valid distributions — and shifting every logit in a
/// row by a constant provably cancels.
pub fn softmax_ca_map(q: &Array2<f64>, keys: &Array2<f64>, proj_dim: usize) -> Result<CaMap> {
    let mut logits = attention_logits(q, keys, proj_dim)?;
    for mut row in logits.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    // Construction guarantees row sums of 1 up to round-off; go through the
    // checked constructor anyway so the invariant is enforced in one place.
    CaMap::stochastic(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    use crate::rng::DrawStream;

    fn random_matrix(stream: &mut DrawStream, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| stream.next_normal() * scale)
    }

    #[test]
    fn zero_queries_give_uniform_rows() {
        let q = Array2::zeros((4, 3));
        let keys = {
            let mut s = DrawStream::new(5);
            random_matrix(&mut s, 6, 3, 1.0)
        };
        let map = softmax_ca_map(&q, &keys, 3).unwrap();
        for row in map.values().rows() {
            for &v in row {
                assert_abs_diff_eq!(v, 1.0 / 6.0, epsilon = 1e-12);
            }
        }
        assert!(map.row_stochastic());
    }

    #[test]
    fn two_key_case_matches_hand_evaluation() {
        // One query position, F = 1, d = 1: logits are plain inner
        // products. q = [1], keys = [[1], [0]] → logits [1, 0], so the
        // map must be [e/(e+1), 1/(e+1)] — evaluated here independently.
        let q = array![[1.0]];
        let keys = array![[1.0], [0.0]];
        let map = softmax_ca_map(&q, &keys, 1).unwrap();
        let e = 1.0_f64.exp();
        assert_abs_diff_eq!(map.values()[[0, 0]], e / (e + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(map.values()[[0, 1]], 1.0 / (e + 1.0), epsilon = 1e-15);
    }

    #[test]
    fn shape_and_dim_preconditions_are_enforced() {
        let q = Array2::zeros((2, 3));
        let keys = Array2::zeros((4, 2));
        assert!(matches!(
            softmax_ca_map(&q, &keys, 3),
            Err(HrvError::Shape(_))
        ));
        let keys = Array2::zeros((4, 3));
        assert!(matches!(
            softmax_ca_map(&q, &keys, 0),
            Err(HrvError::Precondition(_))
        ));
    }

    #[test]
    fn stochastic_constructor_rejects_bad_rows() {
        let bad = array![[0.5, 0.6]];
        assert!(CaMap::stochastic(bad).is_err());
        let good = array![[0.25, 0.75]];
        assert!(CaMap::stochastic(good).is_ok());
    }

    #[test]
    fn scaling_by_one_is_identity_and_keeps_the_flag() {
        let mut s = DrawStream::new(8);
        let q = random_matrix(&mut s, 3, 4, 1.0);
        let keys = random_matrix(&mut s, 5, 4, 1.0);
        let map = softmax_ca_map(&q, &keys, 4).unwrap();
        let mut scaled = map.clone();
        scaled.scale_column(2, 1.0);
        assert_eq!(scaled, map);
        scaled.scale_column(2, 0.5);
        assert!(!scaled.row_stochastic());
        assert_eq!(scaled.values()[[0, 2]], map.values()[[0, 2]] * 0.5);
        assert_eq!(scaled.values()[[0, 1]], map.values()[[0, 1]]);
    }

    proptest! {
        // Row-stochasticity and shift invariance over random draws; the
        // dedicated acceptance check runs the same properties on a fixed
        // 100-draw schedule.
        #[test]
        fn rows_sum_to_one(seed in any::<u64>()) {
            let mut s = DrawStream::new(seed);
            let q = random_matrix(&mut s, 4, 6, 3.0);
            let keys = random_matrix(&mut s, 5, 6, 3.0);
            let map = softmax_ca_map(&q, &keys, 6).unwrap();
            for row in map.values().rows() {
                prop_assert!((row.sum() - 1.0).abs() <= crate::tolerances::ROW_SUM);
            }
        }

        #[test]
        fn shifting_all_logits_in_a_row_cancels(seed in any::<u64>(), shift in -50.0f64..50.0) {
            // Adding c·1ᵀ to a query's logits is the same as appending a
            // constant to every key inner product; realize it by adding a
            // bias feature: q gains a column fixed at `shift`, keys gain a
            // column of ones — every logit moves by shift/√d together.
            let mut s = DrawStream::new(seed);
            let q = random_matrix(&mut s, 3, 4, 2.0);
            let keys = random_matrix(&mut s, 5, 4, 2.0);
            let base = softmax_ca_map(&q, &keys, 4).unwrap();

            let mut q_aug = Array2::zeros((3, 5));
            q_aug.slice_mut(ndarray::s![.., ..4]).assign(&q);
            q_aug.column_mut(4).fill(shift);
            let mut k_aug = Array2::zeros((5, 5));
            k_aug.slice_mut(ndarray::s![.., ..4]).assign(&keys);
            k_aug.column_mut(4).fill(1.0);
            // Same d so the scale factor matches the unshifted map.
            let shifted = softmax_ca_map(&q_aug, &k_aug, 4).unwrap();

            for (a, b) in base.values().iter().zip(shifted.values().iter()) {
                prop_assert!((a - b).abs() <= crate::tolerances::RECOMPUTE);
            }
        }
    }
}
