//! Dense double-precision matrices, row softmax, seeded noise and the
//! ZSTR tensor file format.

mod matrix;
mod rng;
pub mod tensor_file;

pub use matrix::{cosine_similarity_rows, matmul, softmax_rows, Matrix};
pub use rng::{gaussian_noise, SeededRng};

/// Masking sentinel. Softmax treats anything at or below [`MASKED_AT`] as an
/// exact zero weight.
pub const NEG_LARGE: f64 = -1e30;

/// Threshold under which a logit counts as masked.
pub const MASKED_AT: f64 = -1e29;

#[inline]
pub fn is_masked(x: f64) -> bool {
    x <= MASKED_AT
}

/// Numerically stable `ln(sum(exp(xs)))`, ignoring masked entries.
/// Returns `None` when every entry is masked.
pub fn log_sum_exp(xs: &[f64]) -> Option<f64> {
    let max = xs
        .iter()
        .copied()
        .filter(|&x| !is_masked(x))
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let sum: f64 = xs
        .iter()
        .filter(|&&x| !is_masked(x))
        .map(|&x| (x - max).exp())
        .sum();
    Some(max + sum.ln())
}
