//! Small shared numeric helpers.

use ndarray::ArrayView1;
use rand::{Rng, RngExt};

/// Log-sum-exp with the usual max shift. `-inf` entries contribute nothing;
/// an all-`-inf` (or empty) input returns `-inf`.
pub(crate) fn logsumexp(xs: ArrayView1<'_, f64>) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + sum.ln()
}

/// Draw an index from a probability row by walking its CDF. The row is
/// assumed normalized; any trailing rounding deficit goes to the last index.
pub(crate) fn sample_categorical<R: Rng>(rng: &mut R, probs: ArrayView1<'_, f64>) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}
