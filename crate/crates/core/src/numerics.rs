//! Small shared numeric helpers: shift-stabilized softmax and
//! log-sum-exp. Used by the model's probability heads and the scorers.

use ndarray::{Array1, Array3, NdFloat};

/// Softmax of a slice, computed with max-subtraction.
pub fn softmax<F: NdFloat>(logits: &[F]) -> Vec<F> {
    assert!(!logits.is_empty(), "softmax of empty slice");
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total = exps.iter().copied().fold(F::zero(), |a, b| a + b);
    exps.into_iter().map(|v| v / total).collect()
}

/// log(sum(exp(l_k))) with max-subtraction; finite for inputs up to ~1e300.
pub fn log_sum_exp<F: NdFloat>(logits: &[F]) -> F {
    assert!(!logits.is_empty(), "log_sum_exp of empty slice");
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let total = logits
        .iter()
        .map(|&v| (v - max).exp())
        .fold(F::zero(), |a, b| a + b);
    max + total.ln()
}

/// Per-pixel softmax over axis 0 of a (C, H, W) logit map.
pub fn softmax_over_channels<F: NdFloat>(logits: &Array3<F>) -> Array3<F> {
    let (c, h, w) = logits.dim();
    let mut out = Array3::zeros((c, h, w));
    let mut buf = vec![F::zero(); c];
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                buf[ch] = logits[(ch, i, j)];
            }
            let probs = softmax(&buf);
            for ch in 0..c {
                out[(ch, i, j)] = probs[ch];
            }
        }
    }
    out
}

/// Softmax of a 1-D array view.
pub fn softmax_array<F: NdFloat>(logits: &Array1<F>) -> Array1<F> {
    Array1::from_vec(softmax(logits.as_slice().unwrap()))
}
