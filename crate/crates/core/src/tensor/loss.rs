use super::Tensor;
use crate::error::{Error, Result};

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log softmax(row)` via log-sum-exp.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Mean negative log-likelihood over rows whose target is not
/// `ignore_index`, together with its gradient w.r.t. the logits.
///
/// `logits` is viewed as `[rows, V]`; `targets` has one id per row.
pub fn softmax_cross_entropy(
    logits: &Tensor,
    targets: &[u32],
    ignore_index: u32,
) -> Result<(f64, Tensor)> {
    let vocab = logits.last_dim();
    let rows = logits.rows();
    if targets.len() != rows {
        return Err(Error::shape(format!(
            "{} targets for {rows} logit rows",
            targets.len()
        )));
    }
    let count = targets.iter().filter(|&&t| t != ignore_index).count();
    if count == 0 {
        return Err(Error::DegenerateBatch);
    }
    let mut grad = vec![0.0; logits.numel()];
    let mut total = 0.0;
    let inv = 1.0 / count as f64;
    for ((row, &target), g) in logits
        .data()
        .chunks(vocab)
        .zip(targets)
        .zip(grad.chunks_mut(vocab))
    {
        if target == ignore_index {
            continue;
        }
        let t = target as usize;
        if t >= vocab {
            return Err(Error::TokenId { id: target, vocab });
        }
        let logp = log_softmax_row(row);
        total -= logp[t];
        for (gi, lp) in g.iter_mut().zip(&logp) {
            *gi = lp.exp() * inv;
        }
        g[t] -= inv;
    }
    Ok((total * inv, Tensor::new(logits.shape().to_vec(), grad)?))
}
