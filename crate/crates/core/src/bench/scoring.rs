use crate::error::{Error, Result};

/// Softmax restricted to the candidate logits, in candidate order.
pub fn score_single_token(logits: &[f64], candidates: &[u32]) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::Config("no candidates to score".into()));
    }
    let vocab = logits.len();
    for (i, &c) in candidates.iter().enumerate() {
        if c as usize >= vocab {
            return Err(Error::TokenId { id: c, vocab });
        }
        if candidates[..i].contains(&c) {
            return Err(Error::Config(format!("candidate {c} listed twice")));
        }
    }
    let picked: Vec<f64> = candidates.iter().map(|&c| logits[c as usize]).collect();
    let max = picked.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = picked.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    Ok(exp.into_iter().map(|e| e / z).collect())
}
