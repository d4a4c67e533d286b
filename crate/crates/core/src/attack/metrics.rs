use std::collections::HashMap;

use crate::error::{Error, Result};

fn ngram_counts(tokens: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and candidate total for order `n`.
fn clipped(candidate: &[u32], reference: &[u32], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let matched = cand
        .iter()
        .map(|(g, c)| (*c).min(refc.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

/// Unsmoothed BLEU-4 over paired sentences with corpus-level counts: the
/// geometric mean of clipped 1–4-gram precisions times the brevity penalty.
/// Zero when any precision is zero or the candidates are empty.
pub fn bleu4_corpus(pairs: &[(&[u32], &[u32])]) -> Result<f64> {
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut cand_len, mut ref_len) = (0, 0);
    for (cand, reference) in pairs {
        if reference.is_empty() {
            return Err(Error::UndefinedMetric("BLEU needs a non-empty reference".into()));
        }
        cand_len += cand.len();
        ref_len += reference.len();
        for n in 1..=4 {
            let (m, t) = clipped(cand, reference, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    if cand_len == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4)
        .map(|i| (matched[i] as f64 / total[i] as f64).ln())
        .sum::<f64>()
        / 4.0;
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

/// Sentence-level BLEU-4.
pub fn bleu4(candidate: &[u32], reference: &[u32]) -> Result<f64> {
    bleu4_corpus(&[(candidate, reference)])
}

/// Bigram-overlap F1 with clipped counts.
pub fn rouge2_f1(candidate: &[u32], reference: &[u32]) -> Result<f64> {
    if reference.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "ROUGE-2 needs a reference of at least 2 tokens, got {}",
            reference.len()
        )));
    }
    let (overlap, cand_total) = clipped(candidate, reference, 2);
    if overlap == 0 {
        return Ok(0.0);
    }
    let p = overlap as f64 / cand_total as f64;
    let r = overlap as f64 / (reference.len() - 1) as f64;
    Ok(2.0 * p * r / (p + r))
}

/// Fraction of positions where the sequences agree; lengths must match.
pub fn token_accuracy(candidate: &[u32], reference: &[u32]) -> Result<f64> {
    if candidate.len() != reference.len() || reference.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "token accuracy needs equal non-empty lengths, got {} and {}",
            candidate.len(),
            reference.len()
        )));
    }
    let hits = candidate.iter().zip(reference).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / reference.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sequences_score_one() {
        let s = [4, 8, 15, 16, 23, 42];
        assert_eq!(bleu4(&s, &s).unwrap(), 1.0);
        assert_eq!(rouge2_f1(&s, &s).unwrap(), 1.0);
    }

    #[test]
    fn bleu_without_four_gram_overlap_is_zero() {
        assert_eq!(bleu4(&[1, 2, 3, 9, 4, 5], &[1, 2, 3, 4, 5, 6]).unwrap(), 0.0);
        assert_eq!(bleu4(&[], &[1, 2]).unwrap(), 0.0);
    }

    #[test]
    fn bleu_hand_example() {
        // Candidate a b c d e x, reference a b c d e f: matches 5/6, 4/5,
        // 3/4, 2/3 and equal lengths, so BLEU = (5/6·4/5·3/4·2/3)^(1/4) = (1/3)^(1/4).
        let got = bleu4(&[1, 2, 3, 4, 5, 9], &[1, 2, 3, 4, 5, 6]).unwrap();
        assert!((got - (1.0f64 / 3.0).powf(0.25)).abs() < 1e-15);
        // Shorter candidate a b c d e: precisions 1, brevity penalty e^(1-6/5).
        let short = bleu4(&[1, 2, 3, 4, 5], &[1, 2, 3, 4, 5, 6]).unwrap();
        assert!((short - (1.0f64 - 6.0 / 5.0).exp()).abs() < 1e-15);
    }

    #[test]
    fn bleu_clips_repeated_ngrams() {
        // Unigram precision 2/7 from clipping "the" to its reference count.
        let (m, t) = clipped(&[7; 7], &[7, 1, 2, 7, 3, 4], 1);
        assert_eq!((m, t), (2, 7));
    }

    #[test]
    fn rouge_hand_example() {
        // Candidate bigrams: 12 23 34 45 56; reference: 12 23 39 94 45 57.
        let got = rouge2_f1(&[1, 2, 3, 4, 5, 6], &[1, 2, 3, 9, 4, 5, 7]).unwrap();
        assert!((got - 6.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn rouge_edge_cases() {
        assert_eq!(rouge2_f1(&[1, 2, 3], &[4, 5, 6]).unwrap(), 0.0);
        assert!(matches!(rouge2_f1(&[1, 2], &[1]), Err(Error::UndefinedMetric(_))));
    }
}
