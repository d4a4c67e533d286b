#![allow(dead_code)]

pub mod fd;

use fedsplit::model::ModelConfig;
use fedsplit::tensor::Tensor;
use fedsplit::train::{Batch, TrainStepRecord};
use fedsplit::wire::{HiddenStateMsg, MaskField, MaskMeta};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 2e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small model for brute-force and finite-difference oracles.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 23,
        hidden_size: 8,
        num_heads: 2,
        num_blocks: 3,
        mlp_hidden: 12,
        max_context: 16,
        ..ModelConfig::default()
    }
}

/// Central differences at steps `h` and `h/2` combined by Richardson
/// extrapolation; truncation error is O(h⁴). The step scales with the
/// coordinate so inputs near a function's own length scale are not
/// straddled.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut diff = |probe: &mut Vec<f64>, i: usize, h: f64| {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(probe);
        probe[i] = orig - h;
        let down = f(probe);
        probe[i] = orig;
        (up - down) / (2.0 * h)
    };
    (0..x.len())
        .map(|i| {
            let h = FD_STEP * x[i].abs().clamp(1e-3, 1.0);
            let coarse = diff(&mut probe, i, h);
            let fine = diff(&mut probe, i, h / 2.0);
            (4.0 * fine - coarse) / 3.0
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn randn_vec(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    Tensor::randn(&[n], 1.0, r).into_data()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn random_tokens(n: usize, vocab: usize, r: &mut ChaCha8Rng) -> Vec<u32> {
    (0..n).map(|_| r.random_range(0..vocab as u32)).collect()
}

pub fn report(id: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "[{}] criterion {id:02}: {name} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
}

/// Left-padded batch of `rows` random sequences with lengths in `[3, max_len]`.
pub fn random_batch(vocab: usize, rows: usize, max_len: usize, r: &mut ChaCha8Rng) -> Batch {
    let seqs: Vec<Vec<u32>> = (0..rows)
        .map(|_| {
            let n = r.random_range(3..=max_len);
            random_tokens(n, vocab, r)
        })
        .collect();
    Batch::from_sequences(&seqs, 0, Some(max_len - 1)).unwrap()
}

/// Loss values as raw bits for exact comparison.
pub fn loss_bits(records: &[TrainStepRecord]) -> Vec<u64> {
    records.iter().map(|r| r.loss.to_bits()).collect()
}

/// `m` client messages of random hidden states `[rows, s, d]` with random
/// left padding, all at step 0.
pub fn client_msgs(m: usize, rows: usize, s: usize, d: usize, r: &mut ChaCha8Rng) -> Vec<HiddenStateMsg> {
    (0..m)
        .map(|i| {
            let pads = (0..rows).map(|_| r.random_range(0..s)).collect();
            HiddenStateMsg {
                client_id: i as u64,
                step_id: 0,
                session_id: 0,
                positions: (0..s).collect(),
                mask: MaskField::Meta(MaskMeta::per_row(s, pads).unwrap()),
                hidden: Tensor::randn(&[rows, s, d], 1.0, r),
            }
        })
        .collect()
}

pub fn loss_bits_of(losses: &[f64]) -> Vec<u64> {
    losses.iter().map(|l| l.to_bits()).collect()
}
