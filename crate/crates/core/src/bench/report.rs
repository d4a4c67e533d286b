use serde::Serialize;

use crate::error::Result;
use crate::model::{ModelConfig, PartitionSpec};
use crate::train::{split_segments, Federation, FederationConfig};
use crate::wire::{CommSnapshot, MaskMeta, ScalarWidth};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemoryProxy {
    pub p: usize,
    pub k: usize,
    pub q: usize,
    /// Parameters resident on a client (segments A and C, adapters included).
    pub client_params: usize,
    pub server_params: usize,
    pub total_params: usize,
    pub client_fraction: f64,
    /// `1 − client_fraction`.
    pub reduction: f64,
}

pub fn memory_proxy(model: &ModelConfig, spec: PartitionSpec) -> Result<MemoryProxy> {
    let (a, b, c) = split_segments(model, spec, 0)?;
    let client_params = a.param_count() + c.param_count();
    let server_params = b.param_count();
    let total_params = client_params + server_params;
    let client_fraction = client_params as f64 / total_params as f64;
    Ok(MemoryProxy {
        p: spec.p,
        k: spec.k,
        q: spec.q,
        client_params,
        server_params,
        total_params,
        client_fraction,
        reduction: 1.0 - client_fraction,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct MaskSummary {
    pub batch: usize,
    pub seq_len: usize,
    pub scalar_width: usize,
    pub meta_bytes: usize,
    pub full_mask_bytes: usize,
    /// Totals recorded by a run's links, when one was given.
    pub run_meta_bytes: Option<u64>,
    pub run_full_equiv_bytes: Option<u64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DecodePoint {
    pub context: usize,
    /// Bytes on the wire, both directions, for one cached decode step.
    pub cached_step_bytes: u64,
    /// Bytes for one uncached full-context pass producing the same token.
    pub uncached_step_bytes: u64,
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CommReport {
    pub run: Option<CommSnapshot>,
    pub mask: MaskSummary,
    pub decode: Vec<DecodePoint>,
    /// Uncached bytes at the largest context over the smallest.
    pub uncached_growth: f64,
    pub context_ratio: f64,
}

/// Byte accounting for mask compression and for cached versus uncached
/// decoding, measured on live loopback sessions at each `contexts` length.
pub fn comm_report(
    model: &ModelConfig,
    spec: PartitionSpec,
    width: ScalarWidth,
    contexts: &[usize],
    run: Option<CommSnapshot>,
) -> Result<CommReport> {
    let meta = MaskMeta::uniform(128, 0, 2)?;
    let mask = MaskSummary {
        batch: 2,
        seq_len: 128,
        scalar_width: width.bytes(),
        meta_bytes: meta.wire_bytes(),
        full_mask_bytes: meta.full_mask_bytes(width.bytes()),
        run_meta_bytes: run.as_ref().map(|r| r.mask_bytes),
        run_full_equiv_bytes: run.as_ref().map(|r| r.mask_full_equiv_bytes),
    };
    let longest = contexts.iter().copied().max().unwrap_or(1);
    let wide = ModelConfig {
        max_context: model.max_context.max(longest + 1),
        ..model.clone()
    };
    let mut fc = FederationConfig::new(wide.clone(), spec, 0, 1);
    fc.width = width;
    let (a, b, c) = split_segments(&wide, spec, 0)?;
    let mut fed = Federation::start_with(&fc, a, b, c, vec![None])?;
    let client = &mut fed.clients[0];
    let mut decode = Vec::new();
    for &len in contexts {
        let prompt: Vec<u32> = (0..len).map(|i| (i % wide.vocab_size) as u32).collect();
        let (mut session, _) = client.prefill(std::slice::from_ref(&prompt))?;
        let before = client.link().stats().snapshot();
        client.decode_step(&mut session, &[1])?;
        let cached = client.link().stats().snapshot().delta_since(&before).total_bytes();
        client.close_session(session)?;
        let mut context = prompt;
        context.push(1);
        let before = client.link().stats().snapshot();
        client.infer_logits(&[context])?;
        let uncached = client.link().stats().snapshot().delta_since(&before).total_bytes();
        decode.push(DecodePoint {
            context: len,
            cached_step_bytes: cached,
            uncached_step_bytes: uncached,
            ratio: uncached as f64 / cached as f64,
        });
    }
    drop(fed);
    let (first, last) = (decode.first(), decode.last());
    let uncached_growth = match (first, last) {
        (Some(f), Some(l)) => l.uncached_step_bytes as f64 / f.uncached_step_bytes as f64,
        _ => 1.0,
    };
    let context_ratio = match (first, last) {
        (Some(f), Some(l)) => l.context as f64 / f.context as f64,
        _ => 1.0,
    };
    Ok(CommReport {
        run,
        mask,
        decode,
        uncached_growth,
        context_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn memory_proxy_counts_by_hand() {
        let cfg = ModelConfig::default();
        let (v, d, m, r) = (256, 64, 172, 8);
        let attn = 4 * d * d + 4 * (r * d + d * r);
        let block = attn + 3 * d * m + 2 * d;
        let client = v * d + block + block + d + v * d;
        let total = client + 4 * block;
        let got = memory_proxy(&cfg, PartitionSpec::new(1, 4, 1)).unwrap();
        assert_eq!((got.client_params, got.total_params), (client, total));
        assert!((got.client_fraction - client as f64 / total as f64).abs() < 1e-15);
    }
}
