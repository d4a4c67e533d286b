//! Autoregressive generation and teacher-forced scoring across the split,
//! with matching KV caches on the client (segments A and C) and the server
//! (segment B) so each decode step moves one position per row.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{KvCache, SegmentInput};
use crate::tensor::{log_softmax_row, Tensor};
use crate::train::{hidden_msg, unexpected, ClientNode};
use crate::wire::{CacheStepMsg, CommSnapshot, ControlCode, ControlMsg, MaskMeta, Message};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DecodeMode {
    Greedy,
    Temperature { tau: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
    pub mode: DecodeMode,
    /// Generation ends before emitting this id.
    pub stop_token: Option<u32>,
    /// Sampler seed for temperature mode.
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 16,
            mode: DecodeMode::Greedy,
            stop_token: None,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            max_new_tokens,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        if let DecodeMode::Temperature { tau } = self.mode {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::Config(format!("temperature must be positive, got {tau}")));
            }
        }
        Ok(())
    }
}

/// Output of one generation. On failure `tokens` holds what was produced
/// before the error.
#[derive(Debug)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub error: Option<Error>,
    pub decode_steps: usize,
    pub comm: CommSnapshot,
}

/// Client half of one cached session.
pub struct InferenceSession {
    pub id: u64,
    pub batch: usize,
    meta: MaskMeta,
    cache_a: KvCache,
    cache_c: KvCache,
}

impl InferenceSession {
    /// Positions processed so far.
    pub fn len(&self) -> usize {
        self.meta.seq_len
    }

    pub fn is_empty(&self) -> bool {
        self.meta.seq_len == 0
    }

    /// Per-block cache lengths of segments A and C.
    pub fn cache_lens(&self) -> (Vec<usize>, Vec<usize>) {
        (self.cache_a.layer_lens(), self.cache_c.layer_lens())
    }
}

/// Left-pad prompts with id 0 into one `[b, s]` block.
fn pack_prompts(prompts: &[Vec<u32>]) -> Result<(Vec<u32>, MaskMeta)> {
    if prompts.is_empty() || prompts.iter().any(|p| p.is_empty()) {
        return Err(Error::shape("every prompt needs at least one token"));
    }
    let s = prompts.iter().map(Vec::len).max().expect("non-empty");
    let pads: Vec<usize> = prompts.iter().map(|p| s - p.len()).collect();
    let mut ids = Vec::with_capacity(prompts.len() * s);
    for (p, pad) in prompts.iter().zip(&pads) {
        ids.extend(std::iter::repeat_n(0, *pad));
        ids.extend_from_slice(p);
    }
    let meta = if pads.iter().all(|p| *p == pads[0]) {
        MaskMeta::uniform(s, pads[0], prompts.len())?
    } else {
        MaskMeta::per_row(s, pads)?
    };
    Ok((ids, meta))
}

/// Rows `[b, V]` of the last position of `[b, s, V]` logits.
fn last_position(logits: &Tensor) -> Result<Tensor> {
    let &[b, s, v] = logits.shape() else {
        return Err(Error::shape(format!("logits {:?} are not [b, s, V]", logits.shape())));
    };
    let mut out = Vec::with_capacity(b * v);
    for row in 0..b {
        let start = (row * s + s - 1) * v;
        out.extend_from_slice(&logits.data()[start..start + v]);
    }
    Tensor::new(vec![b, v], out)
}

fn argmax(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best as u32
}

struct Sampler {
    mode: DecodeMode,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(cfg: &GenerationConfig) -> Self {
        Self {
            mode: cfg.mode,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        }
    }

    fn pick(&mut self, row: &[f64]) -> Result<u32> {
        match self.mode {
            DecodeMode::Greedy => Ok(argmax(row)),
            DecodeMode::Temperature { tau } => {
                let scaled: Vec<f64> = row.iter().map(|v| v / tau).collect();
                let weights: Vec<f64> = log_softmax_row(&scaled).iter().map(|v| v.exp()).collect();
                let dist = WeightedIndex::new(&weights)
                    .map_err(|e| Error::Config(format!("cannot sample from logits: {e}")))?;
                Ok(dist.sample(&mut self.rng) as u32)
            }
        }
    }
}

impl ClientNode {
    /// Run the whole prompt through A, B and C, filling both caches.
    /// Returns the session and the final-position logits `[b, V]`.
    pub fn prefill(&mut self, prompts: &[Vec<u32>]) -> Result<(InferenceSession, Tensor)> {
        let (ids, meta) = pack_prompts(prompts)?;
        let b = prompts.len();
        let positions: Vec<usize> = (0..meta.seq_len).collect();
        let mut cache_a = self.a.new_cache(b);
        let mut cache_c = self.c.new_cache(b);
        let h_a = self.a.forward(
            SegmentInput::Tokens { ids: &ids, batch: b },
            &meta,
            &positions,
            Some(&mut cache_a),
        )?;
        let h_a = self.noise.inference(h_a);
        let id = self.next_session;
        self.next_session += 1;
        let msg = hidden_msg(self.id, 0, id, positions.clone(), &meta, h_a, self.compress_mask)?;
        let h_b = match self.link.request(&Message::Prefill(msg))? {
            Message::Prefill(r) if r.session_id == id => r.hidden,
            other => return Err(unexpected("prefill", &other)),
        };
        let logits = self
            .c
            .forward(SegmentInput::Hidden(&h_b), &meta, &positions, Some(&mut cache_c))?;
        let session = InferenceSession {
            id,
            batch: b,
            meta,
            cache_a,
            cache_c,
        };
        Ok((session, last_position(&logits)?))
    }

    /// Feed one token per row at the next position; returns logits `[b, V]`.
    pub fn decode_step(&mut self, session: &mut InferenceSession, tokens: &[u32]) -> Result<Tensor> {
        if tokens.len() != session.batch {
            return Err(Error::shape(format!(
                "{} tokens for a session of {} rows",
                tokens.len(),
                session.batch
            )));
        }
        let position = session.len();
        for (side, cache) in [("A", &session.cache_a), ("C", &session.cache_c)] {
            let len = cache.len()?;
            if len != position {
                return Err(Error::Protocol(format!(
                    "client cache {side} holds {len} positions, session is at {position}"
                )));
            }
        }
        let meta = session.meta.extended(position + 1);
        let h_a = self.a.forward(
            SegmentInput::Tokens {
                ids: tokens,
                batch: session.batch,
            },
            &meta,
            &[position],
            Some(&mut session.cache_a),
        )?;
        let h_a = self.noise.inference(h_a);
        let msg = CacheStepMsg::new(session.id, position as u64, position, h_a)?;
        let h_b = match self.link.request(&Message::CacheStep(msg))? {
            Message::CacheStep(r) if r.session_id == session.id && r.position == position => r.hidden,
            other => return Err(unexpected("cache step", &other)),
        };
        let logits = self.c.forward(
            SegmentInput::Hidden(&h_b),
            &meta,
            &[position],
            Some(&mut session.cache_c),
        )?;
        session.meta = meta;
        last_position(&logits)
    }

    /// Release the server-side cache of `session`.
    pub fn close_session(&mut self, session: InferenceSession) -> Result<()> {
        let msg = ControlMsg {
            code: ControlCode::CloseSession,
            arg: session.id,
            detail: String::new(),
        };
        match self.link.request(&Message::Control(msg))? {
            Message::Control(c) if c.code == ControlCode::Ack => Ok(()),
            other => Err(unexpected("acknowledgement", &other)),
        }
    }

    /// Full-context forward with no cache on either side; logits `[b, s, V]`.
    pub fn infer_logits(&mut self, prompts: &[Vec<u32>]) -> Result<Tensor> {
        let (ids, meta) = pack_prompts(prompts)?;
        let b = prompts.len();
        let positions: Vec<usize> = (0..meta.seq_len).collect();
        let h_a = self.a.forward(
            SegmentInput::Tokens { ids: &ids, batch: b },
            &meta,
            &positions,
            None,
        )?;
        let h_a = self.noise.inference(h_a);
        let msg = hidden_msg(self.id, 0, 0, positions.clone(), &meta, h_a, self.compress_mask)?;
        let h_b = match self.link.request(&Message::Infer(msg))? {
            Message::Infer(r) => r.hidden,
            other => return Err(unexpected("inference", &other)),
        };
        self.c.forward(SegmentInput::Hidden(&h_b), &meta, &positions, None)
    }

    /// Cached generation: prefill, then one decode step per emitted token.
    pub fn generate(&mut self, prompt: &[u32], cfg: &GenerationConfig) -> Generation {
        let before = self.link.stats().snapshot();
        let mut tokens = Vec::new();
        let mut decode_steps = 0;
        let mut run = || -> Result<()> {
            cfg.validate()?;
            let mut sampler = Sampler::new(cfg);
            let (mut session, mut logits) = self.prefill(&[prompt.to_vec()])?;
            let result = (|| {
                while tokens.len() < cfg.max_new_tokens {
                    let next = sampler.pick(logits.data())?;
                    if Some(next) == cfg.stop_token {
                        break;
                    }
                    tokens.push(next);
                    logits = self.decode_step(&mut session, &[next])?;
                    decode_steps += 1;
                }
                Ok(())
            })();
            let closed = self.close_session(session);
            result.and(closed)
        };
        let error = run().err();
        Generation {
            tokens,
            error,
            decode_steps,
            comm: self.link.stats().snapshot().delta_since(&before),
        }
    }

    /// Reference generation that recomputes the whole context each token.
    pub fn generate_uncached(&mut self, prompt: &[u32], cfg: &GenerationConfig) -> Generation {
        let before = self.link.stats().snapshot();
        let mut tokens = Vec::new();
        let mut run = || -> Result<()> {
            cfg.validate()?;
            let mut sampler = Sampler::new(cfg);
            let mut context = prompt.to_vec();
            while tokens.len() < cfg.max_new_tokens {
                let logits = last_position(&self.infer_logits(&[context.clone()])?)?;
                let next = sampler.pick(logits.data())?;
                if Some(next) == cfg.stop_token {
                    break;
                }
                tokens.push(next);
                context.push(next);
            }
            Ok(())
        };
        let error = run().err();
        Generation {
            tokens,
            error,
            decode_steps: 0,
            comm: self.link.stats().snapshot().delta_since(&before),
        }
    }

    /// `Σ_t log P(answer_t | prompt, answer_<t)` through the cached path.
    pub fn score_multi_token(&mut self, prompt: &[u32], answer: &[u32]) -> Result<f64> {
        if answer.is_empty() {
            return Err(Error::shape("answer must be non-empty"));
        }
        let vocab = self.c.config.vocab_size;
        if let Some(&id) = answer.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::TokenId { id, vocab });
        }
        let (mut session, mut logits) = self.prefill(&[prompt.to_vec()])?;
        let mut total = 0.0;
        let result = (|| {
            for (t, &tok) in answer.iter().enumerate() {
                total += log_softmax_row(logits.data())[tok as usize];
                if t + 1 < answer.len() {
                    logits = self.decode_step(&mut session, &[tok])?;
                }
            }
            Ok(())
        })();
        let closed = self.close_session(session);
        result.and(closed).map(|_| total)
    }

    /// Same score from one uncached forward over `prompt ++ answer[..n-1]`.
    pub fn score_multi_token_uncached(&mut self, prompt: &[u32], answer: &[u32]) -> Result<f64> {
        if answer.is_empty() {
            return Err(Error::shape("answer must be non-empty"));
        }
        let vocab = self.c.config.vocab_size;
        if let Some(&id) = answer.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::TokenId { id, vocab });
        }
        let mut context = prompt.to_vec();
        context.extend_from_slice(&answer[..answer.len() - 1]);
        let logits = self.infer_logits(&[context])?;
        let v = logits.last_dim();
        let data = logits.data();
        Ok(answer
            .iter()
            .enumerate()
            .map(|(t, &tok)| {
                let pos = prompt.len() - 1 + t;
                log_softmax_row(&data[pos * v..(pos + 1) * v])[tok as usize]
            })
            .sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompts_are_left_padded() {
        let (ids, meta) = pack_prompts(&[vec![5, 6, 7], vec![8]]).unwrap();
        assert_eq!(ids, vec![5, 6, 7, 0, 0, 8]);
        assert_eq!(meta.pad_lens(), vec![0, 2]);
        let (_, uniform) = pack_prompts(&[vec![1, 2], vec![3, 4]]).unwrap();
        assert_eq!(uniform.wire_bytes(), 24);
    }

    #[test]
    fn argmax_takes_first_of_ties() {
        assert_eq!(argmax(&[0.0, 2.0, 2.0, -1.0]), 1);
    }

    #[test]
    fn config_rejects_zero_tokens_and_bad_temperature() {
        assert!(GenerationConfig::greedy(0).validate().is_err());
        let hot = GenerationConfig {
            mode: DecodeMode::Temperature { tau: 0.0 },
            ..GenerationConfig::default()
        };
        assert!(hot.validate().is_err());
    }
}
