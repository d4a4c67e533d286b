use serde::{Deserialize, Serialize};

use super::batch::{Batch, IGNORE};
use super::noise::{NoiseConfig, NoiseInjector};
use crate::error::{Error, Result};
use crate::model::{GradMode, Grads, SegmentInput, SegmentModel, SegmentTape};
use crate::tensor::{softmax_cross_entropy, Tensor};
use crate::wire::{
    reconstruct_mask, CommSnapshot, GradMsg, HiddenStateMsg, Link, MaskField, MaskMeta, Message,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStepRecord {
    pub step: u64,
    pub client_id: u64,
    pub loss: f64,
    pub grad_norm_a: f64,
    pub grad_norm_c: f64,
    /// Norm of `∇h_B` as sent to the server.
    pub grad_norm_h_b: f64,
    /// Norm of `∇h_A` as returned by the server.
    pub grad_norm_h_a: f64,
    pub comm: CommSnapshot,
}

/// Cross-entropy over a `[b, s, V]` logits tensor; returns the loss and
/// `∂L/∂logits` in the same shape.
pub fn token_loss(logits: &Tensor, targets: &[u32]) -> Result<(f64, Tensor)> {
    let shape = logits.shape().to_vec();
    let vocab = logits.last_dim();
    let flat = logits.clone().reshape(&[logits.rows(), vocab])?;
    let (loss, grad) = softmax_cross_entropy(&flat, targets, IGNORE)?;
    Ok((loss, grad.reshape(&shape)?))
}

/// Message carrying a segment-A output toward the server.
pub(crate) fn hidden_msg(
    client_id: u64,
    step_id: u64,
    session_id: u64,
    positions: Vec<usize>,
    meta: &MaskMeta,
    hidden: Tensor,
    compress: bool,
) -> Result<HiddenStateMsg> {
    let mask = if compress {
        MaskField::Meta(meta.clone())
    } else {
        MaskField::Full(reconstruct_mask(meta)?)
    };
    Ok(HiddenStateMsg {
        client_id,
        step_id,
        session_id,
        positions,
        mask,
        hidden,
    })
}

/// A data-holding client: input segment A, output segment C, its own noise
/// source and one link to the server.
pub struct ClientNode {
    pub id: u64,
    pub a: SegmentModel,
    pub c: SegmentModel,
    pub lr: f64,
    /// Send compressed mask metadata instead of the full mask.
    pub compress_mask: bool,
    pub(crate) noise: NoiseInjector,
    pub(crate) link: Link,
    step: u64,
    pub(crate) next_session: u64,
    last_grads: Option<Grads>,
}

impl ClientNode {
    pub fn new(
        id: u64,
        a: SegmentModel,
        c: SegmentModel,
        link: Link,
        noise: NoiseConfig,
        lr: f64,
    ) -> Self {
        Self {
            id,
            a,
            c,
            lr,
            compress_mask: true,
            noise: NoiseInjector::new(noise, id),
            link,
            step: 0,
            next_session: 0,
            last_grads: None,
        }
    }

    pub fn link(&self) -> &Link {
        &self.link
    }

    pub fn link_mut(&mut self) -> &mut Link {
        &mut self.link
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    /// Adapter gradients of segments A and C from the latest step.
    pub fn last_grads(&self) -> Option<&Grads> {
        self.last_grads.as_ref()
    }

    /// Drop the link and keep the trained segments.
    pub fn into_segments(self) -> (SegmentModel, SegmentModel) {
        (self.a, self.c)
    }

    pub fn noise_config(&self) -> &NoiseConfig {
        &self.noise.config
    }

    /// Step ①: segment A forward plus optional noise, packed for the server.
    pub fn client_forward(&mut self, batch: &Batch) -> Result<(HiddenStateMsg, SegmentTape)> {
        let (h_a, tape) = self.a.forward_train(
            SegmentInput::Tokens {
                ids: &batch.tokens,
                batch: batch.batch,
            },
            &batch.meta,
            &batch.positions(),
        )?;
        let h_a = self.noise.forward(h_a);
        let msg = hidden_msg(
            self.id,
            self.step,
            0,
            batch.positions(),
            &batch.meta,
            h_a,
            self.compress_mask,
        )?;
        Ok((msg, tape))
    }

    /// One full relay: ① `h_A` out, ② `h_B` back, loss and segment C update,
    /// ③ `∇h_B` out, ④ `∇h_A` back and segment A update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<TrainStepRecord> {
        let before = self.link.stats().snapshot();
        let (msg, tape_a) = self.client_forward(batch)?;
        let h_b = match self.link.request(&Message::HiddenState(msg))? {
            Message::HiddenState(r) if r.client_id == self.id && r.step_id == self.step => r.hidden,
            other => return Err(unexpected("hidden state", &other)),
        };
        let (logits, tape_c) = self.c.forward_train(
            SegmentInput::Hidden(&h_b),
            &batch.meta,
            &batch.positions(),
        )?;
        let (loss, dlogits) = token_loss(&logits, &batch.targets)?;
        let back_c = self.c.backward(tape_c, &dlogits, GradMode::LoraOnly)?;
        self.c.apply_lora_step(&back_c.params, self.lr)?;
        let grad_h_b = self
            .noise
            .backward(back_c.input.expect("segment C reads hidden states"));
        let grad_norm_h_b = grad_h_b.norm();
        let reply = self.link.request(&Message::Grad(GradMsg {
            client_id: self.id,
            step_id: self.step,
            grad: grad_h_b,
        }))?;
        let grad_h_a = match reply {
            Message::Grad(g) if g.client_id == self.id && g.step_id == self.step => g.grad,
            other => return Err(unexpected("gradient", &other)),
        };
        let back_a = self.a.backward(tape_a, &grad_h_a, GradMode::LoraOnly)?;
        self.a.apply_lora_step(&back_a.params, self.lr)?;
        let record = TrainStepRecord {
            step: self.step,
            client_id: self.id,
            loss,
            grad_norm_a: back_a.params.norm(),
            grad_norm_c: back_c.params.norm(),
            grad_norm_h_b,
            grad_norm_h_a: grad_h_a.norm(),
            comm: self.link.stats().snapshot().delta_since(&before),
        };
        let mut grads = back_a.params;
        grads.extend(back_c.params);
        self.last_grads = Some(grads);
        self.step += 1;
        Ok(record)
    }
}

pub(crate) fn unexpected(wanted: &str, got: &Message) -> Error {
    Error::Protocol(format!("expected {wanted} reply, got {:?}", got.class()))
}
