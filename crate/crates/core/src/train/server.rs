use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::{GradMode, Grads, KvCache, SegmentInput, SegmentModel, SegmentTape};
use crate::tensor::Tensor;
use crate::wire::{
    CacheStepMsg, ControlCode, ControlMsg, GradMsg, HiddenStateMsg, MaskField, MaskMeta, Message,
};

/// Read-only observer of training traffic at the server. Runs after the
/// legitimate forward and cannot alter the reply.
pub trait AttackHook: Send {
    fn on_hidden_state(&mut self, msg: &HiddenStateMsg);
}

struct PendingBatch {
    step_id: u64,
    /// `(client_id, rows)` in concatenation order.
    parts: Vec<(u64, usize)>,
    tape: SegmentTape,
}

struct Session {
    cache: KvCache,
    meta: MaskMeta,
}

/// Server-side state: the B segment, one training tape per client, one KV
/// cache per inference session.
pub struct ServerNode {
    pub segment: SegmentModel,
    pub lr: f64,
    tapes: HashMap<u64, (u64, SegmentTape)>,
    batch: Option<PendingBatch>,
    sessions: HashMap<u64, Session>,
    hook: Option<Box<dyn AttackHook>>,
    forwards: u64,
    backwards: u64,
    last_grads: Option<Grads>,
    shutdown: bool,
}

impl ServerNode {
    pub fn new(segment: SegmentModel, lr: f64) -> Self {
        Self {
            segment,
            lr,
            tapes: HashMap::new(),
            batch: None,
            sessions: HashMap::new(),
            hook: None,
            forwards: 0,
            backwards: 0,
            last_grads: None,
            shutdown: false,
        }
    }

    pub fn set_hook(&mut self, hook: Box<dyn AttackHook>) {
        self.hook = Some(hook);
    }

    pub fn take_hook(&mut self) -> Option<Box<dyn AttackHook>> {
        self.hook.take()
    }

    /// Training forwards processed (a client batch counts once per client).
    pub fn forwards(&self) -> u64 {
        self.forwards
    }

    pub fn backwards(&self) -> u64 {
        self.backwards
    }

    /// Adapter gradients of the most recent backward pass.
    pub fn last_grads(&self) -> Option<&Grads> {
        self.last_grads.as_ref()
    }

    pub fn active_sessions(&self) -> usize {
        self.sessions.len()
    }

    pub fn session_cache(&self, session_id: u64) -> Option<&KvCache> {
        self.sessions.get(&session_id).map(|s| &s.cache)
    }

    pub fn is_shutdown(&self) -> bool {
        self.shutdown
    }

    fn check_hidden(&self, msg: &HiddenStateMsg) -> Result<MaskMeta> {
        let d = self.segment.hidden_size();
        match msg.hidden.shape() {
            &[_, _, hd] if hd == d => {}
            other => {
                return Err(Error::Protocol(format!(
                    "hidden state {other:?} does not match server width {d}"
                )))
            }
        }
        msg.mask.meta()
    }

    fn reply_hidden(req: &HiddenStateMsg, meta: MaskMeta, hidden: Tensor) -> HiddenStateMsg {
        HiddenStateMsg {
            client_id: req.client_id,
            step_id: req.step_id,
            session_id: req.session_id,
            positions: req.positions.clone(),
            mask: MaskField::Meta(meta),
            hidden,
        }
    }

    /// Training forward of one client's `h_A`; keeps the tape for the
    /// matching gradient.
    pub fn server_forward(&mut self, msg: &HiddenStateMsg) -> Result<HiddenStateMsg> {
        let meta = self.check_hidden(msg)?;
        let (h_b, tape) =
            self.segment
                .forward_train(SegmentInput::Hidden(&msg.hidden), &meta, &msg.positions)?;
        self.tapes.insert(msg.client_id, (msg.step_id, tape));
        self.forwards += 1;
        if let Some(hook) = self.hook.as_mut() {
            hook.on_hidden_state(msg);
        }
        Ok(Self::reply_hidden(msg, meta, h_b))
    }

    fn apply(&mut self, grads: Grads) -> Result<()> {
        self.segment.apply_lora_step(&grads, self.lr)?;
        self.last_grads = Some(grads);
        Ok(())
    }

    /// Backward for one client: returns `∇h_A` and applies the adapter step.
    pub fn server_backward(&mut self, msg: &GradMsg) -> Result<GradMsg> {
        let (step, tape) = self.tapes.remove(&msg.client_id).ok_or_else(|| {
            Error::ProtocolOrder(format!("gradient from client {} before any forward", msg.client_id))
        })?;
        if step != msg.step_id {
            return Err(Error::ProtocolOrder(format!(
                "gradient for step {} but forward was step {step}",
                msg.step_id
            )));
        }
        let out = self.segment.backward(tape, &msg.grad, GradMode::LoraOnly)?;
        self.apply(out.params)?;
        self.backwards += 1;
        Ok(GradMsg {
            client_id: msg.client_id,
            step_id: msg.step_id,
            grad: out.input.expect("server input is hidden state"),
        })
    }

    /// One forward over all clients' hidden states concatenated along the
    /// batch axis in client-id order. Replies come back in that order.
    pub fn client_batch_forward(&mut self, msgs: &[HiddenStateMsg]) -> Result<Vec<HiddenStateMsg>> {
        let mut sorted: Vec<&HiddenStateMsg> = msgs.iter().collect();
        sorted.sort_by_key(|m| m.client_id);
        let first = *sorted
            .first()
            .ok_or_else(|| Error::BatchIncompatible("no client messages".into()))?;
        if sorted.windows(2).any(|w| w[0].client_id == w[1].client_id) {
            return Err(Error::BatchIncompatible("duplicate client id".into()));
        }
        let mut metas = Vec::with_capacity(sorted.len());
        for m in &sorted {
            let meta = self.check_hidden(m)?;
            if m.hidden.shape()[1] != first.hidden.shape()[1] || m.positions != first.positions {
                return Err(Error::BatchIncompatible(format!(
                    "client {} has sequence length {} vs {}",
                    m.client_id,
                    m.hidden.shape()[1],
                    first.hidden.shape()[1]
                )));
            }
            if m.step_id != first.step_id {
                return Err(Error::BatchIncompatible(format!(
                    "client {} is at step {} vs {}",
                    m.client_id, m.step_id, first.step_id
                )));
            }
            metas.push(meta);
        }
        let meta = MaskMeta::concat(&metas.iter().collect::<Vec<_>>())?;
        let hidden = Tensor::concat(&sorted.iter().map(|m| &m.hidden).collect::<Vec<_>>())?;
        let (h_b, tape) =
            self.segment
                .forward_train(SegmentInput::Hidden(&hidden), &meta, &first.positions)?;
        let rows: Vec<usize> = sorted.iter().map(|m| m.hidden.shape()[0]).collect();
        let pieces = h_b.split(&rows)?;
        self.batch = Some(PendingBatch {
            step_id: first.step_id,
            parts: sorted.iter().map(|m| m.client_id).zip(rows.iter().copied()).collect(),
            tape,
        });
        self.forwards += sorted.len() as u64;
        let mut replies = Vec::with_capacity(sorted.len());
        for ((m, piece), meta) in sorted.iter().zip(pieces).zip(metas) {
            if let Some(hook) = self.hook.as_mut() {
                hook.on_hidden_state(m);
            }
            replies.push(Self::reply_hidden(m, meta, piece));
        }
        Ok(replies)
    }

    /// Backward of the pending client batch; returns per-client `∇h_A` in
    /// client-id order and applies one adapter step with the summed gradient.
    pub fn client_batch_backward(&mut self, grads: &[GradMsg]) -> Result<Vec<GradMsg>> {
        let pending = self
            .batch
            .take()
            .ok_or_else(|| Error::ProtocolOrder("no client batch awaiting gradients".into()))?;
        let mut ordered = Vec::with_capacity(pending.parts.len());
        for (cid, _) in &pending.parts {
            match grads.iter().find(|g| g.client_id == *cid) {
                Some(g) if g.step_id == pending.step_id => ordered.push(g),
                Some(g) => {
                    return Err(Error::ProtocolOrder(format!(
                        "client {cid} sent gradient for step {} during step {}",
                        g.step_id, pending.step_id
                    )))
                }
                None => {}
            }
        }
        if ordered.len() != pending.parts.len() || grads.len() != pending.parts.len() {
            return Err(Error::BarrierTimeout {
                missing: pending.parts.len().saturating_sub(ordered.len()),
            });
        }
        let g = Tensor::concat(&ordered.iter().map(|g| &g.grad).collect::<Vec<_>>())?;
        let out = self.segment.backward(pending.tape, &g, GradMode::LoraOnly)?;
        self.apply(out.params)?;
        self.backwards += ordered.len() as u64;
        let rows: Vec<usize> = pending.parts.iter().map(|(_, r)| *r).collect();
        let pieces = out.input.expect("server input is hidden state").split(&rows)?;
        Ok(pending
            .parts
            .iter()
            .zip(pieces)
            .map(|((cid, _), grad)| GradMsg {
                client_id: *cid,
                step_id: pending.step_id,
                grad,
            })
            .collect())
    }

    /// Drop a half-finished client batch.
    pub fn abandon_batch(&mut self) {
        self.batch = None;
    }

    pub fn prefill(&mut self, msg: &HiddenStateMsg) -> Result<HiddenStateMsg> {
        let meta = self.check_hidden(msg)?;
        if self.sessions.contains_key(&msg.session_id) {
            return Err(Error::Protocol(format!(
                "session {} already has a cache",
                msg.session_id
            )));
        }
        let mut cache = self.segment.new_cache(msg.hidden.shape()[0]);
        let h_b = self.segment.forward(
            SegmentInput::Hidden(&msg.hidden),
            &meta,
            &msg.positions,
            Some(&mut cache),
        )?;
        self.sessions
            .insert(msg.session_id, Session { cache, meta: meta.clone() });
        Ok(Self::reply_hidden(msg, meta, h_b))
    }

    pub fn decode_step(&mut self, msg: &CacheStepMsg) -> Result<CacheStepMsg> {
        let session = self.sessions.get_mut(&msg.session_id).ok_or_else(|| {
            Error::Protocol(format!("no cache for session {}", msg.session_id))
        })?;
        let len = session.cache.len()?;
        if len != msg.position {
            return Err(Error::Protocol(format!(
                "cache desync in session {}: server holds {len} positions, client sent position {}",
                msg.session_id, msg.position
            )));
        }
        let meta = session.meta.extended(msg.position + 1);
        let h_b = self.segment.forward(
            SegmentInput::Hidden(&msg.hidden),
            &meta,
            &[msg.position],
            Some(&mut session.cache),
        )?;
        session.meta = meta;
        CacheStepMsg::new(msg.session_id, msg.step_id, msg.position, h_b)
    }

    /// Stateless forward with no cache and no tape.
    pub fn infer(&mut self, msg: &HiddenStateMsg) -> Result<HiddenStateMsg> {
        let meta = self.check_hidden(msg)?;
        let h_b = self
            .segment
            .forward(SegmentInput::Hidden(&msg.hidden), &meta, &msg.positions, None)?;
        Ok(Self::reply_hidden(msg, meta, h_b))
    }

    /// Serve one request in per-request mode.
    pub fn handle(&mut self, msg: &Message) -> Result<Message> {
        Ok(match msg {
            Message::HiddenState(m) => Message::HiddenState(self.server_forward(m)?),
            Message::Grad(g) => Message::Grad(self.server_backward(g)?),
            Message::Prefill(m) => Message::Prefill(self.prefill(m)?),
            Message::CacheStep(c) => Message::CacheStep(self.decode_step(c)?),
            Message::Infer(m) => Message::Infer(self.infer(m)?),
            Message::Control(c) => match c.code {
                ControlCode::CloseSession => {
                    self.sessions.remove(&c.arg);
                    Message::Control(ControlMsg::ack())
                }
                ControlCode::Shutdown => {
                    self.shutdown = true;
                    Message::Control(ControlMsg::ack())
                }
                ControlCode::Ack => Message::Control(ControlMsg::ack()),
                other => {
                    return Err(Error::Protocol(format!(
                        "server does not accept control code {other:?}"
                    )))
                }
            },
        })
    }
}
