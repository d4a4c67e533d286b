//! Honest-but-curious server with a colluding client: the server trains a
//! fresh decoder on the colluder's `(h_A, plaintext)` pairs while relaying
//! traffic unchanged, then inverts the honest client's hidden states.

mod metrics;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

pub use metrics::{bleu4, bleu4_corpus, rouge2_f1, token_accuracy};

use crate::error::{Error, Result};
use crate::model::{GradMode, Grads, ModelConfig, PartitionSpec, SegmentInput, SegmentModel};
use crate::train::{
    run_sequential_round, split_segments, token_loss, AttackHook, Batch, Federation, FederationConfig, NoiseConfig,
    IGNORE,
};
use crate::wire::{FrameLog, HiddenStateMsg};

/// Adam over named parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step(&mut self, model: &mut SegmentModel, grads: &Grads) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (lr, eps) = (self.lr, self.eps);
        let moments = &mut self.moments;
        model.visit_params_mut(&mut |name, param| {
            let Some(g) = grads.get(name) else { return };
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (((p, g), m), v) in param.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        });
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Decoder depth; defaults to the client's block count.
    pub decoder_blocks: Option<usize>,
    pub lr: f64,
    /// Optimizer steps per intercepted colluder message.
    pub inner_steps: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            decoder_blocks: None,
            lr: 3e-3,
            inner_steps: 1,
            seed: 1234,
        }
    }
}

/// Reconstruction decoder trained only on the colluder's pairs.
pub struct AttackModel {
    pub decoder: SegmentModel,
    opt: Adam,
}

impl AttackModel {
    pub fn new(config: &ModelConfig, blocks: usize, attack: &AttackConfig) -> Result<Self> {
        Ok(Self {
            decoder: SegmentModel::fresh_decoder(config, blocks, attack.seed)?,
            opt: Adam::new(attack.lr),
        })
    }

    /// One update on hidden states `[b, s, d]` labelled with the input ids
    /// (`IGNORE` at padding); returns the loss before the update.
    pub fn train_on(&mut self, msg: &HiddenStateMsg, labels: &[u32]) -> Result<f64> {
        let meta = msg.mask.meta()?;
        let (logits, tape) =
            self.decoder
                .forward_train(SegmentInput::Hidden(&msg.hidden), &meta, &msg.positions)?;
        let (loss, dlogits) = token_loss(&logits, labels)?;
        let grads = self.decoder.backward(tape, &dlogits, GradMode::Full)?;
        self.opt.step(&mut self.decoder, &grads.params);
        Ok(loss)
    }

    /// Argmax token per position, `[b·s]`.
    pub fn reconstruct(&self, msg: &HiddenStateMsg) -> Result<Vec<u32>> {
        let meta = msg.mask.meta()?;
        let logits = self
            .decoder
            .forward(SegmentInput::Hidden(&msg.hidden), &meta, &msg.positions, None)?;
        let v = logits.last_dim();
        Ok(logits
            .data()
            .chunks(v)
            .map(|row| {
                let mut best = 0;
                for (i, x) in row.iter().enumerate() {
                    if *x > row[best] {
                        best = i;
                    }
                }
                best as u32
            })
            .collect())
    }
}

/// Input ids with padding replaced by `IGNORE`.
pub fn input_labels(batch: &Batch) -> Vec<u32> {
    let mut labels = batch.tokens.clone();
    for row in 0..batch.batch {
        let pad = batch.meta.pad_len(row);
        labels[row * batch.seq_len..row * batch.seq_len + pad].fill(IGNORE);
    }
    labels
}

/// Plaintext the colluder hands the server, keyed by step.
pub type SideChannel = Arc<Mutex<HashMap<u64, Vec<u32>>>>;

/// State the server-side hook builds up during training.
pub struct AttackState {
    pub model: AttackModel,
    pub malicious_id: u64,
    pub losses: Vec<f64>,
    /// Every hidden state intercepted from other clients.
    pub intercepted: Vec<HiddenStateMsg>,
    inner_steps: usize,
    side: SideChannel,
    error: Option<Error>,
}

struct Hook(Arc<Mutex<AttackState>>);

impl AttackHook for Hook {
    fn on_hidden_state(&mut self, msg: &HiddenStateMsg) {
        let Ok(mut st) = self.0.lock() else { return };
        if msg.client_id != st.malicious_id {
            st.intercepted.push(msg.clone());
            return;
        }
        let labels = st.side.lock().ok().and_then(|mut s| s.remove(&msg.step_id));
        let Some(labels) = labels else {
            st.error.get_or_insert(Error::ThreatModel(format!(
                "colluder sent no plaintext for step {}",
                msg.step_id
            )));
            return;
        };
        for _ in 0..st.inner_steps {
            match st.model.train_on(msg, &labels) {
                Ok(loss) => st.losses.push(loss),
                Err(e) => {
                    st.error.get_or_insert(e);
                    return;
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttackRunConfig {
    pub model: ModelConfig,
    pub spec: PartitionSpec,
    pub seed: u64,
    pub lr: f64,
    pub noise: NoiseConfig,
    pub steps: usize,
    pub attack: AttackConfig,
}

#[derive(Clone, Debug, Serialize)]
pub struct AttackReport {
    pub p: usize,
    pub delta: f64,
    pub token_accuracy: f64,
    pub bleu4: f64,
    pub rouge2_f1: f64,
    pub token_accuracy_x100: f64,
    pub bleu4_x100: f64,
    pub rouge2_f1_x100: f64,
    /// `1/V`.
    pub chance: f64,
    pub attack_loss_first: f64,
    pub attack_loss_last: f64,
    pub honest_losses: Vec<f64>,
    pub evaluated_tokens: usize,
}

/// Two-client sequential training where client 0 colludes with the server.
/// Client 0 trains on `malicious[step % len]`, client 1 on
/// `honest[step % len]`; the report scores reconstruction of every honest
/// hidden state the server saw, using the decoder as it stands at the end.
pub fn run_attack(
    cfg: &AttackRunConfig,
    clients: usize,
    malicious: &[Batch],
    honest: &[Batch],
    with_attack: bool,
    honest_log: Option<FrameLog>,
) -> Result<AttackReport> {
    if clients < 2 {
        return Err(Error::ThreatModel(format!(
            "the attack needs a colluding and an honest client, got {clients} client(s)"
        )));
    }
    if malicious.is_empty() || honest.is_empty() {
        return Err(Error::ThreatModel("both clients need data".into()));
    }
    let mut fed_cfg = FederationConfig::new(cfg.model.clone(), cfg.spec, cfg.seed, clients);
    fed_cfg.lr = cfg.lr;
    fed_cfg.noise = cfg.noise.clone();
    let (a, b, c) = split_segments(&cfg.model, cfg.spec, cfg.seed)?;
    let mut logs = vec![None; clients];
    logs[1] = honest_log;
    let mut fed = Federation::start_with(&fed_cfg, a, b, c, logs)?;
    let side: SideChannel = Arc::new(Mutex::new(HashMap::new()));
    let blocks = cfg.attack.decoder_blocks.unwrap_or(cfg.spec.p);
    let state = Arc::new(Mutex::new(AttackState {
        model: AttackModel::new(&cfg.model, blocks, &cfg.attack)?,
        malicious_id: 0,
        losses: Vec::new(),
        intercepted: Vec::new(),
        inner_steps: cfg.attack.inner_steps,
        side: side.clone(),
        error: None,
    }));
    if with_attack {
        lock(&fed.server)?.set_hook(Box::new(Hook(state.clone())));
    }
    let mut honest_losses = Vec::new();
    let out = run_sequential_round(
        &mut fed.clients[..2],
        cfg.steps,
        &mut |i, step| {
            let batch = if i == 0 {
                let batch = malicious[step % malicious.len()].clone();
                if let Ok(mut s) = side.lock() {
                    s.insert(step as u64, input_labels(&batch));
                }
                batch
            } else {
                honest[step % honest.len()].clone()
            };
            batch
        },
        None,
        &mut |r| {
            if r.client_id == 1 {
                honest_losses.push(r.loss);
            }
        },
    );
    lock(&fed.server)?.take_hook();
    fed.shutdown()?;
    if let Some(e) = out.error {
        return Err(e);
    }
    let mut st = lock(&state)?;
    if let Some(e) = st.error.take() {
        return Err(e);
    }
    let chance = 1.0 / cfg.model.vocab_size as f64;
    let mut report = AttackReport {
        p: cfg.spec.p,
        delta: cfg.noise.scale,
        token_accuracy: 0.0,
        bleu4: 0.0,
        rouge2_f1: 0.0,
        token_accuracy_x100: 0.0,
        bleu4_x100: 0.0,
        rouge2_f1_x100: 0.0,
        chance,
        attack_loss_first: st.losses.first().copied().unwrap_or(f64::NAN),
        attack_loss_last: st.losses.last().copied().unwrap_or(f64::NAN),
        honest_losses,
        evaluated_tokens: 0,
    };
    if !with_attack {
        return Ok(report);
    }
    let mut pairs: Vec<(Vec<u32>, Vec<u32>)> = Vec::new();
    for (k, msg) in st.intercepted.iter().enumerate() {
        let batch = &honest[k % honest.len()];
        let guess = st.model.reconstruct(msg)?;
        for row in 0..batch.batch {
            let pad = batch.meta.pad_len(row);
            let span = row * batch.seq_len + pad..(row + 1) * batch.seq_len;
            pairs.push((guess[span.clone()].to_vec(), batch.tokens[span].to_vec()));
        }
    }
    let (mut hits, mut total, mut rouge, mut rouge_n) = (0usize, 0usize, 0.0, 0usize);
    for (g, t) in &pairs {
        hits += g.iter().zip(t).filter(|(a, b)| a == b).count();
        total += t.len();
        if t.len() >= 2 {
            rouge += rouge2_f1(g, t)?;
            rouge_n += 1;
        }
    }
    let refs: Vec<(&[u32], &[u32])> = pairs.iter().map(|(g, t)| (&g[..], &t[..])).collect();
    report.evaluated_tokens = total;
    report.token_accuracy = if total == 0 { 0.0 } else { hits as f64 / total as f64 };
    report.bleu4 = if refs.is_empty() { 0.0 } else { bleu4_corpus(&refs)? };
    report.rouge2_f1 = if rouge_n == 0 { 0.0 } else { rouge / rouge_n as f64 };
    report.token_accuracy_x100 = 100.0 * report.token_accuracy;
    report.bleu4_x100 = 100.0 * report.bleu4;
    report.rouge2_f1_x100 = 100.0 * report.rouge2_f1;
    Ok(report)
}

fn lock<T>(m: &Mutex<T>) -> Result<std::sync::MutexGuard<'_, T>> {
    m.lock().map_err(|_| Error::Protocol("state poisoned".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = ModelConfig {
            vocab_size: 5,
            hidden_size: 4,
            num_heads: 2,
            num_blocks: 3,
            mlp_hidden: 6,
            max_context: 8,
            ..ModelConfig::default()
        };
        let mut m = SegmentModel::fresh_decoder(&cfg, 0, 1).unwrap();
        let before = m.named_params();
        let mut grads = Grads::new();
        for (n, t) in &before {
            grads.insert(n.clone(), Tensor::full(t.shape(), -2.0));
        }
        Adam::new(0.1).step(&mut m, &grads);
        for ((_, old), (_, new)) in before.iter().zip(m.named_params()) {
            for (o, n) in old.data().iter().zip(new.data()) {
                assert!((n - o - 0.1).abs() < 1e-7);
            }
        }
    }
}
