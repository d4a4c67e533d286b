use std::net::TcpListener;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::batch::Batch;
use super::client::{token_loss, ClientNode, TrainStepRecord};
use super::noise::NoiseConfig;
use super::runtime::{accept_tcp, spawn_server, ServeMode, ServerHandle};
use super::server::ServerNode;
use crate::error::{Error, Result};
use crate::model::{build_embedding_split, build_partitioned, GradMode, Grads, ModelConfig, PartitionSpec, SegmentInput, SegmentModel};
use crate::wire::{loopback_pair, tcp_connect, CommSnapshot, Duplex, FrameLog, Link, ScalarWidth};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[default]
    Loopback,
    Tcp,
}

/// Connected client/server endpoint pairs for `n` clients.
pub fn connect(kind: TransportKind, n: usize, addr: &str) -> Result<(Vec<Duplex>, Vec<Duplex>)> {
    match kind {
        TransportKind::Loopback => Ok((0..n).map(|_| loopback_pair()).unzip()),
        TransportKind::Tcp => {
            let listener = TcpListener::bind(addr)?;
            let local = listener.local_addr()?;
            let clients = (0..n).map(|_| tcp_connect(local)).collect::<Result<Vec<_>>>()?;
            let servers = accept_tcp(&listener, n)?;
            Ok((clients, servers))
        }
    }
}

/// Segments for `spec`; `p = 0` selects the embedding-only split.
pub fn split_segments(
    model: &ModelConfig,
    spec: PartitionSpec,
    seed: u64,
) -> Result<(SegmentModel, SegmentModel, SegmentModel)> {
    if spec.p == 0 {
        if spec != PartitionSpec::embedding_only(model.num_blocks) {
            return Err(Error::Partition(format!(
                "a client without blocks needs the split (0, {}, 1)",
                model.num_blocks - 1
            )));
        }
        build_embedding_split(model, seed)
    } else {
        build_partitioned(model, spec, seed)
    }
}

/// Everything needed to stand up one server and its clients.
#[derive(Clone, Debug)]
pub struct FederationConfig {
    pub model: ModelConfig,
    pub spec: PartitionSpec,
    pub seed: u64,
    pub clients: usize,
    pub lr: f64,
    pub noise: NoiseConfig,
    pub transport: TransportKind,
    /// Bind address for TCP; port 0 picks a free one.
    pub addr: String,
    pub mode: ServeMode,
    pub width: ScalarWidth,
    pub compress_mask: bool,
    /// Id of the first client; the rest follow consecutively.
    pub first_client_id: u64,
}

impl FederationConfig {
    pub fn new(model: ModelConfig, spec: PartitionSpec, seed: u64, clients: usize) -> Self {
        Self {
            model,
            spec,
            seed,
            clients,
            lr: 0.05,
            noise: NoiseConfig::default(),
            transport: TransportKind::Loopback,
            addr: "127.0.0.1:0".into(),
            mode: ServeMode::PerRequest,
            width: ScalarWidth::F64,
            compress_mask: true,
            first_client_id: 0,
        }
    }
}

/// A running server thread plus its connected clients.
pub struct Federation {
    pub server: Arc<Mutex<ServerNode>>,
    pub clients: Vec<ClientNode>,
    handle: Option<ServerHandle>,
}

impl Federation {
    pub fn start(cfg: &FederationConfig) -> Result<Self> {
        cfg.noise.validate()?;
        let (a, b, c) = split_segments(&cfg.model, cfg.spec, cfg.seed)?;
        Self::start_with(cfg, a, b, c, vec![None; cfg.clients])
    }

    /// Start from explicit segments; each client gets its own copy of `a`
    /// and `c`. `logs[i]` records client `i`'s frames.
    pub fn start_with(
        cfg: &FederationConfig,
        a: SegmentModel,
        b: SegmentModel,
        c: SegmentModel,
        logs: Vec<Option<FrameLog>>,
    ) -> Result<Self> {
        if cfg.clients == 0 {
            return Err(Error::Config("at least one client is required".into()));
        }
        let (client_ends, server_ends) = connect(cfg.transport, cfg.clients, &cfg.addr)?;
        let server = Arc::new(Mutex::new(ServerNode::new(b, cfg.lr)));
        let handle = spawn_server(server.clone(), server_ends, cfg.mode, cfg.width);
        let clients = client_ends
            .into_iter()
            .zip(logs.into_iter().chain(std::iter::repeat(None)))
            .enumerate()
            .map(|(i, (end, log))| {
                let mut link = Link::new(end).with_width(cfg.width);
                if let Some(log) = log {
                    link = link.with_log(log);
                }
                let mut node =
                    ClientNode::new(cfg.first_client_id + i as u64, a.clone(), c.clone(), link, cfg.noise.clone(), cfg.lr);
                node.compress_mask = cfg.compress_mask;
                node
            })
            .collect();
        Ok(Self {
            server,
            clients,
            handle: Some(handle),
        })
    }

    pub fn comm(&self) -> CommSnapshot {
        CommSnapshot::sum(
            &self
                .clients
                .iter()
                .map(|c| c.link().stats().snapshot())
                .collect::<Vec<_>>(),
        )
    }

    /// Close every client link and wait for the server thread. Returns the
    /// server segment and each client's `(a, c)`.
    pub fn shutdown(mut self) -> Result<(SegmentModel, Vec<(SegmentModel, SegmentModel)>)> {
        let clients: Vec<_> = std::mem::take(&mut self.clients)
            .into_iter()
            .map(ClientNode::into_segments)
            .collect();
        if let Some(h) = self.handle.take() {
            h.join()?;
        }
        let server = self
            .server
            .lock()
            .map_err(|_| Error::Protocol("server state poisoned".into()))?
            .segment
            .clone();
        Ok((server, clients))
    }
}

pub struct RoundOutcome {
    pub records: Vec<TrainStepRecord>,
    /// Set when the round stopped early; `records` holds what completed.
    pub error: Option<Error>,
}

/// Round-robin training: for each step, every client in order runs its full
/// relay before the next client starts.
pub fn run_sequential_round(
    clients: &mut [ClientNode],
    steps: usize,
    data: &mut dyn FnMut(usize, usize) -> Batch,
    stop: Option<&AtomicBool>,
    sink: &mut dyn FnMut(&TrainStepRecord),
) -> RoundOutcome {
    let mut records = Vec::with_capacity(steps * clients.len());
    if clients.is_empty() {
        return RoundOutcome {
            records,
            error: Some(Error::Config("sequential round needs a client".into())),
        };
    }
    for step in 0..steps {
        for (i, client) in clients.iter_mut().enumerate() {
            if stop.is_some_and(|s| s.load(Ordering::Relaxed)) {
                return RoundOutcome { records, error: None };
            }
            let batch = data(i, step);
            match client.train_step(&batch) {
                Ok(r) => {
                    sink(&r);
                    records.push(r);
                }
                Err(e) => {
                    return RoundOutcome {
                        records,
                        error: Some(e),
                    }
                }
            }
        }
    }
    RoundOutcome {
        records,
        error: None,
    }
}

/// Unsplit reference trainer with the same loss and optimizer.
pub struct MonolithicTrainer {
    pub model: SegmentModel,
    pub lr: f64,
}

impl MonolithicTrainer {
    pub fn new(model: SegmentModel, lr: f64) -> Self {
        Self { model, lr }
    }

    /// Loss and adapter gradients at the current parameters.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(f64, Grads)> {
        let (logits, tape) = self.model.forward_train(
            SegmentInput::Tokens {
                ids: &batch.tokens,
                batch: batch.batch,
            },
            &batch.meta,
            &batch.positions(),
        )?;
        let (loss, dlogits) = token_loss(&logits, &batch.targets)?;
        let grads = self.model.backward(tape, &dlogits, GradMode::LoraOnly)?;
        Ok((loss, grads.params))
    }

    pub fn step(&mut self, batch: &Batch) -> Result<f64> {
        let (loss, grads) = self.loss_and_grads(batch)?;
        self.model.apply_lora_step(&grads, self.lr)?;
        Ok(loss)
    }
}
