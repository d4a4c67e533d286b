//! Server event loop: one reader thread per connection feeding a single
//! core thread that owns all access to the [`ServerNode`].

use std::net::TcpListener;
use std::sync::mpsc::{channel, RecvTimeoutError};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::server::ServerNode;
use crate::error::{Error, Result};
use crate::wire::{
    decode, encode_with, tcp_duplex, ControlCode, ControlMsg, Duplex, FrameSender, Message,
    ScalarWidth,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ServeMode {
    /// Every request is answered on its own.
    PerRequest,
    /// Training traffic waits at a barrier until all `clients` have sent
    /// the same kind of message, then runs as one concatenated batch.
    ClientBatch { clients: usize, timeout: Duration },
}

pub const DEFAULT_BARRIER_TIMEOUT: Duration = Duration::from_secs(30);

pub struct ServerHandle {
    join: JoinHandle<Result<()>>,
}

impl ServerHandle {
    pub fn join(self) -> Result<()> {
        self.join
            .join()
            .map_err(|_| Error::Protocol("server thread panicked".into()))?
    }
}

/// Accept `clients` TCP connections in arrival order.
pub fn accept_tcp(listener: &TcpListener, clients: usize) -> Result<Vec<Duplex>> {
    (0..clients)
        .map(|_| tcp_duplex(listener.accept()?.0))
        .collect()
}

enum Event {
    Frame(usize, Vec<u8>),
    Closed(usize),
}

struct Outbox {
    senders: Vec<Option<Box<dyn FrameSender>>>,
    width: ScalarWidth,
}

impl Outbox {
    fn send(&mut self, conn: usize, msg: &Message) {
        let frame = encode_with(msg, self.width);
        if let Some(tx) = self.senders[conn].as_mut() {
            if tx.send(frame).is_err() {
                self.senders[conn] = None;
            }
        }
    }

    fn error(&mut self, conn: usize, e: &Error) {
        let msg = match e {
            Error::BarrierTimeout { missing } => ControlMsg {
                code: ControlCode::BarrierTimeout,
                arg: *missing as u64,
                detail: e.to_string(),
            },
            other => ControlMsg::error(other.to_string()),
        };
        self.send(conn, &Message::Control(msg));
    }
}

/// Barrier buffer for one message class.
struct Barrier<T> {
    waiting: Vec<(usize, T)>,
    since: Option<Instant>,
}

impl<T> Barrier<T> {
    fn new() -> Self {
        Self {
            waiting: Vec::new(),
            since: None,
        }
    }

    fn push(&mut self, conn: usize, item: T) {
        self.since.get_or_insert_with(Instant::now);
        self.waiting.push((conn, item));
    }

    fn take(&mut self) -> Vec<(usize, T)> {
        self.since = None;
        std::mem::take(&mut self.waiting)
    }
}

fn lock(node: &Mutex<ServerNode>) -> Result<MutexGuard<'_, ServerNode>> {
    node.lock()
        .map_err(|_| Error::Protocol("server state poisoned".into()))
}

pub fn spawn_server(
    node: Arc<Mutex<ServerNode>>,
    conns: Vec<Duplex>,
    mode: ServeMode,
    width: ScalarWidth,
) -> ServerHandle {
    let join = std::thread::spawn(move || serve(node, conns, mode, width));
    ServerHandle { join }
}

fn serve(
    node: Arc<Mutex<ServerNode>>,
    conns: Vec<Duplex>,
    mode: ServeMode,
    width: ScalarWidth,
) -> Result<()> {
    let (events_tx, events) = channel();
    let mut senders = Vec::with_capacity(conns.len());
    for (i, conn) in conns.into_iter().enumerate() {
        senders.push(Some(conn.tx));
        let mut rx = conn.rx;
        let tx = events_tx.clone();
        std::thread::spawn(move || loop {
            match rx.recv() {
                Ok(frame) => {
                    if tx.send(Event::Frame(i, frame)).is_err() {
                        break;
                    }
                }
                Err(_) => {
                    let _ = tx.send(Event::Closed(i));
                    break;
                }
            }
        });
    }
    drop(events_tx);
    let mut open = senders.len();
    let mut out = Outbox { senders, width };
    let mut fwd: Barrier<crate::wire::HiddenStateMsg> = Barrier::new();
    let mut bwd: Barrier<crate::wire::GradMsg> = Barrier::new();

    while open > 0 {
        let event = match mode {
            ServeMode::ClientBatch { timeout, .. } => {
                let oldest = [fwd.since, bwd.since].into_iter().flatten().min();
                match oldest {
                    None => events.recv().map_err(|_| RecvTimeoutError::Disconnected),
                    Some(t) => {
                        events.recv_timeout(timeout.saturating_sub(t.elapsed()))
                    }
                }
            }
            ServeMode::PerRequest => events.recv().map_err(|_| RecvTimeoutError::Disconnected),
        };
        let (conn, frame) = match event {
            Ok(Event::Frame(c, f)) => (c, f),
            Ok(Event::Closed(c)) => {
                out.senders[c] = None;
                open -= 1;
                continue;
            }
            Err(RecvTimeoutError::Timeout) => {
                let clients = match mode {
                    ServeMode::ClientBatch { clients, .. } => clients,
                    ServeMode::PerRequest => 0,
                };
                for (conn, _) in fwd.take() {
                    out.error(conn, &Error::BarrierTimeout { missing: clients });
                }
                let waiting = bwd.take();
                let missing = clients.saturating_sub(waiting.len());
                for (conn, _) in waiting {
                    out.error(conn, &Error::BarrierTimeout { missing });
                }
                lock(&node)?.abandon_batch();
                continue;
            }
            Err(RecvTimeoutError::Disconnected) => break,
        };
        let msg = match decode(&frame) {
            Ok(m) => m,
            Err(e) => {
                out.error(conn, &e);
                continue;
            }
        };
        match (mode, msg) {
            (ServeMode::ClientBatch { clients, .. }, Message::HiddenState(m)) => {
                fwd.push(conn, m);
                if fwd.waiting.len() == clients {
                    let waiting = fwd.take();
                    let msgs: Vec<_> = waiting.iter().map(|(_, m)| m.clone()).collect();
                    match lock(&node)?.client_batch_forward(&msgs) {
                        Ok(replies) => {
                            for r in replies {
                                let c = waiting
                                    .iter()
                                    .find(|(_, m)| m.client_id == r.client_id)
                                    .expect("reply for a waiting client")
                                    .0;
                                out.send(c, &Message::HiddenState(r));
                            }
                        }
                        Err(e) => waiting.iter().for_each(|(c, _)| out.error(*c, &e)),
                    }
                }
            }
            (ServeMode::ClientBatch { clients, .. }, Message::Grad(g)) => {
                bwd.push(conn, g);
                if bwd.waiting.len() == clients {
                    let waiting = bwd.take();
                    let grads: Vec<_> = waiting.iter().map(|(_, g)| g.clone()).collect();
                    match lock(&node)?.client_batch_backward(&grads) {
                        Ok(replies) => {
                            for r in replies {
                                let c = waiting
                                    .iter()
                                    .find(|(_, g)| g.client_id == r.client_id)
                                    .expect("reply for a waiting client")
                                    .0;
                                out.send(c, &Message::Grad(r));
                            }
                        }
                        Err(e) => waiting.iter().for_each(|(c, _)| out.error(*c, &e)),
                    }
                }
            }
            (_, msg) => {
                let mut guard = lock(&node)?;
                match guard.handle(&msg) {
                    Ok(reply) => out.send(conn, &reply),
                    Err(e) => out.error(conn, &e),
                }
                if guard.is_shutdown() {
                    break;
                }
            }
        }
    }
    Ok(())
}
