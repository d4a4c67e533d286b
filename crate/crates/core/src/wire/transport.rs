//! Frame transports and the client-side request/response link.

use std::io::{ErrorKind, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};

use super::codec::{decode, encode_with, parse_header, ScalarWidth, HEADER_LEN, TRAILER_LEN};
use super::message::{ControlCode, Message};
use super::stats::CommStats;
use crate::error::{Error, Result};

pub trait FrameSender: Send {
    fn send(&mut self, frame: Vec<u8>) -> Result<()>;
}

pub trait FrameReceiver: Send {
    /// Blocks for the next complete frame; `ChannelClosed` once the peer is gone.
    fn recv(&mut self) -> Result<Vec<u8>>;
}

/// Both halves of one connection.
pub struct Duplex {
    pub tx: Box<dyn FrameSender>,
    pub rx: Box<dyn FrameReceiver>,
}

struct LoopbackTx(Sender<Vec<u8>>);
struct LoopbackRx(Receiver<Vec<u8>>);

impl FrameSender for LoopbackTx {
    fn send(&mut self, frame: Vec<u8>) -> Result<()> {
        self.0.send(frame).map_err(|_| Error::ChannelClosed)
    }
}

impl FrameReceiver for LoopbackRx {
    fn recv(&mut self) -> Result<Vec<u8>> {
        self.0.recv().map_err(|_| Error::ChannelClosed)
    }
}

/// Connected in-process pair.
pub fn loopback_pair() -> (Duplex, Duplex) {
    let (a_tx, b_rx) = channel();
    let (b_tx, a_rx) = channel();
    (
        Duplex {
            tx: Box::new(LoopbackTx(a_tx)),
            rx: Box::new(LoopbackRx(a_rx)),
        },
        Duplex {
            tx: Box::new(LoopbackTx(b_tx)),
            rx: Box::new(LoopbackRx(b_rx)),
        },
    )
}

struct TcpTx(TcpStream);
struct TcpRx(TcpStream);

fn closed_on_eof(e: std::io::Error) -> Error {
    match e.kind() {
        ErrorKind::UnexpectedEof
        | ErrorKind::ConnectionReset
        | ErrorKind::ConnectionAborted
        | ErrorKind::BrokenPipe => Error::ChannelClosed,
        _ => Error::Io(e),
    }
}

impl FrameSender for TcpTx {
    fn send(&mut self, frame: Vec<u8>) -> Result<()> {
        self.0.write_all(&frame).map_err(closed_on_eof)?;
        self.0.flush().map_err(closed_on_eof)
    }
}

impl FrameReceiver for TcpRx {
    fn recv(&mut self) -> Result<Vec<u8>> {
        let mut frame = vec![0u8; HEADER_LEN];
        self.0.read_exact(&mut frame).map_err(closed_on_eof)?;
        let header = parse_header(&frame)?;
        frame.resize(HEADER_LEN + header.body_len + TRAILER_LEN, 0);
        self.0
            .read_exact(&mut frame[HEADER_LEN..])
            .map_err(closed_on_eof)?;
        Ok(frame)
    }
}

pub fn tcp_duplex(stream: TcpStream) -> Result<Duplex> {
    stream.set_nodelay(true)?;
    let rx = stream.try_clone()?;
    Ok(Duplex {
        tx: Box::new(TcpTx(stream)),
        rx: Box::new(TcpRx(rx)),
    })
}

pub fn tcp_connect(addr: impl ToSocketAddrs) -> Result<Duplex> {
    tcp_duplex(TcpStream::connect(addr)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

pub type FrameLog = Arc<Mutex<Vec<(Direction, Vec<u8>)>>>;

/// Client end of a connection: one request frame out, one reply frame in.
pub struct Link {
    duplex: Duplex,
    stats: Arc<CommStats>,
    width: ScalarWidth,
    log: Option<FrameLog>,
}

impl Link {
    pub fn new(duplex: Duplex) -> Self {
        Self {
            duplex,
            stats: Arc::new(CommStats::new()),
            width: ScalarWidth::F64,
            log: None,
        }
    }

    pub fn with_width(mut self, width: ScalarWidth) -> Self {
        self.width = width;
        self
    }

    pub fn with_log(mut self, log: FrameLog) -> Self {
        self.log = Some(log);
        self
    }

    pub fn stats(&self) -> &Arc<CommStats> {
        &self.stats
    }

    pub fn width(&self) -> ScalarWidth {
        self.width
    }

    pub fn send(&mut self, msg: &Message) -> Result<()> {
        let frame = encode_with(msg, self.width);
        self.stats.record_sent(msg.class(), frame.len());
        let mask = msg.mask_payload_bytes(self.width.bytes());
        if mask > 0 {
            if let Message::HiddenState(m) | Message::Prefill(m) | Message::Infer(m) = msg {
                let full = m
                    .mask
                    .meta()
                    .map(|meta| meta.full_mask_bytes(self.width.bytes()))
                    .unwrap_or(mask);
                self.stats.record_mask(mask, full);
            }
        }
        if let Some(log) = &self.log {
            log.lock()
                .expect("frame log poisoned")
                .push((Direction::Sent, frame.clone()));
        }
        self.duplex.tx.send(frame)
    }

    pub fn recv(&mut self) -> Result<Message> {
        let frame = self.duplex.rx.recv()?;
        let msg = decode(&frame)?;
        self.stats.record_received(msg.class(), frame.len());
        if let Some(log) = &self.log {
            log.lock()
                .expect("frame log poisoned")
                .push((Direction::Received, frame));
        }
        Ok(msg)
    }

    /// Send and wait for the reply. A control reply other than `Ack` is
    /// surfaced as an error.
    pub fn request(&mut self, msg: &Message) -> Result<Message> {
        self.send(msg)?;
        let reply = self.recv()?;
        self.stats.record_round_trip();
        match reply {
            Message::Control(c) if c.code == ControlCode::BarrierTimeout => {
                Err(Error::BarrierTimeout {
                    missing: c.arg as usize,
                })
            }
            Message::Control(c) if c.code == ControlCode::Error => Err(Error::Protocol(c.detail)),
            other => Ok(other),
        }
    }
}
