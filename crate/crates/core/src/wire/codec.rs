//! Bit-exact frame encoding.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "FLSP"
//! 4       1     version (1)
//! 5       1     message-class tag
//! 6       2     flags, u16 LE (bit 0: 2-byte scalars)
//! 8       8     body length, u64 LE
//! 16      n     body
//! 16+n    4     CRC-32 of bytes [0, 16+n), u32 LE
//! ```
//!
//! Body integers are u64 LE; scalars are f64 LE (or IEEE half when flag bit 0
//! is set). A tensor is `rank, dims…, scalars…`.

use half::f16;

use super::mask::{MaskMeta, PadLens};
use super::message::*;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"FLSP";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;
pub const TRAILER_LEN: usize = 4;
pub const FRAME_OVERHEAD: usize = HEADER_LEN + TRAILER_LEN;
/// Largest body a decoder accepts.
pub const MAX_BODY: u64 = 1 << 32;

const FLAG_HALF: u16 = 1;
const PER_ROW_BIT: u64 = 1 << 63;
const MAX_RANK: u64 = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalarWidth {
    #[default]
    F64,
    F16,
}

impl ScalarWidth {
    pub fn bytes(self) -> usize {
        match self {
            ScalarWidth::F64 => 8,
            ScalarWidth::F16 => 2,
        }
    }
}

struct Writer {
    buf: Vec<u8>,
    width: ScalarWidth,
}

impl Writer {
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn tensor(&mut self, t: &Tensor) {
        self.usize(t.rank());
        for &d in t.shape() {
            self.usize(d);
        }
        match self.width {
            ScalarWidth::F64 => {
                for v in t.data() {
                    self.buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            ScalarWidth::F16 => {
                for v in t.data() {
                    self.buf.extend_from_slice(&f16::from_f64(*v).to_le_bytes());
                }
            }
        }
    }

    fn positions(&mut self, p: &[usize]) {
        self.usize(p.len());
        for &v in p {
            self.usize(v);
        }
    }

    fn meta(&mut self, m: &MaskMeta) {
        self.usize(m.seq_len);
        self.usize(m.batch);
        match &m.pad {
            PadLens::Uniform(p) => self.usize(*p),
            PadLens::PerRow(pads) => {
                self.u64(PER_ROW_BIT | pads.len() as u64);
                for &p in pads {
                    self.usize(p);
                }
            }
        }
    }

    fn hidden(&mut self, m: &HiddenStateMsg) {
        self.u64(m.client_id);
        self.u64(m.step_id);
        self.u64(m.session_id);
        self.positions(&m.positions);
        match &m.mask {
            MaskField::Meta(meta) => {
                self.u64(0);
                self.meta(meta);
            }
            MaskField::Full(t) => {
                self.u64(1);
                self.tensor(t);
            }
        }
        self.tensor(&m.hidden);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: usize,
    width: ScalarWidth,
}

impl<'a> Reader<'a> {
    fn offset(&self) -> usize {
        self.base + self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::frame(self.offset(), "body truncated"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        let at = self.offset();
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::frame(at, "integer overflows usize"))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let at = self.offset();
        let rank = self.u64()?;
        if rank > MAX_RANK {
            return Err(Error::frame(at, format!("tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = self.usize()?;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::frame(at, "tensor size overflows"))?;
            shape.push(d);
        }
        let w = self.width.bytes();
        let remaining = self.bytes.len() - self.pos;
        if numel.checked_mul(w).is_none_or(|n| n > remaining) {
            return Err(Error::frame(self.offset(), "tensor payload truncated"));
        }
        let raw = self.take(numel * w)?;
        let data = match self.width {
            ScalarWidth::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            ScalarWidth::F16 => raw
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f64())
                .collect(),
        };
        Tensor::new(shape, data).map_err(|e| Error::frame(at, e.to_string()))
    }

    fn positions(&mut self) -> Result<Vec<usize>> {
        let at = self.offset();
        let n = self.usize()?;
        if n > (self.bytes.len() - self.pos) / 8 {
            return Err(Error::frame(at, "position list truncated"));
        }
        (0..n).map(|_| self.usize()).collect()
    }

    fn meta(&mut self) -> Result<MaskMeta> {
        let at = self.offset();
        let seq_len = self.usize()?;
        let batch = self.usize()?;
        let word = self.u64()?;
        let meta = if word & PER_ROW_BIT != 0 {
            let n = (word & !PER_ROW_BIT) as usize;
            if n != batch || n > (self.bytes.len() - self.pos) / 8 {
                return Err(Error::frame(at, "per-row pad list malformed"));
            }
            let pads = (0..n).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
            MaskMeta {
                seq_len,
                batch,
                pad: PadLens::PerRow(pads),
            }
        } else {
            MaskMeta {
                seq_len,
                batch,
                pad: PadLens::Uniform(word as usize),
            }
        };
        meta.validate().map_err(|e| Error::frame(at, e.to_string()))?;
        Ok(meta)
    }

    fn hidden(&mut self) -> Result<HiddenStateMsg> {
        let client_id = self.u64()?;
        let step_id = self.u64()?;
        let session_id = self.u64()?;
        let positions = self.positions()?;
        let at = self.offset();
        let mask = match self.u64()? {
            0 => MaskField::Meta(self.meta()?),
            1 => MaskField::Full(self.tensor()?),
            other => return Err(Error::frame(at, format!("mask kind {other}"))),
        };
        let hidden = self.tensor()?;
        Ok(HiddenStateMsg {
            client_id,
            step_id,
            session_id,
            positions,
            mask,
            hidden,
        })
    }
}

pub fn encode(msg: &Message) -> Vec<u8> {
    encode_with(msg, ScalarWidth::F64)
}

pub fn encode_with(msg: &Message, width: ScalarWidth) -> Vec<u8> {
    let mut w = Writer {
        buf: Vec::with_capacity(64),
        width,
    };
    w.buf.extend_from_slice(&MAGIC);
    w.buf.push(VERSION);
    w.buf.push(msg.class() as u8);
    let flags = match width {
        ScalarWidth::F64 => 0u16,
        ScalarWidth::F16 => FLAG_HALF,
    };
    w.buf.extend_from_slice(&flags.to_le_bytes());
    w.u64(0); // body length, patched below
    match msg {
        Message::HiddenState(m) | Message::Prefill(m) | Message::Infer(m) => w.hidden(m),
        Message::Grad(m) => {
            w.u64(m.client_id);
            w.u64(m.step_id);
            w.tensor(&m.grad);
        }
        Message::CacheStep(m) => {
            w.u64(m.session_id);
            w.u64(m.step_id);
            w.usize(m.position);
            w.tensor(&m.hidden);
        }
        Message::Control(m) => {
            w.u64(m.code as u64);
            w.u64(m.arg);
            w.usize(m.detail.len());
            w.buf.extend_from_slice(m.detail.as_bytes());
        }
    }
    let body_len = (w.buf.len() - HEADER_LEN) as u64;
    w.buf[8..16].copy_from_slice(&body_len.to_le_bytes());
    let crc = crc32fast::hash(&w.buf);
    w.buf.extend_from_slice(&crc.to_le_bytes());
    w.buf
}

/// Parsed fixed header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameHeader {
    pub class: MessageClass,
    pub width: ScalarWidth,
    pub body_len: usize,
}

impl FrameHeader {
    pub fn frame_len(&self) -> usize {
        HEADER_LEN + self.body_len + TRAILER_LEN
    }
}

pub fn parse_header(bytes: &[u8]) -> Result<FrameHeader> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::frame(bytes.len(), "header truncated"));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::frame(0, "bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(Error::frame(4, format!("unsupported version {}", bytes[4])));
    }
    let class = MessageClass::from_tag(bytes[5])
        .ok_or_else(|| Error::frame(5, format!("unknown message class {}", bytes[5])))?;
    let width = match u16::from_le_bytes([bytes[6], bytes[7]]) {
        0 => ScalarWidth::F64,
        FLAG_HALF => ScalarWidth::F16,
        other => return Err(Error::frame(6, format!("unknown flags {other:#x}"))),
    };
    let body_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    if body_len > MAX_BODY {
        return Err(Error::frame(8, format!("body length {body_len} too large")));
    }
    Ok(FrameHeader {
        class,
        width,
        body_len: body_len as usize,
    })
}

pub fn decode(bytes: &[u8]) -> Result<Message> {
    let header = parse_header(bytes)?;
    let total = header.frame_len();
    if bytes.len() < total {
        return Err(Error::frame(bytes.len(), "frame truncated"));
    }
    if bytes.len() > total {
        return Err(Error::frame(8, "body length disagrees with frame size"));
    }
    let crc_at = HEADER_LEN + header.body_len;
    let stored = u32::from_le_bytes(bytes[crc_at..total].try_into().expect("4 bytes"));
    if crc32fast::hash(&bytes[..crc_at]) != stored {
        return Err(Error::frame(crc_at, "checksum mismatch"));
    }
    let mut r = Reader {
        bytes: &bytes[HEADER_LEN..crc_at],
        pos: 0,
        base: HEADER_LEN,
        width: header.width,
    };
    let msg = match header.class {
        MessageClass::HiddenState => Message::HiddenState(r.hidden()?),
        MessageClass::Prefill => Message::Prefill(r.hidden()?),
        MessageClass::Infer => Message::Infer(r.hidden()?),
        MessageClass::Grad => Message::Grad(GradMsg {
            client_id: r.u64()?,
            step_id: r.u64()?,
            grad: r.tensor()?,
        }),
        MessageClass::CacheStep => {
            let session_id = r.u64()?;
            let step_id = r.u64()?;
            let position = r.usize()?;
            let at = r.offset();
            let hidden = r.tensor()?;
            Message::CacheStep(
                CacheStepMsg::new(session_id, step_id, position, hidden)
                    .map_err(|e| Error::frame(at, e.to_string()))?,
            )
        }
        MessageClass::Control => {
            let at = r.offset();
            let code = ControlCode::from_u64(r.u64()?)
                .ok_or_else(|| Error::frame(at, "unknown control code"))?;
            let arg = r.u64()?;
            let n = r.usize()?;
            let at = r.offset();
            let detail = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::frame(at, "control detail is not UTF-8"))?;
            Message::Control(ControlMsg { code, arg, detail })
        }
    };
    if r.pos != r.bytes.len() {
        return Err(Error::frame(r.offset(), "trailing bytes in body"));
    }
    Ok(msg)
}
