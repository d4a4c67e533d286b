use super::mask::{compress_mask, MaskMeta};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Wire tag of each message class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum MessageClass {
    /// Training forward request (`h_A`) or its reply (`h_B`).
    HiddenState = 1,
    Grad = 2,
    CacheStep = 3,
    Prefill = 4,
    /// Stateless, cache-free inference forward.
    Infer = 5,
    Control = 6,
}

impl MessageClass {
    pub const ALL: [MessageClass; 6] = [
        MessageClass::HiddenState,
        MessageClass::Grad,
        MessageClass::CacheStep,
        MessageClass::Prefill,
        MessageClass::Infer,
        MessageClass::Control,
    ];

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|c| *c as u8 == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageClass::HiddenState => "hidden_state",
            MessageClass::Grad => "grad",
            MessageClass::CacheStep => "cache_step",
            MessageClass::Prefill => "prefill",
            MessageClass::Infer => "infer",
            MessageClass::Control => "control",
        }
    }

    pub fn index(self) -> usize {
        self as usize - 1
    }
}

/// Attention mask as carried by a hidden-state message: compressed
/// metadata normally, the full additive tensor when compression is off.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskField {
    Meta(MaskMeta),
    Full(Tensor),
}

impl MaskField {
    pub fn meta(&self) -> Result<MaskMeta> {
        match self {
            MaskField::Meta(m) => Ok(m.clone()),
            MaskField::Full(t) => compress_mask(t),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStateMsg {
    pub client_id: u64,
    pub step_id: u64,
    /// Inference session; 0 for training traffic.
    pub session_id: u64,
    pub positions: Vec<usize>,
    pub mask: MaskField,
    pub hidden: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradMsg {
    pub client_id: u64,
    pub step_id: u64,
    pub grad: Tensor,
}

/// One decode step: the hidden state of the single newest token.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheStepMsg {
    pub session_id: u64,
    pub step_id: u64,
    pub position: usize,
    pub hidden: Tensor,
}

impl CacheStepMsg {
    pub fn new(session_id: u64, step_id: u64, position: usize, hidden: Tensor) -> Result<Self> {
        match hidden.shape() {
            [_, 1, _] => Ok(Self {
                session_id,
                step_id,
                position,
                hidden,
            }),
            other => Err(Error::shape(format!(
                "cache step carries [b,1,d], got {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum ControlCode {
    Ack = 0,
    Error = 1,
    BarrierTimeout = 2,
    CloseSession = 3,
    Shutdown = 4,
}

impl ControlCode {
    pub fn from_u64(v: u64) -> Option<Self> {
        Some(match v {
            0 => ControlCode::Ack,
            1 => ControlCode::Error,
            2 => ControlCode::BarrierTimeout,
            3 => ControlCode::CloseSession,
            4 => ControlCode::Shutdown,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlMsg {
    pub code: ControlCode,
    pub arg: u64,
    pub detail: String,
}

impl ControlMsg {
    pub fn ack() -> Self {
        Self {
            code: ControlCode::Ack,
            arg: 0,
            detail: String::new(),
        }
    }

    pub fn error(detail: impl Into<String>) -> Self {
        Self {
            code: ControlCode::Error,
            arg: 0,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    HiddenState(HiddenStateMsg),
    Grad(GradMsg),
    CacheStep(CacheStepMsg),
    Prefill(HiddenStateMsg),
    Infer(HiddenStateMsg),
    Control(ControlMsg),
}

impl Message {
    pub fn class(&self) -> MessageClass {
        match self {
            Message::HiddenState(_) => MessageClass::HiddenState,
            Message::Grad(_) => MessageClass::Grad,
            Message::CacheStep(_) => MessageClass::CacheStep,
            Message::Prefill(_) => MessageClass::Prefill,
            Message::Infer(_) => MessageClass::Infer,
            Message::Control(_) => MessageClass::Control,
        }
    }

    /// Bytes the attention mask occupies inside this message, at the given
    /// scalar width for full masks.
    pub fn mask_payload_bytes(&self, scalar_width: usize) -> usize {
        match self {
            Message::HiddenState(m) | Message::Prefill(m) | Message::Infer(m) => match &m.mask {
                MaskField::Meta(meta) => meta.wire_bytes(),
                MaskField::Full(t) => t.numel() * scalar_width,
            },
            _ => 0,
        }
    }
}
