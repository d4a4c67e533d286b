//! Wire messages, framing, mask compression, byte accounting and transports.

mod codec;
mod mask;
mod message;
mod stats;
mod transport;

pub use codec::{
    decode, encode, encode_with, parse_header, FrameHeader, ScalarWidth, FRAME_OVERHEAD,
    HEADER_LEN, MAGIC, TRAILER_LEN, VERSION,
};
pub use mask::{compress_mask, reconstruct_mask, MaskMeta, PadLens};
pub use message::{
    CacheStepMsg, ControlCode, ControlMsg, GradMsg, HiddenStateMsg, MaskField, Message,
    MessageClass,
};
pub use stats::{ClassStats, CommSnapshot, CommStats};
pub use transport::{
    loopback_pair, tcp_connect, tcp_duplex, Direction, Duplex, FrameLog, FrameReceiver,
    FrameSender, Link,
};
