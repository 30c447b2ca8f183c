//! Framed messages.
//!
//! Every frame starts with an 18-byte little-endian header:
//!
//! ```text
//! magic u16 = 0x5447 | version u8 = 1 | type u8 | iteration u64 | worker u16 | payload-len u32
//! ```
//!
//! The payload-length field doubles as the length prefix on stream
//! transports.

use crate::codec::wire::{decode_aggregate_blocks, decode_blocks, encode_aggregate, encode_blocks};
use crate::codec::{AggregateBlock, EncodedGradient};

use super::ClusterError;

pub const MAGIC: u16 = 0x5447;
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 18;
/// Worker-id field of frames sent by the server.
pub const SERVER_ID: u16 = u16::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Push = 1,
    Pull = 2,
    Register = 3,
    Shutdown = 4,
}

impl MsgType {
    fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            1 => MsgType::Push,
            2 => MsgType::Pull,
            3 => MsgType::Register,
            4 => MsgType::Shutdown,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub msg_type: MsgType,
    pub iteration: u64,
    pub worker: u16,
    pub payload_len: u32,
}

impl Header {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..2].copy_from_slice(&MAGIC.to_le_bytes());
        b[2] = VERSION;
        b[3] = self.msg_type as u8;
        b[4..12].copy_from_slice(&self.iteration.to_le_bytes());
        b[12..14].copy_from_slice(&self.worker.to_le_bytes());
        b[14..18].copy_from_slice(&self.payload_len.to_le_bytes());
        b
    }

    pub fn parse(b: &[u8]) -> Result<Self, ClusterError> {
        if b.len() < HEADER_LEN {
            return Err(ClusterError::Protocol(format!("frame of {} bytes has no header", b.len())));
        }
        let magic = u16::from_le_bytes([b[0], b[1]]);
        if magic != MAGIC {
            return Err(ClusterError::Protocol(format!("bad magic 0x{magic:04x}")));
        }
        if b[2] != VERSION {
            return Err(ClusterError::Protocol(format!("unsupported version {}", b[2])));
        }
        let msg_type = MsgType::from_u8(b[3])
            .ok_or_else(|| ClusterError::Protocol(format!("unknown message type {}", b[3])))?;
        Ok(Self {
            msg_type,
            iteration: u64::from_le_bytes(b[4..12].try_into().expect("8 bytes")),
            worker: u16::from_le_bytes([b[12], b[13]]),
            payload_len: u32::from_le_bytes([b[14], b[15], b[16], b[17]]),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Push(EncodedGradient),
    Pull {
        iteration: u64,
        blocks: Vec<AggregateBlock>,
    },
    Register {
        worker: u16,
    },
    Shutdown {
        worker: u16,
        iteration: u64,
    },
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::Push(_) => MsgType::Push,
            Message::Pull { .. } => MsgType::Pull,
            Message::Register { .. } => MsgType::Register,
            Message::Shutdown { .. } => MsgType::Shutdown,
        }
    }

    /// Header plus payload.
    pub fn to_frame(&self) -> Result<Vec<u8>, ClusterError> {
        let (iteration, worker, payload) = match self {
            Message::Push(e) => (e.iteration, e.worker, encode_blocks(&e.blocks)?),
            Message::Pull { iteration, blocks } => (*iteration, SERVER_ID, encode_aggregate(blocks)?),
            Message::Register { worker } => (0, *worker, Vec::new()),
            Message::Shutdown { worker, iteration } => (*iteration, *worker, Vec::new()),
        };
        let payload_len = u32::try_from(payload.len())
            .map_err(|_| ClusterError::Protocol(format!("payload of {} bytes too large", payload.len())))?;
        let header = Header {
            msg_type: self.msg_type(),
            iteration,
            worker,
            payload_len,
        };
        let mut frame = Vec::with_capacity(HEADER_LEN + payload.len());
        frame.extend_from_slice(&header.to_bytes());
        frame.extend_from_slice(&payload);
        Ok(frame)
    }

    pub fn from_frame(frame: &[u8]) -> Result<Self, ClusterError> {
        let h = Header::parse(frame)?;
        let payload = &frame[HEADER_LEN..];
        if payload.len() != h.payload_len as usize {
            return Err(ClusterError::Protocol(format!(
                "header announces {} payload bytes, frame carries {}",
                h.payload_len,
                payload.len()
            )));
        }
        Ok(match h.msg_type {
            MsgType::Push => Message::Push(EncodedGradient {
                iteration: h.iteration,
                worker: h.worker,
                blocks: decode_blocks(payload)?,
            }),
            MsgType::Pull => Message::Pull {
                iteration: h.iteration,
                blocks: decode_aggregate_blocks(payload)?,
            },
            MsgType::Register | MsgType::Shutdown if !payload.is_empty() => {
                return Err(ClusterError::Protocol("control message with payload".into()));
            }
            MsgType::Register => Message::Register { worker: h.worker },
            MsgType::Shutdown => Message::Shutdown {
                worker: h.worker,
                iteration: h.iteration,
            },
        })
    }
}

/// Length of the frame that will carry a push of `encoded`.
pub fn push_frame_len(encoded: &EncodedGradient) -> usize {
    HEADER_LEN + crate::codec::wire_size(encoded)
}
