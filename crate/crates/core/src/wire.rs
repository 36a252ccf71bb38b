//! Key-value store message framing, all fields little-endian:
//!
//! ```text
//! magic u32 | type u8 | key u64 | payload_len u64 | sender u64 | seq u64 | payload
//! ```
//!
//! The payload is a raw `f32` or `f64` array; both ends agree on the element
//! type when the store is created.

use alloc::vec::Vec;

pub const MAGIC: u32 = 0x4B56_5331;
pub const HEADER_LEN: usize = 4 + 1 + 8 + 8 + 8 + 8;
/// Refuse payloads beyond this many bytes (2^31 elements of f64).
pub const MAX_PAYLOAD: u64 = 1 << 34;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Init = 0,
    Push = 1,
    PullReq = 2,
    PullResp = 3,
    Barrier = 4,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => MsgType::Init,
            1 => MsgType::Push,
            2 => MsgType::PullReq,
            3 => MsgType::PullResp,
            4 => MsgType::Barrier,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub kind: MsgType,
    pub key: u64,
    pub sender: u64,
    pub seq: u64,
    pub payload: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error("bad magic {0:#010x}")]
    Magic(u32),
    #[error("unknown message type {0}")]
    Type(u8),
    #[error("payload of {0} bytes exceeds the limit")]
    TooLong(u64),
    #[error("need {0} more bytes")]
    Incomplete(usize),
}

/// Fixed-size header fields, without the payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub kind: MsgType,
    pub key: u64,
    pub payload_len: u64,
    pub sender: u64,
    pub seq: u64,
}

impl Header {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&MAGIC.to_le_bytes());
        b[4] = self.kind as u8;
        b[5..13].copy_from_slice(&self.key.to_le_bytes());
        b[13..21].copy_from_slice(&self.payload_len.to_le_bytes());
        b[21..29].copy_from_slice(&self.sender.to_le_bytes());
        b[29..37].copy_from_slice(&self.seq.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8; HEADER_LEN]) -> Result<Self, WireError> {
        let u64_at = |i: usize| u64::from_le_bytes(b[i..i + 8].try_into().unwrap());
        let magic = u32::from_le_bytes(b[0..4].try_into().unwrap());
        if magic != MAGIC {
            return Err(WireError::Magic(magic));
        }
        let kind = MsgType::from_u8(b[4]).ok_or(WireError::Type(b[4]))?;
        let payload_len = u64_at(13);
        if payload_len > MAX_PAYLOAD {
            return Err(WireError::TooLong(payload_len));
        }
        Ok(Header { kind, key: u64_at(5), payload_len, sender: u64_at(21), seq: u64_at(29) })
    }
}

impl Frame {
    pub fn header(&self) -> Header {
        Header {
            kind: self.kind,
            key: self.key,
            payload_len: self.payload.len() as u64,
            sender: self.sender,
            seq: self.seq,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&self.header().encode());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses one frame from the front of `buf`, returning it and the
    /// number of bytes consumed.
    pub fn decode(buf: &[u8]) -> Result<(Frame, usize), WireError> {
        if buf.len() < HEADER_LEN {
            return Err(WireError::Incomplete(HEADER_LEN - buf.len()));
        }
        let h = Header::decode(buf[..HEADER_LEN].try_into().unwrap())?;
        let total = HEADER_LEN + h.payload_len as usize;
        if buf.len() < total {
            return Err(WireError::Incomplete(total - buf.len()));
        }
        let frame = Frame {
            kind: h.kind,
            key: h.key,
            sender: h.sender,
            seq: h.seq,
            payload: buf[HEADER_LEN..total].to_vec(),
        };
        Ok((frame, total))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn layout_is_fixed() {
        let f = Frame { kind: MsgType::Push, key: 7, sender: 2, seq: 9, payload: vec![0xAA, 0xBB] };
        let b = f.encode();
        assert_eq!(&b[..4], b"1SVK");
        assert_eq!(b[4], 1);
        assert_eq!(&b[5..13], &7u64.to_le_bytes());
        assert_eq!(&b[13..21], &2u64.to_le_bytes());
        assert_eq!(&b[21..29], &2u64.to_le_bytes());
        assert_eq!(&b[29..37], &9u64.to_le_bytes());
        assert_eq!(&b[37..], &[0xAA, 0xBB]);
        assert_eq!(Frame::decode(&b), Ok((f, 39)));
    }

    #[test]
    fn rejects_garbage() {
        let f = Frame { kind: MsgType::Barrier, key: 0, sender: 0, seq: 0, payload: vec![] };
        let mut b = f.encode();
        assert_eq!(Frame::decode(&b[..10]), Err(WireError::Incomplete(27)));
        b[4] = 9;
        assert_eq!(Frame::decode(&b), Err(WireError::Type(9)));
        b[0] = 0;
        assert!(matches!(Frame::decode(&b), Err(WireError::Magic(_))));
    }
}
