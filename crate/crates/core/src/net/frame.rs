//! Length-prefixed frames.
//!
//! ```text
//! length  u32  bytes that follow the length field
//! type    u8
//! session u128
//! seq     u64
//! payload [u8; length - 29]
//! crc32   u32  over every preceding byte of the frame
//! ```
//! All integers are little-endian.

use crate::error::{Error, Result};
use crate::sharing::SessionId;

/// Bytes after the length field that are not payload: type, session, seq, crc.
pub const HEADER_REMAINDER: usize = 1 + 16 + 8 + 4;
/// Total bytes a frame adds on top of its payload.
pub const FRAME_OVERHEAD: usize = 4 + HEADER_REMAINDER;
pub const MAX_FRAME_LEN: usize = 1 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Handshake = 0x00,
    ShareTensor = 0x01,
    MaskedOpen = 0x02,
    GarbledCircuit = 0x03,
    OtMsg = 0x04,
    Result = 0x05,
    Abort = 0x0F,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Result<MsgType> {
        Ok(match v {
            0x00 => MsgType::Handshake,
            0x01 => MsgType::ShareTensor,
            0x02 => MsgType::MaskedOpen,
            0x03 => MsgType::GarbledCircuit,
            0x04 => MsgType::OtMsg,
            0x05 => MsgType::Result,
            0x0F => MsgType::Abort,
            other => return Err(Error::Decode(format!("unknown message type {other:#04x}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub session: SessionId,
    pub seq: u64,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn encoded_len(&self) -> usize {
        FRAME_OVERHEAD + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let len = (HEADER_REMAINDER + self.payload.len()) as u32;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&len.to_le_bytes());
        out.push(self.msg_type as u8);
        out.extend_from_slice(&self.session.to_le_bytes());
        out.extend_from_slice(&self.seq.to_le_bytes());
        out.extend_from_slice(&self.payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses the length field; errors on lengths no valid frame can have.
    pub fn body_len(prefix: [u8; 4]) -> Result<usize> {
        let len = u32::from_le_bytes(prefix) as usize;
        if !(HEADER_REMAINDER..=MAX_FRAME_LEN).contains(&len) {
            return Err(Error::Decode(format!("invalid frame length {len}")));
        }
        Ok(len)
    }

    /// Decodes the bytes following the length prefix.
    pub fn decode(prefix: [u8; 4], body: &[u8]) -> Result<Frame> {
        let len = Frame::body_len(prefix)?;
        if body.len() != len {
            return Err(Error::Decode(format!("frame body is {} bytes, header says {len}", body.len())));
        }
        let (content, crc_bytes) = body.split_at(len - 4);
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&prefix);
        hasher.update(content);
        let expected = u32::from_le_bytes(crc_bytes.try_into().unwrap());
        if hasher.finalize() != expected {
            return Err(Error::Decode("frame checksum mismatch".into()));
        }
        let msg_type = MsgType::from_u8(content[0])?;
        let session = u128::from_le_bytes(content[1..17].try_into().unwrap());
        let seq = u64::from_le_bytes(content[17..25].try_into().unwrap());
        Ok(Frame { msg_type, session, seq, payload: content[25..].to_vec() })
    }

    pub fn decode_bytes(bytes: &[u8]) -> Result<Frame> {
        if bytes.len() < 4 {
            return Err(Error::Decode("truncated frame".into()));
        }
        Frame::decode(bytes[..4].try_into().unwrap(), &bytes[4..])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_payload_frame() {
        let f = Frame { msg_type: MsgType::ShareTensor, session: 7, seq: 0, payload: vec![] };
        let bytes = f.encode();
        assert_eq!(bytes.len(), FRAME_OVERHEAD);
        assert_eq!(u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize, HEADER_REMAINDER);
        assert_eq!(Frame::decode_bytes(&bytes).unwrap(), f);
    }

    #[test]
    fn layout_is_little_endian() {
        let f = Frame { msg_type: MsgType::OtMsg, session: 0x0102, seq: 0x0a0b, payload: vec![0xee] };
        let b = f.encode();
        assert_eq!(&b[..4], &(30u32).to_le_bytes());
        assert_eq!(b[4], 0x04);
        assert_eq!(&b[5..7], &[0x02, 0x01]);
        assert_eq!(&b[21..23], &[0x0b, 0x0a]);
        assert_eq!(b[29], 0xee);
    }

    #[test]
    fn every_single_bit_flip_is_rejected() {
        let f = Frame { msg_type: MsgType::MaskedOpen, session: 99, seq: 3, payload: vec![1, 2, 3, 4, 5] };
        let bytes = f.encode();
        for i in 0..bytes.len() * 8 {
            let mut b = bytes.clone();
            b[i / 8] ^= 1 << (i % 8);
            let decoded = Frame::decode_bytes(&b[..b.len().min(4 + Frame::body_len(b[..4].try_into().unwrap()).unwrap_or(0))]);
            assert!(decoded.is_err() || decoded.unwrap() != f, "flip {i} undetected");
        }
    }

    #[test]
    fn unknown_type_rejected() {
        assert!(MsgType::from_u8(0x09).is_err());
    }

    proptest! {
        #[test]
        fn canonical_encoding(ty in prop::sample::select(vec![0u8, 1, 2, 3, 4, 5, 15]),
                              session in any::<u128>(), seq in any::<u64>(),
                              payload in proptest::collection::vec(any::<u8>(), 0..256)) {
            let f = Frame { msg_type: MsgType::from_u8(ty).unwrap(), session, seq, payload };
            let bytes = f.encode();
            let back = Frame::decode_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &f);
            prop_assert_eq!(back.encode(), bytes);
        }
    }
}
