//! Payload encodings. Shapes are never sent: both parties derive them from
//! the public reconstructor specs, and the receiver checks the word count.

use num_bigint::BigUint;

use crate::error::{Error, Result};
use crate::fixedpoint::RingParams;
use crate::net::channel::Channel;
use crate::net::frame::MsgType;
use crate::sharing::ShareTensor;

pub fn encode_words(words: &[u64], params: RingParams, out: &mut Vec<u8>) {
    let wb = params.word_bytes();
    out.reserve(words.len() * wb);
    for w in words {
        out.extend_from_slice(&w.to_le_bytes()[..wb]);
    }
}

pub fn decode_words(bytes: &[u8], count: usize, params: RingParams) -> Result<Vec<u64>> {
    let wb = params.word_bytes();
    if bytes.len() != count * wb {
        return Err(Error::Decode(format!("expected {} bytes of ring words, got {}", count * wb, bytes.len())));
    }
    Ok(bytes
        .chunks_exact(wb)
        .map(|c| {
            let mut buf = [0u8; 8];
            buf[..wb].copy_from_slice(c);
            u64::from_le_bytes(buf)
        })
        .collect())
}

pub fn send_shares(chan: &mut Channel, share: &ShareTensor) -> Result<()> {
    let mut payload = Vec::new();
    encode_words(share.data(), share.params(), &mut payload);
    chan.send(MsgType::ShareTensor, payload)
}

/// Receives the peer's share of a tensor whose shape both sides know.
pub fn recv_shares(chan: &mut Channel, like: &ShareTensor) -> Result<ShareTensor> {
    let payload = chan.recv(MsgType::ShareTensor)?;
    let data = decode_words(&payload, like.len(), like.params())?;
    ShareTensor::new(data, like.shape().to_vec(), like.owner().peer(), like.session(), like.params())
}

/// Fixed-width little-endian encoding of a big integer.
pub fn put_biguint(v: &BigUint, width: usize, out: &mut Vec<u8>) -> Result<()> {
    let mut bytes = v.to_bytes_le();
    if bytes.len() > width {
        return Err(Error::OtProtocol(format!("integer needs {} bytes, field is {width}", bytes.len())));
    }
    bytes.resize(width, 0);
    out.extend_from_slice(&bytes);
    Ok(())
}

/// Sequential reader over a payload.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Decode(format!("payload truncated: need {n} more bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    pub fn biguint(&mut self, width: usize) -> Result<BigUint> {
        Ok(BigUint::from_bytes_le(self.take(width)?))
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Decode(format!("{} trailing payload bytes", self.remaining())));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::transport::mem_pair;
    use crate::sharing::PartyId;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use std::time::Duration;

    #[test]
    fn share_tensor_fuzz_round_trip() {
        let (a, b) = mem_pair(Duration::from_secs(5));
        let mut tx = Channel::new(Box::new(a), 3);
        let mut rx = Channel::new(Box::new(b), 3);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for i in 0..10_000 {
            let params = [RingParams::default(), RingParams::new(8, 3).unwrap(), RingParams::new(32, 8).unwrap()][i % 3];
            let n = rng.gen_range(0..20);
            let data: Vec<u64> = (0..n).map(|_| rng.gen()).collect();
            let share = ShareTensor::new(data, vec![n], PartyId::S1, 3, params).unwrap();
            send_shares(&mut tx, &share).unwrap();
            let like = ShareTensor::zeros(vec![n], PartyId::S2, 3, params);
            let got = recv_shares(&mut rx, &like).unwrap();
            assert_eq!(got, share);
            let mut first = Vec::new();
            encode_words(share.data(), params, &mut first);
            let mut second = Vec::new();
            encode_words(got.data(), params, &mut second);
            assert_eq!(first, second);
        }
    }

    #[test]
    fn empty_tensor_is_zero_payload() {
        let mut out = Vec::new();
        encode_words(&[], RingParams::default(), &mut out);
        assert!(out.is_empty());
        assert!(decode_words(&out, 0, RingParams::default()).unwrap().is_empty());
    }

    #[test]
    fn wrong_word_count_is_decode_error() {
        let p = RingParams::default();
        assert!(matches!(decode_words(&[0u8; 12], 2, p), Err(Error::Decode(_))));
    }

    #[test]
    fn biguint_fixed_width() {
        let v = BigUint::from(0x1234u32);
        let mut out = Vec::new();
        put_biguint(&v, 8, &mut out).unwrap();
        assert_eq!(out, vec![0x34, 0x12, 0, 0, 0, 0, 0, 0]);
        assert_eq!(Reader::new(&out).biguint(8).unwrap(), v);
        assert!(put_biguint(&BigUint::from(u64::MAX), 4, &mut Vec::new()).is_err());
    }
}
