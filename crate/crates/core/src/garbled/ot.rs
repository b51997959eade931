//! 1-out-of-2 oblivious transfer of 128-bit labels.
//!
//! The base protocol is RSA blinding: the sender publishes `(N, e)` and two
//! random values `x0, x1`; the receiver with choice `b` returns
//! `v = x_b + k^e mod N`; the sender answers `m_i + (v - x_i)^d mod N` for
//! both `i`, and only `m_b` unblinds with `k`.
//!
//! [`OtMode::Extended`] runs 128 of those once per session and stretches
//! them with an IKNP extension so that large batches cost symmetric
//! operations only.

use num_bigint::{BigUint, RandBigInt};
use num_traits::{One, Zero};
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::garbled::gc::{random_label, Label};
use crate::net::channel::Channel;
use crate::net::codec::{put_biguint, Reader};
use crate::net::frame::MsgType;

pub const RSA_EXPONENT: u32 = 65537;
pub const DEFAULT_MODULUS_BITS: usize = 2048;
pub const TEST_MODULUS_BITS: usize = 512;
const BASE_OTS: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OtMode {
    /// One RSA-blinding transfer per bit.
    Rsa,
    /// RSA base transfers once per session, then IKNP extension.
    Extended,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OtConfig {
    pub mode: OtMode,
    pub modulus_bits: usize,
}

impl Default for OtConfig {
    fn default() -> Self {
        OtConfig { mode: OtMode::Extended, modulus_bits: DEFAULT_MODULUS_BITS }
    }
}

impl OtConfig {
    pub fn test() -> Self {
        OtConfig { mode: OtMode::Extended, modulus_bits: TEST_MODULUS_BITS }
    }

    pub fn width(&self) -> usize {
        self.modulus_bits / 8
    }
}

#[derive(Clone, Debug)]
pub struct RsaKey {
    pub n: BigUint,
    pub e: BigUint,
    d: BigUint,
    p: BigUint,
    q: BigUint,
    dp: BigUint,
    dq: BigUint,
    qinv: BigUint,
}

const SMALL_PRIMES: [u32; 54] = [
    3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97, 101, 103, 107, 109, 113, 127, 131, 137, 139, 149,
    151, 157, 163, 167, 173, 179, 181, 191, 193, 197, 199, 211, 223, 227, 229, 233, 239, 241, 251, 257,
];

fn is_probable_prime<R: RngCore>(n: &BigUint, rounds: usize, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if *n < two {
        return false;
    }
    for &p in &SMALL_PRIMES {
        if (n % p).is_zero() {
            return *n == BigUint::from(p);
        }
    }
    let one = BigUint::one();
    let n1 = n - &one;
    let s = n1.trailing_zeros().unwrap_or(0);
    let d = &n1 >> s;
    'witness: for _ in 0..rounds {
        let a = rng.gen_biguint_range(&two, &n1);
        let mut x = a.modpow(&d, n);
        if x == one || x == n1 {
            continue;
        }
        for _ in 1..s {
            x = x.modpow(&two, n);
            if x == n1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

fn random_prime<R: RngCore>(bits: usize, rng: &mut R) -> BigUint {
    let e = BigUint::from(RSA_EXPONENT);
    loop {
        let mut c = rng.gen_biguint(bits as u64);
        c.set_bit(bits as u64 - 1, true);
        c.set_bit(bits as u64 - 2, true);
        c.set_bit(0, true);
        if is_probable_prime(&c, 24, rng) && !((&c - 1u32) % &e).is_zero() {
            return c;
        }
    }
}

impl RsaKey {
    pub fn generate<R: RngCore + CryptoRng>(modulus_bits: usize, rng: &mut R) -> Result<RsaKey> {
        if modulus_bits < 256 || !modulus_bits.is_multiple_of(16) {
            return Err(Error::OtProtocol(format!("unsupported modulus size {modulus_bits}")));
        }
        let e = BigUint::from(RSA_EXPONENT);
        loop {
            let p = random_prime(modulus_bits / 2, rng);
            let q = random_prime(modulus_bits / 2, rng);
            if p == q {
                continue;
            }
            let n = &p * &q;
            if n.bits() != modulus_bits as u64 {
                continue;
            }
            let phi = (&p - 1u32) * (&q - 1u32);
            let Some(d) = e.modinv(&phi) else { continue };
            let dp = &d % (&p - 1u32);
            let dq = &d % (&q - 1u32);
            let Some(qinv) = q.modinv(&p) else { continue };
            return Ok(RsaKey { n, e, d, p, q, dp, dq, qinv });
        }
    }

    pub fn public(&self, m: &BigUint) -> BigUint {
        m.modpow(&self.e, &self.n)
    }

    /// `c^d mod N` through the Chinese remainder theorem.
    pub fn private(&self, c: &BigUint) -> BigUint {
        let m1 = (c % &self.p).modpow(&self.dp, &self.p);
        let m2 = (c % &self.q).modpow(&self.dq, &self.q);
        let diff = if m1 >= m2 { &m1 - &m2 } else { &self.p - ((&m2 - &m1) % &self.p) };
        let h = (&self.qinv * diff) % &self.p;
        m2 + h * &self.q
    }

    pub fn private_plain(&self, c: &BigUint) -> BigUint {
        c.modpow(&self.d, &self.n)
    }
}

/// First sender message for a batch: random `x0, x1` per transfer.
pub struct SenderSetup {
    pub x0: Vec<BigUint>,
    pub x1: Vec<BigUint>,
}

pub fn sender_setup<R: RngCore>(key: &RsaKey, count: usize, rng: &mut R) -> SenderSetup {
    let mut x0 = Vec::with_capacity(count);
    let mut x1 = Vec::with_capacity(count);
    for _ in 0..count {
        let a = rng.gen_biguint_below(&key.n);
        let mut b = rng.gen_biguint_below(&key.n);
        while b == a {
            b = rng.gen_biguint_below(&key.n);
        }
        x0.push(a);
        x1.push(b);
    }
    SenderSetup { x0, x1 }
}

/// Receiver: picks the blinding `k` and returns `(k, v = x_b + k^e mod N)`.
pub fn receiver_blind<R: RngCore>(n: &BigUint, e: &BigUint, x_b: &BigUint, rng: &mut R) -> (BigUint, BigUint) {
    let k = rng.gen_biguint_below(n);
    let v = (x_b + k.modpow(e, n)) % n;
    (k, v)
}

/// Sender: `m'_i = m_i + (v - x_i)^d mod N` for both messages.
pub fn sender_respond(key: &RsaKey, x0: &BigUint, x1: &BigUint, v: &BigUint, m0: Label, m1: Label) -> Result<(BigUint, BigUint)> {
    if *v >= key.n {
        return Err(Error::OtProtocol("blinded value is not reduced modulo N".into()));
    }
    let n = &key.n;
    let sub = |a: &BigUint, b: &BigUint| if a >= b { a - b } else { n - (b - a) };
    let k0 = key.private(&sub(v, x0));
    let k1 = key.private(&sub(v, x1));
    Ok(((BigUint::from(m0) + k0) % n, (BigUint::from(m1) + k1) % n))
}

/// Receiver: `m_b = m'_b - k mod N`, which must fit a label.
pub fn receiver_unblind(n: &BigUint, m_b: &BigUint, k: &BigUint) -> Result<Label> {
    if m_b >= n {
        return Err(Error::OtProtocol("masked message is not reduced modulo N".into()));
    }
    let m = if m_b >= k { m_b - k } else { n - (k - m_b) };
    if m.bits() > 128 {
        return Err(Error::OtProtocol("unblinded message exceeds 128 bits".into()));
    }
    let digits = m.to_u64_digits();
    Ok(digits.iter().rev().fold(0u128, |acc, &d| (acc << 64) | d as u128))
}

/// RSA-blinding OT, sender side, over the channel (three frames).
pub fn rsa_ot_send<R: RngCore + CryptoRng>(chan: &mut Channel, key: &RsaKey, pairs: &[(Label, Label)], rng: &mut R) -> Result<()> {
    let width = (key.n.bits() as usize).div_ceil(8);
    let setup = sender_setup(key, pairs.len(), rng);
    let mut msg = Vec::with_capacity(8 + width * (2 + 2 * pairs.len()));
    msg.extend_from_slice(&(width as u32).to_le_bytes());
    put_biguint(&key.n, width, &mut msg)?;
    put_biguint(&key.e, width, &mut msg)?;
    msg.extend_from_slice(&(pairs.len() as u32).to_le_bytes());
    for (a, b) in setup.x0.iter().zip(&setup.x1) {
        put_biguint(a, width, &mut msg)?;
        put_biguint(b, width, &mut msg)?;
    }
    chan.send(MsgType::OtMsg, msg)?;

    let reply = chan.recv(MsgType::OtMsg)?;
    if reply.len() != width * pairs.len() {
        return Err(Error::OtProtocol(format!("expected {} blinded values", pairs.len())));
    }
    let mut r = Reader::new(&reply);
    let mut out = Vec::with_capacity(2 * width * pairs.len());
    for (i, &(m0, m1)) in pairs.iter().enumerate() {
        let v = r.biguint(width)?;
        let (a, b) = sender_respond(key, &setup.x0[i], &setup.x1[i], &v, m0, m1)?;
        put_biguint(&a, width, &mut out)?;
        put_biguint(&b, width, &mut out)?;
    }
    chan.send(MsgType::OtMsg, out)
}

/// RSA-blinding OT, receiver side.
pub fn rsa_ot_receive<R: RngCore + CryptoRng>(chan: &mut Channel, choices: &[bool], rng: &mut R) -> Result<Vec<Label>> {
    let first = chan.recv(MsgType::OtMsg)?;
    let mut r = Reader::new(&first);
    let width = r.u32()? as usize;
    if width == 0 || width > 1024 {
        return Err(Error::OtProtocol(format!("implausible modulus width {width}")));
    }
    let n = r.biguint(width)?;
    let e = r.biguint(width)?;
    let count = r.u32()? as usize;
    if count != choices.len() || r.remaining() != 2 * width * count {
        return Err(Error::OtProtocol(format!("sender offers {count} transfers, {} wanted", choices.len())));
    }
    if n.bits() < 256 {
        return Err(Error::OtProtocol("modulus too small".into()));
    }
    let mut ks = Vec::with_capacity(count);
    let mut reply = Vec::with_capacity(width * count);
    for &b in choices {
        let x0 = r.biguint(width)?;
        let x1 = r.biguint(width)?;
        let (k, v) = receiver_blind(&n, &e, if b { &x1 } else { &x0 }, rng);
        put_biguint(&v, width, &mut reply)?;
        ks.push(k);
    }
    chan.send(MsgType::OtMsg, reply)?;

    let last = chan.recv(MsgType::OtMsg)?;
    if last.len() != 2 * width * count {
        return Err(Error::OtProtocol("masked message batch has the wrong length".into()));
    }
    let mut r = Reader::new(&last);
    let mut out = Vec::with_capacity(count);
    for (&b, k) in choices.iter().zip(&ks) {
        let m0 = r.biguint(width)?;
        let m1 = r.biguint(width)?;
        out.push(receiver_unblind(&n, if b { &m1 } else { &m0 }, k)?);
    }
    Ok(out)
}

fn ot_hash(index: u64, q: u128) -> u128 {
    let mut h = Sha256::new();
    h.update(b"iknp");
    h.update(index.to_le_bytes());
    h.update(q.to_le_bytes());
    u128::from_le_bytes(h.finalize()[..16].try_into().unwrap())
}

fn prg(seed: Label) -> ChaCha20Rng {
    let key: [u8; 32] = Sha256::digest(seed.to_le_bytes()).into();
    ChaCha20Rng::from_seed(key)
}

/// Transposes 128 bit-columns of `m` bits into `m` 128-bit rows.
fn transpose(columns: &[Vec<u8>], m: usize) -> Vec<u128> {
    let mut rows = vec![0u128; m];
    for (j, col) in columns.iter().enumerate() {
        for (byte_index, &byte) in col.iter().enumerate() {
            if byte == 0 {
                continue;
            }
            for bit in 0..8 {
                let i = byte_index * 8 + bit;
                if i < m && (byte >> bit) & 1 == 1 {
                    rows[i] |= 1u128 << j;
                }
            }
        }
    }
    rows
}

struct ExtSender {
    s: u128,
    prgs: Vec<ChaCha20Rng>,
    counter: u64,
}

struct ExtReceiver {
    prg0: Vec<ChaCha20Rng>,
    prg1: Vec<ChaCha20Rng>,
    counter: u64,
}

/// The garbler's OT state for one session.
pub struct OtSender {
    config: OtConfig,
    rsa: Option<RsaKey>,
    ext: Option<ExtSender>,
}

/// The evaluator's OT state for one session.
pub struct OtReceiver {
    config: OtConfig,
    ext: Option<ExtReceiver>,
}

impl OtSender {
    pub fn new(config: OtConfig) -> Self {
        OtSender { config, rsa: None, ext: None }
    }

    pub fn send<R: RngCore + CryptoRng>(&mut self, chan: &mut Channel, pairs: &[(Label, Label)], rng: &mut R) -> Result<()> {
        match self.config.mode {
            OtMode::Rsa => {
                if self.rsa.is_none() {
                    self.rsa = Some(RsaKey::generate(self.config.modulus_bits, rng)?);
                }
                rsa_ot_send(chan, self.rsa.as_ref().unwrap(), pairs, rng)
            }
            OtMode::Extended => {
                if self.ext.is_none() {
                    let s = random_label(rng)?;
                    let choices: Vec<bool> = (0..BASE_OTS).map(|j| (s >> j) & 1 == 1).collect();
                    let seeds = rsa_ot_receive(chan, &choices, rng)?;
                    self.ext = Some(ExtSender { s, prgs: seeds.into_iter().map(prg).collect(), counter: 0 });
                }
                let ext = self.ext.as_mut().unwrap();
                let m = pairs.len();
                let bytes = m.div_ceil(8);
                let u = chan.recv(MsgType::OtMsg)?;
                if u.len() != BASE_OTS * bytes {
                    return Err(Error::OtProtocol(format!("extension matrix is {} bytes, expected {}", u.len(), BASE_OTS * bytes)));
                }
                let mut cols = Vec::with_capacity(BASE_OTS);
                for (j, g) in ext.prgs.iter_mut().enumerate() {
                    let mut col = vec![0u8; bytes];
                    g.fill_bytes(&mut col);
                    if (ext.s >> j) & 1 == 1 {
                        for (c, x) in col.iter_mut().zip(&u[j * bytes..(j + 1) * bytes]) {
                            *c ^= x;
                        }
                    }
                    cols.push(col);
                }
                let q = transpose(&cols, m);
                let mut out = Vec::with_capacity(32 * m);
                for (i, (&(m0, m1), &qi)) in pairs.iter().zip(&q).enumerate() {
                    let idx = ext.counter + i as u64;
                    out.extend_from_slice(&(m0 ^ ot_hash(idx, qi)).to_le_bytes());
                    out.extend_from_slice(&(m1 ^ ot_hash(idx, qi ^ ext.s)).to_le_bytes());
                }
                ext.counter += m as u64;
                chan.send(MsgType::OtMsg, out)
            }
        }
    }
}

impl OtReceiver {
    pub fn new(config: OtConfig) -> Self {
        OtReceiver { config, ext: None }
    }

    pub fn receive<R: RngCore + CryptoRng>(&mut self, chan: &mut Channel, choices: &[bool], rng: &mut R) -> Result<Vec<Label>> {
        match self.config.mode {
            OtMode::Rsa => rsa_ot_receive(chan, choices, rng),
            OtMode::Extended => {
                if self.ext.is_none() {
                    let key = RsaKey::generate(self.config.modulus_bits, rng)?;
                    let seeds: Vec<(Label, Label)> = (0..BASE_OTS).map(|_| Ok((random_label(rng)?, random_label(rng)?))).collect::<Result<_>>()?;
                    rsa_ot_send(chan, &key, &seeds, rng)?;
                    self.ext = Some(ExtReceiver {
                        prg0: seeds.iter().map(|s| prg(s.0)).collect(),
                        prg1: seeds.iter().map(|s| prg(s.1)).collect(),
                        counter: 0,
                    });
                }
                let ext = self.ext.as_mut().unwrap();
                let m = choices.len();
                let bytes = m.div_ceil(8);
                let mut r = vec![0u8; bytes];
                for (i, &c) in choices.iter().enumerate() {
                    r[i / 8] |= (c as u8) << (i % 8);
                }
                let mut t_cols = Vec::with_capacity(BASE_OTS);
                let mut u = Vec::with_capacity(BASE_OTS * bytes);
                for j in 0..BASE_OTS {
                    let mut t = vec![0u8; bytes];
                    ext.prg0[j].fill_bytes(&mut t);
                    let mut g1 = vec![0u8; bytes];
                    ext.prg1[j].fill_bytes(&mut g1);
                    u.extend(t.iter().zip(&g1).zip(&r).map(|((a, b), c)| a ^ b ^ c));
                    t_cols.push(t);
                }
                chan.send(MsgType::OtMsg, u)?;
                let t = transpose(&t_cols, m);
                let y = chan.recv(MsgType::OtMsg)?;
                if y.len() != 32 * m {
                    return Err(Error::OtProtocol(format!("extension reply is {} bytes, expected {}", y.len(), 32 * m)));
                }
                let mut out = Vec::with_capacity(m);
                for (i, (&c, &ti)) in choices.iter().zip(&t).enumerate() {
                    let off = 32 * i + if c { 16 } else { 0 };
                    let yi = u128::from_le_bytes(y[off..off + 16].try_into().unwrap());
                    out.push(yi ^ ot_hash(ext.counter + i as u64, ti));
                }
                ext.counter += m as u64;
                Ok(out)
            }
        }
    }
}

/// Online bytes (frame payloads plus framing) one batch of `m` transfers
/// costs, including the one-off base transfers when `first` is set.
pub fn ot_bytes(config: OtConfig, m: usize, first: bool) -> u64 {
    let w = config.width();
    let frame = |p: usize| Channel::frame_cost(p);
    let rsa = |count: usize| frame(8 + w * (2 + 2 * count)) + frame(w * count) + frame(2 * w * count);
    match config.mode {
        OtMode::Rsa => rsa(m),
        OtMode::Extended => {
            let base = if first { rsa(BASE_OTS) } else { 0 };
            base + frame(BASE_OTS * m.div_ceil(8)) + frame(32 * m)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::transport::mem_pair;
    use rand::Rng;
    use std::thread;
    use std::time::Duration;

    fn key(seed: u64) -> RsaKey {
        RsaKey::generate(TEST_MODULUS_BITS, &mut ChaCha20Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn keygen_and_crt_agree() {
        let k = key(1);
        assert_eq!(k.n.bits(), 512);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for _ in 0..20 {
            let m = rng.gen_biguint_below(&k.n);
            let c = k.public(&m);
            assert_eq!(k.private(&c), m);
            assert_eq!(k.private_plain(&c), m);
        }
    }

    #[test]
    fn choice_zero_trace() {
        let k = key(3);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let setup = sender_setup(&k, 1, &mut rng);
        let (blind, v) = receiver_blind(&k.n, &k.e, &setup.x0[0], &mut rng);
        // the sender's k0 equals the receiver's blinding; k1 is unrelated
        assert_eq!(k.private(&((&v + &k.n - &setup.x0[0]) % &k.n)), blind);
        let (m0p, m1p) = sender_respond(&k, &setup.x0[0], &setup.x1[0], &v, 11, 22).unwrap();
        assert_eq!(receiver_unblind(&k.n, &m0p, &blind).unwrap(), 11);
        assert_ne!(receiver_unblind(&k.n, &m1p, &blind).ok(), Some(22));
    }

    #[test]
    fn equal_messages_transfer_for_either_choice() {
        let k = key(5);
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        for b in [false, true] {
            let s = sender_setup(&k, 1, &mut rng);
            let (blind, v) = receiver_blind(&k.n, &k.e, if b { &s.x1[0] } else { &s.x0[0] }, &mut rng);
            let (a, c) = sender_respond(&k, &s.x0[0], &s.x1[0], &v, 99, 99).unwrap();
            assert_eq!(receiver_unblind(&k.n, if b { &c } else { &a }, &blind).unwrap(), 99);
        }
    }

    #[test]
    fn unreduced_blinded_value_rejected() {
        let k = key(7);
        let s = sender_setup(&k, 1, &mut ChaCha20Rng::seed_from_u64(8));
        let v = &k.n + 1u32;
        assert!(matches!(sender_respond(&k, &s.x0[0], &s.x1[0], &v, 1, 2), Err(Error::OtProtocol(_))));
    }

    fn run(config: OtConfig, batches: Vec<Vec<(Label, Label, bool)>>) -> Vec<Vec<Label>> {
        let (a, b) = mem_pair(Duration::from_secs(30));
        let sender_batches: Vec<Vec<(Label, Label)>> = batches.iter().map(|v| v.iter().map(|t| (t.0, t.1)).collect()).collect();
        let t = thread::spawn(move || {
            let mut chan = Channel::new(Box::new(a), 9);
            let mut rng = ChaCha20Rng::seed_from_u64(10);
            let mut s = OtSender::new(config);
            for pairs in sender_batches {
                s.send(&mut chan, &pairs, &mut rng).unwrap();
            }
        });
        let mut chan = Channel::new(Box::new(b), 9);
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mut r = OtReceiver::new(config);
        let out = batches.iter().map(|v| r.receive(&mut chan, &v.iter().map(|t| t.2).collect::<Vec<_>>(), &mut rng).unwrap()).collect();
        t.join().unwrap();
        out
    }

    #[test]
    fn thousand_random_transfers_both_modes() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        for mode in [OtMode::Rsa, OtMode::Extended] {
            let batches: Vec<Vec<(Label, Label, bool)>> =
                [1usize, 7, 992].iter().map(|&n| (0..n).map(|_| (rng.gen(), rng.gen(), rng.gen())).collect()).collect();
            let got = run(OtConfig { mode, modulus_bits: TEST_MODULUS_BITS }, batches.clone());
            for (batch, out) in batches.iter().zip(&got) {
                for (&(m0, m1, b), &m) in batch.iter().zip(out) {
                    assert_eq!(m, if b { m1 } else { m0 });
                }
            }
        }
    }

    #[test]
    fn byte_accounting_matches_channel() {
        for mode in [OtMode::Rsa, OtMode::Extended] {
            let config = OtConfig { mode, modulus_bits: TEST_MODULUS_BITS };
            let (a, b) = mem_pair(Duration::from_secs(30));
            let t = thread::spawn(move || {
                let mut chan = Channel::new(Box::new(a), 1);
                let mut rng = ChaCha20Rng::seed_from_u64(1);
                let mut s = OtSender::new(config);
                s.send(&mut chan, &[(1, 2); 13], &mut rng).unwrap();
                s.send(&mut chan, &[(1, 2); 40], &mut rng).unwrap();
                chan.stats()
            });
            let mut chan = Channel::new(Box::new(b), 1);
            let mut rng = ChaCha20Rng::seed_from_u64(2);
            let mut r = OtReceiver::new(config);
            r.receive(&mut chan, &[true; 13], &mut rng).unwrap();
            r.receive(&mut chan, &[false; 40], &mut rng).unwrap();
            let s = t.join().unwrap();
            let total = s.bytes_sent + chan.stats().bytes_sent;
            assert_eq!(total, ot_bytes(config, 13, true) + ot_bytes(config, 40, false));
        }
    }
}
