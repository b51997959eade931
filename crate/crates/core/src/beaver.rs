//! Offline phase: a trusted dealer samples correlated randomness
//! `(U, V, Q = U·V)` and hands each party one additive share of it.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Mutex;

use rand::{CryptoRng, RngCore};

use crate::error::{Error, Result};
use crate::fixedpoint::{ring_matmul, RingParams, RingTensor};
use crate::sharing::{random_words, share, PartyId, ShareTensor};

const TRIPLE_MAGIC: &[u8; 4] = b"PVTR";
const TRIPLE_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TripleShape {
    Elementwise {
        len: usize,
    },
    /// `U: m×n`, `V: n×p`, `Q: m×p`.
    MatMul {
        m: usize,
        n: usize,
        p: usize,
    },
}

impl TripleShape {
    pub fn u_shape(&self) -> Vec<usize> {
        match *self {
            TripleShape::Elementwise { len } => vec![len],
            TripleShape::MatMul { m, n, .. } => vec![m, n],
        }
    }

    pub fn v_shape(&self) -> Vec<usize> {
        match *self {
            TripleShape::Elementwise { len } => vec![len],
            TripleShape::MatMul { n, p, .. } => vec![n, p],
        }
    }

    pub fn q_shape(&self) -> Vec<usize> {
        match *self {
            TripleShape::Elementwise { len } => vec![len],
            TripleShape::MatMul { m, p, .. } => vec![m, p],
        }
    }

    /// Ring words one party stores per triple.
    pub fn words(&self) -> usize {
        [self.u_shape(), self.v_shape(), self.q_shape()].iter().map(|s| s.iter().product::<usize>()).sum()
    }

    fn dims(&self) -> Vec<u32> {
        match *self {
            TripleShape::Elementwise { len } => vec![len as u32],
            TripleShape::MatMul { m, n, p } => vec![m as u32, n as u32, p as u32],
        }
    }

    fn from_dims(dims: &[u32]) -> Result<TripleShape> {
        match *dims {
            [len] => Ok(TripleShape::Elementwise { len: len as usize }),
            [m, n, p] => Ok(TripleShape::MatMul { m: m as usize, n: n as usize, p: p as usize }),
            _ => Err(Error::Decode(format!("triple block of rank {}", dims.len()))),
        }
    }
}

impl std::fmt::Display for TripleShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TripleShape::Elementwise { len } => write!(f, "elementwise[{len}]"),
            TripleShape::MatMul { m, n, p } => write!(f, "matmul[{m}x{n}x{p}]"),
        }
    }
}

/// One party's share of a triple.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BeaverTriple {
    pub shape: TripleShape,
    pub u: ShareTensor,
    pub v: ShareTensor,
    pub q: ShareTensor,
}

#[derive(Clone, Debug)]
struct TripleBlock {
    shape: TripleShape,
    triples: Vec<BeaverTriple>,
}

/// A party's offline material: one block per planned operation, each
/// holding one triple per prediction slot.
#[derive(Debug)]
pub struct TripleStore {
    owner: PartyId,
    params: RingParams,
    blocks: Vec<TripleBlock>,
    consumed: Mutex<Vec<Vec<bool>>>,
}

impl TripleStore {
    fn from_blocks(owner: PartyId, params: RingParams, blocks: Vec<TripleBlock>) -> TripleStore {
        let consumed = blocks.iter().map(|b| vec![false; b.triples.len()]).collect();
        TripleStore { owner, params, blocks, consumed: Mutex::new(consumed) }
    }

    pub fn owner(&self) -> PartyId {
        self.owner
    }

    pub fn params(&self) -> RingParams {
        self.params
    }

    pub fn generated(&self) -> usize {
        self.blocks.iter().map(|b| b.triples.len()).sum()
    }

    pub fn consumed(&self) -> usize {
        self.consumed.lock().unwrap().iter().flatten().filter(|&&c| c).count()
    }

    /// Prediction slots the store was dealt for.
    pub fn slots(&self) -> usize {
        self.blocks.iter().map(|b| b.triples.len()).min().unwrap_or(0)
    }

    pub fn plan(&self) -> Vec<TripleShape> {
        self.blocks.iter().map(|b| b.shape).collect()
    }

    /// The first unconsumed triple of `shape`, marked consumed.
    pub fn take_triple(&self, shape: TripleShape) -> Result<BeaverTriple> {
        let mut consumed = self.consumed.lock().unwrap();
        for (bi, block) in self.blocks.iter().enumerate() {
            if block.shape != shape {
                continue;
            }
            if let Some(i) = consumed[bi].iter().position(|&c| !c) {
                consumed[bi][i] = true;
                return Ok(block.triples[i].clone());
            }
        }
        Err(Error::TripleExhausted(shape.to_string()))
    }

    /// Every triple of one prediction slot, in plan order, marked consumed.
    pub fn take_slot(&self, slot: usize) -> Result<TripleQueue> {
        let mut consumed = self.consumed.lock().unwrap();
        let mut out = VecDeque::with_capacity(self.blocks.len());
        for (bi, block) in self.blocks.iter().enumerate() {
            match consumed[bi].get(slot) {
                Some(false) => {}
                _ => return Err(Error::TripleExhausted(format!("{} in slot {slot}", block.shape))),
            }
        }
        for (bi, block) in self.blocks.iter().enumerate() {
            consumed[bi][slot] = true;
            out.push_back(block.triples[slot].clone());
        }
        Ok(TripleQueue { triples: out, taken: 0 })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let (k, f) = (self.params.k() as u8, self.params.f() as u8);
        for block in &self.blocks {
            let dims = block.shape.dims();
            let mut header = Vec::with_capacity(16 + 4 * dims.len());
            header.extend_from_slice(TRIPLE_MAGIC);
            header.extend_from_slice(&TRIPLE_VERSION.to_le_bytes());
            header.push(k);
            header.push(f);
            header.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in &dims {
                header.extend_from_slice(&d.to_le_bytes());
            }
            header.extend_from_slice(&(block.triples.len() as u64).to_le_bytes());
            w.write_all(&header)?;
            let mut body = Vec::with_capacity(block.triples.len() * block.shape.words() * 8);
            for t in &block.triples {
                for v in t.u.data().iter().chain(t.v.data()).chain(t.q.data()) {
                    body.extend_from_slice(&v.to_le_bytes());
                }
            }
            w.write_all(&body)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read, owner: PartyId) -> Result<TripleStore> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if bytes.len() - pos < n {
                return Err(Error::Decode("triple file truncated".into()));
            }
            pos += n;
            Ok(&bytes[pos - n..pos])
        };
        let mut blocks = Vec::new();
        let mut params = None;
        loop {
            let magic = match take(4) {
                Ok(m) => m,
                Err(_) if blocks.is_empty() => return Err(Error::Decode("empty triple file".into())),
                Err(_) => break,
            };
            if magic != TRIPLE_MAGIC {
                return Err(Error::Decode("bad triple file magic".into()));
            }
            let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
            if version != TRIPLE_VERSION {
                return Err(Error::VersionMismatch { ours: TRIPLE_VERSION, theirs: version });
            }
            let kf = take(2)?;
            let p = RingParams::new(kf[0] as u32, kf[1] as u32)?;
            if params.is_some_and(|q| q != p) {
                return Err(Error::ParamsMismatch("triple blocks disagree on ring parameters".into()));
            }
            params = Some(p);
            let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            if rank == 0 || rank > 3 {
                return Err(Error::Decode(format!("triple block of rank {rank}")));
            }
            let dims: Vec<u32> = (0..rank).map(|_| take(4).map(|d| u32::from_le_bytes(d.try_into().unwrap()))).collect::<Result<_>>()?;
            let shape = TripleShape::from_dims(&dims)?;
            let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            let words = shape.words();
            let body = take(count.checked_mul(words * 8).ok_or_else(|| Error::Decode("triple count overflows".into()))?)?;
            let mut triples = Vec::with_capacity(count);
            let mut it = body.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap()));
            for _ in 0..count {
                let mut grab = |s: Vec<usize>| {
                    let n = s.iter().product();
                    ShareTensor::new(it.by_ref().take(n).collect(), s, owner, 0, p)
                };
                let u = grab(shape.u_shape())?;
                let v = grab(shape.v_shape())?;
                let q = grab(shape.q_shape())?;
                triples.push(BeaverTriple { shape, u, v, q });
            }
            blocks.push(TripleBlock { shape, triples });
        }
        Ok(TripleStore::from_blocks(owner, params.unwrap(), blocks))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path, owner: PartyId) -> Result<TripleStore> {
        let f = std::fs::File::open(path)?;
        TripleStore::read_from(std::io::BufReader::new(f), owner)
    }
}

/// The triples one prediction consumes, handed out in order.
#[derive(Debug, Default)]
pub struct TripleQueue {
    triples: VecDeque<BeaverTriple>,
    taken: usize,
}

impl TripleQueue {
    pub fn new(triples: Vec<BeaverTriple>) -> TripleQueue {
        TripleQueue { triples: triples.into(), taken: 0 }
    }

    /// The next triple, which must have `shape`.
    pub fn take(&mut self, shape: TripleShape) -> Result<BeaverTriple> {
        match self.triples.front() {
            Some(t) if t.shape == shape => {
                self.taken += 1;
                Ok(self.triples.pop_front().unwrap())
            }
            Some(t) => Err(Error::ShapeMismatch(format!("next triple is {}, operation needs {shape}", t.shape))),
            None => Err(Error::TripleExhausted(shape.to_string())),
        }
    }

    /// Splits off the triples for the next `plan.len()` operations.
    pub fn split_plan(&mut self, plan: &[TripleShape]) -> Result<TripleQueue> {
        let mut out = Vec::with_capacity(plan.len());
        for &s in plan {
            out.push(self.take(s)?);
        }
        self.taken -= plan.len();
        Ok(TripleQueue::new(out))
    }

    pub fn taken(&self) -> usize {
        self.taken
    }

    pub fn remaining(&self) -> usize {
        self.triples.len()
    }
}

/// Test hooks for the dealer.
#[derive(Clone, Copy, Debug, Default)]
pub struct DealerHooks {
    pub zero_u: bool,
}

/// Deals `count` triples for every planned shape.
pub fn deal_triples<R: RngCore + CryptoRng>(
    shapes: &[TripleShape],
    count: usize,
    params: RingParams,
    rng: &mut R,
) -> Result<(TripleStore, TripleStore)> {
    deal_triples_with(shapes, count, params, rng, DealerHooks::default())
}

pub fn deal_triples_with<R: RngCore + CryptoRng>(
    shapes: &[TripleShape],
    count: usize,
    params: RingParams,
    rng: &mut R,
    hooks: DealerHooks,
) -> Result<(TripleStore, TripleStore)> {
    if count == 0 {
        return Err(Error::Usage("triple count must be at least 1".into()));
    }
    let mut b1 = Vec::with_capacity(shapes.len());
    let mut b2 = Vec::with_capacity(shapes.len());
    for &shape in shapes {
        let mut t1 = Vec::with_capacity(count);
        let mut t2 = Vec::with_capacity(count);
        for _ in 0..count {
            let (ul, vl) = (shape.u_shape().iter().product(), shape.v_shape().iter().product());
            let u = if hooks.zero_u { vec![0; ul] } else { random_words(ul, params, rng)? };
            let v = random_words(vl, params, rng)?;
            let q = match shape {
                TripleShape::Elementwise { .. } => u.iter().zip(&v).map(|(&a, &b)| params.mul(a, b)).collect(),
                TripleShape::MatMul { m, n, p } => ring_matmul(&u, &v, m, n, p, params),
            };
            let (u1, u2) = share(&RingTensor::new(shape.u_shape(), u)?, params, 0, rng)?;
            let (v1, v2) = share(&RingTensor::new(shape.v_shape(), v)?, params, 0, rng)?;
            let (q1, q2) = share(&RingTensor::new(shape.q_shape(), q)?, params, 0, rng)?;
            t1.push(BeaverTriple { shape, u: u1, v: v1, q: q1 });
            t2.push(BeaverTriple { shape, u: u2, v: v2, q: q2 });
        }
        b1.push(TripleBlock { shape, triples: t1 });
        b2.push(TripleBlock { shape, triples: t2 });
    }
    Ok((TripleStore::from_blocks(PartyId::S1, params, b1), TripleStore::from_blocks(PartyId::S2, params, b2)))
}
