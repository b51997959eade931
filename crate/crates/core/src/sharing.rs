//! Additive secret sharing of ring tensors between the two servers.

use std::cell::Cell;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixedpoint::{truncate_share, RingElement, RingParams, RingTensor};

/// The two computing parties: `S1` is the service provider (garbler),
/// `S2` the regulator (evaluator).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PartyId {
    S1,
    S2,
}

impl PartyId {
    pub fn is_first(self) -> bool {
        self == PartyId::S1
    }

    pub fn peer(self) -> PartyId {
        match self {
            PartyId::S1 => PartyId::S2,
            PartyId::S2 => PartyId::S1,
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            PartyId::S1 => 1,
            PartyId::S2 => 2,
        }
    }

    pub fn from_u8(v: u8) -> Result<PartyId> {
        match v {
            1 => Ok(PartyId::S1),
            2 => Ok(PartyId::S2),
            other => Err(Error::Decode(format!("unknown party id {other}"))),
        }
    }
}

impl std::fmt::Display for PartyId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PartyId::S1 => write!(f, "s1"),
            PartyId::S2 => write!(f, "s2"),
        }
    }
}

impl std::str::FromStr for PartyId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s1" => Ok(PartyId::S1),
            "s2" => Ok(PartyId::S2),
            other => Err(Error::Usage(format!("role must be s1 or s2, got {other}"))),
        }
    }
}

pub type SessionId = u128;

/// One party's additive share of a tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShareTensor {
    data: Vec<u64>,
    shape: Vec<usize>,
    owner: PartyId,
    session: SessionId,
    params: RingParams,
}

impl ShareTensor {
    pub fn new(data: Vec<u64>, shape: Vec<usize>, owner: PartyId, session: SessionId, params: RingParams) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!("share shape {shape:?} needs {expected} elements, got {}", data.len())));
        }
        let mask = params.mask();
        let data = data.into_iter().map(|v| v & mask).collect();
        Ok(ShareTensor { data, shape, owner, session, params })
    }

    pub fn zeros(shape: Vec<usize>, owner: PartyId, session: SessionId, params: RingParams) -> Self {
        let n = shape.iter().product();
        ShareTensor { data: vec![0; n], shape, owner, session, params }
    }

    /// The trivial sharing of a public tensor: s1 holds it, s2 holds zero.
    pub fn from_public(t: &RingTensor, owner: PartyId, session: SessionId, params: RingParams) -> Self {
        let data = match owner {
            PartyId::S1 => t.data().iter().map(|&v| v & params.mask()).collect(),
            PartyId::S2 => vec![0; t.len()],
        };
        ShareTensor { data, shape: t.shape().to_vec(), owner, session, params }
    }

    pub fn data(&self) -> &[u64] {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn owner(&self) -> PartyId {
        self.owner
    }

    pub fn session(&self) -> SessionId {
        self.session
    }

    pub fn params(&self) -> RingParams {
        self.params
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same owner, session and params with new contents.
    pub fn with_data(&self, data: Vec<u64>, shape: Vec<usize>) -> Result<ShareTensor> {
        ShareTensor::new(data, shape, self.owner, self.session, self.params)
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<ShareTensor> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn rebind(mut self, session: SessionId) -> ShareTensor {
        self.session = session;
        self
    }

    fn check_same_party(&self, other: &ShareTensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        if self.session != other.session {
            return Err(Error::SessionMismatch { left: self.session, right: other.session });
        }
        if self.params != other.params {
            return Err(Error::ParamsMismatch(format!("{:?} vs {:?}", self.params, other.params)));
        }
        if self.owner != other.owner {
            return Err(Error::OwnerMismatch("local operation on shares of different parties".into()));
        }
        Ok(())
    }
}

/// Splits `secret` into `S_1 = R` (uniform) and `S_2 = secret - R`.
pub fn share<R: RngCore + CryptoRng>(secret: &RingTensor, params: RingParams, session: SessionId, rng: &mut R) -> Result<(ShareTensor, ShareTensor)> {
    let mask = random_words(secret.len(), params, rng)?;
    let other = secret.data().iter().zip(&mask).map(|(&s, &r)| params.sub(s, r)).collect();
    let shape = secret.shape().to_vec();
    Ok((
        ShareTensor { data: mask, shape: shape.clone(), owner: PartyId::S1, session, params },
        ShareTensor { data: other, shape, owner: PartyId::S2, session, params },
    ))
}

/// Uniform ring words.
pub fn random_words<R: RngCore + CryptoRng>(n: usize, params: RingParams, rng: &mut R) -> Result<Vec<u64>> {
    let mut bytes = vec![0u8; n * 8];
    rng.try_fill_bytes(&mut bytes).map_err(|e| Error::Randomness(e.to_string()))?;
    let mask = params.mask();
    Ok(bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap()) & mask).collect())
}

thread_local! {
    static RECONSTRUCT_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`reconstruct`] calls made on the current thread. Protocol
/// code runs each party on its own thread, so this counts exactly the
/// openings of secret data that party performed.
pub fn reconstruct_calls() -> u64 {
    RECONSTRUCT_CALLS.with(|c| c.get())
}

pub fn reconstruct(a: &ShareTensor, b: &ShareTensor) -> Result<RingTensor> {
    RECONSTRUCT_CALLS.with(|c| c.set(c.get() + 1));
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    if a.session != b.session {
        return Err(Error::SessionMismatch { left: a.session, right: b.session });
    }
    if a.params != b.params {
        return Err(Error::ParamsMismatch(format!("{:?} vs {:?}", a.params, b.params)));
    }
    if a.owner == b.owner {
        return Err(Error::OwnerMismatch("both shares belong to the same party".into()));
    }
    let p = a.params;
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| p.add(x, y)).collect();
    RingTensor::new(a.shape.clone(), data)
}

pub fn local_add(a: &ShareTensor, b: &ShareTensor) -> Result<ShareTensor> {
    a.check_same_party(b)?;
    let p = a.params;
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| p.add(x, y)).collect();
    Ok(ShareTensor { data, ..a.clone() })
}

pub fn local_sub(a: &ShareTensor, b: &ShareTensor) -> Result<ShareTensor> {
    a.check_same_party(b)?;
    let p = a.params;
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| p.sub(x, y)).collect();
    Ok(ShareTensor { data, ..a.clone() })
}

/// Multiplies a share by a public ring scalar.
pub fn local_scale(a: &ShareTensor, scalar: RingElement) -> ShareTensor {
    let p = a.params;
    let data = a.data.iter().map(|&x| p.mul(x, scalar.0)).collect();
    ShareTensor { data, ..a.clone() }
}

/// Adds a public tensor; only the first party's share moves.
pub fn add_public(a: &ShareTensor, public: &RingTensor) -> Result<ShareTensor> {
    if a.shape != public.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape, public.shape())));
    }
    if a.owner == PartyId::S2 {
        return Ok(a.clone());
    }
    let p = a.params;
    let data = a.data.iter().zip(public.data()).map(|(&x, &y)| p.add(x, y)).collect();
    Ok(ShareTensor { data, ..a.clone() })
}

/// Share-wise truncation by `shift` bits (see [`truncate_share`]).
pub fn truncate_shares(a: &ShareTensor, shift: u32) -> ShareTensor {
    let p = a.params;
    let first = a.owner.is_first();
    let data = a.data.iter().map(|&x| truncate_share(x, first, shift, p)).collect();
    ShareTensor { data, ..a.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn k8() -> RingParams {
        RingParams::new(8, 3).unwrap()
    }

    #[test]
    fn zero_secret_shares_are_negatives() {
        let p = RingParams::default();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let (s1, s2) = share(&RingTensor::zeros(vec![3, 2]), p, 1, &mut rng).unwrap();
        for (a, b) in s1.data().iter().zip(s2.data()) {
            assert_eq!(*b, p.neg(*a));
        }
        assert_eq!(reconstruct(&s1, &s2).unwrap(), RingTensor::zeros(vec![3, 2]));
    }

    #[test]
    fn hand_example_k8() {
        let p = k8();
        let s1 = ShareTensor::new(vec![37], vec![1], PartyId::S1, 0, p).unwrap();
        let secret = 200u64;
        let s2 = ShareTensor::new(vec![p.sub(secret, 37)], vec![1], PartyId::S2, 0, p).unwrap();
        assert_eq!(s2.data(), &[163]);
        assert_eq!(reconstruct(&s1, &s2).unwrap().data(), &[200]);
    }

    #[test]
    fn reconstruct_wraps_and_checks() {
        let p = k8();
        let a = ShareTensor::new(vec![255], vec![1], PartyId::S1, 5, p).unwrap();
        let b = ShareTensor::new(vec![1], vec![1], PartyId::S2, 5, p).unwrap();
        assert_eq!(reconstruct(&a, &b).unwrap().data(), &[0]);
        let zero = ShareTensor::zeros(vec![1], PartyId::S2, 5, p);
        assert_eq!(reconstruct(&a, &zero).unwrap().data(), &[255]);

        let other_session = ShareTensor::new(vec![1], vec![1], PartyId::S2, 6, p).unwrap();
        assert!(matches!(reconstruct(&a, &other_session), Err(Error::SessionMismatch { .. })));
        let other_shape = ShareTensor::new(vec![1, 2], vec![2], PartyId::S2, 5, p).unwrap();
        assert!(matches!(reconstruct(&a, &other_shape), Err(Error::ShapeMismatch(_))));
        assert!(matches!(reconstruct(&a, &a), Err(Error::OwnerMismatch(_))));
    }

    #[test]
    fn round_trip_random_tensors() {
        let p = RingParams::default();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let n = rng.gen_range(0..6);
            let m = rng.gen_range(1..4);
            let data: Vec<u64> = (0..n * m).map(|_| rng.gen()).collect();
            let t = RingTensor::new(vec![n, m], data).unwrap();
            let (a, b) = share(&t, p, 9, &mut rng).unwrap();
            assert_eq!(reconstruct(&a, &b).unwrap(), t);
        }
    }

    #[test]
    fn scale_identity_and_zero() {
        let p = RingParams::default();
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let t = RingTensor::new(vec![4], vec![1, 2, 3, u64::MAX]).unwrap();
        let (a, _) = share(&t, p, 0, &mut rng).unwrap();
        assert_eq!(local_scale(&a, RingElement(1)), a);
        assert!(local_scale(&a, RingElement(0)).data().iter().all(|&v| v == 0));
    }

    #[test]
    fn add_public_moves_first_share_only() {
        let p = RingParams::default();
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let t = RingTensor::new(vec![2], vec![10, 20]).unwrap();
        let public = RingTensor::new(vec![2], vec![1, 2]).unwrap();
        let (a, b) = share(&t, p, 0, &mut rng).unwrap();
        let out = reconstruct(&add_public(&a, &public).unwrap(), &add_public(&b, &public).unwrap()).unwrap();
        assert_eq!(out.data(), &[11, 22]);
    }

    #[test]
    fn homomorphism_exhaustive_small_shapes_k8() {
        // Every shape up to 4x4 at k=8: the secrets sweep all residues, the
        // masks come from a seeded generator.
        let p = k8();
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        for rows in 1..=4 {
            for cols in 1..=4 {
                let n = rows * cols;
                for offset in 0..256u64 {
                    let x = RingTensor::new(vec![rows, cols], (0..n as u64).map(|i| (offset + i) & 255).collect()).unwrap();
                    let y = RingTensor::new(vec![rows, cols], (0..n as u64).map(|i| (offset * 7 + i * 31) & 255).collect()).unwrap();
                    let (x1, x2) = share(&x, p, 0, &mut rng).unwrap();
                    let (y1, y2) = share(&y, p, 0, &mut rng).unwrap();
                    let sum = reconstruct(&local_add(&x1, &y1).unwrap(), &local_add(&x2, &y2).unwrap()).unwrap();
                    assert_eq!(sum, x.add(&y, p).unwrap());
                    let diff = reconstruct(&local_sub(&x1, &y1).unwrap(), &local_sub(&x2, &y2).unwrap()).unwrap();
                    assert_eq!(diff, x.sub(&y, p).unwrap());
                }
            }
        }
    }

    #[test]
    fn local_ops_reject_mismatches() {
        let p = RingParams::default();
        let a = ShareTensor::zeros(vec![2], PartyId::S1, 0, p);
        let b = ShareTensor::zeros(vec![3], PartyId::S1, 0, p);
        let c = ShareTensor::zeros(vec![2], PartyId::S2, 0, p);
        assert!(matches!(local_add(&a, &b), Err(Error::ShapeMismatch(_))));
        assert!(matches!(local_sub(&a, &c), Err(Error::OwnerMismatch(_))));
    }

    #[test]
    fn individual_shares_are_uniform_k8() {
        // Exact frequency test of 10^6 first-party shares of a fixed secret.
        let p = k8();
        let mut rng = ChaCha20Rng::seed_from_u64(15);
        let secret = RingTensor::new(vec![1000], vec![200; 1000]).unwrap();
        let mut counts = [0u64; 256];
        for _ in 0..1000 {
            let (_, s2) = share(&secret, p, 0, &mut rng).unwrap();
            for &v in s2.data() {
                counts[v as usize] += 1;
            }
        }
        let expected = 1_000_000.0 / 256.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let critical = ChiSquared::new(255.0).unwrap().inverse_cdf(0.99);
        assert!(chi2 < critical, "chi2 {chi2} >= {critical}");
    }

    proptest! {
        #[test]
        fn share_reconstruct_identity(data in proptest::collection::vec(any::<u64>(), 0..64), seed in any::<u64>()) {
            let p = RingParams::default();
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let n = data.len();
            let t = RingTensor::new(vec![n], data).unwrap();
            let (a, b) = share(&t, p, 1, &mut rng).unwrap();
            prop_assert_eq!(reconstruct(&a, &b).unwrap(), t);
        }
    }
}
