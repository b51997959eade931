//! The ring Z_{2^k} and the fixed-point encoding of reals into it.
//!
//! Ring words are stored in a `u64` and reduced with [`RingParams::mask`];
//! arithmetic wraps modulo 2^k. Reals are encoded as two's-complement
//! integers scaled by 2^f.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RingParams {
    k: u32,
    f: u32,
}

impl Default for RingParams {
    fn default() -> Self {
        RingParams { k: 64, f: 16 }
    }
}

impl RingParams {
    pub fn new(k: u32, f: u32) -> Result<Self> {
        if ![8, 16, 32, 64].contains(&k) {
            return Err(Error::InvalidParams(format!("k={k} not in {{8,16,32,64}}")));
        }
        if f < 2 || f >= k {
            return Err(Error::InvalidParams(format!("f={f} must satisfy 2 <= f < k={k}")));
        }
        Ok(RingParams { k, f })
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn f(&self) -> u32 {
        self.f
    }

    #[inline]
    pub fn mask(&self) -> u64 {
        if self.k == 64 {
            u64::MAX
        } else {
            (1u64 << self.k) - 1
        }
    }

    /// Bytes one ring word occupies on the wire.
    pub fn word_bytes(&self) -> usize {
        (self.k / 8) as usize
    }

    #[inline]
    pub fn reduce(&self, v: u64) -> u64 {
        v & self.mask()
    }

    #[inline]
    pub fn add(&self, a: u64, b: u64) -> u64 {
        a.wrapping_add(b) & self.mask()
    }

    #[inline]
    pub fn sub(&self, a: u64, b: u64) -> u64 {
        a.wrapping_sub(b) & self.mask()
    }

    #[inline]
    pub fn mul(&self, a: u64, b: u64) -> u64 {
        a.wrapping_mul(b) & self.mask()
    }

    #[inline]
    pub fn neg(&self, a: u64) -> u64 {
        a.wrapping_neg() & self.mask()
    }

    /// Interprets a k-bit word as a signed two's-complement integer.
    #[inline]
    pub fn to_signed(&self, v: u64) -> i64 {
        let shift = 64 - self.k;
        ((v << shift) as i64) >> shift
    }

    /// The sign bit z[k-1].
    #[inline]
    pub fn is_negative(&self, v: u64) -> bool {
        (v >> (self.k - 1)) & 1 == 1
    }

    /// Largest magnitude accepted by [`encode`]: 2^(k-f-1).
    pub fn max_abs(&self) -> f64 {
        2f64.powi((self.k - self.f - 1) as i32)
    }

    /// Arithmetic shift right by `shift`, keeping the sign.
    #[inline]
    pub fn asr(&self, v: u64, shift: u32) -> u64 {
        ((self.to_signed(v) >> shift) as u64) & self.mask()
    }

    pub fn scale(&self) -> f64 {
        2f64.powi(self.f as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct RingElement(pub u64);

pub fn encode(x: f64, params: RingParams) -> Result<RingElement> {
    let limit = params.max_abs();
    if !x.is_finite() || x.abs() >= limit {
        return Err(Error::Overflow { value: x, limit });
    }
    let scaled = (x * params.scale()).round();
    let half = 2f64.powi(params.k() as i32 - 1);
    if scaled >= half || scaled < -half {
        return Err(Error::Overflow { value: x, limit });
    }
    Ok(RingElement((scaled as i64) as u64 & params.mask()))
}

pub fn decode(e: RingElement, params: RingParams) -> f64 {
    params.to_signed(e.0) as f64 / params.scale()
}

/// Rescales a product carrying 2^(2f) back to 2^f by an arithmetic shift.
pub fn truncate(e: RingElement, params: RingParams) -> RingElement {
    RingElement(params.asr(e.0, params.f()))
}

/// Local truncation of one additive share by `shift` bits.
///
/// The first party shifts its share logically; the second shifts the
/// negation of its share and negates back. The two results add up to the
/// truncated secret up to one unit in the last place, except with
/// probability about |secret| / 2^k.
pub fn truncate_share(share: u64, first_party: bool, shift: u32, params: RingParams) -> u64 {
    let share = params.reduce(share);
    if first_party {
        share >> shift
    } else {
        params.neg(params.neg(share) >> shift)
    }
}

/// A cleartext tensor over the ring (row-major, last dimension fastest).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RingTensor {
    shape: Vec<usize>,
    data: Vec<u64>,
}

impl RingTensor {
    pub fn new(shape: Vec<usize>, data: Vec<u64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!("shape {shape:?} needs {expected} elements, got {}", data.len())));
        }
        Ok(RingTensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        RingTensor { shape, data: vec![0; n] }
    }

    pub fn scalar(v: u64) -> Self {
        RingTensor { shape: vec![1], data: vec![v] }
    }

    pub fn encode_slice(shape: Vec<usize>, values: &[f64], params: RingParams) -> Result<Self> {
        let data = values.iter().map(|&x| encode(x, params).map(|e| e.0)).collect::<Result<Vec<_>>>()?;
        RingTensor::new(shape, data)
    }

    pub fn decode_all(&self, params: RingParams) -> Vec<f64> {
        self.data.iter().map(|&v| decode(RingElement(v), params)).collect()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    fn zip_with(&self, other: &RingTensor, op: impl Fn(u64, u64) -> u64) -> Result<RingTensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| op(a, b)).collect();
        Ok(RingTensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &RingTensor, params: RingParams) -> Result<RingTensor> {
        self.zip_with(other, |a, b| params.add(a, b))
    }

    pub fn sub(&self, other: &RingTensor, params: RingParams) -> Result<RingTensor> {
        self.zip_with(other, |a, b| params.sub(a, b))
    }

    pub fn mul_elementwise(&self, other: &RingTensor, params: RingParams) -> Result<RingTensor> {
        self.zip_with(other, |a, b| params.mul(a, b))
    }

    /// Ring matrix product of an `m×n` and an `n×p` tensor.
    pub fn matmul(&self, other: &RingTensor, params: RingParams) -> Result<RingTensor> {
        let (m, n) = matrix_dims(&self.shape)?;
        let (n2, p) = matrix_dims(&other.shape)?;
        if n != n2 {
            return Err(Error::ShapeMismatch(format!("matmul {m}x{n} by {n2}x{p}")));
        }
        Ok(RingTensor { shape: vec![m, p], data: ring_matmul(&self.data, &other.data, m, n, p, params) })
    }
}

fn matrix_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [m, n] => Ok((*m, *n)),
        _ => Err(Error::ShapeMismatch(format!("expected a matrix, got {shape:?}"))),
    }
}

/// Row-major ring matmul on raw words: `a` is m×n, `b` is n×p.
pub fn ring_matmul(a: &[u64], b: &[u64], m: usize, n: usize, p: usize, params: RingParams) -> Vec<u64> {
    let mut out = vec![0u64; m * p];
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for l in 0..n {
            let x = a[i * n + l];
            if x == 0 {
                continue;
            }
            let brow = &b[l * p..(l + 1) * p];
            for (o, &y) in row.iter_mut().zip(brow) {
                *o = o.wrapping_add(x.wrapping_mul(y));
            }
        }
    }
    let mask = params.mask();
    out.iter_mut().for_each(|v| *v &= mask);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn encode_examples() {
        let p = RingParams::default();
        assert_eq!(encode(0.0, p).unwrap(), RingElement(0));
        assert_eq!(encode(1.0, p).unwrap(), RingElement(65536));
        // 2^64 - 16384, checked by decoding back.
        let e = encode(-0.25, p).unwrap();
        assert_eq!(e.0, u64::MAX - 16384 + 1);
        assert_eq!(decode(e, p), -0.25);
    }

    #[test]
    fn encode_rejects_out_of_range() {
        let p = RingParams::default();
        assert!(matches!(encode(2f64.powi(47), p), Err(Error::Overflow { .. })));
        assert!(matches!(encode(f64::NAN, p), Err(Error::Overflow { .. })));
        let small = RingParams::new(8, 4).unwrap();
        assert!(encode(7.9, small).is_ok());
        assert!(encode(-8.0, small).is_err());
        // Rounds up to 2^(k-1), which is not representable.
        assert!(encode(7.99, small).is_err());
    }

    #[test]
    fn decode_examples() {
        let p = RingParams::default();
        assert_eq!(decode(RingElement(65536), p), 1.0);
        assert_eq!(decode(RingElement(0), p), 0.0);
    }

    #[test]
    fn params_validation() {
        assert!(RingParams::new(64, 16).is_ok());
        assert!(RingParams::new(8, 2).is_ok());
        assert!(RingParams::new(12, 4).is_err());
        assert!(RingParams::new(16, 16).is_err());
        assert!(RingParams::new(16, 1).is_err());
    }

    #[test]
    fn round_trip_random() {
        let p = RingParams::default();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let quantum = 1.0 / p.scale();
        for _ in 0..100_000 {
            let x: f64 = rng.gen_range(-1e6..1e6);
            let back = decode(encode(x, p).unwrap(), p);
            assert!((back - x).abs() <= quantum / 2.0 + 1e-9, "{x} -> {back}");
            assert_eq!(back, (x * p.scale()).round() / p.scale());
        }
    }

    #[test]
    fn truncate_examples() {
        let p = RingParams::default();
        let one = encode(1.0, p).unwrap().0;
        let product = RingElement(one.wrapping_mul(one));
        assert_eq!(product.0, 1 << 32);
        assert_eq!(truncate(product, p), RingElement(65536));
        assert_eq!(truncate(RingElement(0), p), RingElement(0));
        let neg = RingElement(p.neg(3 << 32));
        assert_eq!(decode(truncate(neg, p), p), -3.0);
    }

    #[test]
    fn ring_laws_exhaustive_k8() {
        let p = RingParams::new(8, 2).unwrap();
        for a in 0..256u64 {
            assert_eq!(p.add(a, p.neg(a)), 0);
            for b in 0..256u64 {
                assert_eq!(p.add(a, b), p.add(b, a));
                assert_eq!(p.mul(a, b), p.mul(b, a));
                assert_eq!(p.add(p.sub(a, b), b), a);
            }
        }
        // associativity and distributivity over a stride of c values
        for a in 0..256u64 {
            for b in 0..256u64 {
                for c in (0..256u64).step_by(17) {
                    assert_eq!(p.add(p.add(a, b), c), p.add(a, p.add(b, c)));
                    assert_eq!(p.mul(p.mul(a, b), c), p.mul(a, p.mul(b, c)));
                    assert_eq!(p.mul(a, p.add(b, c)), p.add(p.mul(a, b), p.mul(a, c)));
                }
            }
        }
    }

    #[test]
    fn sign_bit_matches_decoded_sign() {
        let p = RingParams::new(8, 3).unwrap();
        for e in 0..256u64 {
            assert_eq!(e >= 128, decode(RingElement(e), p) < 0.0);
            assert_eq!(p.is_negative(e), e >= 128);
        }
        let p = RingParams::default();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for _ in 0..10_000 {
            let e: u64 = rng.gen();
            assert_eq!(e >= 1 << 63, decode(RingElement(e), p) < 0.0);
        }
    }

    #[test]
    fn sharewise_truncation_error_rate() {
        // Monte-Carlo over random sharings: the reconstructed result is within
        // one ulp of the exact shift except with probability <= |v| / 2^(k-1),
        // |v| being the raw signed magnitude of the shared product.
        let p = RingParams::default();
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let small = encode(3.5, p).unwrap().0.wrapping_mul(encode(-2.25, p).unwrap().0);
        for v in [small, 1u64 << 60, p.neg(3 << 58)] {
            let exact = truncate(RingElement(v), p).0;
            let trials = 1_000_000;
            let mut failures = 0u64;
            for _ in 0..trials {
                let s1: u64 = rng.gen();
                let s2 = p.sub(v, s1);
                let t = p.add(truncate_share(s1, true, p.f(), p), truncate_share(s2, false, p.f(), p));
                if p.to_signed(p.sub(t, exact)).abs() > 1 {
                    failures += 1;
                }
            }
            let bound = (p.to_signed(v) as f64).abs() / 2f64.powi(63);
            let rate = failures as f64 / trials as f64;
            assert!(rate <= bound, "failure rate {rate} exceeds {bound}");
        }
    }

    #[test]
    fn matmul_small() {
        let p = RingParams::default();
        let a = RingTensor::new(vec![2, 2], vec![1, 2, 3, 4]).unwrap();
        let b = RingTensor::new(vec![2, 2], vec![5, 6, 7, 8]).unwrap();
        assert_eq!(a.matmul(&b, p).unwrap().data(), &[19, 22, 43, 50]);
        assert!(a.matmul(&RingTensor::zeros(vec![3, 1]), p).is_err());
    }
}
