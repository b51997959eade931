//! Secure multiplication over additive shares and the linear layers built
//! on it. A multiplication opens `E = X - U` and `F = W - V` in one round;
//! then `Z_i = E·W_i + X_i·F + Q_i`, with s2 also subtracting `E·F`.

use serde::{Deserialize, Serialize};

use crate::beaver::{BeaverTriple, TripleShape};
use crate::error::{Error, Result};
use crate::fixedpoint::{ring_matmul, RingParams};
use crate::net::codec::{decode_words, encode_words};
use crate::net::frame::MsgType;
use crate::net::party::Party;
use crate::sharing::{local_add, truncate_shares, PartyId, ShareTensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Same,
    Valid,
}

/// Output size and leading pad of one spatial axis.
pub fn conv_axis(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    if stride == 0 || kernel == 0 || input == 0 {
        return Err(Error::MalformedSpec(format!("conv axis input={input} kernel={kernel} stride={stride}")));
    }
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if kernel > input {
                return Err(Error::MalformedSpec(format!("kernel {kernel} larger than input {input} without padding")));
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
    }
}

/// Geometry of one convolution lowered to a matrix product.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_w: usize,
    pub in_h: usize,
    pub cin: usize,
    pub kw: usize,
    pub kh: usize,
    pub cout: usize,
    pub stride: usize,
    pub out_w: usize,
    pub out_h: usize,
    pub pad_w: usize,
    pub pad_h: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: Padding) -> Result<ConvGeometry> {
        let (&[in_w, in_h, cin], &[kw, kh, kcin, cout]) = (input, kernel) else {
            return Err(Error::MalformedSpec(format!("input {input:?} or kernel {kernel:?} has the wrong rank")));
        };
        if kcin != cin || cout == 0 {
            return Err(Error::MalformedSpec(format!("kernel {kernel:?} does not fit input {input:?}")));
        }
        let (out_w, pad_w) = conv_axis(in_w, kw, stride, padding)?;
        let (out_h, pad_h) = conv_axis(in_h, kh, stride, padding)?;
        Ok(ConvGeometry { in_w, in_h, cin, kw, kh, cout, stride, out_w, out_h, pad_w, pad_h })
    }

    /// Rows of the lowered input (output positions).
    pub fn rows(&self) -> usize {
        self.out_w * self.out_h
    }

    /// Columns of the lowered input (receptive field size).
    pub fn cols(&self) -> usize {
        self.kw * self.kh * self.cin
    }

    pub fn triple_shape(&self) -> TripleShape {
        TripleShape::MatMul { m: self.rows(), n: self.cols(), p: self.cout }
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.out_w, self.out_h, self.cout]
    }
}

/// Lowers a `[w, h, c]` tensor to the `rows × cols` patch matrix; padded
/// positions are zero.
pub fn im2col(x: &[u64], g: &ConvGeometry) -> Vec<u64> {
    let cols = g.cols();
    let mut out = vec![0u64; g.rows() * cols];
    for ox in 0..g.out_w {
        for oy in 0..g.out_h {
            let row = &mut out[(ox * g.out_h + oy) * cols..][..cols];
            for i in 0..g.kw {
                let Some(ix) = (ox * g.stride + i).checked_sub(g.pad_w).filter(|&v| v < g.in_w) else { continue };
                for j in 0..g.kh {
                    let Some(iy) = (oy * g.stride + j).checked_sub(g.pad_h).filter(|&v| v < g.in_h) else { continue };
                    let src = &x[(ix * g.in_h + iy) * g.cin..][..g.cin];
                    row[(i * g.kh + j) * g.cin..][..g.cin].copy_from_slice(src);
                }
            }
        }
    }
    out
}

fn open_masked(party: &mut Party, mine: Vec<u64>) -> Result<Vec<u64>> {
    let params = party.params;
    let mut payload = Vec::new();
    encode_words(&mine, params, &mut payload);
    let theirs = match party.role {
        PartyId::S1 => {
            party.chan.send(MsgType::MaskedOpen, payload)?;
            party.chan.recv(MsgType::MaskedOpen)?
        }
        PartyId::S2 => {
            let t = party.chan.recv(MsgType::MaskedOpen)?;
            party.chan.send(MsgType::MaskedOpen, payload)?;
            t
        }
    };
    let theirs = decode_words(&theirs, mine.len(), params)?;
    Ok(mine.iter().zip(&theirs).map(|(&a, &b)| params.add(a, b)).collect())
}

/// Opens `E = X - U` and `F = W - V` in one exchange (one frame each way).
pub fn open_masks(party: &mut Party, x: &ShareTensor, w: &ShareTensor, triple: &BeaverTriple) -> Result<(Vec<u64>, Vec<u64>)> {
    let p = party.params;
    let e: Vec<u64> = x.data().iter().zip(triple.u.data()).map(|(&a, &b)| p.sub(a, b)).collect();
    let f: Vec<u64> = w.data().iter().zip(triple.v.data()).map(|(&a, &b)| p.sub(a, b)).collect();
    let el = e.len();
    let mut both = e;
    both.extend(f);
    let mut opened = open_masked(party, both)?;
    let f = opened.split_off(el);
    Ok((opened, f))
}

fn check_triple(triple: &BeaverTriple, x: &ShareTensor, w: &ShareTensor) -> Result<()> {
    if triple.u.len() != x.len() || triple.v.len() != w.len() {
        return Err(Error::ShapeMismatch(format!("triple {} does not fit operands {:?}, {:?}", triple.shape, x.shape(), w.shape())));
    }
    Ok(())
}

/// Product of shared tensors before truncation (scale 2^2f). The triple
/// decides the form: elementwise or matrix.
pub fn secure_mul(party: &mut Party, x: &ShareTensor, w: &ShareTensor, triple: &BeaverTriple) -> Result<ShareTensor> {
    check_triple(triple, x, w)?;
    let p = party.params;
    let first = party.role == PartyId::S1;
    match triple.shape {
        TripleShape::Elementwise { len } => {
            if x.len() != len || w.len() != len {
                return Err(Error::ShapeMismatch(format!("elementwise product of {} and {} with triple {len}", x.len(), w.len())));
            }
            let (e, f) = open_masks(party, x, w, triple)?;
            let z = (0..len)
                .map(|i| {
                    let mut z = p.add(p.add(p.mul(e[i], w.data()[i]), p.mul(x.data()[i], f[i])), triple.q.data()[i]);
                    if !first {
                        z = p.sub(z, p.mul(e[i], f[i]));
                    }
                    z
                })
                .collect();
            x.with_data(z, x.shape().to_vec())
        }
        TripleShape::MatMul { m, n, p: cols } => {
            if x.shape() != [m, n] || w.shape() != [n, cols] {
                return Err(Error::ShapeMismatch(format!("matmul {:?} by {:?} with triple {}", x.shape(), w.shape(), triple.shape)));
            }
            let (e, f) = open_masks(party, x, w, triple)?;
            let ew = ring_matmul(&e, w.data(), m, n, cols, p);
            let xf = ring_matmul(x.data(), &f, m, n, cols, p);
            let ef = if first { None } else { Some(ring_matmul(&e, &f, m, n, cols, p)) };
            let z = (0..m * cols)
                .map(|i| {
                    let z = p.add(p.add(ew[i], xf[i]), triple.q.data()[i]);
                    match &ef {
                        Some(ef) => p.sub(z, ef[i]),
                        None => z,
                    }
                })
                .collect();
            x.with_data(z, vec![m, cols])
        }
    }
}

/// Share-wise truncation by f; s1 logs its pre-truncation share when a
/// lockstep log is attached.
pub fn truncate_product(party: &mut Party, z: &ShareTensor) -> ShareTensor {
    party.log_truncation(z.data());
    truncate_shares(z, party.params.f())
}

/// Strided convolution: im2col, one matrix triple, share-wise truncation,
/// then the optional bias added locally.
pub fn secure_conv(
    party: &mut Party,
    x: &ShareTensor,
    kernel: &ShareTensor,
    bias: Option<&ShareTensor>,
    stride: usize,
    padding: Padding,
    triple: &BeaverTriple,
) -> Result<ShareTensor> {
    let g = ConvGeometry::new(x.shape(), kernel.shape(), stride, padding)?;
    if triple.shape != g.triple_shape() {
        return Err(Error::ShapeMismatch(format!("conv needs {}, got {}", g.triple_shape(), triple.shape)));
    }
    let cols = x.with_data(im2col(x.data(), &g), vec![g.rows(), g.cols()])?;
    let k = kernel.clone().reshape(vec![g.cols(), g.cout])?;
    let z = secure_mul(party, &cols, &k, triple)?;
    let out = truncate_product(party, &z).reshape(g.output_shape())?;
    match bias {
        None => Ok(out),
        Some(b) => {
            if b.len() != g.cout {
                return Err(Error::ShapeMismatch(format!("bias of {} for {} channels", b.len(), g.cout)));
            }
            let tiled: Vec<u64> = (0..g.rows()).flat_map(|_| b.data().iter().copied()).collect();
            local_add(&out, &out.with_data(tiled, g.output_shape())?)
        }
    }
}

/// Nearest-neighbour spatial upsampling of a `[w, h, c]` tensor; local.
pub fn upsample_nn(x: &ShareTensor, factor: usize) -> Result<ShareTensor> {
    let &[w, h, c] = x.shape() else {
        return Err(Error::ShapeMismatch(format!("upsample needs rank 3, got {:?}", x.shape())));
    };
    if factor == 0 {
        return Err(Error::MalformedSpec("upsample factor 0".into()));
    }
    let data = upsample_words(x.data(), w, h, c, factor);
    x.with_data(data, vec![w * factor, h * factor, c])
}

pub fn upsample_words(x: &[u64], w: usize, h: usize, c: usize, factor: usize) -> Vec<u64> {
    let (ow, oh) = (w * factor, h * factor);
    let mut out = Vec::with_capacity(ow * oh * c);
    for ox in 0..ow {
        for oy in 0..oh {
            let src = ((ox / factor) * h + oy / factor) * c;
            out.extend_from_slice(&x[src..src + c]);
        }
    }
    out
}

/// Bytes both parties send for one multiplication of the given form.
pub fn mul_bytes(shape: TripleShape, params: RingParams) -> u64 {
    let words = match shape {
        TripleShape::Elementwise { len } => 2 * len,
        TripleShape::MatMul { m, n, p } => m * n + n * p,
    };
    2 * crate::net::channel::Channel::frame_cost(words * params.word_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beaver::deal_triples;
    use crate::fixedpoint::{encode, RingTensor};
    use crate::net::channel::Channel;
    use crate::net::party::PartyConfig;
    use crate::net::transport::mem_pair;
    use crate::sharing::{reconstruct, share};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use std::time::Duration;

    pub(crate) fn parties(params: RingParams) -> (Party, Party) {
        let (a, b) = mem_pair(Duration::from_secs(30));
        let cfg = PartyConfig::default();
        (
            Party::new(PartyId::S1, params, Channel::new(Box::new(a), 0), ChaCha20Rng::seed_from_u64(1), cfg),
            Party::new(PartyId::S2, params, Channel::new(Box::new(b), 0), ChaCha20Rng::seed_from_u64(2), cfg),
        )
    }

    #[test]
    fn elementwise_exhaustive_k8_small_sweep() {
        let p = RingParams::new(8, 3).unwrap();
        let (mut a, mut b) = parties(p);
        let shape = TripleShape::Elementwise { len: 256 };
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let (t1, t2) = deal_triples(&[shape], 256, p, &mut rng).unwrap();
        let xs: Vec<u64> = (0..256).collect();
        for wv in 0..256u64 {
            let (x1, x2) = share(&RingTensor::new(vec![256], xs.clone()).unwrap(), p, 0, &mut rng).unwrap();
            let (w1, w2) = share(&RingTensor::new(vec![256], vec![wv; 256]).unwrap(), p, 0, &mut rng).unwrap();
            let (ta, tb) = (t1.take_triple(shape).unwrap(), t2.take_triple(shape).unwrap());
            let h = std::thread::scope(|s| {
                let h = s.spawn(|| secure_mul(&mut b, &x2, &w2, &tb).unwrap());
                let z1 = secure_mul(&mut a, &x1, &w1, &ta).unwrap();
                (z1, h.join().unwrap())
            });
            let z = reconstruct(&h.0, &h.1).unwrap();
            for x in 0..256u64 {
                assert_eq!(z.data()[x as usize], (x * wv) & 255);
            }
        }
        assert_eq!(a.chan.stats().frames_sent, 256);
        assert_eq!(b.chan.stats().frames_sent, 256);
    }

    #[test]
    fn matmul_random_k64() {
        let p = RingParams::default();
        let (mut a, mut b) = parties(p);
        let shape = TripleShape::MatMul { m: 2, n: 2, p: 2 };
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let (t1, t2) = deal_triples(&[shape], 1000, p, &mut rng).unwrap();
        for _ in 0..1000 {
            let x = RingTensor::new(vec![2, 2], (0..4).map(|_| rng.gen()).collect()).unwrap();
            let w = RingTensor::new(vec![2, 2], (0..4).map(|_| rng.gen()).collect()).unwrap();
            let (x1, x2) = share(&x, p, 0, &mut rng).unwrap();
            let (w1, w2) = share(&w, p, 0, &mut rng).unwrap();
            let (ta, tb) = (t1.take_triple(shape).unwrap(), t2.take_triple(shape).unwrap());
            let (z1, z2) = std::thread::scope(|s| {
                let h = s.spawn(|| secure_mul(&mut b, &x2, &w2, &tb).unwrap());
                (secure_mul(&mut a, &x1, &w1, &ta).unwrap(), h.join().unwrap())
            });
            assert_eq!(reconstruct(&z1, &z2).unwrap(), x.matmul(&w, p).unwrap());
        }
    }

    #[test]
    fn same_padding_geometry() {
        assert_eq!(conv_axis(16, 4, 2, Padding::Same).unwrap(), (8, 1));
        assert_eq!(conv_axis(4, 3, 2, Padding::Same).unwrap(), (2, 0));
        assert_eq!(conv_axis(5, 3, 1, Padding::Same).unwrap(), (5, 1));
        assert_eq!(conv_axis(5, 3, 2, Padding::Valid).unwrap(), (2, 0));
        assert!(conv_axis(2, 3, 1, Padding::Valid).is_err());
    }

    #[test]
    fn identity_and_zero_kernels() {
        let p = RingParams::default();
        let (mut a, mut b) = parties(p);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let img: Vec<f64> = (0..18).map(|i| i as f64 / 7.0 - 1.0).collect();
        let x = RingTensor::encode_slice(vec![3, 3, 2], &img, p).unwrap();
        let one = encode(1.0, p).unwrap().0;
        for (kv, expect_identity) in [(vec![one, 0, 0, one], true), (vec![0; 4], false)] {
            let k = RingTensor::new(vec![1, 1, 2, 2], kv).unwrap();
            let g = ConvGeometry::new(&[3, 3, 2], &[1, 1, 2, 2], 1, Padding::Same).unwrap();
            let (t1, t2) = deal_triples(&[g.triple_shape()], 1, p, &mut rng).unwrap();
            let (x1, x2) = share(&x, p, 0, &mut rng).unwrap();
            let (k1, k2) = share(&k, p, 0, &mut rng).unwrap();
            let (ta, tb) = (t1.take_triple(g.triple_shape()).unwrap(), t2.take_triple(g.triple_shape()).unwrap());
            let (z1, z2) = std::thread::scope(|s| {
                let h = s.spawn(|| secure_conv(&mut b, &x2, &k2, None, 1, Padding::Same, &tb).unwrap());
                (secure_conv(&mut a, &x1, &k1, None, 1, Padding::Same, &ta).unwrap(), h.join().unwrap())
            });
            let z = reconstruct(&z1, &z2).unwrap();
            for (got, want) in z.decode_all(p).iter().zip(&img) {
                let want = if expect_identity { *want } else { 0.0 };
                assert!((got - want).abs() <= 2.0 / p.scale(), "{got} vs {want}");
            }
        }
    }

    #[test]
    fn upsample_commutes_with_reconstruct() {
        let p = RingParams::default();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let x = RingTensor::new(vec![4, 4, 1], (0..16).map(|_| rng.gen()).collect()).unwrap();
        let (a, b) = share(&x, p, 0, &mut rng).unwrap();
        let up = reconstruct(&upsample_nn(&a, 2).unwrap(), &upsample_nn(&b, 2).unwrap()).unwrap();
        assert_eq!(up.data(), upsample_words(x.data(), 4, 4, 1, 2));
        assert_eq!(upsample_nn(&a, 1).unwrap(), a);
        let single = ShareTensor::new(vec![9], vec![1, 1, 1], PartyId::S1, 0, p).unwrap();
        assert_eq!(upsample_nn(&single, 2).unwrap().data(), &[9, 9, 9, 9]);
    }
}
