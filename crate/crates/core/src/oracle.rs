//! Cleartext fixed-point reference for the whole pipeline. Convolutions use
//! direct loops so the secure im2col path has an independent check.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::fixedpoint::{encode, RingParams, RingTensor};
use crate::inference::{Decision, Outcome};
use crate::linear::{conv_axis, Padding};
use crate::model::{Activation, FloatLayer, LayerKind, ReconstructorSpec, WeightSet};
use crate::net::party::ActivationMode;

/// How a product at scale 2^2f is brought back to 2^f.
#[derive(Clone, Debug, Default)]
pub enum Truncation {
    /// Arithmetic shift of the true product.
    #[default]
    Canonical,
    /// Replays share-wise truncation from s1's recorded pre-truncation
    /// shares, reproducing the secure path bit for bit.
    Lockstep(VecDeque<Vec<u64>>),
}

impl Truncation {
    pub fn lockstep(log: Vec<Vec<u64>>) -> Truncation {
        Truncation::Lockstep(log.into())
    }

    pub fn apply(&mut self, z: &[u64], p: RingParams) -> Result<Vec<u64>> {
        let f = p.f();
        match self {
            Truncation::Canonical => Ok(z.iter().map(|&v| ((p.to_signed(v) >> f) as u64) & p.mask()).collect()),
            Truncation::Lockstep(log) => {
                let s1 = log.pop_front().ok_or_else(|| Error::Usage("lockstep log exhausted".into()))?;
                if s1.len() != z.len() {
                    return Err(Error::ShapeMismatch(format!("lockstep entry of {} words for {} products", s1.len(), z.len())));
                }
                Ok(z.iter()
                    .zip(&s1)
                    .map(|(&v, &a)| {
                        let b = v.wrapping_sub(a) & p.mask();
                        let t1 = a >> f;
                        let t2 = (b.wrapping_neg() & p.mask()) >> f;
                        t1.wrapping_sub(t2) & p.mask()
                    })
                    .collect())
            }
        }
    }

    pub fn remaining(&self) -> usize {
        match self {
            Truncation::Canonical => 0,
            Truncation::Lockstep(log) => log.len(),
        }
    }
}

/// Direct-loop strided convolution over `[w, h, c]`, returning the raw
/// products at scale 2^2f.
pub fn oracle_conv(x: &RingTensor, kernel: &RingTensor, stride: usize, padding: Padding, p: RingParams) -> Result<RingTensor> {
    let (&[w, h, cin], &[kw, kh, kc, cout]) = (x.shape(), kernel.shape()) else {
        return Err(Error::ShapeMismatch(format!("conv of {:?} by {:?}", x.shape(), kernel.shape())));
    };
    if kc != cin {
        return Err(Error::ShapeMismatch(format!("kernel {:?} for {cin} input channels", kernel.shape())));
    }
    let (ow, pw) = conv_axis(w, kw, stride, padding)?;
    let (oh, ph) = conv_axis(h, kh, stride, padding)?;
    let (xd, kd) = (x.data(), kernel.data());
    let mut out = vec![0u64; ow * oh * cout];
    for ox in 0..ow {
        for oy in 0..oh {
            for co in 0..cout {
                let mut acc = 0u64;
                for i in 0..kw {
                    for j in 0..kh {
                        let ix = (ox * stride + i) as isize - pw as isize;
                        let iy = (oy * stride + j) as isize - ph as isize;
                        if ix < 0 || iy < 0 || ix >= w as isize || iy >= h as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            let xv = xd[(ix as usize * h + iy as usize) * cin + ci];
                            let kv = kd[((i * kh + j) * cin + ci) * cout + co];
                            acc = acc.wrapping_add(xv.wrapping_mul(kv));
                        }
                    }
                }
                out[(ox * oh + oy) * cout + co] = acc & p.mask();
            }
        }
    }
    RingTensor::new(vec![ow, oh, cout], out)
}

fn oracle_upsample(x: &RingTensor, factor: usize) -> Result<RingTensor> {
    let &[w, h, c] = x.shape() else {
        return Err(Error::ShapeMismatch(format!("upsample of {:?}", x.shape())));
    };
    let mut out = vec![0u64; w * h * c * factor * factor];
    let oh = h * factor;
    for ox in 0..w * factor {
        for oy in 0..oh {
            for ci in 0..c {
                out[(ox * oh + oy) * c + ci] = x.data()[((ox / factor) * h + oy / factor) * c + ci];
            }
        }
    }
    RingTensor::new(vec![w * factor, oh, c], out)
}

fn oracle_lrelu(z: u64, shift: u32, p: RingParams) -> u64 {
    let signed = p.to_signed(z);
    if signed >= 0 {
        z
    } else {
        (signed.div_euclid(1i64 << shift) as u64) & p.mask()
    }
}

fn activate(z: &RingTensor, shift: u32, p: RingParams, mode: ActivationMode, t: &mut Truncation) -> Result<RingTensor> {
    let data = match mode {
        ActivationMode::Shift => z.data().iter().map(|&v| oracle_lrelu(v, shift, p)).collect(),
        ActivationMode::LocalScale => {
            let alpha = encode(2f64.powi(-(shift as i32)), p)?.0;
            let scaled: Vec<u64> = z.data().iter().map(|&v| v.wrapping_mul(alpha) & p.mask()).collect();
            let az = t.apply(&scaled, p)?;
            z.data().iter().zip(az).map(|(&v, a)| if p.is_negative(v) { a } else { v }).collect()
        }
    };
    RingTensor::new(z.shape().to_vec(), data)
}

/// Per-layer outputs and the final dissimilarity of one reconstructor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OracleTrace {
    pub layers: Vec<RingTensor>,
    pub dissimilarity: u64,
}

impl OracleTrace {
    pub fn reconstruction(&self) -> &RingTensor {
        self.layers.last().unwrap()
    }
}

pub fn oracle_forward(
    spec: &ReconstructorSpec,
    weights: &WeightSet,
    image: &RingTensor,
    mode: ActivationMode,
    t: &mut Truncation,
) -> Result<Vec<RingTensor>> {
    let p = spec.params;
    if image.shape() != spec.input_shape.as_slice() {
        return Err(Error::ShapeMismatch(format!("image {:?}, model wants {:?}", image.shape(), spec.input_shape)));
    }
    let mut ws = weights.layers.iter();
    let mut cur = image.clone();
    let mut out = Vec::with_capacity(spec.layers.len());
    for l in &spec.layers {
        cur = match l.kind {
            LayerKind::Upsample => oracle_upsample(&cur, l.stride)?,
            LayerKind::Conv => {
                let w = ws.next().ok_or_else(|| Error::ShapeMismatch("fewer weight layers than convs".into()))?;
                let z = oracle_conv(&cur, &w.kernel, l.stride, l.padding, p)?;
                let mut y = RingTensor::new(z.shape().to_vec(), t.apply(z.data(), p)?)?;
                if let Some(b) = &w.bias {
                    let c = b.len();
                    for (i, v) in y.data_mut().iter_mut().enumerate() {
                        *v = p.add(*v, b.data()[i % c]);
                    }
                }
                match l.activation {
                    Activation::Lrelu => activate(&y, l.alpha_shift, p, mode, t)?,
                    Activation::None => y,
                }
            }
        };
        out.push(cur.clone());
    }
    Ok(out)
}

/// Sum of squared differences with one truncation at the end.
pub fn oracle_dissimilarity(x: &RingTensor, xbar: &RingTensor, p: RingParams, t: &mut Truncation) -> Result<u64> {
    if x.len() != xbar.len() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", x.shape(), xbar.shape())));
    }
    let sum = x.data().iter().zip(xbar.data()).fold(0u64, |acc, (&a, &b)| {
        let o = a.wrapping_sub(b);
        acc.wrapping_add(o.wrapping_mul(o))
    }) & p.mask();
    Ok(t.apply(&[sum], p)?[0])
}

pub fn oracle_trace(
    spec: &ReconstructorSpec,
    weights: &WeightSet,
    image: &RingTensor,
    mode: ActivationMode,
    t: &mut Truncation,
) -> Result<OracleTrace> {
    let layers = oracle_forward(spec, weights, image, mode, t)?;
    let dissimilarity = oracle_dissimilarity(image, layers.last().unwrap(), spec.params, t)?;
    Ok(OracleTrace { layers, dissimilarity })
}

/// A registered model in the clear.
#[derive(Clone, Debug)]
pub struct OracleModel {
    pub user_id: u32,
    pub spec: ReconstructorSpec,
    pub weights: WeightSet,
    pub tau: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OraclePrediction {
    pub traces: Vec<OracleTrace>,
    pub index: usize,
    pub flag: bool,
    pub outcome: Outcome,
    pub decision: Decision,
}

/// Brute-force argmin (lowest index wins ties), threshold and blocking rule.
pub fn oracle_predict(
    models: &[OracleModel],
    image: &RingTensor,
    tau: Option<u64>,
    uploader: u32,
    mode: ActivationMode,
    t: &mut Truncation,
) -> Result<OraclePrediction> {
    if models.is_empty() {
        return Err(Error::Usage("no registered models".into()));
    }
    let p = models[0].spec.params;
    let traces = models.iter().map(|m| oracle_trace(&m.spec, &m.weights, image, mode, t)).collect::<Result<Vec<_>>>()?;
    let signed: Vec<i64> = traces.iter().map(|tr| p.to_signed(tr.dissimilarity)).collect();
    let mut index = 0;
    for (i, &d) in signed.iter().enumerate() {
        if d < signed[index] {
            index = i;
        }
    }
    let tau_i = models[index].tau.or(tau).ok_or_else(|| Error::Usage(format!("no threshold for model {index}")))?;
    let flag = signed[index] <= p.to_signed(tau_i);
    let outcome = if flag { Outcome::Class(models[index].user_id) } else { Outcome::None };
    let decision = Decision::from_outcome(outcome, uploader);
    Ok(OraclePrediction { traces, index, flag, outcome, decision })
}

/// Double-precision forward pass on real weights; `image` is in [0, 1].
pub fn float_forward(spec: &ReconstructorSpec, layers: &[FloatLayer], image: &[f64]) -> Result<Vec<f64>> {
    let mut shape = spec.input_shape.clone();
    let mut cur = image.to_vec();
    let mut ws = layers.iter();
    for l in &spec.layers {
        let [w, h, c] = [shape[0], shape[1], shape[2]];
        match l.kind {
            LayerKind::Upsample => {
                let s = l.stride;
                let mut out = vec![0.0; cur.len() * s * s];
                for ox in 0..w * s {
                    for oy in 0..h * s {
                        for ci in 0..c {
                            out[(ox * h * s + oy) * c + ci] = cur[((ox / s) * h + oy / s) * c + ci];
                        }
                    }
                }
                cur = out;
                shape = vec![w * s, h * s, c];
            }
            LayerKind::Conv => {
                let fl = ws.next().ok_or_else(|| Error::ShapeMismatch("fewer weight layers than convs".into()))?;
                let [kw, kh, _, cout] = [l.shape[0], l.shape[1], l.shape[2], l.shape[3]];
                let (ow, pw) = conv_axis(w, kw, l.stride, l.padding)?;
                let (oh, ph) = conv_axis(h, kh, l.stride, l.padding)?;
                let mut out = vec![0.0; ow * oh * cout];
                for ox in 0..ow {
                    for oy in 0..oh {
                        for co in 0..cout {
                            let mut acc = fl.bias.as_ref().map_or(0.0, |b| b[co]);
                            for i in 0..kw {
                                for j in 0..kh {
                                    let ix = (ox * l.stride + i) as isize - pw as isize;
                                    let iy = (oy * l.stride + j) as isize - ph as isize;
                                    if ix < 0 || iy < 0 || ix >= w as isize || iy >= h as isize {
                                        continue;
                                    }
                                    for ci in 0..c {
                                        acc += cur[(ix as usize * h + iy as usize) * c + ci] * fl.kernel[((i * kh + j) * c + ci) * cout + co];
                                    }
                                }
                            }
                            if l.activation == Activation::Lrelu && acc < 0.0 {
                                acc *= 2f64.powi(-(l.alpha_shift as i32));
                            }
                            out[(ox * oh + oy) * cout + co] = acc;
                        }
                    }
                }
                cur = out;
                shape = vec![ow, oh, cout];
            }
        }
    }
    Ok(cur)
}
