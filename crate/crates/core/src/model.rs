//! Reconstructor architectures, weight containers and their file formats.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{CryptoRng, Rng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::beaver::TripleShape;
use crate::error::{Error, Result};
use crate::fixedpoint::{decode, encode, RingElement, RingParams, RingTensor};
use crate::linear::{ConvGeometry, Padding};
use crate::sharing::{share, PartyId, SessionId, ShareTensor};

pub const FORMAT_VERSION: u32 = 1;
pub const NORMALIZATION: &str = "div255";
const WEIGHTS_MAGIC: &[u8; 8] = b"PVWT0001";
const SHARE_MAGIC: &[u8; 8] = b"PVSH0001";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    /// Nearest-neighbour upsampling; `stride` holds the factor.
    Upsample,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Lrelu,
    #[default]
    None,
}

fn default_alpha_shift() -> u32 {
    2
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Kernel `[w_k, h_k, c_t, c_t+1]`; empty for upsampling.
    #[serde(default)]
    pub shape: Vec<usize>,
    pub stride: usize,
    #[serde(default)]
    pub padding: Padding,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_alpha_shift")]
    pub alpha_shift: u32,
    #[serde(default)]
    pub bias: bool,
}

impl LayerSpec {
    pub fn conv(shape: [usize; 4], stride: usize, activation: Activation) -> LayerSpec {
        LayerSpec {
            kind: LayerKind::Conv,
            shape: shape.to_vec(),
            stride,
            padding: Padding::Same,
            activation,
            alpha_shift: default_alpha_shift(),
            bias: false,
        }
    }

    pub fn upsample(factor: usize) -> LayerSpec {
        LayerSpec {
            kind: LayerKind::Upsample,
            shape: vec![],
            stride: factor,
            padding: Padding::Same,
            activation: Activation::None,
            alpha_shift: default_alpha_shift(),
            bias: false,
        }
    }
}

/// The `model.json` manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub user_id: u32,
    pub k: u32,
    pub f: u32,
    pub normalization: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl Manifest {
    pub fn params(&self) -> Result<RingParams> {
        RingParams::new(self.k, self.f)
    }

    pub fn spec(&self) -> Result<ReconstructorSpec> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::MalformedSpec(format!("format_version {} unsupported", self.format_version)));
        }
        if self.normalization != NORMALIZATION {
            return Err(Error::MalformedSpec(format!("normalization {:?} unsupported", self.normalization)));
        }
        let spec = ReconstructorSpec { params: self.params()?, input_shape: self.input_shape.clone(), layers: self.layers.clone() };
        spec.layer_shapes()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut s = serde_json::to_vec_pretty(self)?;
        s.push(b'\n');
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReconstructorSpec {
    pub params: RingParams,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ReconstructorSpec {
    /// Output shape of every layer, checking that the chain is consistent.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.len() != 3 || self.input_shape.contains(&0) {
            return Err(Error::MalformedSpec(format!("input shape {:?} must be [w, h, c] and nonzero", self.input_shape)));
        }
        if self.layers.is_empty() {
            return Err(Error::MalformedSpec("no layers".into()));
        }
        let mut cur = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            cur = match l.kind {
                LayerKind::Conv => {
                    if l.shape.len() != 4 || l.shape.contains(&0) {
                        return Err(Error::MalformedSpec(format!("layer {i}: kernel {:?} must be [w_k, h_k, c_t, c_t+1]", l.shape)));
                    }
                    if l.activation == Activation::Lrelu && (l.alpha_shift == 0 || l.alpha_shift >= self.params.k()) {
                        return Err(Error::MalformedSpec(format!("layer {i}: alpha_shift {} out of range", l.alpha_shift)));
                    }
                    ConvGeometry::new(&cur, &l.shape, l.stride, l.padding)
                        .map_err(|e| Error::MalformedSpec(format!("layer {i}: {e}")))?
                        .output_shape()
                }
                LayerKind::Upsample => {
                    if l.stride == 0 || !l.shape.is_empty() || l.activation != Activation::None || l.bias {
                        return Err(Error::MalformedSpec(format!("layer {i}: upsample takes only a nonzero factor")));
                    }
                    vec![cur[0] * l.stride, cur[1] * l.stride, cur[2]]
                }
            };
            out.push(cur.clone());
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.layer_shapes()?.pop().unwrap())
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// T: the number of weight-carrying layers.
    pub fn conv_count(&self) -> usize {
        self.layers.iter().filter(|l| l.kind == LayerKind::Conv).count()
    }

    pub fn conv_geometries(&self) -> Result<Vec<ConvGeometry>> {
        let shapes = self.layer_shapes()?;
        let mut cur = self.input_shape.clone();
        let mut out = Vec::new();
        for (l, s) in self.layers.iter().zip(shapes) {
            if l.kind == LayerKind::Conv {
                out.push(ConvGeometry::new(&cur, &l.shape, l.stride, l.padding)?);
            }
            cur = s;
        }
        Ok(out)
    }

    /// Triples one reconstruction and its dissimilarity consume, in order.
    pub fn triple_plan(&self) -> Result<Vec<TripleShape>> {
        let mut plan: Vec<TripleShape> = self.conv_geometries()?.iter().map(|g| g.triple_shape()).collect();
        plan.push(TripleShape::Elementwise { len: self.input_len() });
        Ok(plan)
    }

    /// Elements that pass through L-ReLU per reconstruction.
    pub fn lrelu_elements(&self) -> Result<usize> {
        let shapes = self.layer_shapes()?;
        Ok(self.layers.iter().zip(&shapes).filter(|(l, _)| l.activation == Activation::Lrelu).map(|(_, s)| s.iter().product::<usize>()).sum())
    }

    /// Number of ring words of every kernel and bias, in file order.
    pub fn weight_shapes(&self) -> Vec<(Vec<usize>, Option<usize>)> {
        self.layers.iter().filter(|l| l.kind == LayerKind::Conv).map(|l| (l.shape.clone(), l.bias.then(|| l.shape[3]))).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject(String),
}

/// Accepts iff the smallest hidden feature map has fewer elements than the
/// input and the output shape equals the input shape.
pub fn validate_undercomplete(spec: &ReconstructorSpec) -> Result<Verdict> {
    let shapes = spec.layer_shapes()?;
    let input = spec.input_len();
    let output = shapes.last().unwrap();
    if *output != spec.input_shape {
        return Ok(Verdict::Reject(format!("output shape {output:?} differs from input shape {:?}", spec.input_shape)));
    }
    let hidden = &shapes[..shapes.len() - 1];
    let Some(bottleneck) = hidden.iter().map(|s| s.iter().product::<usize>()).min() else {
        return Ok(Verdict::Reject("no hidden layer".into()));
    };
    if bottleneck >= input {
        return Ok(Verdict::Reject(format!("bottleneck of {bottleneck} elements is not smaller than the input ({input})")));
    }
    Ok(Verdict::Accept)
}

/// Desk-scale reference: 16×16×1 input, three stride-2 4×4 encoder convs
/// (4/8/8 channels), three upsample + 3×3 conv decoder stages (8/4/1),
/// linear output.
pub fn desk_manifest(user_id: u32, params: RingParams) -> Manifest {
    use Activation::*;
    let layers = vec![
        LayerSpec::conv([4, 4, 1, 4], 2, Lrelu),
        LayerSpec::conv([4, 4, 4, 8], 2, Lrelu),
        LayerSpec::conv([4, 4, 8, 8], 2, Lrelu),
        LayerSpec::upsample(2),
        LayerSpec::conv([3, 3, 8, 8], 1, Lrelu),
        LayerSpec::upsample(2),
        LayerSpec::conv([3, 3, 8, 4], 1, Lrelu),
        LayerSpec::upsample(2),
        LayerSpec::conv([3, 3, 4, 1], 1, None),
    ];
    Manifest {
        format_version: FORMAT_VERSION,
        user_id,
        k: params.k(),
        f: params.f(),
        normalization: NORMALIZATION.into(),
        input_shape: vec![16, 16, 1],
        layers,
    }
}

/// Real-valued parameters of one conv layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatLayer {
    pub kernel: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerWeights {
    pub kernel: RingTensor,
    pub bias: Option<RingTensor>,
}

/// Quantized parameters of one reconstructor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeightSet {
    pub user_id: u32,
    pub manifest_hash: [u8; 32],
    pub layers: Vec<LayerWeights>,
}

pub fn manifest_hash(json: &[u8]) -> [u8; 32] {
    Sha256::digest(json).into()
}

pub fn quantize_weights(spec: &ReconstructorSpec, layers: &[FloatLayer], user_id: u32, hash: [u8; 32]) -> Result<WeightSet> {
    let shapes = spec.weight_shapes();
    if shapes.len() != layers.len() {
        return Err(Error::ShapeMismatch(format!("{} conv layers, {} weight layers given", shapes.len(), layers.len())));
    }
    let params = spec.params;
    let quant = |layer: usize, vals: &[f64], shape: Vec<usize>| -> Result<RingTensor> {
        let mut out = Vec::with_capacity(vals.len());
        for (index, &value) in vals.iter().enumerate() {
            out.push(encode(value, params).map_err(|_| Error::WeightOverflow { layer, index, value })?.0);
        }
        RingTensor::new(shape, out)
    };
    let mut out = Vec::with_capacity(layers.len());
    for (i, ((kshape, bias_len), fl)) in shapes.into_iter().zip(layers).enumerate() {
        let kernel = quant(i, &fl.kernel, kshape)?;
        let bias = match (bias_len, &fl.bias) {
            (Some(n), Some(b)) => Some(quant(i, b, vec![n])?),
            (None, None) => None,
            _ => return Err(Error::ShapeMismatch(format!("layer {i}: bias presence disagrees with the spec"))),
        };
        out.push(LayerWeights { kernel, bias });
    }
    Ok(WeightSet { user_id, manifest_hash: hash, layers: out })
}

pub fn dequantize(ws: &WeightSet, params: RingParams) -> Vec<FloatLayer> {
    ws.layers.iter().map(|l| FloatLayer { kernel: l.kernel.decode_all(params), bias: l.bias.as_ref().map(|b| b.decode_all(params)) }).collect()
}

/// Uniform weights in `[-scale, scale)` for every conv layer of `spec`.
pub fn random_float_weights<R: Rng>(spec: &ReconstructorSpec, scale: f64, rng: &mut R) -> Vec<FloatLayer> {
    spec.weight_shapes()
        .into_iter()
        .map(|(k, b)| FloatLayer {
            kernel: (0..k.iter().product::<usize>()).map(|_| rng.gen_range(-scale..scale)).collect(),
            bias: b.map(|n| (0..n).map(|_| rng.gen_range(-scale..scale)).collect()),
        })
        .collect()
}

/// One party's share of a weight set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeightShares {
    pub owner: PartyId,
    pub user_id: u32,
    pub manifest_hash: [u8; 32],
    pub kernels: Vec<ShareTensor>,
    pub biases: Vec<Option<ShareTensor>>,
}

impl WeightShares {
    pub fn rebind(mut self, session: SessionId) -> WeightShares {
        self.kernels = self.kernels.into_iter().map(|t| t.rebind(session)).collect();
        self.biases = self.biases.into_iter().map(|b| b.map(|t| t.rebind(session))).collect();
        self
    }

    pub fn to_share_file(&self, params: RingParams) -> ShareFile {
        let mut tensors = Vec::new();
        for (k, b) in self.kernels.iter().zip(&self.biases) {
            tensors.push(k.clone());
            if let Some(b) = b {
                tensors.push(b.clone());
            }
        }
        ShareFile { owner: self.owner, params, hash: self.manifest_hash, tensors }
    }

    pub fn from_share_file(file: ShareFile, spec: &ReconstructorSpec, user_id: u32) -> Result<WeightShares> {
        let mut it = file.tensors.into_iter();
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        for (kshape, bias) in spec.weight_shapes() {
            let k = it.next().ok_or_else(|| Error::ShapeMismatch("weight share file has too few tensors".into()))?;
            if k.shape() != kshape.as_slice() {
                return Err(Error::ShapeMismatch(format!("kernel share {:?}, spec wants {kshape:?}", k.shape())));
            }
            kernels.push(k);
            biases.push(match bias {
                Some(n) => {
                    let b = it.next().ok_or_else(|| Error::ShapeMismatch("missing bias share".into()))?;
                    if b.shape() != [n] {
                        return Err(Error::ShapeMismatch(format!("bias share {:?}, spec wants [{n}]", b.shape())));
                    }
                    Some(b)
                }
                None => None,
            });
        }
        if it.next().is_some() {
            return Err(Error::ShapeMismatch("weight share file has extra tensors".into()));
        }
        Ok(WeightShares { owner: file.owner, user_id, manifest_hash: file.hash, kernels, biases })
    }
}

pub fn share_weights<R: RngCore + CryptoRng>(ws: &WeightSet, params: RingParams, rng: &mut R) -> Result<(WeightShares, WeightShares)> {
    let mut a = WeightShares { owner: PartyId::S1, user_id: ws.user_id, manifest_hash: ws.manifest_hash, kernels: vec![], biases: vec![] };
    let mut b = WeightShares { owner: PartyId::S2, ..a.clone() };
    for l in &ws.layers {
        let (k1, k2) = share(&l.kernel, params, 0, rng)?;
        a.kernels.push(k1);
        b.kernels.push(k2);
        match &l.bias {
            Some(bias) => {
                let (b1, b2) = share(bias, params, 0, rng)?;
                a.biases.push(Some(b1));
                b.biases.push(Some(b2));
            }
            None => {
                a.biases.push(None);
                b.biases.push(None);
            }
        }
    }
    Ok((a, b))
}

/// A model directory: `model.json` plus `weights.bin`.
#[derive(Clone, Debug)]
pub struct Model {
    pub manifest: Manifest,
    pub manifest_hash: [u8; 32],
    pub spec: ReconstructorSpec,
    pub weights: WeightSet,
}

pub fn save_model(dir: &Path, manifest: &Manifest, layers: &[FloatLayer]) -> Result<Model> {
    std::fs::create_dir_all(dir)?;
    let json = manifest.to_json()?;
    let hash = manifest_hash(&json);
    let spec = manifest.spec()?;
    let weights = quantize_weights(&spec, layers, manifest.user_id, hash)?;
    std::fs::write(dir.join("model.json"), &json)?;
    let mut bin = Vec::new();
    bin.extend_from_slice(WEIGHTS_MAGIC);
    bin.extend_from_slice(&hash);
    for l in &weights.layers {
        for v in l.kernel.data().iter().chain(l.bias.iter().flat_map(|b| b.data())) {
            bin.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(dir.join("weights.bin"), bin)?;
    Ok(Model { manifest: manifest.clone(), manifest_hash: hash, spec, weights })
}

pub fn read_manifest(path: &Path) -> Result<(Manifest, [u8; 32])> {
    let json = std::fs::read(path)?;
    let manifest: Manifest = serde_json::from_slice(&json)?;
    Ok((manifest, manifest_hash(&json)))
}

pub fn load_model(dir: &Path) -> Result<Model> {
    let (manifest, hash) = read_manifest(&dir.join("model.json"))?;
    let spec = manifest.spec()?;
    let bin = std::fs::read(dir.join("weights.bin"))?;
    if bin.len() < 40 || &bin[..8] != WEIGHTS_MAGIC {
        return Err(Error::Decode("weights.bin: bad magic".into()));
    }
    if bin[8..40] != hash {
        return Err(Error::ManifestMismatch("weights.bin is bound to a different model.json".into()));
    }
    let words: Vec<u64> = bin[40..]
        .chunks(8)
        .map(|c| c.try_into().map(u64::from_le_bytes))
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Decode("weights.bin: ragged tail".into()))?;
    let mut it = words.into_iter();
    let mut layers = Vec::new();
    let params = spec.params;
    let mut grab = |shape: Vec<usize>| -> Result<RingTensor> {
        let n: usize = shape.iter().product();
        let v: Vec<u64> = it.by_ref().take(n).collect();
        if v.len() != n {
            return Err(Error::Decode("weights.bin is shorter than the manifest requires".into()));
        }
        if v.iter().any(|&w| w & !params.mask() != 0) {
            return Err(Error::Decode("weights.bin holds words wider than k".into()));
        }
        RingTensor::new(shape, v)
    };
    for (kshape, bias) in spec.weight_shapes() {
        let kernel = grab(kshape)?;
        let bias = bias.map(|n| grab(vec![n])).transpose()?;
        layers.push(LayerWeights { kernel, bias });
    }
    if it.next().is_some() {
        return Err(Error::Decode("weights.bin is longer than the manifest requires".into()));
    }
    Ok(Model { weights: WeightSet { user_id: manifest.user_id, manifest_hash: hash, layers }, manifest, manifest_hash: hash, spec })
}

/// A list of share tensors of one party (`PVSH0001` files). Image,
/// threshold and weight shares all use it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShareFile {
    pub owner: PartyId,
    pub params: RingParams,
    /// Manifest hash for weight shares; zero otherwise.
    pub hash: [u8; 32],
    pub tensors: Vec<ShareTensor>,
}

impl ShareFile {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SHARE_MAGIC);
        out.push(self.owner.as_u8());
        out.push(self.params.k() as u8);
        out.push(self.params.f() as u8);
        out.extend_from_slice(&self.hash);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<ShareFile> {
        let mut r = crate::net::codec::Reader::new(bytes);
        if r.take(8)? != SHARE_MAGIC {
            return Err(Error::Decode("bad share file magic".into()));
        }
        let owner = PartyId::from_u8(r.u8()?)?;
        let k = r.u8()?;
        let f = r.u8()?;
        let params = RingParams::new(k as u32, f as u32)?;
        let hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let rank = r.u8()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let len: usize = shape.iter().product();
            if len > r.remaining() / 8 {
                return Err(Error::Decode("share file truncated".into()));
            }
            let data = (0..len).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            if data.iter().any(|&w| w & !params.mask() != 0) {
                return Err(Error::Decode("share words wider than k".into()));
            }
            tensors.push(ShareTensor::new(data, shape, owner, 0, params)?);
        }
        r.finish()?;
        Ok(ShareFile { owner, params, hash, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ShareFile> {
        ShareFile::decode(&std::fs::read(path)?)
    }

    /// The single tensor of an image or threshold file.
    pub fn single(self) -> Result<ShareTensor> {
        let mut t = self.tensors;
        if t.len() != 1 {
            return Err(Error::ShapeMismatch(format!("expected one tensor, file holds {}", t.len())));
        }
        Ok(t.pop().unwrap())
    }
}

/// Raw pixel bytes scaled to [0, 1] and encoded.
pub fn encode_image(pixels: &[u8], shape: Vec<usize>, params: RingParams) -> Result<RingTensor> {
    let vals: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    RingTensor::encode_slice(shape, &vals, params)
}

/// Reads a binary (P5) or ASCII (P2) greymap with maxval 255.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    let bad = |m: &str| Error::Decode(format!("{}: {m}", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let pixels = match fields[0].as_str() {
        "P5" => bytes.get(pos + 1..pos + 1 + w * h).ok_or_else(|| bad("truncated pixel data"))?.to_vec(),
        "P2" => String::from_utf8_lossy(&bytes[pos..])
            .split_ascii_whitespace()
            .take(w * h)
            .map(|t| t.parse::<u8>().map_err(|_| bad("bad pixel")))
            .collect::<Result<Vec<_>>>()?,
        _ => return Err(bad("not a P2/P5 greymap")),
    };
    if pixels.len() != w * h {
        return Err(bad("truncated pixel data"));
    }
    Ok((w, h, pixels))
}

/// Stores a greymap in the `[w, h, 1]` layout (x-major).
pub fn pgm_to_tensor_order(w: usize, h: usize, row_major: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            out[x * h + y] = row_major[y * w + x];
        }
    }
    out
}

pub fn write_pgm(path: &Path, w: usize, h: usize, tensor_order: &[u8]) -> Result<()> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            out.push(tensor_order[x * h + y]);
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// A registered model directory on a server: `model.json`, this party's
/// `weights.share` and optionally `threshold.share`.
pub struct ServerModel {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub manifest_hash: [u8; 32],
    pub spec: ReconstructorSpec,
    pub weights: WeightShares,
    pub threshold: Option<ShareTensor>,
}

pub fn load_server_models(root: &Path, role: PartyId) -> Result<Vec<ServerModel>> {
    let mut dirs: Vec<PathBuf> =
        std::fs::read_dir(root)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.join("model.json").is_file()).collect();
    dirs.sort();
    let mut out = Vec::new();
    for dir in dirs {
        let (manifest, hash) = read_manifest(&dir.join("model.json"))?;
        let spec = manifest.spec()?;
        if let Verdict::Reject(why) = validate_undercomplete(&spec)? {
            return Err(Error::MalformedSpec(format!("{}: {why}", dir.display())));
        }
        let file = ShareFile::load(&dir.join("weights.share"))?;
        if file.owner != role {
            return Err(Error::OwnerMismatch(format!("{} holds shares of {}", dir.display(), file.owner)));
        }
        if file.hash != hash {
            return Err(Error::ManifestMismatch(format!("{}: weight shares bound to another manifest", dir.display())));
        }
        if file.params != spec.params {
            return Err(Error::ParamsMismatch(format!("{}: share file ring differs from manifest", dir.display())));
        }
        let weights = WeightShares::from_share_file(file, &spec, manifest.user_id)?;
        let tpath = dir.join("threshold.share");
        let threshold = if tpath.is_file() { Some(ShareFile::load(&tpath)?.single()?) } else { None };
        out.push(ServerModel { dir, manifest, manifest_hash: hash, spec, weights, threshold });
    }
    out.sort_by_key(|m| m.manifest.user_id);
    Ok(out)
}

pub fn decode_scalar(v: u64, params: RingParams) -> f64 {
    decode(RingElement(v), params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sharing::reconstruct;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn spec_of(m: &Manifest) -> ReconstructorSpec {
        m.spec().unwrap()
    }

    #[test]
    fn desk_spec_shapes_and_plan() {
        let m = desk_manifest(1, RingParams::default());
        let s = spec_of(&m);
        let shapes = s.layer_shapes().unwrap();
        assert_eq!(shapes[2], vec![2, 2, 8]);
        assert_eq!(s.output_shape().unwrap(), vec![16, 16, 1]);
        assert_eq!(s.conv_count(), 6);
        assert_eq!(s.lrelu_elements().unwrap(), 256 + 128 + 32 + 128 + 256);
        let plan = s.triple_plan().unwrap();
        assert_eq!(plan.len(), 7);
        assert_eq!(plan[0], TripleShape::MatMul { m: 64, n: 16, p: 4 });
        assert_eq!(plan[5], TripleShape::MatMul { m: 256, n: 36, p: 1 });
        assert_eq!(plan[6], TripleShape::Elementwise { len: 256 });
        assert_eq!(validate_undercomplete(&s).unwrap(), Verdict::Accept);
    }

    #[test]
    fn undercomplete_examples() {
        let p = RingParams::default();
        let mk = |layers: Vec<LayerSpec>| ReconstructorSpec { params: p, input_shape: vec![16, 16, 1], layers };
        // 4x4x4 bottleneck
        let ok =
            mk(vec![LayerSpec::conv([4, 4, 1, 4], 4, Activation::Lrelu), LayerSpec::upsample(4), LayerSpec::conv([3, 3, 4, 1], 1, Activation::None)]);
        assert_eq!(validate_undercomplete(&ok).unwrap(), Verdict::Accept);
        let same = mk(vec![LayerSpec::conv([3, 3, 1, 1], 1, Activation::Lrelu), LayerSpec::conv([3, 3, 1, 1], 1, Activation::None)]);
        assert!(matches!(validate_undercomplete(&same).unwrap(), Verdict::Reject(_)));
        let wrong_out = mk(vec![LayerSpec::conv([4, 4, 1, 4], 4, Activation::Lrelu), LayerSpec::upsample(2)]);
        assert!(matches!(validate_undercomplete(&wrong_out).unwrap(), Verdict::Reject(_)));
        let malformed = mk(vec![LayerSpec::conv([3, 3, 2, 1], 1, Activation::None)]);
        assert!(matches!(validate_undercomplete(&malformed), Err(Error::MalformedSpec(_))));
    }

    #[test]
    fn quantize_round_trip_and_overflow() {
        let p = RingParams::default();
        let s = spec_of(&desk_manifest(1, p));
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let w = random_float_weights(&s, 3.0, &mut rng);
        let q = quantize_weights(&s, &w, 1, [0; 32]).unwrap();
        for (a, b) in dequantize(&q, p).iter().zip(&w) {
            for (x, y) in a.kernel.iter().zip(&b.kernel) {
                assert!((x - y).abs() <= 0.5 / p.scale());
            }
        }
        let mut bad = w.clone();
        bad[2].kernel[5] = 1e300;
        assert!(matches!(quantize_weights(&s, &bad, 1, [0; 32]), Err(Error::WeightOverflow { layer: 2, index: 5, .. })));
        let zero: Vec<FloatLayer> = w.iter().map(|l| FloatLayer { kernel: vec![0.0; l.kernel.len()], bias: None }).collect();
        let zq = quantize_weights(&s, &zero, 1, [0; 32]).unwrap();
        assert!(zq.layers.iter().all(|l| l.kernel.data().iter().all(|&v| v == 0)));
    }

    #[test]
    fn model_dir_and_share_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = RingParams::default();
        let mut m = desk_manifest(7, p);
        m.layers[0].bias = true;
        let s = spec_of(&m);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let w = random_float_weights(&s, 1.0, &mut rng);
        let saved = save_model(dir.path(), &m, &w).unwrap();
        let loaded = load_model(dir.path()).unwrap();
        assert_eq!(loaded.weights, saved.weights);
        let (a, b) = share_weights(&loaded.weights, p, &mut rng).unwrap();
        let fa = ShareFile::decode(&a.to_share_file(p).encode()).unwrap();
        let a2 = WeightShares::from_share_file(fa, &s, 7).unwrap();
        assert_eq!(a2, a);
        for (i, l) in loaded.weights.layers.iter().enumerate() {
            assert_eq!(&reconstruct(&a2.kernels[i], &b.kernels[i]).unwrap(), &l.kernel);
        }
        let mut json = std::fs::read(dir.path().join("model.json")).unwrap();
        json.push(b' ');
        std::fs::write(dir.path().join("model.json"), json).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::ManifestMismatch(_))));
    }

    #[test]
    fn hand_sharing_at_k8() {
        let p = RingParams::new(8, 3).unwrap();
        let m = Manifest {
            format_version: 1,
            user_id: 1,
            k: 8,
            f: 3,
            normalization: NORMALIZATION.into(),
            input_shape: vec![1, 1, 1],
            layers: vec![LayerSpec::conv([1, 1, 1, 1], 1, Activation::None)],
        };
        let s = spec_of(&m);
        let ws = quantize_weights(&s, &[FloatLayer { kernel: vec![1.5], bias: None }], 1, [0; 32]).unwrap();
        assert_eq!(ws.layers[0].kernel.data(), &[12]);
        let (a, b) = share_weights(&ws, p, &mut ChaCha20Rng::seed_from_u64(3)).unwrap();
        assert_eq!(p.add(a.kernels[0].data()[0], b.kernels[0].data()[0]), 12);
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let pixels: Vec<u8> = (0..12).map(|i| i * 20).collect();
        write_pgm(&path, 4, 3, &pixels).unwrap();
        let (w, h, rows) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(pgm_to_tensor_order(w, h, &rows), pixels);
        std::fs::write(&path, "P2\n# c\n2 1\n255\n7 9\n").unwrap();
        assert_eq!(read_pgm(&path).unwrap(), (2, 1, vec![7, 9]));
    }

    proptest::proptest! {
        #[test]
        fn shrinking_bottleneck_keeps_accept(c1 in 1usize..6, c2 in 1usize..6, shrink in 1usize..6) {
            let p = RingParams::default();
            let mk = |a: usize, b: usize| ReconstructorSpec {
                params: p,
                input_shape: vec![8, 8, 1],
                layers: vec![
                    LayerSpec::conv([3, 3, 1, a], 2, Activation::Lrelu),
                    LayerSpec::conv([3, 3, a, b], 2, Activation::Lrelu),
                    LayerSpec::upsample(4),
                    LayerSpec::conv([3, 3, b, 1], 1, Activation::None),
                ],
            };
            let before = validate_undercomplete(&mk(c1, c2)).unwrap();
            let after = validate_undercomplete(&mk(c1, c2.saturating_sub(shrink).max(1))).unwrap();
            if before == Verdict::Accept {
                proptest::prop_assert_eq!(after, Verdict::Accept);
            }
        }
    }
}
