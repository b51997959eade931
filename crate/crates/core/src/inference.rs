//! Private prediction: every registered reconstructor runs on the shared
//! image, and only the argmin index and threshold flag are decoded.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::beaver::{BeaverTriple, TripleQueue, TripleShape};
use crate::error::{Error, Result};
use crate::fixedpoint::{decode, RingElement};
use crate::garbled::argmin::secure_argmin;
use crate::garbled::lrelu::eval_lrelu;
use crate::linear::{secure_conv, secure_mul, truncate_product, upsample_nn};
use crate::model::{Activation, LayerKind, ReconstructorSpec, WeightShares};
use crate::net::channel::Channel;
use crate::net::codec::{recv_shares, send_shares};
use crate::net::party::Party;
use crate::sharing::{local_sub, reconstruct, PartyId, ShareTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Outcome {
    Class(u32),
    None,
}

impl Serialize for Outcome {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Outcome::Class(c) => s.serialize_u32(*c),
            Outcome::None => s.serialize_str("none"),
        }
    }
}

impl<'de> Deserialize<'de> for Outcome {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Outcome, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Class(u32),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Class(c) => Ok(Outcome::Class(c)),
            Raw::Word(w) if w == "none" => Ok(Outcome::None),
            Raw::Word(w) => Err(serde::de::Error::custom(format!("unknown outcome {w:?}"))),
        }
    }
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Outcome::Class(c) => write!(f, "class {c}"),
            Outcome::None => f.write_str("none"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Allow,
    Block,
}

impl Decision {
    /// Block iff the image is assigned to a user other than the uploader.
    pub fn from_outcome(outcome: Outcome, uploader: u32) -> Decision {
        match outcome {
            Outcome::Class(c) if c != uploader => Decision::Block,
            _ => Decision::Allow,
        }
    }
}

impl std::fmt::Display for Decision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Decision::Allow => "allow",
            Decision::Block => "block",
        })
    }
}

/// One party's view of a registered reconstructor.
#[derive(Clone, Debug)]
pub struct RegisteredModel {
    pub user_id: u32,
    pub spec: ReconstructorSpec,
    pub manifest_hash: [u8; 32],
    pub weights: WeightShares,
    /// Share of this user's own threshold, if registered.
    pub tau: Option<ShareTensor>,
}

#[derive(Clone, Debug)]
pub struct PredictionRequest {
    pub image: ShareTensor,
    pub uploader: u32,
    /// Share of the global threshold, used for models without their own.
    pub tau: Option<ShareTensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionResult {
    pub outcome: Outcome,
    pub decision: Decision,
    pub index: usize,
    pub flag: bool,
    /// Only under the test flag that opens dissimilarities.
    pub dissimilarities: Option<Vec<f64>>,
}

/// Triples one prediction over `models` consumes, in order.
pub fn prediction_plan(models: &[RegisteredModel]) -> Result<Vec<TripleShape>> {
    let mut plan = Vec::new();
    for m in models {
        plan.extend(m.spec.triple_plan()?);
    }
    Ok(plan)
}

/// Runs the reconstructor on shared input, layer by layer.
pub fn private_reconstruct(
    party: &mut Party,
    spec: &ReconstructorSpec,
    weights: &WeightShares,
    image: &ShareTensor,
    triples: &mut TripleQueue,
) -> Result<ShareTensor> {
    if weights.owner != party.role {
        return Err(Error::OwnerMismatch(format!("{} holds weight shares of {}", party.role, weights.owner)));
    }
    if image.shape() != spec.input_shape.as_slice() {
        return Err(Error::ShapeMismatch(format!("image {:?}, model wants {:?}", image.shape(), spec.input_shape)));
    }
    let session = party.session();
    let mut kernels = weights.kernels.iter().zip(&weights.biases);
    let geoms = spec.conv_geometries()?;
    let mut geom = geoms.iter();
    let mut cur = image.clone().rebind(session);
    for l in &spec.layers {
        cur = match l.kind {
            LayerKind::Upsample => upsample_nn(&cur, l.stride)?,
            LayerKind::Conv => {
                let (k, b) = kernels.next().ok_or_else(|| Error::ShapeMismatch("fewer weight shares than convs".into()))?;
                let g = geom.next().unwrap();
                let t = triples.take(g.triple_shape())?;
                let k = k.clone().rebind(session);
                let b = b.clone().map(|b| b.rebind(session));
                let y = secure_conv(party, &cur, &k, b.as_ref(), l.stride, l.padding, &t)?;
                match l.activation {
                    Activation::Lrelu => eval_lrelu(party, &y, l.alpha_shift)?,
                    Activation::None => y,
                }
            }
        };
    }
    Ok(cur)
}

/// Share of `Σ (x - x̄)²`, truncated once after summing.
pub fn secure_dissimilarity(party: &mut Party, x: &ShareTensor, xbar: &ShareTensor, triple: &BeaverTriple) -> Result<ShareTensor> {
    let n = x.len();
    if xbar.shape() != x.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", x.shape(), xbar.shape())));
    }
    let o = local_sub(&x.clone().reshape(vec![n])?, &xbar.clone().reshape(vec![n])?)?;
    let sq = secure_mul(party, &o, &o, triple)?;
    let p = party.params;
    let sum = sq.data().iter().fold(0u64, |a, &v| p.add(a, v));
    let d = sq.with_data(vec![sum], vec![1])?;
    Ok(truncate_product(party, &d))
}

fn model_dissimilarity(party: &mut Party, model: &RegisteredModel, image: &ShareTensor, mut triples: TripleQueue) -> Result<ShareTensor> {
    let image = image.clone().rebind(party.session());
    let xbar = private_reconstruct(party, &model.spec, &model.weights, &image, &mut triples)?;
    let t = triples.take(TripleShape::Elementwise { len: image.len() })?;
    secure_dissimilarity(party, &image, &xbar, &t)
}

fn model_rng(seed: [u8; 32], index: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::from_seed(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn check_models(party: &Party, models: &[RegisteredModel]) -> Result<()> {
    if models.is_empty() {
        return Err(Error::Usage("prediction needs at least one registered model".into()));
    }
    for m in models {
        if m.spec.params != party.params {
            return Err(Error::ParamsMismatch(format!("model of user {} uses another ring", m.user_id)));
        }
    }
    Ok(())
}

/// Sequential prediction on the party's single channel.
pub fn predict(party: &mut Party, models: &[RegisteredModel], req: &PredictionRequest, triples: &mut TripleQueue) -> Result<PredictionResult> {
    predict_lanes(party, models, req, triples, None)
}

/// Prediction with each reconstructor on its own lane and thread; the
/// final circuit runs on the party's main channel after all lanes finish.
/// Gives the same result as [`predict`] for the same seeds.
pub fn predict_parallel(
    party: &mut Party,
    lanes: Vec<Channel>,
    models: &[RegisteredModel],
    req: &PredictionRequest,
    triples: &mut TripleQueue,
) -> Result<(PredictionResult, Vec<Channel>)> {
    if lanes.len() != models.len() {
        return Err(Error::Usage(format!("{} lanes for {} models", lanes.len(), models.len())));
    }
    let mut lanes = Some(lanes);
    let r = predict_lanes(party, models, req, triples, Some(&mut lanes))?;
    Ok((r, lanes.unwrap_or_default()))
}

fn predict_lanes(
    party: &mut Party,
    models: &[RegisteredModel],
    req: &PredictionRequest,
    triples: &mut TripleQueue,
    lanes: Option<&mut Option<Vec<Channel>>>,
) -> Result<PredictionResult> {
    check_models(party, models)?;
    let queues = models.iter().map(|m| triples.split_plan(&m.spec.triple_plan()?)).collect::<Result<Vec<_>>>()?;
    let mut seed = [0u8; 32];
    party.rng.fill_bytes(&mut seed);
    let d_shares = match lanes {
        None => {
            let mut out = Vec::with_capacity(models.len());
            for (i, (m, q)) in models.iter().zip(queues).enumerate() {
                let mut sub = party.fork(None, model_rng(seed, i));
                let r = model_dissimilarity(&mut sub, m, &req.image, q);
                party.join(sub, true);
                out.push(r?);
            }
            out
        }
        Some(slot) => {
            let chans = slot.take().unwrap();
            let subs: Vec<Party> = chans.into_iter().enumerate().map(|(i, c)| party.fork(Some(c), model_rng(seed, i))).collect();
            let results: Vec<(Party, Result<ShareTensor>)> = std::thread::scope(|s| {
                let handles: Vec<_> = subs
                    .into_iter()
                    .zip(models.iter().zip(queues))
                    .map(|(mut sub, (m, q))| {
                        let image = &req.image;
                        s.spawn(move || {
                            let r = model_dissimilarity(&mut sub, m, image, q);
                            if r.is_err() {
                                sub.chan.abort("sub-session failed");
                            }
                            (sub, r)
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("sub-session thread panicked")).collect()
            });
            let mut out = Vec::with_capacity(models.len());
            let mut back = Vec::with_capacity(models.len());
            let mut first_err = None;
            for (sub, r) in results {
                back.extend(party.join(sub, false));
                match r {
                    Ok(d) => out.push(d),
                    Err(e) => {
                        first_err.get_or_insert(e);
                    }
                }
            }
            *slot = Some(back);
            if let Some(e) = first_err {
                return Err(e);
            }
            out
        }
    };
    let session = party.session();
    let p = party.params;
    let d_words: Vec<u64> = d_shares.iter().map(|d| d.data()[0]).collect();
    let mut tau_words = Vec::with_capacity(models.len());
    for m in models {
        let t = m.tau.as_ref().or(req.tau.as_ref()).ok_or_else(|| Error::Usage(format!("no threshold for user {}", m.user_id)))?;
        if t.len() != 1 {
            return Err(Error::ShapeMismatch(format!("threshold share of shape {:?}", t.shape())));
        }
        tau_words.push(t.data()[0]);
    }
    let n = models.len();
    let d = ShareTensor::new(d_words, vec![n], party.role, session, p)?;
    let tau = ShareTensor::new(tau_words, vec![n], party.role, session, p)?;
    let dissimilarities = if party.config.reveal_dissimilarities { Some(open_dissimilarities(party, &d)?) } else { None };
    let (index, flag) = secure_argmin(party, &d, &tau)?;
    let outcome = if flag { Outcome::Class(models[index].user_id) } else { Outcome::None };
    Ok(PredictionResult { outcome, decision: Decision::from_outcome(outcome, req.uploader), index, flag, dissimilarities })
}

/// Test-only debugging aid: opens every dissimilarity to both parties.
fn open_dissimilarities(party: &mut Party, d: &ShareTensor) -> Result<Vec<f64>> {
    let theirs = match party.role {
        PartyId::S1 => {
            send_shares(&mut party.chan, d)?;
            recv_shares(&mut party.chan, d)?
        }
        PartyId::S2 => {
            let t = recv_shares(&mut party.chan, d)?;
            send_shares(&mut party.chan, d)?;
            t
        }
    };
    party.audit.opened_dissimilarities += d.len();
    let open = reconstruct(d, &theirs)?;
    Ok(open.data().iter().map(|&v| decode(RingElement(v), party.params)).collect())
}
