//! Builds both parties' inputs from cleartext models: shares weights,
//! image and thresholds, and deals the triples. Also yields the matching
//! oracle inputs.

use std::sync::Arc;

use rand::{CryptoRng, Rng, RngCore};

use crate::beaver::{deal_triples, TripleStore};
use crate::error::Result;
use crate::fixedpoint::{encode, RingParams, RingTensor};
use crate::inference::{PredictionRequest, RegisteredModel};
use crate::model::{quantize_weights, random_float_weights, share_weights, Manifest, ReconstructorSpec, WeightSet};
use crate::net::loopback::PartyInput;
use crate::oracle::OracleModel;
use crate::sharing::share;

#[derive(Clone, Debug)]
pub struct ClearModel {
    pub user_id: u32,
    pub spec: ReconstructorSpec,
    pub manifest_hash: [u8; 32],
    pub weights: WeightSet,
    pub tau: Option<f64>,
}

impl ClearModel {
    pub fn from_manifest(manifest: &Manifest, weights: WeightSet, tau: Option<f64>) -> Result<ClearModel> {
        let json = manifest.to_json()?;
        Ok(ClearModel { user_id: manifest.user_id, spec: manifest.spec()?, manifest_hash: crate::model::manifest_hash(&json), weights, tau })
    }

    /// Uniform weights in `[-scale, scale)`.
    pub fn random<R: Rng>(manifest: &Manifest, scale: f64, rng: &mut R) -> Result<ClearModel> {
        let spec = manifest.spec()?;
        let hash = crate::model::manifest_hash(&manifest.to_json()?);
        let fw = random_float_weights(&spec, scale, rng);
        let weights = quantize_weights(&spec, &fw, manifest.user_id, hash)?;
        ClearModel::from_manifest(manifest, weights, None)
    }
}

pub struct Scenario {
    pub s1: PartyInput,
    pub s2: PartyInput,
    pub oracle_models: Vec<OracleModel>,
    pub image: RingTensor,
    pub tau: Option<u64>,
    pub uploader: u32,
}

fn share_scalar<R: RngCore + CryptoRng>(
    v: f64,
    params: RingParams,
    rng: &mut R,
) -> Result<(crate::sharing::ShareTensor, crate::sharing::ShareTensor)> {
    let t = RingTensor::new(vec![1], vec![encode(v, params)?.0])?;
    share(&t, params, 0, rng)
}

/// Shares everything and deals `slots` predictions' worth of triples.
pub fn build_scenario<R: RngCore + CryptoRng>(
    models: &[ClearModel],
    image: &RingTensor,
    tau: Option<f64>,
    uploader: u32,
    slots: usize,
    rng: &mut R,
) -> Result<Scenario> {
    let params = models.first().map(|m| m.spec.params).unwrap_or_default();
    let (mut r1, mut r2) = (Vec::new(), Vec::new());
    let mut plan = Vec::new();
    let mut oracle_models = Vec::new();
    for m in models {
        let (w1, w2) = share_weights(&m.weights, params, rng)?;
        let (t1, t2) = match m.tau {
            Some(t) => {
                let (a, b) = share_scalar(t, params, rng)?;
                (Some(a), Some(b))
            }
            None => (None, None),
        };
        plan.extend(m.spec.triple_plan()?);
        let reg = |weights, tau| RegisteredModel { user_id: m.user_id, spec: m.spec.clone(), manifest_hash: m.manifest_hash, weights, tau };
        r1.push(reg(w1, t1));
        r2.push(reg(w2, t2));
        oracle_models.push(OracleModel {
            user_id: m.user_id,
            spec: m.spec.clone(),
            weights: m.weights.clone(),
            tau: m.tau.map(|t| encode(t, params).map(|e| e.0)).transpose()?,
        });
    }
    let (i1, i2) = share(image, params, 0, rng)?;
    let (g1, g2) = match tau {
        Some(t) => {
            let (a, b) = share_scalar(t, params, rng)?;
            (Some(a), Some(b))
        }
        None => (None, None),
    };
    let (ts1, ts2) = deal_triples(&plan, slots.max(1), params, rng)?;
    let input = |models, image, tau, triples: TripleStore| PartyInput {
        models,
        request: PredictionRequest { image, uploader, tau },
        triples: Arc::new(triples),
    };
    Ok(Scenario {
        s1: input(r1, i1, g1, ts1),
        s2: input(r2, i2, g2, ts2),
        oracle_models,
        image: image.clone(),
        tau: tau.map(|t| encode(t, params).map(|e| e.0)).transpose()?,
        uploader,
    })
}
