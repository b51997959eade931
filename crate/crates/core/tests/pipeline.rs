use std::time::Duration;

use pvmpc_core::beaver::{deal_triples, TripleShape};
use pvmpc_core::fixedpoint::{decode, RingElement, RingParams, RingTensor};
use pvmpc_core::garbled::ot::OtConfig;
use pvmpc_core::inference::{private_reconstruct, secure_dissimilarity, Decision, Outcome};
use pvmpc_core::model::{
    desk_manifest, encode_image, quantize_weights, random_float_weights, share_weights, Activation, FloatLayer, LayerSpec, Manifest, NORMALIZATION,
};
use pvmpc_core::net::channel::Channel;
use pvmpc_core::net::loopback::{run_loopback, RunConfig};
use pvmpc_core::net::party::{ActivationMode, Party, PartyConfig};
use pvmpc_core::net::transport::mem_pair;
use pvmpc_core::oracle::{oracle_dissimilarity, oracle_forward, oracle_predict, Truncation};
use pvmpc_core::scenario::{build_scenario, ClearModel, Scenario};
use pvmpc_core::sharing::{reconstruct, share, PartyId, ShareTensor};
use pvmpc_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn config() -> PartyConfig {
    PartyConfig { ot: OtConfig::test(), ..PartyConfig::default() }
}

fn run_pair<T: Send>(
    params: RingParams,
    cfg: PartyConfig,
    f1: impl FnOnce(&mut Party) -> T + Send,
    f2: impl FnOnce(&mut Party) -> T + Send,
) -> (T, T, Party) {
    let (a, b) = mem_pair(Duration::from_secs(60));
    let mut p1 = Party::new(PartyId::S1, params, Channel::new(Box::new(a), 9), ChaCha20Rng::seed_from_u64(11), cfg);
    let mut p2 = Party::new(PartyId::S2, params, Channel::new(Box::new(b), 9), ChaCha20Rng::seed_from_u64(12), cfg);
    p1.trunc_log = Some(Vec::new());
    let (r1, r2) = std::thread::scope(|s| {
        let h = s.spawn(|| f2(&mut p2));
        let r1 = f1(&mut p1);
        (r1, h.join().unwrap())
    });
    (r1, r2, p1)
}

fn random_image(rng: &mut ChaCha20Rng, p: RingParams) -> RingTensor {
    let px: Vec<u8> = (0..256).map(|_| rng.gen()).collect();
    encode_image(&px, vec![16, 16, 1], p).unwrap()
}

fn reconstruct_and_score(
    party: &mut Party,
    spec: &pvmpc_core::model::ReconstructorSpec,
    w: &pvmpc_core::model::WeightShares,
    x: &ShareTensor,
    q: &mut pvmpc_core::beaver::TripleQueue,
) -> (ShareTensor, ShareTensor) {
    let xb = private_reconstruct(party, spec, w, x, q).unwrap();
    let tr = q.take(TripleShape::Elementwise { len: x.len() }).unwrap();
    let x = x.clone().rebind(party.session());
    let d = secure_dissimilarity(party, &x, &xb, &tr).unwrap();
    (xb, d)
}

fn reconstruct_bit_exact(mode: ActivationMode, seed: u64) {
    let p = RingParams::default();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let m = desk_manifest(1, p);
    let spec = m.spec().unwrap();
    let ws = quantize_weights(&spec, &random_float_weights(&spec, 0.5, &mut rng), 1, [0; 32]).unwrap();
    let x = random_image(&mut rng, p);
    let (w1, w2) = share_weights(&ws, p, &mut rng).unwrap();
    let (x1, x2) = share(&x, p, 0, &mut rng).unwrap();
    let plan = spec.triple_plan().unwrap();
    let (t1, t2) = deal_triples(&plan, 1, p, &mut rng).unwrap();
    let cfg = PartyConfig { activation: mode, ..config() };
    let (mut q1, mut q2) = (t1.take_slot(0).unwrap(), t2.take_slot(0).unwrap());
    let ((xb1, d1), (xb2, d2), p1) = run_pair(
        p,
        cfg,
        |party| reconstruct_and_score(party, &spec, &w1, &x1, &mut q1),
        |party| reconstruct_and_score(party, &spec, &w2, &x2, &mut q2),
    );
    let mut t = Truncation::lockstep(p1.trunc_log.unwrap());
    let layers = oracle_forward(&spec, &ws, &x, mode, &mut t).unwrap();
    assert_eq!(&reconstruct(&xb1, &xb2).unwrap(), layers.last().unwrap());
    let d = oracle_dissimilarity(&x, layers.last().unwrap(), p, &mut t).unwrap();
    assert_eq!(reconstruct(&d1, &d2).unwrap().data(), &[d]);
    assert_eq!(t.remaining(), 0);
}

#[test]
fn desk_reconstruction_is_bit_exact_against_lockstep_oracle() {
    reconstruct_bit_exact(ActivationMode::Shift, 1);
}

#[test]
fn local_scale_activation_is_bit_exact_against_lockstep_oracle() {
    reconstruct_bit_exact(ActivationMode::LocalScale, 2);
}

fn tiny_manifest(user_id: u32, layers: Vec<LayerSpec>, input: Vec<usize>) -> Manifest {
    Manifest { format_version: 1, user_id, k: 64, f: 16, normalization: NORMALIZATION.into(), input_shape: input, layers }
}

#[test]
fn identity_model_reconstructs_input_and_zero_image_stays_zero() {
    let p = RingParams::default();
    let m = tiny_manifest(1, vec![LayerSpec::conv([1, 1, 1, 1], 1, Activation::None)], vec![4, 4, 1]);
    let spec = m.spec().unwrap();
    let ws = quantize_weights(&spec, &[FloatLayer { kernel: vec![1.0], bias: None }], 1, [0; 32]).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    for x in
        [RingTensor::encode_slice(vec![4, 4, 1], &(0..16).map(|i| i as f64 / 16.0).collect::<Vec<_>>(), p).unwrap(), RingTensor::zeros(vec![4, 4, 1])]
    {
        let (w1, w2) = share_weights(&ws, p, &mut rng).unwrap();
        let (x1, x2) = share(&x, p, 0, &mut rng).unwrap();
        let (t1, t2) = deal_triples(&spec.triple_plan().unwrap(), 1, p, &mut rng).unwrap();
        let (mut q1, mut q2) = (t1.take_slot(0).unwrap(), t2.take_slot(0).unwrap());
        let (a, b, _) = run_pair(
            p,
            config(),
            |party| private_reconstruct(party, &spec, &w1, &x1, &mut q1).unwrap(),
            |party| private_reconstruct(party, &spec, &w2, &x2, &mut q2).unwrap(),
        );
        assert_eq!(reconstruct(&a, &b).unwrap(), x);
    }
}

fn dissimilarity_of(x: &RingTensor, y: &RingTensor, p: RingParams, rng: &mut ChaCha20Rng) -> (u64, u64) {
    let n = x.len();
    let (x1, x2) = share(x, p, 0, rng).unwrap();
    let (y1, y2) = share(y, p, 0, rng).unwrap();
    let shape = TripleShape::Elementwise { len: n };
    let (t1, t2) = deal_triples(&[shape], 1, p, rng).unwrap();
    let (ta, tb) = (t1.take_triple(shape).unwrap(), t2.take_triple(shape).unwrap());
    let (a, b, p1) = run_pair(
        p,
        config(),
        |party| secure_dissimilarity(party, &x1.clone().rebind(9), &y1.clone().rebind(9), &ta).unwrap(),
        |party| secure_dissimilarity(party, &x2.clone().rebind(9), &y2.clone().rebind(9), &tb).unwrap(),
    );
    let got = reconstruct(&a, &b).unwrap().data()[0];
    let want = oracle_dissimilarity(x, y, p, &mut Truncation::lockstep(p1.trunc_log.unwrap())).unwrap();
    (got, want)
}

#[test]
fn dissimilarity_examples() {
    let p = RingParams::default();
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let x = RingTensor::encode_slice(vec![8, 8, 1], &(0..64).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<_>>(), p).unwrap();
    assert_eq!(dissimilarity_of(&x, &x, p, &mut rng).0, 0);
    let a = RingTensor::encode_slice(vec![1], &[0.75], p).unwrap();
    let b = RingTensor::encode_slice(vec![1], &[0.25], p).unwrap();
    let (got, _) = dissimilarity_of(&a, &b, p, &mut rng);
    assert_eq!(decode(RingElement(got), p), 0.25);
    for _ in 0..20 {
        let y = RingTensor::encode_slice(vec![8, 8, 1], &(0..64).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<_>>(), p).unwrap();
        let (got, want) = dissimilarity_of(&x, &y, p, &mut rng);
        assert_eq!(got, want);
    }
}

fn run_cfg(seed: u64) -> RunConfig {
    RunConfig { party: config(), seed: Some(seed), lockstep: true, timeout: Duration::from_secs(60), ..RunConfig::default() }
}

fn check_against_oracle(sc: &Scenario, cfg: &RunConfig) -> (Outcome, Decision) {
    let (r1, r2) = run_loopback(&sc.s1, &sc.s2, cfg);
    let (o1, o2) = (r1.unwrap(), r2.unwrap());
    assert_eq!(o1.result, o2.result);
    let mut t = Truncation::lockstep(o1.trunc_log.clone().unwrap());
    let want = oracle_predict(&sc.oracle_models, &sc.image, sc.tau, sc.uploader, cfg.party.activation, &mut t).unwrap();
    assert_eq!((o1.result.outcome, o1.result.decision, o1.result.index, o1.result.flag), (want.outcome, want.decision, want.index, want.flag));
    (o1.result.outcome, o1.result.decision)
}

/// Zero kernels with a constant bias on the output layer, so the
/// reconstruction is the constant image `c`.
fn constant_model(user_id: u32, c: f64) -> ClearModel {
    let mut m = desk_manifest(user_id, RingParams::default());
    m.layers.last_mut().unwrap().bias = true;
    let spec = m.spec().unwrap();
    let mut fw: Vec<FloatLayer> =
        spec.weight_shapes().into_iter().map(|(k, _)| FloatLayer { kernel: vec![0.0; k.iter().product()], bias: None }).collect();
    fw.last_mut().unwrap().bias = Some(vec![c]);
    let hash = pvmpc_core::model::manifest_hash(&m.to_json().unwrap());
    ClearModel::from_manifest(&m, quantize_weights(&spec, &fw, user_id, hash).unwrap(), None).unwrap()
}

#[test]
fn single_model_own_image_is_allowed() {
    let p = RingParams::default();
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let image = encode_image(&[128; 256], vec![16, 16, 1], p).unwrap();
    let sc = build_scenario(&[constant_model(1, 0.5)], &image, Some(1.0), 1, 1, &mut rng).unwrap();
    assert_eq!(check_against_oracle(&sc, &run_cfg(1)), (Outcome::Class(1), Decision::Allow));
}

#[test]
fn best_foreign_reconstructor_blocks() {
    let p = RingParams::default();
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let image = encode_image(&[153; 256], vec![16, 16, 1], p).unwrap();
    let models = [constant_model(1, 0.0), constant_model(2, 0.6), constant_model(3, 0.1)];
    let sc = build_scenario(&models, &image, Some(1.0), 1, 1, &mut rng).unwrap();
    assert_eq!(check_against_oracle(&sc, &run_cfg(2)), (Outcome::Class(2), Decision::Block));
}

#[test]
fn zero_threshold_gives_none() {
    let p = RingParams::default();
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let image = random_image(&mut rng, p);
    let models: Vec<ClearModel> = (1..=3).map(|u| ClearModel::random(&desk_manifest(u, p), 0.3, &mut rng).unwrap()).collect();
    let sc = build_scenario(&models, &image, Some(0.0), 2, 1, &mut rng).unwrap();
    assert_eq!(check_against_oracle(&sc, &run_cfg(3)), (Outcome::None, Decision::Allow));
}

#[test]
fn per_user_threshold_overrides_global() {
    let p = RingParams::default();
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let image = encode_image(&[153; 256], vec![16, 16, 1], p).unwrap();
    let mut best = constant_model(2, 0.55);
    best.tau = Some(0.5);
    let sc = build_scenario(&[constant_model(1, 0.0), best], &image, Some(100.0), 1, 1, &mut rng).unwrap();
    assert_eq!(check_against_oracle(&sc, &run_cfg(4)), (Outcome::None, Decision::Allow));
}

#[test]
fn random_instances_match_oracle() {
    let p = RingParams::default();
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    for i in 0..4 {
        let n = rng.gen_range(1..=4);
        let models: Vec<ClearModel> = (1..=n).map(|u| ClearModel::random(&desk_manifest(u, p), 0.4, &mut rng).unwrap()).collect();
        let image = random_image(&mut rng, p);
        let sc = build_scenario(&models, &image, Some(rng.gen_range(0.0..60.0)), rng.gen_range(1..=n), 1, &mut rng).unwrap();
        check_against_oracle(&sc, &run_cfg(10 + i));
    }
}

#[test]
fn parallel_lanes_give_sequential_result() {
    let p = RingParams::default();
    let mut rng = ChaCha20Rng::seed_from_u64(10);
    let models: Vec<ClearModel> = (1..=3).map(|u| ClearModel::random(&desk_manifest(u, p), 0.4, &mut rng).unwrap()).collect();
    let image = random_image(&mut rng, p);
    let sc = build_scenario(&models, &image, Some(40.0), 1, 2, &mut rng).unwrap();
    let seq = run_cfg(20);
    let par = RunConfig { parallel: true, slot: 1, ..run_cfg(20) };
    let (a, _) = run_loopback(&sc.s1, &sc.s2, &seq);
    let (b, _) = run_loopback(&sc.s1, &sc.s2, &par);
    let (a, b) = (a.unwrap(), b.unwrap());
    assert_eq!(a.result, b.result);
    assert_eq!(a.triples_consumed, b.triples_consumed);
    assert_eq!(a.trunc_log.unwrap().len(), b.trunc_log.unwrap().len());
}

#[test]
fn debug_flag_opens_dissimilarities_only_when_set() {
    let p = RingParams::default();
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let image = encode_image(&[153; 256], vec![16, 16, 1], p).unwrap();
    let sc = build_scenario(&[constant_model(1, 0.0), constant_model(2, 0.6)], &image, Some(1.0), 1, 2, &mut rng).unwrap();
    let (plain, _) = run_loopback(&sc.s1, &sc.s2, &run_cfg(30));
    let plain = plain.unwrap();
    assert!(plain.result.dissimilarities.is_none());
    assert_eq!(plain.audit.opened_dissimilarities, 0);
    let mut cfg = run_cfg(31);
    cfg.slot = 1;
    cfg.party.reveal_dissimilarities = true;
    let (dbg, _) = run_loopback(&sc.s1, &sc.s2, &cfg);
    let dbg = dbg.unwrap();
    let d = dbg.result.dissimilarities.unwrap();
    assert!((d[0] - 256.0 * 0.36).abs() < 0.01, "{d:?}");
    assert!(d[1].abs() < 0.01, "{d:?}");
    assert_eq!(dbg.audit.opened_dissimilarities, 2);
}

#[test]
fn exhausted_slot_and_owner_mismatch_are_errors() {
    let p = RingParams::default();
    let mut rng = ChaCha20Rng::seed_from_u64(12);
    let image = random_image(&mut rng, p);
    let sc = build_scenario(&[constant_model(1, 0.5)], &image, Some(1.0), 1, 1, &mut rng).unwrap();
    let (a, _) = run_loopback(&sc.s1, &sc.s2, &run_cfg(40));
    a.unwrap();
    let (a, b) = run_loopback(&sc.s1, &sc.s2, &run_cfg(41));
    assert!(matches!(a, Err(Error::TripleExhausted(_))), "{a:?}");
    assert!(b.is_err());
    let sc = build_scenario(&[constant_model(1, 0.5)], &image, Some(1.0), 1, 1, &mut rng).unwrap();
    let mut swapped = sc.s1.clone();
    swapped.models[0].weights = sc.s2.models[0].weights.clone();
    let (a, _) = run_loopback(&swapped, &sc.s2, &run_cfg(42));
    assert!(matches!(a, Err(Error::OwnerMismatch(_))), "{a:?}");
}

#[test]
fn oracle_outcome_uses_lowest_index_on_ties() {
    let p = RingParams::default();
    let mut rng = ChaCha20Rng::seed_from_u64(13);
    let image = encode_image(&[100; 256], vec![16, 16, 1], p).unwrap();
    let sc = build_scenario(&[constant_model(4, 0.2), constant_model(5, 0.2)], &image, Some(50.0), 5, 1, &mut rng).unwrap();
    assert_eq!(check_against_oracle(&sc, &run_cfg(50)), (Outcome::Class(4), Decision::Block));
}
