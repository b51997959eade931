//! Both parties of a prediction in one process over in-memory pipes, with
//! optional fault injection. Used by tests, the CLI `--local` mode and the
//! Python bindings.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::beaver::TripleStore;
use crate::error::{Error, Result};
use crate::inference::{predict, predict_parallel, PredictionRequest, PredictionResult, RegisteredModel};
use crate::net::channel::{Channel, TrafficStats};
use crate::net::party::{Audit, Party, PartyConfig};
use crate::net::session::{accept_handshake, handshake, SessionState};
use crate::net::transport::{mem_pair, Fault, FaultyTransport, Transport, DEFAULT_TIMEOUT};
use crate::sharing::{reconstruct_calls, PartyId, SessionId};

/// One party's inputs to a prediction.
#[derive(Clone)]
pub struct PartyInput {
    pub models: Vec<RegisteredModel>,
    pub request: PredictionRequest,
    pub triples: Arc<TripleStore>,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub party: PartyConfig,
    pub session: SessionId,
    /// Triple slot s1 proposes.
    pub slot: u64,
    /// Seeds both generators; `None` draws from the OS.
    pub seed: Option<u64>,
    pub parallel: bool,
    /// Record s1's pre-truncation shares for the lockstep oracle.
    pub lockstep: bool,
    pub timeout: Duration,
    /// Fault applied to the outgoing frames of one party.
    pub fault: Option<(PartyId, Fault)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            party: PartyConfig::default(),
            session: 1,
            slot: 0,
            seed: None,
            parallel: false,
            lockstep: false,
            timeout: DEFAULT_TIMEOUT,
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PartyOutput {
    pub result: PredictionResult,
    /// Traffic this party sent and received after the handshake.
    pub online: TrafficStats,
    /// Bytes of triple material this prediction consumed.
    pub offline_bytes: u64,
    pub online_ms: f64,
    pub audit: Audit,
    /// `reconstruct` calls made by this party during the online phase.
    pub reconstruct_calls: u64,
    pub trunc_log: Option<Vec<Vec<u64>>>,
    pub triples_consumed: usize,
    pub state: SessionState,
}

fn add_stats(a: &mut TrafficStats, b: &TrafficStats) {
    a.frames_sent += b.frames_sent;
    a.bytes_sent += b.bytes_sent;
    a.frames_recv += b.frames_recv;
    a.bytes_recv += b.bytes_recv;
    for (x, y) in a.sent_by_type.iter_mut().zip(b.sent_by_type) {
        *x += y;
    }
}

/// Party seed derived from the run seed so s1 and s2 differ.
pub fn party_rng(seed: Option<u64>, role: PartyId) -> Result<ChaCha20Rng> {
    match seed {
        Some(s) => {
            let mut rng = ChaCha20Rng::seed_from_u64(s);
            rng.set_stream(role.as_u8() as u64);
            Ok(rng)
        }
        None => {
            let mut bytes = [0u8; 32];
            rand::RngCore::try_fill_bytes(&mut rand::rngs::OsRng, &mut bytes).map_err(|e| Error::Randomness(e.to_string()))?;
            Ok(ChaCha20Rng::from_seed(bytes))
        }
    }
}

/// Runs one party through handshake, offline loading and the online
/// prediction. On failure the peer is told to abort.
pub fn run_party(role: PartyId, chan: Channel, lanes: Vec<Channel>, input: &PartyInput, cfg: &RunConfig) -> Result<PartyOutput> {
    run_party_from(role, chan, None, lanes, input, cfg)
}

/// As [`run_party`]; with `hello` set, the peer's hello frame has already
/// been read from `chan`.
pub fn run_party_from(
    role: PartyId,
    mut chan: Channel,
    hello: Option<&[u8]>,
    lanes: Vec<Channel>,
    input: &PartyInput,
    cfg: &RunConfig,
) -> Result<PartyOutput> {
    let params = input.triples.params();
    let hashes: Vec<[u8; 32]> = input.models.iter().map(|m| m.manifest_hash).collect();
    let established = match hello {
        None => handshake(&mut chan, params, role, &hashes, cfg.slot),
        Some(h) => accept_handshake(&mut chan, h, params, role, &hashes),
    };
    let mut session = match established {
        Ok(s) => s,
        Err(e) => {
            chan.abort(&e.abort_payload());
            return Err(e);
        }
    };
    let mut party = Party::new(role, params, chan, party_rng(cfg.seed, role)?, cfg.party);
    let out = online(&mut party, &mut session, lanes, input, cfg);
    if let Err(e) = &out {
        party.chan.abort(&e.abort_payload());
        let _ = session.transition(SessionState::Aborted);
    }
    out
}

fn online(
    party: &mut Party,
    session: &mut crate::net::session::Session,
    lanes: Vec<Channel>,
    input: &PartyInput,
    cfg: &RunConfig,
) -> Result<PartyOutput> {
    session.transition(SessionState::OfflineLoaded)?;
    let slot = usize::try_from(session.slot).map_err(|_| Error::Usage("slot out of range".into()))?;
    let mut triples = input.triples.take_slot(slot)?;
    let total = triples.remaining();
    let offline_bytes: u64 = input.triples.plan().iter().map(|s| (s.words() * party.params.word_bytes()) as u64).sum();
    session.transition(SessionState::Online)?;
    let base = party.chan.stats();
    let calls = reconstruct_calls();
    let start = Instant::now();
    if cfg.lockstep {
        party.trunc_log = Some(Vec::new());
    }
    let (result, lane_stats) = if cfg.parallel {
        let base_lanes: Vec<TrafficStats> = lanes.iter().map(|l| l.stats()).collect();
        let (r, back) = predict_parallel(party, lanes, &input.models, &input.request, &mut triples)?;
        let stats: Vec<TrafficStats> = back.iter().zip(&base_lanes).map(|(l, b)| l.stats().since(b)).collect();
        (r, stats)
    } else {
        (predict(party, &input.models, &input.request, &mut triples)?, vec![])
    };
    let online_ms = start.elapsed().as_secs_f64() * 1e3;
    session.transition(SessionState::Done)?;
    let mut online = party.chan.stats().since(&base);
    for s in &lane_stats {
        add_stats(&mut online, s);
    }
    Ok(PartyOutput {
        result,
        online,
        offline_bytes,
        online_ms,
        audit: party.audit.clone(),
        reconstruct_calls: reconstruct_calls() - calls,
        trunc_log: party.trunc_log.take(),
        triples_consumed: total - triples.remaining(),
        state: session.state(),
    })
}

fn endpoint(t: impl Transport + 'static, role: PartyId, cfg: &RunConfig) -> Box<dyn Transport> {
    match cfg.fault {
        Some((r, f)) if r == role => Box::new(FaultyTransport::new(t, Some(f))),
        _ => Box::new(t),
    }
}

/// Runs s1 and s2 on two threads connected by in-memory pipes.
pub fn run_loopback(s1: &PartyInput, s2: &PartyInput, cfg: &RunConfig) -> (Result<PartyOutput>, Result<PartyOutput>) {
    let (a, b) = mem_pair(cfg.timeout);
    let c1 = Channel::new(endpoint(a, PartyId::S1, cfg), cfg.session);
    let c2 = Channel::new(endpoint(b, PartyId::S2, cfg), cfg.session);
    let (mut l1, mut l2) = (Vec::new(), Vec::new());
    if cfg.parallel {
        for _ in 0..s1.models.len() {
            let (a, b) = mem_pair(cfg.timeout);
            l1.push(Channel::new(Box::new(a), cfg.session));
            l2.push(Channel::new(Box::new(b), cfg.session));
        }
    }
    std::thread::scope(|s| {
        let h1 = s.spawn(|| run_party(PartyId::S1, c1, l1, s1, cfg));
        let h2 = s.spawn(|| run_party(PartyId::S2, c2, l2, s2, cfg));
        let r1 = h1.join().unwrap_or_else(|_| Err(Error::Channel("s1 panicked".into())));
        let r2 = h2.join().unwrap_or_else(|_| Err(Error::Channel("s2 panicked".into())));
        (r1, r2)
    })
}
