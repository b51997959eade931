//! Long-running s1/s2 endpoints over TCP and the client that submits a
//! prediction to both.
//!
//! A client opens one connection to each server and sends its image share
//! in a share-tensor frame under a fresh session id. s1 then connects to
//! s2 under the same id and the two run the prediction; each server
//! answers its client connection with a result frame (or an abort).

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::beaver::TripleStore;
use crate::error::{Error, Result};
use crate::fixedpoint::RingParams;
use crate::inference::{Decision, Outcome, PredictionRequest, RegisteredModel};
use crate::model::{load_server_models, ShareFile};
use crate::net::channel::Channel;
use crate::net::codec::Reader;
use crate::net::frame::MsgType;
use crate::net::loopback::{run_party_from, PartyInput, PartyOutput, RunConfig};
use crate::net::party::PartyConfig;
use crate::net::session::{handshake, Hello, PROBE_SLOT};
use crate::net::transport::TcpTransport;
use crate::sharing::{PartyId, SessionId, ShareTensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub offline_bytes: u64,
    pub online_bytes: u64,
    pub online_ms: f64,
}

/// The record `predict` prints and each server returns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub outcome: Outcome,
    pub decision: Decision,
    pub session: String,
    pub timings: Timings,
}

impl Report {
    /// One party's view: its own triple bytes and the bytes it sent.
    pub fn from_output(out: &PartyOutput, session: SessionId) -> Report {
        Report {
            outcome: out.result.outcome,
            decision: out.result.decision,
            session: format!("{session:032x}"),
            timings: Timings { offline_bytes: out.offline_bytes, online_bytes: out.online.bytes_sent, online_ms: out.online_ms },
        }
    }

    /// Joins both parties' reports; they must agree on the result.
    pub fn combine(a: &Report, b: &Report) -> Result<Report> {
        if (a.outcome, a.decision, &a.session) != (b.outcome, b.decision, &b.session) {
            return Err(Error::Decode(format!("servers disagree: {a:?} vs {b:?}")));
        }
        Ok(Report {
            timings: Timings {
                offline_bytes: a.timings.offline_bytes + b.timings.offline_bytes,
                online_bytes: a.timings.online_bytes + b.timings.online_bytes,
                online_ms: a.timings.online_ms.max(b.timings.online_ms),
            },
            ..a.clone()
        })
    }
}

/// Request payload: uploader id followed by a share file holding the image
/// and optionally the global threshold.
pub fn encode_request(uploader: u32, image: &ShareTensor, tau: Option<&ShareTensor>) -> Vec<u8> {
    let mut tensors = vec![image.clone()];
    tensors.extend(tau.cloned());
    let file = ShareFile { owner: image.owner(), params: image.params(), hash: [0; 32], tensors };
    let mut out = uploader.to_le_bytes().to_vec();
    out.extend(file.encode());
    out
}

pub fn decode_request(payload: &[u8], role: PartyId, params: RingParams, session: SessionId) -> Result<PredictionRequest> {
    let mut r = Reader::new(payload);
    let uploader = r.u32()?;
    let file = ShareFile::decode(&payload[4..])?;
    if file.owner != role {
        return Err(Error::OwnerMismatch(format!("{role} received shares of {}", file.owner)));
    }
    if file.params != params {
        return Err(Error::ParamsMismatch(format!("request ring k={},f={}", file.params.k(), file.params.f())));
    }
    let mut it = file.tensors.into_iter();
    let image = it.next().ok_or_else(|| Error::Decode("request without image".into()))?.rebind(session);
    let tau = it.next().map(|t| t.rebind(session));
    if tau.as_ref().is_some_and(|t| t.len() != 1) || it.next().is_some() {
        return Err(Error::Decode("malformed threshold in request".into()));
    }
    Ok(PredictionRequest { image, uploader, tau })
}

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub role: PartyId,
    pub params: RingParams,
    pub models: PathBuf,
    pub triples: Option<PathBuf>,
    pub listen: String,
    /// s2's address; s1 only.
    pub peer: Option<String>,
    pub party: PartyConfig,
    pub timeout: Duration,
    pub seed: Option<u64>,
}

struct Pending {
    request: PredictionRequest,
    client: Channel,
}

pub struct Server {
    cfg: ServerConfig,
    models: Vec<RegisteredModel>,
    store: Option<Arc<TripleStore>>,
    used_path: Option<PathBuf>,
    used: Mutex<HashSet<u64>>,
    pending: Mutex<HashMap<SessionId, Pending>>,
    arrived: Condvar,
}

fn used_slots_path(triples: &Path) -> PathBuf {
    let mut p = triples.as_os_str().to_owned();
    p.push(".used");
    PathBuf::from(p)
}

impl Server {
    pub fn load(cfg: ServerConfig) -> Result<Server> {
        let models: Vec<RegisteredModel> = load_server_models(&cfg.models, cfg.role)?
            .into_iter()
            .map(|m| RegisteredModel {
                user_id: m.manifest.user_id,
                spec: m.spec,
                manifest_hash: m.manifest_hash,
                weights: m.weights,
                tau: m.threshold,
            })
            .collect();
        for m in &models {
            if m.spec.params != cfg.params {
                return Err(Error::ParamsMismatch(format!("model of user {} uses k={},f={}", m.user_id, m.spec.params.k(), m.spec.params.f())));
            }
        }
        let (store, used_path, used) = match &cfg.triples {
            None if models.is_empty() => (None, None, HashSet::new()),
            None => return Err(Error::Usage("--triples is required when models are registered".into())),
            Some(path) => {
                let store = TripleStore::load(path, cfg.role)?;
                if store.params() != cfg.params {
                    return Err(Error::ParamsMismatch("triple file ring differs from the server's".into()));
                }
                let plan = crate::inference::prediction_plan(&models)?;
                if store.plan() != plan {
                    return Err(Error::ShapeMismatch("triple file was dealt for a different model set".into()));
                }
                let used_path = used_slots_path(path);
                let used: HashSet<u64> = match std::fs::read_to_string(&used_path) {
                    Ok(s) => s.lines().filter_map(|l| l.trim().parse().ok()).collect(),
                    Err(_) => HashSet::new(),
                };
                for &slot in &used {
                    let _ = store.take_slot(slot as usize);
                }
                (Some(Arc::new(store)), Some(used_path), used)
            }
        };
        Ok(Server { cfg, models, store, used_path, used: Mutex::new(used), pending: Mutex::new(HashMap::new()), arrived: Condvar::new() })
    }

    pub fn models(&self) -> &[RegisteredModel] {
        &self.models
    }

    fn hashes(&self) -> Vec<[u8; 32]> {
        self.models.iter().map(|m| m.manifest_hash).collect()
    }

    fn connect_peer(&self, session: SessionId) -> Result<Channel> {
        let addr = self.cfg.peer.as_deref().ok_or_else(|| Error::Usage("s1 needs --peer (or PRIVEDGE_PEER_ADDR)".into()))?;
        Ok(Channel::new(Box::new(TcpTransport::connect(addr, self.cfg.timeout)?), session))
    }

    /// s1 only: checks that s2 runs a compatible configuration.
    pub fn probe_peer(&self) -> Result<()> {
        let mut chan = self.connect_peer(0)?;
        match handshake(&mut chan, self.cfg.params, PartyId::S1, &self.hashes(), PROBE_SLOT) {
            Ok(_) => Ok(()),
            Err(e) => {
                chan.abort(&e.abort_payload());
                Err(e)
            }
        }
    }

    pub fn bind(&self) -> Result<TcpListener> {
        TcpListener::bind(&self.cfg.listen).map_err(|e| Error::Channel(format!("bind {}: {e}", self.cfg.listen)))
    }

    /// Accepts connections forever, one thread per connection.
    pub fn serve(self: Arc<Self>, listener: TcpListener) -> Result<()> {
        for stream in listener.incoming() {
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("accept failed: {e}");
                    continue;
                }
            };
            let me = Arc::clone(&self);
            std::thread::spawn(move || {
                if let Err(e) = me.handle(stream) {
                    eprintln!("{} session failed: class={} msg={e}", me.cfg.role, e.class());
                }
            });
        }
        Ok(())
    }

    fn handle(&self, stream: TcpStream) -> Result<()> {
        let mut chan = Channel::new(Box::new(TcpTransport::new(stream, self.cfg.timeout)?), 0);
        let first = chan.accept_first()?;
        let session = first.session;
        match (first.msg_type, self.cfg.role) {
            (MsgType::ShareTensor, PartyId::S1) => self.s1_request(chan, &first.payload, session),
            (MsgType::ShareTensor, PartyId::S2) => self.s2_request(chan, &first.payload, session),
            (MsgType::Handshake, PartyId::S2) => self.s2_session(chan, &first.payload, session),
            (t, _) => {
                let e = Error::Decode(format!("unexpected opening frame {t:?}"));
                chan.abort(&e.abort_payload());
                Err(e)
            }
        }
    }

    fn parse_request(&self, payload: &[u8], session: SessionId) -> Result<PredictionRequest> {
        if self.models.is_empty() {
            return Err(Error::Usage("no registered models".into()));
        }
        decode_request(payload, self.cfg.role, self.cfg.params, session)
    }

    fn run_config(&self, session: SessionId, slot: u64) -> RunConfig {
        RunConfig {
            party: self.cfg.party,
            session,
            slot,
            seed: self.cfg.seed.map(|s| s ^ slot.wrapping_mul(0x9e37_79b9_7f4a_7c15)),
            timeout: self.cfg.timeout,
            ..RunConfig::default()
        }
    }

    fn record_slot(&self, slot: u64) -> Result<()> {
        self.used.lock().unwrap().insert(slot);
        if let Some(p) = &self.used_path {
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(p)?;
            writeln!(f, "{slot}")?;
        }
        Ok(())
    }

    fn next_slot(&self) -> Result<u64> {
        let store = self.store.as_ref().ok_or_else(|| Error::Usage("no triples loaded".into()))?;
        let slot = {
            let used = self.used.lock().unwrap();
            (0..store.slots() as u64).find(|s| !used.contains(s))
        };
        let slot = slot.ok_or_else(|| Error::TripleExhausted("every dealt slot has been used".into()))?;
        self.record_slot(slot)?;
        Ok(slot)
    }

    fn input(&self, request: PredictionRequest) -> PartyInput {
        PartyInput { models: self.models.clone(), request, triples: Arc::clone(self.store.as_ref().unwrap()) }
    }

    fn reply(client: &mut Channel, out: Result<PartyOutput>, session: SessionId) -> Result<()> {
        match out {
            Ok(o) => {
                let report = Report::from_output(&o, session);
                client.send(MsgType::Result, serde_json::to_vec(&report)?)
            }
            Err(e) => {
                client.abort(&e.abort_payload());
                Err(e)
            }
        }
    }

    fn s1_request(&self, mut client: Channel, payload: &[u8], session: SessionId) -> Result<()> {
        let out = (|| {
            let request = self.parse_request(payload, session)?;
            let slot = self.next_slot()?;
            let peer = self.connect_peer(session)?;
            run_party_from(PartyId::S1, peer, None, vec![], &self.input(request), &self.run_config(session, slot))
        })();
        Self::reply(&mut client, out, session)
    }

    fn s2_request(&self, mut client: Channel, payload: &[u8], session: SessionId) -> Result<()> {
        let request = match self.parse_request(payload, session) {
            Ok(r) => r,
            Err(e) => return Self::reply(&mut client, Err(e), session),
        };
        let mut pending = self.pending.lock().unwrap();
        pending.insert(session, Pending { request, client });
        self.arrived.notify_all();
        let deadline = Instant::now() + self.cfg.timeout;
        while pending.contains_key(&session) {
            let now = Instant::now();
            if now >= deadline {
                let mut p = pending.remove(&session).unwrap();
                return Self::reply(&mut p.client, Err(Error::Channel("s1 never joined the session".into())), session);
            }
            pending = self.arrived.wait_timeout(pending, deadline - now).unwrap().0;
        }
        Ok(())
    }

    fn s2_session(&self, mut peer: Channel, hello: &[u8], session: SessionId) -> Result<()> {
        if Hello::decode(hello)?.slot == PROBE_SLOT {
            crate::net::session::accept_handshake(&mut peer, hello, self.cfg.params, PartyId::S2, &self.hashes())
                .inspect_err(|e| peer.abort(&e.abort_payload()))?;
            return Ok(());
        }
        let deadline = Instant::now() + self.cfg.timeout;
        let mut pending = self.pending.lock().unwrap();
        let p = loop {
            if let Some(p) = pending.remove(&session) {
                break p;
            }
            let now = Instant::now();
            if now >= deadline {
                let e = Error::Channel("client request never arrived".into());
                peer.abort(&e.abort_payload());
                return Err(e);
            }
            pending = self.arrived.wait_timeout(pending, deadline - now).unwrap().0;
        };
        self.arrived.notify_all();
        drop(pending);
        let Pending { request, mut client } = p;
        let slot = Hello::decode(hello)?.slot;
        let out = if self.used.lock().unwrap().contains(&slot) {
            let e = Error::TripleExhausted(format!("slot {slot} was already used"));
            peer.abort(&e.abort_payload());
            Err(e)
        } else {
            self.record_slot(slot)?;
            run_party_from(PartyId::S2, peer, Some(hello), vec![], &self.input(request), &self.run_config(session, slot))
        };
        Self::reply(&mut client, out, session)
    }
}

/// Submits one prediction to both servers and joins their reports.
pub fn submit(
    s1: &str,
    s2: &str,
    session: SessionId,
    uploader: u32,
    images: [&ShareTensor; 2],
    taus: Option<[&ShareTensor; 2]>,
    timeout: Duration,
) -> Result<Report> {
    let mut chans = Vec::with_capacity(2);
    for (i, addr) in [(1usize, s2), (0, s1)] {
        let mut c = Channel::new(Box::new(TcpTransport::connect(addr, timeout)?), session);
        c.send(MsgType::ShareTensor, encode_request(uploader, images[i], taus.map(|t| t[i])))?;
        chans.push(c);
    }
    let mut reports = Vec::with_capacity(2);
    let mut first_err = None;
    for mut c in chans.into_iter().rev() {
        match c.recv(MsgType::Result) {
            Ok(p) => reports.push(serde_json::from_slice::<Report>(&p)?),
            Err(Error::PeerAborted(msg)) => {
                first_err = Some(Error::from_abort(&msg));
                break;
            }
            Err(e) => {
                first_err = Some(e);
                break;
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    Report::combine(&reports[0], &reports[1])
}
