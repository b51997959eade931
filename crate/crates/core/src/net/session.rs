use crate::error::{Error, Result};
use crate::fixedpoint::RingParams;
use crate::net::channel::Channel;
use crate::net::codec::Reader;
use crate::net::frame::MsgType;
use crate::sharing::{PartyId, SessionId};

pub const PROTOCOL_VERSION: u16 = 1;
const HELLO_MAGIC: &[u8; 4] = b"PVHS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum SessionState {
    Handshake,
    OfflineLoaded,
    Online,
    Done,
    Aborted,
}

#[derive(Clone, Debug)]
pub struct Session {
    pub id: SessionId,
    pub params: RingParams,
    pub role: PartyId,
    pub model_hashes: Vec<[u8; 32]>,
    /// Triple slot chosen by s1 for this session; s2 adopts it.
    pub slot: u64,
    state: SessionState,
}

impl Session {
    pub fn state(&self) -> SessionState {
        self.state
    }

    /// Moves forward through handshake → offline-loaded → online → done.
    /// Abort is allowed from any state that has not finished.
    pub fn transition(&mut self, to: SessionState) -> Result<()> {
        let ok = match to {
            SessionState::Aborted => !matches!(self.state, SessionState::Done | SessionState::Aborted),
            SessionState::Handshake => false,
            _ => to as u8 == self.state as u8 + 1,
        };
        if !ok {
            return Err(Error::SessionState(format!("{:?} -> {:?}", self.state, to)));
        }
        self.state = to;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Hello {
    pub version: u16,
    pub params: (u8, u8),
    pub role: u8,
    pub slot: u64,
    pub hashes: Vec<[u8; 32]>,
}

impl Hello {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 2 + 3 + 8 + 4 + 32 * self.hashes.len());
        out.extend_from_slice(HELLO_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(self.params.0);
        out.push(self.params.1);
        out.push(self.role);
        out.extend_from_slice(&self.slot.to_le_bytes());
        out.extend_from_slice(&(self.hashes.len() as u32).to_le_bytes());
        for h in &self.hashes {
            out.extend_from_slice(h);
        }
        out
    }

    pub fn decode(payload: &[u8]) -> Result<Hello> {
        let mut r = Reader::new(payload);
        if r.take(4)? != HELLO_MAGIC {
            return Err(Error::Decode("bad handshake magic".into()));
        }
        let version = r.u16()?;
        let k = r.u8()?;
        let f = r.u8()?;
        let role = r.u8()?;
        let slot = r.u64()?;
        let n = r.u32()? as usize;
        if r.remaining() != n * 32 {
            return Err(Error::Decode("handshake hash list length mismatch".into()));
        }
        let hashes = (0..n).map(|_| r.take(32).map(|h| h.try_into().unwrap())).collect::<Result<Vec<_>>>()?;
        Ok(Hello { version, params: (k, f), role, slot, hashes })
    }
}

/// Slot value of a hello that only probes compatibility.
pub const PROBE_SLOT: u64 = u64::MAX;

fn our_hello(params: RingParams, role: PartyId, model_hashes: &[[u8; 32]], slot: u64) -> Hello {
    Hello { version: PROTOCOL_VERSION, params: (params.k() as u8, params.f() as u8), role: role.as_u8(), slot, hashes: model_hashes.to_vec() }
}

fn establish(chan: &Channel, params: RingParams, role: PartyId, model_hashes: &[[u8; 32]], slot: u64, theirs: &Hello) -> Session {
    let slot = if role == PartyId::S1 { slot } else { theirs.slot };
    Session { id: chan.session(), params, role, model_hashes: model_hashes.to_vec(), slot, state: SessionState::Handshake }
}

/// Exchanges hellos and checks that both sides run the same protocol
/// version, ring parameters and model manifests.
pub fn handshake(chan: &mut Channel, params: RingParams, role: PartyId, model_hashes: &[[u8; 32]], slot: u64) -> Result<Session> {
    let ours = our_hello(params, role, model_hashes, slot);
    chan.send(MsgType::Handshake, ours.encode())?;
    let theirs = Hello::decode(&chan.recv(MsgType::Handshake)?)?;
    check_hello(&ours, &theirs, role)?;
    Ok(establish(chan, params, role, model_hashes, slot, &theirs))
}

/// The answering side of [`handshake`] when the peer's hello has already
/// been read.
pub fn accept_handshake(chan: &mut Channel, theirs: &[u8], params: RingParams, role: PartyId, model_hashes: &[[u8; 32]]) -> Result<Session> {
    let ours = our_hello(params, role, model_hashes, 0);
    chan.send(MsgType::Handshake, ours.encode())?;
    let theirs = Hello::decode(theirs)?;
    check_hello(&ours, &theirs, role)?;
    Ok(establish(chan, params, role, model_hashes, 0, &theirs))
}

pub fn check_hello(ours: &Hello, theirs: &Hello, role: PartyId) -> Result<()> {
    if theirs.version != ours.version {
        return Err(Error::VersionMismatch { ours: ours.version, theirs: theirs.version });
    }
    if theirs.role != role.peer().as_u8() {
        return Err(Error::Usage(format!("peer claims role {} but {} expected", theirs.role, role.peer())));
    }
    if theirs.params != ours.params {
        return Err(Error::ParamsMismatch(format!(
            "local k={},f={}; peer k={},f={}",
            ours.params.0, ours.params.1, theirs.params.0, theirs.params.1
        )));
    }
    if theirs.hashes != ours.hashes {
        return Err(Error::ManifestMismatch(format!("{} local manifests vs {} from peer, contents differ", ours.hashes.len(), theirs.hashes.len())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::transport::mem_pair;
    use std::thread;
    use std::time::Duration;

    fn run(p1: RingParams, p2: RingParams, h1: Vec<[u8; 32]>, h2: Vec<[u8; 32]>) -> (Result<Session>, Result<Session>) {
        let (a, b) = mem_pair(Duration::from_secs(2));
        let t = thread::spawn(move || {
            let mut c = Channel::new(Box::new(b), 42);
            handshake(&mut c, p2, PartyId::S2, &h2, 0)
        });
        let mut c = Channel::new(Box::new(a), 42);
        let r1 = handshake(&mut c, p1, PartyId::S1, &h1, 17);
        (r1, t.join().unwrap())
    }

    #[test]
    fn identical_configs_establish() {
        let p = RingParams::default();
        let (a, b) = run(p, p, vec![[1; 32]], vec![[1; 32]]);
        let (a, b) = (a.unwrap(), b.unwrap());
        assert_eq!(a.id, 42);
        assert_eq!(b.slot, 17);
        assert_eq!(a.state(), SessionState::Handshake);
    }

    #[test]
    fn differing_f_is_params_mismatch() {
        let (a, b) = run(RingParams::new(64, 16).unwrap(), RingParams::new(64, 12).unwrap(), vec![], vec![]);
        assert!(matches!(a, Err(Error::ParamsMismatch(_))));
        assert!(matches!(b, Err(Error::ParamsMismatch(_))));
    }

    #[test]
    fn tampered_manifest_hash_detected() {
        let mut flipped = [7u8; 32];
        for bit in 0..256 {
            flipped[bit / 8] ^= 1 << (bit % 8);
            let p = RingParams::default();
            let (a, b) = run(p, p, vec![[7; 32]], vec![flipped]);
            assert!(matches!(a, Err(Error::ManifestMismatch(_))));
            assert!(matches!(b, Err(Error::ManifestMismatch(_))));
            flipped[bit / 8] ^= 1 << (bit % 8);
        }
    }

    #[test]
    fn version_mismatch() {
        let ours = Hello { version: 1, params: (64, 16), role: 1, slot: 0, hashes: vec![] };
        let theirs = Hello { version: 2, role: 2, ..ours.clone() };
        assert!(matches!(check_hello(&ours, &theirs, PartyId::S1), Err(Error::VersionMismatch { .. })));
        assert_eq!(Hello::decode(&theirs.encode()).unwrap(), theirs);
    }

    #[test]
    fn state_only_moves_forward() {
        let mut s =
            Session { id: 0, params: RingParams::default(), role: PartyId::S1, model_hashes: vec![], slot: 0, state: SessionState::Handshake };
        assert!(s.transition(SessionState::Online).is_err());
        s.transition(SessionState::OfflineLoaded).unwrap();
        s.transition(SessionState::Online).unwrap();
        assert!(s.transition(SessionState::OfflineLoaded).is_err());
        s.transition(SessionState::Done).unwrap();
        assert!(s.transition(SessionState::Aborted).is_err());
    }
}
