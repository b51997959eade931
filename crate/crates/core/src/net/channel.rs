use crate::error::{Error, Result};
use crate::net::frame::{Frame, MsgType, FRAME_OVERHEAD};
use crate::net::transport::Transport;
use crate::sharing::SessionId;

/// Byte and frame counters for one direction pair of a channel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrafficStats {
    pub frames_sent: u64,
    pub bytes_sent: u64,
    pub frames_recv: u64,
    pub bytes_recv: u64,
    /// Bytes sent per message type, indexed by the type byte.
    pub sent_by_type: [u64; 16],
}

impl TrafficStats {
    pub fn since(&self, earlier: &TrafficStats) -> TrafficStats {
        let mut by_type = [0u64; 16];
        for (i, slot) in by_type.iter_mut().enumerate() {
            *slot = self.sent_by_type[i] - earlier.sent_by_type[i];
        }
        TrafficStats {
            frames_sent: self.frames_sent - earlier.frames_sent,
            bytes_sent: self.bytes_sent - earlier.bytes_sent,
            frames_recv: self.frames_recv - earlier.frames_recv,
            bytes_recv: self.bytes_recv - earlier.bytes_recv,
            sent_by_type: by_type,
        }
    }
}

/// A framed, sequenced, per-session channel to the peer.
///
/// Sequence numbers start at zero in each direction and must arrive
/// strictly consecutively; any gap, repeat, or foreign session id aborts.
pub struct Channel {
    transport: Box<dyn Transport>,
    session: SessionId,
    send_seq: u64,
    recv_seq: u64,
    stats: TrafficStats,
}

impl Channel {
    pub fn new(transport: Box<dyn Transport>, session: SessionId) -> Self {
        Channel { transport, session, send_seq: 0, recv_seq: 0, stats: TrafficStats::default() }
    }

    pub fn session(&self) -> SessionId {
        self.session
    }

    pub fn stats(&self) -> TrafficStats {
        self.stats
    }

    pub fn send(&mut self, msg_type: MsgType, payload: Vec<u8>) -> Result<()> {
        let frame = Frame { msg_type, session: self.session, seq: self.send_seq, payload };
        let bytes = frame.encode();
        self.stats.frames_sent += 1;
        self.stats.bytes_sent += bytes.len() as u64;
        self.stats.sent_by_type[msg_type as usize] += bytes.len() as u64;
        self.send_seq += 1;
        self.transport.send_frame(bytes)
    }

    fn read_frame(&mut self) -> Result<Frame> {
        let mut prefix = [0u8; 4];
        self.transport.recv_exact(&mut prefix)?;
        let len = Frame::body_len(prefix)?;
        let mut body = vec![0u8; len];
        self.transport.recv_exact(&mut body)?;
        let frame = Frame::decode(prefix, &body)?;
        self.stats.frames_recv += 1;
        self.stats.bytes_recv += (len + 4) as u64;
        Ok(frame)
    }

    /// Receives the next frame of any type (abort frames become errors).
    pub fn recv_any(&mut self) -> Result<Frame> {
        let frame = self.read_frame()?;
        if frame.session != self.session {
            return Err(Error::SessionMismatch { left: self.session, right: frame.session });
        }
        if frame.seq != self.recv_seq {
            return Err(Error::SequenceGap { expected: self.recv_seq, got: frame.seq });
        }
        self.recv_seq += 1;
        if frame.msg_type == MsgType::Abort {
            return Err(Error::PeerAborted(String::from_utf8_lossy(&frame.payload).into_owned()));
        }
        Ok(frame)
    }

    pub fn recv(&mut self, expected: MsgType) -> Result<Vec<u8>> {
        let frame = self.recv_any()?;
        if frame.msg_type != expected {
            return Err(Error::Decode(format!("expected {expected:?}, got {:?}", frame.msg_type)));
        }
        Ok(frame.payload)
    }

    /// Reads the first frame of an incoming connection and adopts its
    /// session id.
    pub fn accept_first(&mut self) -> Result<Frame> {
        let frame = self.read_frame()?;
        if frame.seq != 0 {
            return Err(Error::SequenceGap { expected: 0, got: frame.seq });
        }
        self.session = frame.session;
        self.recv_seq = 1;
        if frame.msg_type == MsgType::Abort {
            return Err(Error::PeerAborted(String::from_utf8_lossy(&frame.payload).into_owned()));
        }
        Ok(frame)
    }

    /// Best-effort abort notification; errors are ignored because the
    /// channel is being torn down anyway.
    pub fn abort(&mut self, reason: &str) {
        let _ = self.send(MsgType::Abort, reason.as_bytes().to_vec());
    }

    pub fn frame_cost(payload_len: usize) -> u64 {
        (FRAME_OVERHEAD + payload_len) as u64
    }
}
