//! Reliable ordered byte transports: TCP, in-process pipes, and a
//! fault-injecting wrapper used by the robustness suite.

use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use rand::Rng;

use crate::error::{Error, Result};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

/// A reliable, ordered byte stream. Each `send_frame` call carries exactly
/// one encoded frame.
pub trait Transport: Send {
    fn send_frame(&mut self, bytes: Vec<u8>) -> Result<()>;
    fn recv_exact(&mut self, buf: &mut [u8]) -> Result<()>;
}

impl Transport for Box<dyn Transport> {
    fn send_frame(&mut self, bytes: Vec<u8>) -> Result<()> {
        (**self).send_frame(bytes)
    }
    fn recv_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        (**self).recv_exact(buf)
    }
}

pub struct TcpTransport {
    stream: TcpStream,
}

impl TcpTransport {
    pub fn new(stream: TcpStream, timeout: Duration) -> Result<Self> {
        stream.set_read_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;
        Ok(TcpTransport { stream })
    }

    pub fn connect(addr: &str, timeout: Duration) -> Result<Self> {
        let stream = TcpStream::connect(addr).map_err(|e| Error::Channel(format!("connect {addr}: {e}")))?;
        TcpTransport::new(stream, timeout)
    }
}

impl Transport for TcpTransport {
    fn send_frame(&mut self, bytes: Vec<u8>) -> Result<()> {
        self.stream.write_all(&bytes).map_err(|e| Error::Channel(e.to_string()))
    }

    fn recv_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.stream.read_exact(buf).map_err(|e| Error::Channel(e.to_string()))
    }
}

/// One end of an in-process duplex pipe.
pub struct MemTransport {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    pending: Vec<u8>,
    pos: usize,
    timeout: Duration,
}

/// A connected pair of in-process transports.
pub fn mem_pair(timeout: Duration) -> (MemTransport, MemTransport) {
    let (tx_a, rx_b) = channel();
    let (tx_b, rx_a) = channel();
    (
        MemTransport { tx: tx_a, rx: rx_a, pending: Vec::new(), pos: 0, timeout },
        MemTransport { tx: tx_b, rx: rx_b, pending: Vec::new(), pos: 0, timeout },
    )
}

impl Transport for MemTransport {
    fn send_frame(&mut self, bytes: Vec<u8>) -> Result<()> {
        self.tx.send(bytes).map_err(|_| Error::Channel("peer disconnected".into()))
    }

    fn recv_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        let mut filled = 0;
        while filled < buf.len() {
            if self.pos == self.pending.len() {
                self.pending = match self.rx.recv_timeout(self.timeout) {
                    Ok(chunk) => chunk,
                    Err(RecvTimeoutError::Timeout) => return Err(Error::Channel("receive timed out".into())),
                    Err(RecvTimeoutError::Disconnected) => return Err(Error::Channel("peer disconnected".into())),
                };
                self.pos = 0;
                continue;
            }
            let n = (buf.len() - filled).min(self.pending.len() - self.pos);
            buf[filled..filled + n].copy_from_slice(&self.pending[self.pos..self.pos + n]);
            filled += n;
            self.pos += n;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaultKind {
    Drop,
    Duplicate,
    /// Holds the frame back and delivers it after the next one.
    Reorder,
    /// Flips one bit at the given bit offset (modulo the frame size).
    BitFlip(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fault {
    pub kind: FaultKind,
    /// Index of the outgoing frame to tamper with.
    pub frame: usize,
}

impl Fault {
    pub fn random<R: Rng>(rng: &mut R, frames: usize) -> Fault {
        let frame = rng.gen_range(0..frames.max(1));
        let kind = match rng.gen_range(0..4) {
            0 => FaultKind::Drop,
            1 => FaultKind::Duplicate,
            2 => FaultKind::Reorder,
            _ => FaultKind::BitFlip(rng.gen()),
        };
        Fault { kind, frame }
    }
}

/// Applies one fault to the outgoing frame stream of the wrapped transport.
pub struct FaultyTransport<T: Transport> {
    inner: T,
    fault: Option<Fault>,
    sent: usize,
    held: Option<Vec<u8>>,
}

impl<T: Transport> FaultyTransport<T> {
    pub fn new(inner: T, fault: Option<Fault>) -> Self {
        FaultyTransport { inner, fault, sent: 0, held: None }
    }
}

impl<T: Transport> Transport for FaultyTransport<T> {
    fn send_frame(&mut self, mut bytes: Vec<u8>) -> Result<()> {
        let index = self.sent;
        self.sent += 1;
        let result = match self.fault {
            Some(f) if f.frame == index => match f.kind {
                FaultKind::Drop => Ok(()),
                FaultKind::Duplicate => {
                    self.inner.send_frame(bytes.clone())?;
                    self.inner.send_frame(bytes)
                }
                FaultKind::Reorder => {
                    self.held = Some(bytes);
                    return Ok(());
                }
                FaultKind::BitFlip(bit) => {
                    let bit = bit % (bytes.len() * 8);
                    bytes[bit / 8] ^= 1 << (bit % 8);
                    self.inner.send_frame(bytes)
                }
            },
            _ => self.inner.send_frame(bytes),
        };
        result?;
        if let Some(held) = self.held.take() {
            self.inner.send_frame(held)?;
        }
        Ok(())
    }

    fn recv_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.recv_exact(buf)
    }
}

impl<T: Transport> Drop for FaultyTransport<T> {
    fn drop(&mut self) {
        if let Some(held) = self.held.take() {
            let _ = self.inner.send_frame(held);
        }
    }
}
