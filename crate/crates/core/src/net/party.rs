use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixedpoint::RingParams;
use crate::garbled::gc::Label;
use crate::garbled::ot::{OtConfig, OtReceiver, OtSender};
use crate::net::channel::Channel;
use crate::net::transport::Transport;
use crate::sharing::{PartyId, SessionId};

/// How the negative branch of L-ReLU is scaled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationMode {
    /// Arithmetic shift inside the garbled circuit; exact.
    #[default]
    Shift,
    /// Parties scale their shares by the public α and truncate locally,
    /// then the circuit selects between the two sums.
    LocalScale,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartyConfig {
    pub ot: OtConfig,
    pub activation: ActivationMode,
    /// Test-only: open every dissimilarity to both parties.
    pub reveal_dissimilarities: bool,
}

impl Default for PartyConfig {
    fn default() -> Self {
        PartyConfig { ot: OtConfig::default(), activation: ActivationMode::Shift, reveal_dissimilarities: false }
    }
}

/// What a party learned in the clear during the online phase.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Audit {
    /// Output wires decoded to plaintext that are not masked by a fresh
    /// share of the garbler.
    pub revealed_bits: usize,
    /// Output wires decoded into a re-shared value (L-ReLU outputs).
    pub masked_bits: usize,
    /// Dissimilarities opened under the test flag.
    pub opened_dissimilarities: usize,
}

enum Ot {
    Sender(OtSender),
    Receiver(OtReceiver),
}

/// One endpoint of a two-party session.
pub struct Party {
    pub role: PartyId,
    pub params: RingParams,
    pub chan: Channel,
    pub rng: ChaCha20Rng,
    pub config: PartyConfig,
    pub audit: Audit,
    /// When set, s1 records every pre-truncation share it truncates, in
    /// order, so the oracle can replay the same truncation.
    pub trunc_log: Option<Vec<Vec<u64>>>,
    ot: Ot,
}

impl Party {
    pub fn new(role: PartyId, params: RingParams, chan: Channel, rng: ChaCha20Rng, config: PartyConfig) -> Party {
        let ot = match role {
            PartyId::S1 => Ot::Sender(OtSender::new(config.ot)),
            PartyId::S2 => Ot::Receiver(OtReceiver::new(config.ot)),
        };
        Party { role, params, chan, rng, config, audit: Audit::default(), trunc_log: None, ot }
    }

    /// A party whose randomness comes from the operating system.
    pub fn from_entropy(role: PartyId, params: RingParams, chan: Channel, config: PartyConfig) -> Result<Party> {
        let mut seed = [0u8; 32];
        rand::rngs::OsRng.try_fill_bytes(&mut seed).map_err(|e| Error::Randomness(e.to_string()))?;
        Ok(Party::new(role, params, chan, ChaCha20Rng::from_seed(seed), config))
    }

    pub fn session(&self) -> SessionId {
        self.chan.session()
    }

    pub fn into_channel(self) -> Channel {
        self.chan
    }

    pub fn ot_send(&mut self, pairs: &[(Label, Label)]) -> Result<()> {
        match &mut self.ot {
            Ot::Sender(s) => s.send(&mut self.chan, pairs, &mut self.rng),
            Ot::Receiver(_) => Err(Error::Usage("only s1 sends oblivious transfers".into())),
        }
    }

    pub fn ot_receive(&mut self, choices: &[bool]) -> Result<Vec<Label>> {
        match &mut self.ot {
            Ot::Receiver(r) => r.receive(&mut self.chan, choices, &mut self.rng),
            Ot::Sender(_) => Err(Error::Usage("only s2 receives oblivious transfers".into())),
        }
    }

    /// A fresh party for one model's sub-session, with its own generator
    /// and oblivious-transfer state. With `lane` unset it borrows this
    /// party's channel until [`Party::join`].
    pub fn fork(&mut self, lane: Option<Channel>, rng: ChaCha20Rng) -> Party {
        let chan = match lane {
            Some(c) => c,
            None => {
                let session = self.chan.session();
                std::mem::replace(&mut self.chan, Channel::new(Box::new(Detached), session))
            }
        };
        let mut sub = Party::new(self.role, self.params, chan, rng, self.config);
        sub.trunc_log = self.trunc_log.as_ref().map(|_| Vec::new());
        sub
    }

    /// Folds a forked party's audit and truncation log back in; returns
    /// its channel when it ran on a separate lane.
    pub fn join(&mut self, sub: Party, borrowed: bool) -> Option<Channel> {
        self.audit.revealed_bits += sub.audit.revealed_bits;
        self.audit.masked_bits += sub.audit.masked_bits;
        self.audit.opened_dissimilarities += sub.audit.opened_dissimilarities;
        if let (Some(log), Some(sub_log)) = (self.trunc_log.as_mut(), sub.trunc_log) {
            log.extend(sub_log);
        }
        if borrowed {
            self.chan = sub.chan;
            None
        } else {
            Some(sub.chan)
        }
    }

    pub(crate) fn log_truncation(&mut self, pre: &[u64]) {
        if self.role == PartyId::S1 {
            if let Some(log) = self.trunc_log.as_mut() {
                log.push(pre.to_vec());
            }
        }
    }
}

struct Detached;

impl Transport for Detached {
    fn send_frame(&mut self, _: Vec<u8>) -> Result<()> {
        Err(Error::Channel("channel is lent to a sub-session".into()))
    }

    fn recv_exact(&mut self, _: &mut [u8]) -> Result<()> {
        Err(Error::Channel("channel is lent to a sub-session".into()))
    }
}
