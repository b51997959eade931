//! Joint argmin and threshold test over shared dissimilarities. Only the
//! winning index and the flag `min <= τ_min` leave the circuit.

use crate::error::{Error, Result};
use crate::fixedpoint::RingParams;
use crate::garbled::circuit::{bits_to_word, word_to_bits, BooleanCircuit, CircuitBuilder, InputOwner, WireId};
use crate::garbled::exec::{run_circuit, Reveal};
use crate::net::codec::Reader;
use crate::net::frame::MsgType;
use crate::net::party::Party;
use crate::sharing::{PartyId, ShareTensor};

/// Bits of the decoded index: ⌈log2 n⌉ + 1.
pub fn index_bits(n: usize) -> usize {
    (usize::BITS - (n.max(1) - 1).leading_zeros()) as usize + 1
}

struct Candidate {
    value: Vec<WireId>,
    index: Vec<WireId>,
    tau: Vec<WireId>,
}

/// Inputs: shares of `d_1..d_n` and of one threshold per candidate.
/// Outputs: the index bits of the minimum (ties go to the lower index)
/// followed by the flag bit.
pub fn build_argmin_threshold_circuit(n: usize, params: RingParams) -> Result<BooleanCircuit> {
    if n == 0 {
        return Err(Error::Usage("argmin over zero candidates".into()));
    }
    let k = params.k() as usize;
    let ib = index_bits(n);
    let mut b = CircuitBuilder::new();
    let d1 = b.input("d_s1", InputOwner::Garbler, n * k);
    let t1 = b.input("tau_s1", InputOwner::Garbler, n * k);
    let d2 = b.input("d_s2", InputOwner::Evaluator, n * k);
    let t2 = b.input("tau_s2", InputOwner::Evaluator, n * k);
    let mut round: Vec<Candidate> = (0..n)
        .map(|i| {
            let s = i * k..(i + 1) * k;
            let value = b.add(&d1[s.clone()], &d2[s.clone()]);
            let tau = b.add(&t1[s.clone()], &t2[s]);
            let index = b.constant_word(i as u64, ib);
            Candidate { value, index, tau }
        })
        .collect();
    while round.len() > 1 {
        let mut next = Vec::with_capacity(round.len().div_ceil(2));
        let mut it = round.into_iter();
        while let Some(a) = it.next() {
            let Some(c) = it.next() else {
                next.push(a);
                break;
            };
            let take_second = b.lt_signed(&c.value, &a.value);
            next.push(Candidate {
                value: b.mux(take_second, &a.value, &c.value),
                index: b.mux(take_second, &a.index, &c.index),
                tau: b.mux(take_second, &a.tau, &c.tau),
            });
        }
        round = next;
    }
    let win = round.pop().unwrap();
    let above = b.lt_signed(&win.tau, &win.value);
    let flag = b.not(above);
    let mut outputs = win.index;
    outputs.push(flag);
    Ok(b.finish(outputs))
}

/// Returns `(index, flag)` to both parties. s2 decodes the circuit output
/// and forwards it to s1 in a result frame.
pub fn secure_argmin(party: &mut Party, d: &ShareTensor, tau: &ShareTensor) -> Result<(usize, bool)> {
    let n = d.len();
    if tau.len() != n {
        return Err(Error::ShapeMismatch(format!("{n} dissimilarities but {} thresholds", tau.len())));
    }
    let params = party.params;
    let k = params.k();
    let circuit = build_argmin_threshold_circuit(n, params)?;
    let bits: Vec<bool> = d.data().iter().chain(tau.data()).flat_map(|&w| word_to_bits(w, k)).collect();
    match party.role {
        PartyId::S1 => {
            run_circuit(party, &circuit, &[bits], Reveal::Public)?;
            let payload = party.chan.recv(MsgType::Result)?;
            let mut r = Reader::new(&payload);
            let index = r.u32()? as usize;
            let flag = r.u8()?;
            r.finish()?;
            if index >= n || flag > 1 {
                return Err(Error::Decode(format!("result index {index} flag {flag} out of range")));
            }
            Ok((index, flag == 1))
        }
        PartyId::S2 => {
            let out = run_circuit(party, &circuit, &[bits], Reveal::Public)?.unwrap_or_default();
            let out = out.into_iter().next().ok_or_else(|| Error::Decode("empty circuit output".into()))?;
            let ib = index_bits(n);
            let index = bits_to_word(&out[..ib]) as usize;
            let flag = out[ib];
            if index >= n {
                return Err(Error::Decode(format!("decoded index {index} out of range")));
            }
            let mut payload = (index as u32).to_le_bytes().to_vec();
            payload.push(flag as u8);
            party.chan.send(MsgType::Result, payload)?;
            Ok((index, flag))
        }
    }
}
