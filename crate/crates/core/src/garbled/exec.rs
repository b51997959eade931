//! Runs one SIMD-batched garbled circuit between the parties: s1 garbles
//! and sends the material with its own active labels in a single frame,
//! then transfers s2's input labels obliviously; s2 evaluates.

use crate::error::{Error, Result};
use crate::garbled::circuit::{BooleanCircuit, InputOwner};
use crate::garbled::gc::{evaluate, garble, owner_positions, GarbledMaterial, Label};
use crate::garbled::ot::ot_bytes;
use crate::net::channel::Channel;
use crate::net::frame::MsgType;
use crate::net::party::Party;
use crate::sharing::PartyId;

/// Whether decoded outputs are plaintext or a value masked by the garbler.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reveal {
    Masked,
    Public,
}

/// Garbler side. `bits[i]` holds the garbler's input bits of instance `i`
/// in the order of its input wires.
pub fn garbler_run(party: &mut Party, circuit: &BooleanCircuit, bits: &[Vec<bool>]) -> Result<()> {
    let instances = bits.len();
    let g_pos = owner_positions(circuit, InputOwner::Garbler);
    let e_pos = owner_positions(circuit, InputOwner::Evaluator);
    let garbling = garble(circuit, instances, &mut party.rng)?;
    let mut payload = Vec::with_capacity(frame_payload_len(circuit, instances));
    garbling.material.encode(&mut payload);
    for (inst, b) in bits.iter().enumerate() {
        if b.len() != g_pos.len() {
            return Err(Error::ShapeMismatch(format!("garbler supplies {} bits, circuit wants {}", b.len(), g_pos.len())));
        }
        for (&pos, &bit) in g_pos.iter().zip(b) {
            payload.extend_from_slice(&garbling.active_label(inst, pos, bit).to_le_bytes());
        }
    }
    party.chan.send(MsgType::GarbledCircuit, payload)?;
    let pairs: Vec<(Label, Label)> =
        (0..instances).flat_map(|inst| e_pos.iter().map(move |&pos| (inst, pos))).map(|(i, p)| garbling.label_pair(i, p)).collect();
    party.ot_send(&pairs)
}

/// Evaluator side; returns the decoded outputs per instance.
pub fn evaluator_run(party: &mut Party, circuit: &BooleanCircuit, bits: &[Vec<bool>], reveal: Reveal) -> Result<Vec<Vec<bool>>> {
    let instances = bits.len();
    let g_pos = owner_positions(circuit, InputOwner::Garbler);
    let e_pos = owner_positions(circuit, InputOwner::Evaluator);
    let payload = party.chan.recv(MsgType::GarbledCircuit)?;
    let mat_len = GarbledMaterial::byte_len(circuit, instances);
    if payload.len() != frame_payload_len(circuit, instances) {
        return Err(Error::Decode(format!("garbled frame is {} bytes, expected {}", payload.len(), frame_payload_len(circuit, instances))));
    }
    let material = GarbledMaterial::decode_from(&payload[..mat_len], circuit, instances)?;
    let mut choices = Vec::with_capacity(instances * e_pos.len());
    for b in bits {
        if b.len() != e_pos.len() {
            return Err(Error::ShapeMismatch(format!("evaluator supplies {} bits, circuit wants {}", b.len(), e_pos.len())));
        }
        choices.extend_from_slice(b);
    }
    let received = party.ot_receive(&choices)?;
    let total = g_pos.len() + e_pos.len();
    let mut labels = payload[mat_len..].chunks_exact(16).map(|c| u128::from_le_bytes(c.try_into().unwrap()));
    let mut inputs = Vec::with_capacity(instances);
    for inst in 0..instances {
        let mut active = vec![0u128; total];
        for &pos in &g_pos {
            active[pos] = labels.next().unwrap();
        }
        for (j, &pos) in e_pos.iter().enumerate() {
            active[pos] = received[inst * e_pos.len() + j];
        }
        inputs.push(active);
    }
    let out = evaluate(circuit, &material, &inputs)?;
    let decoded = instances * circuit.outputs.len();
    match reveal {
        Reveal::Masked => party.audit.masked_bits += decoded,
        Reveal::Public => party.audit.revealed_bits += decoded,
    }
    Ok(out)
}

/// Runs the circuit from whichever side `party` is; s1 gets `None`.
pub fn run_circuit(party: &mut Party, circuit: &BooleanCircuit, bits: &[Vec<bool>], reveal: Reveal) -> Result<Option<Vec<Vec<bool>>>> {
    match party.role {
        PartyId::S1 => garbler_run(party, circuit, bits).map(|_| None),
        PartyId::S2 => evaluator_run(party, circuit, bits, reveal).map(Some),
    }
}

/// Payload of the garbled-circuit frame: material plus the garbler's labels.
pub fn frame_payload_len(circuit: &BooleanCircuit, instances: usize) -> usize {
    GarbledMaterial::byte_len(circuit, instances) + 16 * instances * owner_positions(circuit, InputOwner::Garbler).len()
}

/// Bytes both parties put on the wire for one run of `circuit`.
pub fn circuit_bytes(party_config: crate::garbled::ot::OtConfig, circuit: &BooleanCircuit, instances: usize, first_ot: bool) -> u64 {
    let evaluator_bits = instances * owner_positions(circuit, InputOwner::Evaluator).len();
    Channel::frame_cost(frame_payload_len(circuit, instances)) + ot_bytes(party_config, evaluator_bits, first_ot)
}
