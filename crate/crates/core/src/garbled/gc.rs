//! Free-XOR, point-and-permute garbling with 128-bit labels.
//!
//! One [`BooleanCircuit`] is garbled `instances` times under a single global
//! offset Δ (SIMD batching). The wire with semantic value `b` carries label
//! `L0 ^ b·Δ`; `lsb(Δ) = 1` so the colour bit of a label selects its row.

use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::garbled::circuit::{BooleanCircuit, Gate, InputOwner};

pub type Label = u128;

const TAG_AND: u8 = 0;
const TAG_OUT: u8 = 1;

/// Tweaked hash of two labels, truncated to 128 bits.
pub fn hash_pair(a: Label, b: Label, tweak: u64) -> Label {
    let mut h = Sha256::new();
    h.update([TAG_AND]);
    h.update(a.to_le_bytes());
    h.update(b.to_le_bytes());
    h.update(tweak.to_le_bytes());
    let d = h.finalize();
    u128::from_le_bytes(d[..16].try_into().unwrap())
}

fn hash_output(l: Label, tweak: u64) -> u64 {
    let mut h = Sha256::new();
    h.update([TAG_OUT]);
    h.update(l.to_le_bytes());
    h.update(tweak.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

#[inline]
fn colour(l: Label) -> usize {
    (l & 1) as usize
}

pub(crate) fn random_label<R: RngCore + CryptoRng>(rng: &mut R) -> Result<Label> {
    let mut b = [0u8; 16];
    rng.try_fill_bytes(&mut b).map_err(|e| Error::Randomness(e.to_string()))?;
    Ok(u128::from_le_bytes(b))
}

/// What the garbler sends: tables, active constant labels and the output
/// decoding hashes, for every instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GarbledMaterial {
    pub instances: usize,
    pub tables: Vec<[Label; 4]>,
    pub consts: Vec<Label>,
    pub decode: Vec<[u64; 2]>,
}

impl GarbledMaterial {
    pub fn byte_len(circuit: &BooleanCircuit, instances: usize) -> usize {
        instances * (circuit.and_count() * 64 + circuit.const_count() * 16 + circuit.outputs.len() * 16)
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        out.reserve(self.tables.len() * 64 + self.consts.len() * 16 + self.decode.len() * 16);
        for t in &self.tables {
            for l in t {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
        for l in &self.consts {
            out.extend_from_slice(&l.to_le_bytes());
        }
        for d in &self.decode {
            out.extend_from_slice(&d[0].to_le_bytes());
            out.extend_from_slice(&d[1].to_le_bytes());
        }
    }

    pub fn decode_from(bytes: &[u8], circuit: &BooleanCircuit, instances: usize) -> Result<GarbledMaterial> {
        if bytes.len() != Self::byte_len(circuit, instances) {
            return Err(Error::Decode(format!("garbled material is {} bytes, expected {}", bytes.len(), Self::byte_len(circuit, instances))));
        }
        let label = |c: &[u8]| u128::from_le_bytes(c.try_into().unwrap());
        let n_tables = circuit.and_count() * instances;
        let n_consts = circuit.const_count() * instances;
        let (t, rest) = bytes.split_at(n_tables * 64);
        let (c, d) = rest.split_at(n_consts * 16);
        let tables = t.chunks_exact(64).map(|row| [label(&row[0..16]), label(&row[16..32]), label(&row[32..48]), label(&row[48..64])]).collect();
        let consts = c.chunks_exact(16).map(label).collect();
        let decode =
            d.chunks_exact(16).map(|p| [u64::from_le_bytes(p[..8].try_into().unwrap()), u64::from_le_bytes(p[8..].try_into().unwrap())]).collect();
        Ok(GarbledMaterial { instances, tables, consts, decode })
    }
}

/// The garbler's secret state for one batch.
pub struct Garbling {
    pub delta: Label,
    pub material: GarbledMaterial,
    /// Zero-labels of every input wire, instance-major, in group order.
    input_zero: Vec<Label>,
    inputs_per_instance: usize,
}

impl Garbling {
    /// The zero/one label pair of input wire `pos` (flattened group order).
    pub fn label_pair(&self, instance: usize, pos: usize) -> (Label, Label) {
        let z = self.input_zero[instance * self.inputs_per_instance + pos];
        (z, z ^ self.delta)
    }

    pub fn active_label(&self, instance: usize, pos: usize, bit: bool) -> Label {
        let (z, o) = self.label_pair(instance, pos);
        if bit {
            o
        } else {
            z
        }
    }
}

/// Positions (in flattened group order) of the input wires an owner holds.
pub fn owner_positions(circuit: &BooleanCircuit, owner: InputOwner) -> Vec<usize> {
    let mut pos = 0;
    let mut out = Vec::new();
    for g in &circuit.inputs {
        for _ in &g.wires {
            if g.owner == owner {
                out.push(pos);
            }
            pos += 1;
        }
    }
    out
}

fn gate_tweak(instance: usize, and_index: usize, per_instance: usize) -> u64 {
    (instance * per_instance + and_index) as u64
}

fn output_tweak(instance: usize, out_index: usize, per_instance: usize) -> u64 {
    (instance * per_instance + out_index) as u64
}

pub fn garble<R: RngCore + CryptoRng>(circuit: &BooleanCircuit, instances: usize, rng: &mut R) -> Result<Garbling> {
    let delta = random_label(rng)? | 1;
    let ands = circuit.and_count();
    let n_out = circuit.outputs.len();
    let input_wires: Vec<u32> = circuit.inputs.iter().flat_map(|g| g.wires.iter().copied()).collect();
    let mut tables = Vec::with_capacity(ands * instances);
    let mut consts = Vec::with_capacity(circuit.const_count() * instances);
    let mut decode = Vec::with_capacity(n_out * instances);
    let mut input_zero = Vec::with_capacity(input_wires.len() * instances);
    let mut zero = vec![0u128; circuit.num_wires];
    for inst in 0..instances {
        for &w in &input_wires {
            let l = random_label(rng)?;
            zero[w as usize] = l;
            input_zero.push(l);
        }
        let mut and_index = 0;
        for gate in &circuit.gates {
            match *gate {
                Gate::Xor { a, b, out } => zero[out as usize] = zero[a as usize] ^ zero[b as usize],
                Gate::Not { a, out } => zero[out as usize] = zero[a as usize] ^ delta,
                Gate::Const { value, out } => {
                    let l = random_label(rng)?;
                    zero[out as usize] = l;
                    consts.push(if value { l ^ delta } else { l });
                }
                Gate::And { a, b, out } => {
                    let c0 = random_label(rng)?;
                    zero[out as usize] = c0;
                    let (a0, b0) = (zero[a as usize], zero[b as usize]);
                    let tweak = gate_tweak(inst, and_index, ands);
                    let mut table = [0u128; 4];
                    for x in 0..2u8 {
                        let ax = if x == 1 { a0 ^ delta } else { a0 };
                        for y in 0..2u8 {
                            let by = if y == 1 { b0 ^ delta } else { b0 };
                            let c = if x & y == 1 { c0 ^ delta } else { c0 };
                            table[2 * colour(ax) + colour(by)] = hash_pair(ax, by, tweak) ^ c;
                        }
                    }
                    tables.push(table);
                    and_index += 1;
                }
            }
        }
        for (i, &w) in circuit.outputs.iter().enumerate() {
            let z = zero[w as usize];
            let t = output_tweak(inst, i, n_out);
            decode.push([hash_output(z, t), hash_output(z ^ delta, t)]);
        }
    }
    Ok(Garbling { delta, material: GarbledMaterial { instances, tables, consts, decode }, inputs_per_instance: input_wires.len(), input_zero })
}

/// Evaluates every instance. `inputs` holds, per instance, one active label
/// per input wire in flattened group order. Returns the decoded output bits
/// per instance; a label matching neither decoding hash is reported as a
/// corrupt garbled table.
pub fn evaluate(circuit: &BooleanCircuit, material: &GarbledMaterial, inputs: &[Vec<Label>]) -> Result<Vec<Vec<bool>>> {
    evaluate_observed(circuit, material, inputs, |_| {})
}

/// As [`evaluate`], handing every label the evaluator computes to `observe`.
pub fn evaluate_observed(
    circuit: &BooleanCircuit,
    material: &GarbledMaterial,
    inputs: &[Vec<Label>],
    mut observe: impl FnMut(Label),
) -> Result<Vec<Vec<bool>>> {
    let ands = circuit.and_count();
    let n_const = circuit.const_count();
    let n_out = circuit.outputs.len();
    if inputs.len() != material.instances
        || material.tables.len() != ands * material.instances
        || material.consts.len() != n_const * material.instances
        || material.decode.len() != n_out * material.instances
    {
        return Err(Error::Decode("garbled material does not fit the circuit".into()));
    }
    let input_wires: Vec<u32> = circuit.inputs.iter().flat_map(|g| g.wires.iter().copied()).collect();
    let mut labels = vec![0u128; circuit.num_wires];
    let mut results = Vec::with_capacity(inputs.len());
    for (inst, active) in inputs.iter().enumerate() {
        if active.len() != input_wires.len() {
            return Err(Error::Decode(format!("{} input labels, circuit has {}", active.len(), input_wires.len())));
        }
        for (&w, &l) in input_wires.iter().zip(active) {
            labels[w as usize] = l;
        }
        let mut and_index = 0;
        let mut const_index = 0;
        for gate in &circuit.gates {
            let (out, l) = match *gate {
                Gate::Xor { a, b, out } => (out, labels[a as usize] ^ labels[b as usize]),
                Gate::Not { a, out } => (out, labels[a as usize]),
                Gate::Const { out, .. } => {
                    let l = material.consts[inst * n_const + const_index];
                    const_index += 1;
                    (out, l)
                }
                Gate::And { a, b, out } => {
                    let (la, lb) = (labels[a as usize], labels[b as usize]);
                    let table = &material.tables[inst * ands + and_index];
                    let tweak = gate_tweak(inst, and_index, ands);
                    and_index += 1;
                    (out, table[2 * colour(la) + colour(lb)] ^ hash_pair(la, lb, tweak))
                }
            };
            labels[out as usize] = l;
            observe(l);
        }
        let mut bits = Vec::with_capacity(n_out);
        for (i, &w) in circuit.outputs.iter().enumerate() {
            let h = hash_output(labels[w as usize], output_tweak(inst, i, n_out));
            let pair = material.decode[inst * n_out + i];
            if h == pair[0] {
                bits.push(false);
            } else if h == pair[1] {
                bits.push(true);
            } else {
                return Err(Error::GarbledTable(i));
            }
        }
        results.push(bits);
    }
    Ok(results)
}
