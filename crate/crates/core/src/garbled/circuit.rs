//! Boolean circuits over AND/XOR/NOT gates and a builder with the integer
//! gadgets the protocols need. Words are little-endian bit vectors: bit 0
//! is the least significant, bit k-1 the two's-complement sign.

use crate::error::{Error, Result};

pub type WireId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Xor { a: WireId, b: WireId, out: WireId },
    And { a: WireId, b: WireId, out: WireId },
    Not { a: WireId, out: WireId },
    Const { value: bool, out: WireId },
}

impl Gate {
    fn out(&self) -> WireId {
        match *self {
            Gate::Xor { out, .. } | Gate::And { out, .. } | Gate::Not { out, .. } | Gate::Const { out, .. } => out,
        }
    }

    fn inputs(&self) -> [Option<WireId>; 2] {
        match *self {
            Gate::Xor { a, b, .. } | Gate::And { a, b, .. } => [Some(a), Some(b)],
            Gate::Not { a, .. } => [Some(a), None],
            Gate::Const { .. } => [None, None],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputOwner {
    Garbler,
    Evaluator,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InputGroup {
    pub name: String,
    pub owner: InputOwner,
    pub wires: Vec<WireId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BooleanCircuit {
    pub num_wires: usize,
    pub gates: Vec<Gate>,
    pub inputs: Vec<InputGroup>,
    pub outputs: Vec<WireId>,
}

impl BooleanCircuit {
    pub fn and_count(&self) -> usize {
        self.gates.iter().filter(|g| matches!(g, Gate::And { .. })).count()
    }

    pub fn const_count(&self) -> usize {
        self.gates.iter().filter(|g| matches!(g, Gate::Const { .. })).count()
    }

    /// Input wires of one owner, in group order.
    pub fn owner_wires(&self, owner: InputOwner) -> Vec<WireId> {
        self.inputs.iter().filter(|g| g.owner == owner).flat_map(|g| g.wires.iter().copied()).collect()
    }

    pub fn group(&self, name: &str) -> Option<&InputGroup> {
        self.inputs.iter().find(|g| g.name == name)
    }

    /// Checks that gates are topologically ordered and every wire is driven
    /// exactly once (by an input or a gate).
    pub fn validate(&self) -> Result<()> {
        let mut driven = vec![false; self.num_wires];
        let mut drive = |w: WireId| -> Result<()> {
            let slot = driven.get_mut(w as usize).ok_or_else(|| Error::Decode(format!("wire {w} out of range")))?;
            if *slot {
                return Err(Error::Decode(format!("wire {w} driven twice")));
            }
            *slot = true;
            Ok(())
        };
        for g in &self.inputs {
            for &w in &g.wires {
                drive(w)?;
            }
        }
        let mut ready = vec![false; self.num_wires];
        for g in &self.inputs {
            for &w in &g.wires {
                ready[w as usize] = true;
            }
        }
        for gate in &self.gates {
            for w in gate.inputs().into_iter().flatten() {
                if !ready.get(w as usize).copied().unwrap_or(false) {
                    return Err(Error::Decode(format!("wire {w} used before it is driven")));
                }
            }
            drive(gate.out())?;
            ready[gate.out() as usize] = true;
        }
        for &w in &self.outputs {
            if !ready.get(w as usize).copied().unwrap_or(false) {
                return Err(Error::Decode(format!("output wire {w} is never driven")));
            }
        }
        Ok(())
    }

    /// Cleartext evaluation; `inputs` holds one bit vector per input group.
    pub fn eval_plain(&self, inputs: &[Vec<bool>]) -> Result<Vec<bool>> {
        if inputs.len() != self.inputs.len() {
            return Err(Error::ShapeMismatch(format!("{} input groups, got {}", self.inputs.len(), inputs.len())));
        }
        let mut values = vec![false; self.num_wires];
        for (group, bits) in self.inputs.iter().zip(inputs) {
            if group.wires.len() != bits.len() {
                return Err(Error::ShapeMismatch(format!("group {} wants {} bits", group.name, group.wires.len())));
            }
            for (&w, &b) in group.wires.iter().zip(bits) {
                values[w as usize] = b;
            }
        }
        for gate in &self.gates {
            match *gate {
                Gate::Xor { a, b, out } => values[out as usize] = values[a as usize] ^ values[b as usize],
                Gate::And { a, b, out } => values[out as usize] = values[a as usize] & values[b as usize],
                Gate::Not { a, out } => values[out as usize] = !values[a as usize],
                Gate::Const { value, out } => values[out as usize] = value,
            }
        }
        Ok(self.outputs.iter().map(|&w| values[w as usize]).collect())
    }
}

pub fn word_to_bits(v: u64, width: u32) -> Vec<bool> {
    (0..width).map(|i| (v >> i) & 1 == 1).collect()
}

pub fn bits_to_word(bits: &[bool]) -> u64 {
    bits.iter().enumerate().fold(0u64, |acc, (i, &b)| acc | ((b as u64) << i))
}

#[derive(Default)]
pub struct CircuitBuilder {
    num_wires: u32,
    gates: Vec<Gate>,
    inputs: Vec<InputGroup>,
    zero: Option<WireId>,
    one: Option<WireId>,
}

impl CircuitBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn fresh(&mut self) -> WireId {
        let w = self.num_wires;
        self.num_wires += 1;
        w
    }

    pub fn input(&mut self, name: &str, owner: InputOwner, width: usize) -> Vec<WireId> {
        let wires: Vec<WireId> = (0..width).map(|_| self.fresh()).collect();
        self.inputs.push(InputGroup { name: name.to_string(), owner, wires: wires.clone() });
        wires
    }

    pub fn xor(&mut self, a: WireId, b: WireId) -> WireId {
        let out = self.fresh();
        self.gates.push(Gate::Xor { a, b, out });
        out
    }

    pub fn and(&mut self, a: WireId, b: WireId) -> WireId {
        let out = self.fresh();
        self.gates.push(Gate::And { a, b, out });
        out
    }

    pub fn not(&mut self, a: WireId) -> WireId {
        let out = self.fresh();
        self.gates.push(Gate::Not { a, out });
        out
    }

    pub fn constant(&mut self, value: bool) -> WireId {
        let cached = if value { self.one } else { self.zero };
        if let Some(w) = cached {
            return w;
        }
        let out = self.fresh();
        self.gates.push(Gate::Const { value, out });
        if value {
            self.one = Some(out);
        } else {
            self.zero = Some(out);
        }
        out
    }

    /// `a + b + carry_in` modulo 2^width, with the final carry. Uses one AND
    /// per carry bit: c' = c ^ ((a ^ c) & (b ^ c)).
    fn add_with_carry(&mut self, a: &[WireId], b: &[WireId], carry_in: Option<WireId>, want_carry_out: bool) -> (Vec<WireId>, Option<WireId>) {
        assert_eq!(a.len(), b.len());
        let n = a.len();
        let mut out = Vec::with_capacity(n);
        let mut carry = carry_in;
        for i in 0..n {
            let axb = self.xor(a[i], b[i]);
            let sum = match carry {
                Some(c) => self.xor(axb, c),
                None => axb,
            };
            out.push(sum);
            if i + 1 == n && !want_carry_out {
                break;
            }
            carry = Some(match carry {
                None => self.and(a[i], b[i]),
                Some(c) => {
                    let ac = self.xor(a[i], c);
                    let bc = self.xor(b[i], c);
                    let t = self.and(ac, bc);
                    self.xor(c, t)
                }
            });
        }
        (out, if want_carry_out { carry } else { None })
    }

    pub fn add(&mut self, a: &[WireId], b: &[WireId]) -> Vec<WireId> {
        self.add_with_carry(a, b, None, false).0
    }

    /// `a - b` modulo 2^width as a + !b + 1.
    pub fn sub(&mut self, a: &[WireId], b: &[WireId]) -> Vec<WireId> {
        let (out, _) = self.sub_inner(a, b, false);
        out
    }

    fn sub_inner(&mut self, a: &[WireId], b: &[WireId], want_carry: bool) -> (Vec<WireId>, Option<WireId>) {
        // bit 0 handled without a constant wire:
        //   sum0 = a0 ^ b0, carry1 = a0 | !b0 = !(!a0 & b0)
        let n = a.len();
        let s0 = self.xor(a[0], b[0]);
        if n == 1 && !want_carry {
            return (vec![s0], None);
        }
        let na0 = self.not(a[0]);
        let t = self.and(na0, b[0]);
        let c1 = self.not(t);
        let nb: Vec<WireId> = b[1..].iter().map(|&w| self.not(w)).collect();
        let (mut rest, carry) = if n == 1 { (vec![], Some(c1)) } else { self.add_with_carry(&a[1..], &nb, Some(c1), want_carry) };
        let mut out = vec![s0];
        out.append(&mut rest);
        (out, carry)
    }

    /// Unsigned `a < b`: the borrow of a - b.
    pub fn lt_unsigned(&mut self, a: &[WireId], b: &[WireId]) -> WireId {
        // carry chain of a + !b + 1; carry out set iff a >= b
        let n = a.len();
        let na0 = self.not(a[0]);
        let t = self.and(na0, b[0]);
        let mut carry = self.not(t);
        for i in 1..n {
            let nb = self.not(b[i]);
            let ac = self.xor(a[i], carry);
            let bc = self.xor(nb, carry);
            let t = self.and(ac, bc);
            carry = self.xor(carry, t);
        }
        self.not(carry)
    }

    /// Two's-complement `a < b`.
    pub fn lt_signed(&mut self, a: &[WireId], b: &[WireId]) -> WireId {
        let n = a.len();
        let mut a2 = a.to_vec();
        let mut b2 = b.to_vec();
        a2[n - 1] = self.not(a[n - 1]);
        b2[n - 1] = self.not(b[n - 1]);
        self.lt_unsigned(&a2, &b2)
    }

    /// `sel ? if_one : if_zero`, one AND per bit.
    pub fn mux(&mut self, sel: WireId, if_zero: &[WireId], if_one: &[WireId]) -> Vec<WireId> {
        if_zero
            .iter()
            .zip(if_one)
            .map(|(&z, &o)| {
                let d = self.xor(z, o);
                let m = self.and(sel, d);
                self.xor(z, m)
            })
            .collect()
    }

    /// Arithmetic shift right: pure rewiring, no gates.
    pub fn asr(&self, a: &[WireId], shift: usize) -> Vec<WireId> {
        let n = a.len();
        (0..n).map(|i| if i + shift < n { a[i + shift] } else { a[n - 1] }).collect()
    }

    pub fn constant_word(&mut self, value: u64, width: usize) -> Vec<WireId> {
        (0..width).map(|i| self.constant((value >> i) & 1 == 1)).collect()
    }

    pub fn finish(self, outputs: Vec<WireId>) -> BooleanCircuit {
        BooleanCircuit { num_wires: self.num_wires as usize, gates: self.gates, inputs: self.inputs, outputs }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary_op(width: usize, op: impl Fn(&mut CircuitBuilder, &[WireId], &[WireId]) -> Vec<WireId>) -> BooleanCircuit {
        let mut b = CircuitBuilder::new();
        let x = b.input("x", InputOwner::Garbler, width);
        let y = b.input("y", InputOwner::Evaluator, width);
        let out = op(&mut b, &x, &y);
        b.finish(out)
    }

    #[test]
    fn adder_subtractor_comparators_exhaustive_8bit() {
        let add = binary_op(8, |b, x, y| b.add(x, y));
        let sub = binary_op(8, |b, x, y| b.sub(x, y));
        let ltu = binary_op(8, |b, x, y| vec![b.lt_unsigned(x, y)]);
        let lts = binary_op(8, |b, x, y| vec![b.lt_signed(x, y)]);
        for c in [&add, &sub, &ltu, &lts] {
            c.validate().unwrap();
        }
        assert_eq!(add.and_count(), 7);
        assert_eq!(sub.and_count(), 7);
        assert_eq!(ltu.and_count(), 8);
        for x in 0..256u64 {
            for y in 0..256u64 {
                let inp = [word_to_bits(x, 8), word_to_bits(y, 8)];
                assert_eq!(bits_to_word(&add.eval_plain(&inp).unwrap()), (x + y) & 255);
                assert_eq!(bits_to_word(&sub.eval_plain(&inp).unwrap()), x.wrapping_sub(y) & 255);
                assert_eq!(ltu.eval_plain(&inp).unwrap()[0], x < y);
                assert_eq!(lts.eval_plain(&inp).unwrap()[0], (x as u8 as i8) < (y as u8 as i8));
            }
        }
    }

    #[test]
    fn mux_and_shift() {
        let mut b = CircuitBuilder::new();
        let s = b.input("s", InputOwner::Garbler, 1);
        let x = b.input("x", InputOwner::Garbler, 8);
        let y = b.input("y", InputOwner::Evaluator, 8);
        let shifted = b.asr(&x, 2);
        let out = b.mux(s[0], &shifted, &y);
        let c = b.finish(out);
        assert_eq!(c.and_count(), 8);
        for sel in [false, true] {
            let got = bits_to_word(&c.eval_plain(&[vec![sel], word_to_bits(0xF4, 8), word_to_bits(0x21, 8)]).unwrap());
            assert_eq!(got, if sel { 0x21 } else { 0xFD });
        }
    }

    #[test]
    fn validate_rejects_double_drive() {
        let c = BooleanCircuit {
            num_wires: 3,
            gates: vec![Gate::Xor { a: 0, b: 1, out: 1 }],
            inputs: vec![InputGroup { name: "x".into(), owner: InputOwner::Garbler, wires: vec![0, 1] }],
            outputs: vec![1],
        };
        assert!(c.validate().is_err());
        let c = BooleanCircuit {
            num_wires: 3,
            gates: vec![Gate::And { a: 0, b: 2, out: 1 }],
            inputs: vec![InputGroup { name: "x".into(), owner: InputOwner::Garbler, wires: vec![0] }],
            outputs: vec![1],
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn constants_are_shared() {
        let mut b = CircuitBuilder::new();
        let w = b.constant_word(0b1010, 4);
        assert_eq!(w[1], w[3]);
        assert_eq!(w[0], w[2]);
        let c = b.finish(w);
        assert_eq!(c.const_count(), 2);
        assert_eq!(bits_to_word(&c.eval_plain(&[]).unwrap()), 0b1010);
    }
}
