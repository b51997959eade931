//! L-ReLU with re-sharing: the circuit adds the two shares, selects `z` or
//! `αz` on the sign bit and subtracts the garbler's fresh mask `R'`, so the
//! evaluator decodes `H - R'` and the garbler keeps `R'` as its share.

use crate::error::{Error, Result};
use crate::fixedpoint::{encode, RingParams};
use crate::garbled::circuit::{bits_to_word, word_to_bits, BooleanCircuit, CircuitBuilder, InputOwner};
use crate::garbled::exec::{run_circuit, Reveal};
use crate::net::party::{ActivationMode, Party};
use crate::sharing::{local_scale, random_words, truncate_shares, PartyId, ShareTensor};

pub fn build_lrelu_circuit(params: RingParams, alpha_shift: u32) -> Result<BooleanCircuit> {
    let k = params.k() as usize;
    if alpha_shift < 1 || alpha_shift >= params.k() {
        return Err(Error::InvalidParams(format!("alpha_shift={alpha_shift} must satisfy 1 <= shift < k={k}")));
    }
    let mut b = CircuitBuilder::new();
    let z1 = b.input("z_s1", InputOwner::Garbler, k);
    let r = b.input("r_prime", InputOwner::Garbler, k);
    let z2 = b.input("z_s2", InputOwner::Evaluator, k);
    let z = b.add(&z1, &z2);
    let w = b.asr(&z, alpha_shift as usize);
    let h = b.mux(z[k - 1], &z, &w);
    let out = b.sub(&h, &r);
    Ok(b.finish(out))
}

/// The variant where both branches arrive as shares: `z` and a locally
/// scaled `αz`.
pub fn build_lrelu_local_circuit(params: RingParams) -> BooleanCircuit {
    let k = params.k() as usize;
    let mut b = CircuitBuilder::new();
    let z1 = b.input("z_s1", InputOwner::Garbler, k);
    let a1 = b.input("az_s1", InputOwner::Garbler, k);
    let r = b.input("r_prime", InputOwner::Garbler, k);
    let z2 = b.input("z_s2", InputOwner::Evaluator, k);
    let a2 = b.input("az_s2", InputOwner::Evaluator, k);
    let z = b.add(&z1, &z2);
    let w = b.add(&a1, &a2);
    let h = b.mux(z[k - 1], &z, &w);
    let out = b.sub(&h, &r);
    b.finish(out)
}

/// Cleartext L-ReLU on a ring word with α = 2^-shift.
pub fn lrelu_plain(z: u64, alpha_shift: u32, params: RingParams) -> u64 {
    if params.is_negative(z) {
        params.asr(z, alpha_shift)
    } else {
        params.reduce(z)
    }
}

/// The circuit a layer with this activation mode runs.
pub fn lrelu_circuit_for(mode: ActivationMode, params: RingParams, alpha_shift: u32) -> Result<BooleanCircuit> {
    match mode {
        ActivationMode::Shift => build_lrelu_circuit(params, alpha_shift),
        ActivationMode::LocalScale => Ok(build_lrelu_local_circuit(params)),
    }
}

/// Secure L-ReLU over a whole tensor in one batched circuit.
pub fn eval_lrelu(party: &mut Party, z: &ShareTensor, alpha_shift: u32) -> Result<ShareTensor> {
    let params = party.params;
    let k = params.k();
    let m = z.len();
    let mode = party.config.activation;
    let circuit = lrelu_circuit_for(mode, params, alpha_shift)?;
    let scaled = match mode {
        ActivationMode::Shift => None,
        ActivationMode::LocalScale => {
            let alpha = encode(2f64.powi(-(alpha_shift as i32)), params)?;
            let pre = local_scale(z, alpha);
            party.log_truncation(pre.data());
            Some(truncate_shares(&pre, params.f()))
        }
    };
    let bits_of = |i: usize, words: &[&[u64]]| -> Vec<bool> { words.iter().flat_map(|w| word_to_bits(w[i], k)).collect() };
    match party.role {
        PartyId::S1 => {
            let r = random_words(m, params, &mut party.rng)?;
            let bits: Vec<Vec<bool>> = (0..m)
                .map(|i| match &scaled {
                    None => bits_of(i, &[z.data(), &r]),
                    Some(a) => bits_of(i, &[z.data(), a.data(), &r]),
                })
                .collect();
            run_circuit(party, &circuit, &bits, Reveal::Masked)?;
            z.with_data(r, z.shape().to_vec())
        }
        PartyId::S2 => {
            let bits: Vec<Vec<bool>> = (0..m)
                .map(|i| match &scaled {
                    None => bits_of(i, &[z.data()]),
                    Some(a) => bits_of(i, &[z.data(), a.data()]),
                })
                .collect();
            let out = run_circuit(party, &circuit, &bits, Reveal::Masked)?.unwrap_or_default();
            z.with_data(out.iter().map(|b| bits_to_word(b)).collect(), z.shape().to_vec())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixedpoint::{decode, RingElement};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn eval(c: &BooleanCircuit, z1: u64, r: u64, z2: u64, k: u32) -> u64 {
        bits_to_word(&c.eval_plain(&[word_to_bits(z1, k), word_to_bits(r, k), word_to_bits(z2, k)]).unwrap())
    }

    #[test]
    fn examples_at_k64() {
        let p = RingParams::default();
        let c = build_lrelu_circuit(p, 2).unwrap();
        c.validate().unwrap();
        assert_eq!(c.and_count(), 3 * 64 - 2);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for (x, want) in [(1.0, 1.0), (-1.0, -0.25), (0.0, 0.0), (-3.5, -0.875)] {
            let z = encode(x, p).unwrap().0;
            let z1: u64 = rng.gen();
            let r: u64 = rng.gen();
            let out = eval(&c, z1, r, p.sub(z, z1), 64);
            assert_eq!(decode(RingElement(p.add(out, r)), p), want);
        }
    }

    #[test]
    fn exhaustive_k8_against_plain() {
        let p = RingParams::new(8, 3).unwrap();
        for shift in [1, 2, 7] {
            let c = build_lrelu_circuit(p, shift).unwrap();
            for z in 0..256u64 {
                for z1 in (0..256u64).step_by(37) {
                    let r = (z * 11 + z1) & 255;
                    let out = eval(&c, z1, r, p.sub(z, z1), 8);
                    assert_eq!(p.add(out, r), lrelu_plain(z, shift, p));
                }
            }
        }
    }

    #[test]
    fn bad_shift_rejected() {
        assert!(build_lrelu_circuit(RingParams::default(), 0).is_err());
        assert!(build_lrelu_circuit(RingParams::default(), 64).is_err());
    }

    #[test]
    fn local_variant_selects_second_sum() {
        let p = RingParams::new(16, 4).unwrap();
        let c = build_lrelu_local_circuit(p);
        let z = p.neg(40);
        let a = p.neg(10);
        let inputs = [word_to_bits(3, 16), word_to_bits(5, 16), word_to_bits(7, 16), word_to_bits(p.sub(z, 3), 16), word_to_bits(p.sub(a, 5), 16)];
        let out = bits_to_word(&c.eval_plain(&inputs).unwrap());
        assert_eq!(p.add(out, 7), a);
    }
}
