//! Python bindings for the two-party engine.

use std::path::PathBuf;
use std::time::Duration;

use pvmpc_core::beaver::{deal_triples, TripleShape};
use pvmpc_core::fixedpoint::{decode, encode, RingElement, RingParams as CoreParams, RingTensor};
use pvmpc_core::garbled::lrelu::lrelu_plain;
use pvmpc_core::garbled::ot::{OtConfig, OtMode};
use pvmpc_core::linear::secure_mul as core_secure_mul;
use pvmpc_core::model::{load_model, validate_undercomplete, Manifest, Verdict};
use pvmpc_core::net::channel::Channel;
use pvmpc_core::net::loopback::{run_loopback, RunConfig};
use pvmpc_core::net::party::{Party, PartyConfig};
use pvmpc_core::net::transport::mem_pair;
use pvmpc_core::oracle::{oracle_predict, Truncation};
use pvmpc_core::scenario::{build_scenario, ClearModel};
use pvmpc_core::sharing::{self, PartyId};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

create_exception!(pvmpc, PvmpcError, PyException);

fn py_err(e: pvmpc_core::Error) -> PyErr {
    PvmpcError::new_err(format!("{}: {e}", e.class()))
}

/// Ring `Z_{2^k}` with `f` fractional bits.
#[pyclass(frozen, eq, from_py_object)]
#[derive(Clone, Copy, PartialEq)]
struct RingParams(CoreParams);

#[pymethods]
impl RingParams {
    #[new]
    #[pyo3(signature = (k = 64, f = 16))]
    fn new(k: u32, f: u32) -> PyResult<Self> {
        CoreParams::new(k, f).map(RingParams).map_err(py_err)
    }

    #[getter]
    fn k(&self) -> u32 {
        self.0.k()
    }

    #[getter]
    fn f(&self) -> u32 {
        self.0.f()
    }

    fn encode(&self, x: f64) -> PyResult<u64> {
        encode(x, self.0).map(|e| e.0).map_err(py_err)
    }

    fn decode(&self, v: u64) -> f64 {
        decode(RingElement(self.0.reduce(v)), self.0)
    }

    fn __repr__(&self) -> String {
        format!("RingParams(k={}, f={})", self.0.k(), self.0.f())
    }
}

/// One party's additive share of a tensor.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
struct ShareTensor(sharing::ShareTensor);

#[pymethods]
impl ShareTensor {
    #[getter]
    fn owner(&self) -> String {
        self.0.owner().to_string()
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<u64> {
        self.0.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

fn seeded(seed: Option<u64>) -> ChaCha20Rng {
    match seed {
        Some(s) => ChaCha20Rng::seed_from_u64(s),
        None => ChaCha20Rng::from_entropy(),
    }
}

/// Splits real values into two shares.
#[pyfunction]
#[pyo3(signature = (values, params, shape = None, seed = None))]
fn share(values: Vec<f64>, params: RingParams, shape: Option<Vec<usize>>, seed: Option<u64>) -> PyResult<(ShareTensor, ShareTensor)> {
    let shape = shape.unwrap_or_else(|| vec![values.len()]);
    let t = RingTensor::encode_slice(shape, &values, params.0).map_err(py_err)?;
    let (a, b) = sharing::share(&t, params.0, 0, &mut seeded(seed)).map_err(py_err)?;
    Ok((ShareTensor(a), ShareTensor(b)))
}

/// Recombines two shares and decodes them to reals.
#[pyfunction]
fn reconstruct(a: &ShareTensor, b: &ShareTensor) -> PyResult<Vec<f64>> {
    let t = sharing::reconstruct(&a.0, &b.0).map_err(py_err)?;
    Ok(t.decode_all(a.0.params()))
}

fn two_parties(params: CoreParams, ot: OtConfig) -> (Party, Party) {
    let (a, b) = mem_pair(Duration::from_secs(120));
    let cfg = PartyConfig { ot, ..PartyConfig::default() };
    (
        Party::new(PartyId::S1, params, Channel::new(Box::new(a), 0), ChaCha20Rng::from_entropy(), cfg),
        Party::new(PartyId::S2, params, Channel::new(Box::new(b), 0), ChaCha20Rng::from_entropy(), cfg),
    )
}

/// Elementwise product of two ring-word vectors with one Beaver triple,
/// both parties run in-process. Returns the opened product words.
#[pyfunction]
#[pyo3(signature = (x, w, params, seed = None))]
fn secure_mul(py: Python<'_>, x: Vec<u64>, w: Vec<u64>, params: RingParams, seed: Option<u64>) -> PyResult<Vec<u64>> {
    if x.len() != w.len() {
        return Err(PvmpcError::new_err("ShapeMismatch: operands differ in length"));
    }
    let p = params.0;
    py.detach(|| {
        let mut rng = seeded(seed);
        let n = x.len();
        let shape = TripleShape::Elementwise { len: n };
        let (t1, t2) = deal_triples(&[shape], 1, p, &mut rng)?;
        let (ta, tb) = (t1.take_triple(shape)?, t2.take_triple(shape)?);
        let xt = RingTensor::new(vec![n], x.iter().map(|&v| p.reduce(v)).collect())?;
        let wt = RingTensor::new(vec![n], w.iter().map(|&v| p.reduce(v)).collect())?;
        let (x1, x2) = sharing::share(&xt, p, 0, &mut rng)?;
        let (w1, w2) = sharing::share(&wt, p, 0, &mut rng)?;
        let (mut a, mut b) = two_parties(p, OtConfig::test());
        let (z1, z2) = std::thread::scope(|s| {
            let h = s.spawn(|| core_secure_mul(&mut b, &x2, &w2, &tb));
            (core_secure_mul(&mut a, &x1, &w1, &ta), h.join().unwrap())
        });
        Ok(sharing::reconstruct(&z1?, &z2?)?.into_data())
    })
    .map_err(py_err)
}

/// Cleartext L-ReLU on a ring word with α = 2^-alpha_shift.
#[pyfunction]
#[pyo3(signature = (z, params, alpha_shift = 2))]
fn lrelu(z: u64, params: RingParams, alpha_shift: u32) -> u64 {
    lrelu_plain(params.0.reduce(z), alpha_shift, params.0)
}

/// Garbled L-ReLU over a vector of reals: shares the input, runs the
/// circuit between two in-process parties and opens the result.
#[pyfunction]
#[pyo3(signature = (values, params, alpha_shift = 2, seed = None))]
fn garbled_lrelu(py: Python<'_>, values: Vec<f64>, params: RingParams, alpha_shift: u32, seed: Option<u64>) -> PyResult<Vec<f64>> {
    let p = params.0;
    py.detach(|| {
        let t = RingTensor::encode_slice(vec![values.len()], &values, p)?;
        let (z1, z2) = sharing::share(&t, p, 0, &mut seeded(seed))?;
        let (mut a, mut b) = two_parties(p, OtConfig::test());
        let (r1, r2) = std::thread::scope(|s| {
            let h = s.spawn(|| pvmpc_core::garbled::lrelu::eval_lrelu(&mut b, &z2, alpha_shift));
            (pvmpc_core::garbled::lrelu::eval_lrelu(&mut a, &z1, alpha_shift), h.join().unwrap())
        });
        Ok(sharing::reconstruct(&r1?, &r2?)?.decode_all(p))
    })
    .map_err(py_err)
}

/// Checks a manifest (JSON text) for the under-complete property.
/// Returns `(accepted, reason)`.
#[pyfunction]
fn validate_manifest(json: &str) -> PyResult<(bool, Option<String>)> {
    let m: Manifest = serde_json::from_str(json).map_err(|e| PvmpcError::new_err(format!("MalformedSpec: {e}")))?;
    let spec = m.spec().map_err(py_err)?;
    Ok(match validate_undercomplete(&spec).map_err(py_err)? {
        Verdict::Accept => (true, None),
        Verdict::Reject(why) => (false, Some(why)),
    })
}

fn load_clear_models(dirs: Vec<PathBuf>) -> pvmpc_core::Result<Vec<ClearModel>> {
    let mut models = Vec::new();
    for d in dirs {
        let m = load_model(&d)?;
        models.push(ClearModel::from_manifest(&m.manifest, m.weights, None)?);
    }
    models.sort_by_key(|m| m.user_id);
    Ok(models)
}

fn class_of(o: pvmpc_core::inference::Outcome) -> Option<u32> {
    match o {
        pvmpc_core::inference::Outcome::Class(c) => Some(c),
        pvmpc_core::inference::Outcome::None => None,
    }
}

/// Secure prediction over cleartext model directories (`model.json` plus
/// `weights.bin`): shares everything, runs both parties in-process and
/// checks the result against the cleartext oracle.
#[pyfunction]
#[pyo3(signature = (model_dirs, pixels, uploader, tau, seed = None, test_ot = true))]
fn predict<'py>(
    py: Python<'py>,
    model_dirs: Vec<PathBuf>,
    pixels: Vec<u8>,
    uploader: u32,
    tau: f64,
    seed: Option<u64>,
    test_ot: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let ((result, revealed), oracle) = py
        .detach(|| -> pvmpc_core::Result<_> {
            let models = load_clear_models(model_dirs)?;
            let spec = &models.first().ok_or_else(|| pvmpc_core::Error::Usage("no models".into()))?.spec;
            let p = spec.params;
            let image = pvmpc_core::model::encode_image(&pixels, spec.input_shape.clone(), p)?;
            let mut rng = seeded(seed);
            let sc = build_scenario(&models, &image, Some(tau), uploader, 1, &mut rng)?;
            let ot = if test_ot { OtConfig::test() } else { OtConfig { mode: OtMode::Extended, ..OtConfig::default() } };
            let cfg = RunConfig { party: PartyConfig { ot, ..PartyConfig::default() }, seed, lockstep: true, ..RunConfig::default() };
            let (r1, r2) = run_loopback(&sc.s1, &sc.s2, &cfg);
            let (o1, o2) = (r1?, r2?);
            let mut t = Truncation::lockstep(o1.trunc_log.clone().unwrap_or_default());
            let want = oracle_predict(&sc.oracle_models, &sc.image, sc.tau, uploader, cfg.party.activation, &mut t)?;
            Ok(((o1, o2.audit.revealed_bits), want))
        })
        .map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("outcome", class_of(result.result.outcome))?;
    d.set_item("decision", result.result.decision.to_string())?;
    d.set_item("index", result.result.index)?;
    d.set_item("flag", result.result.flag)?;
    d.set_item("oracle_outcome", class_of(oracle.outcome))?;
    d.set_item("oracle_decision", oracle.decision.to_string())?;
    d.set_item("online_bytes", result.online.bytes_sent + result.online.bytes_recv)?;
    d.set_item("revealed_bits", revealed)?;
    d.set_item("triples_consumed", result.triples_consumed)?;
    Ok(d)
}

/// Runs the `pvmpc` command line with the given arguments and returns its
/// exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv = std::iter::once("pvmpc".to_string()).chain(args).map(Into::into).collect();
    py.detach(|| pvmpc_core::cli::main_with(argv))
}

#[pymodule]
fn pvmpc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PvmpcError", m.py().get_type::<PvmpcError>())?;
    m.add_class::<RingParams>()?;
    m.add_class::<ShareTensor>()?;
    m.add_function(wrap_pyfunction!(share, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(secure_mul, m)?)?;
    m.add_function(wrap_pyfunction!(lrelu, m)?)?;
    m.add_function(wrap_pyfunction!(garbled_lrelu, m)?)?;
    m.add_function(wrap_pyfunction!(validate_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
