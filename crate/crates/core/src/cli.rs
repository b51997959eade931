//! The `pvmpc` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::beaver::{deal_triples, TripleStore};
use crate::error::{Error, Result};
use crate::fixedpoint::{encode, RingParams, RingTensor};
use crate::garbled::ot::{OtConfig, OtMode, DEFAULT_MODULUS_BITS};
use crate::inference::{Decision, Outcome, PredictionRequest, RegisteredModel};
use crate::model::{
    desk_manifest, encode_image, load_model, load_server_models, pgm_to_tensor_order, random_float_weights, read_manifest, read_pgm, save_model,
    share_weights, validate_undercomplete, FloatLayer, ShareFile, Verdict,
};
use crate::net::loopback::{run_loopback, PartyInput, RunConfig};
use crate::net::party::{ActivationMode, PartyConfig};
use crate::net::server::{submit, Report, Server, ServerConfig};
use crate::net::{ENV_LISTEN_ADDR, ENV_PEER_ADDR, ENV_SEED};
use crate::oracle::{oracle_predict, OracleModel, Truncation};
use crate::sharing::{share, PartyId, ShareTensor};

#[derive(Parser, Debug)]
#[command(name = "pvmpc", version, about = "Two-party private image-ownership prediction")]
pub struct Cli {
    /// TOML file whose keys stand in for flags not given on the command line.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Offline triple generation.
    #[command(subcommand)]
    Dealer(DealerCmd),
    /// Model owner and uploader tools.
    #[command(subcommand)]
    User(UserCmd),
    /// Run an s1 or s2 endpoint.
    Serve(ServeArgs),
    /// Submit a prediction and print the result record.
    Predict(PredictArgs),
    /// Cleartext verification runs.
    #[command(subcommand)]
    Oracle(OracleCmd),
}

#[derive(Subcommand, Debug)]
pub enum DealerCmd {
    /// Deal triples for a model set (one --spec per model, in user-id order).
    Gen(DealerGen),
}

#[derive(Args, Debug)]
pub struct DealerGen {
    #[arg(long, required = true)]
    pub spec: Vec<PathBuf>,
    /// Predictions to deal for.
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub out_s1: PathBuf,
    #[arg(long)]
    pub out_s2: PathBuf,
    #[arg(long, env = ENV_SEED, hide = true)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum UserCmd {
    /// Write a desk-scale model directory with synthetic weights.
    GenModel(GenModel),
    ShareWeights(ShareWeights),
    ShareImage(ShareImage),
    ShareThreshold(ShareThreshold),
    /// Share a model into both servers' model directories.
    Register(Register),
    /// Write a constant greymap.
    MakeImage(MakeImage),
}

#[derive(Args, Debug, Clone, Copy)]
pub struct RingArgs {
    #[arg(long, default_value_t = 64)]
    pub k: u32,
    #[arg(long, default_value_t = 16)]
    pub f: u32,
}

impl RingArgs {
    fn params(&self) -> Result<RingParams> {
        RingParams::new(self.k, self.f)
    }
}

#[derive(Args, Debug)]
pub struct GenModel {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub user_id: u32,
    /// Uniform weight range.
    #[arg(long, default_value_t = 0.3)]
    pub scale: f64,
    /// Zero kernels and a constant output bias instead of random weights.
    #[arg(long, allow_negative_numbers = true)]
    pub constant: Option<f64>,
    #[command(flatten)]
    pub ring: RingArgs,
    #[arg(long, env = ENV_SEED, hide = true)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ShareWeights {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out_s1: PathBuf,
    #[arg(long)]
    pub out_s2: PathBuf,
    #[arg(long, env = ENV_SEED, hide = true)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ShareImage {
    /// Greymap (P2/P5, maxval 255).
    #[arg(long)]
    pub img: PathBuf,
    #[command(flatten)]
    pub ring: RingArgs,
    #[arg(long)]
    pub out_s1: PathBuf,
    #[arg(long)]
    pub out_s2: PathBuf,
    #[arg(long, env = ENV_SEED, hide = true)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ShareThreshold {
    #[arg(long, allow_negative_numbers = true)]
    pub tau: f64,
    #[command(flatten)]
    pub ring: RingArgs,
    #[arg(long)]
    pub out_s1: PathBuf,
    #[arg(long)]
    pub out_s2: PathBuf,
    #[arg(long, env = ENV_SEED, hide = true)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct Register {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub server_s1: PathBuf,
    #[arg(long)]
    pub server_s2: PathBuf,
    /// This user's own threshold.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, env = ENV_SEED, hide = true)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct MakeImage {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub value: u8,
    #[arg(long, default_value_t = 16)]
    pub width: usize,
    #[arg(long, default_value_t = 16)]
    pub height: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum RoleArg {
    S1,
    S2,
}

impl From<RoleArg> for PartyId {
    fn from(r: RoleArg) -> PartyId {
        match r {
            RoleArg::S1 => PartyId::S1,
            RoleArg::S2 => PartyId::S2,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OtArg {
    Rsa,
    Extended,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ActivationArg {
    Shift,
    LocalScale,
}

#[derive(Args, Debug, Clone)]
pub struct ProtocolArgs {
    #[arg(long, value_enum, default_value = "extended")]
    pub ot: OtArg,
    #[arg(long, default_value_t = DEFAULT_MODULUS_BITS)]
    pub modulus_bits: usize,
    #[arg(long, value_enum, default_value = "shift")]
    pub activation: ActivationArg,
    #[arg(long, default_value_t = 120_000)]
    pub timeout_ms: u64,
}

impl ProtocolArgs {
    fn party(&self) -> PartyConfig {
        PartyConfig {
            ot: OtConfig {
                mode: match self.ot {
                    OtArg::Rsa => OtMode::Rsa,
                    OtArg::Extended => OtMode::Extended,
                },
                modulus_bits: self.modulus_bits,
            },
            activation: match self.activation {
                ActivationArg::Shift => ActivationMode::Shift,
                ActivationArg::LocalScale => ActivationMode::LocalScale,
            },
            reveal_dissimilarities: false,
        }
    }

    fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, value_enum)]
    pub role: RoleArg,
    /// Directory of registered model directories.
    #[arg(long)]
    pub models: PathBuf,
    /// Triple file, or a directory holding `triples.s1` / `triples.s2`.
    #[arg(long)]
    pub triples: Option<PathBuf>,
    #[arg(long, env = ENV_LISTEN_ADDR)]
    pub listen: String,
    /// s2's address (s1 only).
    #[arg(long, env = ENV_PEER_ADDR)]
    pub peer: Option<String>,
    #[command(flatten)]
    pub ring: RingArgs,
    #[command(flatten)]
    pub protocol: ProtocolArgs,
    #[arg(long, env = ENV_SEED, hide = true)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub uploader: u32,
    /// The two image share files (any order).
    #[arg(long, num_args = 1..=2, required = true)]
    pub img_shares: Vec<PathBuf>,
    /// The two shares of the global threshold.
    #[arg(long, num_args = 1..=2)]
    pub threshold_shares: Vec<PathBuf>,
    #[arg(long)]
    pub s1: Option<String>,
    #[arg(long)]
    pub s2: Option<String>,
    /// Run both parties in this process instead of contacting servers.
    #[arg(long)]
    pub local: bool,
    #[arg(long)]
    pub models_s1: Option<PathBuf>,
    #[arg(long)]
    pub models_s2: Option<PathBuf>,
    #[arg(long)]
    pub triples_s1: Option<PathBuf>,
    #[arg(long)]
    pub triples_s2: Option<PathBuf>,
    /// Triple slot for local runs.
    #[arg(long, default_value_t = 0)]
    pub slot: u64,
    /// One lane per model (local runs).
    #[arg(long)]
    pub parallel: bool,
    #[command(flatten)]
    pub protocol: ProtocolArgs,
    #[arg(long, env = ENV_SEED, hide = true)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum OracleCmd {
    /// Cleartext prediction from model directories with `weights.bin`.
    Eval(OracleEval),
}

#[derive(Args, Debug)]
pub struct OracleEval {
    /// Directory of model directories (each with model.json and weights.bin).
    #[arg(long)]
    pub models: PathBuf,
    #[arg(long)]
    pub img: PathBuf,
    #[arg(long)]
    pub uploader: u32,
    #[arg(long)]
    pub tau: f64,
}

fn rng_from(seed: Option<u64>) -> Result<ChaCha20Rng> {
    match seed {
        Some(s) => Ok(ChaCha20Rng::seed_from_u64(s)),
        None => {
            let mut b = [0u8; 32];
            rand::rngs::OsRng.try_fill_bytes(&mut b).map_err(|e| Error::Randomness(e.to_string()))?;
            Ok(ChaCha20Rng::from_seed(b))
        }
    }
}

fn save_pair(a: ShareFile, b: ShareFile, out1: &Path, out2: &Path) -> Result<()> {
    a.save(out1)?;
    b.save(out2)
}

fn share_pair(t: &RingTensor, params: RingParams, hash: [u8; 32], rng: &mut ChaCha20Rng) -> Result<(ShareFile, ShareFile)> {
    let (a, b) = share(t, params, 0, rng)?;
    Ok((ShareFile { owner: PartyId::S1, params, hash, tensors: vec![a] }, ShareFile { owner: PartyId::S2, params, hash, tensors: vec![b] }))
}

fn load_image(path: &Path, params: RingParams) -> Result<RingTensor> {
    let (w, h, rows) = read_pgm(path)?;
    encode_image(&pgm_to_tensor_order(w, h, &rows), vec![w, h, 1], params)
}

fn dealer_gen(a: &DealerGen) -> Result<()> {
    let mut plan = Vec::new();
    let mut params = None;
    for p in &a.spec {
        let (m, _) = read_manifest(p)?;
        let spec = m.spec()?;
        if params.is_some_and(|q| q != spec.params) {
            return Err(Error::ParamsMismatch("model specs use different rings".into()));
        }
        params = Some(spec.params);
        plan.extend(spec.triple_plan()?);
    }
    let mut rng = rng_from(a.seed)?;
    let (s1, s2) = deal_triples(&plan, a.count, params.unwrap(), &mut rng)?;
    s1.save(&a.out_s1)?;
    s2.save(&a.out_s2)
}

fn gen_model(a: &GenModel) -> Result<()> {
    let params = a.ring.params()?;
    let mut manifest = desk_manifest(a.user_id, params);
    let spec = manifest.spec()?;
    let layers = match a.constant {
        None => random_float_weights(&spec, a.scale, &mut rng_from(a.seed)?),
        Some(c) => {
            manifest.layers.last_mut().unwrap().bias = true;
            let mut l: Vec<FloatLayer> =
                spec.weight_shapes().into_iter().map(|(k, _)| FloatLayer { kernel: vec![0.0; k.iter().product()], bias: None }).collect();
            l.last_mut().unwrap().bias = Some(vec![c]);
            l
        }
    };
    save_model(&a.out, &manifest, &layers)?;
    Ok(())
}

fn share_model(model: &Path, seed: Option<u64>) -> Result<(ShareFile, ShareFile, crate::model::Model)> {
    let m = load_model(model)?;
    if let Verdict::Reject(why) = validate_undercomplete(&m.spec)? {
        return Err(Error::MalformedSpec(why));
    }
    let (a, b) = share_weights(&m.weights, m.spec.params, &mut rng_from(seed)?)?;
    Ok((a.to_share_file(m.spec.params), b.to_share_file(m.spec.params), m))
}

fn register(a: &Register) -> Result<()> {
    let (s1, s2, m) = share_model(&a.model, a.seed)?;
    let name = format!("user{:06}", m.manifest.user_id);
    let mut rng = rng_from(a.seed.map(|s| s ^ 0x5eed))?;
    let tau = a
        .tau
        .map(|t| -> Result<_> { share_pair(&RingTensor::new(vec![1], vec![encode(t, m.spec.params)?.0])?, m.spec.params, [0; 32], &mut rng) })
        .transpose()?;
    for (root, file, tau) in [(&a.server_s1, s1, tau.as_ref().map(|t| &t.0)), (&a.server_s2, s2, tau.as_ref().map(|t| &t.1))] {
        let dir = root.join(&name);
        std::fs::create_dir_all(&dir)?;
        std::fs::copy(a.model.join("model.json"), dir.join("model.json"))?;
        file.save(&dir.join("weights.share"))?;
        if let Some(t) = tau {
            t.save(&dir.join("threshold.share"))?;
        }
    }
    Ok(())
}

fn triples_path(p: &Path, role: PartyId) -> PathBuf {
    if p.is_dir() {
        p.join(format!("triples.{role}"))
    } else {
        p.to_path_buf()
    }
}

fn serve(a: &ServeArgs) -> Result<()> {
    let role: PartyId = a.role.into();
    let cfg = ServerConfig {
        role,
        params: a.ring.params()?,
        models: a.models.clone(),
        triples: a.triples.as_ref().map(|p| triples_path(p, role)),
        listen: a.listen.clone(),
        peer: a.peer.clone(),
        party: a.protocol.party(),
        timeout: a.protocol.timeout(),
        seed: a.seed,
    };
    let server = Server::load(cfg)?;
    let listener = server.bind()?;
    if role == PartyId::S1 {
        server.probe_peer()?;
    }
    eprintln!("{role} listening on {} with {} models", listener.local_addr()?, server.models().len());
    Arc::new(server).serve(listener)
}

/// Reads the two shares of a scalar or image, ordered s1 then s2.
fn share_files(paths: &[PathBuf]) -> Result<[ShareTensor; 2]> {
    if paths.len() != 2 {
        return Err(Error::Usage(format!("expected two share files, got {}", paths.len())));
    }
    let mut a = ShareFile::load(&paths[0])?;
    let mut b = ShareFile::load(&paths[1])?;
    if a.owner == b.owner {
        return Err(Error::OwnerMismatch("both share files belong to the same party".into()));
    }
    if a.owner == PartyId::S2 {
        std::mem::swap(&mut a, &mut b);
    }
    Ok([a.single()?, b.single()?])
}

fn registered(dir: &Path, role: PartyId) -> Result<Vec<RegisteredModel>> {
    Ok(load_server_models(dir, role)?
        .into_iter()
        .map(|m| RegisteredModel { user_id: m.manifest.user_id, spec: m.spec, manifest_hash: m.manifest_hash, weights: m.weights, tau: m.threshold })
        .collect())
}

fn predict_local(a: &PredictArgs, images: [ShareTensor; 2], taus: Option<[ShareTensor; 2]>) -> Result<Report> {
    let need = |p: &Option<PathBuf>, flag: &str| p.clone().ok_or_else(|| Error::Usage(format!("--local needs --{flag}")));
    let m1 = registered(&need(&a.models_s1, "models-s1")?, PartyId::S1)?;
    let m2 = registered(&need(&a.models_s2, "models-s2")?, PartyId::S2)?;
    if m1.is_empty() || m2.is_empty() {
        return Err(Error::Usage("no registered models".into()));
    }
    let t1 = TripleStore::load(&triples_path(&need(&a.triples_s1, "triples-s1")?, PartyId::S1), PartyId::S1)?;
    let t2 = TripleStore::load(&triples_path(&need(&a.triples_s2, "triples-s2")?, PartyId::S2), PartyId::S2)?;
    let session = rng_from(a.seed)?.next_u64() as u128;
    let [i1, i2] = images;
    let (g1, g2) = match taus {
        Some([x, y]) => (Some(x), Some(y)),
        None => (None, None),
    };
    let input = |models, image: ShareTensor, tau: Option<ShareTensor>, triples| PartyInput {
        models,
        request: PredictionRequest { image: image.rebind(session), uploader: a.uploader, tau: tau.map(|t| t.rebind(session)) },
        triples: Arc::new(triples),
    };
    let (s1, s2) = (input(m1, i1, g1, t1), input(m2, i2, g2, t2));
    let cfg = RunConfig {
        party: a.protocol.party(),
        session,
        slot: a.slot,
        seed: a.seed,
        parallel: a.parallel,
        timeout: a.protocol.timeout(),
        ..RunConfig::default()
    };
    let (r1, r2) = run_loopback(&s1, &s2, &cfg);
    let (o1, o2) = (r1?, r2?);
    Report::combine(&Report::from_output(&o1, session), &Report::from_output(&o2, session))
}

fn predict_cmd(a: &PredictArgs) -> Result<Report> {
    let images = share_files(&a.img_shares)?;
    let taus = if a.threshold_shares.is_empty() { None } else { Some(share_files(&a.threshold_shares)?) };
    if a.local {
        return predict_local(a, images, taus);
    }
    let (Some(s1), Some(s2)) = (&a.s1, &a.s2) else {
        return Err(Error::Usage("give --s1 and --s2 addresses, or --local".into()));
    };
    let session = ((rng_from(a.seed)?.next_u64() as u128) << 64) | rng_from(a.seed.map(|s| !s))?.next_u64() as u128;
    submit(s1, s2, session, a.uploader, [&images[0], &images[1]], taus.as_ref().map(|t| [&t[0], &t[1]]), a.protocol.timeout())
}

#[derive(Serialize)]
struct OracleReport {
    outcome: Outcome,
    decision: Decision,
    index: usize,
    flag: bool,
    dissimilarities: Vec<f64>,
}

fn oracle_eval(a: &OracleEval) -> Result<OracleReport> {
    let mut dirs: Vec<PathBuf> =
        std::fs::read_dir(&a.models)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.join("weights.bin").is_file()).collect();
    dirs.sort();
    let mut models = Vec::new();
    for d in dirs {
        let m = load_model(&d)?;
        models.push(OracleModel { user_id: m.manifest.user_id, spec: m.spec, weights: m.weights, tau: None });
    }
    models.sort_by_key(|m| m.user_id);
    let params = models.first().map(|m| m.spec.params).ok_or_else(|| Error::Usage("no models".into()))?;
    let image = load_image(&a.img, params)?;
    let tau = encode(a.tau, params)?.0;
    let p = oracle_predict(&models, &image, Some(tau), a.uploader, ActivationMode::Shift, &mut Truncation::Canonical)?;
    Ok(OracleReport {
        outcome: p.outcome,
        decision: p.decision,
        index: p.index,
        flag: p.flag,
        dissimilarities: p.traces.iter().map(|t| crate::model::decode_scalar(t.dissimilarity, params)).collect(),
    })
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Dealer(DealerCmd::Gen(a)) => dealer_gen(&a),
        Command::User(cmd) => match cmd {
            UserCmd::GenModel(a) => gen_model(&a),
            UserCmd::ShareWeights(a) => {
                let (s1, s2, _) = share_model(&a.model, a.seed)?;
                save_pair(s1, s2, &a.out_s1, &a.out_s2)
            }
            UserCmd::ShareImage(a) => {
                let params = a.ring.params()?;
                let (s1, s2) = share_pair(&load_image(&a.img, params)?, params, [0; 32], &mut rng_from(a.seed)?)?;
                save_pair(s1, s2, &a.out_s1, &a.out_s2)
            }
            UserCmd::ShareThreshold(a) => {
                let params = a.ring.params()?;
                let t = RingTensor::new(vec![1], vec![encode(a.tau, params)?.0])?;
                let (s1, s2) = share_pair(&t, params, [0; 32], &mut rng_from(a.seed)?)?;
                save_pair(s1, s2, &a.out_s1, &a.out_s2)
            }
            UserCmd::Register(a) => register(&a),
            UserCmd::MakeImage(a) => crate::model::write_pgm(&a.out, a.width, a.height, &vec![a.value; a.width * a.height]),
        },
        Command::Serve(a) => serve(&a),
        Command::Predict(a) => print_json(&predict_cmd(&a)?),
        Command::Oracle(OracleCmd::Eval(a)) => print_json(&oracle_eval(&a)?),
    }
}

fn toml_values(v: &toml::Value) -> Vec<String> {
    match v {
        toml::Value::String(s) => vec![s.clone()],
        toml::Value::Array(a) => a.iter().flat_map(toml_values).collect(),
        other => vec![other.to_string()],
    }
}

/// Appends flags from `--config` for every key the chosen subcommand
/// accepts and the command line does not already set.
pub fn apply_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let strs: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let Some(pos) = strs.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(args);
    };
    let path = match strs[pos].strip_prefix("--config=") {
        Some(p) => p.to_string(),
        None => strs.get(pos + 1).cloned().ok_or_else(|| Error::Usage("--config needs a path".into()))?,
    };
    let table: toml::Table = toml::from_str(&std::fs::read_to_string(&path)?).map_err(|e| Error::Usage(format!("{path}: {e}")))?;
    let mut cmd = Cli::command();
    for tok in strs.iter().skip(1) {
        if tok.starts_with('-') {
            continue;
        }
        match cmd.find_subcommand(tok) {
            Some(sub) => cmd = sub.clone(),
            None => continue,
        }
    }
    let mut out = args;
    for (key, value) in &table {
        let flag = format!("--{}", key.replace('_', "-"));
        let accepted = cmd.get_arguments().any(|a| a.get_long() == Some(&flag[2..]));
        if !accepted || flag == "--config" || strs.iter().any(|s| s == &flag || s.starts_with(&format!("{flag}="))) {
            continue;
        }
        match value {
            toml::Value::Boolean(true) => out.push(flag.into()),
            toml::Value::Boolean(false) => {}
            v => {
                for item in toml_values(v) {
                    out.push(flag.clone().into());
                    out.push(item.into());
                }
            }
        }
    }
    Ok(out)
}

/// Entry point shared by the binary: returns the process exit code.
pub fn main_with(args: Vec<OsString>) -> i32 {
    let args = match apply_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: class={} msg={e}", e.class());
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: class={} msg={e}", e.class());
            e.exit_code()
        }
    }
}
