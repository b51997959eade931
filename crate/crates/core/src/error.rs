use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the engine can report. `class()` gives the stable
/// machine-readable name printed by the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("value {value} is outside the representable range (|x| < {limit})")]
    Overflow { value: f64, limit: f64 },

    #[error("weight overflow in layer {layer} at index {index}: {value}")]
    WeightOverflow { layer: usize, index: usize, value: f64 },

    #[error("entropy source failed: {0}")]
    Randomness(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("session mismatch: {left:032x} vs {right:032x}")]
    SessionMismatch { left: u128, right: u128 },

    #[error("share owner mismatch: {0}")]
    OwnerMismatch(String),

    #[error("ring parameter mismatch: {0}")]
    ParamsMismatch(String),

    #[error("invalid ring parameters: {0}")]
    InvalidParams(String),

    #[error("no unconsumed triple left for shape {0}")]
    TripleExhausted(String),

    #[error("channel error: {0}")]
    Channel(String),

    #[error("sequence gap: expected {expected}, got {got}")]
    SequenceGap { expected: u64, got: u64 },

    #[error("decode error: {0}")]
    Decode(String),

    #[error("oblivious transfer failed: {0}")]
    OtProtocol(String),

    #[error("garbled table produced no valid label (wire {0})")]
    GarbledTable(usize),

    #[error("malformed reconstructor spec: {0}")]
    MalformedSpec(String),

    #[error("protocol version mismatch: ours {ours}, theirs {theirs}")]
    VersionMismatch { ours: u16, theirs: u16 },

    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("peer aborted: {0}")]
    PeerAborted(String),

    #[error("invalid session state transition: {0}")]
    SessionState(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn class(&self) -> &'static str {
        match self {
            Error::Overflow { .. } | Error::WeightOverflow { .. } => "OverflowError",
            Error::Randomness(_) => "RandomnessError",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::SessionMismatch { .. } => "SessionMismatch",
            Error::OwnerMismatch(_) => "OwnerMismatch",
            Error::ParamsMismatch(_) => "ParamsMismatch",
            Error::InvalidParams(_) => "InvalidParams",
            Error::TripleExhausted(_) => "TripleExhausted",
            Error::Channel(_) => "ChannelError",
            Error::SequenceGap { .. } => "SequenceGap",
            Error::Decode(_) => "DecodeError",
            Error::OtProtocol(_) => "OtProtocolError",
            Error::GarbledTable(_) => "GarbledTableError",
            Error::MalformedSpec(_) => "MalformedSpec",
            Error::VersionMismatch { .. } => "VersionMismatch",
            Error::ManifestMismatch(_) => "ManifestMismatch",
            Error::PeerAborted(_) => "PeerAborted",
            Error::SessionState(_) => "SessionState",
            Error::Usage(_) => "UsageError",
            Error::Io(_) => "IoError",
            Error::Json(_) => "DecodeError",
        }
    }

    /// Process exit code: 2 for usage errors, 3 for peer or manifest
    /// mismatches, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::ParamsMismatch(_) | Error::VersionMismatch { .. } | Error::ManifestMismatch(_) => 3,
            _ => 1,
        }
    }

    /// Payload of the abort frame that reports this error to a peer.
    pub fn abort_payload(&self) -> String {
        format!("{}: {}", self.class(), self)
    }

    /// Rebuilds an error from an abort payload of the form `Class: message`.
    pub fn from_abort(payload: &str) -> Error {
        let Some((class, msg)) = payload.split_once(": ") else {
            return Error::PeerAborted(payload.to_string());
        };
        let msg = msg.to_string();
        match class {
            "UsageError" => Error::Usage(msg),
            "ParamsMismatch" => Error::ParamsMismatch(msg),
            "ManifestMismatch" => Error::ManifestMismatch(msg),
            "TripleExhausted" => Error::TripleExhausted(msg),
            "MalformedSpec" => Error::MalformedSpec(msg),
            "OwnerMismatch" => Error::OwnerMismatch(msg),
            "ShapeMismatch" => Error::ShapeMismatch(msg),
            "DecodeError" => Error::Decode(msg),
            "ChannelError" => Error::Channel(msg),
            _ => Error::PeerAborted(payload.to_string()),
        }
    }
}
