pub mod channel;
pub mod codec;
pub mod frame;
pub mod loopback;
pub mod party;
pub mod server;
pub mod session;
pub mod transport;

pub const ENV_LISTEN_ADDR: &str = "PRIVEDGE_LISTEN_ADDR";
pub const ENV_PEER_ADDR: &str = "PRIVEDGE_PEER_ADDR";
/// Test only: seeds every party's generator for reproducible transcripts.
pub const ENV_SEED: &str = "PRIVEDGE_SEED";
