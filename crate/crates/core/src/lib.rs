pub mod beaver;
pub mod cli;
pub mod error;
pub mod fixedpoint;
pub mod garbled;
pub mod inference;
pub mod linear;
pub mod model;
pub mod net;
pub mod oracle;
pub mod scenario;
pub mod sharing;

pub use error::{Error, Result};
