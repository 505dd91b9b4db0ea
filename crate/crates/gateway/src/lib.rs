//! Live-session gateway: one engine per session, driven over websockets.
//!
//! Clients connect to `/ws`, receive a snapshot, then a stream of state,
//! metric, event and target frames. Commands they send are queued and
//! applied by the engine thread between ticks, so a session's command log
//! replays to the same run log bit for bit. `GET /health` reports session
//! status as JSON.

pub mod protocol;
pub mod server;
pub mod session;

pub use server::{router, serve};
pub use session::{CommandLog, Session, SessionConfig, SessionOutcome, Status, DEFAULT_DECIMATION};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] ergoswarm_core::error::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("session closed")]
    Closed,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
