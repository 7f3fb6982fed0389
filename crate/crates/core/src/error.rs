use thiserror::Error;

use crate::coro::{CoState, EventId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("unknown coroutine id {0}")]
    UnknownCoroutine(u16),
    #[error("context cannot be spawned from state {0:?} (already spawned: {1})")]
    RespawnNotStart(CoState, bool),
    #[error("illegal coroutine transition {from:?} -> {to:?}")]
    IllegalTransition { from: CoState, to: CoState },
    #[error("event {0:?} completed twice without reset")]
    DoubleComplete(EventId),
    #[error("wait called outside of a running coroutine")]
    WaitOutsideCoroutine,
    #[error("event {0:?} reset while coroutines are still waiting on it")]
    ResetWithWaiters(EventId),
    #[error("too many suspension points (max {max})")]
    ResumePointOverflow { max: u16 },

    #[error("buffer {0} released while not in use")]
    DoubleRelease(usize),
    #[error("buffer {id} in state {state} cannot do {op}")]
    BufferState {
        id: usize,
        state: &'static str,
        op: &'static str,
    },

    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),

    #[error("decode error: {0}")]
    Decode(String),
    #[error("payload of {len} bytes exceeds {max} bytes")]
    PayloadTooLarge { len: usize, max: usize },
    #[error("no route from {from} to {to}")]
    NoRoute { from: String, to: String },

    #[error("metrics unavailable: {0}")]
    Metrics(String),
    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}
