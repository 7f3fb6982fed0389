//! Deterministic desk-scale model of a multi-MCU nano-drone software stack:
//! stackless coroutines, multi-buffered pipelines, a zero-copy CPX packet
//! router and the closed-loop scenarios built from them.

pub mod bench;
pub mod coro;
pub mod cpx;
pub mod error;
pub mod oracle;
pub mod pipeline;
pub mod scenarios;
pub mod trace;
pub mod vnode;

pub use error::{Error, Result};
