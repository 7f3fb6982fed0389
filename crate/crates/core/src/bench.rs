//! Wall-clock microbenchmarks of the runtime's hot paths.
//!
//! Each sample times a batch of operations and divides by the batch size,
//! so timer overhead stays out of the per-operation figure.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::coro::{context_runtime_size, ClockMode, Co, EventLoop, RunUntil, Step};
use crate::cpx::{packet_encode, CpxPacket, Payload, FN_APP_STREAM};
use crate::error::{Error, Result};
use crate::trace::NodeId;

pub const MIN_ITERATIONS: u64 = 1_000_000;
const BATCH: u64 = 1_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchKind {
    CtxSwitch,
    EventComplete,
    PacketEncode,
}

impl BenchKind {
    pub const ALL: [BenchKind; 3] = [BenchKind::CtxSwitch, BenchKind::EventComplete, BenchKind::PacketEncode];

    pub fn as_str(self) -> &'static str {
        match self {
            BenchKind::CtxSwitch => "ctx_switch",
            BenchKind::EventComplete => "event_complete",
            BenchKind::PacketEncode => "packet_encode",
        }
    }
}

impl FromStr for BenchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BenchKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::usage(format!("unknown benchmark `{s}`")))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub kind: BenchKind,
    pub iterations: u64,
    pub median_ns: f64,
    pub p99_ns: f64,
    /// Runtime bytes per coroutine context, excluding user arguments.
    pub context_bytes: usize,
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<15} iterations={} median={:.1} ns p99={:.1} ns context={} B (MCU reference: 18 B)",
            self.kind.as_str(),
            self.iterations,
            self.median_ns,
            self.p99_ns,
            self.context_bytes
        )
    }
}

struct Yields {
    left: u64,
}

fn yielder(co: &mut Co<'_, Yields>) -> Result<Step> {
    let w = co.world();
    if w.left == 0 {
        return Ok(Step::Done);
    }
    w.left -= 1;
    Ok(Step::Yield(1))
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() as f64 * q).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

fn sample(iterations: u64, mut batch: impl FnMut(u64) -> Result<()>) -> Result<(u64, Vec<f64>)> {
    let batches = iterations.div_ceil(BATCH).max(1);
    let mut per_op = Vec::with_capacity(batches as usize);
    for _ in 0..batches {
        let t = Instant::now();
        batch(BATCH)?;
        per_op.push(t.elapsed().as_nanos() as f64 / BATCH as f64);
    }
    per_op.sort_by(f64::total_cmp);
    Ok((batches * BATCH, per_op))
}

/// Run `kind` for at least `iterations` operations on a real-time loop.
pub fn microbench(kind: BenchKind, iterations: u64) -> Result<BenchReport> {
    let (done, per_op) = match kind {
        BenchKind::CtxSwitch => {
            // One suspend + resume per yield; spawn/finish amortised over the batch.
            let mut lp: EventLoop<Yields> = EventLoop::new(ClockMode::RealTime);
            let body = lp.register("yielder", yielder);
            let mut w = Yields { left: 0 };
            sample(iterations, |n| {
                w.left = n;
                let ctx = lp.ctx_init(body, 0)?;
                lp.spawn(ctx)?;
                lp.run(&mut w, RunUntil::Idle)
            })?
        }
        BenchKind::EventComplete => {
            let mut lp: EventLoop<()> = EventLoop::new(ClockMode::RealTime);
            let ev = lp.event_init();
            sample(iterations, |n| {
                for _ in 0..n {
                    lp.event_complete(ev)?;
                    lp.event_reset(ev)?;
                }
                Ok(())
            })?
        }
        BenchKind::PacketEncode => {
            let pkt = CpxPacket::new(NodeId::Gap8, NodeId::Host, FN_APP_STREAM, Payload::default());
            sample(iterations, |n| {
                for _ in 0..n {
                    std::hint::black_box(packet_encode(std::hint::black_box(&pkt))?);
                }
                Ok(())
            })?
        }
    };
    Ok(BenchReport {
        kind,
        iterations: done,
        median_ns: percentile(&per_op, 0.5),
        p99_ns: percentile(&per_op, 0.99),
        context_bytes: context_runtime_size(),
    })
}
