//! Closed-form steady-state period of a stage graph.
//!
//! Serialized runs take the sum of every stage's total time. Pipelined runs
//! are limited either by the slowest resource or by the buffer pool: a
//! buffer is held from the producer's start until the last holder's last
//! byte is out, so `n` buffers sustain one frame per `hold / n`.

use std::fmt;

use crate::pipeline::{Mode, Stage, StageGraph};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Unavailable(pub String);

impl fmt::Display for Unavailable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "oracle unavailable: {}", self.0)
    }
}

/// Expected steady-state period in µs.
pub fn analytic_oracle(stages: &[Stage], mode: Mode, pool_size: usize) -> Result<f64, Unavailable> {
    let graph = StageGraph::build(stages).map_err(|e| Unavailable(e.to_string()))?;
    if pool_size == 0 {
        return Err(Unavailable("empty buffer pool".into()));
    }
    if stages.iter().any(|s| s.jitter_us > 0) {
        return Err(Unavailable("stochastic stage durations".into()));
    }
    if mode == Mode::Serialized {
        return Ok(stages.iter().map(|s| s.total_us() as f64).sum());
    }
    if graph.resources.len() != stages.len() {
        return Err(Unavailable("stages share a resource".into()));
    }

    // Earliest start of each stage relative to the producer's start.
    let mut start = vec![0u64; stages.len()];
    for &i in &graph.order {
        start[i] = graph.deps[i]
            .iter()
            .map(|&d| start[d] + stages[d].total_us())
            .max()
            .unwrap_or(0);
    }
    let holders: Vec<usize> = (0..stages.len())
        .filter(|&i| i != graph.root && stages[i].holds_buffer)
        .collect();
    let hold = if holders.is_empty() {
        stages[graph.root].total_us()
    } else {
        holders
            .iter()
            .map(|&h| start[h] + stages[h].timing.occupancy_us)
            .max()
            .unwrap_or(0)
    };
    let slowest = stages
        .iter()
        .map(|s| s.timing.occupancy_us)
        .max()
        .unwrap_or(0);
    Ok((slowest as f64).max(hold as f64 / pool_size as f64))
}
