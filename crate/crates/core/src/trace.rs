//! Timestamped trace records shared by every layer of the simulator.
//!
//! Events are stamped with the recording node's *local* clock, i.e. global
//! virtual time plus that node's configured offset. The CSV layout is
//!
//! ```text
//! t_us,node,kind,subject,frame
//! ```
//!
//! with an empty `frame` column for records that are not tied to a frame.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "t_us,node,kind,subject,frame";

/// Simulated MCUs and peripherals. The discriminants of the first four are
/// the CPX node ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeId {
    Stm32 = 1,
    Esp32 = 2,
    Host = 3,
    Gap8 = 4,
    Nrf51 = 5,
    Camera = 6,
}

impl NodeId {
    pub const ALL: [NodeId; 6] = [
        NodeId::Stm32,
        NodeId::Esp32,
        NodeId::Host,
        NodeId::Gap8,
        NodeId::Nrf51,
        NodeId::Camera,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NodeId::Stm32 => "stm32",
            NodeId::Esp32 => "esp32",
            NodeId::Host => "host",
            NodeId::Gap8 => "gap8",
            NodeId::Nrf51 => "nrf51",
            NodeId::Camera => "camera",
        }
    }

    pub fn index(self) -> usize {
        self as usize - 1
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NodeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NodeId::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown node `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TraceKind {
    Spawn,
    Suspend,
    Resume,
    EventComplete,
    StageStart,
    StageEnd,
    LinkTxStart,
    LinkRxEnd,
    Drop,
    QueueFull,
}

impl TraceKind {
    const ALL: [TraceKind; 10] = [
        TraceKind::Spawn,
        TraceKind::Suspend,
        TraceKind::Resume,
        TraceKind::EventComplete,
        TraceKind::StageStart,
        TraceKind::StageEnd,
        TraceKind::LinkTxStart,
        TraceKind::LinkRxEnd,
        TraceKind::Drop,
        TraceKind::QueueFull,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TraceKind::Spawn => "Spawn",
            TraceKind::Suspend => "Suspend",
            TraceKind::Resume => "Resume",
            TraceKind::EventComplete => "EventComplete",
            TraceKind::StageStart => "StageStart",
            TraceKind::StageEnd => "StageEnd",
            TraceKind::LinkTxStart => "LinkTxStart",
            TraceKind::LinkRxEnd => "LinkRxEnd",
            TraceKind::Drop => "Drop",
            TraceKind::QueueFull => "QueueFull",
        }
    }
}

impl FromStr for TraceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TraceKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Decode(format!("unknown trace kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    /// Local time of the recording node, µs.
    pub t_us: i64,
    pub node: NodeId,
    pub kind: TraceKind,
    pub subject: String,
    pub frame: Option<u64>,
}

/// Append-only event log plus the per-node clock offsets used to stamp it.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    events: Vec<TraceEvent>,
    offsets: [i64; 6],
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_offsets(offsets: &[(NodeId, i64)]) -> Self {
        let mut t = Self::default();
        for &(node, off) in offsets {
            t.offsets[node.index()] = off;
        }
        t
    }

    /// Rebuild a trace from recorded events, e.g. ones read back from CSV.
    /// Offsets are unknown at that point and left at zero.
    pub fn from_events(events: Vec<TraceEvent>) -> Self {
        Trace {
            events,
            offsets: [0; 6],
        }
    }

    pub fn offset(&self, node: NodeId) -> i64 {
        self.offsets[node.index()]
    }

    /// Local clock of `node` at global virtual time `now`.
    pub fn local_time(&self, node: NodeId, now: u64) -> i64 {
        now as i64 + self.offsets[node.index()]
    }

    pub fn record(
        &mut self,
        now: u64,
        node: NodeId,
        kind: TraceKind,
        subject: impl Into<String>,
        frame: Option<u64>,
    ) {
        let t_us = self.local_time(node, now);
        self.events.push(TraceEvent {
            t_us,
            node,
            kind,
            subject: subject.into(),
            frame,
        });
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<TraceEvent> {
        self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

pub fn write_csv<W: Write>(events: &[TraceEvent], mut out: W) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for ev in events {
        match ev.frame {
            Some(f) => writeln!(
                out,
                "{},{},{},{},{}",
                ev.t_us,
                ev.node,
                ev.kind.as_str(),
                ev.subject,
                f
            )?,
            None => writeln!(
                out,
                "{},{},{},{},",
                ev.t_us,
                ev.node,
                ev.kind.as_str(),
                ev.subject
            )?,
        }
    }
    Ok(())
}

pub fn to_csv_string(events: &[TraceEvent]) -> String {
    let mut buf = Vec::new();
    write_csv(events, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("trace CSV is ASCII")
}

pub fn read_csv<R: BufRead>(input: R) -> Result<Vec<TraceEvent>> {
    let mut lines = input.lines();
    match lines.next() {
        Some(Ok(h)) if h == CSV_HEADER => {}
        Some(Ok(h)) => return Err(Error::Decode(format!("bad trace header `{h}`"))),
        Some(Err(e)) => return Err(e.into()),
        None => return Err(Error::Decode("empty trace".into())),
    }
    let mut events = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(Error::Decode(format!(
                "line {}: expected 5 columns, got {}",
                lineno + 2,
                cols.len()
            )));
        }
        let bad = |what: &str| Error::Decode(format!("line {}: bad {what}", lineno + 2));
        events.push(TraceEvent {
            t_us: cols[0].parse().map_err(|_| bad("t_us"))?,
            node: cols[1].parse().map_err(|_| bad("node"))?,
            kind: cols[2].parse()?,
            subject: cols[3].to_string(),
            frame: if cols[4].is_empty() {
                None
            } else {
                Some(cols[4].parse().map_err(|_| bad("frame"))?)
            },
        });
    }
    Ok(events)
}

/// Checks that each node's timestamps never go backwards.
pub fn per_node_monotone(events: &[TraceEvent]) -> bool {
    let mut last = [i64::MIN; 6];
    for ev in events {
        let slot = &mut last[ev.node.index()];
        if ev.t_us < *slot {
            return false;
        }
        *slot = ev.t_us;
    }
    true
}
