//! Buffer pools and stage scheduling on top of the coroutine runtime.
//!
//! A pipeline is a DAG of stages rooted at a single producer. The producer
//! fills a pool buffer; consumer stages marked `holds_buffer` share it and
//! the buffer returns to the pool on the last release. In serialized mode a
//! single coroutine runs every stage of a frame back to back; in pipelined
//! mode each stage is its own coroutine and stages of consecutive frames
//! overlap on distinct resources.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coro::{Co, CoroutineId, EventId, EventLoop, Micros, RunUntil, Step};
use crate::error::{Error, Result};
use crate::trace::{NodeId, Trace, TraceKind};

/// Receipts skipped before steady-state measurement starts.
pub const STEADY_STATE_SKIP: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BufferState {
    Free,
    Filling,
    Ready,
    InUse(u32),
}

impl BufferState {
    fn name(self) -> &'static str {
        match self {
            BufferState::Free => "Free",
            BufferState::Filling => "Filling",
            BufferState::Ready => "Ready",
            BufferState::InUse(_) => "InUse",
        }
    }
}

#[derive(Clone, Debug)]
pub struct FrameBuffer {
    pub id: usize,
    pub capacity: usize,
    pub state: BufferState,
    pub sequence: Option<u64>,
    pub copy_count: u64,
    data: Vec<u8>,
}

impl FrameBuffer {
    pub fn data(&self) -> &[u8] {
        &self.data
    }
}

/// Outcome of [`BufferPool::acquire`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Acquire {
    Got(usize),
    /// No buffer free. Wait on the event, then [`BufferPool::claim`] the ticket.
    Wait { ev: EventId, ticket: u64 },
}

/// Fixed set of reusable frame buffers. Never allocates after creation.
#[derive(Clone, Debug)]
pub struct BufferPool {
    buffers: Vec<FrameBuffer>,
    waiters: VecDeque<(u64, EventId)>,
    grants: Vec<(u64, usize)>,
    next_ticket: u64,
}

impl BufferPool {
    pub fn new(n: usize, capacity: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("buffer pool needs at least one buffer"));
        }
        let buffers = (0..n)
            .map(|id| FrameBuffer {
                id,
                capacity,
                state: BufferState::Free,
                sequence: None,
                copy_count: 0,
                data: vec![0; capacity],
            })
            .collect();
        Ok(Self {
            buffers,
            waiters: VecDeque::new(),
            grants: Vec::new(),
            next_ticket: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.buffers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.is_empty()
    }

    pub fn total_bytes(&self) -> usize {
        self.buffers.iter().map(|b| b.capacity).sum()
    }

    pub fn buffer(&self, id: usize) -> &FrameBuffer {
        &self.buffers[id]
    }

    pub fn free_count(&self) -> usize {
        self.buffers
            .iter()
            .filter(|b| b.state == BufferState::Free)
            .count()
    }

    pub fn waiting(&self) -> usize {
        self.waiters.len()
    }

    /// Take a free buffer without suspending.
    pub fn try_acquire(&mut self) -> Option<usize> {
        let b = self
            .buffers
            .iter_mut()
            .find(|b| b.state == BufferState::Free)?;
        b.state = BufferState::Filling;
        b.sequence = None;
        Some(b.id)
    }

    /// Take the specific buffer `id` if it is free.
    pub fn take(&mut self, id: usize) -> Result<()> {
        let b = &mut self.buffers[id];
        if b.state != BufferState::Free {
            return Err(Error::BufferState {
                id,
                state: b.state.name(),
                op: "take",
            });
        }
        b.state = BufferState::Filling;
        b.sequence = None;
        Ok(())
    }

    /// Take a free buffer, or register a FIFO waiter that is handed the
    /// next released buffer.
    pub fn acquire<W>(&mut self, lp: &mut EventLoop<W>) -> Acquire {
        if let Some(id) = self.try_acquire() {
            return Acquire::Got(id);
        }
        let ev = lp.event_init();
        self.next_ticket += 1;
        self.waiters.push_back((self.next_ticket, ev));
        Acquire::Wait {
            ev,
            ticket: self.next_ticket,
        }
    }

    /// Buffer granted to a waiter once its event completed.
    pub fn claim(&mut self, ticket: u64) -> Option<usize> {
        let pos = self.grants.iter().position(|&(t, _)| t == ticket)?;
        Some(self.grants.swap_remove(pos).1)
    }

    /// Copy `src` into the buffer being filled. Counts one payload copy.
    pub fn fill(&mut self, id: usize, src: &[u8]) -> Result<()> {
        let b = &mut self.buffers[id];
        if b.state != BufferState::Filling {
            return Err(Error::BufferState {
                id,
                state: b.state.name(),
                op: "fill",
            });
        }
        if src.len() > b.capacity {
            return Err(Error::PayloadTooLarge {
                len: src.len(),
                max: b.capacity,
            });
        }
        b.data[..src.len()].copy_from_slice(src);
        b.copy_count += 1;
        Ok(())
    }

    pub fn mark_ready(&mut self, id: usize, sequence: u64) -> Result<()> {
        let b = &mut self.buffers[id];
        if b.state != BufferState::Filling {
            return Err(Error::BufferState {
                id,
                state: b.state.name(),
                op: "mark_ready",
            });
        }
        b.state = BufferState::Ready;
        b.sequence = Some(sequence);
        Ok(())
    }

    /// Hand a ready buffer to `consumers` concurrent readers.
    pub fn share(&mut self, id: usize, consumers: u32) -> Result<()> {
        let b = &mut self.buffers[id];
        if b.state != BufferState::Ready || consumers == 0 {
            return Err(Error::BufferState {
                id,
                state: b.state.name(),
                op: "share",
            });
        }
        b.state = BufferState::InUse(consumers);
        Ok(())
    }

    /// Drop one consumer reference. Returns true when the buffer went back
    /// to the pool (possibly straight to a waiting acquirer).
    pub fn release<W>(&mut self, lp: &mut EventLoop<W>, id: usize) -> Result<bool> {
        let b = &mut self.buffers[id];
        match b.state {
            BufferState::InUse(n) if n > 1 => {
                b.state = BufferState::InUse(n - 1);
                Ok(false)
            }
            BufferState::InUse(_) => {
                b.state = BufferState::Free;
                if let Some((ticket, ev)) = self.waiters.pop_front() {
                    let b = &mut self.buffers[id];
                    b.state = BufferState::Filling;
                    b.sequence = None;
                    self.grants.push((ticket, id));
                    lp.event_complete(ev)?;
                }
                Ok(true)
            }
            BufferState::Free => Err(Error::DoubleRelease(id)),
            s => Err(Error::BufferState {
                id,
                state: s.name(),
                op: "release",
            }),
        }
    }
}

/// Single-server resource with FIFO hand-off.
#[derive(Clone, Debug, Default)]
pub struct ResourceLock {
    busy: bool,
    waiters: VecDeque<EventId>,
}

impl ResourceLock {
    /// `None` when the resource was taken, otherwise an event that fires
    /// once ownership has been handed over.
    pub fn acquire<W>(&mut self, lp: &mut EventLoop<W>) -> Option<EventId> {
        if !self.busy {
            self.busy = true;
            return None;
        }
        let ev = lp.event_init();
        self.waiters.push_back(ev);
        Some(ev)
    }

    pub fn release<W>(&mut self, lp: &mut EventLoop<W>) -> Result<()> {
        match self.waiters.pop_front() {
            Some(ev) => lp.event_complete(ev),
            None => {
                self.busy = false;
                Ok(())
            }
        }
    }

    pub fn is_busy(&self) -> bool {
        self.busy
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Serialized,
    Pipelined,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OnBusy {
    /// Suspend the producer until a buffer frees.
    Block,
    /// Skip the frame and count a drop.
    Drop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    /// Start the next frame as soon as buffer and producer are available.
    FreeRunning,
    /// Frame `k` becomes available at `k * period_us`.
    Periodic { period_us: Micros, on_busy: OnBusy },
}

/// Busy time of the stage's resource and extra latency until its output
/// is available downstream (e.g. link propagation).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StageTiming {
    pub occupancy_us: Micros,
    pub latency_us: Micros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub name: String,
    pub resource: String,
    pub node: NodeId,
    /// Node that observes the stage's output; differs from `node` for links.
    pub rx_node: NodeId,
    pub timing: StageTiming,
    pub deps: Vec<String>,
    pub holds_buffer: bool,
    /// Emit link records under this name.
    pub link: Option<String>,
    /// Uniform extra occupancy in `[0, jitter_us]`, drawn per frame.
    pub jitter_us: Micros,
}

impl Stage {
    pub fn new(name: &str, resource: &str, occupancy_us: Micros) -> Self {
        Stage {
            name: name.to_string(),
            resource: resource.to_string(),
            node: NodeId::Gap8,
            rx_node: NodeId::Gap8,
            timing: StageTiming {
                occupancy_us,
                latency_us: 0,
            },
            deps: Vec::new(),
            holds_buffer: true,
            link: None,
            jitter_us: 0,
        }
    }

    pub fn after(mut self, dep: &str) -> Self {
        self.deps.push(dep.to_string());
        self
    }

    pub fn on(mut self, node: NodeId) -> Self {
        self.node = node;
        self.rx_node = node;
        self
    }

    pub fn with_latency(mut self, latency_us: Micros) -> Self {
        self.timing.latency_us = latency_us;
        self
    }

    pub fn releases_buffer(mut self, holds: bool) -> Self {
        self.holds_buffer = holds;
        self
    }

    pub fn total_us(&self) -> Micros {
        self.timing.occupancy_us + self.timing.latency_us
    }
}

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub stages: Vec<Stage>,
    pub mode: Mode,
    pub pool_size: usize,
    pub buffer_bytes: usize,
    pub frames: u64,
    pub source: Source,
    /// Stage whose completion counts as a control-sink receipt; defaults to
    /// the last stage.
    pub sink: Option<String>,
    pub seed: u64,
    pub offsets: Vec<(NodeId, i64)>,
}

impl PipelineConfig {
    pub fn new(stages: Vec<Stage>, mode: Mode, pool_size: usize, frames: u64) -> Self {
        PipelineConfig {
            stages,
            mode,
            pool_size,
            buffer_bytes: 0,
            frames,
            source: Source::FreeRunning,
            sink: None,
            seed: 0,
            offsets: Vec::new(),
        }
    }
}

/// Resource usage of one stage execution, global time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Interval {
    pub stage: usize,
    pub resource: usize,
    pub frame: u64,
    pub start: Micros,
    pub busy_end: Micros,
    pub end: Micros,
}

#[derive(Debug)]
pub struct PipelineRun {
    pub trace: Trace,
    /// `(frame, global time)` of sink receipts in completion order.
    pub sink_times: Vec<(u64, Micros)>,
    /// Global start time of the producer stage per frame.
    pub capture_starts: Vec<Option<Micros>>,
    /// Global time each frame's buffer became ready.
    pub ready_times: Vec<(u64, Micros)>,
    pub delivered: u64,
    pub dropped: u64,
    pub intervals: Vec<Interval>,
    pub resources: Vec<String>,
    pub end_time: Micros,
    pub max_buffers_in_use: usize,
}

impl PipelineRun {
    /// Mean sink inter-arrival time after skipping the first `skip` receipts.
    pub fn steady_period_us(&self, skip: usize) -> Option<f64> {
        let t: Vec<Micros> = self.sink_times.iter().skip(skip).map(|&(_, t)| t).collect();
        if t.len() < 2 {
            return None;
        }
        Some((t[t.len() - 1] - t[0]) as f64 / (t.len() - 1) as f64)
    }

    /// Largest number of overlapping intervals on any single resource.
    pub fn resource_overlap_free(&self) -> bool {
        for r in 0..self.resources.len() {
            let mut iv: Vec<(Micros, Micros)> = self
                .intervals
                .iter()
                .filter(|i| i.resource == r)
                .map(|i| (i.start, i.busy_end))
                .collect();
            iv.sort_unstable();
            if iv.windows(2).any(|w| w[1].0 < w[0].1) {
                return false;
            }
        }
        true
    }
}

/// Validated stage graph: topological order, resource indices, root.
#[derive(Clone, Debug)]
pub struct StageGraph {
    pub order: Vec<usize>,
    pub deps: Vec<Vec<usize>>,
    pub resource_of: Vec<usize>,
    pub resources: Vec<String>,
    pub root: usize,
}

impl StageGraph {
    pub fn build(stages: &[Stage]) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::config("pipeline has no stages"));
        }
        let index = |name: &str| stages.iter().position(|s| s.name == name);
        for (i, s) in stages.iter().enumerate() {
            if index(&s.name) != Some(i) {
                return Err(Error::config(format!("duplicate stage `{}`", s.name)));
            }
            if s.name.contains(',') || s.name.is_empty() {
                return Err(Error::config(format!("invalid stage name `{}`", s.name)));
            }
        }
        let mut deps = Vec::with_capacity(stages.len());
        for s in stages {
            let mut d = Vec::new();
            for name in &s.deps {
                d.push(index(name).ok_or_else(|| {
                    Error::config(format!("stage `{}` depends on unknown `{name}`", s.name))
                })?);
            }
            deps.push(d);
        }
        let roots: Vec<usize> = (0..stages.len()).filter(|&i| deps[i].is_empty()).collect();
        if roots.len() != 1 {
            return Err(Error::config(format!(
                "stage graph must have exactly one producer, found {}",
                roots.len()
            )));
        }

        // Kahn's algorithm, lowest index first for a stable order.
        let mut indeg: Vec<usize> = deps.iter().map(Vec::len).collect();
        let mut order = Vec::with_capacity(stages.len());
        let mut ready: Vec<usize> = roots.clone();
        while let Some(i) = ready.iter().min().copied() {
            ready.retain(|&r| r != i);
            order.push(i);
            for (j, d) in deps.iter().enumerate() {
                for &k in d {
                    if k == i {
                        indeg[j] -= 1;
                        if indeg[j] == 0 {
                            ready.push(j);
                        }
                    }
                }
            }
        }
        if order.len() != stages.len() {
            return Err(Error::config("stage graph contains a cycle"));
        }

        let mut resources: Vec<String> = Vec::new();
        let resource_of = stages
            .iter()
            .map(|s| match resources.iter().position(|r| *r == s.resource) {
                Some(i) => i,
                None => {
                    resources.push(s.resource.clone());
                    resources.len() - 1
                }
            })
            .collect();
        Ok(StageGraph {
            order,
            deps,
            resource_of,
            resources,
            root: roots[0],
        })
    }
}

#[derive(Default)]
struct StageCursor {
    next_frame: u64,
    dep_cursor: usize,
    ticket: Option<u64>,
    buffer: Option<usize>,
    serial_pos: usize,
    busy_until: Micros,
    start: Micros,
}

struct PipeWorld {
    stages: Vec<Stage>,
    graph: StageGraph,
    frames: u64,
    source: Source,
    sink: usize,
    seed: u64,
    holders: u32,
    pool: BufferPool,
    locks: Vec<ResourceLock>,
    cursors: Vec<StageCursor>,
    done: Vec<Vec<Option<EventId>>>,
    frame_buffer: Vec<Option<usize>>,
    /// Frames the producer dropped; consumers pass them through untouched.
    skipped: Vec<bool>,
    deliveries: Vec<(usize, u64, Micros)>,
    deliver_id: CoroutineId,
    sink_times: Vec<(u64, Micros)>,
    capture_starts: Vec<Option<Micros>>,
    ready_times: Vec<(u64, Micros)>,
    intervals: Vec<Interval>,
    dropped: u64,
    max_in_use: usize,
}

impl PipeWorld {
    fn done_event(&mut self, lp: &mut EventLoop<PipeWorld>, stage: usize, frame: u64) -> EventId {
        let slot = &mut self.done[stage][frame as usize];
        *slot.get_or_insert_with(|| lp.event_init())
    }

    fn occupancy(&self, stage: usize, frame: u64) -> Micros {
        let s = &self.stages[stage];
        s.timing.occupancy_us + jitter(self.seed, stage, frame, s.jitter_us)
    }

    fn note_in_use(&mut self) {
        let used = self.pool.len() - self.pool.free_count();
        self.max_in_use = self.max_in_use.max(used);
    }
}

/// Deterministic per-(stage, frame) jitter, independent of event order.
pub fn jitter(seed: u64, stage: usize, frame: u64, max_us: Micros) -> Micros {
    if max_us == 0 {
        return 0;
    }
    let key = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((stage as u64) << 40)
        .wrapping_add(frame);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.gen_range(0..=max_us)
}

fn record_start(co: &mut Co<'_, PipeWorld>, stage: usize, frame: u64) {
    let (lp, w) = co.parts();
    let s = &w.stages[stage];
    lp.record(s.node, TraceKind::StageStart, s.name.clone(), Some(frame));
    if let Some(link) = &s.link {
        lp.record(s.node, TraceKind::LinkTxStart, link.clone(), Some(frame));
    }
    if stage == w.graph.root {
        w.capture_starts[frame as usize] = Some(lp.now());
    }
}

/// Output of `stage` for `frame` is available: trace, completion event,
/// buffer bookkeeping, sink receipt.
fn finish(
    lp: &mut EventLoop<PipeWorld>,
    w: &mut PipeWorld,
    stage: usize,
    frame: u64,
    release_buffer: bool,
) -> Result<()> {
    let now = lp.now();
    let s = &w.stages[stage];
    if let Some(link) = &s.link {
        lp.record(s.rx_node, TraceKind::LinkRxEnd, link.clone(), Some(frame));
    }
    lp.record(s.rx_node, TraceKind::StageEnd, s.name.clone(), Some(frame));
    let holds = s.holds_buffer;
    let buf = w.frame_buffer[frame as usize];
    if stage == w.graph.root {
        let id = buf.expect("producer finished without a buffer");
        w.pool.mark_ready(id, frame)?;
        w.ready_times.push((frame, now));
        if w.holders == 0 {
            w.pool.share(id, 1)?;
            w.pool.release(lp, id)?;
        } else {
            w.pool.share(id, w.holders)?;
        }
    } else if holds && release_buffer {
        w.pool.release(lp, buf.expect("consumer without a buffer"))?;
    }
    if stage == w.sink {
        w.sink_times.push((frame, now));
    }
    let ev = w.done_event(lp, stage, frame);
    lp.event_complete(ev)
}

fn deliver_body(co: &mut Co<'_, PipeWorld>) -> Result<Step> {
    let i = co.args();
    let (stage, frame, at) = co.world().deliveries[i];
    match co.resume_point() {
        0 => {
            let ev = co.sleep_until(at);
            co.wait(ev, 1)
        }
        _ => {
            let (lp, w) = co.parts();
            finish(lp, w, stage, frame, false)?;
            Ok(Step::Done)
        }
    }
}

mod pt {
    pub const TOP: u16 = 1;
    pub const RELEASED_SLOT: u16 = 2;
    pub const AFTER_TICK: u16 = 3;
    pub const GOT_BUFFER: u16 = 4;
    pub const DEPS: u16 = 5;
    pub const HAVE_RESOURCE: u16 = 6;
    pub const BUSY_DONE: u16 = 7;
    pub const SERIAL_STAGE_DONE: u16 = 8;
}

/// Producer side shared by both modes: wait for the frame slot and take a
/// buffer. Returns `Ok(None)` once the buffer is held.
fn producer_prologue(co: &mut Co<'_, PipeWorld>, cursor: usize) -> Result<Option<Step>> {
    let point = co.resume_point();
    let frame = co.world().cursors[cursor].next_frame;
    {
        match point {
            0 | pt::TOP => {
                if frame >= co.world().frames {
                    return Ok(Some(Step::Done));
                }
                match co.world().source {
                    Source::FreeRunning => producer_take(co, cursor, frame),
                    Source::Periodic { period_us, .. } => {
                        let ev = co.sleep_until(frame * period_us);
                        co.wait(ev, pt::RELEASED_SLOT).map(Some)
                    }
                }
            }
            pt::RELEASED_SLOT => {
                // Let same-instant releases run before checking the pool.
                Ok(Some(Step::Yield(pt::AFTER_TICK)))
            }
            pt::AFTER_TICK => producer_take(co, cursor, frame),
            pt::GOT_BUFFER => {
                let w = co.world();
                if let Some(ticket) = w.cursors[cursor].ticket.take() {
                    let id = w.pool.claim(ticket).expect("granted buffer");
                    w.cursors[cursor].buffer = Some(id);
                }
                let id = w.cursors[cursor].buffer.expect("buffer held");
                w.frame_buffer[frame as usize] = Some(id);
                w.note_in_use();
                Ok(None)
            }
            p => Err(Error::usage(format!("producer resumed at unknown point {p}"))),
        }
    }
}

fn producer_take(co: &mut Co<'_, PipeWorld>, cursor: usize, frame: u64) -> Result<Option<Step>> {
    let on_busy = match co.world().source {
        Source::Periodic { on_busy, .. } => on_busy,
        Source::FreeRunning => OnBusy::Block,
    };
    let (lp, w) = co.parts();
    match on_busy {
        OnBusy::Drop => match w.pool.try_acquire() {
            Some(id) => {
                w.cursors[cursor].buffer = Some(id);
                Ok(Some(Step::Jump(pt::GOT_BUFFER)))
            }
            None => {
                let name = w.stages[w.graph.root].name.clone();
                let node = w.stages[w.graph.root].node;
                lp.record(node, TraceKind::Drop, name, Some(frame));
                w.dropped += 1;
                w.skipped[frame as usize] = true;
                let ev = w.done_event(lp, w.graph.root, frame);
                lp.event_complete(ev)?;
                w.cursors[cursor].next_frame += 1;
                Ok(Some(Step::Jump(pt::TOP)))
            }
        },
        OnBusy::Block => match w.pool.acquire(lp) {
            Acquire::Got(id) => {
                w.cursors[cursor].buffer = Some(id);
                Ok(Some(Step::Jump(pt::GOT_BUFFER)))
            }
            Acquire::Wait { ev, ticket } => {
                w.cursors[cursor].ticket = Some(ticket);
                co.wait(ev, pt::GOT_BUFFER).map(Some)
            }
        },
    }
}

/// One coroutine per stage. args = stage index.
fn stage_body(co: &mut Co<'_, PipeWorld>) -> Result<Step> {
    let stage = co.args();
    let is_root = stage == co.world().graph.root;
    let point = co.resume_point();
    let frame = co.world().cursors[stage].next_frame;
    {
        match point {
            0 | pt::TOP | pt::RELEASED_SLOT | pt::AFTER_TICK | pt::GOT_BUFFER if is_root => {
                if let Some(step) = producer_prologue(co, stage)? {
                    return Ok(step);
                }
                acquire_resource(co, stage)
            }
            0 | pt::TOP => {
                if frame >= co.world().frames {
                    return Ok(Step::Done);
                }
                co.world().cursors[stage].dep_cursor = 0;
                deps_step(co, stage, frame)
            }
            pt::DEPS => deps_step(co, stage, frame),
            pt::HAVE_RESOURCE => {
                record_start(co, stage, frame);
                let occ = co.world().occupancy(stage, frame);
                let now = co.now();
                let w = co.world();
                w.cursors[stage].start = now;
                w.cursors[stage].busy_until = now + occ;
                let ev = co.sleep_until(now + occ);
                co.wait(ev, pt::BUSY_DONE)
            }
            pt::BUSY_DONE => {
                let now = co.now();
                let (lp, w) = co.parts();
                let res = w.graph.resource_of[stage];
                w.locks[res].release(lp)?;
                let latency = w.stages[stage].timing.latency_us;
                let start = w.cursors[stage].start;
                w.intervals.push(Interval {
                    stage,
                    resource: res,
                    frame,
                    start,
                    busy_end: now,
                    end: now + latency,
                });
                // Holders are done with the buffer once the last byte left.
                if stage != w.graph.root && w.stages[stage].holds_buffer {
                    let buf = w.frame_buffer[frame as usize].expect("consumer without a buffer");
                    w.pool.release(lp, buf)?;
                }
                if latency == 0 {
                    finish(lp, w, stage, frame, false)?;
                } else {
                    w.deliveries.push((stage, frame, now + latency));
                    let idx = w.deliveries.len() - 1;
                    let deliver = w.deliver_id;
                    co.spawn(deliver, idx)?;
                }
                let w = co.world();
                w.cursors[stage].next_frame += 1;
                w.cursors[stage].buffer = None;
                Ok(Step::Jump(pt::TOP))
            }
            p => Err(Error::usage(format!("stage resumed at unknown point {p}"))),
        }
    }
}

fn deps_step(co: &mut Co<'_, PipeWorld>, stage: usize, frame: u64) -> Result<Step> {
    loop {
        let (lp, w) = co.parts();
        let cursor = w.cursors[stage].dep_cursor;
        let Some(&dep) = w.graph.deps[stage].get(cursor) else {
            break;
        };
        w.cursors[stage].dep_cursor += 1;
        let ev = w.done_event(lp, dep, frame);
        if !lp.event_completed(ev) {
            return co.wait(ev, pt::DEPS);
        }
    }
    let (lp, w) = co.parts();
    if w.skipped[frame as usize] {
        let ev = w.done_event(lp, stage, frame);
        lp.event_complete(ev)?;
        w.cursors[stage].next_frame += 1;
        return Ok(Step::Jump(pt::TOP));
    }
    acquire_resource(co, stage)
}

fn acquire_resource(co: &mut Co<'_, PipeWorld>, stage: usize) -> Result<Step> {
    let (lp, w) = co.parts();
    let res = w.graph.resource_of[stage];
    match w.locks[res].acquire(lp) {
        Some(ev) => co.wait(ev, pt::HAVE_RESOURCE),
        None => Ok(Step::Jump(pt::HAVE_RESOURCE)),
    }
}

/// Serialized execution: one coroutine, stages back to back. args unused.
fn serial_body(co: &mut Co<'_, PipeWorld>) -> Result<Step> {
    let cursor = co.world().graph.root;
    let point = co.resume_point();
    let frame = co.world().cursors[cursor].next_frame;
    {
        match point {
            pt::SERIAL_STAGE_DONE => {
                let (lp, w) = co.parts();
                let pos = w.cursors[cursor].serial_pos;
                let stage = w.graph.order[pos];
                let start = w.cursors[cursor].start;
                let res = w.graph.resource_of[stage];
                let now = lp.now();
                w.intervals.push(Interval {
                    stage,
                    resource: res,
                    frame,
                    start,
                    busy_end: start + w.occupancy(stage, frame),
                    end: now,
                });
                finish(lp, w, stage, frame, true)?;
                w.cursors[cursor].serial_pos += 1;
                if w.cursors[cursor].serial_pos == w.graph.order.len() {
                    w.cursors[cursor].next_frame += 1;
                    w.cursors[cursor].buffer = None;
                    return Ok(Step::Jump(pt::TOP));
                }
                serial_run_stage(co, cursor, frame)
            }
            _ => {
                if let Some(step) = producer_prologue(co, cursor)? {
                    return Ok(step);
                }
                co.world().cursors[cursor].serial_pos = 0;
                serial_run_stage(co, cursor, frame)
            }
        }
    }
}

fn serial_run_stage(co: &mut Co<'_, PipeWorld>, cursor: usize, frame: u64) -> Result<Step> {
    let pos = co.world().cursors[cursor].serial_pos;
    let stage = co.world().graph.order[pos];
    record_start(co, stage, frame);
    let now = co.now();
    let total = co.world().occupancy(stage, frame) + co.world().stages[stage].timing.latency_us;
    co.world().cursors[cursor].start = now;
    let ev = co.sleep_until(now + total);
    co.wait(ev, pt::SERIAL_STAGE_DONE)
}

pub fn pipeline_run(cfg: &PipelineConfig) -> Result<PipelineRun> {
    let graph = StageGraph::build(&cfg.stages)?;
    let sink = match &cfg.sink {
        Some(name) => cfg
            .stages
            .iter()
            .position(|s| &s.name == name)
            .ok_or_else(|| Error::config(format!("unknown sink stage `{name}`")))?,
        None => cfg.stages.len() - 1,
    };
    if let Source::Periodic { period_us: 0, .. } = cfg.source {
        return Err(Error::config("periodic source needs a nonzero period"));
    }
    let holders = cfg
        .stages
        .iter()
        .enumerate()
        .filter(|&(i, s)| i != graph.root && s.holds_buffer)
        .count() as u32;
    let pool = BufferPool::new(cfg.pool_size, cfg.buffer_bytes)?;
    let n = cfg.stages.len();
    let frames = cfg.frames as usize;
    let mut lp: EventLoop<PipeWorld> = EventLoop::virtual_time();
    lp.set_trace(Trace::with_offsets(&cfg.offsets));
    let mut world = PipeWorld {
        stages: cfg.stages.clone(),
        locks: vec![ResourceLock::default(); graph.resources.len()],
        graph,
        frames: cfg.frames,
        source: cfg.source,
        sink,
        seed: cfg.seed,
        holders,
        pool,
        cursors: (0..n).map(|_| StageCursor::default()).collect(),
        done: vec![vec![None; frames]; n],
        frame_buffer: vec![None; frames],
        skipped: vec![false; frames],
        deliveries: Vec::new(),
        sink_times: Vec::new(),
        capture_starts: vec![None; frames],
        ready_times: Vec::new(),
        intervals: Vec::new(),
        dropped: 0,
        max_in_use: 0,
        deliver_id: lp.register("deliver", deliver_body),
    };

    match cfg.mode {
        Mode::Serialized => {
            let id = lp.register("serial", serial_body);
            let node = cfg.stages[world.graph.root].node;
            let ctx = lp.ctx_init(id, 0)?.with_node(node);
            lp.spawn(ctx)?;
        }
        Mode::Pipelined => {
            let id = lp.register("stage", stage_body);
            for i in world.graph.order.clone() {
                let ctx = lp.ctx_init(id, i)?.with_node(cfg.stages[i].node);
                lp.spawn(ctx)?;
            }
        }
    }
    lp.run(&mut world, RunUntil::Idle)?;

    let end_time = lp.now();
    let delivered = world.sink_times.len() as u64;
    Ok(PipelineRun {
        trace: lp.take_trace(),
        sink_times: world.sink_times,
        capture_starts: world.capture_starts,
        ready_times: world.ready_times,
        delivered,
        dropped: world.dropped,
        intervals: world.intervals,
        resources: world.graph.resources,
        end_time,
        max_buffers_in_use: world.max_in_use,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_stage() -> Vec<Stage> {
        vec![
            Stage::new("capture", "udma", 8_000),
            Stage::new("inference", "cluster", 20_830).after("capture"),
            Stage::new("tx", "spi", 6_000).after("capture"),
        ]
    }

    #[test]
    fn pool_create_rejects_zero() {
        assert!(matches!(BufferPool::new(0, 10), Err(Error::Config(_))));
        let p = BufferPool::new(2, 25_600).unwrap();
        assert_eq!(p.total_bytes(), 51_200);
        assert_eq!(p.free_count(), 2);
    }

    #[test]
    fn acquire_release_roundtrip() {
        let mut lp: EventLoop<()> = EventLoop::virtual_time();
        let mut p = BufferPool::new(1, 4).unwrap();
        let Acquire::Got(id) = p.acquire(&mut lp) else { panic!() };
        assert_eq!(p.buffer(id).state, BufferState::Filling);
        p.mark_ready(id, 0).unwrap();
        p.share(id, 1).unwrap();
        assert!(p.release(&mut lp, id).unwrap());
        assert_eq!(p.buffer(id).state, BufferState::Free);
        assert_eq!(p.release(&mut lp, id), Err(Error::DoubleRelease(id)));
    }

    #[test]
    fn exhausted_pool_hands_off_to_waiter() {
        let mut lp: EventLoop<()> = EventLoop::virtual_time();
        let mut p = BufferPool::new(1, 4).unwrap();
        let Acquire::Got(id) = p.acquire(&mut lp) else { panic!() };
        let Acquire::Wait { ev, ticket } = p.acquire(&mut lp) else { panic!() };
        assert!(!lp.event_completed(ev));
        p.mark_ready(id, 0).unwrap();
        p.share(id, 2).unwrap();
        assert!(!p.release(&mut lp, id).unwrap());
        assert!(!lp.event_completed(ev));
        assert!(p.release(&mut lp, id).unwrap());
        assert!(lp.event_completed(ev));
        assert_eq!(p.claim(ticket), Some(id));
        assert_eq!(p.buffer(id).state, BufferState::Filling);
    }

    #[test]
    fn fill_counts_copies() {
        let mut p = BufferPool::new(1, 4).unwrap();
        let id = p.try_acquire().unwrap();
        p.fill(id, &[1, 2, 3]).unwrap();
        assert_eq!(p.buffer(id).copy_count, 1);
        assert_eq!(&p.buffer(id).data()[..3], &[1, 2, 3]);
        assert!(p.fill(id, &[0; 5]).is_err());
    }

    #[test]
    fn cycle_and_unknown_dep_rejected() {
        let cyc = vec![
            Stage::new("a", "r0", 1),
            Stage::new("b", "r1", 1).after("a").after("c"),
            Stage::new("c", "r2", 1).after("b"),
        ];
        assert!(matches!(StageGraph::build(&cyc), Err(Error::Config(m)) if m.contains("cycle")));
        let unknown = vec![Stage::new("a", "r0", 1), Stage::new("b", "r1", 1).after("zz")];
        assert!(StageGraph::build(&unknown).is_err());
    }

    #[test]
    fn serialized_period_is_sum() {
        let cfg = PipelineConfig::new(three_stage(), Mode::Serialized, 2, 60);
        let run = pipeline_run(&cfg).unwrap();
        assert_eq!(run.steady_period_us(STEADY_STATE_SKIP), Some(34_830.0));
    }

    #[test]
    fn pipelined_period_is_max() {
        let cfg = PipelineConfig::new(three_stage(), Mode::Pipelined, 2, 60);
        let run = pipeline_run(&cfg).unwrap();
        assert_eq!(run.steady_period_us(STEADY_STATE_SKIP), Some(20_830.0));
        assert!(run.resource_overlap_free());
        assert!(run.max_buffers_in_use <= 2);
    }

    #[test]
    fn single_stage_identity() {
        for mode in [Mode::Serialized, Mode::Pipelined] {
            let cfg = PipelineConfig::new(vec![Stage::new("only", "r", 5_000)], mode, 2, 40);
            let run = pipeline_run(&cfg).unwrap();
            assert_eq!(run.steady_period_us(STEADY_STATE_SKIP), Some(5_000.0));
        }
    }

    #[test]
    fn pool_of_one_serializes_two_stage() {
        let stages = vec![
            Stage::new("capture", "udma", 3_000),
            Stage::new("infer", "cluster", 5_000).after("capture"),
        ];
        let ser = pipeline_run(&PipelineConfig::new(stages.clone(), Mode::Serialized, 1, 40)).unwrap();
        let pip = pipeline_run(&PipelineConfig::new(stages, Mode::Pipelined, 1, 40)).unwrap();
        assert_eq!(ser.steady_period_us(10), pip.steady_period_us(10));
    }

    #[test]
    fn shared_resource_never_overlaps() {
        let stages = vec![
            Stage::new("capture", "udma", 2_000),
            Stage::new("a", "cluster", 3_000).after("capture"),
            Stage::new("b", "cluster", 4_000).after("capture"),
        ];
        let run = pipeline_run(&PipelineConfig::new(stages, Mode::Pipelined, 3, 50)).unwrap();
        assert!(run.resource_overlap_free());
        assert_eq!(run.steady_period_us(10), Some(7_000.0));
    }

    #[test]
    fn every_stage_start_has_end() {
        let run = pipeline_run(&PipelineConfig::new(three_stage(), Mode::Pipelined, 2, 30)).unwrap();
        let starts = run
            .trace
            .events()
            .iter()
            .filter(|e| e.kind == TraceKind::StageStart)
            .count();
        let ends = run
            .trace
            .events()
            .iter()
            .filter(|e| e.kind == TraceKind::StageEnd)
            .count();
        assert_eq!(starts, 90);
        assert_eq!(starts, ends);
    }

    #[test]
    fn latency_does_not_limit_throughput() {
        let stages = vec![
            Stage::new("capture", "udma", 5_000),
            Stage::new("link", "wifi", 4_000).after("capture").with_latency(50_000),
        ];
        let run = pipeline_run(&PipelineConfig::new(stages, Mode::Pipelined, 2, 60)).unwrap();
        assert_eq!(run.steady_period_us(10), Some(5_000.0));
    }
}
