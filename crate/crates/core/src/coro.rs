//! Stackless cooperative coroutines driven by a single event loop.
//!
//! A coroutine body is a plain function over an explicit state machine: it
//! reads [`Co::resume_point`] to decide where to continue and returns a
//! [`Step`] describing how it wants to suspend. Nothing survives a
//! suspension except the context header and whatever the body stored in
//! `args`-reachable memory (the world `W`). The loop owns one scratch stack
//! that all bodies share while running.
//!
//! ```text
//!   Start ──► Running ──► Ended
//!               │  ▲
//!               ▼  │
//!          Suspended(p)
//! ```
//!
//! Waiters on an [`EventId`] are resumed in registration order. The loop
//! runs in virtual time by default: `now` only moves when the ready list is
//! empty, jumping to the earliest timer deadline.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::num::NonZeroU32;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::trace::{NodeId, Trace, TraceKind};

pub type Micros = u64;

/// Resume point of a context that has not run yet.
pub const RESUME_START: u16 = 0;
/// Resume point of a context whose body returned [`Step::Done`].
pub const RESUME_ENDED: u16 = u16::MAX;

/// Size of the scratch stack shared by all coroutines of one loop.
pub const SHARED_STACK_BYTES: usize = 256;

const JOIN_COROUTINE: CoroutineId = CoroutineId(0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaskId(NonZeroU32);

impl TaskId {
    fn from_index(i: usize) -> Self {
        TaskId(NonZeroU32::new(i as u32 + 1).expect("task table overflow"))
    }

    pub fn index(self) -> usize {
        self.0.get() as usize - 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventId(u32);

impl EventId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CoroutineId(u16);

impl CoroutineId {
    pub fn raw(self) -> u16 {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CoState {
    Start,
    Running,
    Suspended(u16),
    Ended,
}

impl CoState {
    pub fn can_transition(self, to: CoState) -> bool {
        matches!(
            (self, to),
            (CoState::Start, CoState::Running)
                | (CoState::Running, CoState::Suspended(_))
                | (CoState::Running, CoState::Ended)
                | (CoState::Suspended(_), CoState::Running)
        )
    }

    pub fn transition(self, to: CoState) -> Result<CoState> {
        if self.can_transition(to) {
            Ok(to)
        } else {
            Err(Error::IllegalTransition { from: self, to })
        }
    }
}

/// Runtime bookkeeping of one coroutine instance, excluding user args.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContextHeader {
    coroutine: CoroutineId,
    resume_point: u16,
    state: CoState,
    resume_task: Option<TaskId>,
    node: NodeId,
}

/// Execution context of a coroutine instance: header plus one
/// reference-sized argument.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoroutineContext {
    header: ContextHeader,
    args: usize,
}

impl CoroutineContext {
    pub fn state(&self) -> CoState {
        self.header.state
    }

    pub fn resume_point(&self) -> u16 {
        self.header.resume_point
    }

    pub fn resume_task(&self) -> Option<TaskId> {
        self.header.resume_task
    }

    pub fn coroutine(&self) -> CoroutineId {
        self.header.coroutine
    }

    pub fn args(&self) -> usize {
        self.args
    }

    pub fn node(&self) -> NodeId {
        self.header.node
    }

    pub fn with_node(mut self, node: NodeId) -> Self {
        self.header.node = node;
        self
    }
}

/// Bytes of per-instance runtime state, not counting user args.
pub const fn context_runtime_size() -> usize {
    std::mem::size_of::<ContextHeader>()
}

/// What a body asks the loop to do when it stops running.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    /// Suspend on the event unless it already completed; continue at the
    /// given point either way.
    Wait(EventId, u16),
    /// Go to the back of the ready list and continue at the given point.
    Yield(u16),
    /// Continue at the given point in the same pass, without suspending.
    Jump(u16),
    Done,
}

pub type CoBody<W> = fn(&mut Co<'_, W>) -> Result<Step>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClockMode {
    VirtualTime,
    /// Wall-clock time; only meant for microbenchmarks.
    RealTime,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunUntil {
    Idle,
    Time(Micros),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoopStats {
    /// Number of times a task was taken off the ready list and run.
    pub iterations: u64,
    pub suspensions: u64,
    pub resumptions: u64,
    pub completions: u64,
    pub spawns: u64,
}

struct Registered<W> {
    name: &'static str,
    body: CoBody<W>,
}

struct TaskSlot {
    ctx: CoroutineContext,
    /// Times this task was put on the ready list by an event completion.
    wakeups: u32,
    suspensions: u32,
}

#[derive(Default)]
struct EventSlot {
    completed: bool,
    waiters: VecDeque<TaskId>,
    completion_count: u32,
}

struct JoinState {
    pending: Vec<EventId>,
    out: EventId,
}

pub struct EventLoop<W> {
    mode: ClockMode,
    now: Micros,
    epoch: Instant,
    ready: VecDeque<TaskId>,
    timers: BinaryHeap<Reverse<(Micros, u64, EventId)>>,
    timer_seq: u64,
    registry: Vec<Registered<W>>,
    tasks: Vec<TaskSlot>,
    events: Vec<EventSlot>,
    joins: Vec<JoinState>,
    current: Option<TaskId>,
    default_node: NodeId,
    stack: [u8; SHARED_STACK_BYTES],
    scribble_stack: bool,
    scribble_seq: u8,
    trace: Trace,
    trace_coro: bool,
    stats: LoopStats,
}

impl<W> Default for EventLoop<W> {
    fn default() -> Self {
        Self::new(ClockMode::VirtualTime)
    }
}

impl<W> EventLoop<W> {
    pub fn new(mode: ClockMode) -> Self {
        let mut lp = EventLoop {
            mode,
            now: 0,
            epoch: Instant::now(),
            ready: VecDeque::new(),
            timers: BinaryHeap::new(),
            timer_seq: 0,
            registry: Vec::new(),
            tasks: Vec::new(),
            events: Vec::new(),
            joins: Vec::new(),
            current: None,
            default_node: NodeId::Gap8,
            stack: [0; SHARED_STACK_BYTES],
            scribble_stack: false,
            scribble_seq: 0,
            trace: Trace::new(),
            trace_coro: false,
            stats: LoopStats::default(),
        };
        let join = lp.register("join_all", join_body::<W>);
        debug_assert_eq!(join, JOIN_COROUTINE);
        lp
    }

    pub fn virtual_time() -> Self {
        Self::new(ClockMode::VirtualTime)
    }

    pub fn mode(&self) -> ClockMode {
        self.mode
    }

    pub fn now(&self) -> Micros {
        match self.mode {
            ClockMode::VirtualTime => self.now,
            ClockMode::RealTime => self.epoch.elapsed().as_micros() as Micros,
        }
    }

    pub fn stats(&self) -> LoopStats {
        self.stats
    }

    pub fn set_default_node(&mut self, node: NodeId) {
        self.default_node = node;
    }

    /// Overwrite the shared stack after every suspension.
    pub fn set_scribble_stack(&mut self, on: bool) {
        self.scribble_stack = on;
    }

    /// Record spawn/suspend/resume/complete events into the trace.
    pub fn set_trace_coroutines(&mut self, on: bool) {
        self.trace_coro = on;
    }

    pub fn set_trace(&mut self, trace: Trace) {
        self.trace = trace;
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn take_trace(&mut self) -> Trace {
        let offsets: Vec<(NodeId, i64)> = NodeId::ALL
            .iter()
            .map(|&n| (n, self.trace.offset(n)))
            .collect();
        std::mem::replace(&mut self.trace, Trace::with_offsets(&offsets))
    }

    pub fn record(&mut self, node: NodeId, kind: TraceKind, subject: impl Into<String>, frame: Option<u64>) {
        let now = self.now();
        self.trace.record(now, node, kind, subject, frame);
    }

    pub fn register(&mut self, name: &'static str, body: CoBody<W>) -> CoroutineId {
        let id = CoroutineId(self.registry.len() as u16);
        self.registry.push(Registered { name, body });
        id
    }

    /// Register `body` under `name` unless a coroutine with that name exists.
    pub fn register_once(&mut self, name: &'static str, body: CoBody<W>) -> CoroutineId {
        match self.registry.iter().position(|r| r.name == name) {
            Some(i) => CoroutineId(i as u16),
            None => self.register(name, body),
        }
    }

    pub fn coroutine_name(&self, id: CoroutineId) -> Option<&'static str> {
        self.registry.get(id.0 as usize).map(|r| r.name)
    }

    pub fn ctx_init(&self, coroutine: CoroutineId, args: usize) -> Result<CoroutineContext> {
        if coroutine.0 as usize >= self.registry.len() {
            return Err(Error::UnknownCoroutine(coroutine.0));
        }
        Ok(CoroutineContext {
            header: ContextHeader {
                coroutine,
                resume_point: RESUME_START,
                state: CoState::Start,
                resume_task: None,
                node: self.default_node,
            },
            args,
        })
    }

    /// Enqueue a fresh context on the ready list. The body does not run
    /// until the loop reaches it.
    pub fn spawn(&mut self, mut ctx: CoroutineContext) -> Result<TaskId> {
        if ctx.header.state != CoState::Start || ctx.header.resume_task.is_some() {
            return Err(Error::RespawnNotStart(
                ctx.header.state,
                ctx.header.resume_task.is_some(),
            ));
        }
        let id = TaskId::from_index(self.tasks.len());
        ctx.header.resume_task = Some(id);
        let node = ctx.header.node;
        self.tasks.push(TaskSlot {
            ctx,
            wakeups: 0,
            suspensions: 0,
        });
        self.ready.push_back(id);
        self.stats.spawns += 1;
        if self.trace_coro {
            self.record(node, TraceKind::Spawn, format!("task:{}", id.index()), None);
        }
        Ok(id)
    }

    /// Snapshot of a task's context.
    pub fn context(&self, task: TaskId) -> &CoroutineContext {
        &self.tasks[task.index()].ctx
    }

    pub fn task_wakeups(&self, task: TaskId) -> u32 {
        self.tasks[task.index()].wakeups
    }

    pub fn task_suspensions(&self, task: TaskId) -> u32 {
        self.tasks[task.index()].suspensions
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn ready_len(&self) -> usize {
        self.ready.len()
    }

    pub fn pending_timers(&self) -> usize {
        self.timers.len()
    }

    pub fn current_task(&self) -> Option<TaskId> {
        self.current
    }

    pub fn event_init(&mut self) -> EventId {
        let id = EventId(self.events.len() as u32);
        self.events.push(EventSlot::default());
        id
    }

    pub fn event_completed(&self, ev: EventId) -> bool {
        self.events[ev.index()].completed
    }

    pub fn event_completion_count(&self, ev: EventId) -> u32 {
        self.events[ev.index()].completion_count
    }

    pub fn event_waiters(&self, ev: EventId) -> Vec<TaskId> {
        self.events[ev.index()].waiters.iter().copied().collect()
    }

    /// Mark the event completed and move every waiter to the ready list in
    /// registration order.
    pub fn event_complete(&mut self, ev: EventId) -> Result<()> {
        let slot = &mut self.events[ev.index()];
        if slot.completed {
            return Err(Error::DoubleComplete(ev));
        }
        slot.completed = true;
        slot.completion_count += 1;
        let waiters = std::mem::take(&mut slot.waiters);
        self.stats.completions += 1;
        for task in waiters {
            self.tasks[task.index()].wakeups += 1;
            self.ready.push_back(task);
        }
        if self.trace_coro {
            let node = self.current.map_or(self.default_node, |t| self.tasks[t.index()].ctx.header.node);
            self.record(node, TraceKind::EventComplete, format!("event:{}", ev.index()), None);
        }
        Ok(())
    }

    /// Re-arm a completed event.
    pub fn event_reset(&mut self, ev: EventId) -> Result<()> {
        let slot = &mut self.events[ev.index()];
        if !slot.waiters.is_empty() {
            return Err(Error::ResetWithWaiters(ev));
        }
        slot.completed = false;
        Ok(())
    }

    /// Suspension construct. Only valid while a coroutine body is running.
    pub fn wait(&self, ev: EventId, resume_at: u16) -> Result<Step> {
        if self.current.is_none() {
            return Err(Error::WaitOutsideCoroutine);
        }
        if ev.index() >= self.events.len() {
            return Err(Error::usage(format!("unknown event {}", ev.index())));
        }
        Ok(Step::Wait(ev, resume_at))
    }

    /// Event completing when the clock reaches `deadline`. Past or present
    /// deadlines complete immediately.
    pub fn sleep_until(&mut self, deadline: Micros) -> EventId {
        let ev = self.event_init();
        if deadline <= self.now() {
            self.event_complete(ev).expect("fresh event");
        } else {
            self.timer_seq += 1;
            self.timers.push(Reverse((deadline, self.timer_seq, ev)));
        }
        ev
    }

    pub fn sleep_for(&mut self, delay: Micros) -> EventId {
        let deadline = self.now() + delay;
        self.sleep_until(deadline)
    }

    /// Event completing once all of `events` have completed. An empty list
    /// yields an already completed event.
    pub fn join_all(&mut self, events: &[EventId]) -> Result<EventId> {
        let out = self.event_init();
        let pending: Vec<EventId> = events
            .iter()
            .copied()
            .filter(|&e| !self.event_completed(e))
            .collect();
        if pending.is_empty() {
            self.event_complete(out)?;
            return Ok(out);
        }
        if pending.len() >= RESUME_ENDED as usize {
            return Err(Error::ResumePointOverflow { max: RESUME_ENDED - 1 });
        }
        let j = self.joins.len();
        self.joins.push(JoinState { pending, out });
        let node = self
            .current
            .map_or(self.default_node, |t| self.tasks[t.index()].ctx.header.node);
        let ctx = self.ctx_init(JOIN_COROUTINE, j)?.with_node(node);
        self.spawn(ctx)?;
        Ok(out)
    }

    pub fn stack(&mut self) -> &mut [u8] {
        &mut self.stack
    }

    /// Process ready tasks and timers until the stop condition holds.
    pub fn run(&mut self, world: &mut W, until: RunUntil) -> Result<()> {
        loop {
            while let Some(task) = self.ready.pop_front() {
                self.stats.iterations += 1;
                self.run_task(world, task)?;
            }
            let Some(&Reverse((deadline, _, _))) = self.timers.peek() else {
                break;
            };
            if let RunUntil::Time(limit) = until {
                if deadline > limit {
                    break;
                }
            }
            self.advance_to(deadline);
            while let Some(&Reverse((d, _, ev))) = self.timers.peek() {
                if d > deadline {
                    break;
                }
                self.timers.pop();
                self.event_complete(ev)?;
            }
        }
        if let RunUntil::Time(limit) = until {
            self.advance_to(limit);
        }
        Ok(())
    }

    fn advance_to(&mut self, t: Micros) {
        match self.mode {
            ClockMode::VirtualTime => {
                if t > self.now {
                    self.now = t;
                }
            }
            ClockMode::RealTime => {
                let target = Duration::from_micros(t);
                let elapsed = self.epoch.elapsed();
                if target > elapsed {
                    std::thread::sleep(target - elapsed);
                }
            }
        }
    }

    fn run_task(&mut self, world: &mut W, task: TaskId) -> Result<()> {
        let idx = task.index();
        let header = self.tasks[idx].ctx.header;
        if let CoState::Suspended(_) = header.state {
            self.stats.resumptions += 1;
            if self.trace_coro {
                self.record(header.node, TraceKind::Resume, format!("task:{idx}"), None);
            }
        }
        self.tasks[idx].ctx.header.state = header.state.transition(CoState::Running)?;
        let body = self.registry[header.coroutine.0 as usize].body;
        self.current = Some(task);

        let suspended_at = loop {
            let step = {
                let mut co = Co {
                    lp: &mut *self,
                    world: &mut *world,
                    task,
                };
                body(&mut co)
            };
            let step = match step {
                Ok(s) => s,
                Err(e) => {
                    self.current = None;
                    return Err(e);
                }
            };
            match step {
                Step::Done => break None,
                Step::Jump(p) => {
                    self.tasks[idx].ctx.header.resume_point = p;
                    continue;
                }
                Step::Yield(p) => {
                    self.ready.push_back(task);
                    break Some(p);
                }
                Step::Wait(ev, p) => {
                    if self.events[ev.index()].completed {
                        // No suspension: fall through to the next point.
                        self.tasks[idx].ctx.header.resume_point = p;
                        continue;
                    }
                    self.events[ev.index()].waiters.push_back(task);
                    break Some(p);
                }
            }
        };
        self.current = None;

        let h = &mut self.tasks[idx].ctx.header;
        match suspended_at {
            None => {
                h.state = h.state.transition(CoState::Ended)?;
                h.resume_point = RESUME_ENDED;
            }
            Some(p) => {
                if p == RESUME_START || p == RESUME_ENDED {
                    return Err(Error::ResumePointOverflow { max: RESUME_ENDED - 1 });
                }
                h.state = h.state.transition(CoState::Suspended(p))?;
                h.resume_point = p;
                let node = h.node;
                self.tasks[idx].suspensions += 1;
                self.stats.suspensions += 1;
                if self.trace_coro {
                    self.record(node, TraceKind::Suspend, format!("task:{idx}"), None);
                }
                if self.scribble_stack {
                    self.scribble_seq = self.scribble_seq.wrapping_add(0x5b);
                    self.stack.fill(self.scribble_seq);
                }
            }
        }
        Ok(())
    }
}

/// Handle passed to a running body.
pub struct Co<'a, W> {
    lp: &'a mut EventLoop<W>,
    world: &'a mut W,
    task: TaskId,
}

impl<'a, W> Co<'a, W> {
    pub fn task(&self) -> TaskId {
        self.task
    }

    pub fn resume_point(&self) -> u16 {
        self.lp.tasks[self.task.index()].ctx.header.resume_point
    }

    pub fn args(&self) -> usize {
        self.lp.tasks[self.task.index()].ctx.args
    }

    pub fn node(&self) -> NodeId {
        self.lp.tasks[self.task.index()].ctx.header.node
    }

    pub fn now(&self) -> Micros {
        self.lp.now()
    }

    pub fn world(&mut self) -> &mut W {
        self.world
    }

    /// Split borrow of the loop and the world.
    pub fn parts(&mut self) -> (&mut EventLoop<W>, &mut W) {
        (self.lp, self.world)
    }

    pub fn lp(&mut self) -> &mut EventLoop<W> {
        self.lp
    }

    pub fn stack(&mut self) -> &mut [u8] {
        self.lp.stack()
    }

    pub fn wait(&self, ev: EventId, resume_at: u16) -> Result<Step> {
        self.lp.wait(ev, resume_at)
    }

    pub fn event_init(&mut self) -> EventId {
        self.lp.event_init()
    }

    pub fn complete(&mut self, ev: EventId) -> Result<()> {
        self.lp.event_complete(ev)
    }

    pub fn sleep_until(&mut self, deadline: Micros) -> EventId {
        self.lp.sleep_until(deadline)
    }

    pub fn sleep_for(&mut self, delay: Micros) -> EventId {
        self.lp.sleep_for(delay)
    }

    /// Start a child coroutine on this task's node.
    pub fn spawn(&mut self, coroutine: CoroutineId, args: usize) -> Result<TaskId> {
        let node = self.node();
        let ctx = self.lp.ctx_init(coroutine, args)?.with_node(node);
        self.lp.spawn(ctx)
    }

    pub fn record(&mut self, kind: TraceKind, subject: impl Into<String>, frame: Option<u64>) {
        let node = self.node();
        self.lp.record(node, kind, subject, frame);
    }
}

fn join_body<W>(co: &mut Co<'_, W>) -> Result<Step> {
    let j = co.args();
    let i = co.resume_point() as usize;
    let (next, out) = {
        let js = &co.lp.joins[j];
        (js.pending.get(i).copied(), js.out)
    };
    match next {
        Some(ev) => co.wait(ev, (i + 1) as u16),
        None => {
            co.complete(out)?;
            Ok(Step::Done)
        }
    }
}
