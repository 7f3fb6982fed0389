//! Independent reference models shared by the integration and acceptance
//! tests. Nothing here reuses the simulator's scheduling code.

#![allow(dead_code)]

use nanopipe::coro::{Co, CoState, EventId, EventLoop, RunUntil, Step};
use nanopipe::pipeline::{Mode, Stage};
use nanopipe::Error;

/// Frames run for period measurements. After the 10 skipped receipts,
/// 600 intervals remain: a multiple of every cycle length a pool of up to
/// three buffers can produce, so cyclic schedules average out exactly.
pub const PERIOD_FRAMES: u64 = 611;

/// Period of a free-running pipeline from the max-plus recurrence
///
/// ```text
/// start_root(k) = max(end_root(k-1), free(k - pool))
/// start_i(k)    = max(end_i(k-1), max_{d in deps(i)} done_d(k))
/// ```
///
/// where a buffer is free once every holder's busy time ended. Stages are
/// assumed to sit on distinct resources and to be listed in dependency
/// order with the root first; the sink is the last stage.
pub fn maxplus_period(stages: &[Stage], mode: Mode, pool: usize, frames: u64, skip: usize) -> f64 {
    let n = stages.len();
    let idx = |name: &str| stages.iter().position(|s| s.name == name).unwrap();
    let deps: Vec<Vec<usize>> = stages.iter().map(|s| s.deps.iter().map(|d| idx(d)).collect()).collect();
    let holders: Vec<usize> = (1..n).filter(|&i| stages[i].holds_buffer).collect();
    let frames = frames as usize;
    let mut sink = Vec::with_capacity(frames);
    match mode {
        Mode::Serialized => {
            let total: u64 = stages.iter().map(|s| s.total_us()).sum();
            for k in 0..frames {
                sink.push((k as u64 + 1) * total);
            }
        }
        Mode::Pipelined => {
            let mut busy_end = vec![vec![0u64; n]; frames];
            let mut done = vec![vec![0u64; n]; frames];
            let mut free_at = vec![0u64; frames];
            for k in 0..frames {
                for i in 0..n {
                    let prev = if k > 0 { busy_end[k - 1][i] } else { 0 };
                    let ready = if i == 0 {
                        if k >= pool {
                            free_at[k - pool]
                        } else {
                            0
                        }
                    } else {
                        deps[i].iter().map(|&d| done[k][d]).max().unwrap_or(0)
                    };
                    let start = prev.max(ready);
                    busy_end[k][i] = start + stages[i].timing.occupancy_us;
                    done[k][i] = busy_end[k][i] + stages[i].timing.latency_us;
                }
                free_at[k] = if holders.is_empty() {
                    done[k][0]
                } else {
                    holders.iter().map(|&h| busy_end[k][h]).max().unwrap()
                };
                sink.push(done[k][n - 1]);
            }
        }
    }
    let t = &sink[skip..];
    (t[t.len() - 1] - t[0]) as f64 / (t.len() - 1) as f64
}

/// Stage durations used by the oracle sweep, in milliseconds.
pub const DURATIONS_MS: [u64; 5] = [1, 2, 3, 5, 8];

/// Ordered selections of `k` distinct durations.
pub fn permutations(k: usize) -> Vec<Vec<u64>> {
    fn go(k: usize, used: &mut Vec<usize>, out: &mut Vec<Vec<u64>>) {
        if used.len() == k {
            out.push(used.iter().map(|&i| DURATIONS_MS[i] * 1_000).collect());
            return;
        }
        for i in 0..DURATIONS_MS.len() {
            if !used.contains(&i) {
                used.push(i);
                go(k, used, out);
                used.pop();
            }
        }
    }
    let mut out = Vec::new();
    go(k, &mut Vec::new(), &mut out);
    out
}

pub fn shapes(d: &[u64]) -> Vec<(&'static str, Vec<Stage>)> {
    let s = |i: usize| Stage::new(["a", "b", "c"][i], ["r0", "r1", "r2"][i], d[i]);
    match d.len() {
        2 => vec![("chain", vec![s(0), s(1).after("a")])],
        _ => vec![
            ("chain", vec![s(0), s(1).after("a"), s(2).after("b")]),
            ("fan-out", vec![s(0), s(1).after("a"), s(2).after("a")]),
        ],
    }
}

/// A streaming camera with `pool` buffers feeding one consumer that holds
/// each frame for `hold` after a `readout`: frames are never dropped iff the
/// consumer keeps up and every buffer comes back within `pool` periods.
pub fn drop_free(period: u64, readout: u64, hold: u64, pool: u64) -> bool {
    readout <= period && hold <= period && readout + hold <= pool * period
}

// ---------------------------------------------------------------------------
// Coroutine semantics checks. Each returns a description of the first
// violation found.

#[derive(Default)]
pub struct Log {
    pub events: Vec<EventId>,
    pub resumed: Vec<usize>,
    pub started: Vec<usize>,
}

fn waiter(co: &mut Co<'_, Log>) -> Result<Step, Error> {
    let id = co.args();
    match co.resume_point() {
        0 => {
            co.world().started.push(id);
            let ev = co.world().events[0];
            co.wait(ev, 1)
        }
        _ => {
            co.world().resumed.push(id);
            Ok(Step::Done)
        }
    }
}

fn setup(waiters: usize) -> (EventLoop<Log>, Log, Vec<nanopipe::coro::TaskId>) {
    let mut lp: EventLoop<Log> = EventLoop::virtual_time();
    let body = lp.register("waiter", waiter);
    let mut log = Log::default();
    log.events.push(lp.event_init());
    let tasks = (0..waiters)
        .map(|i| lp.spawn(lp.ctx_init(body, i).unwrap()).unwrap())
        .collect();
    (lp, log, tasks)
}

/// Every waiter is resumed exactly once, and a second completion without a
/// reset is rejected.
pub fn check_exactly_once(waiters: usize) -> Result<(), String> {
    let (mut lp, mut log, tasks) = setup(waiters);
    lp.run(&mut log, RunUntil::Idle).map_err(|e| e.to_string())?;
    if !log.resumed.is_empty() {
        return Err("waiter resumed before completion".into());
    }
    let ev = log.events[0];
    lp.event_complete(ev).map_err(|e| e.to_string())?;
    lp.run(&mut log, RunUntil::Idle).map_err(|e| e.to_string())?;
    let mut seen = log.resumed.clone();
    seen.sort_unstable();
    if seen != (0..waiters).collect::<Vec<_>>() {
        return Err(format!("resumptions {:?} for {waiters} waiters", log.resumed));
    }
    for t in tasks {
        if lp.task_wakeups(t) != 1 {
            return Err(format!("task {t:?} woke {} times", lp.task_wakeups(t)));
        }
    }
    if lp.event_complete(ev) != Err(Error::DoubleComplete(ev)) {
        return Err("second completion was accepted".into());
    }
    Ok(())
}

/// Waiters resume in the order they started waiting.
pub fn check_fifo(waiters: usize) -> Result<(), String> {
    let (mut lp, mut log, _) = setup(waiters);
    lp.run(&mut log, RunUntil::Idle).map_err(|e| e.to_string())?;
    let ev = log.events[0];
    let registered = lp.event_waiters(ev);
    if registered.len() != waiters {
        return Err(format!("{} of {waiters} waiters registered", registered.len()));
    }
    lp.event_complete(ev).map_err(|e| e.to_string())?;
    lp.run(&mut log, RunUntil::Idle).map_err(|e| e.to_string())?;
    if log.resumed != log.started {
        return Err(format!("resumed {:?}, waited {:?}", log.resumed, log.started));
    }
    Ok(())
}

/// One completion wakes every waiter at the same virtual instant.
pub fn check_fan_out(waiters: usize, at: u64) -> Result<(), String> {
    let (mut lp, mut log, tasks) = setup(waiters);
    lp.run(&mut log, RunUntil::Idle).map_err(|e| e.to_string())?;
    let timer = lp.sleep_until(at);
    let join = lp.join_all(&[timer]).map_err(|e| e.to_string())?;
    lp.run(&mut log, RunUntil::Time(at)).map_err(|e| e.to_string())?;
    if !lp.event_completed(join) {
        return Err("timer did not fire".into());
    }
    lp.event_complete(log.events[0]).map_err(|e| e.to_string())?;
    if lp.ready_len() != waiters {
        return Err(format!("{} ready after completion, expected {waiters}", lp.ready_len()));
    }
    lp.run(&mut log, RunUntil::Idle).map_err(|e| e.to_string())?;
    if lp.now() != at || log.resumed.len() != waiters {
        return Err(format!("{} resumed by t={}", log.resumed.len(), lp.now()));
    }
    if tasks.iter().any(|&t| lp.context(t).state() != CoState::Ended) {
        return Err("a waiter did not end".into());
    }
    Ok(())
}

/// Waiting on an already-completed event continues without suspending.
pub fn check_immediate_resume() -> Result<(), String> {
    let (mut lp, mut log, tasks) = setup(0);
    lp.event_complete(log.events[0]).map_err(|e| e.to_string())?;
    let body = lp.register("waiter2", waiter);
    let t = lp.spawn(lp.ctx_init(body, 9).unwrap()).map_err(|e| e.to_string())?;
    lp.run(&mut log, RunUntil::Idle).map_err(|e| e.to_string())?;
    debug_assert!(tasks.is_empty());
    if log.resumed != [9] {
        return Err(format!("resumed {:?}", log.resumed));
    }
    if lp.task_suspensions(t) != 0 {
        return Err("suspended on a completed event".into());
    }
    if lp.wait(log.events[0], 1) != Err(Error::WaitOutsideCoroutine) {
        return Err("wait outside a coroutine was accepted".into());
    }
    Ok(())
}

/// The legal transitions are exactly Start→Running, Running→Suspended,
/// Running→Ended and Suspended→Running; everything else is rejected.
pub fn check_transitions() -> Result<(), String> {
    let states = [
        CoState::Start,
        CoState::Running,
        CoState::Suspended(0),
        CoState::Suspended(41),
        CoState::Ended,
    ];
    let legal = |a: CoState, b: CoState| {
        matches!(
            (a, b),
            (CoState::Start, CoState::Running)
                | (CoState::Running, CoState::Suspended(_))
                | (CoState::Running, CoState::Ended)
                | (CoState::Suspended(_), CoState::Running)
        )
    };
    let mut checked = 0;
    for &a in &states {
        for &b in &states {
            checked += 1;
            let got = a.transition(b);
            match (legal(a, b), got) {
                (true, Ok(s)) if s == b => {}
                (false, Err(Error::IllegalTransition { from, to })) if from == a && to == b => {}
                (l, g) => return Err(format!("{a:?} -> {b:?}: legal={l}, got {g:?}")),
            }
        }
    }
    debug_assert_eq!(checked, states.len() * states.len());
    // Suspended and finished contexts cannot be spawned again.
    let (mut lp, mut log, tasks) = setup(1);
    lp.run(&mut log, RunUntil::Idle).map_err(|e| e.to_string())?;
    let suspended = lp.context(tasks[0]).clone();
    if !matches!(lp.spawn(suspended), Err(Error::RespawnNotStart(..))) {
        return Err("respawn of a suspended context was accepted".into());
    }
    lp.event_complete(log.events[0]).map_err(|e| e.to_string())?;
    lp.run(&mut log, RunUntil::Idle).map_err(|e| e.to_string())?;
    let ended = lp.context(tasks[0]).clone();
    if !matches!(lp.spawn(ended), Err(Error::RespawnNotStart(CoState::Ended, _))) {
        return Err("respawn of an ended context was accepted".into());
    }
    Ok(())
}
