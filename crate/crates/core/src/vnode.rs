//! Virtual devices: camera, compute engines, point-to-point links and the
//! node graph tying the drone's MCUs and the remote host together.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::coro::{Co, EventId, EventLoop, Micros, Step};
use crate::error::{Error, Result};
use crate::pipeline::{self, BufferPool, BufferState, Mode, OnBusy, PipelineConfig, Source, Stage};
use crate::trace::NodeId;

/// Shortest streaming frame period (150 frame/s).
pub const STREAMING_MIN_PERIOD_US: Micros = 6_667;
/// Default single-shot request overhead; with the default readout the
/// trigger mode tops out at 30 frame/s.
pub const DEFAULT_TRIGGER_SETUP_US: Micros = 25_333;
pub const DEFAULT_READOUT_US: Micros = 8_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraMode {
    Trigger,
    Streaming,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub mode: CameraMode,
    pub frame_period_us: Micros,
    pub width: u32,
    pub height: u32,
    #[serde(default = "one")]
    pub bytes_per_pixel: u32,
    #[serde(default = "default_readout")]
    pub readout_us: Micros,
    #[serde(default = "default_setup")]
    pub trigger_setup_us: Micros,
}

fn one() -> u32 {
    1
}
fn default_readout() -> Micros {
    DEFAULT_READOUT_US
}
fn default_setup() -> Micros {
    DEFAULT_TRIGGER_SETUP_US
}

impl CameraConfig {
    pub fn trigger(width: u32, height: u32) -> Self {
        CameraConfig {
            mode: CameraMode::Trigger,
            frame_period_us: DEFAULT_TRIGGER_SETUP_US + DEFAULT_READOUT_US,
            width,
            height,
            bytes_per_pixel: 1,
            readout_us: DEFAULT_READOUT_US,
            trigger_setup_us: DEFAULT_TRIGGER_SETUP_US,
        }
    }

    pub fn streaming(width: u32, height: u32, frame_period_us: Micros) -> Self {
        CameraConfig {
            mode: CameraMode::Streaming,
            frame_period_us,
            readout_us: DEFAULT_READOUT_US.min(frame_period_us),
            ..Self::trigger(width, height)
        }
    }

    pub fn frame_bytes(&self) -> usize {
        (self.width * self.height * self.bytes_per_pixel) as usize
    }

    /// Time from request to a ready frame in trigger mode.
    pub fn capture_time(&self) -> Micros {
        if self.frame_bytes() == 0 {
            self.trigger_setup_us
        } else {
            self.trigger_setup_us + self.readout_us
        }
    }

    pub fn trigger_ceiling_hz(&self) -> f64 {
        1e6 / self.capture_time().max(1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            CameraMode::Streaming if self.frame_period_us < STREAMING_MIN_PERIOD_US => {
                Err(Error::config(format!(
                    "streaming period {} µs is below the 150 frame/s ceiling",
                    self.frame_period_us
                )))
            }
            CameraMode::Streaming if self.readout_us > self.frame_period_us => Err(Error::config(
                "streaming readout longer than the frame period",
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    pub name: String,
    pub from: NodeId,
    pub to: NodeId,
    pub bandwidth_bps: u64,
    #[serde(default)]
    pub base_latency_us: Micros,
    pub mtu: usize,
    #[serde(default)]
    pub injected_delay_us: Micros,
    #[serde(default = "yes")]
    pub segmentation: bool,
}

fn yes() -> bool {
    true
}

impl LinkConfig {
    pub fn new(name: &str, from: NodeId, to: NodeId, bandwidth_bps: u64, base_latency_us: Micros, mtu: usize) -> Self {
        LinkConfig {
            name: name.to_string(),
            from,
            to,
            bandwidth_bps,
            base_latency_us,
            mtu,
            injected_delay_us: 0,
            segmentation: true,
        }
    }

    /// Low-latency, low-bandwidth radio channel for setpoints and logging.
    pub fn crtp(from: NodeId, to: NodeId) -> Self {
        Self::new("crtp", from, to, 250_000, 1_000, 31)
    }

    pub fn reversed(&self, name: &str) -> Self {
        LinkConfig {
            name: name.to_string(),
            from: self.to,
            to: self.from,
            ..self.clone()
        }
    }

    /// Time the sender is busy putting `bytes` on the wire.
    pub fn serialization_us(&self, bytes: usize) -> Micros {
        let bits = bytes as u128 * 8 * 1_000_000;
        bits.div_ceil(self.bandwidth_bps.max(1) as u128) as Micros
    }

    /// Latency from send start to delivery of the last byte.
    pub fn transfer_time(&self, bytes: usize) -> Micros {
        self.base_latency_us + self.serialization_us(bytes) + self.injected_delay_us
    }

    /// Propagation part of the transfer: what follows the last byte out.
    pub fn propagation_us(&self) -> Micros {
        self.base_latency_us + self.injected_delay_us
    }

    pub fn segments(&self, bytes: usize) -> Result<Vec<usize>> {
        if bytes <= self.mtu {
            return Ok(vec![bytes]);
        }
        if !self.segmentation || self.mtu == 0 {
            return Err(Error::PayloadTooLarge {
                len: bytes,
                max: self.mtu,
            });
        }
        let mut out = vec![self.mtu; bytes / self.mtu];
        if !bytes.is_multiple_of(self.mtu) {
            out.push(bytes % self.mtu);
        }
        Ok(out)
    }

    /// Pipeline stage modelling one transfer of `bytes` over this link.
    pub fn stage(&self, name: &str, bytes: usize) -> Stage {
        let mut s = Stage::new(name, &self.name, self.serialization_us(bytes))
            .on(self.from)
            .with_latency(self.propagation_us());
        s.rx_node = self.to;
        s.link = Some(self.name.clone());
        s
    }
}

/// Drone MCUs, the camera and the host, with the fixed link topology.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeGraph {
    pub offsets: BTreeMap<NodeId, i64>,
    pub links: Vec<LinkConfig>,
}

impl NodeGraph {
    /// UART stm32↔nrf51 and stm32↔gap8, SPI gap8↔esp32, CPI camera→gap8,
    /// radio nrf51↔host and Wi-Fi esp32↔host.
    pub fn standard() -> Self {
        use NodeId::*;
        let uart_nrf = LinkConfig::new("uart_stm32_nrf51", Stm32, Nrf51, 1_000_000, 100, 64);
        let uart_gap = LinkConfig::new("uart_stm32_gap8", Stm32, Gap8, 1_000_000, 100, 64);
        let spi = LinkConfig::new("spi_gap8_esp32", Gap8, Esp32, 20_000_000, 0, 1_026);
        let radio = LinkConfig::crtp(Nrf51, Host);
        let wifi = LinkConfig::new("wifi_esp32_host", Esp32, Host, 15_000_000, 2_000, 1_026);
        let links = vec![
            uart_nrf.reversed("uart_nrf51_stm32"),
            uart_nrf,
            uart_gap.reversed("uart_gap8_stm32"),
            uart_gap,
            spi.reversed("spi_esp32_gap8"),
            spi,
            LinkConfig::new("cpi_camera_gap8", Camera, Gap8, 160_000_000, 0, usize::MAX),
            LinkConfig {
                name: "radio_nrf51_host".into(),
                ..radio.clone()
            },
            radio.reversed("radio_host_nrf51"),
            wifi.reversed("wifi_host_esp32"),
            wifi,
        ];
        NodeGraph {
            offsets: NodeId::ALL.iter().map(|&n| (n, 0)).collect(),
            links,
        }
    }

    pub fn offset(&self, node: NodeId) -> i64 {
        self.offsets.get(&node).copied().unwrap_or(0)
    }

    pub fn set_offset(&mut self, node: NodeId, offset: i64) {
        self.offsets.insert(node, offset);
    }

    pub fn local_time(&self, node: NodeId, global: Micros) -> i64 {
        global as i64 + self.offset(node)
    }

    pub fn link(&self, name: &str) -> Option<&LinkConfig> {
        self.links.iter().find(|l| l.name == name)
    }

    pub fn link_mut(&mut self, name: &str) -> Option<&mut LinkConfig> {
        self.links.iter_mut().find(|l| l.name == name)
    }

    pub fn direct(&self, from: NodeId, to: NodeId) -> Option<&LinkConfig> {
        self.links.iter().find(|l| l.from == from && l.to == to)
    }

    /// Fewest-hop path, ties broken by link order.
    pub fn route(&self, from: NodeId, to: NodeId) -> Result<Vec<&LinkConfig>> {
        let mut prev: BTreeMap<NodeId, usize> = BTreeMap::new();
        let mut queue = VecDeque::from([from]);
        let mut seen = vec![from];
        while let Some(n) = queue.pop_front() {
            if n == to {
                break;
            }
            for (i, l) in self.links.iter().enumerate() {
                if l.from == n && !seen.contains(&l.to) {
                    seen.push(l.to);
                    prev.insert(l.to, i);
                    queue.push_back(l.to);
                }
            }
        }
        if from != to && !prev.contains_key(&to) {
            return Err(Error::NoRoute {
                from: from.to_string(),
                to: to.to_string(),
            });
        }
        let mut path = Vec::new();
        let mut n = to;
        while n != from {
            let l = &self.links[prev[&n]];
            path.push(l);
            n = l.from;
        }
        path.reverse();
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, l) in self.links.iter().enumerate() {
            if self.links[..i].iter().any(|o| o.name == l.name) {
                return Err(Error::config(format!("duplicate link `{}`", l.name)));
            }
            if l.bandwidth_bps == 0 {
                return Err(Error::config(format!("link `{}` has zero bandwidth", l.name)));
            }
            if l.name.contains(',') {
                return Err(Error::config(format!("invalid link name `{}`", l.name)));
            }
        }
        Ok(())
    }
}

/// Result record written by [`compute_run`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ComputeResult {
    pub sequence: u64,
    pub completed_at: Micros,
}

/// Single-server engine; overlapping dispatches queue in FIFO order.
#[derive(Clone, Debug, Default)]
pub struct Engine {
    pub name: String,
    busy_until: Micros,
    pub dispatched: u64,
}

impl Engine {
    pub fn new(name: &str) -> Self {
        Engine {
            name: name.to_string(),
            ..Default::default()
        }
    }

    pub fn busy_until(&self) -> Micros {
        self.busy_until
    }
}

/// Sender-side state of one link: FIFO wire plus byte counters.
#[derive(Clone, Debug)]
pub struct Link {
    pub config: LinkConfig,
    busy_until: Micros,
    pub bytes_sent: u64,
    pub bytes_delivered: u64,
    /// Segment sizes in delivery order.
    pub delivered_segments: Vec<usize>,
}

impl Link {
    pub fn new(config: LinkConfig) -> Self {
        Link {
            config,
            busy_until: 0,
            bytes_sent: 0,
            bytes_delivered: 0,
            delivered_segments: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinkSend {
    pub tx_start: Micros,
    /// Completes when the last byte left the sender.
    pub sender_done: EventId,
    /// Completes when the last segment reached the peer.
    pub delivered: EventId,
    pub delivery_at: Micros,
    pub segments: usize,
}

#[derive(Clone, Copy, Debug)]
enum PendingOp {
    Capture { buffer: usize, sequence: u64 },
    Compute { sequence: u64, out: usize },
    Deliver { link: usize, bytes: usize },
    Signal,
}

#[derive(Clone, Copy, Debug)]
struct Pending {
    op: PendingOp,
    at: Micros,
    done: Option<EventId>,
}

/// Device state embedded in a coroutine world.
#[derive(Debug)]
pub struct Devices {
    pub pool: BufferPool,
    pub engines: Vec<Engine>,
    pub links: Vec<Link>,
    pub results: Vec<ComputeResult>,
    next_sequence: u64,
    pending: Vec<Pending>,
}

impl Devices {
    pub fn new(pool: BufferPool) -> Self {
        Devices {
            pool,
            engines: Vec::new(),
            links: Vec::new(),
            results: Vec::new(),
            next_sequence: 0,
            pending: Vec::new(),
        }
    }

    pub fn add_engine(&mut self, engine: Engine) -> usize {
        self.engines.push(engine);
        self.engines.len() - 1
    }

    pub fn add_link(&mut self, config: LinkConfig) -> usize {
        self.links.push(Link::new(config));
        self.links.len() - 1
    }
}

pub trait HasDevices {
    fn devices(&mut self) -> &mut Devices;
}

impl HasDevices for Devices {
    fn devices(&mut self) -> &mut Devices {
        self
    }
}

fn device_driver<W: HasDevices>(co: &mut Co<'_, W>) -> Result<Step> {
    let i = co.args();
    let p = co.world().devices().pending[i];
    match co.resume_point() {
        0 => {
            let ev = co.sleep_until(p.at);
            co.wait(ev, 1)
        }
        _ => {
            let now = co.now();
            let (lp, w) = co.parts();
            let d = w.devices();
            match p.op {
                PendingOp::Capture { buffer, sequence } => d.pool.mark_ready(buffer, sequence)?,
                PendingOp::Compute { sequence, out } => {
                    d.results[out] = ComputeResult {
                        sequence,
                        completed_at: now,
                    }
                }
                PendingOp::Deliver { link, bytes } => {
                    let l = &mut d.links[link];
                    l.bytes_delivered += bytes as u64;
                    l.delivered_segments.push(bytes);
                }
                PendingOp::Signal => {}
            }
            if let Some(done) = p.done {
                lp.event_complete(done)?;
            }
            Ok(Step::Done)
        }
    }
}

fn schedule<W: HasDevices>(lp: &mut EventLoop<W>, w: &mut W, op: PendingOp, at: Micros, done: Option<EventId>) -> Result<()> {
    let driver = lp.register_once("device_driver", device_driver::<W>);
    let d = w.devices();
    d.pending.push(Pending { op, at, done });
    let idx = d.pending.len() - 1;
    let ctx = lp.ctx_init(driver, idx)?;
    lp.spawn(ctx)?;
    Ok(())
}

/// Trigger-mode capture into `buffer`. `done` completes after setup plus
/// readout, once the buffer is Ready with a fresh sequence number.
pub fn camera_capture<W: HasDevices>(
    lp: &mut EventLoop<W>,
    w: &mut W,
    cam: &CameraConfig,
    buffer: usize,
    done: EventId,
) -> Result<u64> {
    if cam.mode != CameraMode::Trigger {
        return Err(Error::usage("camera_capture requires trigger mode"));
    }
    let d = w.devices();
    if d.pool.buffer(buffer).state != BufferState::Filling {
        d.pool.take(buffer)?;
    }
    let sequence = d.next_sequence;
    d.next_sequence += 1;
    let at = lp.now() + cam.capture_time();
    schedule(lp, w, PendingOp::Capture { buffer, sequence }, at, Some(done))?;
    Ok(sequence)
}

/// Run `duration` of work on `engine` for the frame in `input`. Returns the
/// index of the result record filled at completion.
pub fn compute_run<W: HasDevices>(
    lp: &mut EventLoop<W>,
    w: &mut W,
    engine: usize,
    duration: Micros,
    input: usize,
    done: EventId,
) -> Result<usize> {
    let now = lp.now();
    let d = w.devices();
    let buf = d.pool.buffer(input);
    let sequence = match (buf.state, buf.sequence) {
        (BufferState::Ready | BufferState::InUse(_), Some(seq)) => seq,
        _ => {
            return Err(Error::usage(format!(
                "compute input buffer {input} holds no ready frame"
            )))
        }
    };
    let e = &mut d.engines[engine];
    let start = now.max(e.busy_until);
    e.busy_until = start + duration;
    e.dispatched += 1;
    let at = e.busy_until;
    d.results.push(ComputeResult::default());
    let out = d.results.len() - 1;
    if at <= now {
        d.results[out] = ComputeResult {
            sequence,
            completed_at: now,
        };
        lp.event_complete(done)?;
    } else {
        schedule(lp, w, PendingOp::Compute { sequence, out }, at, Some(done))?;
    }
    Ok(out)
}

/// Send `bytes` over `link`, segmenting at the MTU. `done` completes at
/// last-byte-out so the sender can overlap its next job with propagation.
pub fn link_send<W: HasDevices>(
    lp: &mut EventLoop<W>,
    w: &mut W,
    link: usize,
    bytes: usize,
    done: EventId,
) -> Result<LinkSend> {
    let now = lp.now();
    let l = &mut w.devices().links[link];
    let segments = l.config.segments(bytes)?;
    let tx_start = now.max(l.busy_until);
    // Timed on cumulative bytes so per-segment rounding does not add up.
    let mut sent = 0;
    let mut t = tx_start;
    let mut deliveries = Vec::with_capacity(segments.len());
    for &seg in &segments {
        sent += seg;
        t = tx_start + l.config.serialization_us(sent);
        deliveries.push((t + l.config.propagation_us(), seg));
    }
    l.busy_until = t;
    l.bytes_sent += bytes as u64;
    let sender_done_at = t;
    let delivered = lp.event_init();
    let n = deliveries.len();
    for (i, (at, seg)) in deliveries.iter().copied().enumerate() {
        let ev = (i + 1 == n).then_some(delivered);
        schedule(lp, w, PendingOp::Deliver { link, bytes: seg }, at, ev)?;
    }
    schedule_complete(lp, w, done, sender_done_at)?;
    Ok(LinkSend {
        tx_start,
        sender_done: done,
        delivered,
        delivery_at: deliveries.last().map_or(tx_start, |d| d.0),
        segments: n,
    })
}

fn schedule_complete<W: HasDevices>(lp: &mut EventLoop<W>, w: &mut W, done: EventId, at: Micros) -> Result<()> {
    if at <= lp.now() {
        return lp.event_complete(done);
    }
    schedule(lp, w, PendingOp::Signal, at, Some(done))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamStats {
    pub delivered: u64,
    pub dropped: u64,
    /// Largest deviation of a delivery interval from the frame period.
    pub jitter_us: Micros,
    pub delivery_times: Vec<Micros>,
}

/// Free-running camera feeding `downstream` stages through a pool of
/// `pool_size` buffers. Frames arriving with no free buffer are dropped.
pub fn camera_stream(cam: &CameraConfig, pool_size: usize, downstream: &[Stage], frames: u64) -> Result<StreamStats> {
    if cam.mode != CameraMode::Streaming {
        return Err(Error::usage("camera_stream requires streaming mode"));
    }
    cam.validate()?;
    let mut stages = vec![Stage::new("camera", "udma", cam.readout_us)];
    for s in downstream {
        let mut s = s.clone();
        if s.deps.is_empty() {
            s.deps.push("camera".into());
        }
        stages.push(s);
    }
    let mut cfg = PipelineConfig::new(stages, Mode::Pipelined, pool_size, frames);
    cfg.buffer_bytes = cam.frame_bytes();
    cfg.source = Source::Periodic {
        period_us: cam.frame_period_us,
        on_busy: OnBusy::Drop,
    };
    cfg.sink = Some("camera".into());
    let run = pipeline::pipeline_run(&cfg)?;
    let times: Vec<Micros> = run.ready_times.iter().map(|&(_, t)| t).collect();
    let jitter_us = times
        .windows(2)
        .map(|w| (w[1] - w[0]).abs_diff(cam.frame_period_us))
        .max()
        .unwrap_or(0);
    Ok(StreamStats {
        delivered: times.len() as u64,
        dropped: run.dropped,
        jitter_us,
        delivery_times: times,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coro::RunUntil;

    fn devices(n: usize, cap: usize) -> (EventLoop<Devices>, Devices) {
        (EventLoop::virtual_time(), Devices::new(BufferPool::new(n, cap).unwrap()))
    }

    #[test]
    fn transfer_time_formula() {
        let l = LinkConfig::new("spi", NodeId::Gap8, NodeId::Esp32, 20_000_000, 1_000, 30_000);
        assert_eq!(l.transfer_time(25_600), 11_240);
        assert_eq!(l.transfer_time(0), 1_000);
        let mut d = l.clone();
        d.injected_delay_us = 500_000;
        assert_eq!(d.transfer_time(25_600), 511_240);
    }

    #[test]
    fn segmentation() {
        let mut l = LinkConfig::new("x", NodeId::Gap8, NodeId::Esp32, 1_000_000, 0, 1_000);
        assert_eq!(l.segments(2_500).unwrap(), vec![1_000, 1_000, 500]);
        l.segmentation = false;
        assert!(matches!(l.segments(2_500), Err(Error::PayloadTooLarge { .. })));
    }

    #[test]
    fn trigger_capture_completes_after_readout() {
        let (mut lp, mut d) = devices(1, 160 * 96);
        let mut cam = CameraConfig::trigger(160, 96);
        cam.trigger_setup_us = 0;
        let done = lp.event_init();
        let seq = camera_capture(&mut lp, &mut d, &cam, 0, done).unwrap();
        lp.run(&mut d, RunUntil::Idle).unwrap();
        assert!(lp.event_completed(done));
        assert_eq!(lp.now(), 8_000);
        assert_eq!(d.pool.buffer(0).state, BufferState::Ready);
        assert_eq!(d.pool.buffer(0).sequence, Some(seq));
    }

    #[test]
    fn capture_rejected_in_streaming_mode() {
        let (mut lp, mut d) = devices(1, 16);
        let cam = CameraConfig::streaming(4, 4, 10_000);
        let done = lp.event_init();
        assert!(matches!(
            camera_capture(&mut lp, &mut d, &cam, 0, done),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn zero_size_capture_is_setup_only() {
        let (mut lp, mut d) = devices(1, 0);
        let cam = CameraConfig::trigger(0, 0);
        let done = lp.event_init();
        camera_capture(&mut lp, &mut d, &cam, 0, done).unwrap();
        lp.run(&mut d, RunUntil::Idle).unwrap();
        assert_eq!(lp.now(), DEFAULT_TRIGGER_SETUP_US);
    }

    #[test]
    fn default_trigger_ceiling_is_30hz() {
        let cam = CameraConfig::trigger(160, 96);
        assert!((cam.trigger_ceiling_hz() - 30.0).abs() < 0.01);
    }

    #[test]
    fn streaming_period_floor() {
        assert!(CameraConfig::streaming(160, 160, 6_666).validate().is_err());
        assert!(CameraConfig::streaming(160, 160, 6_667).validate().is_ok());
    }

    #[test]
    fn compute_queues_on_busy_engine() {
        let (mut lp, mut d) = devices(1, 4);
        let e = d.add_engine(Engine::new("cluster"));
        let b = d.pool.try_acquire().unwrap();
        d.pool.mark_ready(b, 7).unwrap();
        let (a, c) = (lp.event_init(), lp.event_init());
        let ra = compute_run(&mut lp, &mut d, e, 20_830, b, a).unwrap();
        let rc = compute_run(&mut lp, &mut d, e, 20_830, b, c).unwrap();
        lp.run(&mut d, RunUntil::Idle).unwrap();
        assert_eq!(d.results[ra], ComputeResult { sequence: 7, completed_at: 20_830 });
        assert_eq!(d.results[rc].completed_at, 41_660);
    }

    #[test]
    fn zero_duration_compute_is_immediate() {
        let (mut lp, mut d) = devices(1, 4);
        let e = d.add_engine(Engine::new("cluster"));
        let b = d.pool.try_acquire().unwrap();
        d.pool.mark_ready(b, 0).unwrap();
        let done = lp.event_init();
        compute_run(&mut lp, &mut d, e, 0, b, done).unwrap();
        assert!(lp.event_completed(done));
    }

    #[test]
    fn compute_requires_ready_input() {
        let (mut lp, mut d) = devices(1, 4);
        let e = d.add_engine(Engine::new("cluster"));
        let done = lp.event_init();
        assert!(compute_run(&mut lp, &mut d, e, 10, 0, done).is_err());
    }

    #[test]
    fn link_send_sender_completes_before_delivery() {
        let (mut lp, mut d) = devices(1, 4);
        let l = d.add_link(LinkConfig::new("spi", NodeId::Gap8, NodeId::Esp32, 20_000_000, 1_000, 1_024));
        let done = lp.event_init();
        let s = link_send(&mut lp, &mut d, l, 25_600, done).unwrap();
        assert_eq!(s.segments, 25);
        assert_eq!(s.delivery_at, 11_240);
        lp.run(&mut d, RunUntil::Time(10_240)).unwrap();
        assert!(lp.event_completed(done));
        assert!(!lp.event_completed(s.delivered));
        lp.run(&mut d, RunUntil::Idle).unwrap();
        assert!(lp.event_completed(s.delivered));
        assert_eq!(d.links[l].bytes_delivered, 25_600);
        assert_eq!(d.links[l].delivered_segments.len(), 25);
    }

    #[test]
    fn zero_byte_send_arrives_at_base_latency() {
        let (mut lp, mut d) = devices(1, 4);
        let l = d.add_link(LinkConfig::new("u", NodeId::Stm32, NodeId::Gap8, 1_000_000, 100, 64));
        let done = lp.event_init();
        let s = link_send(&mut lp, &mut d, l, 0, done).unwrap();
        assert_eq!(s.delivery_at, 100);
    }

    #[test]
    fn unsegmented_oversize_send_fails() {
        let (mut lp, mut d) = devices(1, 4);
        let mut cfg = LinkConfig::crtp(NodeId::Host, NodeId::Nrf51);
        cfg.segmentation = false;
        let l = d.add_link(cfg);
        let done = lp.event_init();
        assert!(link_send(&mut lp, &mut d, l, 32, done).is_err());
    }

    #[test]
    fn standard_graph_routes() {
        let g = NodeGraph::standard();
        g.validate().unwrap();
        let r: Vec<_> = g.route(NodeId::Gap8, NodeId::Host).unwrap().iter().map(|l| l.name.clone()).collect();
        assert_eq!(r, vec!["spi_gap8_esp32", "wifi_esp32_host"]);
        assert!(g.route(NodeId::Gap8, NodeId::Camera).is_err());
        assert_eq!(g.route(NodeId::Host, NodeId::Stm32).unwrap().len(), 2);
    }

    #[test]
    fn stream_matched_rate_has_no_drops() {
        let mut cam = CameraConfig::streaming(160, 96, 20_833);
        cam.readout_us = 8_000;
        let infer = Stage::new("inference", "cluster", 20_833);
        let s = camera_stream(&cam, 2, &[infer], 200).unwrap();
        assert_eq!(s.dropped, 0);
        assert_eq!(s.jitter_us, 0);
        assert_eq!(s.delivered, 200);
    }

    #[test]
    fn stream_single_buffer_drops() {
        let cam = CameraConfig::streaming(160, 96, 10_000);
        let hold = Stage::new("hold", "cluster", 1);
        let mut c = cam.clone();
        c.readout_us = 10_000;
        let s = camera_stream(&c, 1, &[hold], 50).unwrap();
        assert!(s.dropped > 0);
    }

    #[test]
    fn oversubscribed_stream_drops_two_thirds() {
        let cam = CameraConfig::streaming(160, 96, 6_667);
        let infer = Stage::new("inference", "cluster", 20_000);
        let s = camera_stream(&cam, 2, &[infer], 3_000).unwrap();
        let ratio = s.dropped as f64 / 3_000.0;
        assert!((ratio - 2.0 / 3.0).abs() < 0.01, "{ratio}");
    }
}
