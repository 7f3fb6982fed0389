//! CPX-compatible packet layer: wire framing, zero-copy payload handles, a
//! multi-buffer router with credit backpressure and ingress timestamping.
//!
//! Wire layout of one frame:
//!
//! ```text
//! length: u16 LE (route + function + payload bytes)
//! route:    dst[7:5] src[4:2] last[1] reserved[0]
//! function: version[7:6] function[5:0]
//! payload
//! ```

use std::collections::VecDeque;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::coro::{Co, EventId, EventLoop, Micros, RunUntil, Step};
use crate::error::{Error, Result};
use crate::pipeline::Stage;
use crate::trace::{NodeId, Trace, TraceKind};
use crate::vnode::{LinkConfig, NodeGraph};

pub const MAX_PAYLOAD: usize = 1022;
pub const HEADER_BYTES: usize = 4;
/// Trace subject spanning a streamed frame from fragmenting to receipt.
pub const STREAM_STAGE: &str = "frame";
/// Function id of the application image stream.
pub const FN_APP_STREAM: u8 = 5;

/// CPX address of a node, when it has one.
pub fn address(node: NodeId) -> u8 {
    node as u8
}

pub fn node_at(address: u8) -> Option<NodeId> {
    NodeId::ALL.into_iter().find(|&n| n as u8 == address)
}

/// Shared, immutable view into a payload region. Cloning or slicing a
/// handle never copies bytes.
#[derive(Clone, Default)]
pub struct Payload {
    region: Arc<[u8]>,
    offset: usize,
    len: usize,
}

impl Payload {
    /// Wrap `bytes` as a new region (the one producer-side copy).
    pub fn from_vec(bytes: Vec<u8>) -> Self {
        let len = bytes.len();
        Payload {
            region: bytes.into(),
            offset: 0,
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bytes(&self) -> &[u8] {
        &self.region[self.offset..self.offset + self.len]
    }

    pub fn slice(&self, start: usize, len: usize) -> Payload {
        assert!(start + len <= self.len, "payload slice out of range");
        Payload {
            region: self.region.clone(),
            offset: self.offset + start,
            len,
        }
    }

    /// True if both handles point into the same region.
    pub fn shares_region(&self, other: &Payload) -> bool {
        Arc::ptr_eq(&self.region, &other.region)
    }
}

impl PartialEq for Payload {
    fn eq(&self, other: &Self) -> bool {
        self.bytes() == other.bytes()
    }
}

impl fmt::Debug for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Payload({} bytes @{})", self.len, self.offset)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CpxPacket {
    pub source: u8,
    pub destination: u8,
    pub last_fragment: bool,
    pub function: u8,
    pub version: u8,
    pub payload: Payload,
    /// Receiving node's local clock at first-byte arrival.
    pub ingress_ts: Option<i64>,
    /// Payload byte-copies since the packet's data was produced.
    pub copy_count: u32,
}

impl CpxPacket {
    pub fn new(source: NodeId, destination: NodeId, function: u8, payload: Payload) -> Self {
        CpxPacket {
            source: address(source),
            destination: address(destination),
            last_fragment: true,
            function,
            version: 0,
            payload,
            ingress_ts: None,
            copy_count: 0,
        }
    }

    pub fn wire_len(&self) -> usize {
        HEADER_BYTES + self.payload.len()
    }

    /// Header fields only, for equality checks that ignore instrumentation.
    pub fn header(&self) -> (u8, u8, bool, u8, u8) {
        (self.source, self.destination, self.last_fragment, self.function, self.version)
    }
}

pub fn packet_encode(pkt: &CpxPacket) -> Result<Vec<u8>> {
    if pkt.payload.len() > MAX_PAYLOAD {
        return Err(Error::PayloadTooLarge {
            len: pkt.payload.len(),
            max: MAX_PAYLOAD,
        });
    }
    if pkt.source > 7 || pkt.destination > 7 || pkt.function > 63 || pkt.version > 3 {
        return Err(Error::usage("header field out of range"));
    }
    let mut out = Vec::with_capacity(pkt.wire_len());
    out.extend_from_slice(&((2 + pkt.payload.len()) as u16).to_le_bytes());
    out.push(pkt.destination << 5 | pkt.source << 2 | u8::from(pkt.last_fragment) << 1);
    out.push(pkt.version << 6 | pkt.function);
    out.extend_from_slice(pkt.payload.bytes());
    Ok(out)
}

pub fn packet_decode(bytes: &[u8]) -> Result<CpxPacket> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::Decode(format!("frame of {} bytes is too short", bytes.len())));
    }
    let length = u16::from_le_bytes([bytes[0], bytes[1]]) as usize;
    if length < 2 || length != bytes.len() - 2 {
        return Err(Error::Decode(format!(
            "length field {length} does not match {} frame bytes",
            bytes.len()
        )));
    }
    if length - 2 > MAX_PAYLOAD {
        return Err(Error::Decode(format!("payload of {} bytes exceeds {MAX_PAYLOAD}", length - 2)));
    }
    let route = bytes[2];
    if route & 1 != 0 {
        return Err(Error::Decode("reserved route bit set".into()));
    }
    Ok(CpxPacket {
        source: (route >> 2) & 7,
        destination: route >> 5,
        last_fragment: route & 2 != 0,
        function: bytes[3] & 0x3f,
        version: bytes[3] >> 6,
        payload: Payload::from_vec(bytes[4..].to_vec()),
        ingress_ts: None,
        copy_count: 0,
    })
}

/// Split `payload` into MTU-sized packets sharing its region.
pub fn fragment(source: NodeId, destination: NodeId, function: u8, payload: &Payload) -> Vec<CpxPacket> {
    let n = payload.len().div_ceil(MAX_PAYLOAD).max(1);
    (0..n)
        .map(|i| {
            let start = i * MAX_PAYLOAD;
            let len = MAX_PAYLOAD.min(payload.len() - start);
            let mut p = CpxPacket::new(source, destination, function, payload.slice(start, len));
            p.last_fragment = i + 1 == n;
            p
        })
        .collect()
}

/// Wire bytes needed to carry `bytes` of payload.
pub fn wire_bytes(bytes: usize) -> usize {
    bytes + HEADER_BYTES * bytes.div_ceil(MAX_PAYLOAD).max(1)
}

/// Stamp `pkt` with `node`'s local clock. Later hops overwrite the stamp.
pub fn timestamp_ingress(clocks: &NodeGraph, node: NodeId, pkt: &mut CpxPacket, global_now: Micros) {
    pkt.ingress_ts = Some(clocks.local_time(node, global_now));
}

/// Two-way timestamp exchange between `a` and `b` along the graph's routes.
/// Returns `b`'s clock minus `a`'s. Any asymmetry between the two
/// directions biases the estimate by half the difference.
pub fn estimate_clock_offset(graph: &NodeGraph, a: NodeId, b: NodeId, rounds: u32) -> Result<f64> {
    if rounds == 0 {
        return Err(Error::usage("clock offset estimation needs at least one round"));
    }
    let there: Micros = graph.route(a, b)?.iter().map(|l| l.transfer_time(HEADER_BYTES)).sum();
    let back: Micros = graph.route(b, a)?.iter().map(|l| l.transfer_time(HEADER_BYTES)).sum();
    const TURNAROUND_US: Micros = 50;
    const ROUND_SPACING_US: Micros = 10_000;
    let mut sum = 0.0;
    for r in 0..rounds as Micros {
        let send = r * ROUND_SPACING_US;
        let t1 = graph.local_time(a, send);
        let t2 = graph.local_time(b, send + there);
        let t3 = graph.local_time(b, send + there + TURNAROUND_US);
        let t4 = graph.local_time(a, send + there + TURNAROUND_US + back);
        sum += ((t2 - t1) + (t3 - t4)) as f64 / 2.0;
    }
    Ok(sum / rounds as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterMode {
    /// Handles are queued per output interface; ingress and egress overlap.
    #[default]
    ZeroCopy,
    /// Single-buffer store-and-forward with a payload copy in the router.
    Baseline,
}

/// Baseline router payload copy cost. Calibrated so that the baseline arm
/// of the 160×160 stream lands at 30 frame/s; not a measured figure.
pub const BASELINE_COPY_NS_PER_BYTE: u64 = 358;

/// Output interface of the router: a bounded FIFO of packet handles plus
/// the credit counter senders reserve slots from.
#[derive(Debug)]
pub struct RouterQueue {
    pub name: String,
    pub link: LinkConfig,
    pub capacity: usize,
    queue: VecDeque<CpxPacket>,
    credits: usize,
    credit_waiters: VecDeque<EventId>,
    nonempty: Option<EventId>,
    pub max_occupancy: usize,
    pub enqueued: u64,
    pub forwarded: u64,
}

impl RouterQueue {
    pub fn new(link: LinkConfig, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("router queue capacity must be at least 1"));
        }
        Ok(RouterQueue {
            name: link.name.clone(),
            link,
            capacity,
            queue: VecDeque::new(),
            credits: capacity,
            credit_waiters: VecDeque::new(),
            nonempty: None,
            max_occupancy: 0,
            enqueued: 0,
            forwarded: 0,
        })
    }

    /// Slots either queued or reserved by a sender.
    pub fn occupancy(&self) -> usize {
        self.capacity - self.credits
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }
}

#[derive(Debug)]
pub struct Router {
    pub mode: RouterMode,
    pub interfaces: Vec<RouterQueue>,
    pub error_sink: u64,
    /// Payload copies performed inside the router.
    pub copies: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reserve {
    Granted(usize),
    Wait(usize, EventId),
    Unroutable,
}

impl Router {
    pub fn new(mode: RouterMode) -> Self {
        Router {
            mode,
            interfaces: Vec::new(),
            error_sink: 0,
            copies: 0,
        }
    }

    pub fn add_interface(&mut self, q: RouterQueue) -> usize {
        self.interfaces.push(q);
        self.interfaces.len() - 1
    }

    pub fn interface_for(&self, destination: u8) -> Option<usize> {
        let node = node_at(destination)?;
        self.interfaces.iter().position(|q| q.link.to == node)
    }

    /// Reserve one slot on the interface serving `destination`. A sender
    /// given `Wait` must suspend on the event; the slot is its on wake-up.
    pub fn reserve<W>(&mut self, lp: &mut EventLoop<W>, destination: u8) -> Reserve {
        let Some(i) = self.interface_for(destination) else {
            return Reserve::Unroutable;
        };
        let q = &mut self.interfaces[i];
        if q.credits > 0 {
            q.credits -= 1;
            q.max_occupancy = q.max_occupancy.max(q.occupancy());
            Reserve::Granted(i)
        } else {
            let ev = lp.event_init();
            q.credit_waiters.push_back(ev);
            Reserve::Wait(i, ev)
        }
    }

    /// Header inspection and enqueue of a received packet. The payload
    /// handle moves into the queue; no bytes are copied. Packets without
    /// an output interface go to the error sink.
    pub fn forward<W>(&mut self, lp: &mut EventLoop<W>, pkt: CpxPacket) -> Result<Option<usize>> {
        let Some(i) = self.interface_for(pkt.destination) else {
            self.error_sink += 1;
            return Ok(None);
        };
        let q = &mut self.interfaces[i];
        if q.queue.len() >= q.occupancy() {
            return Err(Error::usage(format!("packet forwarded to `{}` without a reserved slot", q.name)));
        }
        q.queue.push_back(pkt);
        q.enqueued += 1;
        if let Some(ev) = q.nonempty.take() {
            lp.event_complete(ev)?;
        }
        Ok(Some(i))
    }

    /// Hand a slot back once its packet left on the output link.
    pub fn release_slot<W>(&mut self, lp: &mut EventLoop<W>, iface: usize) -> Result<()> {
        let q = &mut self.interfaces[iface];
        match q.credit_waiters.pop_front() {
            Some(ev) => lp.event_complete(ev),
            None => {
                q.credits += 1;
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub frames: u64,
    pub frame_bytes: usize,
    pub ingress: LinkConfig,
    pub egress: LinkConfig,
    #[serde(default)]
    pub mode: RouterMode,
    #[serde(default = "default_capacity")]
    pub queue_capacity: usize,
    /// Frame period of the producer; `None` streams back to back.
    #[serde(default)]
    pub source_period_us: Option<Micros>,
    #[serde(default = "default_copy")]
    pub copy_ns_per_byte: u64,
}

fn default_capacity() -> usize {
    8
}
fn default_copy() -> u64 {
    BASELINE_COPY_NS_PER_BYTE
}

impl StreamConfig {
    /// 160×160 grayscale frames over SPI then Wi-Fi, link budgets set to
    /// sustain 72 frame/s with the zero-copy router.
    pub fn streaming_160(frames: u64, mode: RouterMode) -> Self {
        StreamConfig {
            frames,
            frame_bytes: 160 * 160,
            ingress: LinkConfig::new("spi_gap8_esp32", NodeId::Gap8, NodeId::Esp32, 20_000_000, 0, 1_026),
            egress: LinkConfig::new("wifi_esp32_host", NodeId::Esp32, NodeId::Host, 14_816_000, 2_000, 1_026),
            mode,
            queue_capacity: default_capacity(),
            source_period_us: None,
            copy_ns_per_byte: BASELINE_COPY_NS_PER_BYTE,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.ingress.to != self.egress.from {
            return Err(Error::config("ingress and egress links do not meet at the router"));
        }
        if self.frames == 0 {
            return Err(Error::config("stream needs at least one frame"));
        }
        Ok(())
    }
}

/// Per-frame router cost in baseline mode.
pub fn copy_time_us(bytes: usize, ns_per_byte: u64) -> Micros {
    (bytes as u64 * ns_per_byte).div_ceil(1_000)
}

/// Pipeline stages for one frame crossing the router, for use in
/// whole-system scenarios. Zero-copy gives two overlapping link stages;
/// baseline merges ingress, copy and egress into one router stage.
pub fn route_stages(
    ingress: &LinkConfig,
    egress: &LinkConfig,
    bytes: usize,
    mode: RouterMode,
    copy_ns_per_byte: u64,
    after: &str,
) -> Vec<Stage> {
    let wire = wire_bytes(bytes);
    match mode {
        RouterMode::ZeroCopy => {
            let a = ingress.stage(&ingress.name, wire).after(after);
            let b = egress.stage(&egress.name, wire).after(&ingress.name).releases_buffer(false);
            vec![a, b]
        }
        RouterMode::Baseline => {
            let busy = ingress.serialization_us(wire)
                + ingress.propagation_us()
                + copy_time_us(bytes, copy_ns_per_byte)
                + egress.serialization_us(wire);
            let mut s = Stage::new(&egress.name, "cpx_router", busy)
                .on(ingress.from)
                .with_latency(egress.propagation_us())
                .after(after);
            s.rx_node = egress.to;
            s.link = Some(egress.name.clone());
            vec![s]
        }
    }
}

/// Closed-form frame period of [`run_stream`] in steady state.
pub fn expected_frame_period(cfg: &StreamConfig) -> f64 {
    let sizes: Vec<usize> = fragment(cfg.ingress.from, cfg.egress.to, FN_APP_STREAM, &Payload::from_vec(vec![0; cfg.frame_bytes]))
        .iter()
        .map(|p| p.payload.len())
        .collect();
    let ser_in: Micros = sizes.iter().map(|b| cfg.ingress.serialization_us(b + HEADER_BYTES)).sum();
    let link_bound = match cfg.mode {
        RouterMode::ZeroCopy => {
            let ser_out: Micros = sizes.iter().map(|b| cfg.egress.serialization_us(b + HEADER_BYTES)).sum();
            ser_in.max(ser_out)
        }
        RouterMode::Baseline => sizes
            .iter()
            .map(|&b| {
                cfg.ingress.serialization_us(b + HEADER_BYTES)
                    + cfg.ingress.propagation_us()
                    + copy_time_us(b, cfg.copy_ns_per_byte)
                    + cfg.egress.serialization_us(b + HEADER_BYTES)
            })
            .sum(),
    };
    (link_bound as f64).max(cfg.source_period_us.unwrap_or(0) as f64)
}

#[derive(Debug)]
pub struct StreamReport {
    pub trace: Trace,
    pub mode: RouterMode,
    /// Global receipt time of each frame's last fragment at the far end.
    pub frame_receipts: Vec<Micros>,
    pub packets_sent: u64,
    pub packets_delivered: u64,
    pub error_sink: u64,
    pub router_copies: u64,
    /// Largest copy count seen on any delivered packet.
    pub max_copy_count: u32,
    pub max_occupancy: usize,
    pub queue_capacity: usize,
    pub sender_suspensions: u64,
    pub conservation_violations: u64,
    pub end_time: Micros,
}

impl StreamReport {
    /// Steady-state frame rate at the receiver.
    pub fn fps(&self, skip: usize) -> Option<f64> {
        let t: Vec<Micros> = self.frame_receipts.iter().skip(skip).copied().collect();
        if t.len() < 2 {
            return None;
        }
        Some((t.len() - 1) as f64 * 1e6 / (t[t.len() - 1] - t[0]) as f64)
    }
}

struct StreamWorld {
    cfg: StreamConfig,
    clocks: NodeGraph,
    router: Router,
    iface: usize,
    // producer
    frame: u64,
    packets: VecDeque<CpxPacket>,
    ingress_free_at: Micros,
    // in flight on the ingress link: (arrival time, frame, packet)
    arrivals: Vec<Option<(Micros, u64, CpxPacket)>>,
    // frame of each queued packet, in queue order
    queued_frames: VecDeque<u64>,
    on_wire: Option<(u64, CpxPacket)>,
    deliveries: Vec<Option<(Micros, u64, CpxPacket)>>,
    frame_receipts: Vec<Micros>,
    sent: u64,
    delivered: u64,
    max_copy: u32,
    suspensions: u64,
    violations: u64,
    arrival_id: crate::coro::CoroutineId,
    delivery_id: crate::coro::CoroutineId,
}

impl StreamWorld {
    fn check_conservation(&mut self) {
        let q = &self.router.interfaces[self.iface];
        let in_flight = self.arrivals.iter().filter(|a| a.is_some()).count() as u64
            + q.queued() as u64
            + u64::from(self.on_wire.is_some())
            + self.deliveries.iter().filter(|d| d.is_some()).count() as u64;
        if self.sent != self.delivered + in_flight + self.router.error_sink || q.occupancy() > q.capacity {
            self.violations += 1;
        }
    }
}

mod pt {
    pub const TICK: u16 = 1;
    pub const NEXT_PACKET: u16 = 2;
    pub const HAVE_SLOT: u16 = 3;
    pub const SENT: u16 = 4;
    pub const IDLE: u16 = 5;
    pub const COPIED: u16 = 6;
    pub const TRANSMITTED: u16 = 7;
}

/// GAP8 side: fragments each frame and pushes packets over the ingress
/// link, suspending whenever the router has no free slot.
fn producer(co: &mut Co<'_, StreamWorld>) -> Result<Step> {
    match co.resume_point() {
        0 | pt::TICK => {
            let w = co.world();
            if w.frame >= w.cfg.frames {
                return Ok(Step::Done);
            }
            if let Some(period) = w.cfg.source_period_us {
                let at = w.frame * period;
                let ev = co.sleep_until(at);
                return co.wait(ev, pt::NEXT_PACKET);
            }
            Ok(Step::Jump(pt::NEXT_PACKET))
        }
        pt::NEXT_PACKET => {
            let (lp, w) = co.parts();
            if w.packets.is_empty() {
                // Producer fill: the single copy into the frame region.
                let bytes: Vec<u8> = (0..w.cfg.frame_bytes).map(|i| (i as u64 + w.frame) as u8).collect();
                let frame = Payload::from_vec(bytes);
                let (src, dst) = (w.cfg.ingress.from, w.cfg.egress.to);
                for mut p in fragment(src, dst, FN_APP_STREAM, &frame) {
                    p.copy_count = 1;
                    w.packets.push_back(p);
                }
                lp.record(src, TraceKind::StageStart, STREAM_STAGE, Some(w.frame));
            }
            let dst = w.packets[0].destination;
            match w.router.reserve(lp, dst) {
                Reserve::Granted(_) => Ok(Step::Jump(pt::HAVE_SLOT)),
                Reserve::Wait(_, ev) => {
                    w.suspensions += 1;
                    let node = w.cfg.ingress.from;
                    lp.record(node, TraceKind::QueueFull, w.router.interfaces[w.iface].name.clone(), Some(w.frame));
                    co.wait(ev, pt::HAVE_SLOT)
                }
                Reserve::Unroutable => Err(Error::NoRoute {
                    from: w.cfg.ingress.from.to_string(),
                    to: dst.to_string(),
                }),
            }
        }
        pt::HAVE_SLOT => {
            let now = co.now();
            let (lp, w) = co.parts();
            let pkt = w.packets.pop_front().expect("packet pending");
            let link = &w.cfg.ingress;
            let start = now.max(w.ingress_free_at);
            let last_out = start + link.serialization_us(pkt.wire_len());
            let arrival = last_out + link.propagation_us();
            w.ingress_free_at = last_out;
            lp.record(link.from, TraceKind::LinkTxStart, link.name.clone(), Some(w.frame));
            w.sent += 1;
            w.arrivals.push(Some((arrival, w.frame, pkt)));
            let idx = w.arrivals.len() - 1;
            let id = w.arrival_id;
            w.check_conservation();
            co.spawn(id, idx)?;
            let ev = co.sleep_until(last_out);
            co.wait(ev, pt::SENT)
        }
        pt::SENT => {
            let w = co.world();
            if w.packets.is_empty() {
                w.frame += 1;
                return Ok(Step::Jump(pt::TICK));
            }
            Ok(Step::Jump(pt::NEXT_PACKET))
        }
        p => Err(Error::usage(format!("producer resumed at unknown point {p}"))),
    }
}

/// Router ingress: stamp at first-byte arrival, enqueue at last byte.
fn arrival(co: &mut Co<'_, StreamWorld>) -> Result<Step> {
    let i = co.args();
    match co.resume_point() {
        0 => {
            let (at, ser) = {
                let w = co.world();
                let (at, _, pkt) = w.arrivals[i].as_ref().expect("arrival pending");
                (*at, w.cfg.ingress.serialization_us(pkt.wire_len()))
            };
            let first_byte = at - ser;
            let ev = co.sleep_until(first_byte);
            co.wait(ev, 1)
        }
        1 => {
            let now = co.now();
            let w = co.world();
            let node = w.cfg.ingress.to;
            let clocks = w.clocks.clone();
            let (at, _, pkt) = w.arrivals[i].as_mut().expect("arrival pending");
            timestamp_ingress(&clocks, node, pkt, now);
            let at = *at;
            let ev = co.sleep_until(at);
            co.wait(ev, 2)
        }
        _ => {
            let (lp, w) = co.parts();
            let (_, frame, pkt) = w.arrivals[i].take().expect("arrival pending");
            lp.record(w.cfg.ingress.to, TraceKind::LinkRxEnd, w.cfg.ingress.name.clone(), Some(frame));
            if w.router.forward(lp, pkt)?.is_some() {
                w.queued_frames.push_back(frame);
            } else {
                // The slot reserved for it goes back immediately.
                let iface = w.iface;
                w.router.release_slot(lp, iface)?;
            }
            w.check_conservation();
            Ok(Step::Done)
        }
    }
}

/// Router egress: drains the interface queue onto the output link.
fn forwarder(co: &mut Co<'_, StreamWorld>) -> Result<Step> {
    match co.resume_point() {
        0 | pt::IDLE => {
            let (lp, w) = co.parts();
            let iface = w.iface;
            let q = &mut w.router.interfaces[iface];
            let Some(pkt) = q.queue.pop_front() else {
                if w.frame >= w.cfg.frames && w.arrivals.iter().all(Option::is_none) {
                    return Ok(Step::Done);
                }
                let ev = lp.event_init();
                q.nonempty = Some(ev);
                return co.wait(ev, pt::IDLE);
            };
            let mode = w.router.mode;
            let copy = copy_time_us(pkt.payload.len(), w.cfg.copy_ns_per_byte);
            let frame = w.queued_frames.pop_front().expect("queued frame tag");
            w.on_wire = Some((frame, pkt));
            if mode == RouterMode::Baseline {
                let ev = co.sleep_for(copy);
                return co.wait(ev, pt::COPIED);
            }
            Ok(Step::Jump(pt::COPIED))
        }
        pt::COPIED => {
            let w = co.world();
            let (frame, mut pkt) = w.on_wire.take().expect("packet on wire");
            if w.router.mode == RouterMode::Baseline {
                pkt.payload = Payload::from_vec(pkt.payload.bytes().to_vec());
                pkt.copy_count += 1;
                w.router.copies += 1;
            }
            let link = &w.cfg.egress;
            let ser = link.serialization_us(pkt.wire_len());
            let node = link.from;
            let name = link.name.clone();
            w.on_wire = Some((frame, pkt));
            co.lp().record(node, TraceKind::LinkTxStart, name, Some(frame));
            let ev = co.sleep_for(ser);
            co.wait(ev, pt::TRANSMITTED)
        }
        pt::TRANSMITTED => {
            let now = co.now();
            let (lp, w) = co.parts();
            let (frame, pkt) = w.on_wire.take().expect("packet on wire");
            w.router.interfaces[w.iface].forwarded += 1;
            w.deliveries.push(Some((now + w.cfg.egress.propagation_us(), frame, pkt)));
            let idx = w.deliveries.len() - 1;
            let iface = w.iface;
            w.router.release_slot(lp, iface)?;
            let id = w.delivery_id;
            w.check_conservation();
            co.spawn(id, idx)?;
            Ok(Step::Jump(pt::IDLE))
        }
        p => Err(Error::usage(format!("forwarder resumed at unknown point {p}"))),
    }
}

fn delivery(co: &mut Co<'_, StreamWorld>) -> Result<Step> {
    let i = co.args();
    match co.resume_point() {
        0 => {
            let at = co.world().deliveries[i].as_ref().expect("delivery pending").0;
            let ev = co.sleep_until(at);
            co.wait(ev, 1)
        }
        _ => {
            let now = co.now();
            let (lp, w) = co.parts();
            let (_, frame, pkt) = w.deliveries[i].take().expect("delivery pending");
            w.delivered += 1;
            w.max_copy = w.max_copy.max(pkt.copy_count);
            if pkt.last_fragment {
                lp.record(w.cfg.egress.to, TraceKind::LinkRxEnd, w.cfg.egress.name.clone(), Some(frame));
                lp.record(w.cfg.egress.to, TraceKind::StageEnd, STREAM_STAGE, Some(frame));
                w.frame_receipts.push(now);
            }
            w.check_conservation();
            Ok(Step::Done)
        }
    }
}

/// Stream `cfg.frames` frames from the ingress sender through the router
/// to the egress peer.
pub fn run_stream(cfg: &StreamConfig, clocks: &NodeGraph) -> Result<StreamReport> {
    cfg.validate()?;
    let mut router = Router::new(cfg.mode);
    let capacity = match cfg.mode {
        RouterMode::ZeroCopy => cfg.queue_capacity,
        RouterMode::Baseline => 1,
    };
    let iface = router.add_interface(RouterQueue::new(cfg.egress.clone(), capacity)?);
    let mut lp: EventLoop<StreamWorld> = EventLoop::virtual_time();
    let offsets: Vec<(NodeId, i64)> = NodeId::ALL.iter().map(|&n| (n, clocks.offset(n))).collect();
    lp.set_trace(Trace::with_offsets(&offsets));
    let mut w = StreamWorld {
        cfg: cfg.clone(),
        clocks: clocks.clone(),
        router,
        iface,
        frame: 0,
        packets: VecDeque::new(),
        ingress_free_at: 0,
        arrivals: Vec::new(),
        queued_frames: VecDeque::new(),
        on_wire: None,
        deliveries: Vec::new(),
        frame_receipts: Vec::new(),
        sent: 0,
        delivered: 0,
        max_copy: 0,
        suspensions: 0,
        violations: 0,
        arrival_id: lp.register("cpx_arrival", arrival),
        delivery_id: lp.register("cpx_delivery", delivery),
    };
    let p = lp.register("cpx_producer", producer);
    let f = lp.register("cpx_forwarder", forwarder);
    let ctx = lp.ctx_init(p, 0)?.with_node(cfg.ingress.from);
    lp.spawn(ctx)?;
    let ctx = lp.ctx_init(f, 0)?.with_node(cfg.egress.from);
    lp.spawn(ctx)?;
    lp.run(&mut w, RunUntil::Idle)?;
    let q = &w.router.interfaces[iface];
    Ok(StreamReport {
        mode: cfg.mode,
        frame_receipts: w.frame_receipts,
        packets_sent: w.sent,
        packets_delivered: w.delivered,
        error_sink: w.router.error_sink,
        router_copies: w.router.copies,
        max_copy_count: w.max_copy,
        max_occupancy: q.max_occupancy,
        queue_capacity: q.capacity,
        sender_suspensions: w.suspensions,
        conservation_violations: w.violations,
        end_time: lp.now(),
        trace: lp.take_trace(),
    })
}
