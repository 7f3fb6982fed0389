//! Canned closed-loop workloads and the metrics computed from their traces.
//!
//! A scenario is a JSON document (see `crates/core/scenarios/`) describing
//! the camera, the stage durations, link overrides, clock offsets and run
//! parameters. Three workloads exist:
//!
//! * `onboard` — capture → inference on the GAP8 cluster, with optional
//!   image streaming over SPI and control output over UART;
//! * `remote` — the image crosses SPI and Wi-Fi to the host, the result
//!   comes back over Wi-Fi, SPI and UART;
//! * `stream` — raw frame streaming through the CPX router, packet by packet.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coro::Micros;
use crate::cpx::{self, RouterMode, StreamConfig};
use crate::error::{Error, Result};
use crate::oracle::{analytic_oracle, Unavailable};
use crate::pipeline::{self, Mode, OnBusy, PipelineConfig, Source, Stage, STEADY_STATE_SKIP};
use crate::trace::{NodeId, Trace, TraceKind};
use crate::vnode::{CameraConfig, CameraMode, LinkConfig, NodeGraph};

pub const MIN_FRAMES: u64 = 50;
/// Default size of an inference result sent back to the flight controller.
pub const DEFAULT_RESULT_BYTES: usize = 16;

pub const SCENARIO_DIR_ENV: &str = "NANOPIPE_SCENARIO_DIR";

const BUILTIN: &[(&str, &str)] = &[
    ("pulp-frontnet-48", include_str!("../scenarios/pulp-frontnet-48.json")),
    ("nanoflownet-11", include_str!("../scenarios/nanoflownet-11.json")),
    ("fcnn-39", include_str!("../scenarios/fcnn-39.json")),
    ("imav-30", include_str!("../scenarios/imav-30.json")),
    ("remote-offload-40", include_str!("../scenarios/remote-offload-40.json")),
    ("onboard-latency-30", include_str!("../scenarios/onboard-latency-30.json")),
    ("remote-40hz", include_str!("../scenarios/remote-40hz.json")),
    ("remote-40hz-delay500", include_str!("../scenarios/remote-40hz-delay500.json")),
    ("remote-sweep", include_str!("../scenarios/remote-sweep.json")),
    ("streaming-72hz", include_str!("../scenarios/streaming-72hz.json")),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Workload {
    Onboard,
    Remote,
    Stream,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageDurations {
    /// Defaults to the camera's readout (streaming) or setup + readout
    /// (triggered).
    #[serde(default)]
    pub capture_us: Option<Micros>,
    /// Onboard cluster inference, or host inference for remote workloads.
    #[serde(default)]
    pub inference_us: Micros,
    /// Onboard image streaming over SPI, a parallel consumer of the frame.
    #[serde(default)]
    pub spi_tx_us: Option<Micros>,
    /// Control output to the flight controller. Remote workloads derive it
    /// from the UART link when unset.
    #[serde(default)]
    pub uart_down_us: Option<Micros>,
}

/// Partial override of a link in the standard node graph.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkPatch {
    pub bandwidth_bps: Option<u64>,
    pub base_latency_us: Option<Micros>,
    pub mtu: Option<usize>,
    pub injected_delay_us: Option<Micros>,
    pub segmentation: Option<bool>,
}

fn default_pool() -> usize {
    2
}
fn default_mode() -> Mode {
    Mode::Pipelined
}
fn default_result_bytes() -> usize {
    DEFAULT_RESULT_BYTES
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// Parameters back-computed from published rates rather than measured,
    /// with the reasoning.
    #[serde(default)]
    pub derived: BTreeMap<String, String>,
    pub workload: Workload,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default)]
    pub router: RouterMode,
    #[serde(default = "default_pool")]
    pub pool_size: usize,
    pub frames: u64,
    #[serde(default)]
    pub seed: u64,
    pub camera: CameraConfig,
    /// Rate-limited triggering; frames wait for a buffer instead of dropping.
    #[serde(default)]
    pub trigger_rate_hz: Option<f64>,
    pub stages: StageDurations,
    /// Defaults to the camera frame size.
    #[serde(default)]
    pub image_bytes: Option<usize>,
    #[serde(default = "default_result_bytes")]
    pub result_bytes: usize,
    #[serde(default)]
    pub links: BTreeMap<String, LinkPatch>,
    #[serde(default)]
    pub offsets: BTreeMap<NodeId, i64>,
    /// Seeded extra Wi-Fi airtime per frame, uniform in `0..=wifi_jitter_us`.
    #[serde(default)]
    pub wifi_jitter_us: Micros,
    #[serde(default)]
    pub queue_capacity: Option<usize>,
    #[serde(default)]
    pub copy_ns_per_byte: Option<u64>,
    /// Rate the closed loop is compared against; defaults to 1/inference.
    #[serde(default)]
    pub inference_hz: Option<f64>,
    /// Trigger rates for [`run_sweep`].
    #[serde(default)]
    pub sweep_hz: Vec<f64>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < MIN_FRAMES {
            return Err(Error::config(format!(
                "scenario `{}` runs {} frames; steady-state metrics need at least {MIN_FRAMES}",
                self.name, self.frames
            )));
        }
        if self.pool_size == 0 {
            return Err(Error::config("pool_size must be at least 1"));
        }
        if self.workload != Workload::Stream && self.stages.inference_us == 0 {
            return Err(Error::config("inference_us must be positive"));
        }
        if self.camera.mode == CameraMode::Streaming {
            self.camera.validate()?;
        }
        if let Some(rate) = self.trigger_rate_hz {
            if !rate.is_finite() || rate <= 0.0 {
                return Err(Error::config("trigger rate must be positive"));
            }
            let ceiling = self.camera.trigger_ceiling_hz();
            if rate > ceiling + 1e-9 {
                return Err(Error::config(format!(
                    "trigger rate {rate} Hz exceeds the camera's {ceiling:.2} Hz ceiling"
                )));
            }
        }
        let graph = NodeGraph::standard();
        for name in self.links.keys() {
            if graph.link(name).is_none() {
                return Err(Error::config(format!("unknown link `{name}`")));
            }
        }
        self.graph().validate()
    }

    /// Standard topology with this scenario's link patches and offsets.
    pub fn graph(&self) -> NodeGraph {
        let mut g = NodeGraph::standard();
        for (name, p) in &self.links {
            if let Some(l) = g.link_mut(name) {
                if let Some(v) = p.bandwidth_bps {
                    l.bandwidth_bps = v;
                }
                if let Some(v) = p.base_latency_us {
                    l.base_latency_us = v;
                }
                if let Some(v) = p.mtu {
                    l.mtu = v;
                }
                if let Some(v) = p.injected_delay_us {
                    l.injected_delay_us = v;
                }
                if let Some(v) = p.segmentation {
                    l.segmentation = v;
                }
            }
        }
        for (&n, &o) in &self.offsets {
            g.set_offset(n, o);
        }
        g
    }

    pub fn image_bytes(&self) -> usize {
        self.image_bytes.unwrap_or_else(|| self.camera.frame_bytes())
    }

    pub fn inference_hz(&self) -> f64 {
        self.inference_hz
            .unwrap_or_else(|| 1e6 / self.stages.inference_us.max(1) as f64)
    }

    fn trigger_period(&self) -> Option<Micros> {
        self.trigger_rate_hz.map(|r| (1e6 / r).round() as Micros)
    }

    fn streaming_source(&self) -> bool {
        self.trigger_rate_hz.is_none() && self.mode == Mode::Pipelined && self.camera.mode == CameraMode::Streaming
    }

    /// How frames enter the pipeline. A streaming camera free-runs and
    /// drops frames with no buffer to land in; otherwise each frame is
    /// requested, either as soon as possible or at the trigger rate.
    pub fn source(&self) -> Source {
        if let Some(period_us) = self.trigger_period() {
            Source::Periodic {
                period_us,
                on_busy: OnBusy::Block,
            }
        } else if self.streaming_source() {
            Source::Periodic {
                period_us: self.camera.frame_period_us,
                on_busy: OnBusy::Drop,
            }
        } else {
            Source::FreeRunning
        }
    }

    pub fn capture_us(&self) -> Micros {
        self.stages.capture_us.unwrap_or(if self.streaming_source() {
            self.camera.readout_us
        } else {
            self.camera.capture_time()
        })
    }

    fn link(&self, graph: &NodeGraph, name: &str) -> Result<LinkConfig> {
        graph
            .link(name)
            .cloned()
            .ok_or_else(|| Error::config(format!("unknown link `{name}`")))
    }

    /// Stage graph of an onboard or remote workload, and its sink stage.
    pub fn stages(&self) -> Result<(Vec<Stage>, String)> {
        let graph = self.graph();
        let capture = Stage::new("capture", "udma", self.capture_us()).on(NodeId::Gap8);
        let mut stages = vec![capture];
        let sink;
        match self.workload {
            Workload::Onboard => {
                stages.push(
                    Stage::new("inference", "cluster", self.stages.inference_us)
                        .on(NodeId::Gap8)
                        .after("capture"),
                );
                if let Some(us) = self.stages.spi_tx_us {
                    let link = self.link(&graph, "spi_gap8_esp32")?;
                    let mut s = Stage::new("spi_tx", &link.name, us)
                        .on(NodeId::Gap8)
                        .with_latency(link.propagation_us())
                        .after("capture");
                    s.rx_node = link.to;
                    s.link = Some(link.name);
                    stages.push(s);
                }
                match self.stages.uart_down_us {
                    Some(us) => {
                        let link = self.link(&graph, "uart_gap8_stm32")?;
                        let mut s = Stage::new("uart_down", &link.name, us)
                            .on(NodeId::Gap8)
                            .after("inference")
                            .releases_buffer(false);
                        s.rx_node = link.to;
                        s.link = Some(link.name);
                        stages.push(s);
                        sink = "uart_down".to_string();
                    }
                    None => sink = "inference".to_string(),
                }
            }
            Workload::Remote => {
                let spi = self.link(&graph, "spi_gap8_esp32")?;
                let wifi = self.link(&graph, "wifi_esp32_host")?;
                let copy = self.copy_ns_per_byte.unwrap_or(cpx::BASELINE_COPY_NS_PER_BYTE);
                let mut route = cpx::route_stages(&spi, &wifi, self.image_bytes(), self.router, copy, "capture");
                if let Some(last) = route.last_mut() {
                    last.jitter_us = self.wifi_jitter_us;
                }
                stages.extend(route);
                stages.push(
                    Stage::new("host_inference", "host_cpu", self.stages.inference_us)
                        .on(NodeId::Host)
                        .after(&wifi.name)
                        .releases_buffer(false),
                );
                let result = cpx::wire_bytes(self.result_bytes);
                let mut prev = "host_inference".to_string();
                for name in ["wifi_host_esp32", "spi_esp32_gap8", "uart_gap8_stm32"] {
                    let link = self.link(&graph, name)?;
                    let mut s = link.stage(name, result).after(&prev).releases_buffer(false);
                    if name == "uart_gap8_stm32" {
                        if let Some(us) = self.stages.uart_down_us {
                            s.timing.occupancy_us = us;
                        }
                    }
                    stages.push(s);
                    prev = name.to_string();
                }
                sink = prev;
            }
            Workload::Stream => return Err(Error::usage("stream workloads have no stage graph")),
        }
        Ok((stages, sink))
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig> {
        let (stages, sink) = self.stages()?;
        let mut cfg = PipelineConfig::new(stages, self.mode, self.pool_size, self.frames);
        cfg.buffer_bytes = self.image_bytes();
        cfg.source = self.source();
        cfg.sink = Some(sink);
        cfg.seed = self.seed;
        cfg.offsets = self.offsets.iter().map(|(&n, &o)| (n, o)).collect();
        Ok(cfg)
    }

    pub fn stream_config(&self) -> Result<StreamConfig> {
        let graph = self.graph();
        let mut cfg = StreamConfig::streaming_160(self.frames, self.router);
        cfg.frame_bytes = self.image_bytes();
        cfg.ingress = self.link(&graph, "spi_gap8_esp32")?;
        cfg.egress = self.link(&graph, "wifi_esp32_host")?;
        cfg.source_period_us = Some(self.trigger_period().unwrap_or(self.camera.frame_period_us));
        if let Some(q) = self.queue_capacity {
            cfg.queue_capacity = q;
        }
        if let Some(c) = self.copy_ns_per_byte {
            cfg.copy_ns_per_byte = c;
        }
        Ok(cfg)
    }

    /// What the metrics are read from: probes, reference rate and the
    /// clock offsets a two-way exchange would estimate.
    pub fn metrics_spec(&self) -> Result<MetricsSpec> {
        let graph = self.graph();
        let (capture, sink, rtt) = match self.workload {
            Workload::Stream => (
                Probe::new(NodeId::Gap8, TraceKind::StageStart, cpx::STREAM_STAGE),
                Probe::new(NodeId::Host, TraceKind::StageEnd, cpx::STREAM_STAGE),
                None,
            ),
            _ => {
                let (stages, sink) = self.stages()?;
                let s = stages.iter().find(|s| s.name == sink).expect("sink stage");
                let rtt = (self.workload == Workload::Remote).then(|| RttProbe {
                    uplink: "wifi_esp32_host".into(),
                    downlink: "wifi_host_esp32".into(),
                });
                (
                    Probe::new(NodeId::Gap8, TraceKind::StageStart, "capture"),
                    Probe::new(s.rx_node, TraceKind::StageEnd, &s.name),
                    rtt,
                )
            }
        };
        let mut nodes = vec![capture.node, sink.node];
        if rtt.is_some() {
            nodes.extend([NodeId::Esp32, NodeId::Host]);
        }
        let mut clock_offsets = BTreeMap::new();
        for n in nodes {
            let est = if n == capture.node {
                0.0
            } else {
                cpx::estimate_clock_offset(&graph, capture.node, n, 8)?
            };
            clock_offsets.insert(n, est);
        }
        Ok(MetricsSpec {
            scenario: self.name.clone(),
            mode: self.mode,
            router: self.router,
            capture,
            sink,
            inference_hz: self.inference_hz(),
            rtt,
            clock_offsets,
        })
    }

    /// Closed-form steady-state period of the closed loop.
    pub fn expected_period_us(&self) -> Result<f64, Unavailable> {
        let source = match self.workload {
            Workload::Stream => {
                let cfg = self.stream_config().map_err(|e| Unavailable(e.to_string()))?;
                return Ok(cpx::expected_frame_period(&cfg));
            }
            _ => self.source(),
        };
        let (stages, _) = self.stages().map_err(|e| Unavailable(e.to_string()))?;
        let period = analytic_oracle(&stages, self.mode, self.pool_size)?;
        match source {
            Source::FreeRunning => Ok(period),
            Source::Periodic { period_us, on_busy: OnBusy::Block } => Ok(period.max(period_us as f64)),
            Source::Periodic { period_us, on_busy: OnBusy::Drop } => {
                if period <= period_us as f64 {
                    Ok(period_us as f64)
                } else {
                    Err(Unavailable("streaming camera drops frames; period depends on drop pattern".into()))
                }
            }
        }
    }
}

/// Resolve `name_or_path`: an existing file, then `$NANOPIPE_SCENARIO_DIR`,
/// then the built-in fixtures.
pub fn load_scenario(name_or_path: &str) -> Result<Scenario> {
    let path = Path::new(name_or_path);
    if path.is_file() {
        return Scenario::from_json(&std::fs::read_to_string(path)?);
    }
    if let Ok(dir) = std::env::var(SCENARIO_DIR_ENV) {
        let p = Path::new(&dir).join(format!("{name_or_path}.json"));
        if p.is_file() {
            return Scenario::from_json(&std::fs::read_to_string(p)?);
        }
    }
    match BUILTIN.iter().find(|(n, _)| *n == name_or_path) {
        Some((_, text)) => Scenario::from_json(text),
        None => Err(Error::config(format!("unknown scenario `{name_or_path}`"))),
    }
}

pub fn builtin_scenarios() -> Vec<&'static str> {
    BUILTIN.iter().map(|(n, _)| *n).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub node: NodeId,
    pub kind: String,
    pub subject: String,
}

impl Probe {
    pub fn new(node: NodeId, kind: TraceKind, subject: &str) -> Self {
        Probe {
            node,
            kind: kind.as_str().to_string(),
            subject: subject.to_string(),
        }
    }

    fn matches(&self, e: &crate::trace::TraceEvent) -> bool {
        e.node == self.node && e.kind.as_str() == self.kind && e.subject == self.subject
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RttProbe {
    pub uplink: String,
    pub downlink: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSpec {
    pub scenario: String,
    pub mode: Mode,
    pub router: RouterMode,
    pub capture: Probe,
    pub sink: Probe,
    pub inference_hz: f64,
    pub rtt: Option<RttProbe>,
    /// Estimated local clock minus the capture node's clock.
    pub clock_offsets: BTreeMap<NodeId, f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyMs {
    pub mean: f64,
    pub p95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub scenario: String,
    pub mode: Mode,
    pub router: RouterMode,
    pub closed_loop_hz: f64,
    pub inference_hz: f64,
    pub drop_pct: f64,
    pub e2e_latency_ms: LatencyMs,
    pub rtt_ms: Option<f64>,
    pub frames_delivered: u64,
    pub frames_dropped: u64,
    pub steady_state_frames: u64,
}

impl Metrics {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Metrics(e.to_string()))
    }
}

fn per_frame(trace: &Trace, probe: &Probe) -> BTreeMap<u64, i64> {
    let mut out = BTreeMap::new();
    for e in trace.events().iter().filter(|e| probe.matches(e)) {
        if let Some(f) = e.frame {
            out.entry(f).or_insert(e.t_us);
        }
    }
    out
}

fn link_stamps(trace: &Trace, link: &str, kind: TraceKind) -> BTreeMap<u64, (NodeId, i64)> {
    let mut out = BTreeMap::new();
    for e in trace.events() {
        if e.kind == kind && e.subject == link {
            if let Some(f) = e.frame {
                out.entry(f).or_insert((e.node, e.t_us));
            }
        }
    }
    out
}

/// Throughput, latency and drop statistics from a trace. Only frames from
/// the steady state (frame index ≥ 10) are counted.
pub fn compute_metrics(trace: &Trace, spec: &MetricsSpec) -> Result<Metrics> {
    let skip = STEADY_STATE_SKIP as u64;
    let off = |n: NodeId| spec.clock_offsets.get(&n).copied().unwrap_or(0.0);
    let sinks = per_frame(trace, &spec.sink);
    let delivered = sinks.len() as u64;
    let steady: Vec<(u64, i64)> = sinks.iter().filter(|(&f, _)| f >= skip).map(|(&f, &t)| (f, t)).collect();
    if steady.len() < STEADY_STATE_SKIP {
        return Err(Error::Metrics(format!(
            "{} steady-state receipts; need at least {STEADY_STATE_SKIP}",
            steady.len()
        )));
    }
    let mut times: Vec<i64> = steady.iter().map(|&(_, t)| t).collect();
    times.sort_unstable();
    let span = (times[times.len() - 1] - times[0]) as f64;
    if span <= 0.0 {
        return Err(Error::Metrics("steady-state receipts span no time".into()));
    }
    let closed_loop_hz = (times.len() - 1) as f64 * 1e6 / span;

    let captures = per_frame(trace, &spec.capture);
    let mut lat: Vec<f64> = steady
        .iter()
        .filter_map(|&(f, t)| {
            let c = *captures.get(&f)?;
            Some(((t as f64 - off(spec.sink.node)) - (c as f64 - off(spec.capture.node))) / 1e3)
        })
        .collect();
    if lat.is_empty() {
        return Err(Error::Metrics("no frame has both a capture and a sink record".into()));
    }
    lat.sort_by(f64::total_cmp);
    let mean = lat.iter().sum::<f64>() / lat.len() as f64;
    let p95 = lat[((lat.len() as f64 * 0.95).ceil() as usize).max(1) - 1];

    let rtt_ms = match &spec.rtt {
        None => None,
        Some(p) => {
            let up_tx = link_stamps(trace, &p.uplink, TraceKind::LinkTxStart);
            let up_rx = link_stamps(trace, &p.uplink, TraceKind::LinkRxEnd);
            let down_tx = link_stamps(trace, &p.downlink, TraceKind::LinkTxStart);
            let down_rx = link_stamps(trace, &p.downlink, TraceKind::LinkRxEnd);
            let global = |(n, t): (NodeId, i64)| t as f64 - off(n);
            let rtts: Vec<f64> = steady
                .iter()
                .filter_map(|&(f, _)| {
                    let up = global(*up_rx.get(&f)?) - global(*up_tx.get(&f)?);
                    let down = global(*down_rx.get(&f)?) - global(*down_tx.get(&f)?);
                    Some((up + down) / 1e3)
                })
                .collect();
            if rtts.is_empty() {
                return Err(Error::Metrics("no complete round trip in the steady state".into()));
            }
            Some(rtts.iter().sum::<f64>() / rtts.len() as f64)
        }
    };

    let frames_dropped = trace.events().iter().filter(|e| e.kind == TraceKind::Drop).count() as u64;
    Ok(Metrics {
        scenario: spec.scenario.clone(),
        mode: spec.mode,
        router: spec.router,
        closed_loop_hz,
        inference_hz: spec.inference_hz,
        drop_pct: (1.0 - closed_loop_hz / spec.inference_hz) * 100.0,
        e2e_latency_ms: LatencyMs { mean, p95 },
        rtt_ms,
        frames_delivered: delivered,
        frames_dropped,
        steady_state_frames: steady.len() as u64,
    })
}

/// Run a scenario of any workload.
pub fn run_scenario(s: &Scenario) -> Result<(Trace, Metrics)> {
    s.validate()?;
    let trace = match s.workload {
        Workload::Stream => cpx::run_stream(&s.stream_config()?, &s.graph())?.trace,
        _ => pipeline::pipeline_run(&s.pipeline_config()?)?.trace,
    };
    let metrics = compute_metrics(&trace, &s.metrics_spec()?)?;
    Ok((trace, metrics))
}

/// Run a remote workload: image to the host, result back to the drone.
pub fn run_remote_scenario(s: &Scenario) -> Result<(Trace, Metrics)> {
    if s.workload != Workload::Remote {
        return Err(Error::usage(format!("scenario `{}` is not a remote workload", s.name)));
    }
    run_scenario(s)
}

/// Re-run `s` at each of its sweep trigger rates.
pub fn run_sweep(s: &Scenario) -> Result<Vec<(f64, Metrics)>> {
    s.sweep_hz
        .iter()
        .map(|&hz| {
            let mut at = s.clone();
            at.trigger_rate_hz = Some(hz);
            at.sweep_hz.clear();
            let (_, m) = run_scenario(&at)?;
            Ok((hz, m))
        })
        .collect()
}
