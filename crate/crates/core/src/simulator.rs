//! Deterministic home-network scenarios.
//!
//! A scenario is a set of device scripts over a virtual clock. Every script
//! draws from its own ChaCha8 stream, seeded by hashing the scenario seed with
//! the device MAC and the script's ordinal for that MAC, so reordering devices
//! does not change any device's traffic. Packets from all scripts are merged
//! in `(ts, script index)` order and pushed through a [`Pipeline`]: control
//! events, then window close and anomaly scoring, then the datapath and flow
//! monitor.
//!
//! Target ports are always the server port. For from-device traffic that is
//! the destination port; for to-device traffic the device is the server.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::fs;
use std::io::{self, BufRead, Write};
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};

use ipnet::Ipv4Net;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::compiler::{compile, CompileError, NetworkContext, RuleAction, RuleSet};
use crate::control::{ActivationChange, ApplyOutcome, ControlEvent, ControlPlane};
use crate::datapath::{Datapath, DatapathConfig, Mode, PacketEvent, Reason, Verdict, VerdictKind, VerdictRecord};
use crate::flow::{FeatureVector, FlowMonitor, MonitorConfig, BYTES_OUT_RATE};
use crate::mud::{parse_mud_value, MudError, MudProfile};
use crate::net::{Direction, MacAddr, Protocol};
use crate::profiler::{class_id, score, AnomalyReport, DeviceProfile, ProfileError, ProfilerConfig, ProposedAction};

/// MAC used for the far side of routed traffic.
pub const ROUTER_MAC: MacAddr = MacAddr::new([2, 0, 0, 0, 0, 1]);

const TCP_SYN: u8 = 0x02;
const TCP_PSH_ACK: u8 = 0x18;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Mud {
        path: PathBuf,
        #[source]
        source: MudError,
    },
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("trace line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("trace: {0}")]
    TraceIo(#[from] io::Error),
}

/// A remote service: hostname (resolved through the context) or IPv4 literal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub to: String,
    pub port: u16,
    pub protocol: Protocol,
}

fn default_jitter() -> f64 {
    0.05
}

fn default_scan_ports() -> Vec<u16> {
    vec![23, 2323]
}

fn default_direction() -> Direction {
    Direction::FromDevice
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case", deny_unknown_fields)]
pub enum Behaviour {
    Heartbeat {
        period_s: f64,
        target: Target,
        size: u32,
        #[serde(default = "default_jitter")]
        jitter: f64,
    },
    Stream {
        rate_bps: f64,
        target: Target,
        pkt_size: u32,
        #[serde(default = "default_direction")]
        direction: Direction,
        #[serde(default = "default_jitter")]
        jitter: f64,
    },
    Scanner {
        targets_per_s: f64,
        subnet: Ipv4Net,
        #[serde(default = "default_scan_ports")]
        ports: Vec<u16>,
    },
    Flooder {
        target: Target,
        pps: f64,
        size: u32,
    },
    /// Commands sent to the device from `target`.
    Actuator {
        actuation_class: String,
        events_per_min: f64,
        target: Target,
        #[serde(default = "default_actuation_size")]
        size: u32,
    },
}

fn default_actuation_size() -> u32 {
    200
}

impl Behaviour {
    fn interval_s(&self) -> f64 {
        match self {
            Behaviour::Heartbeat { period_s, .. } => *period_s,
            Behaviour::Stream { rate_bps, pkt_size, .. } => *pkt_size as f64 / rate_bps,
            Behaviour::Scanner { targets_per_s, .. } => 1.0 / targets_per_s,
            Behaviour::Flooder { pps, .. } => 1.0 / pps,
            Behaviour::Actuator { events_per_min, .. } => 60.0 / events_per_min,
        }
    }

    fn jitter(&self) -> f64 {
        match self {
            Behaviour::Heartbeat { jitter, .. } | Behaviour::Stream { jitter, .. } => jitter.clamp(0.0, 0.9),
            Behaviour::Scanner { .. } | Behaviour::Actuator { .. } => 0.2,
            Behaviour::Flooder { .. } => 0.0,
        }
    }

    fn target(&self) -> Option<&Target> {
        match self {
            Behaviour::Heartbeat { target, .. }
            | Behaviour::Stream { target, .. }
            | Behaviour::Flooder { target, .. }
            | Behaviour::Actuator { target, .. } => Some(target),
            Behaviour::Scanner { .. } => None,
        }
    }

    fn validate(&self) -> Result<(), String> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(format!("{name} must be positive"))
            }
        };
        match self {
            Behaviour::Heartbeat { period_s, size, .. } => {
                positive("period_s", *period_s)?;
                positive("size", *size as f64)
            }
            Behaviour::Stream { rate_bps, pkt_size, .. } => {
                positive("rate_bps", *rate_bps)?;
                positive("pkt_size", *pkt_size as f64)
            }
            Behaviour::Scanner {
                targets_per_s, ports, ..
            } => {
                positive("targets_per_s", *targets_per_s)?;
                if ports.is_empty() {
                    return Err("scanner needs ports".into());
                }
                Ok(())
            }
            Behaviour::Flooder { pps, size, .. } => {
                positive("pps", *pps)?;
                positive("size", *size as f64)
            }
            Behaviour::Actuator {
                events_per_min, size, ..
            } => {
                positive("events_per_min", *events_per_min)?;
                positive("size", *size as f64)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceScript {
    pub mac: MacAddr,
    /// Defaults to the context address of `mac`.
    #[serde(default)]
    pub ip: Option<Ipv4Addr>,
    pub behaviour: Behaviour,
    #[serde(default)]
    pub start_s: f64,
    /// Switches this script to `attack` at this time.
    #[serde(default)]
    pub compromise_at_s: Option<f64>,
    #[serde(default)]
    pub attack: Option<Behaviour>,
}

/// Bounds checked by `dada simulate --assert`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Expectations {
    pub max_benign_default_deny: Option<u64>,
    pub max_time_to_detect_s: Option<f64>,
    pub max_time_to_mitigate_s: Option<f64>,
    pub max_leak_bytes: Option<u64>,
    pub max_guest_violations: Option<u64>,
    pub max_false_positives: Option<u64>,
    pub trace_hash: Option<String>,
}

impl Expectations {
    /// Failed expectations, one message each.
    pub fn check(&self, m: &ScenarioMetrics) -> Vec<String> {
        let mut failures = Vec::new();
        let mut le = |name: &str, got: Option<f64>, max: Option<f64>| {
            if let Some(max) = max {
                match got {
                    Some(v) if v <= max => {}
                    Some(v) => failures.push(format!("{name} = {v} exceeds {max}")),
                    None => failures.push(format!("{name} never happened (bound {max})")),
                }
            }
        };
        le(
            "benign_default_deny",
            Some(m.benign_default_deny as f64),
            self.max_benign_default_deny.map(|v| v as f64),
        );
        le("time_to_detect_s", m.time_to_detect_s, self.max_time_to_detect_s);
        le("time_to_mitigate_s", m.time_to_mitigate_s, self.max_time_to_mitigate_s);
        le(
            "post_mitigation_leak_bytes",
            m.post_mitigation_leak_bytes.map(|v| v as f64),
            self.max_leak_bytes.map(|v| v as f64),
        );
        le(
            "guest_violations",
            Some(m.guest_violations as f64),
            self.max_guest_violations.map(|v| v as f64),
        );
        le(
            "false_positive_reports",
            Some(m.false_positive_reports as f64),
            self.max_false_positives.map(|v| v as f64),
        );
        if let Some(h) = &self.trace_hash {
            if *h != m.trace_hash {
                failures.push(format!("trace_hash {} != expected {h}", m.trace_hash));
            }
        }
        failures
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum Source<T> {
    Path(String),
    Inline(T),
}

fn default_training_windows() -> usize {
    10
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioDoc {
    name: String,
    seed: u64,
    horizon_s: u64,
    context: Source<NetworkContext>,
    scripts: Vec<DeviceScript>,
    #[serde(default)]
    profiles: BTreeMap<MacAddr, Source<serde_json::Value>>,
    #[serde(default)]
    control_events: Vec<ControlEvent>,
    #[serde(default)]
    modes: BTreeMap<MacAddr, Mode>,
    #[serde(default)]
    datapath: DatapathConfig,
    #[serde(default)]
    monitor: MonitorConfig,
    #[serde(default)]
    profiler: ProfilerConfig,
    #[serde(default = "default_training_windows")]
    training_windows: usize,
    #[serde(default = "default_true")]
    auto_mitigate: bool,
    #[serde(default)]
    expect: Expectations,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub horizon_s: u64,
    pub context: NetworkContext,
    pub scripts: Vec<DeviceScript>,
    /// MUD bindings: devices without one are unmanaged.
    pub profiles: BTreeMap<MacAddr, MudProfile>,
    pub control_events: Vec<ControlEvent>,
    pub modes: BTreeMap<MacAddr, Mode>,
    pub datapath: DatapathConfig,
    pub monitor: MonitorConfig,
    pub profiler: ProfilerConfig,
    /// Benign windows simulated beforehand to learn behaviour profiles.
    pub training_windows: usize,
    pub auto_mitigate: bool,
    pub expect: Expectations,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, SimError> {
    let text = fs::read_to_string(path).map_err(|e| SimError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| SimError::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

impl Scenario {
    /// Loads a JSON scenario. Relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = fs::read_to_string(path).map_err(|e| SimError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_json(&text, path.parent()).map_err(|e| match e {
            SimError::Json { path: p, source } if p.as_os_str().is_empty() => SimError::Json {
                path: path.to_path_buf(),
                source,
            },
            other => other,
        })
    }

    pub fn from_json(text: &str, base: Option<&Path>) -> Result<Self, SimError> {
        let doc: ScenarioDoc = serde_json::from_str(text).map_err(|e| SimError::Json {
            path: PathBuf::new(),
            source: e,
        })?;
        let resolve = |p: &str| base.map_or_else(|| PathBuf::from(p), |b| b.join(p));
        let context = match doc.context {
            Source::Inline(c) => c,
            Source::Path(p) => read_json(&resolve(&p))?,
        };
        context.validate()?;
        let mut profiles = BTreeMap::new();
        for (mac, src) in doc.profiles {
            let (path, value) = match src {
                Source::Inline(v) => (PathBuf::from(format!("<inline {mac}>")), v),
                Source::Path(p) => {
                    let path = resolve(&p);
                    let v = read_json(&path)?;
                    (path, v)
                }
            };
            let profile = parse_mud_value(value).map_err(|e| SimError::Mud { path, source: e })?;
            profiles.insert(mac, profile);
        }
        let s = Scenario {
            name: doc.name,
            seed: doc.seed,
            horizon_s: doc.horizon_s,
            context,
            scripts: doc.scripts,
            profiles,
            control_events: doc.control_events,
            modes: doc.modes,
            datapath: doc.datapath,
            monitor: doc.monitor,
            profiler: doc.profiler,
            training_windows: doc.training_windows,
            auto_mitigate: doc.auto_mitigate,
            expect: doc.expect,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        if self.horizon_s == 0 {
            return bad("horizon_s must be positive".into());
        }
        if self.monitor.window_len_s == 0 {
            return bad("window_len_s must be positive".into());
        }
        for (i, s) in self.scripts.iter().enumerate() {
            if self.context.device(s.mac).is_none() {
                return bad(format!("script {i}: device {} not in context", s.mac));
            }
            s.behaviour.validate().or_else(|m| bad(format!("script {i}: {m}")))?;
            if s.start_s < 0.0 || !s.start_s.is_finite() {
                return bad(format!("script {i}: start_s must be non-negative"));
            }
            match (&s.compromise_at_s, &s.attack) {
                (Some(at), Some(attack)) => {
                    if !(0.0..self.horizon_s as f64).contains(at) {
                        return bad(format!("script {i}: compromise_at_s outside horizon"));
                    }
                    attack.validate().or_else(|m| bad(format!("script {i} attack: {m}")))?;
                }
                (None, None) => {}
                _ => return bad(format!("script {i}: compromise_at_s and attack go together")),
            }
            for b in std::iter::once(&s.behaviour).chain(s.attack.as_ref()) {
                if let Some(t) = b.target() {
                    resolve_target(&self.context, t).map_err(SimError::InvalidScenario)?;
                }
            }
        }
        for mac in self.profiles.keys().chain(self.modes.keys()) {
            if self.context.device(*mac).is_none() {
                return bad(format!("device {mac} not in context"));
            }
        }
        Ok(())
    }

    /// Earliest compromise per device, in microseconds.
    pub fn compromises(&self) -> BTreeMap<MacAddr, u64> {
        let mut out: BTreeMap<MacAddr, u64> = BTreeMap::new();
        for s in &self.scripts {
            if let Some(at) = s.compromise_at_s {
                let us = secs_to_us(at);
                out.entry(s.mac).and_modify(|v| *v = (*v).min(us)).or_insert(us);
            }
        }
        out
    }

    /// Same devices, benign scripts only, no control events.
    fn training_variant(&self) -> Scenario {
        let mut t = self.clone();
        t.seed = self.seed ^ 0x7472_6169_6e69_6e67;
        t.horizon_s = (self.training_windows as u64 + self.profiler.warmup_windows) * self.monitor.window_len_s;
        t.control_events.clear();
        t.auto_mitigate = false;
        for s in &mut t.scripts {
            s.compromise_at_s = None;
            s.attack = None;
        }
        t
    }
}

fn secs_to_us(s: f64) -> u64 {
    (s * 1e6).round() as u64
}

fn resolve_target(ctx: &NetworkContext, t: &Target) -> Result<Ipv4Addr, String> {
    if let Ok(ip) = t.to.parse::<Ipv4Addr>() {
        return Ok(ip);
    }
    ctx.dns_bindings
        .get(&t.to)
        .and_then(|ips| ips.iter().next().copied())
        .ok_or_else(|| format!("target {:?} has no DNS binding", t.to))
}

/// Per-device stream seed derived from the scenario seed.
pub fn derive_seed(seed: u64, mac: MacAddr, ordinal: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(b"dada-sim");
    h.update(seed.to_le_bytes());
    h.update(mac.octets());
    h.update(ordinal.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

struct ScriptGen {
    mac: MacAddr,
    ip: Ipv4Addr,
    rng: ChaCha8Rng,
    behaviour: Behaviour,
    remote: Option<Ipv4Addr>,
    attack: Option<(u64, Behaviour, Option<Ipv4Addr>)>,
    is_attack: bool,
    next_ts: u64,
    horizon_us: u64,
    ephemeral: u16,
}

impl ScriptGen {
    fn new(s: &DeviceScript, ctx: &NetworkContext, seed: u64, ordinal: u32, horizon_us: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, s.mac, ordinal));
        let ip =
            s.ip.unwrap_or_else(|| ctx.device(s.mac).map(|d| d.ipv4).unwrap_or(Ipv4Addr::UNSPECIFIED));
        let remote = |b: &Behaviour| b.target().and_then(|t| resolve_target(ctx, t).ok());
        let phase = rng.gen::<f64>() * s.behaviour.interval_s();
        let ephemeral = rng.gen_range(32768..61000);
        Self {
            mac: s.mac,
            ip,
            remote: remote(&s.behaviour),
            behaviour: s.behaviour.clone(),
            attack: s
                .compromise_at_s
                .zip(s.attack.clone())
                .map(|(at, b)| (secs_to_us(at), b.clone(), remote(&b))),
            is_attack: false,
            next_ts: secs_to_us(s.start_s + phase),
            horizon_us,
            ephemeral,
            rng,
        }
    }

    fn next(&mut self) -> Option<(PacketEvent, bool)> {
        if let Some((at, _, _)) = &self.attack {
            if self.next_ts >= *at {
                let (at, b, remote) = self.attack.take().expect("checked");
                self.behaviour = b;
                self.remote = remote;
                self.is_attack = true;
                self.next_ts = at;
            }
        }
        if self.next_ts >= self.horizon_us {
            return None;
        }
        let ts = self.next_ts;
        let e = self.packet(ts);
        let jitter = self.behaviour.jitter();
        let factor = if jitter > 0.0 {
            1.0 + self.rng.gen_range(-jitter..jitter)
        } else {
            1.0
        };
        let step = secs_to_us(self.behaviour.interval_s() * factor).max(1);
        self.next_ts = ts + step;
        Some((e, self.is_attack))
    }

    fn packet(&mut self, ts: u64) -> PacketEvent {
        let outbound =
            |me: &Self, remote: Ipv4Addr, protocol: Protocol, dst_port: u16, length: u32, flags: u8| PacketEvent {
                ts,
                src_mac: me.mac,
                dst_mac: ROUTER_MAC,
                src_ip: me.ip,
                dst_ip: remote,
                protocol,
                src_port: me.ephemeral,
                dst_port,
                length,
                direction: Direction::FromDevice,
                actuation_class: None,
                tcp_flags: if protocol == Protocol::Tcp { flags } else { 0 },
            };
        let inbound = |me: &Self, remote: Ipv4Addr, protocol: Protocol, dst_port: u16, length: u32| PacketEvent {
            ts,
            src_mac: ROUTER_MAC,
            dst_mac: me.mac,
            src_ip: remote,
            dst_ip: me.ip,
            protocol,
            src_port: me.ephemeral,
            dst_port,
            length,
            direction: Direction::ToDevice,
            actuation_class: None,
            tcp_flags: if protocol == Protocol::Tcp { TCP_PSH_ACK } else { 0 },
        };
        let remote = self.remote.unwrap_or(Ipv4Addr::UNSPECIFIED);
        match &self.behaviour {
            Behaviour::Heartbeat { target, size, .. } => {
                outbound(self, remote, target.protocol, target.port, *size, TCP_PSH_ACK)
            }
            Behaviour::Stream {
                target,
                pkt_size,
                direction,
                ..
            } => match direction {
                Direction::FromDevice => outbound(self, remote, target.protocol, target.port, *pkt_size, TCP_PSH_ACK),
                Direction::ToDevice => inbound(self, remote, target.protocol, target.port, *pkt_size),
            },
            Behaviour::Flooder { target, size, .. } => {
                outbound(self, remote, target.protocol, target.port, *size, TCP_SYN)
            }
            Behaviour::Scanner { subnet, ports, .. } => {
                let hosts = (subnet.hosts().count() as u64).max(1);
                let base = u32::from(subnet.network()) as u64 + u64::from(subnet.prefix_len() < 31);
                let ip = Ipv4Addr::from((base + self.rng.gen_range(0..hosts)) as u32);
                let port = ports[self.rng.gen_range(0..ports.len())];
                outbound(self, ip, Protocol::Tcp, port, 60, TCP_SYN)
            }
            Behaviour::Actuator {
                actuation_class,
                target,
                size,
                ..
            } => {
                let class = actuation_class.clone();
                let mut e = inbound(self, remote, target.protocol, target.port, *size);
                e.actuation_class = Some(class);
                e
            }
        }
    }
}

/// Merged packet stream of all scripts, in `(ts, script index)` order.
pub struct TrafficGenerator {
    gens: Vec<ScriptGen>,
    pending: Vec<Option<(PacketEvent, bool)>>,
    heap: BinaryHeap<Reverse<(u64, usize)>>,
}

impl TrafficGenerator {
    pub fn new(scenario: &Scenario) -> Self {
        let horizon_us = scenario.horizon_s * 1_000_000;
        let mut ordinals: BTreeMap<MacAddr, u32> = BTreeMap::new();
        let gens: Vec<ScriptGen> = scenario
            .scripts
            .iter()
            .map(|s| {
                let n = ordinals.entry(s.mac).or_default();
                let g = ScriptGen::new(s, &scenario.context, scenario.seed, *n, horizon_us);
                *n += 1;
                g
            })
            .collect();
        let mut this = Self {
            pending: Vec::with_capacity(gens.len()),
            heap: BinaryHeap::new(),
            gens,
        };
        for i in 0..this.gens.len() {
            let next = this.gens[i].next();
            if let Some((e, _)) = &next {
                this.heap.push(Reverse((e.ts, i)));
            }
            this.pending.push(next);
        }
        this
    }
}

impl Iterator for TrafficGenerator {
    /// The event and whether it came from an attack behaviour.
    type Item = (PacketEvent, bool);

    fn next(&mut self) -> Option<Self::Item> {
        let Reverse((_, i)) = self.heap.pop()?;
        let out = self.pending[i].take();
        let next = self.gens[i].next();
        if let Some((e, _)) = &next {
            self.heap.push(Reverse((e.ts, i)));
        }
        self.pending[i] = next;
        out
    }
}

/// Datapath, flow monitor, control plane and anomaly scoring on one clock.
pub struct Pipeline {
    ctx: NetworkContext,
    datapath: Datapath,
    monitor: FlowMonitor,
    control: ControlPlane,
    profiler: ProfilerConfig,
    library: BTreeMap<String, DeviceProfile>,
    classes: BTreeMap<MacAddr, String>,
    base_modes: BTreeMap<MacAddr, Mode>,
    rulesets: BTreeMap<MacAddr, RuleSet>,
    queued: VecDeque<ControlEvent>,
    auto_mitigate: bool,
    next_window_end: u64,
    first_window: BTreeMap<MacAddr, u64>,
    features: Vec<FeatureVector>,
    reports: Vec<AnomalyReport>,
    changes: Vec<ActivationChange>,
}

fn control_ts(e: &ControlEvent) -> u64 {
    match e {
        ControlEvent::Associate { ts, .. } | ControlEvent::Configure { ts, .. } => *ts,
        ControlEvent::Reader(r) => r.ts,
    }
}

/// Class identifier of a context device, if it declares manufacturer and model.
pub fn device_class(ctx: &NetworkContext, mac: MacAddr) -> Option<String> {
    let d = ctx.device(mac)?;
    (!d.manufacturer.is_empty() && !d.model.is_empty()).then(|| class_id(&d.manufacturer, &d.model))
}

impl Pipeline {
    pub fn new(s: &Scenario, library: Vec<DeviceProfile>) -> Result<Self, SimError> {
        let mut datapath = Datapath::new(s.datapath.clone());
        let mut rulesets = BTreeMap::new();
        for dev in &s.context.devices {
            datapath.register_device(dev.mac);
            if let Some(p) = s.profiles.get(&dev.mac) {
                let (rs, _) = compile(p, &s.context, dev)?;
                rulesets.insert(dev.mac, rs.clone());
                datapath.install_ruleset(rs);
            }
        }
        let mut base_modes = BTreeMap::new();
        for (mac, mode) in &s.modes {
            datapath
                .set_mode(*mac, *mode)
                .map_err(|e| SimError::InvalidScenario(e.to_string()))?;
            base_modes.insert(*mac, *mode);
        }
        let mut queued: Vec<ControlEvent> = s.control_events.clone();
        queued.sort_by_key(control_ts);
        let monitor = FlowMonitor::new(s.monitor).with_hostnames(s.context.hostnames());
        let classes = s
            .context
            .devices
            .iter()
            .filter_map(|d| device_class(&s.context, d.mac).map(|c| (d.mac, c)))
            .collect();
        Ok(Self {
            ctx: s.context.clone(),
            datapath,
            monitor,
            control: ControlPlane::new(),
            profiler: s.profiler,
            library: library.into_iter().map(|p| (p.class_id.clone(), p)).collect(),
            classes,
            base_modes,
            rulesets,
            queued: queued.into(),
            auto_mitigate: s.auto_mitigate,
            next_window_end: s.monitor.window_len_s * 1_000_000,
            first_window: BTreeMap::new(),
            features: Vec::new(),
            reports: Vec::new(),
            changes: Vec::new(),
        })
    }

    pub fn datapath(&self) -> &Datapath {
        &self.datapath
    }

    pub fn control(&self) -> &ControlPlane {
        &self.control
    }

    pub fn rulesets(&self) -> &BTreeMap<MacAddr, RuleSet> {
        &self.rulesets
    }

    /// Applies control events and window closes up to `now`, in time order.
    /// A window ending at `t` closes before control events stamped `t`.
    fn advance_to(&mut self, now: u64) -> Result<(), SimError> {
        loop {
            let ctrl = self.queued.front().map(control_ts).filter(|t| *t <= now);
            let window_due = self.next_window_end <= now;
            match ctrl {
                Some(t) if !window_due || t < self.next_window_end => {
                    let e = self.queued.pop_front().expect("checked");
                    let out = self
                        .control
                        .apply(e)
                        .map_err(|err| SimError::InvalidScenario(format!("control event: {err}")))?;
                    let base = |mac| self.base_modes.get(&mac).copied().unwrap_or_default();
                    self.control
                        .apply_changes(&mut self.datapath, &self.ctx, &out.changes, base);
                    self.changes.extend(out.changes);
                }
                _ if window_due => self.close_windows(self.next_window_end),
                _ => return Ok(()),
            }
        }
    }

    fn close_windows(&mut self, at: u64) {
        let window_len_s = self.monitor.config().window_len_s;
        let window_us = window_len_s * 1_000_000;
        self.next_window_end = (at / window_us + 1) * window_us;
        for fv in self.monitor.drain_closed(at) {
            let mac = fv.device_mac;
            let first = *self.first_window.entry(mac).or_insert(fv.window_start_s);
            let warm = fv.window_start_s >= first + self.profiler.warmup_windows * window_len_s;
            // Isolated devices are silent by design; scoring them would only echo that.
            let silenced = self
                .datapath
                .device(mac)
                .is_some_and(|d| d.quarantined || d.mode == Mode::Isolated);
            if silenced {
                // Restart warm-up: flow gaps spanning the silence are not behaviour.
                self.first_window.insert(mac, fv.window_start_s + window_len_s);
            }
            let profile = self.classes.get(&mac).and_then(|c| self.library.get(c)).cloned();
            if let (true, false, Some(p)) = (warm, silenced, profile) {
                if let Ok(r) = score(&fv, &p, &self.profiler) {
                    if r.proposed_action != ProposedAction::None {
                        if self.auto_mitigate {
                            self.mitigate(&r, &p);
                        }
                        self.reports.push(r);
                    }
                }
            }
            if warm {
                self.features.push(fv);
            }
        }
        self.monitor.evict_expired(at);
    }

    fn mitigate(&mut self, r: &AnomalyReport, p: &DeviceProfile) {
        match r.proposed_action {
            ProposedAction::Isolate => {
                let _ = self.datapath.set_quarantine(r.mac, true);
            }
            ProposedAction::RateLimit => {
                let allowed = p.dims[BYTES_OUT_RATE] + 3.0 * p.dims_sigma[BYTES_OUT_RATE];
                let rate = (2.0 * allowed).max(1000.0) as u64;
                let spec = crate::mud::RateSpec {
                    max_bytes_per_second: rate,
                    max_packets_per_second: 0,
                    burst_bytes: rate,
                };
                let _ = self.datapath.set_device_rate(r.mac, Some(spec));
            }
            ProposedAction::None => {}
        }
    }

    pub fn step(&mut self, e: &PacketEvent) -> Result<Verdict, SimError> {
        self.advance_to(e.ts)?;
        let v = self.datapath.process_packet(e);
        self.monitor.ingest(e, &v);
        Ok(v)
    }

    /// Applies `e` at its timestamp, after anything due before it, and pushes
    /// the resulting changes into the datapath.
    pub fn submit(&mut self, e: ControlEvent) -> Result<ApplyOutcome, SimError> {
        self.advance_to(control_ts(&e))?;
        let out = self
            .control
            .apply(e)
            .map_err(|err| SimError::InvalidScenario(format!("control event: {err}")))?;
        let base = |mac| self.base_modes.get(&mac).copied().unwrap_or_default();
        self.control
            .apply_changes(&mut self.datapath, &self.ctx, &out.changes, base);
        self.changes.extend(out.changes.iter().cloned());
        Ok(out)
    }

    /// Replaces a device's rule set; returns the installed generation.
    pub fn install_ruleset(&mut self, rs: RuleSet) -> u64 {
        let mac = rs.device_mac;
        let generation = self.datapath.install_ruleset(rs.clone());
        self.rulesets.insert(mac, RuleSet { generation, ..rs });
        generation
    }

    /// Moves the clock to `now` without traffic, closing due windows.
    pub fn advance(&mut self, now: u64) -> Result<(), SimError> {
        self.advance_to(now)
    }

    pub fn library(&self) -> impl Iterator<Item = &DeviceProfile> {
        self.library.values()
    }

    /// Adds or replaces the profile for its class.
    pub fn set_profile(&mut self, p: DeviceProfile) {
        self.library.insert(p.class_id.clone(), p);
    }

    /// Re-applies the mitigation for a past report, e.g. after a restart.
    pub fn remitigate(&mut self, r: &AnomalyReport) {
        let profile = self.library.get(&r.class_id).cloned();
        if let (true, Some(p)) = (self.auto_mitigate, profile) {
            self.mitigate(r, &p);
        }
    }

    pub fn monitor(&self) -> &FlowMonitor {
        &self.monitor
    }

    /// Runs remaining control events and closes windows up to `horizon_us`.
    pub fn finish(&mut self, horizon_us: u64) -> Result<(), SimError> {
        self.advance_to(horizon_us)
    }

    /// Closed windows past warm-up.
    pub fn take_features(&mut self) -> Vec<FeatureVector> {
        std::mem::take(&mut self.features)
    }

    pub fn take_reports(&mut self) -> Vec<AnomalyReport> {
        std::mem::take(&mut self.reports)
    }

    pub fn take_changes(&mut self) -> Vec<ActivationChange> {
        std::mem::take(&mut self.changes)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub packets_total: u64,
    pub accepted: u64,
    pub accepted_bytes: u64,
    pub dropped_by_reason: BTreeMap<Reason, u64>,
    pub time_to_detect_s: Option<f64>,
    pub time_to_mitigate_s: Option<f64>,
    pub post_mitigation_leak_bytes: Option<u64>,
    /// DefaultDeny drops of non-attack packets from MUD-managed devices.
    pub benign_default_deny: u64,
    /// Accepted packets of guest-mode devices whose peer is not the gateway.
    pub guest_violations: u64,
    pub anomaly_reports: u64,
    /// Reports about devices that were not (yet) compromised.
    pub false_positive_reports: u64,
    pub trace_hash: String,
}

impl ScenarioMetrics {
    pub fn dropped(&self) -> u64 {
        self.dropped_by_reason.values().sum()
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub events: Vec<PacketEvent>,
    /// Parallel to `events`: produced by an attack behaviour.
    pub attack: Vec<bool>,
    pub verdicts: Vec<VerdictRecord>,
    pub profiles: Vec<DeviceProfile>,
    pub features: Vec<FeatureVector>,
    pub reports: Vec<AnomalyReport>,
    pub changes: Vec<ActivationChange>,
    pub rulesets: BTreeMap<MacAddr, RuleSet>,
    pub metrics: ScenarioMetrics,
}

/// Learns one profile per device class from a benign pre-run.
pub fn train_profiles(s: &Scenario) -> Result<Vec<DeviceProfile>, SimError> {
    if s.training_windows == 0 {
        return Ok(Vec::new());
    }
    let t = s.training_variant();
    let mut pipeline = Pipeline::new(&t, Vec::new())?;
    for (e, _) in TrafficGenerator::new(&t) {
        pipeline.step(&e)?;
    }
    pipeline.finish(t.horizon_s * 1_000_000)?;
    let mut by_class: BTreeMap<String, Vec<FeatureVector>> = BTreeMap::new();
    for fv in pipeline.take_features() {
        if let Some(c) = device_class(&s.context, fv.device_mac) {
            by_class.entry(c).or_default().push(fv);
        }
    }
    Ok(by_class
        .into_iter()
        .filter_map(|(c, h)| crate::profiler::learn_profile(&h, &c, &s.profiler).ok())
        .collect())
}

fn run_events(
    s: &Scenario,
    events: impl Iterator<Item = (PacketEvent, bool)>,
    profiles: Vec<DeviceProfile>,
) -> Result<RunOutput, SimError> {
    let mut pipeline = Pipeline::new(s, profiles.clone())?;
    let mut out_events = Vec::new();
    let mut attack = Vec::new();
    let mut verdicts = Vec::new();
    for (e, is_attack) in events {
        let v = pipeline.step(&e)?;
        verdicts.push(VerdictRecord::new(&e, &v));
        out_events.push(e);
        attack.push(is_attack);
    }
    let horizon_us = (s.horizon_s * 1_000_000).max(out_events.last().map_or(0, |e| e.ts + 1));
    pipeline.finish(horizon_us)?;
    let reports = pipeline.take_reports();
    let rulesets = pipeline.rulesets().clone();
    let metrics = compute_metrics(s, &out_events, &attack, &verdicts, &reports, &rulesets);
    Ok(RunOutput {
        events: out_events,
        attack,
        verdicts,
        profiles,
        features: pipeline.take_features(),
        reports,
        changes: pipeline.take_changes(),
        rulesets,
        metrics,
    })
}

pub fn run_scenario(s: &Scenario) -> Result<RunOutput, SimError> {
    s.validate()?;
    let profiles = train_profiles(s)?;
    run_events(s, TrafficGenerator::new(s), profiles)
}

/// Feeds recorded events through a fresh pipeline built from `s`.
pub fn replay(s: &Scenario, events: &[PacketEvent]) -> Result<RunOutput, SimError> {
    let profiles = train_profiles(s)?;
    let compromises = s.compromises();
    let labelled = events.iter().map(|e| {
        let attack = compromises.get(&e.device_mac()).is_some_and(|at| e.ts >= *at);
        (e.clone(), attack)
    });
    run_events(s, labelled, profiles)
}

/// Hash of the event and verdict traces with latency fields zeroed.
pub fn trace_hash(events: &[PacketEvent], verdicts: &[VerdictRecord]) -> String {
    let mut h = Sha256::new();
    for (e, v) in events.iter().zip(verdicts) {
        h.update(serde_json::to_vec(e).expect("event serializes"));
        h.update(b"\n");
        let v = VerdictRecord {
            latency_ns: 0,
            ..v.clone()
        };
        h.update(serde_json::to_vec(&v).expect("verdict serializes"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

fn rate_of_drop(v: &VerdictRecord, rulesets: &BTreeMap<MacAddr, RuleSet>, dp: &DatapathConfig) -> u64 {
    if v.reason != Reason::RateLimited {
        return 0;
    }
    let rule_rate = v.provenance.as_ref().and_then(|p| {
        rulesets.get(&v.mac)?.rules.iter().find_map(|r| match &r.action {
            RuleAction::AcceptRateLimited { rate } if r.provenance.to_string() == *p => Some(rate.max_bytes_per_second),
            _ => None,
        })
    });
    rule_rate
        .or_else(|| dp.device_rates.get(&v.mac).map(|r| r.max_bytes_per_second))
        .unwrap_or(0)
}

pub fn compute_metrics(
    s: &Scenario,
    events: &[PacketEvent],
    attack: &[bool],
    verdicts: &[VerdictRecord],
    reports: &[AnomalyReport],
    rulesets: &BTreeMap<MacAddr, RuleSet>,
) -> ScenarioMetrics {
    let mut m = ScenarioMetrics {
        packets_total: events.len() as u64,
        trace_hash: trace_hash(events, verdicts),
        anomaly_reports: reports.len() as u64,
        ..Default::default()
    };
    let guests: BTreeSet<MacAddr> = s
        .modes
        .iter()
        .filter(|(_, m)| **m == Mode::Guest)
        .map(|(k, _)| *k)
        .collect();
    for ((e, v), is_attack) in events.iter().zip(verdicts).zip(attack) {
        if v.kind == VerdictKind::Accept {
            m.accepted += 1;
            m.accepted_bytes += e.length as u64;
            let peer = match e.direction {
                Direction::FromDevice => e.dst_ip,
                Direction::ToDevice => e.src_ip,
            };
            if guests.contains(&e.device_mac()) && peer != s.context.gateway_ip {
                m.guest_violations += 1;
            }
        } else {
            *m.dropped_by_reason.entry(v.reason).or_default() += 1;
            if v.reason == Reason::DefaultDeny && !is_attack && s.profiles.contains_key(&v.mac) {
                m.benign_default_deny += 1;
            }
        }
    }

    let compromises = s.compromises();
    let window_s = s.monitor.window_len_s;
    for r in reports {
        let window_end_us = (r.window_start_s + window_s) * 1_000_000;
        match compromises.get(&r.mac) {
            Some(at) if window_end_us > *at => {
                let ttd = (window_end_us - at) as f64 / 1e6;
                m.time_to_detect_s = Some(m.time_to_detect_s.map_or(ttd, |t: f64| t.min(ttd)));
            }
            _ => m.false_positive_reports += 1,
        }
    }

    let Some(onset) = compromises.values().min().copied() else {
        return m;
    };
    let mitigating = |r: Reason| matches!(r, Reason::RateLimited | Reason::AnomalyIsolate | Reason::ManualIsolate);
    let first = (0..events.len())
        .find(|&i| attack[i] && verdicts[i].kind == VerdictKind::Drop && mitigating(verdicts[i].reason));
    if let Some(i) = first {
        let t0 = events[i].ts;
        m.time_to_mitigate_s = Some(t0.saturating_sub(onset) as f64 / 1e6);
        let rate = rate_of_drop(&verdicts[i], rulesets, &s.datapath) as i128;
        let mut cum: i128 = 0;
        let mut worst: i128 = 0;
        for j in i..events.len() {
            if attack[j] && verdicts[j].kind == VerdictKind::Accept {
                cum += events[j].length as i128 * 1_000_000;
                let allowance = rate * (events[j].ts - t0) as i128;
                worst = worst.max(cum - allowance);
            }
        }
        m.post_mitigation_leak_bytes = Some(((worst + 999_999) / 1_000_000) as u64);
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerdictDiff {
    pub index: usize,
    pub left: Option<VerdictRecord>,
    pub right: Option<VerdictRecord>,
}

/// Positions where two verdict traces disagree, ignoring latency.
pub fn diff_verdicts(left: &[VerdictRecord], right: &[VerdictRecord]) -> Vec<VerdictDiff> {
    let norm = |v: &VerdictRecord| VerdictRecord {
        latency_ns: 0,
        ..v.clone()
    };
    (0..left.len().max(right.len()))
        .filter_map(|i| {
            let (l, r) = (left.get(i).map(norm), right.get(i).map(norm));
            (l != r).then_some(VerdictDiff {
                index: i,
                left: l,
                right: r,
            })
        })
        .collect()
}

pub fn write_jsonl<T: Serialize, W: Write>(items: &[T], mut sink: W) -> io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut sink, item)?;
        sink.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a `PacketEvent` JSON-lines trace.
pub fn read_trace<R: BufRead>(input: R) -> Result<Vec<PacketEvent>, SimError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: PacketEvent = serde_json::from_str(&line).map_err(|e| SimError::Schema {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(e);
    }
    Ok(out)
}

/// One synthetic device class for the identification corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusClass {
    pub name: String,
    pub behaviours: Vec<Behaviour>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelledWindow {
    pub class: String,
    pub features: FeatureVector,
}

fn target(to: &str, port: u16, protocol: Protocol) -> Target {
    Target {
        to: to.into(),
        port,
        protocol,
    }
}

/// Heartbeat, stream and scanner device classes.
pub fn default_corpus_classes() -> Vec<CorpusClass> {
    vec![
        CorpusClass {
            name: "heartbeat".into(),
            behaviours: vec![
                Behaviour::Heartbeat {
                    period_s: 1.0,
                    target: target("203.0.113.10", 443, Protocol::Tcp),
                    size: 120,
                    jitter: 0.1,
                },
                Behaviour::Heartbeat {
                    period_s: 30.0,
                    target: target("192.168.1.5", 53, Protocol::Udp),
                    size: 80,
                    jitter: 0.1,
                },
            ],
        },
        CorpusClass {
            name: "stream".into(),
            behaviours: vec![Behaviour::Stream {
                rate_bps: 40_000.0,
                target: target("198.51.100.20", 443, Protocol::Tcp),
                pkt_size: 1000,
                direction: Direction::FromDevice,
                jitter: 0.2,
            }],
        },
        CorpusClass {
            name: "scanner".into(),
            behaviours: vec![Behaviour::Scanner {
                targets_per_s: 2.0,
                subnet: "10.0.0.0/8".parse().expect("literal"),
                ports: vec![23, 2323],
            }],
        },
    ]
}

/// `windows_per_class` windows per class, all traffic accepted.
pub fn generate_corpus(classes: &[CorpusClass], windows_per_class: usize, seed: u64) -> Vec<LabelledWindow> {
    let config = MonitorConfig::default();
    let horizon_us = windows_per_class as u64 * config.window_len_s * 1_000_000;
    let ctx = NetworkContext {
        devices: Vec::new(),
        dns_bindings: BTreeMap::new(),
        local_subnets: Vec::new(),
        gateway_ip: Ipv4Addr::new(192, 168, 1, 1),
        my_controller_bindings: BTreeMap::new(),
        resources: BTreeMap::new(),
    };
    let accept = Verdict {
        kind: VerdictKind::Accept,
        reason: Reason::Unmanaged,
        rule_provenance: None,
        generation: 0,
        logged: false,
        latency_ns: 0,
    };
    let mut out = Vec::new();
    for (ci, class) in classes.iter().enumerate() {
        let mac = MacAddr::new([2, 0xc0, 0, 0, 0, ci as u8]);
        let mut gen = TrafficGenerator {
            gens: Vec::new(),
            pending: Vec::new(),
            heap: BinaryHeap::new(),
        };
        for (bi, b) in class.behaviours.iter().enumerate() {
            let script = DeviceScript {
                mac,
                ip: Some(Ipv4Addr::new(192, 168, 1, 100 + ci as u8)),
                behaviour: b.clone(),
                start_s: 0.0,
                compromise_at_s: None,
                attack: None,
            };
            let mut g = ScriptGen::new(&script, &ctx, seed, bi as u32, horizon_us);
            let next = g.next();
            if let Some((e, _)) = &next {
                gen.heap.push(Reverse((e.ts, bi)));
            }
            gen.pending.push(next);
            gen.gens.push(g);
        }
        let mut monitor = FlowMonitor::new(config);
        for (e, _) in gen {
            monitor.ingest(&e, &accept);
        }
        out.extend(
            monitor
                .drain_closed(horizon_us)
                .into_iter()
                .filter(|f| f.device_mac == mac)
                .map(|features| LabelledWindow {
                    class: class.name.clone(),
                    features,
                }),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const CAM: MacAddr = MacAddr::new([2, 0, 0, 0, 0, 0x10]);

    fn scenario(extra: &str) -> Scenario {
        let text = format!(
            r#"{{
              "name": "t", "seed": 1, "horizon_s": 120,
              "context": {ctx},
              "profiles": {{ "02:00:00:00:00:10": {cam} }},
              "scripts": [
                {{ "mac": "02:00:00:00:00:10",
                   "behaviour": {{ "class": "heartbeat", "period_s": 1.0, "size": 100,
                                   "target": {{ "to": "cloud.example.com", "port": 443, "protocol": "tcp" }} }} }}
              ]{extra}
            }}"#,
            ctx = include_str!("../../../fixtures/context.json"),
            cam = include_str!("../../../fixtures/mud/camera.mud.json"),
        );
        Scenario::from_json(&text, None).unwrap()
    }

    #[test]
    fn deterministic_and_conserving() {
        let s = scenario("");
        let a = run_scenario(&s).unwrap();
        let b = run_scenario(&s).unwrap();
        assert_eq!(a.metrics.trace_hash, b.metrics.trace_hash);
        assert!((110..=130).contains(&a.metrics.packets_total));
        assert_eq!(a.metrics.accepted + a.metrics.dropped(), a.metrics.packets_total);
        assert_eq!(a.metrics.benign_default_deny, 0);
        assert!(a.events.windows(2).all(|w| w[0].ts <= w[1].ts));
    }

    #[test]
    fn seed_changes_trace() {
        let mut s = scenario("");
        let a = run_scenario(&s).unwrap().metrics.trace_hash;
        s.seed = 2;
        assert_ne!(run_scenario(&s).unwrap().metrics.trace_hash, a);
    }

    #[test]
    fn rejects_unknown_device_and_bad_compromise() {
        let mut s = scenario("");
        s.scripts[0].mac = MacAddr::new([9; 6]);
        assert!(matches!(s.validate(), Err(SimError::InvalidScenario(_))));
        let mut s = scenario("");
        s.scripts[0].compromise_at_s = Some(500.0);
        s.scripts[0].attack = Some(s.scripts[0].behaviour.clone());
        assert!(matches!(s.validate(), Err(SimError::InvalidScenario(_))));
    }

    #[test]
    fn replay_matches_live_run() {
        let s = scenario("");
        let live = run_scenario(&s).unwrap();
        let again = replay(&s, &live.events).unwrap();
        assert!(diff_verdicts(&live.verdicts, &again.verdicts).is_empty());
        assert!(replay(&s, &[]).unwrap().verdicts.is_empty());
    }

    #[test]
    fn trace_round_trip() {
        let s = scenario("");
        let live = run_scenario(&s).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&live.events, &mut buf).unwrap();
        assert_eq!(read_trace(&buf[..]).unwrap(), live.events);
        assert!(matches!(
            read_trace(&b"{}\n"[..]),
            Err(SimError::Schema { line: 1, .. })
        ));
    }

    #[test]
    fn seeds_are_per_device() {
        assert_ne!(derive_seed(1, CAM, 0), derive_seed(1, CAM, 1));
        assert_eq!(derive_seed(1, CAM, 0), derive_seed(1, CAM, 0));
    }

    #[test]
    fn corpus_shape() {
        let c = generate_corpus(&default_corpus_classes(), 5, 3);
        assert_eq!(c.len(), 15);
        assert_eq!(c, generate_corpus(&default_corpus_classes(), 5, 3));
    }
}
