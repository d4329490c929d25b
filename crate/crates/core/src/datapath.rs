//! Stateful per-packet enforcement.
//!
//! [`Datapath::process_packet`] decides every packet with this precedence:
//!
//! 1. manual isolation (`Mode::Isolated`), then anomaly quarantine
//! 2. guest isolation (only gateway-bound traffic passes)
//! 3. actuation-event window limits
//! 4. control-plane access overrides, then the installed rule set
//! 5. token buckets of the matched rule and of the device aggregate
//! 6. default deny
//!
//! Buckets are debited only when the packet is finally accepted.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{self, Write};
use std::net::Ipv4Addr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compiler::{first_match, ConcreteRule, Decision, PacketHeader, Provenance, RuleAction, RuleSet};
use crate::mud::RateSpec;
use crate::net::{Direction, MacAddr, Protocol};

const MICROS: u128 = 1_000_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DatapathError {
    #[error("unknown device {0}")]
    UnknownDevice(MacAddr),
    #[error("no packets processed yet")]
    Empty,
}

/// One packet as seen on the home LAN.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketEvent {
    /// Microseconds since scenario start.
    pub ts: u64,
    pub src_mac: MacAddr,
    pub dst_mac: MacAddr,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub protocol: Protocol,
    #[serde(default)]
    pub src_port: u16,
    #[serde(default)]
    pub dst_port: u16,
    pub length: u32,
    pub direction: Direction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actuation_class: Option<String>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub tcp_flags: u8,
}

fn is_zero(v: &u8) -> bool {
    *v == 0
}

impl PacketEvent {
    /// The managed device this packet is attributed to.
    pub fn device_mac(&self) -> MacAddr {
        match self.direction {
            Direction::FromDevice => self.src_mac,
            Direction::ToDevice => self.dst_mac,
        }
    }

    pub fn device_ip(&self) -> Ipv4Addr {
        match self.direction {
            Direction::FromDevice => self.src_ip,
            Direction::ToDevice => self.dst_ip,
        }
    }

    pub fn remote_ip(&self) -> Ipv4Addr {
        match self.direction {
            Direction::FromDevice => self.dst_ip,
            Direction::ToDevice => self.src_ip,
        }
    }

    pub fn remote_port(&self) -> u16 {
        match self.direction {
            Direction::FromDevice => self.dst_port,
            Direction::ToDevice => self.src_port,
        }
    }

    pub fn local_port(&self) -> u16 {
        match self.direction {
            Direction::FromDevice => self.src_port,
            Direction::ToDevice => self.dst_port,
        }
    }

    /// Stateless header: the packet's own direction stands in for the initiator.
    pub fn header(&self) -> PacketHeader {
        self.header_with_initiator(self.direction)
    }

    pub fn header_with_initiator(&self, initiator: Direction) -> PacketHeader {
        PacketHeader {
            device_mac: self.device_mac(),
            direction: self.direction,
            protocol: self.protocol,
            remote_ip: self.remote_ip(),
            remote_port: self.remote_port(),
            local_port: self.local_port(),
            initiator,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VerdictKind {
    Accept,
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Reason {
    RuleAccept,
    DefaultDeny,
    RuleDrop,
    RateLimited,
    GuestIsolation,
    ActuationLimit,
    ManualIsolate,
    AnomalyIsolate,
    Unmanaged,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub kind: VerdictKind,
    pub reason: Reason,
    pub rule_provenance: Option<Provenance>,
    /// Rule-set generation the decision was made against (0 if none).
    pub generation: u64,
    /// Set when the device has "log all traffic" enabled.
    pub logged: bool,
    pub latency_ns: u64,
}

impl Verdict {
    pub fn is_accept(&self) -> bool {
        self.kind == VerdictKind::Accept
    }

    fn new(kind: VerdictKind, reason: Reason) -> Self {
        Self {
            kind,
            reason,
            rule_provenance: None,
            generation: 0,
            logged: false,
            latency_ns: 0,
        }
    }
}

/// One line of `verdicts.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub ts: u64,
    pub mac: MacAddr,
    pub kind: VerdictKind,
    pub reason: Reason,
    pub provenance: Option<String>,
    pub latency_ns: u64,
}

impl VerdictRecord {
    pub fn new(e: &PacketEvent, v: &Verdict) -> Self {
        Self {
            ts: e.ts,
            mac: e.device_mac(),
            kind: v.kind,
            reason: v.reason,
            provenance: v.rule_provenance.as_ref().map(|p| p.to_string()),
            latency_ns: v.latency_ns,
        }
    }
}

/// Byte and packet token bucket.
///
/// Tokens are held as integer byte-microseconds (bytes scaled by 10^6), so
/// refill over an integral number of microseconds is exact and the bound
/// `accepted <= rate * dt + burst` holds without rounding slack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBucket {
    pub rate: u64,
    pub burst: u64,
    tokens_scaled: u128,
    pub packet_rate: u64,
    pub packet_burst: u64,
    packet_tokens_scaled: u128,
    pub last_refill: u64,
}

impl TokenBucket {
    /// A full bucket for `spec`, as of `now` (µs).
    pub fn new(spec: &RateSpec, now: u64) -> Self {
        let burst = spec.effective_burst_bytes();
        let packet_burst = spec.effective_burst_packets();
        Self {
            rate: spec.max_bytes_per_second,
            burst,
            tokens_scaled: burst as u128 * MICROS,
            packet_rate: spec.max_packets_per_second,
            packet_burst,
            packet_tokens_scaled: packet_burst as u128 * MICROS,
            last_refill: now,
        }
    }

    /// Current byte tokens (fractional).
    pub fn tokens(&self) -> f64 {
        self.tokens_scaled as f64 / MICROS as f64
    }

    pub fn packet_tokens(&self) -> f64 {
        self.packet_tokens_scaled as f64 / MICROS as f64
    }

    pub fn refill(&mut self, now: u64) {
        let dt = now.saturating_sub(self.last_refill) as u128;
        if dt == 0 {
            return;
        }
        if self.rate > 0 {
            let cap = self.burst as u128 * MICROS;
            self.tokens_scaled = (self.tokens_scaled + self.rate as u128 * dt).min(cap);
        }
        if self.packet_rate > 0 {
            let cap = self.packet_burst as u128 * MICROS;
            self.packet_tokens_scaled = (self.packet_tokens_scaled + self.packet_rate as u128 * dt).min(cap);
        }
        self.last_refill = now;
    }

    /// Whether a packet of `len` bytes fits. Call [`refill`](Self::refill) first.
    pub fn admits(&self, len: u32) -> bool {
        let bytes_ok = self.rate == 0 || self.tokens_scaled >= len as u128 * MICROS;
        let pkts_ok = self.packet_rate == 0 || self.packet_tokens_scaled >= MICROS;
        bytes_ok && pkts_ok
    }

    pub fn consume(&mut self, len: u32) {
        if self.rate > 0 {
            self.tokens_scaled -= len as u128 * MICROS;
        }
        if self.packet_rate > 0 {
            self.packet_tokens_scaled -= MICROS;
        }
    }

    /// Refill, test and debit in one step.
    pub fn try_consume(&mut self, len: u32, now: u64) -> bool {
        self.refill(now);
        let ok = self.admits(len);
        if ok {
            self.consume(len);
        }
        ok
    }

    fn retune(&mut self, spec: &RateSpec) {
        self.rate = spec.max_bytes_per_second;
        self.burst = spec.effective_burst_bytes();
        self.tokens_scaled = self.tokens_scaled.min(self.burst as u128 * MICROS);
        self.packet_rate = spec.max_packets_per_second;
        self.packet_burst = spec.effective_burst_packets();
        self.packet_tokens_scaled = self.packet_tokens_scaled.min(self.packet_burst as u128 * MICROS);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Normal,
    Guest,
    Isolated,
    Privileged,
    Unprivileged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UnmanagedPolicy {
    #[default]
    AllowLog,
    Allow,
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActuationLimit {
    pub max_events: usize,
    pub window_s: u64,
}

impl Default for ActuationLimit {
    fn default() -> Self {
        Self {
            max_events: 3,
            window_s: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatapathConfig {
    pub gateway_ip: Ipv4Addr,
    pub unmanaged: UnmanagedPolicy,
    pub actuation_default: ActuationLimit,
    pub actuation_limits: BTreeMap<String, ActuationLimit>,
    /// Optional per-device aggregate buckets.
    pub device_rates: BTreeMap<MacAddr, RateSpec>,
    /// Record wall-clock processing time per packet.
    pub measure_latency: bool,
}

impl Default for DatapathConfig {
    fn default() -> Self {
        Self {
            gateway_ip: Ipv4Addr::new(192, 168, 1, 1),
            unmanaged: UnmanagedPolicy::AllowLog,
            actuation_default: ActuationLimit::default(),
            actuation_limits: BTreeMap::new(),
            device_rates: BTreeMap::new(),
            measure_latency: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatapathEvent {
    DeviceRebooted { mac: MacAddr, ts: u64 },
}

type FlowTuple = (Ipv4Addr, Protocol, u16, u16);

#[derive(Debug, Clone, Default)]
pub struct DeviceState {
    pub mac: MacAddr,
    pub mode: Mode,
    pub generation: u64,
    ruleset: Option<RuleSet>,
    unprivileged: Option<RuleSet>,
    needs_flow_state: bool,
    pub buckets: HashMap<Provenance, TokenBucket>,
    pub aggregate: Option<TokenBucket>,
    aggregate_spec: Option<RateSpec>,
    pub actuation_windows: HashMap<String, VecDeque<u64>>,
    pub logging: bool,
    pub quarantined: bool,
    access_rules: Vec<ConcreteRule>,
    initiators: HashMap<FlowTuple, Direction>,
}

impl DeviceState {
    fn new(mac: MacAddr) -> Self {
        Self {
            mac,
            ..Default::default()
        }
    }

    pub fn ruleset(&self) -> Option<&RuleSet> {
        self.ruleset.as_ref()
    }

    pub fn is_managed(&self) -> bool {
        self.ruleset.is_some()
    }

    fn active_rules(&self) -> Option<&RuleSet> {
        match self.mode {
            Mode::Unprivileged => self.unprivileged.as_ref(),
            _ => self.ruleset.as_ref(),
        }
    }
}

const HISTOGRAM_BUCKETS: usize = 48;

/// Log2-spaced latency histogram. Bucket `i > 0` covers `[2^i, 2^(i+1))` ns,
/// bucket 0 covers `[0, 2)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyHistogram {
    counts: Vec<u64>,
    total: u64,
    sum_ns: u128,
}

impl Default for LatencyHistogram {
    fn default() -> Self {
        Self {
            counts: vec![0; HISTOGRAM_BUCKETS],
            total: 0,
            sum_ns: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyBucket {
    pub low_ns: u64,
    pub high_ns: u64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub buckets: Vec<LatencyBucket>,
    pub count: u64,
    pub mean_ns: f64,
    pub p50_ns: u64,
    pub p99_ns: u64,
}

impl LatencyReport {
    /// CSV with header `bucket_low_ns,bucket_high_ns,count`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "bucket_low_ns,bucket_high_ns,count")?;
        for b in &self.buckets {
            writeln!(out, "{},{},{}", b.low_ns, b.high_ns, b.count)?;
        }
        Ok(())
    }
}

impl LatencyHistogram {
    fn bucket_of(ns: u64) -> usize {
        if ns < 2 {
            0
        } else {
            (63 - ns.leading_zeros() as usize).min(HISTOGRAM_BUCKETS - 1)
        }
    }

    fn bounds(i: usize) -> (u64, u64) {
        if i == 0 {
            (0, 2)
        } else {
            (1 << i, 1 << (i + 1))
        }
    }

    pub fn record(&mut self, ns: u64) {
        self.counts[Self::bucket_of(ns)] += 1;
        self.total += 1;
        self.sum_ns += ns as u128;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Upper bound of the bucket holding quantile `q`.
    fn quantile(&self, q: f64) -> u64 {
        let target = ((self.total as f64) * q).ceil().max(1.0) as u64;
        let mut seen = 0;
        for (i, c) in self.counts.iter().enumerate() {
            seen += c;
            if seen >= target {
                return Self::bounds(i).1;
            }
        }
        Self::bounds(HISTOGRAM_BUCKETS - 1).1
    }

    pub fn report(&self) -> Result<LatencyReport, DatapathError> {
        if self.total == 0 {
            return Err(DatapathError::Empty);
        }
        let last = self.counts.iter().rposition(|c| *c > 0).unwrap_or(0);
        let buckets = (0..=last)
            .map(|i| {
                let (low_ns, high_ns) = Self::bounds(i);
                LatencyBucket {
                    low_ns,
                    high_ns,
                    count: self.counts[i],
                }
            })
            .collect();
        Ok(LatencyReport {
            buckets,
            count: self.total,
            mean_ns: self.sum_ns as f64 / self.total as f64,
            p50_ns: self.quantile(0.50),
            p99_ns: self.quantile(0.99),
        })
    }
}

/// The enforcement engine for one home.
#[derive(Debug, Clone)]
pub struct Datapath {
    config: DatapathConfig,
    devices: HashMap<MacAddr, DeviceState>,
    latency: LatencyHistogram,
    events: Vec<DatapathEvent>,
}

impl Datapath {
    pub fn new(config: DatapathConfig) -> Self {
        Self {
            config,
            devices: HashMap::new(),
            latency: LatencyHistogram::default(),
            events: Vec::new(),
        }
    }

    pub fn config(&self) -> &DatapathConfig {
        &self.config
    }

    pub fn device(&self, mac: MacAddr) -> Option<&DeviceState> {
        self.devices.get(&mac)
    }

    pub fn devices(&self) -> impl Iterator<Item = &DeviceState> {
        self.devices.values()
    }

    /// Makes an unmanaged device known so modes can be applied to it.
    pub fn register_device(&mut self, mac: MacAddr) {
        self.devices.entry(mac).or_insert_with(|| DeviceState::new(mac));
    }

    /// Atomically replaces the device's rule set and returns its generation:
    /// one past the previous install, or `rs.generation` if that is higher.
    ///
    /// Buckets of provenances that survive keep their tokens; new rules get
    /// a full bucket on first use.
    pub fn install_ruleset(&mut self, rs: RuleSet) -> u64 {
        let dev = self
            .devices
            .entry(rs.device_mac)
            .or_insert_with(|| DeviceState::new(rs.device_mac));
        let generation = (dev.generation + 1).max(rs.generation);
        let mut rs = rs;
        rs.generation = generation;

        let mut specs: HashMap<&Provenance, RateSpec> = HashMap::new();
        for r in &rs.rules {
            if let RuleAction::AcceptRateLimited { rate } = r.action {
                specs.insert(&r.provenance, rate);
            }
        }
        dev.buckets.retain(|prov, bucket| match specs.get(prov) {
            Some(spec) => {
                bucket.retune(spec);
                true
            }
            None => false,
        });
        dev.needs_flow_state = rs.rules.iter().any(|r| r.initiated_by.is_some());
        let mut unpriv = rs.unprivileged();
        unpriv.generation = generation;
        dev.unprivileged = Some(unpriv);
        dev.ruleset = Some(rs);
        dev.generation = generation;
        generation
    }

    /// Removes the rule set, making the device unmanaged again.
    pub fn remove_ruleset(&mut self, mac: MacAddr) {
        if let Some(dev) = self.devices.get_mut(&mac) {
            dev.ruleset = None;
            dev.unprivileged = None;
            dev.buckets.clear();
        }
    }

    pub fn set_mode(&mut self, mac: MacAddr, mode: Mode) -> Result<Mode, DatapathError> {
        let dev = self.devices.get_mut(&mac).ok_or(DatapathError::UnknownDevice(mac))?;
        Ok(std::mem::replace(&mut dev.mode, mode))
    }

    pub fn mode(&self, mac: MacAddr) -> Option<Mode> {
        self.devices.get(&mac).map(|d| d.mode)
    }

    pub fn set_logging(&mut self, mac: MacAddr, on: bool) -> Result<bool, DatapathError> {
        let dev = self.devices.get_mut(&mac).ok_or(DatapathError::UnknownDevice(mac))?;
        Ok(std::mem::replace(&mut dev.logging, on))
    }

    /// Automatic isolation requested by anomaly detection.
    pub fn set_quarantine(&mut self, mac: MacAddr, on: bool) -> Result<bool, DatapathError> {
        let dev = self.devices.get_mut(&mac).ok_or(DatapathError::UnknownDevice(mac))?;
        Ok(std::mem::replace(&mut dev.quarantined, on))
    }

    /// Rules evaluated ahead of the installed rule set (resource allow/deny).
    pub fn set_access_rules(&mut self, mac: MacAddr, rules: Vec<ConcreteRule>) -> Result<(), DatapathError> {
        let dev = self.devices.get_mut(&mac).ok_or(DatapathError::UnknownDevice(mac))?;
        dev.access_rules = rules;
        Ok(())
    }

    /// Installs or clears the per-device aggregate bucket.
    pub fn set_device_rate(&mut self, mac: MacAddr, spec: Option<RateSpec>) -> Result<(), DatapathError> {
        let dev = self.devices.get_mut(&mac).ok_or(DatapathError::UnknownDevice(mac))?;
        dev.aggregate = None;
        dev.aggregate_spec = spec;
        Ok(())
    }

    /// Simulated power cycle: flushes flow, bucket and actuation state.
    pub fn reboot(&mut self, mac: MacAddr, ts: u64) -> Result<(), DatapathError> {
        let dev = self.devices.get_mut(&mac).ok_or(DatapathError::UnknownDevice(mac))?;
        dev.buckets.clear();
        dev.aggregate = None;
        dev.actuation_windows.clear();
        dev.initiators.clear();
        self.events.push(DatapathEvent::DeviceRebooted { mac, ts });
        Ok(())
    }

    pub fn drain_events(&mut self) -> Vec<DatapathEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn latency_report(&self) -> Result<LatencyReport, DatapathError> {
        self.latency.report()
    }

    pub fn packets_processed(&self) -> u64 {
        self.latency.total()
    }

    pub fn process_packet(&mut self, e: &PacketEvent) -> Verdict {
        let start = self.config.measure_latency.then(Instant::now);
        let mut v = self.decide(e);
        v.latency_ns = start.map(|s| s.elapsed().as_nanos() as u64).unwrap_or(0);
        self.latency.record(v.latency_ns);
        v
    }

    fn unmanaged_verdict(policy: UnmanagedPolicy) -> Verdict {
        match policy {
            UnmanagedPolicy::AllowLog => Verdict {
                logged: true,
                ..Verdict::new(VerdictKind::Accept, Reason::Unmanaged)
            },
            UnmanagedPolicy::Allow => Verdict::new(VerdictKind::Accept, Reason::Unmanaged),
            UnmanagedPolicy::Drop => Verdict::new(VerdictKind::Drop, Reason::Unmanaged),
        }
    }

    fn decide(&mut self, e: &PacketEvent) -> Verdict {
        let config = &self.config;
        let mac = e.device_mac();
        let Some(dev) = self.devices.get_mut(&mac) else {
            return Self::unmanaged_verdict(config.unmanaged);
        };
        let drop = |reason| Verdict {
            logged: dev.logging,
            ..Verdict::new(VerdictKind::Drop, reason)
        };

        if dev.mode == Mode::Isolated {
            return drop(Reason::ManualIsolate);
        }
        if dev.quarantined {
            return drop(Reason::AnomalyIsolate);
        }
        if dev.mode == Mode::Guest {
            let peer = match e.direction {
                Direction::FromDevice => e.dst_ip,
                Direction::ToDevice => e.src_ip,
            };
            if peer != config.gateway_ip {
                return drop(Reason::GuestIsolation);
            }
        }
        if let Some(class) = &e.actuation_class {
            let limit = config
                .actuation_limits
                .get(class)
                .copied()
                .unwrap_or(config.actuation_default);
            if let Some(window) = dev.actuation_windows.get_mut(class) {
                let window_us = limit.window_s * 1_000_000;
                while window.front().is_some_and(|t| t + window_us <= e.ts) {
                    window.pop_front();
                }
                if window.len() >= limit.max_events {
                    return drop(Reason::ActuationLimit);
                }
            }
        }

        let initiator = if dev.needs_flow_state {
            let key = (e.remote_ip(), e.protocol, e.remote_port(), e.local_port());
            *dev.initiators.entry(key).or_insert(e.direction)
        } else {
            e.direction
        };
        let header = e.header_with_initiator(initiator);

        let mut decision = first_match(&dev.access_rules, &header);
        let mut generation = 0;
        if decision == Decision::DefaultDrop {
            match dev.active_rules() {
                Some(rs) => {
                    decision = first_match(&rs.rules, &header);
                    generation = rs.generation;
                }
                None => {
                    let v = Self::unmanaged_verdict(config.unmanaged);
                    if v.kind == VerdictKind::Drop {
                        return v;
                    }
                    return Self::admit(dev, e, v, None, config);
                }
            }
        }
        match decision {
            Decision::DefaultDrop => Verdict {
                generation,
                ..drop(Reason::DefaultDeny)
            },
            Decision::Rule {
                action: RuleAction::Drop,
                provenance,
                ..
            } => Verdict {
                generation,
                rule_provenance: Some(provenance),
                ..drop(Reason::RuleDrop)
            },
            Decision::Rule { action, provenance, .. } => {
                let rate = match action {
                    RuleAction::AcceptRateLimited { rate } => Some(rate),
                    _ => None,
                };
                let v = Verdict {
                    generation,
                    rule_provenance: Some(provenance),
                    ..Verdict::new(VerdictKind::Accept, Reason::RuleAccept)
                };
                Self::admit(dev, e, v, rate, config)
            }
        }
    }

    /// Applies rule and aggregate buckets to an accepted decision.
    fn admit(
        dev: &mut DeviceState,
        e: &PacketEvent,
        mut v: Verdict,
        rate: Option<RateSpec>,
        config: &DatapathConfig,
    ) -> Verdict {
        v.logged |= dev.logging;
        let aggregate_spec = dev
            .aggregate_spec
            .or_else(|| config.device_rates.get(&dev.mac).copied());
        if let Some(spec) = aggregate_spec {
            let bucket = dev.aggregate.get_or_insert_with(|| TokenBucket::new(&spec, e.ts));
            bucket.refill(e.ts);
            if !bucket.admits(e.length) {
                v.kind = VerdictKind::Drop;
                v.reason = Reason::RateLimited;
                return v;
            }
        }
        if let (Some(spec), Some(prov)) = (rate, v.rule_provenance.as_ref()) {
            if !dev.buckets.contains_key(prov) {
                dev.buckets.insert(prov.clone(), TokenBucket::new(&spec, e.ts));
            }
            let bucket = dev.buckets.get_mut(prov).expect("inserted above");
            bucket.refill(e.ts);
            if !bucket.admits(e.length) {
                v.kind = VerdictKind::Drop;
                v.reason = Reason::RateLimited;
                return v;
            }
            bucket.consume(e.length);
        }
        if let Some(bucket) = dev.aggregate.as_mut() {
            bucket.consume(e.length);
        }
        if let Some(class) = &e.actuation_class {
            dev.actuation_windows.entry(class.clone()).or_default().push_back(e.ts);
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::{compile, NetworkContext};
    use crate::mud::parse_mud;

    const CAMERA: &str = include_str!("../../../fixtures/mud/camera.mud.json");
    const CONTEXT: &str = include_str!("../../../fixtures/context.json");

    fn cam() -> MacAddr {
        "02:00:00:00:00:10".parse().unwrap()
    }

    fn datapath_with_camera() -> Datapath {
        let ctx = NetworkContext::from_json(CONTEXT).unwrap();
        let (rs, _) = compile(&parse_mud(CAMERA).unwrap(), &ctx, ctx.device(cam()).unwrap()).unwrap();
        let mut dp = Datapath::new(DatapathConfig {
            measure_latency: false,
            ..Default::default()
        });
        dp.install_ruleset(rs);
        dp
    }

    fn pkt(ts: u64, dst: [u8; 4], proto: Protocol, port: u16, len: u32) -> PacketEvent {
        PacketEvent {
            ts,
            src_mac: cam(),
            dst_mac: MacAddr::new([2, 0, 0, 0, 0, 1]),
            src_ip: Ipv4Addr::new(192, 168, 1, 10),
            dst_ip: Ipv4Addr::from(dst),
            protocol: proto,
            src_port: 40000,
            dst_port: port,
            length: len,
            direction: Direction::FromDevice,
            actuation_class: None,
            tcp_flags: 0,
        }
    }

    fn cloud(ts: u64, len: u32) -> PacketEvent {
        pkt(ts, [203, 0, 113, 10], Protocol::Tcp, 443, len)
    }

    #[test]
    fn bucket_saturation_burst_then_refill() {
        let mut dp = datapath_with_camera();
        let verdicts: Vec<_> = (0..100).map(|_| dp.process_packet(&cloud(1_000_000, 1000))).collect();
        let accepted = verdicts.iter().filter(|v| v.is_accept()).count();
        assert_eq!(accepted, 10);
        assert!(verdicts[..10].iter().all(|v| v.reason == Reason::RuleAccept));
        assert!(verdicts[10..].iter().all(|v| v.reason == Reason::RateLimited));

        // One idle second refills 50 000 B, capped at the 10 000 B burst.
        let again = (0..100)
            .filter(|_| dp.process_packet(&cloud(2_000_000, 1000)).is_accept())
            .count();
        assert_eq!(again, 10);

        // 100 ms refills exactly 5 000 B.
        let partial = (0..100)
            .filter(|_| dp.process_packet(&cloud(2_100_000, 1000)).is_accept())
            .count();
        assert_eq!(partial, 5);
    }

    #[test]
    fn rate_limits_are_shared_per_ace() {
        let mut dp = datapath_with_camera();
        let a = (0..6)
            .filter(|_| dp.process_packet(&cloud(0, 1000)).is_accept())
            .count();
        let b = (0..6)
            .filter(|_| {
                dp.process_packet(&pkt(0, [203, 0, 113, 11], Protocol::Tcp, 443, 1000))
                    .is_accept()
            })
            .count();
        assert_eq!(a + b, 10);
    }

    #[test]
    fn guest_mode_only_reaches_gateway() {
        let mut dp = datapath_with_camera();
        dp.set_mode(cam(), Mode::Guest).unwrap();
        let v = dp.process_packet(&pkt(0, [192, 168, 1, 20], Protocol::Tcp, 80, 100));
        assert_eq!((v.kind, v.reason), (VerdictKind::Drop, Reason::GuestIsolation));
        let v = dp.process_packet(&cloud(0, 100));
        assert_eq!(v.reason, Reason::GuestIsolation);
    }

    #[test]
    fn actuation_window_limits_fourth_event() {
        let mut dp = Datapath::new(DatapathConfig::default());
        let lock: MacAddr = "02:00:00:00:00:30".parse().unwrap();
        dp.register_device(lock);
        let cmd = |ts_s: u64| PacketEvent {
            ts: ts_s * 1_000_000,
            src_mac: MacAddr::new([2, 0, 0, 0, 0, 5]),
            dst_mac: lock,
            src_ip: Ipv4Addr::new(192, 168, 1, 5),
            dst_ip: Ipv4Addr::new(192, 168, 1, 30),
            protocol: Protocol::Tcp,
            src_port: 5000,
            dst_port: 8443,
            length: 200,
            direction: Direction::ToDevice,
            actuation_class: Some("unlock".into()),
            tcp_flags: 0,
        };
        let kinds: Vec<_> = [0, 10, 20, 30]
            .iter()
            .map(|t| dp.process_packet(&cmd(*t)).reason)
            .collect();
        assert_eq!(
            kinds,
            vec![
                Reason::Unmanaged,
                Reason::Unmanaged,
                Reason::Unmanaged,
                Reason::ActuationLimit
            ]
        );
        // Event at t=0 has left the 60 s window by t=61.
        assert!(dp.process_packet(&cmd(61)).is_accept());
        assert_eq!(dp.process_packet(&cmd(62)).reason, Reason::ActuationLimit);
    }

    #[test]
    fn install_bumps_generation_and_keeps_buckets() {
        let mut dp = datapath_with_camera();
        for _ in 0..4 {
            dp.process_packet(&cloud(0, 1000));
        }
        let before = dp.device(cam()).unwrap().buckets.clone();
        let rs = dp.device(cam()).unwrap().ruleset().unwrap().clone();
        assert_eq!(dp.install_ruleset(rs), 2);
        assert_eq!(dp.device(cam()).unwrap().buckets, before);
        assert_eq!(dp.process_packet(&cloud(0, 1000)).generation, 2);
        let tokens = dp.device(cam()).unwrap().buckets.values().next().unwrap().tokens();
        assert_eq!(tokens, 5000.0);
    }

    #[test]
    fn install_for_unknown_device_creates_normal_state() {
        let mut dp = Datapath::new(DatapathConfig::default());
        let mac = MacAddr::new([2, 9, 9, 9, 9, 9]);
        dp.install_ruleset(RuleSet::new(mac, vec![]));
        assert_eq!(dp.mode(mac), Some(Mode::Normal));
    }

    #[test]
    fn isolation_and_release() {
        let mut dp = datapath_with_camera();
        assert_eq!(dp.set_mode(cam(), Mode::Isolated).unwrap(), Mode::Normal);
        assert_eq!(dp.process_packet(&cloud(0, 10)).reason, Reason::ManualIsolate);
        dp.set_mode(cam(), Mode::Normal).unwrap();
        assert_eq!(dp.process_packet(&cloud(0, 10)).reason, Reason::RuleAccept);
        assert_eq!(
            dp.set_mode(MacAddr::new([1; 6]), Mode::Guest),
            Err(DatapathError::UnknownDevice(MacAddr::new([1; 6])))
        );
    }

    #[test]
    fn unprivileged_drops_privileged_only_rules() {
        let ctx = NetworkContext::from_json(CONTEXT).unwrap();
        let tv = ctx
            .devices
            .iter()
            .find(|d| d.label == "living room tv")
            .unwrap()
            .clone();
        let doc = include_str!("../../../fixtures/mud/tv.mud.json");
        let (rs, _) = compile(&parse_mud(doc).unwrap(), &ctx, &tv).unwrap();
        let mut dp = Datapath::new(DatapathConfig::default());
        dp.install_ruleset(rs);
        let stream = PacketEvent {
            src_mac: tv.mac,
            src_ip: tv.ipv4,
            ..pkt(0, [198, 51, 100, 20], Protocol::Tcp, 443, 1200)
        };
        assert!(dp.process_packet(&stream).is_accept());
        dp.set_mode(tv.mac, Mode::Unprivileged).unwrap();
        assert_eq!(dp.process_packet(&stream).reason, Reason::DefaultDeny);
        dp.set_mode(tv.mac, Mode::Privileged).unwrap();
        assert!(dp.process_packet(&stream).is_accept());
    }

    #[test]
    fn default_deny_and_unmanaged() {
        let mut dp = datapath_with_camera();
        let v = dp.process_packet(&pkt(0, [8, 8, 8, 8], Protocol::Tcp, 80, 60));
        assert_eq!((v.kind, v.reason), (VerdictKind::Drop, Reason::DefaultDeny));
        let mut stranger = pkt(0, [8, 8, 8, 8], Protocol::Tcp, 80, 60);
        stranger.src_mac = MacAddr::new([2, 0, 0, 0, 0, 0x40]);
        let v = dp.process_packet(&stranger);
        assert_eq!(
            (v.kind, v.reason, v.logged),
            (VerdictKind::Accept, Reason::Unmanaged, true)
        );
    }

    #[test]
    fn aggregate_bucket_caps_device() {
        let mut dp = datapath_with_camera();
        dp.set_device_rate(cam(), Some(RateSpec::bytes(1000, 2000))).unwrap();
        let n = (0..10)
            .filter(|_| dp.process_packet(&cloud(0, 500)).is_accept())
            .count();
        assert_eq!(n, 4);
    }

    #[test]
    fn reboot_flushes_state() {
        let mut dp = datapath_with_camera();
        for _ in 0..20 {
            dp.process_packet(&cloud(0, 1000));
        }
        dp.reboot(cam(), 5).unwrap();
        assert!(dp.device(cam()).unwrap().buckets.is_empty());
        assert_eq!(
            dp.drain_events(),
            vec![DatapathEvent::DeviceRebooted { mac: cam(), ts: 5 }]
        );
        assert!(dp.process_packet(&cloud(5, 1000)).is_accept());
    }

    #[test]
    fn latency_report_conserves_counts() {
        let mut dp = Datapath::new(DatapathConfig::default());
        assert_eq!(dp.latency_report(), Err(DatapathError::Empty));
        dp.process_packet(&cloud(0, 10));
        assert_eq!(dp.latency_report().unwrap().count, 1);
        for i in 0..999 {
            dp.process_packet(&cloud(i, 10));
        }
        let r = dp.latency_report().unwrap();
        assert_eq!(r.buckets.iter().map(|b| b.count).sum::<u64>(), 1000);
        assert!(r.p50_ns <= r.p99_ns);
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv)
            .unwrap()
            .starts_with("bucket_low_ns,bucket_high_ns,count\n"));
    }

    #[test]
    fn histogram_bucket_bounds() {
        assert_eq!(LatencyHistogram::bucket_of(0), 0);
        assert_eq!(LatencyHistogram::bucket_of(1), 0);
        assert_eq!(LatencyHistogram::bucket_of(2), 1);
        assert_eq!(LatencyHistogram::bucket_of(1023), 9);
        assert_eq!(LatencyHistogram::bucket_of(1024), 10);
    }
}
