//! Flow table and windowed per-device features.
//!
//! Flows are unidirectional (NetFlow style) and keyed from the device's point
//! of view. Only accepted packets update flow and window statistics; drops go
//! to a per-device counter.
//!
//! Windows are tumbling and aligned to multiples of `window_len_s` from time
//! zero. Each [`FeatureVector`] carries twelve dimensions in this order:
//!
//! | # | name | unit |
//! |---|------|------|
//! | 0 | `flow_count` | flows with a packet in the window |
//! | 1 | `new_flow_count` | flows whose first packet is in the window |
//! | 2 | `unique_remote_ips` | count |
//! | 3 | `pkts_out_rate` | packets/s, device to remote |
//! | 4 | `pkts_in_rate` | packets/s, remote to device |
//! | 5 | `bytes_out_rate` | bytes/s |
//! | 6 | `bytes_in_rate` | bytes/s |
//! | 7 | `mean_pkt_size` | bytes |
//! | 8 | `mean_inter_arrival_ms` | per-flow gaps ending in the window |
//! | 9 | `tcp_share` | fraction of packets |
//! | 10 | `udp_share` | fraction of packets |
//! | 11 | `new_destination_rate` | never-before-seen remote IPs per second |

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{self, BufRead, Write};
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datapath::{PacketEvent, Verdict};
use crate::net::{Direction, MacAddr, Protocol};

pub const DIMS: usize = 12;

pub const DIM_NAMES: [&str; DIMS] = [
    "flow_count",
    "new_flow_count",
    "unique_remote_ips",
    "pkts_out_rate",
    "pkts_in_rate",
    "bytes_out_rate",
    "bytes_in_rate",
    "mean_pkt_size",
    "mean_inter_arrival_ms",
    "tcp_share",
    "udp_share",
    "new_destination_rate",
];

pub const PKTS_OUT_RATE: usize = 3;
pub const BYTES_OUT_RATE: usize = 5;
pub const MEAN_PKT_SIZE: usize = 7;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("window starting at {start_s}s is not closed yet")]
    WindowNotClosed { start_s: u64 },
    #[error("window start {start_s}s is not aligned to {len_s}s windows")]
    Misaligned { start_s: u64, len_s: u64 },
    #[error("flow export: {0}")]
    Io(#[from] io::Error),
    #[error("flow export line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// Welford running mean and variance with min/max.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
    pub min: f64,
    pub max: f64,
}

impl Default for RunningStats {
    fn default() -> Self {
        Self {
            count: 0,
            mean: 0.0,
            m2: 0.0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
        self.min = self.min.min(x);
        self.max = self.max.max(x);
    }

    /// Sample variance, defined for two or more observations.
    pub fn variance(&self) -> Option<f64> {
        (self.count >= 2).then(|| (self.m2 / (self.count - 1) as f64).max(0.0))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FlowKey {
    pub device_mac: MacAddr,
    pub remote_ip: Ipv4Addr,
    pub protocol: Protocol,
    pub local_port: u16,
    pub remote_port: u16,
    pub direction: Direction,
}

impl FlowKey {
    pub fn of(e: &PacketEvent) -> Self {
        Self {
            device_mac: e.device_mac(),
            remote_ip: e.remote_ip(),
            protocol: e.protocol,
            local_port: e.local_port(),
            remote_port: e.remote_port(),
            direction: e.direction,
        }
    }
}

const TCP_FLAG_NAMES: [&str; 8] = ["fin", "syn", "rst", "psh", "ack", "urg", "ece", "cwr"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub key: FlowKey,
    pub packets: u64,
    pub bytes: u64,
    pub first_ts: u64,
    pub last_ts: u64,
    /// Inter-arrival gaps in microseconds.
    pub inter_arrival: RunningStats,
    pub tcp_flag_counts: BTreeMap<String, u64>,
}

impl FlowRecord {
    fn start(e: &PacketEvent) -> Self {
        let mut r = Self {
            key: FlowKey::of(e),
            packets: 1,
            bytes: e.length as u64,
            first_ts: e.ts,
            last_ts: e.ts,
            inter_arrival: RunningStats::default(),
            tcp_flag_counts: BTreeMap::new(),
        };
        r.count_flags(e.tcp_flags);
        r
    }

    fn count_flags(&mut self, flags: u8) {
        for (bit, name) in TCP_FLAG_NAMES.iter().enumerate() {
            if flags & (1 << bit) != 0 {
                *self.tcp_flag_counts.entry((*name).to_string()).or_default() += 1;
            }
        }
    }
}

/// A remote service a device talked to: hostname (or `/32` CIDR), protocol, port.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Endpoint {
    pub host: String,
    pub protocol: Protocol,
    pub port: u16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub device_mac: MacAddr,
    pub window_start_s: u64,
    pub window_len_s: u64,
    pub dims: [f64; DIMS],
    /// Outbound endpoints seen in the window (not a dimension).
    #[serde(default)]
    pub endpoints: BTreeSet<Endpoint>,
    /// Dropped packets per second (not a dimension).
    #[serde(default)]
    pub drop_rate: f64,
}

impl FeatureVector {
    pub fn zero(device_mac: MacAddr, window_start_s: u64, window_len_s: u64) -> Self {
        Self {
            device_mac,
            window_start_s,
            window_len_s,
            dims: [0.0; DIMS],
            endpoints: BTreeSet::new(),
            drop_rate: 0.0,
        }
    }

    pub fn dim(&self, name: &str) -> Option<f64> {
        DIM_NAMES.iter().position(|n| *n == name).map(|i| self.dims[i])
    }
}

#[derive(Debug, Default, Clone)]
struct WindowAccum {
    flows: HashSet<FlowKey>,
    new_flows: u64,
    remote_ips: HashSet<Ipv4Addr>,
    pkts_out: u64,
    pkts_in: u64,
    bytes_out: u64,
    bytes_in: u64,
    iat_sum_us: f64,
    iat_count: u64,
    tcp_pkts: u64,
    udp_pkts: u64,
    new_destinations: u64,
    endpoints: BTreeSet<Endpoint>,
    drops: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonitorConfig {
    pub window_len_s: u64,
    pub idle_timeout_s: u64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            window_len_s: 60,
            idle_timeout_s: 300,
        }
    }
}

#[derive(Debug, Default, Clone)]
struct DeviceWindows {
    open: BTreeMap<u64, WindowAccum>,
    next_emit: u64,
    destinations: HashSet<Ipv4Addr>,
}

#[derive(Debug, Clone, Default)]
pub struct FlowMonitor {
    config: MonitorConfig,
    flows: HashMap<FlowKey, FlowRecord>,
    devices: BTreeMap<MacAddr, DeviceWindows>,
    drops: BTreeMap<MacAddr, u64>,
    hostnames: HashMap<Ipv4Addr, String>,
    now: u64,
}

impl FlowMonitor {
    pub fn new(config: MonitorConfig) -> Self {
        Self {
            config,
            ..Default::default()
        }
    }

    /// Names used for endpoint sets instead of raw addresses.
    pub fn with_hostnames(mut self, names: impl IntoIterator<Item = (Ipv4Addr, String)>) -> Self {
        self.hostnames = names.into_iter().collect();
        self
    }

    pub fn config(&self) -> MonitorConfig {
        self.config
    }

    fn window_us(&self) -> u64 {
        self.config.window_len_s * 1_000_000
    }

    /// Latest timestamp observed.
    pub fn now(&self) -> u64 {
        self.now
    }

    /// Moves the clock forward without traffic.
    pub fn advance(&mut self, now: u64) {
        self.now = self.now.max(now);
    }

    pub fn ingest(&mut self, e: &PacketEvent, v: &Verdict) {
        self.advance(e.ts);
        let mac = e.device_mac();
        let window_idx = e.ts / self.window_us();
        let dev = self.devices.entry(mac).or_insert_with(|| DeviceWindows {
            next_emit: window_idx,
            ..Default::default()
        });
        let accum = dev.open.entry(window_idx).or_default();
        if !v.is_accept() {
            *self.drops.entry(mac).or_default() += 1;
            accum.drops += 1;
            return;
        }

        let key = FlowKey::of(e);
        let mut gap = None;
        match self.flows.get_mut(&key) {
            Some(rec) => {
                let g = e.ts.saturating_sub(rec.last_ts) as f64;
                rec.inter_arrival.push(g);
                rec.packets += 1;
                rec.bytes += e.length as u64;
                rec.last_ts = rec.last_ts.max(e.ts);
                rec.count_flags(e.tcp_flags);
                gap = Some(g);
            }
            None => {
                self.flows.insert(key.clone(), FlowRecord::start(e));
                accum.new_flows += 1;
            }
        }
        if let Some(g) = gap {
            accum.iat_sum_us += g;
            accum.iat_count += 1;
        }
        let remote = e.remote_ip();
        accum.remote_ips.insert(remote);
        if dev.destinations.insert(remote) {
            accum.new_destinations += 1;
        }
        match e.direction {
            Direction::FromDevice => {
                accum.pkts_out += 1;
                accum.bytes_out += e.length as u64;
                let host = self
                    .hostnames
                    .get(&remote)
                    .cloned()
                    .unwrap_or_else(|| format!("{remote}/32"));
                accum.endpoints.insert(Endpoint {
                    host,
                    protocol: e.protocol,
                    port: e.remote_port(),
                });
            }
            Direction::ToDevice => {
                accum.pkts_in += 1;
                accum.bytes_in += e.length as u64;
            }
        }
        match e.protocol {
            Protocol::Tcp => accum.tcp_pkts += 1,
            Protocol::Udp => accum.udp_pkts += 1,
            Protocol::Icmp => {}
        }
        accum.flows.insert(key);
    }

    fn features_of(&self, mac: MacAddr, idx: u64, accum: Option<&WindowAccum>) -> FeatureVector {
        let len = self.config.window_len_s;
        let mut fv = FeatureVector::zero(mac, idx * len, len);
        let Some(a) = accum else {
            return fv;
        };
        let secs = len as f64;
        let pkts = a.pkts_out + a.pkts_in;
        let bytes = a.bytes_out + a.bytes_in;
        let share = |n: u64| if pkts == 0 { 0.0 } else { n as f64 / pkts as f64 };
        fv.dims = [
            a.flows.len() as f64,
            a.new_flows as f64,
            a.remote_ips.len() as f64,
            a.pkts_out as f64 / secs,
            a.pkts_in as f64 / secs,
            a.bytes_out as f64 / secs,
            a.bytes_in as f64 / secs,
            if pkts == 0 { 0.0 } else { bytes as f64 / pkts as f64 },
            if a.iat_count == 0 {
                0.0
            } else {
                a.iat_sum_us / a.iat_count as f64 / 1000.0
            },
            share(a.tcp_pkts),
            share(a.udp_pkts),
            a.new_destinations as f64 / secs,
        ];
        fv.endpoints = a.endpoints.clone();
        fv.drop_rate = a.drops as f64 / secs;
        fv
    }

    /// Features of one closed window. A window without traffic is all zeros.
    pub fn window_features(&self, mac: MacAddr, window_start_s: u64) -> Result<FeatureVector, FlowError> {
        let len = self.config.window_len_s;
        if !window_start_s.is_multiple_of(len) {
            return Err(FlowError::Misaligned {
                start_s: window_start_s,
                len_s: len,
            });
        }
        if self.now < (window_start_s + len) * 1_000_000 {
            return Err(FlowError::WindowNotClosed {
                start_s: window_start_s,
            });
        }
        let idx = window_start_s / len;
        let accum = self.devices.get(&mac).and_then(|d| d.open.get(&idx));
        Ok(self.features_of(mac, idx, accum))
    }

    /// Emits every window that closed by `now` for every device seen so far,
    /// in (window, device) order, and forgets their accumulators.
    pub fn drain_closed(&mut self, now: u64) -> Vec<FeatureVector> {
        self.advance(now);
        let closed_before = self.now / self.window_us();
        let mut out = Vec::new();
        let macs: Vec<MacAddr> = self.devices.keys().copied().collect();
        let first = self
            .devices
            .values()
            .map(|d| d.next_emit)
            .min()
            .unwrap_or(closed_before);
        for idx in first..closed_before {
            for mac in &macs {
                let dev = &self.devices[mac];
                if idx < dev.next_emit {
                    continue;
                }
                out.push(self.features_of(*mac, idx, dev.open.get(&idx)));
            }
        }
        for dev in self.devices.values_mut() {
            dev.next_emit = dev.next_emit.max(closed_before);
            dev.open.retain(|idx, _| *idx >= closed_before);
        }
        out
    }

    /// Drops flows idle longer than `idle_timeout_us`. Window features already
    /// accumulated are unaffected.
    pub fn evict_idle(&mut self, now: u64, idle_timeout_us: u64) -> usize {
        let before = self.flows.len();
        let cutoff = now.saturating_sub(idle_timeout_us);
        self.flows.retain(|_, r| r.last_ts >= cutoff);
        before - self.flows.len()
    }

    /// Eviction with the configured idle timeout.
    pub fn evict_expired(&mut self, now: u64) -> usize {
        self.evict_idle(now, self.config.idle_timeout_s * 1_000_000)
    }

    pub fn flow(&self, key: &FlowKey) -> Option<&FlowRecord> {
        self.flows.get(key)
    }

    pub fn flow_count(&self) -> usize {
        self.flows.len()
    }

    /// Flows sorted by key.
    pub fn flows(&self) -> Vec<&FlowRecord> {
        let mut v: Vec<_> = self.flows.values().collect();
        v.sort_by(|a, b| a.key.cmp(&b.key));
        v
    }

    pub fn drops(&self, mac: MacAddr) -> u64 {
        self.drops.get(&mac).copied().unwrap_or(0)
    }

    /// (packets, bytes) summed over the device's live flows.
    pub fn device_totals(&self, mac: MacAddr) -> (u64, u64) {
        self.flows
            .values()
            .filter(|r| r.key.device_mac == mac)
            .fold((0, 0), |(p, b), r| (p + r.packets, b + r.bytes))
    }

    /// Writes `flows.jsonl`, one [`FlowRecord`] per line in key order.
    pub fn export_flows<W: Write>(&self, mut sink: W) -> Result<usize, FlowError> {
        let flows = self.flows();
        for r in &flows {
            serde_json::to_writer(&mut sink, r).map_err(|e| FlowError::Json { line: 0, source: e })?;
            sink.write_all(b"\n")?;
        }
        Ok(flows.len())
    }
}

pub fn import_flows<R: BufRead>(input: R) -> Result<Vec<FlowRecord>, FlowError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| FlowError::Json { line: i + 1, source: e })?);
    }
    Ok(out)
}

pub fn write_features_jsonl<W: Write>(features: &[FeatureVector], mut sink: W) -> Result<usize, FlowError> {
    for f in features {
        serde_json::to_writer(&mut sink, f).map_err(|e| FlowError::Json { line: 0, source: e })?;
        sink.write_all(b"\n")?;
    }
    Ok(features.len())
}
