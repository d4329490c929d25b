//! Test-only reference implementations and generators.
//!
//! The oracle walks MUD ACEs directly and resolves endpoint abstractions per
//! packet, without going through the compiler.
#![allow(dead_code)]

pub mod control_model;

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use dada_core::compiler::{Decision, DeviceRecord, NetworkContext, PacketHeader, Provenance, RuleAction};
use dada_core::datapath::PacketEvent;
use dada_core::mud::{AccessControlList, Ace, AceAction, AddressFamily, MatchCriteria, MudProfile, RateSpec};
use dada_core::{Direction, MacAddr, PortRange, Protocol};
use ipnet::Ipv4Net;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Accept { rate: Option<RateSpec>, at: Provenance },
    Drop { at: Provenance },
    DefaultDrop,
}

impl Outcome {
    pub fn is_accept(&self) -> bool {
        matches!(self, Outcome::Accept { .. })
    }
}

impl From<Decision> for Outcome {
    fn from(d: Decision) -> Self {
        match d {
            Decision::DefaultDrop => Outcome::DefaultDrop,
            Decision::Rule { action, provenance, .. } => match action {
                RuleAction::Drop => Outcome::Drop { at: provenance },
                RuleAction::Accept => Outcome::Accept {
                    rate: None,
                    at: provenance,
                },
                RuleAction::AcceptRateLimited { rate } => Outcome::Accept {
                    rate: Some(rate),
                    at: provenance,
                },
            },
        }
    }
}

fn other_device_has(
    ctx: &NetworkContext,
    me: &DeviceRecord,
    ip: Ipv4Addr,
    pred: impl Fn(&DeviceRecord) -> bool,
) -> bool {
    ctx.devices.iter().any(|d| d.mac != me.mac && d.ipv4 == ip && pred(d))
}

fn remote_matches(m: &MatchCriteria, ctx: &NetworkContext, me: &DeviceRecord, ip: Ipv4Addr) -> bool {
    if let Some(name) = &m.dns_name {
        return ctx.dns_bindings.get(name).is_some_and(|s| s.contains(&ip));
    }
    if let Some(class) = &m.controller_class {
        return me.controllers.get(class).is_some_and(|s| s.contains(&ip));
    }
    if m.my_controller {
        return me
            .mud_url
            .as_ref()
            .and_then(|u| ctx.my_controller_bindings.get(u))
            .is_some_and(|s| s.contains(&ip));
    }
    if m.local_networks {
        return ctx.local_subnets.iter().any(|n| n.contains(&ip));
    }
    if m.same_manufacturer {
        return !me.manufacturer.is_empty() && other_device_has(ctx, me, ip, |d| d.manufacturer == me.manufacturer);
    }
    if let Some(a) = &m.manufacturer {
        return other_device_has(ctx, me, ip, |d| &d.manufacturer == a);
    }
    if let Some(model) = &m.model {
        return other_device_has(ctx, me, ip, |d| &d.model == model);
    }
    true
}

fn ace_matches(ace: &Ace, ctx: &NetworkContext, me: &DeviceRecord, pkt: &PacketHeader) -> bool {
    let m = &ace.matches;
    if m.protocol.is_some_and(|p| p != pkt.protocol) {
        return false;
    }
    // MUD ports are written from the packet's point of view.
    let (src, dst) = match pkt.direction {
        Direction::FromDevice => (pkt.local_port, pkt.remote_port),
        Direction::ToDevice => (pkt.remote_port, pkt.local_port),
    };
    if m.src_port.is_some_and(|r| !(r.low <= src && src <= r.high)) {
        return false;
    }
    if m.dst_port.is_some_and(|r| !(r.low <= dst && dst <= r.high)) {
        return false;
    }
    if m.direction_initiated.is_some_and(|d| d != pkt.initiator) {
        return false;
    }
    remote_matches(m, ctx, me, pkt.remote_ip)
}

/// Interprets `p` for one packet: policy ACLs in order, first matching ACE wins.
pub fn oracle_decide(p: &MudProfile, ctx: &NetworkContext, me: &DeviceRecord, pkt: &PacketHeader) -> Outcome {
    let names = match pkt.direction {
        Direction::FromDevice => &p.from_device_acls,
        Direction::ToDevice => &p.to_device_acls,
    };
    for name in names {
        let Some(acl) = p.acls.iter().find(|a| &a.name == name) else {
            continue;
        };
        for ace in &acl.aces {
            if ace_matches(ace, ctx, me, pkt) {
                let at = Provenance::new(&acl.name, &ace.name);
                return match ace.action {
                    AceAction::Accept => Outcome::Accept {
                        rate: ace.rate_limit,
                        at,
                    },
                    AceAction::Drop => Outcome::Drop { at },
                };
            }
        }
    }
    Outcome::DefaultDrop
}

/// Mean and sample variance, computed in two passes.
pub fn two_pass(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, None);
    }
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, Some(ss / (n - 1.0)))
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    if got == want {
        0.0
    } else {
        (got - want).abs() / want.abs().max(f64::MIN_POSITIVE)
    }
}

/// Largest excess of `amount[i..=j] - rate*(t_j - t_i)/1e6` over `burst`,
/// across every interval of `accepted` (timestamps in µs, sorted).
/// A value <= 0 means the bound holds everywhere. Exact, O(n).
pub fn max_bucket_excess(accepted: &[(u64, u64)], rate: u64, burst: u64) -> i128 {
    let rate = rate as i128;
    let mut prefix: i128 = 0;
    let mut best_start = i128::MIN;
    let mut worst = i128::MIN;
    for &(ts, amount) in accepted {
        // start term for interval beginning here: rate*t_i - 1e6*S_{i-1}
        best_start = best_start.max(rate * ts as i128 - 1_000_000 * prefix);
        prefix += amount as i128;
        let excess = 1_000_000 * prefix - rate * ts as i128 + best_start - 1_000_000 * burst as i128;
        worst = worst.max(excess);
    }
    worst
}

pub const SUBNET: Ipv4Net = Ipv4Net::new_assert(Ipv4Addr::new(192, 168, 1, 0), 24);
pub const GATEWAY: Ipv4Addr = Ipv4Addr::new(192, 168, 1, 1);

const MANUFACTURERS: [&str; 3] = ["acme.example", "globex.example", ""];
const MODELS: [&str; 3] = ["cam-1", "cam-2", "plug"];
const DNS_NAMES: [&str; 4] = [
    "cloud.acme.example",
    "ntp.example.org",
    "cdn.example.net",
    "gone.example",
];
const CONTROLLER_CLASSES: [&str; 2] = ["urn:ctl:hub", "urn:ctl:missing"];
const PORTS: [u16; 7] = [53, 80, 123, 443, 1883, 8883, 5000];

/// A generated home network plus one MUD profile for the device under test.
#[derive(Debug, Clone)]
pub struct World {
    pub ctx: NetworkContext,
    pub device: DeviceRecord,
    pub profile: MudProfile,
    pub ip_pool: Vec<Ipv4Addr>,
}

fn public_ip(rng: &mut ChaCha8Rng) -> Ipv4Addr {
    Ipv4Addr::new(rng.gen_range(11..200), rng.gen(), rng.gen(), rng.gen_range(1..255))
}

pub fn gen_context(rng: &mut ChaCha8Rng) -> NetworkContext {
    let n = rng.gen_range(2..7);
    let mut devices = Vec::new();
    for i in 0..n {
        let mut d = DeviceRecord::new(
            MacAddr::new([0x02, 0, 0, 0, 1, i as u8 + 1]),
            Ipv4Addr::new(192, 168, 1, 10 + i as u8),
        );
        d.manufacturer = MANUFACTURERS.choose(rng).unwrap().to_string();
        d.model = MODELS.choose(rng).unwrap().to_string();
        if rng.gen_bool(0.7) {
            d.mud_url = Some(format!("https://{}/{}.json", d.manufacturer, d.model));
        }
        if rng.gen_bool(0.5) {
            let ctl = BTreeSet::from([Ipv4Addr::new(192, 168, 1, rng.gen_range(100..110))]);
            d.controllers.insert(CONTROLLER_CLASSES[0].to_string(), ctl);
        }
        devices.push(d);
    }
    let mut dns_bindings = BTreeMap::new();
    for name in &DNS_NAMES[..3] {
        let k = rng.gen_range(0..3);
        if k > 0 {
            dns_bindings.insert(name.to_string(), (0..k).map(|_| public_ip(rng)).collect());
        }
    }
    let mut my_controller_bindings = BTreeMap::new();
    for d in &devices {
        if let Some(url) = &d.mud_url {
            if rng.gen_bool(0.5) {
                my_controller_bindings.insert(url.clone(), BTreeSet::from([Ipv4Addr::new(192, 168, 1, 200)]));
            }
        }
    }
    let mut local_subnets = vec![SUBNET];
    if rng.gen_bool(0.3) {
        local_subnets.push("10.9.0.0/24".parse().unwrap());
    }
    NetworkContext {
        devices,
        dns_bindings,
        local_subnets,
        gateway_ip: GATEWAY,
        my_controller_bindings,
        resources: BTreeMap::new(),
    }
}

fn gen_port_range(rng: &mut ChaCha8Rng) -> PortRange {
    if rng.gen_bool(0.8) {
        PortRange::single(*PORTS.choose(rng).unwrap())
    } else {
        let low = rng.gen_range(1000..3000);
        PortRange::new(low, low + rng.gen_range(0..500))
    }
}

pub fn gen_matches(rng: &mut ChaCha8Rng, ctx: &NetworkContext) -> MatchCriteria {
    let mut m = MatchCriteria::default();
    match rng.gen_range(0..9) {
        0 | 1 => {}
        2 => m.dns_name = Some(DNS_NAMES.choose(rng).unwrap().to_string()),
        3 => m.local_networks = true,
        4 => m.same_manufacturer = true,
        5 => m.my_controller = true,
        6 => m.controller_class = Some(CONTROLLER_CLASSES.choose(rng).unwrap().to_string()),
        7 => m.manufacturer = Some(ctx.devices.choose(rng).unwrap().manufacturer.clone()),
        _ => m.model = Some(MODELS.choose(rng).unwrap().to_string()),
    }
    m.protocol = match rng.gen_range(0..4) {
        0 => None,
        1 => Some(Protocol::Tcp),
        2 => Some(Protocol::Udp),
        _ => Some(Protocol::Icmp),
    };
    if matches!(m.protocol, Some(Protocol::Tcp | Protocol::Udp)) {
        if rng.gen_bool(0.6) {
            m.dst_port = Some(gen_port_range(rng));
        }
        if rng.gen_bool(0.2) {
            m.src_port = Some(gen_port_range(rng));
        }
    }
    if m.protocol == Some(Protocol::Tcp) && rng.gen_bool(0.3) {
        m.direction_initiated = Some(if rng.gen() {
            Direction::FromDevice
        } else {
            Direction::ToDevice
        });
    }
    m
}

pub fn gen_profile(rng: &mut ChaCha8Rng, ctx: &NetworkContext, with_rates: bool) -> MudProfile {
    let mut p = MudProfile::empty("https://acme.example/generated.json");
    p.system_info = "generated".into();
    for (prefix, policy) in [("from", Direction::FromDevice), ("to", Direction::ToDevice)] {
        for a in 0..rng.gen_range(0..3) {
            let name = format!("{prefix}-{a}");
            let aces = (0..rng.gen_range(1..6))
                .map(|i| {
                    let action = if rng.gen_bool(0.7) {
                        AceAction::Accept
                    } else {
                        AceAction::Drop
                    };
                    let rate_limit = (with_rates && action == AceAction::Accept && rng.gen_bool(0.3))
                        .then(|| RateSpec::bytes(rng.gen_range(1_000..100_000), rng.gen_range(0..20_000)));
                    Ace {
                        name: format!("{name}-ace{i}"),
                        matches: gen_matches(rng, ctx),
                        action,
                        rate_limit,
                    }
                })
                .collect();
            p.acls.push(AccessControlList {
                name: name.clone(),
                address_family: AddressFamily::Ipv4,
                aces,
            });
            match policy {
                Direction::FromDevice => p.from_device_acls.push(name),
                Direction::ToDevice => p.to_device_acls.push(name),
            }
        }
    }
    p
}

/// Every address the context mentions plus a few unrelated ones.
pub fn ip_pool(ctx: &NetworkContext, rng: &mut ChaCha8Rng) -> Vec<Ipv4Addr> {
    let mut pool: BTreeSet<Ipv4Addr> = ctx.devices.iter().map(|d| d.ipv4).collect();
    pool.extend(ctx.dns_bindings.values().flatten());
    pool.extend(ctx.my_controller_bindings.values().flatten());
    pool.extend(ctx.devices.iter().flat_map(|d| d.controllers.values().flatten()));
    pool.insert(ctx.gateway_ip);
    pool.insert(Ipv4Addr::new(10, 9, 0, 7));
    for _ in 0..4 {
        pool.insert(public_ip(rng));
    }
    pool.into_iter().collect()
}

pub fn gen_world(seed: u64, with_rates: bool) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ctx = gen_context(&mut rng);
    let device = ctx.devices[0].clone();
    let profile = gen_profile(&mut rng, &ctx, with_rates);
    let ip_pool = ip_pool(&ctx, &mut rng);
    World {
        ctx,
        device,
        profile,
        ip_pool,
    }
}

fn gen_port(rng: &mut ChaCha8Rng) -> u16 {
    match rng.gen_range(0..3) {
        0 => *PORTS.choose(rng).unwrap(),
        1 => rng.gen_range(1000..3500),
        _ => rng.gen(),
    }
}

fn gen_protocol(rng: &mut ChaCha8Rng) -> Protocol {
    *[Protocol::Tcp, Protocol::Udp, Protocol::Icmp].choose(rng).unwrap()
}

pub fn gen_header(rng: &mut ChaCha8Rng, w: &World) -> PacketHeader {
    let protocol = gen_protocol(rng);
    let (remote_port, local_port) = if protocol == Protocol::Icmp {
        (0, 0)
    } else {
        (gen_port(rng), gen_port(rng))
    };
    PacketHeader {
        device_mac: w.device.mac,
        direction: if rng.gen() {
            Direction::FromDevice
        } else {
            Direction::ToDevice
        },
        protocol,
        remote_ip: *w.ip_pool.choose(rng).unwrap(),
        remote_port,
        local_port,
        initiator: if rng.gen() {
            Direction::FromDevice
        } else {
            Direction::ToDevice
        },
    }
}

pub const REMOTE_MAC: MacAddr = MacAddr::new([0x02, 0, 0, 0, 0, 0xfe]);

/// Packet event carrying `h`, with the remote on `REMOTE_MAC`.
pub fn event_for(h: &PacketHeader, device_ip: Ipv4Addr, ts: u64, length: u32) -> PacketEvent {
    let (src_mac, dst_mac, src_ip, dst_ip, src_port, dst_port) = match h.direction {
        Direction::FromDevice => (
            h.device_mac,
            REMOTE_MAC,
            device_ip,
            h.remote_ip,
            h.local_port,
            h.remote_port,
        ),
        Direction::ToDevice => (
            REMOTE_MAC,
            h.device_mac,
            h.remote_ip,
            device_ip,
            h.remote_port,
            h.local_port,
        ),
    };
    PacketEvent {
        ts,
        src_mac,
        dst_mac,
        src_ip,
        dst_ip,
        protocol: h.protocol,
        src_port,
        dst_port,
        length,
        direction: h.direction,
        actuation_class: None,
        tcp_flags: 0,
    }
}
