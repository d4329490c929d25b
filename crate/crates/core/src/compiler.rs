//! MUD policy compilation.
//!
//! A [`MudProfile`] names endpoints abstractly (`dns-name`, `my-controller`,
//! `same-manufacturer`, ...). [`compile`] resolves those names against a
//! concrete [`NetworkContext`] and emits an ordered, default-deny [`RuleSet`]
//! with one [`ConcreteRule`] per resolved endpoint of each ACE. [`lookup`] is
//! the stateless first-match interpreter over a rule set.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, BufRead, Write};
use std::net::Ipv4Addr;

use ipnet::Ipv4Net;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mud::{validate_profile, Abstraction, AceAction, MatchCriteria, MudProfile, RateSpec, Violation};
use crate::net::{Direction, MacAddr, PortRange, Protocol};

#[derive(Debug, Error)]
pub enum CompileError {
    #[error("device {0} is not part of the network context")]
    ContextMismatch(MacAddr),
    #[error("rule set belongs to {expected}, packet/rule set is for {found}")]
    DeviceMismatch { expected: MacAddr, found: MacAddr },
    #[error("profile is invalid: {0:?}")]
    InvalidProfile(Vec<Violation>),
    #[error("invalid network context: {0}")]
    InvalidContext(String),
    #[error("rule export: {0}")]
    Io(#[from] io::Error),
    #[error("rule export line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceRecord {
    pub mac: MacAddr,
    pub ipv4: Ipv4Addr,
    /// Manufacturer authority, e.g. `example.com`.
    #[serde(default)]
    pub manufacturer: String,
    #[serde(default)]
    pub model: String,
    #[serde(default)]
    pub mud_url: Option<String>,
    /// Controller class URI to controller addresses for this device.
    #[serde(default)]
    pub controllers: BTreeMap<String, BTreeSet<Ipv4Addr>>,
    #[serde(default)]
    pub label: String,
    /// ACE names dropped from the unprivileged rule-set variant.
    #[serde(default)]
    pub privileged_only: BTreeSet<String>,
}

impl DeviceRecord {
    pub fn new(mac: MacAddr, ipv4: Ipv4Addr) -> Self {
        Self {
            mac,
            ipv4,
            manufacturer: String::new(),
            model: String::new(),
            mud_url: None,
            controllers: BTreeMap::new(),
            label: String::new(),
            privileged_only: BTreeSet::new(),
        }
    }
}

/// The concrete home network that abstract MUD names resolve against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkContext {
    pub devices: Vec<DeviceRecord>,
    #[serde(default)]
    pub dns_bindings: BTreeMap<String, BTreeSet<Ipv4Addr>>,
    pub local_subnets: Vec<Ipv4Net>,
    pub gateway_ip: Ipv4Addr,
    #[serde(default)]
    pub my_controller_bindings: BTreeMap<String, BTreeSet<Ipv4Addr>>,
    /// Named resources (printer, NAS, ...) for access-control actions.
    #[serde(default)]
    pub resources: BTreeMap<String, Vec<Ipv4Net>>,
}

impl NetworkContext {
    pub fn from_json(s: &str) -> Result<Self, CompileError> {
        let ctx: NetworkContext = serde_json::from_str(s).map_err(|e| CompileError::InvalidContext(e.to_string()))?;
        ctx.validate()?;
        Ok(ctx)
    }

    pub fn validate(&self) -> Result<(), CompileError> {
        let mut macs = BTreeSet::new();
        for d in &self.devices {
            if !macs.insert(d.mac) {
                return Err(CompileError::InvalidContext(format!("duplicate device MAC {}", d.mac)));
            }
            if !self.local_subnets.iter().any(|n| n.contains(&d.ipv4)) {
                return Err(CompileError::InvalidContext(format!(
                    "device {} address {} is outside the local subnets",
                    d.mac, d.ipv4
                )));
            }
        }
        Ok(())
    }

    pub fn device(&self, mac: MacAddr) -> Option<&DeviceRecord> {
        self.devices.iter().find(|d| d.mac == mac)
    }

    pub fn device_by_ip(&self, ip: Ipv4Addr) -> Option<&DeviceRecord> {
        self.devices.iter().find(|d| d.ipv4 == ip)
    }

    pub fn is_local(&self, ip: Ipv4Addr) -> bool {
        self.local_subnets.iter().any(|n| n.contains(&ip))
    }

    /// Reverse DNS table built from the static bindings.
    pub fn hostnames(&self) -> BTreeMap<Ipv4Addr, String> {
        let mut out = BTreeMap::new();
        for (name, ips) in &self.dns_bindings {
            for ip in ips {
                out.entry(*ip).or_insert_with(|| name.clone());
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub acl: String,
    pub ace: String,
}

impl Provenance {
    pub fn new(acl: impl Into<String>, ace: impl Into<String>) -> Self {
        Self {
            acl: acl.into(),
            ace: ace.into(),
        }
    }
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.acl, self.ace)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RuleAction {
    Accept,
    AcceptRateLimited { rate: RateSpec },
    Drop,
}

impl RuleAction {
    pub fn is_accept(&self) -> bool {
        !matches!(self, RuleAction::Drop)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConcreteRule {
    pub priority: u32,
    pub direction: Direction,
    pub remote: Ipv4Net,
    pub protocol: Option<Protocol>,
    pub remote_port: Option<PortRange>,
    pub local_port: Option<PortRange>,
    /// `direction-initiated`: which side must have opened the flow.
    pub initiated_by: Option<Direction>,
    pub action: RuleAction,
    pub provenance: Provenance,
    #[serde(default)]
    pub privileged_only: bool,
}

impl ConcreteRule {
    pub fn matches(&self, pkt: &PacketHeader) -> bool {
        self.direction == pkt.direction
            && self.remote.contains(&pkt.remote_ip)
            && self.protocol.is_none_or(|p| p == pkt.protocol)
            && self.remote_port.is_none_or(|r| r.contains(pkt.remote_port))
            && self.local_port.is_none_or(|r| r.contains(pkt.local_port))
            && self.initiated_by.is_none_or(|d| d == pkt.initiator)
    }

    /// Identity used for diffs: everything except the priority.
    fn canonical_key(&self) -> String {
        let mut r = self.clone();
        r.priority = 0;
        serde_json::to_string(&r).expect("rule serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DefaultVerdict {
    #[default]
    Drop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSet {
    pub device_mac: MacAddr,
    pub rules: Vec<ConcreteRule>,
    pub default_verdict: DefaultVerdict,
    pub generation: u64,
}

impl RuleSet {
    pub fn new(device_mac: MacAddr, rules: Vec<ConcreteRule>) -> Self {
        let mut rules = rules;
        rules.sort_by_key(|r| r.priority);
        Self {
            device_mac,
            rules,
            default_verdict: DefaultVerdict::Drop,
            generation: 1,
        }
    }

    /// The variant used while the device is on the unprivileged network.
    pub fn unprivileged(&self) -> RuleSet {
        let mut out = self.clone();
        out.rules.retain(|r| !r.privileged_only);
        out
    }

    pub fn canonical_keys(&self) -> BTreeSet<String> {
        self.rules.iter().map(ConcreteRule::canonical_key).collect()
    }

    /// Canonical byte encoding: rules in priority order, generation zeroed.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut rs = self.clone();
        rs.generation = 0;
        rs.rules.sort_by_key(|r| r.priority);
        serde_json::to_vec(&rs).expect("rule set serializes")
    }
}

/// Device-oriented view of a packet used for rule matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PacketHeader {
    pub device_mac: MacAddr,
    pub direction: Direction,
    pub protocol: Protocol,
    pub remote_ip: Ipv4Addr,
    pub remote_port: u16,
    pub local_port: u16,
    /// Side that opened the flow. The stateless view uses `direction`.
    pub initiator: Direction,
}

/// Outcome of [`lookup`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Rule {
        action: RuleAction,
        priority: u32,
        provenance: Provenance,
    },
    DefaultDrop,
}

impl Decision {
    pub fn is_accept(&self) -> bool {
        matches!(self, Decision::Rule { action, .. } if action.is_accept())
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        match self {
            Decision::Rule { provenance, .. } => Some(provenance),
            Decision::DefaultDrop => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WarningKind {
    UnresolvedName { name: String },
    NoPeers,
    NoController { class: String },
    NoMyController { mud_url: Option<String> },
    NoManufacturerMatch { authority: String },
    NoModelMatch { model: String },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Warning {
    pub provenance: Provenance,
    #[serde(flatten)]
    pub kind: WarningKind,
}

fn host(ip: Ipv4Addr) -> Ipv4Net {
    Ipv4Net::new(ip, 32).expect("/32 is valid")
}

/// Resolves the endpoint abstraction of `m` for `device`.
///
/// Criteria without an abstraction match any remote (`0.0.0.0/0`).
/// Unresolvable names yield an empty set and a warning.
pub fn resolve_abstraction(
    m: &MatchCriteria,
    ctx: &NetworkContext,
    device: &DeviceRecord,
) -> (BTreeSet<Ipv4Net>, Vec<WarningKind>) {
    let ips = |set: Option<&BTreeSet<Ipv4Addr>>| -> BTreeSet<Ipv4Net> {
        set.map(|s| s.iter().copied().map(host).collect()).unwrap_or_default()
    };
    let devices_where = |pred: &dyn Fn(&DeviceRecord) -> bool| -> BTreeSet<Ipv4Net> {
        ctx.devices
            .iter()
            .filter(|d| d.mac != device.mac && pred(d))
            .map(|d| host(d.ipv4))
            .collect()
    };

    let (set, warning) = match m.abstraction() {
        None => (BTreeSet::from([Ipv4Net::default()]), None),
        Some(Abstraction::DnsName(name)) => (
            ips(ctx.dns_bindings.get(name)),
            Some(WarningKind::UnresolvedName { name: name.to_string() }),
        ),
        Some(Abstraction::LocalNetworks) => (ctx.local_subnets.iter().copied().collect(), None),
        Some(Abstraction::SameManufacturer) => (
            if device.manufacturer.is_empty() {
                BTreeSet::new()
            } else {
                devices_where(&|d| d.manufacturer == device.manufacturer)
            },
            Some(WarningKind::NoPeers),
        ),
        Some(Abstraction::MyController) => (
            ips(device.mud_url.as_ref().and_then(|u| ctx.my_controller_bindings.get(u))),
            Some(WarningKind::NoMyController {
                mud_url: device.mud_url.clone(),
            }),
        ),
        Some(Abstraction::Controller(class)) => (
            ips(device.controllers.get(class)),
            Some(WarningKind::NoController {
                class: class.to_string(),
            }),
        ),
        Some(Abstraction::Manufacturer(authority)) => (
            devices_where(&|d| d.manufacturer == authority),
            Some(WarningKind::NoManufacturerMatch {
                authority: authority.to_string(),
            }),
        ),
        Some(Abstraction::Model(model)) => (
            devices_where(&|d| d.model == model),
            Some(WarningKind::NoModelMatch {
                model: model.to_string(),
            }),
        ),
    };
    let warnings = if set.is_empty() {
        warning.into_iter().collect()
    } else {
        Vec::new()
    };
    (set, warnings)
}

/// Compiles `p` for `device` into a default-deny rule set.
pub fn compile(
    p: &MudProfile,
    ctx: &NetworkContext,
    device: &DeviceRecord,
) -> Result<(RuleSet, Vec<Warning>), CompileError> {
    if ctx.device(device.mac).is_none() {
        return Err(CompileError::ContextMismatch(device.mac));
    }
    let violations = validate_profile(p);
    if !violations.is_empty() {
        return Err(CompileError::InvalidProfile(violations));
    }

    let mut rules = Vec::new();
    let mut warnings = Vec::new();
    let mut priority = 0u32;
    for direction in [Direction::FromDevice, Direction::ToDevice] {
        for acl in p.policy_acls(direction) {
            for ace in &acl.aces {
                let provenance = Provenance::new(&acl.name, &ace.name);
                let (endpoints, ws) = resolve_abstraction(&ace.matches, ctx, device);
                warnings.extend(ws.into_iter().map(|kind| Warning {
                    provenance: provenance.clone(),
                    kind,
                }));
                let m = &ace.matches;
                let (remote_port, local_port) = match direction {
                    Direction::FromDevice => (m.dst_port, m.src_port),
                    Direction::ToDevice => (m.src_port, m.dst_port),
                };
                let action = match (ace.action, ace.rate_limit) {
                    (AceAction::Drop, _) => RuleAction::Drop,
                    (AceAction::Accept, Some(rate)) => RuleAction::AcceptRateLimited { rate },
                    (AceAction::Accept, None) => RuleAction::Accept,
                };
                for remote in endpoints {
                    rules.push(ConcreteRule {
                        priority,
                        direction,
                        remote,
                        protocol: m.protocol,
                        remote_port,
                        local_port,
                        initiated_by: m.direction_initiated,
                        action,
                        provenance: provenance.clone(),
                        privileged_only: device.privileged_only.contains(&ace.name),
                    });
                    priority += 1;
                }
            }
        }
    }
    Ok((RuleSet::new(device.mac, rules), warnings))
}

/// First matching rule by priority wins; no match is the default drop.
pub fn lookup(rs: &RuleSet, pkt: &PacketHeader) -> Result<Decision, CompileError> {
    if pkt.device_mac != rs.device_mac {
        return Err(CompileError::DeviceMismatch {
            expected: rs.device_mac,
            found: pkt.device_mac,
        });
    }
    Ok(first_match(&rs.rules, pkt))
}

pub(crate) fn first_match(rules: &[ConcreteRule], pkt: &PacketHeader) -> Decision {
    rules
        .iter()
        .find(|r| r.matches(pkt))
        .map(|r| Decision::Rule {
            action: r.action,
            priority: r.priority,
            provenance: r.provenance.clone(),
        })
        .unwrap_or(Decision::DefaultDrop)
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Delta {
    pub added: Vec<ConcreteRule>,
    pub removed: Vec<ConcreteRule>,
}

impl Delta {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty()
    }

    /// Applies the delta to `old` under set semantics over canonical rules.
    pub fn apply(&self, old: &RuleSet) -> BTreeSet<String> {
        let mut keys = old.canonical_keys();
        for r in &self.removed {
            keys.remove(&r.canonical_key());
        }
        for r in &self.added {
            keys.insert(r.canonical_key());
        }
        keys
    }
}

/// Rules added and removed between two generations of one device's rule set.
pub fn diff_rulesets(old: &RuleSet, new: &RuleSet) -> Result<Delta, CompileError> {
    if old.device_mac != new.device_mac {
        return Err(CompileError::DeviceMismatch {
            expected: old.device_mac,
            found: new.device_mac,
        });
    }
    let old_keys = old.canonical_keys();
    let new_keys = new.canonical_keys();
    let mut seen = BTreeSet::new();
    let added = new
        .rules
        .iter()
        .filter(|r| {
            let k = r.canonical_key();
            !old_keys.contains(&k) && seen.insert(k)
        })
        .cloned()
        .collect();
    let mut seen = BTreeSet::new();
    let removed = old
        .rules
        .iter()
        .filter(|r| {
            let k = r.canonical_key();
            !new_keys.contains(&k) && seen.insert(k)
        })
        .cloned()
        .collect();
    Ok(Delta { added, removed })
}

#[derive(Serialize, Deserialize)]
struct RuleLine {
    device_mac: MacAddr,
    generation: u64,
    #[serde(flatten)]
    rule: ConcreteRule,
}

/// Writes one JSON object per rule. The default drop is implicit.
pub fn write_rules_jsonl<W: Write>(rs: &RuleSet, mut out: W) -> Result<usize, CompileError> {
    for rule in &rs.rules {
        let line = RuleLine {
            device_mac: rs.device_mac,
            generation: rs.generation,
            rule: rule.clone(),
        };
        serde_json::to_writer(&mut out, &line).map_err(|e| CompileError::Json { line: 0, source: e })?;
        out.write_all(b"\n")?;
    }
    Ok(rs.rules.len())
}

/// Reads a rule export back. An empty export needs the owning device passed in.
pub fn read_rules_jsonl<R: BufRead>(input: R, device_mac: MacAddr) -> Result<RuleSet, CompileError> {
    let mut rules = Vec::new();
    let mut generation = 1;
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RuleLine =
            serde_json::from_str(&line).map_err(|e| CompileError::Json { line: i + 1, source: e })?;
        if parsed.device_mac != device_mac {
            return Err(CompileError::DeviceMismatch {
                expected: device_mac,
                found: parsed.device_mac,
            });
        }
        generation = parsed.generation;
        rules.push(parsed.rule);
    }
    let mut rs = RuleSet::new(device_mac, rules);
    rs.generation = generation;
    Ok(rs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mud::parse_mud;

    const CAMERA: &str = include_str!("../../../fixtures/mud/camera.mud.json");
    const CONTEXT: &str = include_str!("../../../fixtures/context.json");

    fn camera_mac() -> MacAddr {
        "02:00:00:00:00:10".parse().unwrap()
    }

    fn setup() -> (MudProfile, NetworkContext) {
        (parse_mud(CAMERA).unwrap(), NetworkContext::from_json(CONTEXT).unwrap())
    }

    fn out_pkt(proto: Protocol, ip: [u8; 4], port: u16) -> PacketHeader {
        PacketHeader {
            device_mac: camera_mac(),
            direction: Direction::FromDevice,
            protocol: proto,
            remote_ip: Ipv4Addr::from(ip),
            remote_port: port,
            local_port: 40000,
            initiator: Direction::FromDevice,
        }
    }

    #[test]
    fn local_networks_maps_to_subnets() {
        let (_, ctx) = setup();
        let m = MatchCriteria {
            local_networks: true,
            ..Default::default()
        };
        let (set, w) = resolve_abstraction(&m, &ctx, ctx.device(camera_mac()).unwrap());
        assert_eq!(set, BTreeSet::from(["192.168.1.0/24".parse().unwrap()]));
        assert!(w.is_empty());
    }

    #[test]
    fn dns_name_resolves_to_bindings() {
        let (_, ctx) = setup();
        let m = MatchCriteria {
            dns_name: Some("cloud.example.com".into()),
            ..Default::default()
        };
        let (set, _) = resolve_abstraction(&m, &ctx, ctx.device(camera_mac()).unwrap());
        let expected: BTreeSet<Ipv4Net> = ["203.0.113.10/32", "203.0.113.11/32"]
            .iter()
            .map(|s| s.parse().unwrap())
            .collect();
        assert_eq!(set, expected);
    }

    #[test]
    fn same_manufacturer_without_peers_warns() {
        let (_, mut ctx) = setup();
        ctx.devices.retain(|d| d.mac == camera_mac());
        let m = MatchCriteria {
            same_manufacturer: true,
            ..Default::default()
        };
        let (set, w) = resolve_abstraction(&m, &ctx, ctx.device(camera_mac()).unwrap());
        assert!(set.is_empty());
        assert_eq!(w, vec![WarningKind::NoPeers]);
    }

    #[test]
    fn camera_compiles_to_four_accept_rules() {
        let (p, ctx) = setup();
        let (rs, warnings) = compile(&p, &ctx, ctx.device(camera_mac()).unwrap()).unwrap();
        assert!(warnings.is_empty(), "{warnings:?}");
        assert_eq!(rs.rules.len(), 4);
        assert!(rs.rules.iter().all(|r| r.action.is_accept()));
        assert_eq!(rs.default_verdict, DefaultVerdict::Drop);
        let prios: Vec<u32> = rs.rules.iter().map(|r| r.priority).collect();
        assert_eq!(prios, vec![0, 1, 2, 3]);
    }

    #[test]
    fn empty_profile_is_pure_default_deny() {
        let (_, ctx) = setup();
        let p = MudProfile::empty("https://example.com/empty");
        let (rs, _) = compile(&p, &ctx, ctx.device(camera_mac()).unwrap()).unwrap();
        assert!(rs.rules.is_empty());
        assert_eq!(
            lookup(&rs, &out_pkt(Protocol::Tcp, [1, 1, 1, 1], 80)).unwrap(),
            Decision::DefaultDrop
        );
    }

    #[test]
    fn unresolvable_dns_name_omits_rule() {
        let (p, mut ctx) = setup();
        ctx.dns_bindings.clear();
        let (rs, warnings) = compile(&p, &ctx, ctx.device(camera_mac()).unwrap()).unwrap();
        assert_eq!(rs.rules.len(), 2);
        assert_eq!(
            warnings[0].kind,
            WarningKind::UnresolvedName {
                name: "cloud.example.com".into()
            }
        );
    }

    #[test]
    fn compile_requires_device_in_context() {
        let (p, ctx) = setup();
        let stranger = DeviceRecord::new("02:ff:00:00:00:01".parse().unwrap(), Ipv4Addr::new(192, 168, 1, 99));
        assert!(matches!(
            compile(&p, &ctx, &stranger),
            Err(CompileError::ContextMismatch(_))
        ));
    }

    #[test]
    fn lookup_examples() {
        let (p, ctx) = setup();
        let (rs, _) = compile(&p, &ctx, ctx.device(camera_mac()).unwrap()).unwrap();
        match lookup(&rs, &out_pkt(Protocol::Tcp, [203, 0, 113, 10], 443)).unwrap() {
            Decision::Rule { action, provenance, .. } => {
                assert_eq!(
                    action,
                    RuleAction::AcceptRateLimited {
                        rate: RateSpec::bytes(50_000, 10_000)
                    }
                );
                assert_eq!(provenance, Provenance::new("cam-from", "cloud-upload"));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(
            lookup(&rs, &out_pkt(Protocol::Tcp, [8, 8, 8, 8], 80)).unwrap(),
            Decision::DefaultDrop
        );
        let dns = lookup(&rs, &out_pkt(Protocol::Udp, [192, 168, 1, 5], 53)).unwrap();
        assert_eq!(dns.provenance(), Some(&Provenance::new("cam-from", "controller-dns")));
        assert!(dns.is_accept());
    }

    #[test]
    fn lookup_rejects_foreign_packet() {
        let (p, ctx) = setup();
        let (rs, _) = compile(&p, &ctx, ctx.device(camera_mac()).unwrap()).unwrap();
        let mut pkt = out_pkt(Protocol::Tcp, [203, 0, 113, 10], 443);
        pkt.device_mac = "02:00:00:00:00:99".parse().unwrap();
        assert!(matches!(lookup(&rs, &pkt), Err(CompileError::DeviceMismatch { .. })));
    }

    #[test]
    fn diff_examples() {
        let (p, ctx) = setup();
        let (rs, _) = compile(&p, &ctx, ctx.device(camera_mac()).unwrap()).unwrap();
        assert!(diff_rulesets(&rs, &rs).unwrap().is_empty());

        let mut bigger = rs.clone();
        let mut extra = rs.rules[0].clone();
        extra.priority = 99;
        extra.remote = "198.51.100.1/32".parse().unwrap();
        bigger.rules.push(extra);
        let d = diff_rulesets(&rs, &bigger).unwrap();
        assert_eq!((d.added.len(), d.removed.len()), (1, 0));
        assert_eq!(d.apply(&rs), bigger.canonical_keys());

        let mut changed = rs.clone();
        changed.rules[1].action = RuleAction::Drop;
        let d = diff_rulesets(&rs, &changed).unwrap();
        assert_eq!((d.added.len(), d.removed.len()), (1, 1));
        assert_eq!(d.apply(&rs), changed.canonical_keys());
    }

    #[test]
    fn jsonl_export_round_trips() {
        let (p, ctx) = setup();
        let (rs, _) = compile(&p, &ctx, ctx.device(camera_mac()).unwrap()).unwrap();
        let mut buf = Vec::new();
        assert_eq!(write_rules_jsonl(&rs, &mut buf).unwrap(), 4);
        assert_eq!(buf.iter().filter(|b| **b == b'\n').count(), 4);
        let back = read_rules_jsonl(&buf[..], rs.device_mac).unwrap();
        assert_eq!(back, rs);
    }

    #[test]
    fn context_rejects_duplicate_mac() {
        let (_, mut ctx) = setup();
        let dup = ctx.devices[0].clone();
        ctx.devices.push(dup);
        assert!(ctx.validate().is_err());
    }
}
