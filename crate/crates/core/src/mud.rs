//! MUD (RFC 8520) documents: data model, JSON parser, serializer and validator.
//!
//! Only the IPv4 subset is supported. On top of the standard YANG-JSON field
//! names, each ACE may carry the rate extension keys
//!
//! ```text
//! "dada:max-bytes-per-second":   u64
//! "dada:max-packets-per-second": u64
//! "dada:burst-bytes":            u64
//! ```
//!
//! which become a [`RateSpec`] on the ACE. Unknown keys in the `ietf-mud:mud`
//! container and at document top level are preserved in
//! [`MudProfile::extensions`] and otherwise ignored. Unknown keys inside
//! `matches` are rejected: silently dropping a match leaf would widen the rule.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::net::{Direction, PortRange, Protocol};

pub const RATE_BYTES_KEY: &str = "dada:max-bytes-per-second";
pub const RATE_PACKETS_KEY: &str = "dada:max-packets-per-second";
pub const RATE_BURST_KEY: &str = "dada:burst-bytes";

const MUD_CONTAINER: &str = "ietf-mud:mud";
const ACLS_CONTAINER: &str = "ietf-access-control-list:acls";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MudError {
    #[error("malformed MUD document at `{path}`: {message}")]
    MalformedDocument { path: String, message: String },
    #[error("unsupported mud-version {found} (only 1 is supported)")]
    UnsupportedVersion { found: i64 },
    #[error("schema violation at `{path}`: {message}")]
    SchemaViolation { path: String, message: String },
    #[error("unsupported address family at `{path}`: {family}")]
    UnsupportedFamily { path: String, family: String },
}

impl MudError {
    /// Document path the error refers to.
    pub fn path(&self) -> &str {
        match self {
            MudError::MalformedDocument { path, .. }
            | MudError::SchemaViolation { path, .. }
            | MudError::UnsupportedFamily { path, .. } => path,
            MudError::UnsupportedVersion { .. } => "ietf-mud:mud.mud-version",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AddressFamily {
    Ipv4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AceAction {
    Accept,
    Drop,
}

/// Expected traffic rate for one ACE. Zero means "not limited" for that axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
pub struct RateSpec {
    pub max_bytes_per_second: u64,
    pub max_packets_per_second: u64,
    pub burst_bytes: u64,
}

impl RateSpec {
    pub fn bytes(rate: u64, burst: u64) -> Self {
        Self {
            max_bytes_per_second: rate,
            max_packets_per_second: 0,
            burst_bytes: burst,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.max_bytes_per_second > 0 || self.max_packets_per_second > 0
    }

    /// Byte bucket depth. An unset burst defaults to one second of traffic.
    pub fn effective_burst_bytes(&self) -> u64 {
        if self.burst_bytes > 0 {
            self.burst_bytes
        } else {
            self.max_bytes_per_second
        }
    }

    /// Packet bucket depth: one second of packets, at least one.
    pub fn effective_burst_packets(&self) -> u64 {
        self.max_packets_per_second.max(1)
    }
}

/// The match part of an ACE. At most one endpoint abstraction may be set.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
pub struct MatchCriteria {
    pub protocol: Option<Protocol>,
    pub src_port: Option<PortRange>,
    pub dst_port: Option<PortRange>,
    pub direction_initiated: Option<Direction>,
    pub dns_name: Option<String>,
    pub controller_class: Option<String>,
    pub my_controller: bool,
    pub local_networks: bool,
    pub same_manufacturer: bool,
    pub manufacturer: Option<String>,
    pub model: Option<String>,
}

/// Endpoint abstraction named by a [`MatchCriteria`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Abstraction<'a> {
    DnsName(&'a str),
    Controller(&'a str),
    MyController,
    LocalNetworks,
    SameManufacturer,
    Manufacturer(&'a str),
    Model(&'a str),
}

impl MatchCriteria {
    pub fn abstractions(&self) -> Vec<Abstraction<'_>> {
        let mut out = Vec::new();
        if let Some(n) = &self.dns_name {
            out.push(Abstraction::DnsName(n));
        }
        if let Some(c) = &self.controller_class {
            out.push(Abstraction::Controller(c));
        }
        if self.my_controller {
            out.push(Abstraction::MyController);
        }
        if self.local_networks {
            out.push(Abstraction::LocalNetworks);
        }
        if self.same_manufacturer {
            out.push(Abstraction::SameManufacturer);
        }
        if let Some(m) = &self.manufacturer {
            out.push(Abstraction::Manufacturer(m));
        }
        if let Some(m) = &self.model {
            out.push(Abstraction::Model(m));
        }
        out
    }

    /// The single endpoint abstraction, or `None` for "any remote".
    pub fn abstraction(&self) -> Option<Abstraction<'_>> {
        self.abstractions().into_iter().next()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Ace {
    pub name: String,
    pub matches: MatchCriteria,
    pub action: AceAction,
    pub rate_limit: Option<RateSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AccessControlList {
    pub name: String,
    pub address_family: AddressFamily,
    pub aces: Vec<Ace>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MudProfile {
    pub mud_url: String,
    pub mud_version: u32,
    pub last_update: String,
    pub cache_validity: u32,
    pub is_supported: bool,
    pub system_info: String,
    pub from_device_acls: Vec<String>,
    pub to_device_acls: Vec<String>,
    /// ACLs in document order; [`canonicalize`] sorts them by name.
    pub acls: Vec<AccessControlList>,
    /// Unknown keys, `ietf-mud:mud.<key>` or `<top-level key>`.
    pub extensions: BTreeMap<String, Value>,
}

impl MudProfile {
    /// Empty profile: no ACLs, so everything is denied once compiled.
    pub fn empty(mud_url: impl Into<String>) -> Self {
        Self {
            mud_url: mud_url.into(),
            mud_version: 1,
            last_update: "1970-01-01T00:00:00Z".into(),
            cache_validity: 48,
            is_supported: true,
            system_info: String::new(),
            from_device_acls: Vec::new(),
            to_device_acls: Vec::new(),
            acls: Vec::new(),
            extensions: BTreeMap::new(),
        }
    }

    pub fn acl(&self, name: &str) -> Option<&AccessControlList> {
        self.acls.iter().find(|a| a.name == name)
    }

    pub fn ace_count(&self) -> usize {
        self.acls.iter().map(|a| a.aces.len()).sum()
    }

    /// ACLs applied in `direction`, in policy order. Dangling names are skipped.
    pub fn policy_acls(&self, direction: Direction) -> impl Iterator<Item = &AccessControlList> {
        let names = match direction {
            Direction::FromDevice => &self.from_device_acls,
            Direction::ToDevice => &self.to_device_acls,
        };
        names.iter().filter_map(move |n| self.acl(n))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    UnsupportedVersion,
    CacheValidity,
    EmptyName,
    DanglingAclRef,
    DuplicateAclName,
    DuplicateAceName,
    RateOnDrop,
    EmptyRate,
    MultipleAbstractions,
    InvalidPortRange,
    PortsWithoutTransport,
    DirectionWithoutTcp,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub kind: ViolationKind,
}

impl Violation {
    fn new(path: impl Into<String>, kind: ViolationKind) -> Self {
        Self {
            path: path.into(),
            kind,
        }
    }
}

/// Checks every profile invariant. An empty result means the profile is valid.
pub fn validate_profile(p: &MudProfile) -> Vec<Violation> {
    use ViolationKind::*;
    let mut out = Vec::new();
    if p.mud_version != 1 {
        out.push(Violation::new("mud-version", UnsupportedVersion));
    }
    if p.cache_validity < 1 {
        out.push(Violation::new("cache-validity", CacheValidity));
    }
    let mut acl_names = BTreeSet::new();
    for (i, acl) in p.acls.iter().enumerate() {
        let acl_path = format!("acls[{i}]");
        if acl.name.is_empty() {
            out.push(Violation::new(format!("{acl_path}.name"), EmptyName));
        }
        if !acl_names.insert(acl.name.as_str()) {
            out.push(Violation::new(format!("{acl_path}.name"), DuplicateAclName));
        }
        let mut ace_names = BTreeSet::new();
        for (j, ace) in acl.aces.iter().enumerate() {
            let path = format!("{acl_path}.aces[{j}]");
            if ace.name.is_empty() {
                out.push(Violation::new(format!("{path}.name"), EmptyName));
            }
            if !ace_names.insert(ace.name.as_str()) {
                out.push(Violation::new(format!("{path}.name"), DuplicateAceName));
            }
            if let Some(rate) = &ace.rate_limit {
                if ace.action == AceAction::Drop {
                    out.push(Violation::new(format!("{path}.rate_limit"), RateOnDrop));
                }
                if !rate.is_valid() {
                    out.push(Violation::new(format!("{path}.rate_limit"), EmptyRate));
                }
            }
            let m = &ace.matches;
            if m.abstractions().len() > 1 {
                out.push(Violation::new(format!("{path}.matches"), MultipleAbstractions));
            }
            for (leaf, range) in [("src_port", m.src_port), ("dst_port", m.dst_port)] {
                if let Some(r) = range {
                    if !r.is_valid() {
                        out.push(Violation::new(format!("{path}.matches.{leaf}"), InvalidPortRange));
                    }
                    if !matches!(m.protocol, Some(Protocol::Tcp | Protocol::Udp)) {
                        out.push(Violation::new(format!("{path}.matches.{leaf}"), PortsWithoutTransport));
                    }
                }
            }
            if m.direction_initiated.is_some() && m.protocol != Some(Protocol::Tcp) {
                out.push(Violation::new(
                    format!("{path}.matches.direction_initiated"),
                    DirectionWithoutTcp,
                ));
            }
        }
    }
    for (policy, names) in [
        ("from-device-policy", &p.from_device_acls),
        ("to-device-policy", &p.to_device_acls),
    ] {
        for (i, name) in names.iter().enumerate() {
            if !acl_names.contains(name.as_str()) {
                out.push(Violation::new(format!("{policy}[{i}]"), DanglingAclRef));
            }
        }
    }
    out
}

/// Sorts ACLs by name. ACE order and policy order are semantic and kept.
pub fn canonicalize(p: &MudProfile) -> MudProfile {
    let mut out = p.clone();
    out.acls.sort_by(|a, b| a.name.cmp(&b.name));
    out
}

/// SHA-256 over the canonical JSON encoding, hex encoded.
pub fn content_hash(p: &MudProfile) -> String {
    let bytes = serde_json::to_vec(&canonicalize(p)).expect("profile serializes");
    hex::encode(Sha256::digest(&bytes))
}

// ---------------------------------------------------------------------------
// YANG-JSON wire model

#[derive(Deserialize)]
struct DocumentJson {
    #[serde(rename = "ietf-mud:mud")]
    mud: MudJson,
    #[serde(rename = "ietf-access-control-list:acls", default)]
    acls: Option<AclsJson>,
    #[serde(flatten)]
    extra: BTreeMap<String, Value>,
}

#[derive(Deserialize)]
struct MudJson {
    #[serde(rename = "mud-version")]
    #[allow(dead_code)]
    mud_version: i64,
    #[serde(rename = "mud-url")]
    mud_url: String,
    #[serde(rename = "last-update")]
    last_update: String,
    #[serde(rename = "cache-validity", default = "default_cache_validity")]
    cache_validity: i64,
    #[serde(rename = "is-supported")]
    is_supported: bool,
    #[serde(rename = "systeminfo", default)]
    system_info: Option<String>,
    #[serde(rename = "from-device-policy", default)]
    from_device_policy: Option<PolicyJson>,
    #[serde(rename = "to-device-policy", default)]
    to_device_policy: Option<PolicyJson>,
    #[serde(flatten)]
    extra: BTreeMap<String, Value>,
}

fn default_cache_validity() -> i64 {
    48
}

#[derive(Deserialize)]
struct PolicyJson {
    #[serde(rename = "access-lists")]
    access_lists: AccessListsJson,
}

#[derive(Deserialize)]
struct AccessListsJson {
    #[serde(rename = "access-list", default)]
    access_list: Vec<AclRefJson>,
}

#[derive(Deserialize)]
struct AclRefJson {
    name: String,
}

#[derive(Deserialize)]
struct AclsJson {
    #[serde(default)]
    acl: Vec<AclJson>,
}

#[derive(Deserialize)]
struct AclJson {
    name: String,
    #[serde(rename = "type", default)]
    acl_type: Option<String>,
    #[serde(default)]
    aces: Option<AcesJson>,
}

#[derive(Deserialize)]
struct AcesJson {
    #[serde(default)]
    ace: Vec<AceJson>,
}

#[derive(Deserialize)]
struct AceJson {
    name: String,
    #[serde(default)]
    matches: MatchesJson,
    actions: ActionsJson,
    #[serde(rename = "dada:max-bytes-per-second", default)]
    max_bytes: Option<u64>,
    #[serde(rename = "dada:max-packets-per-second", default)]
    max_packets: Option<u64>,
    #[serde(rename = "dada:burst-bytes", default)]
    burst: Option<u64>,
}

#[derive(Deserialize)]
struct ActionsJson {
    forwarding: String,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct MatchesJson {
    #[serde(default)]
    ipv4: Option<Ipv4Json>,
    #[serde(default)]
    ipv6: Option<Value>,
    #[serde(default)]
    eth: Option<Value>,
    #[serde(default)]
    tcp: Option<TcpJson>,
    #[serde(default)]
    udp: Option<UdpJson>,
    #[serde(default)]
    icmp: Option<Value>,
    #[serde(rename = "ietf-mud:mud", default)]
    mud: Option<MudMatchJson>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Ipv4Json {
    #[serde(default)]
    protocol: Option<u8>,
    #[serde(rename = "ietf-acldns:dst-dnsname", default)]
    dst_dnsname: Option<String>,
    #[serde(rename = "ietf-acldns:src-dnsname", default)]
    src_dnsname: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TcpJson {
    #[serde(rename = "source-port", default)]
    source_port: Option<PortJson>,
    #[serde(rename = "destination-port", default)]
    destination_port: Option<PortJson>,
    #[serde(rename = "ietf-mud:direction-initiated", default)]
    direction_initiated: Option<Direction>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct UdpJson {
    #[serde(rename = "source-port", default)]
    source_port: Option<PortJson>,
    #[serde(rename = "destination-port", default)]
    destination_port: Option<PortJson>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PortJson {
    #[serde(default)]
    operator: Option<String>,
    #[serde(default)]
    port: Option<u16>,
    #[serde(rename = "lower-port", default)]
    lower_port: Option<u16>,
    #[serde(rename = "upper-port", default)]
    upper_port: Option<u16>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MudMatchJson {
    #[serde(default)]
    manufacturer: Option<String>,
    #[serde(rename = "same-manufacturer", default)]
    same_manufacturer: Option<Value>,
    #[serde(default)]
    model: Option<String>,
    #[serde(rename = "local-networks", default)]
    local_networks: Option<Value>,
    #[serde(default)]
    controller: Option<String>,
    #[serde(rename = "my-controller", default)]
    my_controller: Option<Value>,
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> MudError {
    MudError::SchemaViolation {
        path: path.into(),
        message: message.into(),
    }
}

/// Parses a MUD JSON document and checks every profile invariant.
pub fn parse_mud(document: &str) -> Result<MudProfile, MudError> {
    let value: Value = serde_json::from_str(document).map_err(|e| MudError::MalformedDocument {
        path: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    parse_mud_value(value)
}

pub fn parse_mud_value(value: Value) -> Result<MudProfile, MudError> {
    let version_path = format!("{MUD_CONTAINER}.mud-version");
    let version = value
        .get(MUD_CONTAINER)
        .and_then(|m| m.get("mud-version"))
        .ok_or_else(|| MudError::MalformedDocument {
            path: version_path.clone(),
            message: "missing mud-version".into(),
        })?;
    let version = version.as_i64().ok_or_else(|| MudError::MalformedDocument {
        path: version_path,
        message: "mud-version is not an integer".into(),
    })?;
    if version != 1 {
        return Err(MudError::UnsupportedVersion { found: version });
    }

    let doc: DocumentJson = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        schema(path, e.into_inner().to_string())
    })?;

    let mud = doc.mud;
    let cache_validity = u32::try_from(mud.cache_validity)
        .ok()
        .filter(|v| *v >= 1)
        .ok_or_else(|| schema(format!("{MUD_CONTAINER}.cache-validity"), "must be >= 1"))?;

    let policy_names = |p: Option<PolicyJson>| -> Vec<String> {
        p.map(|p| p.access_lists.access_list.into_iter().map(|r| r.name).collect())
            .unwrap_or_default()
    };

    let mut extensions = BTreeMap::new();
    for (k, v) in mud.extra {
        extensions.insert(format!("{MUD_CONTAINER}.{k}"), v);
    }
    for (k, v) in doc.extra {
        extensions.insert(k, v);
    }

    let mut acls = Vec::new();
    for (i, acl) in doc.acls.map(|a| a.acl).unwrap_or_default().into_iter().enumerate() {
        let path = format!("{ACLS_CONTAINER}.acl[{i}]");
        acls.push(convert_acl(acl, &path)?);
    }

    let profile = MudProfile {
        mud_url: mud.mud_url,
        mud_version: 1,
        last_update: mud.last_update,
        cache_validity,
        is_supported: mud.is_supported,
        system_info: mud.system_info.unwrap_or_default(),
        from_device_acls: policy_names(mud.from_device_policy),
        to_device_acls: policy_names(mud.to_device_policy),
        acls,
        extensions,
    };

    if let Some(v) = validate_profile(&profile).into_iter().next() {
        return Err(schema(v.path, format!("{:?}", v.kind)));
    }
    Ok(profile)
}

fn convert_acl(acl: AclJson, path: &str) -> Result<AccessControlList, MudError> {
    match acl.acl_type.as_deref() {
        None | Some("ipv4-acl-type") => {}
        Some(other) => {
            return Err(MudError::UnsupportedFamily {
                path: format!("{path}.type"),
                family: other.to_string(),
            })
        }
    }
    let mut aces = Vec::new();
    for (j, ace) in acl.aces.map(|a| a.ace).unwrap_or_default().into_iter().enumerate() {
        aces.push(convert_ace(ace, &format!("{path}.aces.ace[{j}]"))?);
    }
    Ok(AccessControlList {
        name: acl.name,
        address_family: AddressFamily::Ipv4,
        aces,
    })
}

fn convert_port(p: PortJson, path: &str) -> Result<PortRange, MudError> {
    match (p.operator.as_deref(), p.port, p.lower_port, p.upper_port) {
        (None | Some("eq"), Some(port), None, None) => Ok(PortRange::single(port)),
        (Some("lte"), Some(port), None, None) => Ok(PortRange::new(0, port)),
        (Some("gte"), Some(port), None, None) => Ok(PortRange::new(port, u16::MAX)),
        (None, None, Some(lo), Some(hi)) => {
            if lo <= hi {
                Ok(PortRange::new(lo, hi))
            } else {
                Err(schema(path, "lower-port greater than upper-port"))
            }
        }
        (Some(op), _, None, None) => Err(schema(path, format!("unsupported port operator `{op}`"))),
        _ => Err(schema(
            path,
            "port must be an operator/port pair or a lower/upper range",
        )),
    }
}

fn convert_ace(ace: AceJson, path: &str) -> Result<Ace, MudError> {
    let m = ace.matches;
    let mpath = format!("{path}.matches");
    if let Some((key, _)) = [("ipv6", &m.ipv6), ("eth", &m.eth)]
        .into_iter()
        .find(|(_, v)| v.is_some())
    {
        return Err(MudError::UnsupportedFamily {
            path: format!("{mpath}.{key}"),
            family: key.to_string(),
        });
    }

    let transports = [m.tcp.is_some(), m.udp.is_some(), m.icmp.is_some()]
        .iter()
        .filter(|b| **b)
        .count();
    if transports > 1 {
        return Err(schema(&mpath, "more than one transport container"));
    }
    let container_proto = if m.tcp.is_some() {
        Some(Protocol::Tcp)
    } else if m.udp.is_some() {
        Some(Protocol::Udp)
    } else if m.icmp.is_some() {
        Some(Protocol::Icmp)
    } else {
        None
    };

    let mut criteria = MatchCriteria::default();
    if let Some(ip) = m.ipv4 {
        if let Some(n) = ip.protocol {
            let p = Protocol::from_number(n)
                .ok_or_else(|| schema(format!("{mpath}.ipv4.protocol"), format!("unsupported protocol {n}")))?;
            criteria.protocol = Some(p);
        }
        criteria.dns_name = match (ip.dst_dnsname, ip.src_dnsname) {
            (Some(_), Some(_)) => return Err(schema(format!("{mpath}.ipv4"), "both src- and dst-dnsname set")),
            (a, b) => a.or(b),
        };
    }
    match (criteria.protocol, container_proto) {
        (Some(a), Some(b)) if a != b => {
            return Err(schema(
                format!("{mpath}.ipv4.protocol"),
                format!("protocol {a} conflicts with {b} container"),
            ))
        }
        (None, Some(b)) => criteria.protocol = Some(b),
        _ => {}
    }

    let (sp, dp) = match (m.tcp, m.udp) {
        (Some(t), _) => {
            criteria.direction_initiated = t.direction_initiated;
            (t.source_port, t.destination_port)
        }
        (_, Some(u)) => (u.source_port, u.destination_port),
        _ => (None, None),
    };
    let tpath = format!(
        "{mpath}.{}",
        criteria.protocol.map(|p| p.to_string()).unwrap_or_default()
    );
    criteria.src_port = sp
        .map(|p| convert_port(p, &format!("{tpath}.source-port")))
        .transpose()?;
    criteria.dst_port = dp
        .map(|p| convert_port(p, &format!("{tpath}.destination-port")))
        .transpose()?;

    if let Some(mm) = m.mud {
        criteria.manufacturer = mm.manufacturer;
        criteria.same_manufacturer = mm.same_manufacturer.is_some();
        criteria.model = mm.model;
        criteria.local_networks = mm.local_networks.is_some();
        criteria.controller_class = mm.controller;
        criteria.my_controller = mm.my_controller.is_some();
    }

    let action = match ace.actions.forwarding.as_str() {
        "accept" => AceAction::Accept,
        "drop" | "reject" => AceAction::Drop,
        other => {
            return Err(schema(
                format!("{path}.actions.forwarding"),
                format!("unknown forwarding action `{other}`"),
            ))
        }
    };

    let rate_limit = if ace.max_bytes.is_some() || ace.max_packets.is_some() || ace.burst.is_some() {
        Some(RateSpec {
            max_bytes_per_second: ace.max_bytes.unwrap_or(0),
            max_packets_per_second: ace.max_packets.unwrap_or(0),
            burst_bytes: ace.burst.unwrap_or(0),
        })
    } else {
        None
    };

    Ok(Ace {
        name: ace.name,
        matches: criteria,
        action,
        rate_limit,
    })
}

// ---------------------------------------------------------------------------
// Serializer

fn port_json(r: PortRange) -> Value {
    if r.low == r.high {
        json!({"operator": "eq", "port": r.low})
    } else {
        json!({"lower-port": r.low, "upper-port": r.high})
    }
}

fn matches_json(m: &MatchCriteria, dns_key: &str) -> Value {
    let mut out = Map::new();
    let mut ipv4 = Map::new();
    if let Some(p) = m.protocol {
        ipv4.insert("protocol".into(), json!(p.number()));
    }
    if let Some(n) = &m.dns_name {
        ipv4.insert(dns_key.into(), json!(n));
    }
    if !ipv4.is_empty() {
        out.insert("ipv4".into(), Value::Object(ipv4));
    }
    let mut ports = Map::new();
    if let Some(r) = m.src_port {
        ports.insert("source-port".into(), port_json(r));
    }
    if let Some(r) = m.dst_port {
        ports.insert("destination-port".into(), port_json(r));
    }
    match m.protocol {
        Some(Protocol::Tcp) => {
            if let Some(d) = m.direction_initiated {
                ports.insert("ietf-mud:direction-initiated".into(), json!(d.as_str()));
            }
            out.insert("tcp".into(), Value::Object(ports));
        }
        Some(Protocol::Udp) => {
            out.insert("udp".into(), Value::Object(ports));
        }
        Some(Protocol::Icmp) => {
            out.insert("icmp".into(), json!({}));
        }
        None => {}
    }
    let mut mud = Map::new();
    if let Some(v) = &m.manufacturer {
        mud.insert("manufacturer".into(), json!(v));
    }
    if m.same_manufacturer {
        mud.insert("same-manufacturer".into(), json!([null]));
    }
    if let Some(v) = &m.model {
        mud.insert("model".into(), json!(v));
    }
    if m.local_networks {
        mud.insert("local-networks".into(), json!([null]));
    }
    if let Some(v) = &m.controller_class {
        mud.insert("controller".into(), json!(v));
    }
    if m.my_controller {
        mud.insert("my-controller".into(), json!([null]));
    }
    if !mud.is_empty() {
        out.insert(MUD_CONTAINER.into(), Value::Object(mud));
    }
    Value::Object(out)
}

/// Renders a profile as an RFC 8520 JSON document that [`parse_mud`] accepts.
pub fn to_document(p: &MudProfile) -> Value {
    let policy = |names: &[String]| json!({"access-lists": {"access-list": names.iter().map(|n| json!({"name": n})).collect::<Vec<_>>()}});
    let mut mud = Map::new();
    mud.insert("mud-version".into(), json!(p.mud_version));
    mud.insert("mud-url".into(), json!(p.mud_url));
    mud.insert("last-update".into(), json!(p.last_update));
    mud.insert("cache-validity".into(), json!(p.cache_validity));
    mud.insert("is-supported".into(), json!(p.is_supported));
    if !p.system_info.is_empty() {
        mud.insert("systeminfo".into(), json!(p.system_info));
    }
    mud.insert("from-device-policy".into(), policy(&p.from_device_acls));
    mud.insert("to-device-policy".into(), policy(&p.to_device_acls));

    let mut doc = Map::new();
    let container_prefix = format!("{MUD_CONTAINER}.");
    for (k, v) in &p.extensions {
        match k.strip_prefix(&container_prefix) {
            Some(inner) => {
                mud.insert(inner.to_string(), v.clone());
            }
            None => {
                doc.insert(k.clone(), v.clone());
            }
        }
    }

    let to_only: BTreeSet<&str> = p
        .to_device_acls
        .iter()
        .filter(|n| !p.from_device_acls.contains(n))
        .map(String::as_str)
        .collect();
    let acls: Vec<Value> = p
        .acls
        .iter()
        .map(|acl| {
            let dns_key = if to_only.contains(acl.name.as_str()) {
                "ietf-acldns:src-dnsname"
            } else {
                "ietf-acldns:dst-dnsname"
            };
            let aces: Vec<Value> = acl
                .aces
                .iter()
                .map(|ace| {
                    let mut a = Map::new();
                    a.insert("name".into(), json!(ace.name));
                    a.insert("matches".into(), matches_json(&ace.matches, dns_key));
                    let fwd = match ace.action {
                        AceAction::Accept => "accept",
                        AceAction::Drop => "drop",
                    };
                    a.insert("actions".into(), json!({"forwarding": fwd}));
                    if let Some(r) = &ace.rate_limit {
                        a.insert(RATE_BYTES_KEY.into(), json!(r.max_bytes_per_second));
                        a.insert(RATE_PACKETS_KEY.into(), json!(r.max_packets_per_second));
                        a.insert(RATE_BURST_KEY.into(), json!(r.burst_bytes));
                    }
                    Value::Object(a)
                })
                .collect();
            json!({"name": acl.name, "type": "ipv4-acl-type", "aces": {"ace": aces}})
        })
        .collect();

    doc.insert(MUD_CONTAINER.into(), Value::Object(mud));
    doc.insert(ACLS_CONTAINER.into(), json!({"acl": acls}));
    Value::Object(doc)
}

pub fn to_json_string(p: &MudProfile) -> String {
    serde_json::to_string_pretty(&to_document(p)).expect("document serializes")
}
