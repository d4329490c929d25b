//! Tokens-and-pots control plane.
//!
//! Tokens name devices, pots name actions. A reader reports which pot and
//! tokens sit on it; every event carries the reader's full state. Continuous
//! pots act while a token is present. Discrete pots latch their action until a
//! later discrete placement demands a different action in the same category on
//! the same device. Competing demands resolve to the most restrictive action.
//!
//! Token tags hold `DADA1`, a one-byte MAC count, then six bytes per MAC.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use ipnet::Ipv4Net;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compiler::{ConcreteRule, NetworkContext, Provenance, RuleAction};
use crate::datapath::{Datapath, DatapathError, Mode};
use crate::net::{Direction, MacAddr};

pub const TOKEN_PREFIX: &str = "tok-";
pub const POT_PREFIX: &str = "pot-";
pub const TAG_MAGIC: &[u8; 5] = b"DADA1";
pub const TAG_CAPACITY: usize = 720;
pub const REBOOT_INTERVAL_US: u64 = 60_000_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ControlError {
    #[error("{0:?} is not a token id")]
    NotAToken(String),
    #[error("{0:?} is not a pot id")]
    NotAPot(String),
    #[error("payload of {needed} bytes exceeds tag capacity {capacity}")]
    TagCapacityExceeded { needed: usize, capacity: usize },
    #[error("actions {first} and {second} share category {category}")]
    CategoryClash {
        first: String,
        second: String,
        category: Category,
    },
    #[error("pot needs at least one action")]
    EmptyPot,
    #[error("malformed tag payload: {0}")]
    MalformedTag(String),
    #[error("malformed message on {topic:?}: {message}")]
    MalformedMessage { topic: String, message: String },
}

pub fn is_token_id(id: &str) -> bool {
    id.len() > TOKEN_PREFIX.len() && id.starts_with(TOKEN_PREFIX)
}

pub fn is_pot_id(id: &str) -> bool {
    id.len() > POT_PREFIX.len() && id.starts_with(POT_PREFIX)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceToken {
    pub token_id: String,
    #[serde(default)]
    pub label: String,
    pub macs: Vec<MacAddr>,
    pub payload_bytes: usize,
}

impl DeviceToken {
    pub fn new(token_id: &str, label: &str, macs: Vec<MacAddr>) -> Result<Self, ControlError> {
        if !is_token_id(token_id) {
            return Err(ControlError::NotAToken(token_id.to_string()));
        }
        let payload_bytes = encode_tag_payload(&macs)?.len();
        Ok(Self {
            token_id: token_id.to_string(),
            label: label.to_string(),
            macs,
            payload_bytes,
        })
    }
}

pub fn tag_payload_len(mac_count: usize) -> usize {
    TAG_MAGIC.len() + 1 + 6 * mac_count
}

pub fn encode_tag_payload(macs: &[MacAddr]) -> Result<Vec<u8>, ControlError> {
    let needed = tag_payload_len(macs.len());
    if needed > TAG_CAPACITY || macs.len() > u8::MAX as usize {
        return Err(ControlError::TagCapacityExceeded {
            needed,
            capacity: TAG_CAPACITY,
        });
    }
    let mut out = Vec::with_capacity(needed);
    out.extend_from_slice(TAG_MAGIC);
    out.push(macs.len() as u8);
    for m in macs {
        out.extend_from_slice(&m.octets());
    }
    Ok(out)
}

pub fn decode_tag_payload(bytes: &[u8]) -> Result<Vec<MacAddr>, ControlError> {
    let bad = |m: &str| ControlError::MalformedTag(m.to_string());
    let rest = bytes
        .strip_prefix(TAG_MAGIC.as_slice())
        .ok_or_else(|| bad("missing DADA1 header"))?;
    let (&count, body) = rest.split_first().ok_or_else(|| bad("missing count"))?;
    if body.len() != 6 * count as usize {
        return Err(bad("length does not match count"));
    }
    Ok(body
        .chunks_exact(6)
        .map(|c| MacAddr::new([c[0], c[1], c[2], c[3], c[4], c[5]]))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Connectivity,
    Access,
    Logging,
    Power,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Connectivity => "connectivity",
            Category::Access => "access",
            Category::Logging => "logging",
            Category::Power => "power",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Network {
    Privileged,
    Unprivileged,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlAction {
    RemoveFromNetwork,
    AllowResource { resource: String },
    LogAllTraffic,
    StopLogging,
    Reboot,
    SwitchNetwork { network: Network },
    RestrictAccess { resource: String },
}

impl ControlAction {
    pub fn category(&self) -> Category {
        match self {
            ControlAction::RemoveFromNetwork | ControlAction::SwitchNetwork { .. } => Category::Connectivity,
            ControlAction::AllowResource { .. } | ControlAction::RestrictAccess { .. } => Category::Access,
            ControlAction::LogAllTraffic | ControlAction::StopLogging => Category::Logging,
            ControlAction::Reboot => Category::Power,
        }
    }

    /// Rank within the category; higher wins a conflict.
    pub fn restrictiveness(&self) -> u8 {
        match self {
            ControlAction::RemoveFromNetwork => 3,
            ControlAction::SwitchNetwork {
                network: Network::Unprivileged,
            } => 2,
            ControlAction::SwitchNetwork {
                network: Network::Privileged,
            } => 1,
            ControlAction::RestrictAccess { .. } => 2,
            ControlAction::AllowResource { .. } => 1,
            ControlAction::LogAllTraffic => 2,
            ControlAction::StopLogging => 1,
            ControlAction::Reboot => 1,
        }
    }

    /// Fired once per placement rather than held.
    pub fn is_momentary(&self) -> bool {
        matches!(self, ControlAction::Reboot)
    }
}

impl fmt::Display for ControlAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlAction::RemoveFromNetwork => f.write_str("remove_from_network"),
            ControlAction::AllowResource { resource } => write!(f, "allow_resource({resource})"),
            ControlAction::LogAllTraffic => f.write_str("log_all_traffic"),
            ControlAction::StopLogging => f.write_str("stop_logging"),
            ControlAction::Reboot => f.write_str("reboot"),
            ControlAction::SwitchNetwork { network } => write!(f, "switch_network({network:?})"),
            ControlAction::RestrictAccess { resource } => write!(f, "restrict_access({resource})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Continuous,
    Discrete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pot {
    pub pot_id: String,
    pub actions: Vec<ControlAction>,
    pub modality: Modality,
}

impl Pot {
    pub fn new(pot_id: &str, actions: Vec<ControlAction>, modality: Modality) -> Result<Self, ControlError> {
        if !is_pot_id(pot_id) {
            return Err(ControlError::NotAPot(pot_id.to_string()));
        }
        if actions.is_empty() {
            return Err(ControlError::EmptyPot);
        }
        for (i, a) in actions.iter().enumerate() {
            if let Some(b) = actions[..i].iter().find(|b| b.category() == a.category()) {
                return Err(ControlError::CategoryClash {
                    first: b.to_string(),
                    second: a.to_string(),
                    category: a.category(),
                });
            }
        }
        Ok(Self {
            pot_id: pot_id.to_string(),
            actions,
            modality,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReaderEvent {
    pub reader_id: String,
    pub ts: u64,
    pub pot_tag: Option<String>,
    pub token_tags: BTreeSet<String>,
}

/// Who asked for an action.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Source {
    pub reader_id: String,
    pub pot_id: String,
    pub token_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Activation {
    pub action: ControlAction,
    pub sources: BTreeSet<Source>,
    pub since: u64,
    pub latched: bool,
}

/// Active entries keyed by device and category.
pub type ActivationState = BTreeMap<(MacAddr, Category), Activation>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conflict {
    pub mac: MacAddr,
    pub category: Category,
    pub winner: ControlAction,
    pub loser: ControlAction,
}

/// Combines the active entry with another demand for the same key. Equal
/// actions merge their sources; otherwise the more restrictive action wins and
/// ties keep the current entry.
pub fn resolve_conflicts(
    current: Option<&Activation>,
    incoming: &Activation,
) -> (Activation, Option<(ControlAction, ControlAction)>) {
    let Some(cur) = current else {
        return (incoming.clone(), None);
    };
    if cur.action == incoming.action {
        let mut merged = cur.clone();
        merged.sources.extend(incoming.sources.iter().cloned());
        merged.since = cur.since.min(incoming.since);
        merged.latched |= incoming.latched;
        return (merged, None);
    }
    if incoming.action.restrictiveness() > cur.action.restrictiveness() {
        (incoming.clone(), Some((incoming.action.clone(), cur.action.clone())))
    } else {
        (cur.clone(), Some((cur.action.clone(), incoming.action.clone())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeKind {
    Activated,
    Superseded,
    Revoked,
    /// A momentary action (reboot) was triggered.
    Fired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationChange {
    pub ts: u64,
    pub mac: MacAddr,
    pub category: Category,
    pub kind: ChangeKind,
    /// Active action after the change.
    pub action: Option<ControlAction>,
    pub previous: Option<ControlAction>,
    pub sources: Vec<Source>,
    pub latched: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedFeedback {
    pub on: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlWarning {
    UnknownToken { tag: String },
    UnknownPot { tag: String },
    NotAToken { tag: String },
    NotAPot { tag: String },
    RebootRateLimited { mac: MacAddr },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ApplyOutcome {
    pub changes: Vec<ActivationChange>,
    /// LED updates as (reader id, state).
    pub leds: Vec<(String, LedFeedback)>,
    pub warnings: Vec<ControlWarning>,
    pub conflicts: Vec<Conflict>,
}

/// Append-only log entry; replaying a log rebuilds the plane.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ControlEvent {
    Associate {
        ts: u64,
        token_id: String,
        #[serde(default)]
        label: String,
        macs: Vec<MacAddr>,
    },
    Configure {
        ts: u64,
        pot_id: String,
        actions: Vec<ControlAction>,
        modality: Modality,
    },
    Reader(ReaderEvent),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReaderState {
    pub pot: Option<String>,
    pub tokens: BTreeSet<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ControlPlane {
    tokens: BTreeMap<String, DeviceToken>,
    pots: BTreeMap<String, Pot>,
    readers: BTreeMap<String, ReaderState>,
    /// Continuous demands per reader, recomputed on every change.
    continuous: BTreeMap<String, BTreeMap<(MacAddr, Category), Activation>>,
    latched: ActivationState,
    active: ActivationState,
    leds: BTreeMap<String, bool>,
    last_reboot: BTreeMap<MacAddr, u64>,
    log: Vec<ControlEvent>,
}

impl ControlPlane {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn replay<'a>(events: impl IntoIterator<Item = &'a ControlEvent>) -> Result<Self, ControlError> {
        let mut plane = Self::new();
        for e in events {
            plane.apply(e.clone())?;
        }
        Ok(plane)
    }

    pub fn apply(&mut self, event: ControlEvent) -> Result<ApplyOutcome, ControlError> {
        let out = match &event {
            ControlEvent::Associate {
                ts,
                token_id,
                label,
                macs,
            } => self.associate_token(*ts, token_id, label, macs.clone())?,
            ControlEvent::Configure {
                ts,
                pot_id,
                actions,
                modality,
            } => self.configure_pot(*ts, pot_id, actions.clone(), *modality)?,
            ControlEvent::Reader(e) => self.apply_reader_state(e),
        };
        self.log.push(event);
        Ok(out)
    }

    /// Replaces any previous association in full.
    fn associate_token(
        &mut self,
        ts: u64,
        token_id: &str,
        label: &str,
        macs: Vec<MacAddr>,
    ) -> Result<ApplyOutcome, ControlError> {
        let token = DeviceToken::new(token_id, label, macs)?;
        self.tokens.insert(token.token_id.clone(), token);
        Ok(self.refresh_all(ts))
    }

    fn configure_pot(
        &mut self,
        ts: u64,
        pot_id: &str,
        actions: Vec<ControlAction>,
        modality: Modality,
    ) -> Result<ApplyOutcome, ControlError> {
        let pot = Pot::new(pot_id, actions, modality)?;
        self.pots.insert(pot.pot_id.clone(), pot);
        Ok(self.refresh_all(ts))
    }

    pub fn associate(
        &mut self,
        ts: u64,
        token_id: &str,
        label: &str,
        macs: Vec<MacAddr>,
    ) -> Result<ApplyOutcome, ControlError> {
        self.apply(ControlEvent::Associate {
            ts,
            token_id: token_id.to_string(),
            label: label.to_string(),
            macs,
        })
    }

    pub fn configure(
        &mut self,
        ts: u64,
        pot_id: &str,
        actions: Vec<ControlAction>,
        modality: Modality,
    ) -> Result<ApplyOutcome, ControlError> {
        self.apply(ControlEvent::Configure {
            ts,
            pot_id: pot_id.to_string(),
            actions,
            modality,
        })
    }

    pub fn reader_event(&mut self, e: ReaderEvent) -> ApplyOutcome {
        self.apply(ControlEvent::Reader(e)).expect("reader events never fail")
    }

    pub fn tokens(&self) -> impl Iterator<Item = &DeviceToken> {
        self.tokens.values()
    }

    pub fn token(&self, id: &str) -> Option<&DeviceToken> {
        self.tokens.get(id)
    }

    pub fn pots(&self) -> impl Iterator<Item = &Pot> {
        self.pots.values()
    }

    pub fn pot(&self, id: &str) -> Option<&Pot> {
        self.pots.get(id)
    }

    pub fn readers(&self) -> &BTreeMap<String, ReaderState> {
        &self.readers
    }

    pub fn active(&self) -> &ActivationState {
        &self.active
    }

    pub fn latched(&self) -> &ActivationState {
        &self.latched
    }

    pub fn log(&self) -> &[ControlEvent] {
        &self.log
    }

    pub fn active_for(&self, mac: MacAddr) -> impl Iterator<Item = (Category, &Activation)> {
        self.active
            .iter()
            .filter(move |((m, _), _)| *m == mac)
            .map(|((_, c), a)| (*c, a))
    }

    /// Continuous demands implied by a reader state under the current configuration.
    pub fn continuous_demands(
        &self,
        reader_id: &str,
        state: &ReaderState,
    ) -> BTreeMap<(MacAddr, Category), Activation> {
        let mut out: BTreeMap<(MacAddr, Category), Activation> = BTreeMap::new();
        let Some(pot) = state.pot.as_ref().and_then(|p| self.pots.get(p)) else {
            return out;
        };
        if pot.modality != Modality::Continuous {
            return out;
        }
        for token in state.tokens.iter().filter_map(|t| self.tokens.get(t)) {
            for mac in &token.macs {
                for action in pot.actions.iter().filter(|a| !a.is_momentary()) {
                    let demand = Activation {
                        action: action.clone(),
                        sources: BTreeSet::from([Source {
                            reader_id: reader_id.to_string(),
                            pot_id: pot.pot_id.clone(),
                            token_id: token.token_id.clone(),
                        }]),
                        since: 0,
                        latched: false,
                    };
                    let key = (*mac, action.category());
                    let merged = resolve_conflicts(out.get(&key), &demand).0;
                    out.insert(key, merged);
                }
            }
        }
        out
    }

    fn refresh_all(&mut self, ts: u64) -> ApplyOutcome {
        let readers: Vec<String> = self.readers.keys().cloned().collect();
        for r in &readers {
            self.rebuild_continuous(r, ts);
        }
        let mut out = ApplyOutcome::default();
        self.recompute(ts, &mut out);
        for r in &readers {
            self.update_led(r, &mut out, false);
        }
        out
    }

    fn rebuild_continuous(&mut self, reader_id: &str, ts: u64) {
        let state = self.readers.get(reader_id).cloned().unwrap_or_default();
        let mut fresh = self.continuous_demands(reader_id, &state);
        let old = self.continuous.get(reader_id);
        for (key, demand) in fresh.iter_mut() {
            demand.since = old
                .and_then(|o| o.get(key))
                .filter(|o| o.action == demand.action)
                .map_or(ts, |o| o.since);
        }
        if fresh.is_empty() {
            self.continuous.remove(reader_id);
        } else {
            self.continuous.insert(reader_id.to_string(), fresh);
        }
    }

    fn resolve_key(&self, key: &(MacAddr, Category), conflicts: &mut Vec<Conflict>) -> Option<Activation> {
        let mut demands: Vec<&Activation> = self.continuous.values().filter_map(|m| m.get(key)).collect();
        if let Some(l) = self.latched.get(key) {
            demands.push(l);
        }
        demands.sort_by(|a, b| a.since.cmp(&b.since).then_with(|| a.sources.cmp(&b.sources)));
        let mut current: Option<Activation> = None;
        for d in demands {
            let (next, conflict) = resolve_conflicts(current.as_ref(), d);
            if let Some((winner, loser)) = conflict {
                conflicts.push(Conflict {
                    mac: key.0,
                    category: key.1,
                    winner,
                    loser,
                });
            }
            current = Some(next);
        }
        current
    }

    fn recompute(&mut self, ts: u64, out: &mut ApplyOutcome) {
        let mut keys: BTreeSet<(MacAddr, Category)> = self.active.keys().copied().collect();
        keys.extend(self.latched.keys().copied());
        for m in self.continuous.values() {
            keys.extend(m.keys().copied());
        }
        for key in keys {
            let mut conflicts = Vec::new();
            let next = self.resolve_key(&key, &mut conflicts);
            let prev = self.active.get(&key);
            let prev_action = prev.map(|a| a.action.clone());
            let next_action = next.as_ref().map(|a| a.action.clone());
            if prev_action != next_action {
                out.conflicts.extend(conflicts);
                let kind = match (&prev_action, &next_action) {
                    (None, Some(_)) => ChangeKind::Activated,
                    (Some(_), None) => ChangeKind::Revoked,
                    _ => ChangeKind::Superseded,
                };
                out.changes.push(ActivationChange {
                    ts,
                    mac: key.0,
                    category: key.1,
                    kind,
                    action: next_action,
                    previous: prev_action,
                    sources: next
                        .as_ref()
                        .or(prev)
                        .map(|a| a.sources.iter().cloned().collect())
                        .unwrap_or_default(),
                    latched: next.as_ref().is_some_and(|a| a.latched),
                });
            }
            match next {
                Some(a) => self.active.insert(key, a),
                None => self.active.remove(&key),
            };
        }
    }

    fn update_led(&mut self, reader_id: &str, out: &mut ApplyOutcome, force: bool) {
        let on = self.readers.get(reader_id).is_some_and(|s| {
            s.pot.as_ref().is_some_and(|p| self.pots.contains_key(p))
                && s.tokens.iter().any(|t| self.tokens.contains_key(t))
        });
        let prev = self.leds.insert(reader_id.to_string(), on);
        if force || prev != Some(on) {
            out.leds.push((reader_id.to_string(), LedFeedback { on }));
        }
    }

    fn apply_reader_state(&mut self, e: &ReaderEvent) -> ApplyOutcome {
        let mut out = ApplyOutcome::default();
        let pot = match &e.pot_tag {
            None => None,
            Some(p) if !is_pot_id(p) => {
                out.warnings.push(ControlWarning::NotAPot { tag: p.clone() });
                None
            }
            Some(p) if !self.pots.contains_key(p) => {
                out.warnings.push(ControlWarning::UnknownPot { tag: p.clone() });
                None
            }
            Some(p) => Some(p.clone()),
        };
        let mut tokens = BTreeSet::new();
        for t in &e.token_tags {
            if !is_token_id(t) {
                out.warnings.push(ControlWarning::NotAToken { tag: t.clone() });
            } else if !self.tokens.contains_key(t) {
                out.warnings.push(ControlWarning::UnknownToken { tag: t.clone() });
            } else {
                tokens.insert(t.clone());
            }
        }
        let prev = self
            .readers
            .insert(
                e.reader_id.clone(),
                ReaderState {
                    pot: pot.clone(),
                    tokens: tokens.clone(),
                },
            )
            .unwrap_or_default();

        // Placements are tokens that were not already on this reader with this pot.
        let placed: Vec<&String> = if prev.pot == pot {
            tokens.difference(&prev.tokens).collect()
        } else {
            tokens.iter().collect()
        };
        let mut fired = Vec::new();
        if let Some(pot) = pot.as_ref().and_then(|p| self.pots.get(p)) {
            for token_id in placed {
                let token = &self.tokens[token_id];
                let source = Source {
                    reader_id: e.reader_id.clone(),
                    pot_id: pot.pot_id.clone(),
                    token_id: token_id.clone(),
                };
                for mac in &token.macs {
                    for action in &pot.actions {
                        if action.is_momentary() {
                            fired.push((*mac, action.clone(), source.clone()));
                        } else if pot.modality == Modality::Discrete {
                            let key = (*mac, action.category());
                            match self.latched.get_mut(&key) {
                                Some(l) if l.action == *action => {
                                    l.sources.insert(source.clone());
                                }
                                _ => {
                                    self.latched.insert(
                                        key,
                                        Activation {
                                            action: action.clone(),
                                            sources: BTreeSet::from([source.clone()]),
                                            since: e.ts,
                                            latched: true,
                                        },
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }

        self.rebuild_continuous(&e.reader_id, e.ts);
        self.recompute(e.ts, &mut out);

        for (mac, action, source) in fired {
            let limited = self
                .last_reboot
                .get(&mac)
                .is_some_and(|last| e.ts < last + REBOOT_INTERVAL_US);
            if limited {
                out.warnings.push(ControlWarning::RebootRateLimited { mac });
                continue;
            }
            self.last_reboot.insert(mac, e.ts);
            out.changes.push(ActivationChange {
                ts: e.ts,
                mac,
                category: action.category(),
                kind: ChangeKind::Fired,
                action: Some(action),
                previous: None,
                sources: vec![source],
                latched: false,
            });
        }
        let force = !out.changes.is_empty();
        self.update_led(&e.reader_id, &mut out, force);
        out
    }

    /// Pushes the device's active control state into the datapath. `base_mode`
    /// is the mode to fall back to when no connectivity action is active.
    pub fn sync_device(
        &self,
        dp: &mut Datapath,
        ctx: &NetworkContext,
        mac: MacAddr,
        base_mode: Mode,
    ) -> Result<(), DatapathError> {
        let get = |c| self.active.get(&(mac, c)).map(|a| &a.action);
        let mode = match get(Category::Connectivity) {
            Some(ControlAction::RemoveFromNetwork) => Mode::Isolated,
            Some(ControlAction::SwitchNetwork {
                network: Network::Privileged,
            }) => Mode::Privileged,
            Some(ControlAction::SwitchNetwork {
                network: Network::Unprivileged,
            }) => Mode::Unprivileged,
            _ => base_mode,
        };
        dp.set_mode(mac, mode)?;
        dp.set_logging(
            mac,
            matches!(get(Category::Logging), Some(ControlAction::LogAllTraffic)),
        )?;
        let rules = match get(Category::Access) {
            Some(ControlAction::RestrictAccess { resource }) => access_rules(
                ctx.resources.get(resource),
                resource,
                RuleAction::Drop,
                "restrict-access",
            ),
            Some(ControlAction::AllowResource { resource }) => access_rules(
                ctx.resources.get(resource),
                resource,
                RuleAction::Accept,
                "allow-resource",
            ),
            _ => Vec::new(),
        };
        dp.set_access_rules(mac, rules)
    }

    /// Applies changes to the datapath: syncs each touched device and
    /// performs fired reboots. Unknown devices are reported, not fatal.
    pub fn apply_changes(
        &self,
        dp: &mut Datapath,
        ctx: &NetworkContext,
        changes: &[ActivationChange],
        base_mode: impl Fn(MacAddr) -> Mode,
    ) -> Vec<DatapathError> {
        let mut errors = Vec::new();
        let macs: BTreeSet<MacAddr> = changes.iter().map(|c| c.mac).collect();
        for mac in macs {
            if let Err(e) = self.sync_device(dp, ctx, mac, base_mode(mac)) {
                errors.push(e);
            }
        }
        for c in changes.iter().filter(|c| c.kind == ChangeKind::Fired) {
            if let Err(e) = dp.reboot(c.mac, c.ts) {
                errors.push(e);
            }
        }
        errors
    }
}

fn access_rules(nets: Option<&Vec<Ipv4Net>>, resource: &str, action: RuleAction, tag: &str) -> Vec<ConcreteRule> {
    let mut rules = Vec::new();
    for net in nets.into_iter().flatten() {
        for direction in [Direction::FromDevice, Direction::ToDevice] {
            rules.push(ConcreteRule {
                priority: rules.len() as u32,
                direction,
                remote: *net,
                protocol: None,
                remote_port: None,
                local_port: None,
                initiated_by: None,
                action,
                provenance: Provenance::new("control", format!("{tag}:{resource}")),
                privileged_only: false,
            });
        }
    }
    rules
}

pub const CHANGES_TOPIC: &str = "dada/control/changes";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BusMessage {
    pub topic: String,
    pub payload: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReaderPayload {
    ts: u64,
    pot: Option<String>,
    tokens: Vec<String>,
}

fn valid_reader_id(id: &str) -> bool {
    !id.is_empty() && !id.contains(['/', '+', '#'])
}

fn reader_topic(topic: &str, leaf: &str) -> Option<String> {
    let id = topic
        .strip_prefix("dada/reader/")?
        .strip_suffix(leaf)?
        .strip_suffix('/')?;
    valid_reader_id(id).then(|| id.to_string())
}

pub fn decode_reader_message(msg: &BusMessage) -> Result<ReaderEvent, ControlError> {
    let malformed = |m: String| ControlError::MalformedMessage {
        topic: msg.topic.clone(),
        message: m,
    };
    let reader_id = reader_topic(&msg.topic, "state").ok_or_else(|| malformed("not a reader state topic".into()))?;
    let p: ReaderPayload = serde_json::from_slice(&msg.payload).map_err(|e| malformed(e.to_string()))?;
    Ok(ReaderEvent {
        reader_id,
        ts: p.ts,
        pot_tag: p.pot,
        token_tags: p.tokens.into_iter().collect(),
    })
}

pub fn encode_reader_event(e: &ReaderEvent) -> BusMessage {
    let payload = ReaderPayload {
        ts: e.ts,
        pot: e.pot_tag.clone(),
        tokens: e.token_tags.iter().cloned().collect(),
    };
    BusMessage {
        topic: format!("dada/reader/{}/state", e.reader_id),
        payload: serde_json::to_vec(&payload).expect("payload serializes"),
    }
}

pub fn encode_led(reader_id: &str, led: LedFeedback) -> BusMessage {
    BusMessage {
        topic: format!("dada/reader/{reader_id}/led"),
        payload: serde_json::to_vec(&led).expect("led serializes"),
    }
}

pub fn decode_led(msg: &BusMessage) -> Result<(String, LedFeedback), ControlError> {
    let malformed = |m: String| ControlError::MalformedMessage {
        topic: msg.topic.clone(),
        message: m,
    };
    let reader_id = reader_topic(&msg.topic, "led").ok_or_else(|| malformed("not a reader led topic".into()))?;
    let led = serde_json::from_slice(&msg.payload).map_err(|e| malformed(e.to_string()))?;
    Ok((reader_id, led))
}

pub fn encode_change(change: &ActivationChange) -> BusMessage {
    BusMessage {
        topic: CHANGES_TOPIC.to_string(),
        payload: serde_json::to_vec(change).expect("change serializes"),
    }
}

/// All outbound messages for one outcome: changes first, then LEDs.
pub fn outcome_messages(out: &ApplyOutcome) -> Vec<BusMessage> {
    out.changes
        .iter()
        .map(encode_change)
        .chain(out.leds.iter().map(|(r, l)| encode_led(r, *l)))
        .collect()
}
