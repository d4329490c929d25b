//! Reference model of token/pot semantics, plus a generator of event sequences.

use std::collections::{BTreeMap, BTreeSet};

use dada_core::control::{Category, ControlAction, ControlEvent, ControlPlane, Modality, Network, ReaderEvent};
use dada_core::MacAddr;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MAC_A: MacAddr = MacAddr::new([0x02, 0, 0, 0, 2, 1]);
pub const MAC_B: MacAddr = MacAddr::new([0x02, 0, 0, 0, 2, 2]);
pub const MAC_C: MacAddr = MacAddr::new([0x02, 0, 0, 0, 2, 3]);

const READERS: [&str; 3] = ["hall", "kitchen", "desk"];
const TAGS: [&str; 6] = ["tok-a", "tok-b", "tok-ab", "tok-c", "tok-ghost", "badge-7"];

/// Pots whose actions have distinct ranks within each category, so the
/// winner for a key never depends on tie-breaking.
pub fn pots() -> Vec<(&'static str, Vec<ControlAction>, Modality)> {
    let printer = || "printer".to_string();
    vec![
        (
            "pot-isolate",
            vec![ControlAction::RemoveFromNetwork],
            Modality::Continuous,
        ),
        (
            "pot-quiet",
            vec![
                ControlAction::SwitchNetwork {
                    network: Network::Unprivileged,
                },
                ControlAction::LogAllTraffic,
            ],
            Modality::Continuous,
        ),
        (
            "pot-restrict",
            vec![ControlAction::RestrictAccess { resource: printer() }],
            Modality::Continuous,
        ),
        ("pot-log", vec![ControlAction::LogAllTraffic], Modality::Discrete),
        ("pot-nolog", vec![ControlAction::StopLogging], Modality::Discrete),
        (
            "pot-trust",
            vec![
                ControlAction::SwitchNetwork {
                    network: Network::Privileged,
                },
                ControlAction::AllowResource { resource: printer() },
            ],
            Modality::Discrete,
        ),
        ("pot-reboot", vec![ControlAction::Reboot], Modality::Discrete),
        (
            "pot-lockout",
            vec![ControlAction::RemoveFromNetwork],
            Modality::Discrete,
        ),
    ]
}

pub fn setup_events() -> Vec<ControlEvent> {
    let mut out = vec![
        assoc("tok-a", vec![MAC_A]),
        assoc("tok-b", vec![MAC_B]),
        assoc("tok-ab", vec![MAC_A, MAC_B]),
        assoc("tok-c", vec![MAC_C]),
    ];
    for (id, actions, modality) in pots() {
        out.push(ControlEvent::Configure {
            ts: 0,
            pot_id: id.into(),
            actions,
            modality,
        });
    }
    out
}

fn assoc(id: &str, macs: Vec<MacAddr>) -> ControlEvent {
    ControlEvent::Associate {
        ts: 0,
        token_id: id.into(),
        label: id.into(),
        macs,
    }
}

/// `n` reader events with non-decreasing timestamps, including stray tags.
pub fn gen_reader_events(seed: u64, n: usize) -> Vec<ReaderEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pot_ids: Vec<&str> = pots().into_iter().map(|p| p.0).collect();
    let mut ts = 1_000_000;
    (0..n)
        .map(|_| {
            ts += rng.gen_range(0..40_000_000);
            let pot_tag = match rng.gen_range(0..10) {
                0 | 1 => None,
                2 => Some("pot-unknown".to_string()),
                _ => Some(pot_ids.choose(&mut rng).unwrap().to_string()),
            };
            let token_tags = TAGS
                .iter()
                .filter(|_| rng.gen_bool(0.3))
                .map(|t| t.to_string())
                .collect();
            ReaderEvent {
                reader_id: READERS.choose(&mut rng).unwrap().to_string(),
                ts,
                pot_tag,
                token_tags,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct ReferenceModel {
    tokens: BTreeMap<String, Vec<MacAddr>>,
    pots: BTreeMap<String, (Vec<ControlAction>, Modality)>,
    readers: BTreeMap<String, (Option<String>, BTreeSet<String>)>,
    pub latched: BTreeMap<(MacAddr, Category), ControlAction>,
}

fn rank(a: &ControlAction) -> u8 {
    match a {
        ControlAction::RemoveFromNetwork => 3,
        ControlAction::SwitchNetwork {
            network: Network::Unprivileged,
        }
        | ControlAction::RestrictAccess { .. }
        | ControlAction::LogAllTraffic => 2,
        _ => 1,
    }
}

impl ReferenceModel {
    pub fn new() -> Self {
        let mut m = Self::default();
        for (id, macs) in [
            ("tok-a", vec![MAC_A]),
            ("tok-b", vec![MAC_B]),
            ("tok-ab", vec![MAC_A, MAC_B]),
            ("tok-c", vec![MAC_C]),
        ] {
            m.tokens.insert(id.into(), macs);
        }
        for (id, actions, modality) in pots() {
            m.pots.insert(id.into(), (actions, modality));
        }
        m
    }

    /// Applies a reader event; returns true if it placed a token on a
    /// discrete pot (the only way latched state may change).
    pub fn apply(&mut self, e: &ReaderEvent) -> bool {
        let pot = e.pot_tag.clone().filter(|p| self.pots.contains_key(p));
        let tokens: BTreeSet<String> = e
            .token_tags
            .iter()
            .filter(|t| self.tokens.contains_key(*t))
            .cloned()
            .collect();
        let (prev_pot, prev_tokens) = self
            .readers
            .insert(e.reader_id.clone(), (pot.clone(), tokens.clone()))
            .unwrap_or_default();
        let placed: Vec<&String> = if prev_pot == pot {
            tokens.difference(&prev_tokens).collect()
        } else {
            tokens.iter().collect()
        };
        let Some((actions, Modality::Discrete)) = pot.as_ref().map(|p| &self.pots[p]) else {
            return false;
        };
        let mut touched = false;
        for t in placed {
            for mac in &self.tokens[t] {
                for a in actions.iter().filter(|a| **a != ControlAction::Reboot) {
                    self.latched.insert((*mac, a.category()), a.clone());
                    touched = true;
                }
            }
        }
        touched
    }

    /// Continuous demands of the current reader states.
    pub fn continuous(&self) -> BTreeMap<(MacAddr, Category), BTreeSet<ControlAction>> {
        let mut out: BTreeMap<_, BTreeSet<_>> = BTreeMap::new();
        for (pot, tokens) in self.readers.values() {
            let Some((actions, Modality::Continuous)) = pot.as_ref().map(|p| &self.pots[p]) else {
                continue;
            };
            for t in tokens {
                for mac in &self.tokens[t] {
                    for a in actions {
                        out.entry((*mac, a.category())).or_default().insert(a.clone());
                    }
                }
            }
        }
        out
    }

    pub fn expected_active(&self) -> BTreeMap<(MacAddr, Category), ControlAction> {
        let mut demands = self.continuous();
        for (k, a) in &self.latched {
            demands.entry(*k).or_default().insert(a.clone());
        }
        demands
            .into_iter()
            .map(|(k, set)| (k, set.into_iter().max_by_key(rank).expect("non-empty")))
            .collect()
    }

    pub fn reader_holds(&self, reader: &str, pot: &str, token: &str) -> bool {
        self.readers
            .get(reader)
            .is_some_and(|(p, ts)| p.as_deref() == Some(pot) && ts.contains(token))
    }

    pub fn is_continuous_pot(&self, pot: &str) -> bool {
        self.pots.get(pot).is_some_and(|(_, m)| *m == Modality::Continuous)
    }
}

/// Checks one step of `plane` against `model`. Returns a description of the
/// first broken property.
pub fn check_step(
    plane: &ControlPlane,
    model: &ReferenceModel,
    latched_before: &BTreeMap<(MacAddr, Category), ControlAction>,
    discrete_placement: bool,
) -> Result<(), String> {
    // (a) one entry per key, in the key's category
    for ((mac, cat), a) in plane.active() {
        if a.action.category() != *cat {
            return Err(format!("{mac}/{cat}: action {} filed under wrong category", a.action));
        }
    }
    let got: BTreeMap<_, _> = plane.active().iter().map(|(k, a)| (*k, a.action.clone())).collect();
    let want = model.expected_active();
    if got != want {
        return Err(format!("active state differs: got {got:?}, want {want:?}"));
    }
    // (b) every continuous source is still on its reader
    for ((mac, cat), a) in plane.active() {
        for s in &a.sources {
            if model.is_continuous_pot(&s.pot_id) && !model.reader_holds(&s.reader_id, &s.pot_id, &s.token_id) {
                return Err(format!("{mac}/{cat}: stale continuous source {s:?}"));
            }
        }
    }
    // (c) latched state only changes on discrete placements
    let latched: BTreeMap<_, _> = plane.latched().iter().map(|(k, a)| (*k, a.action.clone())).collect();
    if latched != model.latched {
        return Err(format!(
            "latched state differs: got {latched:?}, want {:?}",
            model.latched
        ));
    }
    if !discrete_placement && &latched != latched_before {
        return Err("latched state changed without a discrete placement".into());
    }
    Ok(())
}

/// Runs setup plus `events`, checking every step and finally replay.
pub fn run_sequence(events: &[ReaderEvent]) -> Result<(), String> {
    let mut plane = ControlPlane::new();
    for e in setup_events() {
        plane.apply(e).map_err(|e| e.to_string())?;
    }
    let mut model = ReferenceModel::new();
    for (i, e) in events.iter().enumerate() {
        let before = model.latched.clone();
        plane.reader_event(e.clone());
        let placed = model.apply(e);
        check_step(&plane, &model, &before, placed).map_err(|m| format!("event {i}: {m}"))?;
    }
    // (d) replay from the log
    let replayed = ControlPlane::replay(plane.log()).map_err(|e| e.to_string())?;
    if replayed != plane {
        return Err("replayed plane differs from live plane".into());
    }
    Ok(())
}
