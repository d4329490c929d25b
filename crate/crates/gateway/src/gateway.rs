//! The running gateway: one pipeline, its persistent store and the event feed.
//!
//! Every mutation is validated, appended to the store, then applied, so a
//! restart that replays the log lands in the same state.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dada_core::compiler::{compile, NetworkContext};
use dada_core::control::{
    decode_reader_message, ActivationState, ApplyOutcome, BusMessage, Category, ControlAction, ControlError,
    ControlEvent, DeviceToken, Modality, Pot, ReaderEvent, ReaderState, Source,
};
use dada_core::datapath::{DatapathConfig, LatencyReport, Mode, PacketEvent, Verdict};
use dada_core::flow::MonitorConfig;
use dada_core::mud::{parse_mud, MudProfile};
use dada_core::profiler::{
    export_profile, import_profile, merge_profiles, AnomalyReport, DeviceProfile, ProfileError, ProfileLearner,
    SharedProfile,
};
use dada_core::simulator::{device_class, Expectations, Pipeline, Scenario, SimError};
use dada_core::MacAddr;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::broadcast;

use crate::config::GatewayConfig;
use crate::store::{GenerationRecord, StateStore, StoreError, StoreRecord};

/// Events kept for `Last-Event-ID` resumption.
pub const HISTORY_LEN: usize = 1024;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("{path}: {message}")]
    Load { path: PathBuf, message: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("unknown device {0}")]
    UnknownDevice(MacAddr),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GatewayEvent {
    ActivationChange(dada_core::control::ActivationChange),
    Anomaly(AnomalyReport),
    Led { reader_id: String, on: bool },
}

impl GatewayEvent {
    pub fn name(&self) -> &'static str {
        match self {
            GatewayEvent::ActivationChange(_) => "activation_change",
            GatewayEvent::Anomaly(_) => "anomaly",
            GatewayEvent::Led { .. } => "led",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequenced {
    pub id: u64,
    pub event: GatewayEvent,
}

/// A subscription taken atomically with the history it follows.
pub struct Subscription {
    pub backlog: Vec<Sequenced>,
    pub live: broadcast::Receiver<Sequenced>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationEntry {
    pub mac: MacAddr,
    pub category: Category,
    pub action: ControlAction,
    pub sources: Vec<Source>,
    pub since: u64,
    pub latched: bool,
}

fn entries(state: &ActivationState) -> Vec<ActivationEntry> {
    state
        .iter()
        .map(|((mac, category), a)| ActivationEntry {
            mac: *mac,
            category: *category,
            action: a.action.clone(),
            sources: a.sources.iter().cloned().collect(),
            since: a.since,
            latched: a.latched,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Activations {
    pub active: Vec<ActivationEntry>,
    pub latched: Vec<ActivationEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceView {
    pub mac: MacAddr,
    pub ipv4: std::net::Ipv4Addr,
    pub label: String,
    pub manufacturer: String,
    pub model: String,
    pub mud_url: Option<String>,
    pub class_id: Option<String>,
    pub managed: bool,
    pub mode: Mode,
    pub quarantined: bool,
    pub logging: bool,
    pub generation: u64,
    pub activations: Vec<ActivationEntry>,
}

/// Everything that must survive a restart, in canonical order.
#[derive(Serialize)]
struct CanonicalState<'a> {
    tokens: Vec<&'a DeviceToken>,
    pots: Vec<&'a Pot>,
    readers: &'a BTreeMap<String, ReaderState>,
    active: Vec<ActivationEntry>,
    latched: Vec<ActivationEntry>,
    labels: &'a BTreeMap<MacAddr, String>,
    profiles: &'a BTreeMap<String, DeviceProfile>,
}

/// Reads every `*.json` in `dir` as a MUD file, keyed by mud-url.
pub fn load_mud_dir(dir: &Path) -> Result<BTreeMap<String, MudProfile>, GatewayError> {
    let load_err = |path: &Path, message: String| GatewayError::Load {
        path: path.to_path_buf(),
        message,
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| load_err(dir, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut out = BTreeMap::new();
    for path in paths {
        let text = fs::read_to_string(&path).map_err(|e| load_err(&path, e.to_string()))?;
        let p = parse_mud(&text).map_err(|e| load_err(&path, e.to_string()))?;
        out.insert(p.mud_url.clone(), p);
    }
    Ok(out)
}

pub fn load_context(path: &Path) -> Result<NetworkContext, GatewayError> {
    let text = fs::read_to_string(path).map_err(|e| GatewayError::Load {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    NetworkContext::from_json(&text).map_err(|e| GatewayError::Load {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Monotone µs clock continuing from the latest stored timestamp.
#[derive(Debug)]
struct Clock {
    epoch: Instant,
    offset: u64,
    last: u64,
}

impl Clock {
    fn now(&self) -> u64 {
        let elapsed = self.epoch.elapsed().as_micros() as u64;
        self.last.max(self.offset + elapsed)
    }

    /// Clamps `ts` to be no earlier than anything already seen.
    fn stamp(&mut self, ts: u64) -> u64 {
        self.last = self.last.max(ts);
        self.last
    }
}

pub struct Gateway {
    config: GatewayConfig,
    ctx: NetworkContext,
    pipeline: Pipeline,
    store: StateStore,
    learner: ProfileLearner,
    labels: BTreeMap<MacAddr, String>,
    anomalies: Vec<AnomalyReport>,
    clock: Clock,
    tx: broadcast::Sender<Sequenced>,
    history: VecDeque<Sequenced>,
    next_id: u64,
}

impl Gateway {
    /// Loads context and MUD files, installs rule sets and replays the store.
    pub fn open(config: GatewayConfig) -> Result<Self, GatewayError> {
        let ctx = load_context(&config.context)?;
        let muds = load_mud_dir(&config.mud_dir)?;
        let mut store = StateStore::open(&config.state_dir)?;
        let scenario = Scenario {
            name: "gateway".into(),
            seed: 0,
            horizon_s: 0,
            context: ctx.clone(),
            scripts: Vec::new(),
            profiles: BTreeMap::new(),
            control_events: Vec::new(),
            modes: BTreeMap::new(),
            datapath: DatapathConfig {
                gateway_ip: ctx.gateway_ip,
                unmanaged: config.unmanaged,
                ..DatapathConfig::default()
            },
            monitor: MonitorConfig {
                window_len_s: config.window_len_s,
                ..MonitorConfig::default()
            },
            profiler: config.profiler,
            training_windows: 0,
            auto_mitigate: true,
            expect: Expectations::default(),
        };
        let library = store.profiles().values().cloned().collect();
        let mut pipeline = Pipeline::new(&scenario, library)?;

        for dev in &ctx.devices {
            let Some(url) = &dev.mud_url else { continue };
            let Some(mud) = muds.get(url) else {
                tracing::warn!(mac = %dev.mac, url, "no MUD file for device, leaving it unmanaged");
                continue;
            };
            let (mut rs, warnings) = compile(mud, &ctx, dev).map_err(|e| GatewayError::Load {
                path: config.mud_dir.clone(),
                message: format!("{url}: {e}"),
            })?;
            for w in warnings {
                tracing::warn!(mac = %dev.mac, "{w:?}");
            }
            let hash: [u8; 32] = Sha256::digest(rs.canonical_bytes()).into();
            rs.generation = match store.generation(dev.mac) {
                Some(g) if g.hash == hash => g.generation,
                Some(g) => g.generation + 1,
                None => 1,
            };
            let generation = pipeline.install_ruleset(rs);
            store.set_generation(dev.mac, GenerationRecord { generation, hash })?;
        }

        let mut labels: BTreeMap<MacAddr, String> = ctx
            .devices
            .iter()
            .filter(|d| !d.label.is_empty())
            .map(|d| (d.mac, d.label.clone()))
            .collect();
        let mut anomalies = Vec::new();
        for record in store.records().to_vec() {
            match record {
                StoreRecord::Control { event } => {
                    if let Err(e) = pipeline.submit(event) {
                        tracing::warn!("skipping stored control event: {e}");
                    }
                }
                StoreRecord::Label { mac, label, .. } => {
                    labels.insert(mac, label);
                }
                StoreRecord::Anomaly { report, .. } => {
                    pipeline.remitigate(&report);
                    anomalies.push(report);
                }
            }
        }
        pipeline.take_changes();

        let offset = store.last_ts();
        let (tx, _) = broadcast::channel(HISTORY_LEN);
        Ok(Self {
            learner: ProfileLearner::new(config.profiler),
            config,
            ctx,
            pipeline,
            store,
            labels,
            anomalies,
            clock: Clock {
                epoch: Instant::now(),
                offset,
                last: offset,
            },
            tx,
            history: VecDeque::new(),
            next_id: 1,
        })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn context(&self) -> &NetworkContext {
        &self.ctx
    }

    pub fn now(&self) -> u64 {
        self.clock.now()
    }

    fn publish(&mut self, event: GatewayEvent) {
        let s = Sequenced {
            id: self.next_id,
            event,
        };
        self.next_id += 1;
        if self.history.len() == HISTORY_LEN {
            self.history.pop_front();
        }
        self.history.push_back(s.clone());
        // No receivers is fine.
        let _ = self.tx.send(s);
    }

    /// Events after `last_id` still in history, plus a live receiver.
    pub fn subscribe(&self, last_id: Option<u64>) -> Subscription {
        let backlog = match last_id {
            Some(id) => self.history.iter().filter(|s| s.id > id).cloned().collect(),
            None => Vec::new(),
        };
        Subscription {
            backlog,
            live: self.tx.subscribe(),
        }
    }

    fn publish_outcome(&mut self, out: &ApplyOutcome) {
        for c in &out.changes {
            self.publish(GatewayEvent::ActivationChange(c.clone()));
        }
        for (reader_id, led) in &out.leds {
            self.publish(GatewayEvent::Led {
                reader_id: reader_id.clone(),
                on: led.on,
            });
        }
    }

    fn control(&mut self, event: ControlEvent) -> Result<ApplyOutcome, GatewayError> {
        self.store.append(StoreRecord::Control { event: event.clone() })?;
        let out = self.pipeline.submit(event)?;
        self.pipeline.take_changes();
        self.publish_outcome(&out);
        self.collect_windows()?;
        Ok(out)
    }

    pub fn devices(&self) -> Vec<DeviceView> {
        let dp = self.pipeline.datapath();
        self.ctx
            .devices
            .iter()
            .map(|d| {
                let state = dp.device(d.mac);
                let mut activations = entries(self.pipeline.control().active());
                activations.retain(|a| a.mac == d.mac);
                DeviceView {
                    mac: d.mac,
                    ipv4: d.ipv4,
                    label: self.labels.get(&d.mac).cloned().unwrap_or_default(),
                    manufacturer: d.manufacturer.clone(),
                    model: d.model.clone(),
                    mud_url: d.mud_url.clone(),
                    class_id: device_class(&self.ctx, d.mac),
                    managed: state.is_some_and(|s| s.is_managed()),
                    mode: state.map(|s| s.mode).unwrap_or_default(),
                    quarantined: state.is_some_and(|s| s.quarantined),
                    logging: state.is_some_and(|s| s.logging),
                    generation: state.map_or(0, |s| s.generation),
                    activations,
                }
            })
            .collect()
    }

    pub fn set_label(&mut self, mac: MacAddr, label: &str) -> Result<(), GatewayError> {
        if self.ctx.device(mac).is_none() {
            return Err(GatewayError::UnknownDevice(mac));
        }
        let ts = self.clock.stamp(self.clock.now());
        self.store.append(StoreRecord::Label {
            ts,
            mac,
            label: label.to_string(),
        })?;
        self.labels.insert(mac, label.to_string());
        Ok(())
    }

    pub fn tokens(&self) -> Vec<DeviceToken> {
        self.pipeline.control().tokens().cloned().collect()
    }

    pub fn pots(&self) -> Vec<Pot> {
        self.pipeline.control().pots().cloned().collect()
    }

    pub fn associate(&mut self, token_id: &str, label: &str, macs: Vec<MacAddr>) -> Result<ApplyOutcome, GatewayError> {
        DeviceToken::new(token_id, label, macs.clone())?;
        if let Some(mac) = macs.iter().find(|m| self.ctx.device(**m).is_none()) {
            return Err(GatewayError::UnknownDevice(*mac));
        }
        let ts = self.clock.stamp(self.clock.now());
        self.control(ControlEvent::Associate {
            ts,
            token_id: token_id.to_string(),
            label: label.to_string(),
            macs,
        })
    }

    pub fn configure(
        &mut self,
        pot_id: &str,
        actions: Vec<ControlAction>,
        modality: Modality,
    ) -> Result<ApplyOutcome, GatewayError> {
        Pot::new(pot_id, actions.clone(), modality)?;
        let ts = self.clock.stamp(self.clock.now());
        self.control(ControlEvent::Configure {
            ts,
            pot_id: pot_id.to_string(),
            actions,
            modality,
        })
    }

    /// Applies a reader state report. Timestamps older than the gateway clock
    /// are raised to it so the log stays ordered.
    pub fn reader_event(&mut self, mut e: ReaderEvent) -> Result<ApplyOutcome, GatewayError> {
        e.ts = self.clock.stamp(e.ts);
        self.control(ControlEvent::Reader(e))
    }

    /// Decodes and applies a `dada/reader/<id>/state` message.
    pub fn handle_bus_message(&mut self, msg: &BusMessage) -> Result<ApplyOutcome, GatewayError> {
        let e = decode_reader_message(msg)?;
        self.reader_event(e)
    }

    pub fn readers(&self) -> &BTreeMap<String, ReaderState> {
        self.pipeline.control().readers()
    }

    pub fn activations(&self) -> Activations {
        let c = self.pipeline.control();
        Activations {
            active: entries(c.active()),
            latched: entries(c.latched()),
        }
    }

    pub fn anomalies(&self) -> &[AnomalyReport] {
        &self.anomalies
    }

    pub fn latency(&self) -> LatencyReport {
        self.pipeline.datapath().latency_report().unwrap_or(LatencyReport {
            buckets: Vec::new(),
            count: 0,
            mean_ns: 0.0,
            p50_ns: 0,
            p99_ns: 0,
        })
    }

    pub fn packets_processed(&self) -> u64 {
        self.pipeline.datapath().packets_processed()
    }

    /// Runs one packet through the datapath at `max(e.ts, clock)`.
    pub fn ingest(&mut self, mut e: PacketEvent) -> Result<Verdict, GatewayError> {
        e.ts = self.clock.stamp(e.ts);
        let v = self.pipeline.step(&e)?;
        self.collect_windows()?;
        Ok(v)
    }

    /// Advances the pipeline to the current clock, closing due windows.
    pub fn tick(&mut self) -> Result<(), GatewayError> {
        let now = self.clock.stamp(self.clock.now());
        self.pipeline.advance(now)?;
        self.collect_windows()
    }

    /// Handles closed windows: learns profiles for classes that lack one and
    /// records anomaly reports.
    fn collect_windows(&mut self) -> Result<(), GatewayError> {
        for fv in self.pipeline.take_features() {
            let Some(class) = device_class(&self.ctx, fv.device_mac) else {
                continue;
            };
            if self.store.profiles().contains_key(&class) {
                continue;
            }
            self.learner.observe(&class, fv);
            if self.learner.history_len(&class) >= self.config.profiler.min_windows {
                let p = self.learner.learn(&class)?;
                tracing::info!(class, windows = p.sample_count, "learned device profile");
                self.store.put_profile(p.clone())?;
                self.pipeline.set_profile(p);
            }
        }
        for report in self.pipeline.take_reports() {
            let ts = self.clock.last;
            self.store.append(StoreRecord::Anomaly {
                ts,
                report: report.clone(),
            })?;
            self.anomalies.push(report.clone());
            self.publish(GatewayEvent::Anomaly(report));
        }
        self.pipeline.take_changes();
        Ok(())
    }

    pub fn profiles(&self) -> &BTreeMap<String, DeviceProfile> {
        self.store.profiles()
    }

    pub fn export_profiles(&self) -> Vec<SharedProfile> {
        self.store
            .profiles()
            .values()
            .map(|p| export_profile(p, &self.config.profiler))
            .collect()
    }

    /// Canonical serialization of the persisted state.
    pub fn canonical_state(&self) -> Vec<u8> {
        let c = self.pipeline.control();
        let state = CanonicalState {
            tokens: c.tokens().collect(),
            pots: c.pots().collect(),
            readers: c.readers(),
            active: entries(c.active()),
            latched: entries(c.latched()),
            labels: &self.labels,
            profiles: self.store.profiles(),
        };
        serde_json::to_vec(&state).expect("state serializes")
    }
}

/// Merges shared profiles into the store at `dir`. Returns the affected class ids.
pub fn import_into_store(dir: &Path, docs: &[SharedProfile]) -> Result<Vec<String>, GatewayError> {
    let mut store = StateStore::open(dir)?;
    let mut classes = Vec::new();
    for doc in docs {
        let shared = import_profile(doc)?;
        let merged = match store.profiles().get(&shared.class_id) {
            Some(local) => merge_profiles(local, &shared)?,
            None => shared,
        };
        classes.push(merged.class_id.clone());
        store.put_profile(merged)?;
    }
    Ok(classes)
}
