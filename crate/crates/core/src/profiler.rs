//! Centroid and sigma-band behaviour profiles.
//!
//! A profile is the per-dimension mean and standard deviation of a device
//! class's window features. Scoring is the largest per-dimension z-score;
//! identification is nearest centroid under sigma-normalized distance.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::net::Ipv4Addr;

use ipnet::Ipv4Net;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::flow::{Endpoint, FeatureVector, DIMS, DIM_NAMES};
use crate::net::{MacAddr, Protocol};

pub const SIGMA_FLOOR: f64 = 1e-6;
pub const SHARED_SCHEMA: &str = "dada.profile/1";

#[derive(Debug, Error, PartialEq)]
pub enum ProfileError {
    #[error("need at least {needed} windows, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("class mismatch: {local} vs {shared}")]
    ClassMismatch { local: String, shared: String },
    #[error("unsupported shared profile schema {0:?}")]
    Schema(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfilerConfig {
    pub alert_threshold: f64,
    pub isolate_threshold: f64,
    pub identification_gate: f64,
    pub min_windows: usize,
    /// Contributors required before an IP-literal endpoint is exported.
    pub k_anonymity: u32,
    pub history_len: usize,
    /// Sigma is also floored at this fraction of the centroid magnitude.
    /// Zero keeps the plain `SIGMA_FLOOR`.
    pub relative_sigma_floor: f64,
    /// Windows after a device first appears that are neither learned nor scored.
    pub warmup_windows: u64,
}

impl Default for ProfilerConfig {
    fn default() -> Self {
        Self {
            alert_threshold: 3.0,
            isolate_threshold: 6.0,
            identification_gate: 4.0,
            min_windows: 10,
            k_anonymity: 2,
            history_len: 1000,
            relative_sigma_floor: 0.0,
            warmup_windows: 1,
        }
    }
}

/// Pseudonymous class identifier: truncated sha256 of manufacturer and model.
pub fn class_id(manufacturer: &str, model: &str) -> String {
    let mut h = Sha256::new();
    h.update(manufacturer.as_bytes());
    h.update([0]);
    h.update(model.as_bytes());
    hex::encode(&h.finalize()[..8])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub class_id: String,
    pub dims: Vec<f64>,
    pub dims_sigma: Vec<f64>,
    pub sample_count: u64,
    /// Endpoint to number of contributing profiles that observed it.
    /// Serialized as a list of endpoints with a `support` field.
    #[serde(with = "endpoint_support")]
    pub endpoint_set: BTreeMap<Endpoint, u32>,
    pub version: u32,
}

mod endpoint_support {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::flow::Endpoint;
    use crate::net::Protocol;

    #[derive(Serialize, Deserialize)]
    struct Entry {
        host: String,
        protocol: Protocol,
        port: u16,
        support: u32,
    }

    pub fn serialize<S: Serializer>(map: &BTreeMap<Endpoint, u32>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(map.iter().map(|(e, n)| Entry {
            host: e.host.clone(),
            protocol: e.protocol,
            port: e.port,
            support: *n,
        }))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<Endpoint, u32>, D::Error> {
        Ok(Vec::<Entry>::deserialize(d)?
            .into_iter()
            .map(|e| {
                let endpoint = Endpoint {
                    host: e.host,
                    protocol: e.protocol,
                    port: e.port,
                };
                (endpoint, e.support)
            })
            .collect())
    }
}

impl DeviceProfile {
    pub fn endpoints(&self) -> BTreeSet<&Endpoint> {
        self.endpoint_set.keys().collect()
    }

    fn check_dims(&self, found: usize) -> Result<(), ProfileError> {
        if found != self.dims.len() {
            return Err(ProfileError::DimMismatch {
                expected: self.dims.len(),
                found,
            });
        }
        Ok(())
    }
}

fn private_literal(host: &str) -> bool {
    let ip = host
        .parse::<Ipv4Net>()
        .map(|n| n.addr())
        .or_else(|_| host.parse::<Ipv4Addr>());
    ip.is_ok_and(|ip| ip.is_private() || ip.is_loopback() || ip.is_link_local())
}

fn ip_literal(host: &str) -> bool {
    host.parse::<Ipv4Net>().is_ok() || host.parse::<Ipv4Addr>().is_ok()
}

/// Per-dimension mean and sample standard deviation, floored.
pub fn learn_profile(
    history: &[FeatureVector],
    class_id: &str,
    config: &ProfilerConfig,
) -> Result<DeviceProfile, ProfileError> {
    let min = config.min_windows.max(1);
    if history.len() < min {
        return Err(ProfileError::InsufficientData {
            needed: min,
            got: history.len(),
        });
    }
    let n = history.len() as f64;
    let mut dims = vec![0.0; DIMS];
    let mut sigma = vec![0.0; DIMS];
    for i in 0..DIMS {
        let mean = history.iter().map(|f| f.dims[i]).sum::<f64>() / n;
        let var = if history.len() > 1 {
            history.iter().map(|f| (f.dims[i] - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        dims[i] = mean;
        sigma[i] = var
            .sqrt()
            .max(SIGMA_FLOOR)
            .max(config.relative_sigma_floor * mean.abs());
    }
    let endpoint_set = history
        .iter()
        .flat_map(|f| f.endpoints.iter())
        .filter(|e| !private_literal(&e.host))
        .map(|e| (e.clone(), 1))
        .collect();
    Ok(DeviceProfile {
        class_id: class_id.to_string(),
        dims,
        dims_sigma: sigma,
        sample_count: history.len() as u64,
        endpoint_set,
        version: 1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposedAction {
    None,
    RateLimit,
    Isolate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub mac: MacAddr,
    pub window_start_s: u64,
    pub class_id: String,
    pub score: f64,
    pub offending_dims: Vec<String>,
    pub proposed_action: ProposedAction,
}

/// Largest per-dimension z-score of `x` against `p`.
pub fn score(x: &FeatureVector, p: &DeviceProfile, config: &ProfilerConfig) -> Result<AnomalyReport, ProfileError> {
    p.check_dims(x.dims.len())?;
    let mut max = 0.0f64;
    let mut offending = Vec::new();
    for (i, name) in DIM_NAMES.iter().enumerate() {
        let z = (x.dims[i] - p.dims[i]).abs() / p.dims_sigma[i];
        if z >= config.alert_threshold {
            offending.push(name.to_string());
        }
        max = max.max(z);
    }
    let proposed_action = if max >= config.isolate_threshold {
        ProposedAction::Isolate
    } else if max >= config.alert_threshold {
        ProposedAction::RateLimit
    } else {
        ProposedAction::None
    };
    Ok(AnomalyReport {
        mac: x.device_mac,
        window_start_s: x.window_start_s,
        class_id: p.class_id.clone(),
        score: max,
        offending_dims: offending,
        proposed_action,
    })
}

/// Root-mean-square z-score over all dimensions.
pub fn distance(x: &FeatureVector, p: &DeviceProfile) -> f64 {
    let sum: f64 = (0..DIMS)
        .map(|i| ((x.dims[i] - p.dims[i]) / p.dims_sigma[i]).powi(2))
        .sum();
    (sum / DIMS as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Identification {
    /// `None` means unknown.
    pub class_id: Option<String>,
    pub confidence: f64,
    pub distance: Option<f64>,
}

pub fn identify_device(x: &FeatureVector, library: &[DeviceProfile], config: &ProfilerConfig) -> Identification {
    let mut ranked: Vec<(f64, &DeviceProfile)> = library
        .iter()
        .filter(|p| p.dims.len() == x.dims.len())
        .map(|p| (distance(x, p), p))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.class_id.cmp(&b.1.class_id)));
    let unknown = Identification {
        class_id: None,
        confidence: 0.0,
        distance: ranked.first().map(|r| r.0),
    };
    let Some(&(best, profile)) = ranked.first() else {
        return unknown;
    };
    if best > config.identification_gate {
        return unknown;
    }
    let confidence = match ranked.get(1) {
        Some(&(second, _)) if second <= config.identification_gate && second > 0.0 => 1.0 - best / second,
        Some(&(second, _)) if second <= config.identification_gate => 0.0,
        _ => 1.0,
    };
    Identification {
        class_id: Some(profile.class_id.clone()),
        confidence,
        distance: Some(best),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedEndpoint {
    pub host: String,
    pub protocol: Protocol,
    pub port: u16,
    pub support: u32,
}

/// Shared profile document. Carries no MAC or device address fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharedProfile {
    pub schema: String,
    pub class_id: String,
    pub dims: Vec<f64>,
    pub dims_sigma: Vec<f64>,
    pub sample_count: u64,
    pub endpoints: Vec<SharedEndpoint>,
    pub version: u32,
}

/// IP-literal endpoints survive only with support from `k_anonymity` contributors.
pub fn export_profile(p: &DeviceProfile, config: &ProfilerConfig) -> SharedProfile {
    let endpoints = p
        .endpoint_set
        .iter()
        .filter(|(e, support)| !private_literal(&e.host) && (!ip_literal(&e.host) || **support >= config.k_anonymity))
        .map(|(e, support)| SharedEndpoint {
            host: e.host.clone(),
            protocol: e.protocol,
            port: e.port,
            support: *support,
        })
        .collect();
    SharedProfile {
        schema: SHARED_SCHEMA.to_string(),
        class_id: p.class_id.clone(),
        dims: p.dims.clone(),
        dims_sigma: p.dims_sigma.clone(),
        sample_count: p.sample_count,
        endpoints,
        version: p.version,
    }
}

pub fn import_profile(doc: &SharedProfile) -> Result<DeviceProfile, ProfileError> {
    if doc.schema != SHARED_SCHEMA {
        return Err(ProfileError::Schema(doc.schema.clone()));
    }
    if doc.dims_sigma.len() != doc.dims.len() {
        return Err(ProfileError::DimMismatch {
            expected: doc.dims.len(),
            found: doc.dims_sigma.len(),
        });
    }
    Ok(DeviceProfile {
        class_id: doc.class_id.clone(),
        dims: doc.dims.clone(),
        dims_sigma: doc.dims_sigma.iter().map(|s| s.max(SIGMA_FLOOR)).collect(),
        sample_count: doc.sample_count,
        endpoint_set: doc
            .endpoints
            .iter()
            .map(|e| {
                let key = Endpoint {
                    host: e.host.clone(),
                    protocol: e.protocol,
                    port: e.port,
                };
                (key, e.support.max(1))
            })
            .collect(),
        version: doc.version,
    })
}

/// Sample-count weighted centroid and pooled variance.
pub fn merge_profiles(local: &DeviceProfile, shared: &DeviceProfile) -> Result<DeviceProfile, ProfileError> {
    if local.class_id != shared.class_id {
        return Err(ProfileError::ClassMismatch {
            local: local.class_id.clone(),
            shared: shared.class_id.clone(),
        });
    }
    local.check_dims(shared.dims.len())?;
    let (n1, n2) = (local.sample_count as f64, shared.sample_count as f64);
    let n = n1 + n2;
    let mut dims = Vec::with_capacity(local.dims.len());
    let mut sigma = Vec::with_capacity(local.dims.len());
    for i in 0..local.dims.len() {
        let (m1, m2) = (local.dims[i], shared.dims[i]);
        let mean = (n1 * m1 + n2 * m2) / n;
        let ss = (n1 - 1.0).max(0.0) * local.dims_sigma[i].powi(2)
            + (n2 - 1.0).max(0.0) * shared.dims_sigma[i].powi(2)
            + n1 * n2 / n * (m1 - m2).powi(2);
        let var = if n > 1.0 { ss / (n - 1.0) } else { 0.0 };
        dims.push(mean);
        sigma.push(var.sqrt().max(SIGMA_FLOOR));
    }
    let mut endpoint_set = local.endpoint_set.clone();
    for (e, support) in &shared.endpoint_set {
        *endpoint_set.entry(e.clone()).or_default() += support;
    }
    Ok(DeviceProfile {
        class_id: local.class_id.clone(),
        dims,
        dims_sigma: sigma,
        sample_count: local.sample_count + shared.sample_count,
        endpoint_set,
        version: local.version.max(shared.version) + 1,
    })
}

/// Rolling window history per class with periodic re-learning.
#[derive(Debug, Clone, Default)]
pub struct ProfileLearner {
    config: ProfilerConfig,
    history: BTreeMap<String, VecDeque<FeatureVector>>,
}

impl ProfileLearner {
    pub fn new(config: ProfilerConfig) -> Self {
        Self {
            config,
            history: BTreeMap::new(),
        }
    }

    pub fn observe(&mut self, class_id: &str, fv: FeatureVector) {
        let h = self.history.entry(class_id.to_string()).or_default();
        h.push_back(fv);
        while h.len() > self.config.history_len.max(1) {
            h.pop_front();
        }
    }

    pub fn history_len(&self, class_id: &str) -> usize {
        self.history.get(class_id).map_or(0, VecDeque::len)
    }

    pub fn learn(&self, class_id: &str) -> Result<DeviceProfile, ProfileError> {
        let h: Vec<FeatureVector> = self
            .history
            .get(class_id)
            .map(|h| h.iter().cloned().collect())
            .unwrap_or_default();
        learn_profile(&h, class_id, &self.config)
    }

    pub fn learn_all(&self) -> Vec<DeviceProfile> {
        self.history.keys().filter_map(|c| self.learn(c).ok()).collect()
    }
}
