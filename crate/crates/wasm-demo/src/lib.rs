//! Browser bindings over `dada-core` with the bundled fixtures.
//!
//! Every export takes and returns JSON strings; errors surface as JS
//! exceptions carrying the message.

use std::net::Ipv4Addr;

use dada_core::compiler::{compile, lookup, Decision, NetworkContext, PacketHeader};
use dada_core::datapath::TokenBucket;
use dada_core::mud::{parse_mud, validate_profile, RateSpec};
use dada_core::simulator::{run_scenario, Scenario};
use dada_core::{Direction, MacAddr, Protocol};
use serde::Deserialize;
use serde_json::{json, Value};
use thiserror::Error;
use wasm_bindgen::prelude::*;

const CONTEXT: &str = include_str!("../../../fixtures/context.json");
const MUD_FILES: [(&str, &str); 3] = [
    ("camera.mud.json", include_str!("../../../fixtures/mud/camera.mud.json")),
    ("lock.mud.json", include_str!("../../../fixtures/mud/lock.mud.json")),
    ("tv.mud.json", include_str!("../../../fixtures/mud/tv.mud.json")),
];
const SCENARIOS: [(&str, &str); 3] = [
    ("benign", include_str!("../../../fixtures/scenarios/benign.json")),
    ("guest", include_str!("../../../fixtures/scenarios/guest.json")),
    (
        "mirai_flood",
        include_str!("../../../fixtures/scenarios/mirai_flood.json"),
    ),
];

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("invalid input: {0}")]
    Input(#[from] serde_json::Error),
    #[error("{0}")]
    Core(String),
    #[error("unknown {kind} {name:?}")]
    Unknown { kind: &'static str, name: String },
}

fn core_err(e: impl std::fmt::Display) -> DemoError {
    DemoError::Core(e.to_string())
}

fn context() -> NetworkContext {
    NetworkContext::from_json(CONTEXT).expect("bundled context is valid")
}

/// Bundled fixture names, for populating the page.
pub fn catalogue() -> Value {
    let ctx = context();
    json!({
        "devices": ctx.devices.iter().map(|d| json!({"mac": d.mac, "ipv4": d.ipv4, "label": d.label})).collect::<Vec<_>>(),
        "mud": MUD_FILES.iter().map(|(name, text)| json!({"name": name, "text": text})).collect::<Vec<_>>(),
        "scenarios": SCENARIOS.iter().map(|(name, _)| name).collect::<Vec<_>>(),
    })
}

#[derive(Debug, Deserialize)]
pub struct Probe {
    pub direction: Direction,
    pub protocol: Protocol,
    pub remote_ip: Ipv4Addr,
    pub remote_port: u16,
    pub local_port: u16,
    /// Defaults to `direction`.
    #[serde(default)]
    pub initiator: Option<Direction>,
}

/// Compiles `mud` for device `mac` and classifies each probe against the
/// resulting rule set.
pub fn compile_and_probe(mud: &str, mac: &str, probes: &[Probe]) -> Result<Value, DemoError> {
    let profile = parse_mud(mud).map_err(core_err)?;
    let violations = validate_profile(&profile);
    if !violations.is_empty() {
        return Ok(json!({ "violations": violations }));
    }
    let mac: MacAddr = mac.parse().map_err(core_err)?;
    let ctx = context();
    let device = ctx.device(mac).ok_or_else(|| DemoError::Unknown {
        kind: "device",
        name: mac.to_string(),
    })?;
    let (rules, warnings) = compile(&profile, &ctx, device).map_err(core_err)?;
    let verdicts = probes
        .iter()
        .map(|p| {
            let header = PacketHeader {
                device_mac: mac,
                direction: p.direction,
                protocol: p.protocol,
                remote_ip: p.remote_ip,
                remote_port: p.remote_port,
                local_port: p.local_port,
                initiator: p.initiator.unwrap_or(p.direction),
            };
            lookup(&rules, &header).map_err(core_err)
        })
        .collect::<Result<Vec<Decision>, _>>()?;
    Ok(json!({ "rules": rules.rules, "warnings": warnings, "verdicts": verdicts }))
}

/// Offers `count` packets of `size` bytes, `gap_us` apart, to a full bucket.
pub fn bucket_trace(rate: u64, burst: u64, size: u32, count: u32, gap_us: u64) -> Value {
    let mut bucket = TokenBucket::new(&RateSpec::bytes(rate, burst), 0);
    let mut admitted = 0u64;
    let steps: Vec<Value> = (0..count as u64)
        .map(|i| {
            let ts = i * gap_us;
            let ok = bucket.try_consume(size, ts);
            admitted += ok as u64 * size as u64;
            json!({ "ts_us": ts, "accepted": ok, "tokens": bucket.tokens() })
        })
        .collect();
    let span_us = (count.saturating_sub(1) as u64) * gap_us;
    json!({
        "admitted_bytes": admitted,
        "bound_bytes": burst as u128 + rate as u128 * span_us as u128 / 1_000_000,
        "steps": steps,
    })
}

/// Replaces fixture file references in a scenario with their contents.
fn inline_sources(doc: &mut Value) {
    if let Some(c) = doc.get_mut("context") {
        if c.is_string() {
            *c = serde_json::from_str(CONTEXT).expect("bundled context parses");
        }
    }
    if let Some(Value::Object(profiles)) = doc.get_mut("profiles") {
        for src in profiles.values_mut() {
            if let Some(path) = src.as_str() {
                if let Some((_, text)) = MUD_FILES.iter().find(|(name, _)| path.ends_with(name)) {
                    *src = serde_json::from_str(text).expect("bundled MUD parses");
                }
            }
        }
    }
}

/// Runs a bundled scenario under `seed` and returns its metrics.
pub fn scenario_metrics(name: &str, seed: Option<u64>) -> Result<Value, DemoError> {
    let (_, text) = SCENARIOS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| DemoError::Unknown {
            kind: "scenario",
            name: name.into(),
        })?;
    let mut doc: Value = serde_json::from_str(text)?;
    inline_sources(&mut doc);
    let mut scenario = Scenario::from_json(&doc.to_string(), None).map_err(core_err)?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    // No wall clock in the browser.
    scenario.datapath.measure_latency = false;
    let run = run_scenario(&scenario).map_err(core_err)?;
    Ok(json!({
        "seed": scenario.seed,
        "metrics": run.metrics,
        "reports": run.reports,
        "changes": run.changes,
        "failed_expectations": scenario.expect.check(&run.metrics),
    }))
}

fn to_js(r: Result<Value, DemoError>) -> Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = catalogue)]
pub fn js_catalogue() -> String {
    catalogue().to_string()
}

#[wasm_bindgen(js_name = compileAndProbe)]
pub fn js_compile_and_probe(mud: &str, mac: &str, probes_json: &str) -> Result<String, JsError> {
    to_js(
        serde_json::from_str::<Vec<Probe>>(probes_json)
            .map_err(DemoError::from)
            .and_then(|p| compile_and_probe(mud, mac, &p)),
    )
}

#[wasm_bindgen(js_name = bucketTrace)]
pub fn js_bucket_trace(rate: u32, burst: u32, size: u32, count: u32, gap_us: u32) -> String {
    bucket_trace(rate.into(), burst.into(), size, count, gap_us.into()).to_string()
}

#[wasm_bindgen(js_name = runScenario)]
pub fn js_run_scenario(name: &str, seed: Option<f64>) -> Result<String, JsError> {
    to_js(scenario_metrics(name, seed.map(|s| s as u64)))
}

#[cfg(test)]
mod tests {
    use super::*;

    const CAMERA: &str = "02:00:00:00:00:10";

    fn probe(direction: Direction, ip: [u8; 4], port: u16) -> Probe {
        Probe {
            direction,
            protocol: Protocol::Tcp,
            remote_ip: ip.into(),
            remote_port: port,
            local_port: 40000,
            initiator: None,
        }
    }

    #[test]
    fn camera_profile_compiles_and_classifies() {
        let mud = MUD_FILES[0].1;
        let out = compile_and_probe(
            mud,
            CAMERA,
            &[
                probe(Direction::FromDevice, [8, 8, 8, 8], 23),
                probe(Direction::ToDevice, [203, 0, 113, 66], 2323),
            ],
        )
        .unwrap();
        assert!(!out["rules"].as_array().unwrap().is_empty());
        for v in out["verdicts"].as_array().unwrap() {
            assert_eq!(v, "DefaultDrop");
        }
    }

    #[test]
    fn dangling_acl_reference_is_rejected() {
        let mut doc: Value = serde_json::from_str(MUD_FILES[0].1).unwrap();
        let policy = &mut doc["ietf-mud:mud"]["from-device-policy"]["access-lists"]["access-list"][0]["name"];
        *policy = json!("missing-acl");
        let err = compile_and_probe(&doc.to_string(), CAMERA, &[])
            .unwrap_err()
            .to_string();
        assert!(err.contains("DanglingAclRef"), "{err}");
    }

    #[test]
    fn saturated_bucket_admits_exactly_the_burst() {
        let out = bucket_trace(50_000, 10_000, 1000, 100, 0);
        assert_eq!(out["admitted_bytes"], 10_000);
        assert_eq!(out["bound_bytes"], 10_000);
    }

    #[test]
    fn spaced_packets_are_bounded_by_rate() {
        let out = bucket_trace(1000, 2000, 500, 50, 100_000);
        assert!(out["admitted_bytes"].as_u64().unwrap() <= out["bound_bytes"].as_u64().unwrap());
    }

    #[test]
    fn bundled_scenarios_run() {
        let out = scenario_metrics("mirai_flood", None).unwrap();
        assert_eq!(out["failed_expectations"], json!([]));
        assert!(out["metrics"]["time_to_detect_s"].is_number());
        assert!(scenario_metrics("nope", None).is_err());
    }
}
