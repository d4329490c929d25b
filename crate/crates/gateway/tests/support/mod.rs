#![allow(dead_code)]

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use dada_core::profiler::{class_id, SharedProfile, SHARED_SCHEMA};
use dada_core::simulator::{run_scenario, write_jsonl, Scenario};
use dada_gateway::config::GatewayConfig;
use serde_json::{json, Value};

pub const DADA: &str = env!("CARGO_BIN_EXE_dada");
pub const CAMERA: &str = "02:00:00:00:00:10";
pub const TV: &str = "02:00:00:00:00:20";
pub const LOCK: &str = "02:00:00:00:00:30";

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn fixture_scenario(name: &str) -> Scenario {
    Scenario::load(&fixtures().join("scenarios").join(name)).unwrap()
}

/// Writes `gateway.toml` into `dir` with an ephemeral listen port.
pub fn write_config(dir: &Path, extra_profiler: &str) -> PathBuf {
    let f = fixtures();
    let text = format!(
        "state_dir = \"state\"\ncontext = {:?}\nmud_dir = {:?}\nlisten = \"127.0.0.1:0\"\n\n[profiler]\nrelative_sigma_floor = 0.05\n{extra_profiler}",
        f.join("context.json"),
        f.join("mud"),
    );
    let path = dir.join("gateway.toml");
    fs::write(&path, text).unwrap();
    path
}

pub fn config(dir: &Path) -> GatewayConfig {
    let path = write_config(dir, "");
    GatewayConfig::from_toml(&fs::read_to_string(&path).unwrap(), &path, None).unwrap()
}

/// A `dada serve` child process; killed with SIGKILL on drop.
pub struct Server {
    pub child: Child,
    pub base: String,
}

impl Server {
    pub fn spawn(config: &Path, extra: &[&str]) -> Server {
        let mut child = Command::new(DADA)
            .arg("serve")
            .arg("--config")
            .arg(config)
            .args(extra)
            .env("RUST_LOG", "warn")
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap())
            .read_line(&mut line)
            .unwrap();
        let addr = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected output {line:?}"));
        Server {
            child,
            base: format!("http://{addr}"),
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub fn get(&self, path: &str) -> Value {
        reqwest::blocking::get(self.url(path)).unwrap().json().unwrap()
    }

    pub fn get_bytes(&self, path: &str) -> Vec<u8> {
        reqwest::blocking::get(self.url(path))
            .unwrap()
            .bytes()
            .unwrap()
            .to_vec()
    }

    pub fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let r = reqwest::blocking::Client::new()
            .post(self.url(path))
            .json(&body)
            .send()
            .unwrap();
        let status = r.status().as_u16();
        (status, r.json().unwrap())
    }

    pub fn kill(mut self) {
        self.child.kill().unwrap();
        self.child.wait().unwrap();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A shared profile for the camera class, as another home would export it.
pub fn camera_shared_profile() -> SharedProfile {
    SharedProfile {
        schema: SHARED_SCHEMA.into(),
        class_id: class_id("example.com", "https://example.com/models/cam-1"),
        dims: (0..12).map(|i| 1.0 / (i as f64 + 3.0)).collect(),
        dims_sigma: (0..12).map(|i| 0.1 + i as f64 / 7.0).collect(),
        sample_count: 40,
        endpoints: Vec::new(),
        version: 2,
    }
}

fn wait_for(what: &str, timeout: Duration, mut f: impl FnMut() -> bool) -> Result<(), String> {
    let start = Instant::now();
    while !f() {
        if start.elapsed() > timeout {
            return Err(format!("timed out waiting for {what}"));
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    Ok(())
}

/// Fetches `/state` until two reads 300 ms apart agree.
fn settled_state(server: &Server) -> Result<Vec<u8>, String> {
    let mut prev = server.get_bytes("/state");
    for _ in 0..50 {
        std::thread::sleep(Duration::from_millis(300));
        let next = server.get_bytes("/state");
        if next == prev {
            return Ok(next);
        }
        prev = next;
    }
    Err("state never settled".into())
}

#[derive(Debug)]
pub struct PersistenceReport {
    pub state_bytes: usize,
    pub profiles: usize,
    pub active: usize,
    pub latched: usize,
}

/// Builds up state on a live `dada serve` (imported and learned profiles,
/// tokens, pots, reader events, a label), kills it with SIGKILL, restarts it
/// on the same state directory and compares canonical state byte for byte.
pub fn kill_restart_round_trip() -> Result<PersistenceReport, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = write_config(dir.path(), "min_windows = 3\n");

    let shared = dir.path().join("shared.json");
    fs::write(&shared, serde_json::to_vec(&vec![camera_shared_profile()]).unwrap()).unwrap();
    let st = Command::new(DADA)
        .args(["profiles", "import"])
        .arg(&shared)
        .arg("--config")
        .arg(&cfg)
        .stderr(Stdio::null())
        .status()
        .map_err(|e| e.to_string())?;
    if !st.success() {
        return Err(format!("profiles import failed: {st}"));
    }

    let run = run_scenario(&fixture_scenario("benign.json")).map_err(|e| e.to_string())?;
    let trace = dir.path().join("trace.jsonl");
    write_jsonl(&run.events, fs::File::create(&trace).unwrap()).unwrap();
    let packets = run.events.len() as u64;

    let server = Server::spawn(&cfg, &["--trace", trace.to_str().unwrap(), "--speed", "20000"]);
    wait_for("trace playback", Duration::from_secs(60), || {
        server.get("/metrics/latency")["packets"].as_u64() == Some(packets)
    })?;

    let steps: Vec<(&str, Value)> = vec![
        (
            "/tokens/tok-cam/associate",
            json!({"macs": [CAMERA], "label": "camera"}),
        ),
        ("/tokens/tok-tv/associate", json!({"macs": [TV, LOCK]})),
        (
            "/pots/pot-isolate/configure",
            json!({"actions": [{"kind": "remove_from_network"}], "modality": "continuous"}),
        ),
        (
            "/pots/pot-log/configure",
            json!({"actions": [{"kind": "log_all_traffic"}], "modality": "discrete"}),
        ),
        (
            "/pots/pot-guest/configure",
            json!({"actions": [{"kind": "switch_network", "network": "unprivileged"}, {"kind": "restrict_access", "resource": "printer"}], "modality": "continuous"}),
        ),
        (
            "/reader/hall/state",
            json!({"pot": "pot-log", "tokens": ["tok-cam", "tok-tv"]}),
        ),
        ("/reader/hall/state", json!({"pot": "pot-log", "tokens": []})),
        (
            "/reader/desk/state",
            json!({"pot": "pot-isolate", "tokens": ["tok-cam"]}),
        ),
        (
            "/reader/kitchen/state",
            json!({"pot": "pot-guest", "tokens": ["tok-tv"]}),
        ),
        ("/devices/02:00:00:00:00:40/label", json!({"label": "work laptop"})),
    ];
    for (path, body) in steps {
        let (status, resp) = server.post(path, body);
        if status != 200 {
            return Err(format!("POST {path}: {status} {resp}"));
        }
    }

    let before = settled_state(&server)?;
    let profiles_file = dir.path().join("state/profiles.json");
    let profiles_before = fs::read(&profiles_file).map_err(|e| e.to_string())?;
    server.kill();

    let server = Server::spawn(&cfg, &[]);
    let after = server.get_bytes("/state");
    let profiles_after = fs::read(&profiles_file).map_err(|e| e.to_string())?;
    server.kill();

    if before != after {
        return Err(format!(
            "canonical state differs after restart:\n before {}\n after  {}",
            String::from_utf8_lossy(&before),
            String::from_utf8_lossy(&after)
        ));
    }
    if profiles_before != profiles_after {
        return Err("profiles.json changed across restart".into());
    }
    let state: Value = serde_json::from_slice(&after).map_err(|e| e.to_string())?;
    let report = PersistenceReport {
        state_bytes: after.len(),
        profiles: state["profiles"].as_object().map_or(0, |m| m.len()),
        active: state["active"].as_array().map_or(0, Vec::len),
        latched: state["latched"].as_array().map_or(0, Vec::len),
    };
    if report.profiles < 2 || report.active < 3 || report.latched < 1 {
        return Err(format!("state too thin to be a meaningful check: {report:?}"));
    }
    Ok(report)
}
