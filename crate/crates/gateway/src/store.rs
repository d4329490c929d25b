//! Persistent gateway state under `state_dir`:
//!
//! * `events.jsonl`: append-only log of [`StoreRecord`]s, synced per append.
//!   Replaying it from empty rebuilds tokens, pots, reader state,
//!   activations, labels and anomaly mitigations.
//! * `profiles.json`: snapshot of the behaviour profile library.
//! * `generations.json`: last installed rule-set generation and hash per device.
//!
//! Snapshots are replaced atomically (write to a temp file, sync, rename).
//! A torn final log line, as left by a crash mid-append, is dropped on open.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use dada_core::control::ControlEvent;
use dada_core::profiler::{AnomalyReport, DeviceProfile};
use dada_core::MacAddr;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EVENTS_FILE: &str = "events.jsonl";
pub const PROFILES_FILE: &str = "profiles.json";
pub const GENERATIONS_FILE: &str = "generations.json";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum StoreRecord {
    Control {
        event: ControlEvent,
    },
    Label {
        ts: u64,
        mac: MacAddr,
        label: String,
    },
    /// Kept so mitigations are re-applied after a restart.
    Anomaly {
        ts: u64,
        report: AnomalyReport,
    },
}

impl StoreRecord {
    pub fn ts(&self) -> u64 {
        match self {
            StoreRecord::Control { event } => match event {
                ControlEvent::Associate { ts, .. } | ControlEvent::Configure { ts, .. } => *ts,
                ControlEvent::Reader(r) => r.ts,
            },
            StoreRecord::Label { ts, .. } | StoreRecord::Anomaly { ts, .. } => *ts,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: u64,
    /// SHA-256 of the rule set's canonical bytes.
    pub hash: [u8; 32],
}

#[derive(Debug)]
pub struct StateStore {
    dir: PathBuf,
    log: File,
    records: Vec<StoreRecord>,
    profiles: BTreeMap<String, DeviceProfile>,
    generations: BTreeMap<MacAddr, GenerationRecord>,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_snapshot<T: DeserializeOwned + Default>(path: &Path) -> Result<T, StoreError> {
    match fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes).map_err(|source| StoreError::Corrupt {
            path: path.to_path_buf(),
            line: source.line(),
            source,
        }),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(T::default()),
        Err(e) => Err(io_err(path)(e)),
    }
}

fn write_snapshot<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let tmp = path.with_extension("json.tmp");
    let mut bytes = serde_json::to_vec_pretty(value).expect("snapshot serializes");
    bytes.push(b'\n');
    let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(&bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

/// Reads the log, truncating a torn final line.
fn read_log(path: &Path) -> Result<Vec<StoreRecord>, StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut records = Vec::new();
    let mut good_len = 0u64;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    let mut n = 0;
    loop {
        line.clear();
        let read = reader.read_line(&mut line).map_err(io_err(path))?;
        if read == 0 {
            break;
        }
        n += 1;
        let complete = line.ends_with('\n');
        match serde_json::from_str::<StoreRecord>(line.trim_end()) {
            Ok(r) if complete => {
                records.push(r);
                good_len += read as u64;
            }
            // Only the unterminated tail can be torn.
            Ok(_) => break,
            Err(_) if !complete => break,
            Err(source) => {
                return Err(StoreError::Corrupt {
                    path: path.to_path_buf(),
                    line: n,
                    source,
                })
            }
        }
    }
    let len = fs::metadata(path).map_err(io_err(path))?.len();
    if len != good_len {
        OpenOptions::new()
            .write(true)
            .open(path)
            .and_then(|f| f.set_len(good_len))
            .map_err(io_err(path))?;
    }
    Ok(records)
}

impl StateStore {
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let log_path = dir.join(EVENTS_FILE);
        let records = read_log(&log_path)?;
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(io_err(&log_path))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            log,
            records,
            profiles: read_snapshot(&dir.join(PROFILES_FILE))?,
            generations: read_snapshot(&dir.join(GENERATIONS_FILE))?,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn records(&self) -> &[StoreRecord] {
        &self.records
    }

    /// Latest timestamp in the log, 0 when empty.
    pub fn last_ts(&self) -> u64 {
        self.records.iter().map(StoreRecord::ts).max().unwrap_or(0)
    }

    /// Appends and syncs one record. On error nothing is recorded in memory.
    pub fn append(&mut self, record: StoreRecord) -> Result<(), StoreError> {
        let path = self.dir.join(EVENTS_FILE);
        let mut line = serde_json::to_vec(&record).expect("record serializes");
        line.push(b'\n');
        self.log.write_all(&line).map_err(io_err(&path))?;
        self.log.sync_data().map_err(io_err(&path))?;
        self.records.push(record);
        Ok(())
    }

    pub fn profiles(&self) -> &BTreeMap<String, DeviceProfile> {
        &self.profiles
    }

    pub fn put_profile(&mut self, p: DeviceProfile) -> Result<(), StoreError> {
        let mut next = self.profiles.clone();
        next.insert(p.class_id.clone(), p);
        write_snapshot(&self.dir.join(PROFILES_FILE), &next)?;
        self.profiles = next;
        Ok(())
    }

    pub fn generation(&self, mac: MacAddr) -> Option<GenerationRecord> {
        self.generations.get(&mac).copied()
    }

    pub fn set_generation(&mut self, mac: MacAddr, record: GenerationRecord) -> Result<(), StoreError> {
        if self.generations.get(&mac) == Some(&record) {
            return Ok(());
        }
        let mut next = self.generations.clone();
        next.insert(mac, record);
        write_snapshot(&self.dir.join(GENERATIONS_FILE), &next)?;
        self.generations = next;
        Ok(())
    }

    /// Canonical encoding of the profile store.
    pub fn profiles_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(&self.profiles).expect("profiles serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dada_core::control::ReaderEvent;
    use std::collections::BTreeSet;

    fn reader(ts: u64) -> StoreRecord {
        StoreRecord::Control {
            event: ControlEvent::Reader(ReaderEvent {
                reader_id: "hall".into(),
                ts,
                pot_tag: Some("pot-x".into()),
                token_tags: BTreeSet::from(["tok-a".to_string()]),
            }),
        }
    }

    #[test]
    fn records_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = StateStore::open(dir.path()).unwrap();
        s.append(reader(5)).unwrap();
        s.append(StoreRecord::Label {
            ts: 9,
            mac: MacAddr::new([2, 0, 0, 0, 0, 9]),
            label: "kettle".into(),
        })
        .unwrap();
        drop(s);
        let s = StateStore::open(dir.path()).unwrap();
        assert_eq!(s.records().len(), 2);
        assert_eq!(s.records()[0], reader(5));
        assert_eq!(s.last_ts(), 9);
    }

    #[test]
    fn torn_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = StateStore::open(dir.path()).unwrap();
        s.append(reader(1)).unwrap();
        drop(s);
        let path = dir.path().join(EVENTS_FILE);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"record\":\"control\",\"ev").unwrap();
        drop(f);
        let mut s = StateStore::open(dir.path()).unwrap();
        assert_eq!(s.records(), &[reader(1)]);
        s.append(reader(2)).unwrap();
        drop(s);
        assert_eq!(StateStore::open(dir.path()).unwrap().records(), &[reader(1), reader(2)]);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(EVENTS_FILE), "garbage\n{}\n").unwrap();
        match StateStore::open(dir.path()) {
            Err(StoreError::Corrupt { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn snapshots_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = StateStore::open(dir.path()).unwrap();
        let mac = MacAddr::new([2, 0, 0, 0, 0, 1]);
        let g = GenerationRecord {
            generation: 3,
            hash: [7; 32],
        };
        s.set_generation(mac, g).unwrap();
        let p = DeviceProfile {
            class_id: "abc".into(),
            dims: vec![0.1, 1.0 / 3.0, 1e-300],
            dims_sigma: vec![1e-6, 2.5, 7.0],
            sample_count: 12,
            endpoint_set: BTreeMap::new(),
            version: 1,
        };
        s.put_profile(p.clone()).unwrap();
        let bytes = s.profiles_bytes();
        drop(s);
        let s = StateStore::open(dir.path()).unwrap();
        assert_eq!(s.generation(mac), Some(g));
        assert_eq!(s.profiles()["abc"], p);
        assert_eq!(s.profiles_bytes(), bytes);
    }
}
