//! File-backed cloud storage: measurements, events, registry, downlink and
//! recommendation state, each an append-only JSON-lines log replayed on open.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use hems_core::envelope::{self, Envelope};
use hems_core::recommend::RecommendationStatus;
use hems_core::{
    DedupKey, DeviceDescriptor, DeviceId, DeviceSettings, Event, EventKind, Measurement, MetricKind, Severity,
};
use hems_core::model::IdSeq;

use crate::buffer::record_key;
use crate::wire::{DownlinkItem, IngestAck};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryEntry {
    pub descriptor: DeviceDescriptor,
    pub settings: DeviceSettings,
    pub version: u32,
    pub updated_at: i64,
    #[serde(default)]
    pub removed: bool,
}

#[derive(Debug, Default)]
pub struct Home {
    pub rooms: BTreeSet<String>,
    pub devices: BTreeMap<DeviceId, RegistryEntry>,
    /// Every version of every registry entry, oldest first.
    pub history: Vec<RegistryEntry>,
    pub measurements: Vec<Measurement>,
    keys: BTreeSet<DedupKey>,
    pub events: Vec<Event>,
    event_ids: BTreeSet<String>,
    pub downlink: Vec<DownlinkItem>,
    pub statuses: BTreeMap<String, RecommendationStatus>,
    pub latest: BTreeMap<(DeviceId, MetricKind), (i64, f64)>,
    /// Latest timestamp seen in ingested data; stamps cloud-generated events.
    pub clock_ms: i64,
    next_event: u64,
}

impl Home {
    pub fn active(&self, device: &DeviceId) -> Option<&RegistryEntry> {
        self.devices.get(device).filter(|e| !e.removed)
    }

    pub fn has_event(&self, id: &str) -> bool {
        self.event_ids.contains(id)
    }

    pub fn has_measurement(&self, key: &DedupKey) -> bool {
        self.keys.contains(key)
    }

    fn insert_measurement(&mut self, m: Measurement) -> bool {
        if !self.keys.insert(m.dedup_key()) {
            return false;
        }
        self.clock_ms = self.clock_ms.max(m.timestamp);
        let slot = self.latest.entry((m.device_id.clone(), m.metric)).or_insert((i64::MIN, 0.0));
        if m.timestamp >= slot.0 {
            *slot = (m.timestamp, m.value);
        }
        self.measurements.push(m);
        true
    }

    fn insert_event(&mut self, e: Event, home_id: &str) -> bool {
        if !self.event_ids.insert(e.event_id.clone()) {
            return false;
        }
        if let Some(n) = e
            .event_id
            .strip_prefix(&format!("{home_id}-cloud-"))
            .and_then(|n| n.parse::<u64>().ok())
        {
            self.next_event = self.next_event.max(n + 1);
        }
        self.events.push(e);
        true
    }

    fn insert_entry(&mut self, entry: RegistryEntry) {
        self.devices.insert(entry.descriptor.device_id.clone(), entry.clone());
        self.history.push(entry);
    }
}

const MEASUREMENTS: &str = "measurements.jsonl";
const EVENTS: &str = "events.jsonl";
const REGISTRY: &str = "registry.jsonl";
const DOWNLINK: &str = "downlink.jsonl";
const STATUS: &str = "recommendations.jsonl";

/// Log files in the data directory, in a fixed order.
pub const FILES: [&str; 5] = [MEASUREMENTS, EVENTS, REGISTRY, DOWNLINK, STATUS];

pub struct Store {
    dir: PathBuf,
    files: BTreeMap<&'static str, File>,
    homes: BTreeMap<String, Home>,
}

fn bad(path: &Path, line: usize, e: impl std::fmt::Display) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, format!("{}:{}: {e}", path.display(), line + 1))
}

fn field<'a>(v: &'a Value, key: &str) -> Result<&'a Value, String> {
    v.get(key).ok_or_else(|| format!("missing `{key}`"))
}

fn home_of(v: &Value) -> Result<String, String> {
    field(v, "home")?.as_str().map(str::to_string).ok_or_else(|| "`home` is not a string".into())
}

impl Store {
    pub fn open(dir: impl AsRef<Path>, homes: &[String]) -> io::Result<Store> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let mut store = Store {
            dir: dir.clone(),
            files: BTreeMap::new(),
            homes: homes.iter().map(|h| (h.clone(), Home::default())).collect(),
        };
        for name in FILES {
            let path = dir.join(name);
            if path.exists() {
                let reader = BufReader::new(File::open(&path)?);
                for (i, line) in reader.lines().enumerate() {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let v: Value = serde_json::from_str(&line).map_err(|e| bad(&path, i, e))?;
                    store.replay(name, v).map_err(|e| bad(&path, i, e))?;
                }
            }
            let file = OpenOptions::new().create(true).append(true).open(&path)?;
            store.files.insert(name, file);
        }
        Ok(store)
    }

    fn replay(&mut self, file: &str, v: Value) -> Result<(), String> {
        let home_id = home_of(&v)?;
        let home = self.homes.entry(home_id.clone()).or_default();
        match file {
            MEASUREMENTS | EVENTS => match envelope::from_value(field(&v, "record")?.clone()).map_err(|e| e.to_string())? {
                Envelope::Measurement(m) => {
                    home.insert_measurement(m);
                }
                Envelope::Event(e) => {
                    home.insert_event(e, &home_id);
                }
                Envelope::Command(_) => return Err("command in a data log".into()),
            },
            REGISTRY => match field(&v, "op")?.as_str() {
                Some("room") => {
                    let room = field(&v, "room")?.as_str().ok_or("`room` is not a string")?;
                    home.rooms.insert(room.to_string());
                }
                Some("device") => {
                    let entry: RegistryEntry = serde_json::from_value(field(&v, "entry")?.clone()).map_err(|e| e.to_string())?;
                    home.insert_entry(entry);
                }
                other => return Err(format!("unknown registry op {other:?}")),
            },
            DOWNLINK => home.downlink.push(DownlinkItem::from_value(field(&v, "item")?.clone())?),
            STATUS => {
                let id = field(&v, "recommendation_id")?.as_str().ok_or("bad id")?.to_string();
                let status = serde_json::from_value(field(&v, "status")?.clone()).map_err(|e| e.to_string())?;
                home.statuses.insert(id, status);
            }
            _ => unreachable!("unknown log file"),
        }
        Ok(())
    }

    fn append(&mut self, file: &'static str, lines: &[Value]) -> io::Result<()> {
        if lines.is_empty() {
            return Ok(());
        }
        let mut buf = Vec::new();
        for l in lines {
            serde_json::to_writer(&mut buf, l).map_err(io::Error::other)?;
            buf.push(b'\n');
        }
        let f = self.files.get_mut(file).expect("log file open");
        f.write_all(&buf)?;
        f.flush()
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn homes(&self) -> impl Iterator<Item = (&String, &Home)> {
        self.homes.iter()
    }

    pub fn home(&self, id: &str) -> Option<&Home> {
        self.homes.get(id)
    }

    fn home_mut(&mut self, id: &str) -> &mut Home {
        self.homes.entry(id.to_string()).or_default()
    }

    /// Stores a validated batch. Measurements from devices that are not
    /// registered (or were removed) are not stored; each raises one
    /// UnknownDevice event.
    pub fn ingest(&mut self, home_id: &str, batch: Vec<Envelope>) -> io::Result<IngestAck> {
        let mut ack = IngestAck {
            accepted: Vec::new(),
            rejected: Vec::new(),
        };
        let mut measurement_lines = Vec::new();
        let mut event_lines = Vec::new();
        let home = self.home_mut(home_id);
        for env in batch {
            let key = record_key(&env);
            match env {
                Envelope::Measurement(m) => {
                    if home.active(&m.device_id).is_none() {
                        let id = format!("unknown-{key}");
                        if !home.has_event(&id) {
                            let e = Event::new(id, EventKind::SystemAlert, Severity::Warning, "cloud-ingest", m.timestamp)
                                .with("error", "UnknownDevice")
                                .with("device_id", m.device_id.as_str())
                                .with("key", key.as_str());
                            event_lines.push(json!({"home": home_id, "record": envelope::to_value(&Envelope::Event(e.clone()))}));
                            home.insert_event(e, home_id);
                        }
                        ack.rejected.push(key);
                        continue;
                    }
                    let line = json!({"home": home_id, "record": envelope::to_value(&Envelope::Measurement(m.clone()))});
                    if home.insert_measurement(m) {
                        measurement_lines.push(line);
                    }
                    ack.accepted.push(key);
                }
                Envelope::Event(e) => {
                    let line = json!({"home": home_id, "record": envelope::to_value(&Envelope::Event(e.clone()))});
                    home.clock_ms = home.clock_ms.max(e.timestamp);
                    if home.insert_event(e, home_id) {
                        event_lines.push(line);
                    }
                    ack.accepted.push(key);
                }
                Envelope::Command(_) => ack.rejected.push(key),
            }
        }
        self.append(MEASUREMENTS, &measurement_lines)?;
        self.append(EVENTS, &event_lines)?;
        Ok(ack)
    }

    /// Next id for an event raised by the cloud itself.
    pub fn next_event_id(&mut self, home_id: &str) -> String {
        let home = self.home_mut(home_id);
        let mut seq = IdSeq::starting_at(format!("{home_id}-cloud"), home.next_event.max(1));
        let id = seq.next_id();
        home.next_event = seq.peek();
        id
    }

    /// Appends an event; `false` when the id already exists.
    pub fn append_event(&mut self, home_id: &str, e: Event) -> io::Result<bool> {
        let line = json!({"home": home_id, "record": envelope::to_value(&Envelope::Event(e.clone()))});
        if !self.home_mut(home_id).insert_event(e, home_id) {
            return Ok(false);
        }
        self.append(EVENTS, &[line])?;
        Ok(true)
    }

    pub fn add_room(&mut self, home_id: &str, room: &str) -> io::Result<bool> {
        if !self.home_mut(home_id).rooms.insert(room.to_string()) {
            return Ok(false);
        }
        self.append(REGISTRY, &[json!({"home": home_id, "op": "room", "room": room})])?;
        Ok(true)
    }

    pub fn put_entry(&mut self, home_id: &str, entry: RegistryEntry) -> io::Result<()> {
        let line = json!({"home": home_id, "op": "device", "entry": entry});
        self.home_mut(home_id).insert_entry(entry);
        self.append(REGISTRY, &[line])
    }

    pub fn push_downlink(&mut self, home_id: &str, item: DownlinkItem) -> io::Result<u64> {
        let line = json!({"home": home_id, "item": item.to_value()});
        let home = self.home_mut(home_id);
        home.downlink.push(item);
        let len = home.downlink.len() as u64;
        self.append(DOWNLINK, &[line])?;
        Ok(len)
    }

    pub fn set_status(&mut self, home_id: &str, id: &str, status: RecommendationStatus) -> io::Result<()> {
        self.home_mut(home_id).statuses.insert(id.to_string(), status);
        self.append(STATUS, &[json!({"home": home_id, "recommendation_id": id, "status": status})])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use hems_core::MetricKind;

    fn m(dev: &str, seq: u64) -> Envelope {
        Envelope::Measurement(Measurement {
            device_id: dev.into(),
            metric: MetricKind::PowerW,
            value: 1.5,
            timestamp: 10 * seq as i64,
            seq_epoch: 0,
            seq,
        })
    }

    fn entry(dev: &str) -> RegistryEntry {
        RegistryEntry {
            descriptor: DeviceDescriptor {
                device_id: dev.into(),
                home_id: "h1".into(),
                room: "kitchen".into(),
                category: hems_core::Category::Meter,
                protocol: hems_core::Protocol::Http,
                capabilities: [hems_core::Capability::Metric(MetricKind::PowerW)].into_iter().collect(),
                seq_epoch: 0,
                max_rate_w: None,
            },
            settings: DeviceSettings::default(),
            version: 1,
            updated_at: 0,
            removed: false,
        }
    }

    #[test]
    fn replay_restores_state_and_dedups() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut s = Store::open(dir.path(), &["h1".into()]).unwrap();
            s.add_room("h1", "kitchen").unwrap();
            s.put_entry("h1", entry("meter")).unwrap();
            let ack = s.ingest("h1", vec![m("meter", 0), m("meter", 1), m("ghost", 0)]).unwrap();
            assert_eq!(ack.accepted, vec!["meter/0/0", "meter/0/1"]);
            assert_eq!(ack.rejected, vec!["ghost/0/0"]);
        }
        let before: Vec<Vec<u8>> = FILES.iter().map(|f| fs::read(dir.path().join(f)).unwrap()).collect();
        let mut s = Store::open(dir.path(), &["h1".into()]).unwrap();
        assert_eq!(s.home("h1").unwrap().measurements.len(), 2);
        s.ingest("h1", vec![m("meter", 1), m("ghost", 0)]).unwrap();
        let after: Vec<Vec<u8>> = FILES.iter().map(|f| fs::read(dir.path().join(f)).unwrap()).collect();
        assert_eq!(before, after);
        assert_eq!(s.next_event_id("h1"), "h1-cloud-000001");
        assert_eq!(s.next_event_id("h1"), "h1-cloud-000002");
    }
}
