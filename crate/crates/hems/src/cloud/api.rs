//! HTTP API v1 handlers. Everything lives under `/api/v1` and needs the
//! home's bearer token.

use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use hems_core::aggregate::Scope;
use hems_core::calendar::{self, Timeframe};
use hems_core::energy::query_energy;
use hems_core::envelope::{self, Envelope};
use hems_core::model::{is_valid_id, validate, validate_command, validate_measurement};
use hems_core::recommend::{recommend, Recommendation, RecommendationStatus};
use hems_core::trend::{analyze_maintenance, daily_baseline_power, daily_energy_per_cycle, Indicator, MaintenanceAlert};
use hems_core::{DeviceDescriptor, DeviceId, DeviceSettings, DrSignal, Event, EventKind, Measurement, MetricKind, Severity, TimeWindow, DAY_MS};

use super::store::{RegistryEntry, Store};
use super::CloudConfig;
use crate::http::{Reply, Request};
use crate::wire::{DownlinkItem, DownlinkPage, EdgeConfig};

const MAX_WAIT_MS: u64 = 30_000;

pub struct Api {
    pub config: CloudConfig,
    pub store: Mutex<Store>,
    /// Signalled whenever a downlink item is queued.
    pub downlink: Condvar,
}

type Result<T> = std::result::Result<T, Reply>;

fn io_error(e: std::io::Error) -> Reply {
    Reply::error(500, "StorageError", e.to_string())
}

fn parse_body<T: for<'de> Deserialize<'de>>(req: &Request) -> Result<T> {
    serde_json::from_slice(&req.body).map_err(|e| Reply::error(422, "SchemaViolation", e.to_string()))
}

fn query_i64(req: &Request, key: &str) -> Result<Option<i64>> {
    req.query
        .get(key)
        .map(|v| v.parse::<i64>().map_err(|_| Reply::error(400, "InvalidParameter", format!("`{key}` must be an integer (UTC ms)"))))
        .transpose()
}

fn range(req: &Request) -> Result<TimeWindow> {
    let from = query_i64(req, "from")?.unwrap_or(i64::MIN);
    let to = query_i64(req, "to")?.unwrap_or(i64::MAX);
    if from >= to {
        return Err(Reply::error(400, "InvalidRange", "`from` must be before `to`"));
    }
    Ok(TimeWindow::new(from, to))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NewDevice {
    descriptor: DeviceDescriptor,
    #[serde(default)]
    settings: DeviceSettings,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DevicePatch {
    #[serde(default)]
    room: Option<String>,
    #[serde(default)]
    settings: Option<DeviceSettings>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NewRoom {
    room: String,
}

#[derive(Serialize)]
struct Maintenance {
    alerts: Vec<MaintenanceAlert>,
}

impl Api {
    pub fn new(config: CloudConfig, store: Store) -> Self {
        Self {
            config,
            store: Mutex::new(store),
            downlink: Condvar::new(),
        }
    }

    fn home_for_token(&self, req: &Request) -> Result<String> {
        let token = req.bearer.as_deref().ok_or_else(|| Reply::error(401, "Unauthorized", "missing bearer token"))?;
        self.config
            .homes
            .iter()
            .find(|h| h.token == token)
            .map(|h| h.home_id.clone())
            .ok_or_else(|| Reply::error(401, "Unauthorized", "unknown token"))
    }

    pub fn handle(&self, req: &Request) -> Reply {
        match self.route(req) {
            Ok(r) | Err(r) => r,
        }
    }

    fn route(&self, req: &Request) -> Result<Reply> {
        let seg = req.segments();
        let method = req.method.as_str();
        match (method, seg.as_slice()) {
            ("GET", ["api", "v1", "health"]) => return Ok(Reply::json(200, &json!({"status": "ok"}))),
            ("POST", ["api", "v1", "ingest"]) => {
                let home = self.home_for_token(req)?;
                return self.ingest(&home, req);
            }
            (_, ["api", "v1", "homes", home, rest @ ..]) => {
                let token_home = self.home_for_token(req)?;
                if !self.config.homes.iter().any(|h| h.home_id == *home) {
                    return Err(Reply::error(404, "UnknownHome", format!("no home `{home}`")));
                }
                if token_home != *home {
                    return Err(Reply::error(403, "Forbidden", "token is not valid for this home"));
                }
                return match (method, rest) {
                    ("GET", ["energy"]) => self.energy(home, req),
                    ("GET", ["measurements"]) => self.measurements(home, req),
                    ("GET", ["live"]) => self.live(home),
                    ("GET", ["devices"]) => self.list_devices(home, req),
                    ("POST", ["devices"]) => self.add_device(home, req),
                    ("GET", ["devices", id]) => self.get_device(home, id),
                    ("PUT", ["devices", id]) => self.modify_device(home, id, req),
                    ("DELETE", ["devices", id]) => self.remove_device(home, id),
                    ("GET", ["rooms"]) => self.rooms(home),
                    ("POST", ["rooms"]) => self.add_room(home, req),
                    ("GET", ["events"]) => self.events(home, req),
                    ("POST", ["events"]) => self.post_event(home, req),
                    ("GET", ["maintenance"]) => self.maintenance(home),
                    ("GET", ["recommendations"]) => self.recommendations(home, req),
                    ("POST", ["recommendations", id, action @ ("apply" | "dismiss")]) => self.decide(home, id, action),
                    ("GET", ["dr-signals"]) => self.dr_signals(home),
                    ("POST", ["dr-signals"]) => self.post_dr_signal(home, req),
                    ("GET", ["commands"]) => self.downlink_page(home, req),
                    ("POST", ["commands"]) => self.post_command(home, req),
                    ("GET", ["edge-config"]) => self.edge_config(home),
                    ("PUT", ["edge-config"]) => self.put_edge_config(home, req),
                    _ => Err(Reply::error(404, "NotFound", format!("no route for {method} {}", req.path))),
                };
            }
            _ => {}
        }
        Err(Reply::error(404, "NotFound", format!("no route for {method} {}", req.path)))
    }

    fn ingest(&self, home: &str, req: &Request) -> Result<Reply> {
        let batch = envelope::decode_batch(&req.body).map_err(|e| Reply::error(422, "SchemaViolation", e.to_string()))?;
        for (i, env) in batch.iter().enumerate() {
            match env {
                Envelope::Measurement(m) => validate_measurement(m)
                    .map_err(|e| Reply::error(422, "SchemaViolation", format!("entry {i}: {e}")))?,
                Envelope::Event(_) => {}
                Envelope::Command(_) => {
                    return Err(Reply::error(422, "SchemaViolation", format!("entry {i}: commands are downlink only")))
                }
            }
        }
        let mut store = self.store.lock().unwrap();
        let ack = store.ingest(home, batch).map_err(io_error)?;
        Ok(Reply::json(200, &ack))
    }

    fn energy(&self, home: &str, req: &Request) -> Result<Reply> {
        let timeframe = req
            .query
            .get("timeframe")
            .map(|t| Timeframe::parse(t).ok_or_else(|| Reply::error(400, "InvalidParameter", format!("unknown timeframe `{t}`"))))
            .transpose()?
            .unwrap_or(Timeframe::Daily);
        let window = range(req)?;
        let store = self.store.lock().unwrap();
        let h = store.home(home).expect("configured home");
        let scope_param = req.query.get("scope").map(String::as_str).unwrap_or("home");
        let scope = match scope_param {
            "home" => Scope::Home(home.to_string()),
            s => match s.strip_prefix("device:") {
                Some(d) if h.devices.contains_key(&DeviceId::new(d)) => Scope::Device(DeviceId::new(d)),
                Some(d) => return Err(Reply::error(404, "UnknownScope", format!("no device `{d}`"))),
                None => return Err(Reply::error(400, "InvalidParameter", "scope must be `home` or `device:{id}`")),
            },
        };
        let devices: Vec<DeviceId> = h.devices.keys().cloned().collect();
        let records = query_energy(&h.measurements, &scope, &devices, timeframe, window);
        Ok(Reply::json(200, &json!({"scope": scope_param, "timeframe": timeframe, "records": records})))
    }

    fn measurements(&self, home: &str, req: &Request) -> Result<Reply> {
        let window = range(req)?;
        let device = req.query.get("device").map(|d| DeviceId::new(d.as_str()));
        let metric = req
            .query
            .get("metric")
            .map(|m| MetricKind::from_token(m).ok_or_else(|| Reply::error(400, "InvalidParameter", format!("unknown metric `{m}`"))))
            .transpose()?;
        let store = self.store.lock().unwrap();
        let h = store.home(home).expect("configured home");
        let rows: Vec<&Measurement> = h
            .measurements
            .iter()
            .filter(|m| device.as_ref().is_none_or(|d| &m.device_id == d))
            .filter(|m| metric.is_none_or(|k| m.metric == k))
            .filter(|m| window.contains(m.timestamp))
            .collect();
        Ok(Reply::json(200, &json!({ "measurements": rows })))
    }

    fn live(&self, home: &str) -> Result<Reply> {
        let store = self.store.lock().unwrap();
        let h = store.home(home).expect("configured home");
        let mut devices: BTreeMap<&str, BTreeMap<&str, Value>> = BTreeMap::new();
        for ((device, metric), (ts, value)) in &h.latest {
            devices
                .entry(device.as_str())
                .or_default()
                .insert(metric.token(), json!({"value": value, "timestamp": ts}));
        }
        Ok(Reply::json(200, &json!({ "devices": devices })))
    }

    fn list_devices(&self, home: &str, req: &Request) -> Result<Reply> {
        let include_removed = req.query.get("include_removed").is_some_and(|v| v == "true");
        let store = self.store.lock().unwrap();
        let h = store.home(home).expect("configured home");
        let devices: Vec<&RegistryEntry> = h.devices.values().filter(|e| include_removed || !e.removed).collect();
        Ok(Reply::json(200, &json!({ "devices": devices })))
    }

    fn get_device(&self, home: &str, id: &str) -> Result<Reply> {
        let store = self.store.lock().unwrap();
        let h = store.home(home).expect("configured home");
        match h.active(&DeviceId::new(id)) {
            Some(e) => Ok(Reply::json(200, e)),
            None => Err(Reply::error(404, "UnknownDevice", format!("no device `{id}`"))),
        }
    }

    fn audit(&self, store: &mut Store, home: &str, severity: Severity, device: &str, op: &str) -> Event {
        let ts = store.home(home).map_or(0, |h| h.clock_ms);
        Event::new(store.next_event_id(home), EventKind::SystemAlert, severity, "cloud-registry", ts)
            .with("op", op)
            .with("device_id", device)
    }

    fn add_device(&self, home: &str, req: &Request) -> Result<Reply> {
        let body: NewDevice = parse_body(req)?;
        let d = body.descriptor;
        if d.home_id != home {
            return Err(Reply::error(422, "SchemaViolation", "descriptor home_id does not match the path"));
        }
        validate(&d).map_err(|v| {
            let msg: Vec<String> = v.iter().map(ToString::to_string).collect();
            Reply::error(422, "InvalidDescriptor", msg.join("; "))
        })?;
        let mut store = self.store.lock().unwrap();
        let h = store.home(home).expect("configured home");
        if !h.rooms.contains(&d.room) {
            return Err(Reply::error(422, "UnknownRoom", format!("room `{}` does not exist", d.room)));
        }
        let previous = h.devices.get(&d.device_id);
        if previous.is_some_and(|e| !e.removed) {
            return Err(Reply::error(409, "DuplicateDevice", format!("device `{}` already exists", d.device_id)));
        }
        let entry = RegistryEntry {
            version: previous.map_or(1, |e| e.version + 1),
            updated_at: h.clock_ms,
            descriptor: d,
            settings: body.settings,
            removed: false,
        };
        let event = self.audit(&mut store, home, Severity::Info, entry.descriptor.device_id.as_str(), "add").with("version", entry.version);
        store.put_entry(home, entry.clone()).map_err(io_error)?;
        store.append_event(home, event).map_err(io_error)?;
        Ok(Reply::json(201, &entry))
    }

    fn modify_device(&self, home: &str, id: &str, req: &Request) -> Result<Reply> {
        let patch: DevicePatch = parse_body(req)?;
        let mut store = self.store.lock().unwrap();
        let h = store.home(home).expect("configured home");
        let Some(old) = h.active(&DeviceId::new(id)).cloned() else {
            return Err(Reply::error(404, "UnknownDevice", format!("no device `{id}`")));
        };
        let mut new = old.clone();
        if let Some(room) = patch.room {
            if !h.rooms.contains(&room) {
                return Err(Reply::error(422, "UnknownRoom", format!("room `{room}` does not exist")));
            }
            new.descriptor.room = room;
        }
        if let Some(settings) = patch.settings {
            new.settings = settings;
        }
        let mut changes = serde_json::Map::new();
        if old.descriptor.room != new.descriptor.room {
            changes.insert("room".into(), json!({"old": old.descriptor.room, "new": new.descriptor.room}));
        }
        let (Value::Object(before), Value::Object(after)) = (json!(old.settings), json!(new.settings)) else {
            unreachable!("settings serialize to objects");
        };
        for key in before.keys().chain(after.keys()).collect::<std::collections::BTreeSet<_>>() {
            if before.get(key) != after.get(key) {
                changes.insert(key.clone(), json!({"old": before.get(key), "new": after.get(key)}));
            }
        }
        if changes.is_empty() {
            return Ok(Reply::json(200, &old));
        }
        new.version += 1;
        new.updated_at = h.clock_ms;
        let event = self
            .audit(&mut store, home, Severity::Info, id, "modify")
            .with("version", new.version)
            .with("changes", Value::Object(changes));
        store.put_entry(home, new.clone()).map_err(io_error)?;
        store.append_event(home, event).map_err(io_error)?;
        if old.settings != new.settings {
            store
                .push_downlink(home, DownlinkItem::Settings { device_id: DeviceId::new(id), settings: new.settings.clone() })
                .map_err(io_error)?;
            self.downlink.notify_all();
        }
        Ok(Reply::json(200, &new))
    }

    fn remove_device(&self, home: &str, id: &str) -> Result<Reply> {
        let mut store = self.store.lock().unwrap();
        let h = store.home(home).expect("configured home");
        let Some(mut entry) = h.active(&DeviceId::new(id)).cloned() else {
            return Err(Reply::error(404, "UnknownDevice", format!("no device `{id}`")));
        };
        entry.removed = true;
        entry.version += 1;
        entry.updated_at = h.clock_ms;
        let event = self.audit(&mut store, home, Severity::Info, id, "remove").with("version", entry.version);
        store.put_entry(home, entry.clone()).map_err(io_error)?;
        store.append_event(home, event).map_err(io_error)?;
        Ok(Reply::json(200, &entry))
    }

    fn rooms(&self, home: &str) -> Result<Reply> {
        let store = self.store.lock().unwrap();
        let h = store.home(home).expect("configured home");
        Ok(Reply::json(200, &json!({ "rooms": h.rooms })))
    }

    fn add_room(&self, home: &str, req: &Request) -> Result<Reply> {
        let body: NewRoom = parse_body(req)?;
        if !is_valid_id(&body.room) {
            return Err(Reply::error(422, "SchemaViolation", "room names use [A-Za-z0-9_.-]"));
        }
        let mut store = self.store.lock().unwrap();
        if !store.add_room(home, &body.room).map_err(io_error)? {
            return Err(Reply::error(409, "DuplicateRoom", format!("room `{}` already exists", body.room)));
        }
        Ok(Reply::json(201, &json!({ "room": body.room })))
    }

    fn events(&self, home: &str, req: &Request) -> Result<Reply> {
        let window = range(req)?;
        let kind = req
            .query
            .get("kind")
            .map(|k| EventKind::parse(k).ok_or_else(|| Reply::error(400, "InvalidFilter", format!("unknown kind `{k}`"))))
            .transpose()?;
        let severity = req
            .query
            .get("severity")
            .map(|s| Severity::parse(s).ok_or_else(|| Reply::error(400, "InvalidFilter", format!("unknown severity `{s}`"))))
            .transpose()?;
        let source = req.query.get("source");
        let store = self.store.lock().unwrap();
        let h = store.home(home).expect("configured home");
        let mut events: Vec<&Event> = h
            .events
            .iter()
            .filter(|e| window.contains(e.timestamp))
            .filter(|e| kind.is_none_or(|k| e.kind == k))
            .filter(|e| severity.is_none_or(|s| e.severity == s))
            .filter(|e| source.is_none_or(|s| &e.source == s))
            .collect();
        events.sort_by_key(|e| e.timestamp);
        Ok(Reply::json(200, &json!({ "events": events })))
    }

    fn post_event(&self, home: &str, req: &Request) -> Result<Reply> {
        let Envelope::Event(e) = envelope::decode(&req.body).map_err(|e| Reply::error(422, "SchemaViolation", e.to_string()))? else {
            return Err(Reply::error(422, "SchemaViolation", "expected an event envelope"));
        };
        let mut store = self.store.lock().unwrap();
        if !store.append_event(home, e.clone()).map_err(io_error)? {
            return Err(Reply::error(409, "DuplicateEvent", format!("event `{}` already exists", e.event_id)));
        }
        Ok(Reply::json(201, &envelope::to_value(&Envelope::Event(e))))
    }

    /// Evaluates every metered device; alerts raised for the first time are
    /// also recorded as MaintenanceAlert events.
    fn maintenance(&self, home: &str) -> Result<Reply> {
        let mut store = self.store.lock().unwrap();
        let h = store.home(home).expect("configured home");
        let cfg = &self.config.maintenance;
        let mut per_device: BTreeMap<&DeviceId, Vec<Measurement>> = BTreeMap::new();
        for m in &h.measurements {
            if matches!(m.metric, MetricKind::PowerW | MetricKind::EnergyWh) {
                per_device.entry(&m.device_id).or_default().push(m.clone());
            }
        }
        let mut alerts = Vec::new();
        for (device, samples) in per_device {
            let indicators = [
                (Indicator::EnergyPerCycleTrend, daily_energy_per_cycle(&samples, self.config.cycle_on_threshold_w)),
                (Indicator::BaselinePowerTrend, daily_baseline_power(&samples)),
            ];
            for (indicator, daily) in indicators {
                let Some(first) = daily.first().map(|d| d.0) else { continue };
                let points: Vec<(f64, f64)> = daily.iter().map(|(d, v)| ((d - first) as f64, *v)).collect();
                if let Some(alert) = analyze_maintenance(device, indicator, &points, first * DAY_MS, cfg) {
                    alerts.push(alert);
                }
            }
        }
        let clock = h.clock_ms;
        for a in &alerts {
            let id = format!("{home}-maint-{}-{:?}", a.device_id, a.indicator);
            if store.home(home).is_some_and(|h| h.has_event(&id)) {
                continue;
            }
            let e = Event::new(id, EventKind::MaintenanceAlert, Severity::Warning, a.device_id.as_str(), clock)
                .with("indicator", format!("{:?}", a.indicator))
                .with("slope", a.slope)
                .with("intercept", a.intercept)
                .with("projected_breach_date_ms", a.projected_breach_date_ms);
            store.append_event(home, e).map_err(io_error)?;
        }
        Ok(Reply::json(200, &Maintenance { alerts }))
    }

    fn compute_recommendations(&self, store: &Store, home: &str, lookback_days: i64) -> Vec<Recommendation> {
        let h = store.home(home).expect("configured home");
        let Some(tariff) = self.config.homes.iter().find(|c| c.home_id == home).map(|c| &c.tariff) else {
            return Vec::new();
        };
        if h.measurements.is_empty() {
            return Vec::new();
        }
        let end = calendar::bucket_start(h.clock_ms - 1, Timeframe::Daily) + DAY_MS;
        let window = TimeWindow::new(end - lookback_days * DAY_MS, end);
        let descriptors: Vec<DeviceDescriptor> = h.devices.values().filter(|e| !e.removed).map(|e| e.descriptor.clone()).collect();
        let settings = h.devices.iter().map(|(id, e)| (id.clone(), e.settings.clone())).collect();
        let mut recs = recommend(home, &h.measurements, &descriptors, &settings, tariff, window, &self.config.recommend);
        for r in &mut recs {
            if let Some(s) = h.statuses.get(&r.recommendation_id) {
                r.status = *s;
            }
        }
        recs
    }

    fn lookback(req: &Request) -> Result<i64> {
        let days = query_i64(req, "lookback_days")?.unwrap_or(7);
        if !(1..=366).contains(&days) {
            return Err(Reply::error(400, "InvalidParameter", "lookback_days must be in 1..=366"));
        }
        Ok(days)
    }

    fn recommendations(&self, home: &str, req: &Request) -> Result<Reply> {
        let days = Self::lookback(req)?;
        let store = self.store.lock().unwrap();
        let recs = self.compute_recommendations(&store, home, days);
        Ok(Reply::json(200, &json!({ "recommendations": recs })))
    }

    fn decide(&self, home: &str, id: &str, action: &str) -> Result<Reply> {
        let mut store = self.store.lock().unwrap();
        let Some(mut rec) = self.compute_recommendations(&store, home, 7).into_iter().find(|r| r.recommendation_id == id) else {
            return Err(Reply::error(404, "UnknownRecommendation", format!("no recommendation `{id}`")));
        };
        if rec.status != RecommendationStatus::Proposed {
            return Err(Reply::error(409, "AlreadyDecided", format!("recommendation `{id}` is {:?}", rec.status)));
        }
        rec.status = if action == "apply" { RecommendationStatus::Applied } else { RecommendationStatus::Dismissed };
        store.set_status(home, id, rec.status).map_err(io_error)?;
        if rec.status == RecommendationStatus::Applied {
            let clock = store.home(home).map_or(0, |h| h.clock_ms);
            let mut event = Event::new(store.next_event_id(home), EventKind::CommandIssued, Severity::Info, "cloud-recommendations", clock)
                .with("recommendation_id", id)
                .with("device_id", rec.device_id.as_str());
            if let Some(cmd) = &rec.proposed_command {
                event = event.with("command_id", cmd.command_id.as_str()).with("action", json!(cmd.action));
                store.push_downlink(home, DownlinkItem::Command(cmd.clone())).map_err(io_error)?;
                self.downlink.notify_all();
            }
            if let Some(change) = &rec.schedule_change {
                event = event.with("schedule_change", json!(change));
            }
            store.append_event(home, event).map_err(io_error)?;
        }
        Ok(Reply::json(200, &rec))
    }

    fn dr_signals(&self, home: &str) -> Result<Reply> {
        let store = self.store.lock().unwrap();
        let h = store.home(home).expect("configured home");
        let signals: Vec<&DrSignal> = h
            .downlink
            .iter()
            .filter_map(|i| match i {
                DownlinkItem::DrSignal(s) => Some(s),
                _ => None,
            })
            .collect();
        let plans: Vec<&Value> = h
            .events
            .iter()
            .filter(|e| e.kind == EventKind::DrSignal)
            .filter_map(|e| e.payload.get("plan"))
            .collect();
        Ok(Reply::json(200, &json!({ "signals": signals, "plans": plans })))
    }

    fn post_dr_signal(&self, home: &str, req: &Request) -> Result<Reply> {
        let signal: DrSignal = parse_body(req)?;
        signal.validate().map_err(|e| Reply::error(422, "InvalidSignal", e.to_string()))?;
        let mut store = self.store.lock().unwrap();
        let h = store.home(home).expect("configured home");
        if h.downlink.iter().any(|i| matches!(i, DownlinkItem::DrSignal(s) if s.signal_id == signal.signal_id)) {
            return Err(Reply::error(409, "DuplicateSignal", format!("signal `{}` already exists", signal.signal_id)));
        }
        let event = Event::new(store.next_event_id(home), EventKind::DrSignal, Severity::Info, "cloud", signal.window.start)
            .with("signal_id", signal.signal_id.as_str())
            .with("target_reduction_w", signal.target_reduction_w)
            .with("window_start", signal.window.start)
            .with("window_end", signal.window.end);
        store.push_downlink(home, DownlinkItem::DrSignal(signal.clone())).map_err(io_error)?;
        store.append_event(home, event).map_err(io_error)?;
        self.downlink.notify_all();
        Ok(Reply::json(202, &signal))
    }

    fn post_command(&self, home: &str, req: &Request) -> Result<Reply> {
        let Envelope::Command(cmd) = envelope::decode(&req.body).map_err(|e| Reply::error(422, "SchemaViolation", e.to_string()))? else {
            return Err(Reply::error(422, "SchemaViolation", "expected a command envelope"));
        };
        let mut store = self.store.lock().unwrap();
        let h = store.home(home).expect("configured home");
        let Some(entry) = h.active(&cmd.device_id) else {
            return Err(Reply::error(404, "UnknownDevice", format!("no device `{}`", cmd.device_id)));
        };
        validate_command(&cmd, &entry.descriptor).map_err(|e| Reply::error(422, "InvalidCommand", e.to_string()))?;
        if h.downlink.iter().any(|i| matches!(i, DownlinkItem::Command(c) if c.command_id == cmd.command_id)) {
            return Err(Reply::error(409, "DuplicateCommand", format!("command `{}` already exists", cmd.command_id)));
        }
        let event = Event::new(store.next_event_id(home), EventKind::CommandIssued, Severity::Info, "cloud", cmd.issued_at)
            .with("command_id", cmd.command_id.as_str())
            .with("device_id", cmd.device_id.as_str())
            .with("action", json!(cmd.action))
            .with("origin", json!(cmd.origin));
        store.push_downlink(home, DownlinkItem::Command(cmd.clone())).map_err(io_error)?;
        store.append_event(home, event).map_err(io_error)?;
        self.downlink.notify_all();
        Ok(Reply::json(202, &envelope::to_value(&Envelope::Command(cmd))))
    }

    /// Downlink long-poll: items from `cursor` on, waiting up to `wait_ms`
    /// when there are none yet.
    fn downlink_page(&self, home: &str, req: &Request) -> Result<Reply> {
        let cursor = query_i64(req, "cursor")?.unwrap_or(0);
        let wait = query_i64(req, "wait_ms")?.unwrap_or(0);
        if cursor < 0 || wait < 0 {
            return Err(Reply::error(400, "InvalidParameter", "cursor and wait_ms must be non-negative"));
        }
        let deadline = Instant::now() + Duration::from_millis((wait as u64).min(MAX_WAIT_MS));
        let mut store = self.store.lock().unwrap();
        loop {
            let items = &store.home(home).expect("configured home").downlink;
            if items.len() as i64 > cursor || Instant::now() >= deadline {
                let page = DownlinkPage {
                    items: items.iter().skip(cursor as usize).map(DownlinkItem::to_value).collect(),
                    cursor: items.len().max(cursor as usize) as u64,
                };
                return Ok(Reply::json(200, &page));
            }
            let left = deadline.saturating_duration_since(Instant::now());
            store = self.downlink.wait_timeout(store, left).unwrap().0;
        }
    }

    fn edge_config(&self, home: &str) -> Result<Reply> {
        let store = self.store.lock().unwrap();
        let h = store.home(home).expect("configured home");
        let config = h
            .downlink
            .iter()
            .rev()
            .find_map(|i| match i {
                DownlinkItem::EdgeConfig(c) => Some(*c),
                _ => None,
            })
            .unwrap_or_default();
        Ok(Reply::json(200, &config))
    }

    fn put_edge_config(&self, home: &str, req: &Request) -> Result<Reply> {
        let config: EdgeConfig = parse_body(req)?;
        let mut store = self.store.lock().unwrap();
        let clock = store.home(home).map_or(0, |h| h.clock_ms);
        let event = Event::new(store.next_event_id(home), EventKind::SystemAlert, Severity::Info, "cloud", clock)
            .with("op", "edge-config")
            .with("config", json!(config));
        store.push_downlink(home, DownlinkItem::EdgeConfig(config)).map_err(io_error)?;
        store.append_event(home, event).map_err(io_error)?;
        self.downlink.notify_all();
        Ok(Reply::json(200, &config))
    }
}
