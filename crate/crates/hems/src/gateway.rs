//! Edge gateway: terminates the three device transports, normalizes frames,
//! runs the detectors and the DR planner, and forwards everything to the
//! cloud through a durable buffer.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::io;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, Sender};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use hems_core::adapter::{self, DeviceTable, Ingested, IngestError, ProtocolBinding, RawFrame};
use hems_core::aggregate::{AggregateRecord, WindowAggregator};
use hems_core::anomaly::AnomalyDetector;
use hems_core::curtail::{plan_curtailment, BatterySnapshot, CurtailmentPlan, DeviceSnapshot};
use hems_core::envelope::{self, Envelope};
use hems_core::model::IdSeq;
use hems_core::{
    Action, ActionKind, Capability, ControlCommand, DeviceDescriptor, DeviceId, DeviceSettings, DrSignal, Event, EventKind,
    MetricKind, Origin, Protocol, Severity,
};

use crate::buffer::{record_key, write_atomic, ForwardBuffer};
use crate::coap::{self, CoapServer};
use crate::http::{self, HttpServer, Reply};
use crate::mqtt::{Broker, BrokerConfig, QoS};
use crate::wire::{DownlinkItem, DownlinkPage, EdgeConfig, IngestAck};

const SOURCE: &str = "edge-gateway";
const SEEN_CAPACITY: usize = 200_000;
const AGGREGATES_KEPT: usize = 1_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayDevice {
    pub descriptor: DeviceDescriptor,
    #[serde(default)]
    pub settings: DeviceSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    pub home_id: String,
    pub data_dir: PathBuf,
    #[serde(default = "default_mqtt")]
    pub mqtt_bind: String,
    #[serde(default = "default_coap")]
    pub coap_bind: String,
    #[serde(default = "default_http")]
    pub http_bind: String,
    /// username → password for MQTT devices; empty allows anonymous.
    #[serde(default)]
    pub mqtt_credentials: BTreeMap<String, String>,
    /// Bearer token HTTP devices must present.
    #[serde(default)]
    pub device_token: Option<String>,
    #[serde(default)]
    pub cloud_url: Option<String>,
    #[serde(default)]
    pub cloud_token: Option<String>,
    #[serde(default = "default_capacity")]
    pub buffer_capacity: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_window")]
    pub aggregate_window_seconds: u32,
    #[serde(default)]
    pub edge: EdgeConfig,
    #[serde(default)]
    pub devices: Vec<GatewayDevice>,
}

fn default_mqtt() -> String {
    "127.0.0.1:1883".into()
}
fn default_coap() -> String {
    "127.0.0.1:5683".into()
}
fn default_http() -> String {
    "127.0.0.1:8081".into()
}
fn default_capacity() -> usize {
    100_000
}
fn default_batch() -> usize {
    500
}
fn default_window() -> u32 {
    300
}

impl GatewayConfig {
    pub fn new(home_id: impl Into<String>, data_dir: impl Into<PathBuf>) -> Self {
        Self {
            home_id: home_id.into(),
            data_dir: data_dir.into(),
            mqtt_bind: default_mqtt(),
            coap_bind: default_coap(),
            http_bind: default_http(),
            mqtt_credentials: BTreeMap::new(),
            device_token: None,
            cloud_url: None,
            cloud_token: None,
            buffer_capacity: default_capacity(),
            batch_size: default_batch(),
            aggregate_window_seconds: default_window(),
            edge: EdgeConfig::default(),
            devices: Vec::new(),
        }
    }

    /// Binds every transport to an ephemeral loopback port.
    pub fn ephemeral(mut self) -> Self {
        self.mqtt_bind = "127.0.0.1:0".into();
        self.coap_bind = "127.0.0.1:0".into();
        self.http_bind = "127.0.0.1:0".into();
        self
    }
}

/// Where devices reach the gateway.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Endpoints {
    pub mqtt: SocketAddr,
    pub coap: SocketAddr,
    pub http: SocketAddr,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DrState {
    signal: DrSignal,
    #[serde(default)]
    plan: Option<CurtailmentPlan>,
    #[serde(default)]
    skipped: bool,
    #[serde(default)]
    restored: bool,
}

/// Survives restarts in `state.json`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Persisted {
    next_event: u64,
    next_command: u64,
    anomalies: u64,
    cursor: u64,
    edge: Option<EdgeConfig>,
    settings: BTreeMap<DeviceId, DeviceSettings>,
    dr: Vec<DrState>,
}

#[derive(Default)]
struct Local {
    aggregates: VecDeque<AggregateRecord>,
    status: Value,
}

/// State shared with the transport handlers.
struct Shared {
    home_id: String,
    frames: Sender<RawFrame>,
    clock_ms: AtomicI64,
    device_token: Option<String>,
    /// Pending command payloads for polling transports, keyed by command route.
    mailbox: Mutex<BTreeMap<(Protocol, String), VecDeque<Vec<u8>>>>,
    local: Mutex<Local>,
}

impl Shared {
    fn frame(&self, protocol: Protocol, route: &str, payload: &[u8]) {
        let _ = self.frames.send(RawFrame {
            protocol,
            route: route.to_string(),
            payload: payload.to_vec(),
            received_at: self.clock_ms.load(Ordering::SeqCst),
        });
    }

    fn pop_command(&self, protocol: Protocol, route: &str) -> Option<Vec<u8>> {
        self.mailbox.lock().unwrap().get_mut(&(protocol, route.to_string()))?.pop_front()
    }

    fn coap(&self, req: &coap::Request) -> coap::Response {
        let path = req.path.clone();
        let Some(route) = adapter::parse_route(Protocol::Coap, &path) else {
            return coap::Response::empty(coap::NOT_FOUND);
        };
        match (route, req.method) {
            (adapter::Route::Command { .. }, coap::GET) => match self.pop_command(Protocol::Coap, &path) {
                Some(p) => coap::Response::new(coap::CONTENT, p),
                None => coap::Response::empty(coap::CONTENT),
            },
            (adapter::Route::Command { .. }, _) => coap::Response::empty(coap::METHOD_NOT_ALLOWED),
            (_, coap::PUT | coap::POST) => {
                self.frame(Protocol::Coap, &path, &req.payload);
                coap::Response::empty(coap::CHANGED)
            }
            _ => coap::Response::empty(coap::METHOD_NOT_ALLOWED),
        }
    }

    fn http(&self, req: &http::Request) -> Reply {
        if let ("GET", ["local", what]) = (req.method.as_str(), req.segments().as_slice()) {
            let local = self.local.lock().unwrap();
            return match *what {
                "status" => Reply::json(200, &local.status),
                "aggregates" => Reply::json(200, &json!({ "aggregates": local.aggregates })),
                _ => Reply::error(404, "NotFound", "no such local resource"),
            };
        }
        if let Some(token) = &self.device_token {
            if req.bearer.as_deref() != Some(token.as_str()) {
                return Reply::error(401, "Unauthorized", "device token required");
            }
        }
        let Some(route) = adapter::parse_route(Protocol::Http, &req.path) else {
            return Reply::error(404, "NotFound", format!("no route {}", req.path));
        };
        match (route, req.method.as_str()) {
            (adapter::Route::Command { .. }, "GET") => match self.pop_command(Protocol::Http, &req.path) {
                Some(p) => Reply::raw(200, p),
                None => Reply::empty(204),
            },
            (adapter::Route::Command { .. }, _) => Reply::error(405, "MethodNotAllowed", "commands are fetched with GET"),
            (_, "POST" | "PUT") => {
                self.frame(Protocol::Http, &req.path, &req.body);
                Reply::empty(202)
            }
            _ => Reply::error(405, "MethodNotAllowed", "telemetry and events are sent with POST"),
        }
    }
}

/// Recently seen keys, forgetting the oldest beyond a fixed size.
#[derive(Default)]
struct Seen {
    set: HashSet<String>,
    order: VecDeque<String>,
}

impl Seen {
    fn insert(&mut self, key: String) -> bool {
        if !self.set.insert(key.clone()) {
            return false;
        }
        self.order.push_back(key);
        if self.order.len() > SEEN_CAPACITY {
            if let Some(old) = self.order.pop_front() {
                self.set.remove(&old);
            }
        }
        true
    }
}

type Received = (RawFrame, Result<Ingested, IngestError>);

/// Outcome of one cloud exchange.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SyncStatus {
    pub reachable: bool,
    pub forwarded: usize,
    pub dead_lettered: usize,
}

pub struct Gateway {
    config: GatewayConfig,
    table: DeviceTable,
    settings: BTreeMap<DeviceId, DeviceSettings>,
    shared: Arc<Shared>,
    frames: Receiver<RawFrame>,
    broker: Broker,
    coap: CoapServer,
    http: HttpServer,
    buffer: ForwardBuffer,
    detector: AnomalyDetector,
    aggregator: WindowAggregator,
    cloud: Option<http::Client>,
    persisted: Persisted,
    saved: Vec<u8>,
    ids: IdSeq,
    seen: Seen,
    latest_power: BTreeMap<DeviceId, f64>,
    evicted: usize,
    dispatched: Vec<ControlCommand>,
    uplink_log: Option<Vec<Vec<u8>>>,
    clock_ms: i64,
}

impl Gateway {
    pub fn start(config: GatewayConfig) -> io::Result<Gateway> {
        std::fs::create_dir_all(&config.data_dir)?;
        let state_path = config.data_dir.join("state.json");
        let persisted: Persisted = match std::fs::read(&state_path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Persisted::default(),
            Err(e) => return Err(e),
        };
        let saved = serde_json::to_vec(&persisted).unwrap_or_default();
        let buffer = ForwardBuffer::open(config.data_dir.join("buffer"), config.buffer_capacity)?;

        let table: DeviceTable = config.devices.iter().map(|d| d.descriptor.clone()).collect();
        let mut settings: BTreeMap<DeviceId, DeviceSettings> =
            config.devices.iter().map(|d| (d.descriptor.device_id.clone(), d.settings.clone())).collect();
        settings.extend(persisted.settings.clone());

        let edge = persisted.edge.unwrap_or(config.edge);
        let home = config.home_id.clone();
        let mut detector = AnomalyDetector::new(edge.detector, IdSeq::starting_at(format!("{home}-anom"), persisted.anomalies + 1));
        for d in table.iter() {
            detector.register(d);
        }

        let (tx, rx) = crossbeam_channel::unbounded();
        let shared = Arc::new(Shared {
            home_id: home.clone(),
            frames: tx,
            clock_ms: AtomicI64::new(0),
            device_token: config.device_token.clone(),
            mailbox: Mutex::new(BTreeMap::new()),
            local: Mutex::new(Local::default()),
        });

        let s = shared.clone();
        let broker = Broker::start(
            config.mqtt_bind.as_str(),
            BrokerConfig {
                credentials: config.mqtt_credentials.clone(),
                ..BrokerConfig::default()
            },
            Some(Arc::new(move |topic: &str, payload: &[u8]| {
                if !topic.ends_with("/cmd") {
                    s.frame(Protocol::Mqtt, topic, payload);
                }
            })),
        )?;
        let s = shared.clone();
        let coap = CoapServer::start(config.coap_bind.as_str(), Arc::new(move |r: &coap::Request| s.coap(r)))?;
        let s = shared.clone();
        let http = HttpServer::start(config.http_bind.as_str(), 4, Arc::new(move |r: &http::Request| s.http(r)))?;

        let cloud = config
            .cloud_url
            .as_ref()
            .map(|url| http::Client::new(url.clone(), config.cloud_token.clone(), Duration::from_secs(10)));
        log::info!(
            "gateway {home}: mqtt {} coap {} http {}",
            broker.local_addr(),
            coap.local_addr(),
            http.local_addr()
        );
        Ok(Gateway {
            ids: IdSeq::starting_at(format!("{home}-gw"), persisted.next_event.max(1)),
            aggregator: WindowAggregator::new(config.aggregate_window_seconds, home),
            table,
            settings,
            shared,
            frames: rx,
            broker,
            coap,
            http,
            buffer,
            detector,
            cloud,
            persisted,
            saved,
            seen: Seen::default(),
            latest_power: BTreeMap::new(),
            evicted: 0,
            dispatched: Vec::new(),
            uplink_log: None,
            clock_ms: 0,
            config,
        })
    }

    pub fn endpoints(&self) -> Endpoints {
        Endpoints {
            mqtt: self.broker.local_addr(),
            coap: self.coap.local_addr(),
            http: self.http.local_addr(),
        }
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn edge_config(&self) -> EdgeConfig {
        self.persisted.edge.unwrap_or(self.config.edge)
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    /// Oldest pending uplink records.
    pub fn pending(&self, max: usize) -> Vec<Envelope> {
        self.buffer.peek(max)
    }

    /// Keeps a copy of every ingest body the cloud accepted.
    pub fn record_uplink(&mut self) {
        self.uplink_log.get_or_insert_with(Vec::new);
    }

    pub fn take_uplink(&mut self) -> Vec<Vec<u8>> {
        self.uplink_log.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Commands sent to devices since the last call.
    pub fn take_dispatched(&mut self) -> Vec<ControlCommand> {
        std::mem::take(&mut self.dispatched)
    }

    pub fn set_clock(&mut self, now_ms: i64) {
        self.clock_ms = now_ms;
        self.shared.clock_ms.store(now_ms, Ordering::SeqCst);
    }

    /// Stops every transport. Pending uplink stays in the buffer on disk.
    pub fn shutdown(mut self) -> io::Result<()> {
        self.save()?;
        self.broker.shutdown();
        self.coap.shutdown();
        self.http.shutdown();
        Ok(())
    }

    /// One processing round at simulated time `now_ms`: take frames until
    /// every key in `expected` arrived (or `timeout`), process them, sync
    /// with the cloud, then run DR transitions.
    pub fn step(&mut self, now_ms: i64, expected: &BTreeSet<String>, timeout: Duration) -> io::Result<SyncStatus> {
        self.set_clock(now_ms);
        let received = self.receive(expected, timeout);
        self.process(received)?;
        let mut status = self.flush()?;
        if status.reachable {
            status.reachable = self.poll_downlink()?;
        }
        self.advance(now_ms)?;
        if status.reachable {
            let more = self.flush()?;
            status.forwarded += more.forwarded;
            status.dead_lettered += more.dead_lettered;
            status.reachable = more.reachable;
        }
        self.publish_status(status);
        self.save()?;
        Ok(status)
    }

    fn receive(&mut self, expected: &BTreeSet<String>, timeout: Duration) -> Vec<Received> {
        let deadline = Instant::now() + timeout;
        let mut missing: BTreeSet<&String> = expected.iter().collect();
        let mut out = Vec::new();
        loop {
            let frame = if missing.is_empty() {
                match self.frames.try_recv() {
                    Ok(f) => f,
                    Err(_) => break,
                }
            } else {
                match self.frames.recv_deadline(deadline) {
                    Ok(f) => f,
                    Err(_) => {
                        log::warn!("{} expected records did not arrive", missing.len());
                        break;
                    }
                }
            };
            let result = adapter::ingest(&frame, &self.table);
            match &result {
                Ok(Ingested::Measurement(m)) => {
                    missing.remove(&m.dedup_key().to_string());
                }
                Ok(Ingested::Event(e)) => {
                    missing.remove(&e.event_id);
                }
                Err(_) => {}
            }
            out.push((frame, result));
        }
        out
    }

    fn emit(&mut self, env: Envelope) -> io::Result<()> {
        self.evicted += self.buffer.push(env)?.len();
        Ok(())
    }

    fn event(&mut self, kind: EventKind, severity: Severity) -> Event {
        Event::new(self.ids.next_id(), kind, severity, SOURCE, self.clock_ms)
    }

    fn process(&mut self, received: Vec<Received>) -> io::Result<()> {
        let mut measurements = Vec::new();
        let mut events = Vec::new();
        let mut errors = Vec::new();
        for (frame, result) in received {
            match result {
                Ok(Ingested::Measurement(m)) => measurements.push(m),
                Ok(Ingested::Event(e)) => events.push(e),
                Err(e) => errors.push((frame, e)),
            }
        }
        events.sort_by(|a, b| (a.timestamp, &a.event_id).cmp(&(b.timestamp, &b.event_id)));
        measurements.sort_by(|a, b| {
            (a.timestamp, &a.device_id, a.seq_epoch, a.seq).cmp(&(b.timestamp, &b.device_id, b.seq_epoch, b.seq))
        });
        errors.sort_by(|a, b| (&a.0.route, &a.0.payload).cmp(&(&b.0.route, &b.0.payload)));

        for (frame, e) in errors {
            log::warn!("{e}");
            let event = e.to_event(frame.protocol, &mut self.ids, self.clock_ms);
            self.emit(Envelope::Event(event))?;
        }
        for e in events {
            if !self.seen.insert(format!("event:{}", e.event_id)) {
                continue;
            }
            self.detector.observe_event(&e);
            self.emit(Envelope::Event(e))?;
        }
        for m in measurements {
            if !self.seen.insert(m.dedup_key().to_string()) {
                continue;
            }
            if m.metric == MetricKind::PowerW {
                self.latest_power.insert(m.device_id.clone(), m.value);
            }
            let anomalies = self.detector.observe(&m);
            let closed = self.aggregator.push(m.clone());
            self.keep_aggregates(closed);
            self.emit(Envelope::Measurement(m))?;
            for a in anomalies {
                self.persisted.anomalies += 1;
                let phantom = a.payload_str("detector") == Some("PhantomLoad");
                let device = DeviceId::new(a.source.clone());
                self.emit(Envelope::Event(a))?;
                if phantom && self.edge_config().auto_mitigate {
                    let cmd = self.edge_command(&device, Action::SwitchOff);
                    self.dispatch(cmd, "auto-mitigation")?;
                }
            }
        }
        if self.evicted > 0 {
            let dropped = std::mem::take(&mut self.evicted);
            let e = self
                .event(EventKind::SystemAlert, Severity::Critical)
                .with("error", "BufferOverflow")
                .with("dropped", dropped as u64)
                .with("capacity", self.buffer.capacity() as u64);
            log::error!("forward buffer overflow, dropped {dropped} oldest records");
            self.emit(Envelope::Event(e))?;
            self.evicted = 0;
        }
        Ok(())
    }

    fn keep_aggregates(&self, records: Vec<AggregateRecord>) {
        if records.is_empty() {
            return;
        }
        let mut local = self.shared.local.lock().unwrap();
        local.aggregates.extend(records);
        while local.aggregates.len() > AGGREGATES_KEPT {
            local.aggregates.pop_front();
        }
    }

    fn edge_command(&mut self, device: &DeviceId, action: Action) -> ControlCommand {
        self.persisted.next_command += 1;
        ControlCommand {
            command_id: format!("{}-edge-{:06}", self.config.home_id, self.persisted.next_command),
            device_id: device.clone(),
            action,
            origin: Origin::Edge,
            issued_at: self.clock_ms,
        }
    }

    /// Sends a command over the device's transport and logs it.
    pub fn dispatch(&mut self, cmd: ControlCommand, reason: &str) -> io::Result<()> {
        let Some(descriptor) = self.table.find(&cmd.device_id).cloned() else {
            let e = self
                .event(EventKind::SystemAlert, Severity::Warning)
                .with("error", "UnknownDevice")
                .with("command_id", cmd.command_id.as_str())
                .with("device_id", cmd.device_id.as_str());
            return self.emit(Envelope::Event(e));
        };
        let binding = ProtocolBinding::standard(descriptor.protocol, &self.config.home_id, &descriptor.device_id, "");
        let frame = match adapter::emit_command(&cmd, &binding) {
            Ok(f) => f,
            Err(err) => {
                let e = self
                    .event(EventKind::SystemAlert, Severity::Warning)
                    .with("error", "UnsupportedAction")
                    .with("command_id", cmd.command_id.as_str())
                    .with("reason", err.to_string());
                return self.emit(Envelope::Event(e));
            }
        };
        match descriptor.protocol {
            Protocol::Mqtt => {
                self.broker.publish(&frame.route, &frame.payload, QoS::AtLeastOnce);
            }
            p => {
                self.shared
                    .mailbox
                    .lock()
                    .unwrap()
                    .entry((p, frame.route.clone()))
                    .or_default()
                    .push_back(frame.payload);
            }
        }
        let e = self
            .event(EventKind::CommandIssued, Severity::Info)
            .with("command_id", cmd.command_id.as_str())
            .with("device_id", cmd.device_id.as_str())
            .with("action", json!(cmd.action))
            .with("origin", json!(cmd.origin))
            .with("reason", reason);
        self.dispatched.push(cmd);
        self.emit(Envelope::Event(e))
    }

    /// Posts buffered records in batches until the buffer is empty or the
    /// cloud stops answering.
    pub fn flush(&mut self) -> io::Result<SyncStatus> {
        let mut status = SyncStatus {
            reachable: self.cloud.is_some(),
            ..SyncStatus::default()
        };
        let Some(cloud) = self.cloud.clone() else {
            return Ok(status);
        };
        while !self.buffer.is_empty() {
            let batch = self.buffer.peek(self.config.batch_size.max(1));
            let values: Vec<Value> = batch.iter().map(envelope::to_value).collect();
            let body = serde_json::to_vec(&values).expect("serializable batch");
            match cloud.post("/api/v1/ingest", &body) {
                Ok(r) if r.status == 200 => {
                    if let Ok(ack) = serde_json::from_slice::<IngestAck>(&r.body) {
                        if !ack.rejected.is_empty() {
                            log::warn!("cloud rejected {} records from unknown devices", ack.rejected.len());
                        }
                    }
                    if let Some(log) = &mut self.uplink_log {
                        log.push(body);
                    }
                    self.buffer.ack(batch.len())?;
                    status.forwarded += batch.len();
                }
                Ok(r) if r.status == 422 => {
                    let reason = String::from_utf8_lossy(&r.body).into_owned();
                    log::error!("cloud refused a batch of {}: {reason}", batch.len());
                    self.buffer.dead_letter(batch.len(), &reason)?;
                    status.dead_lettered += batch.len();
                    let first = batch.first().map(record_key).unwrap_or_default();
                    let e = self
                        .event(EventKind::SystemAlert, Severity::Critical)
                        .with("error", "SchemaViolation")
                        .with("records", batch.len() as u64)
                        .with("first_key", first)
                        .with("reason", reason);
                    self.emit(Envelope::Event(e))?;
                }
                Ok(r) => {
                    log::warn!("cloud ingest answered {}", r.status);
                    status.reachable = false;
                    break;
                }
                Err(e) => {
                    log::debug!("cloud unreachable: {e}");
                    status.reachable = false;
                    break;
                }
            }
        }
        Ok(status)
    }

    /// Fetches new downlink items and applies them. Returns whether the
    /// cloud answered.
    pub fn poll_downlink(&mut self) -> io::Result<bool> {
        let Some(cloud) = self.cloud.clone() else {
            return Ok(false);
        };
        let path = format!("/api/v1/homes/{}/commands?cursor={}", self.config.home_id, self.persisted.cursor);
        let page: DownlinkPage = match cloud.get(&path) {
            Ok(r) if r.status == 200 => match serde_json::from_slice(&r.body) {
                Ok(p) => p,
                Err(e) => {
                    log::warn!("bad downlink page: {e}");
                    return Ok(true);
                }
            },
            Ok(r) => {
                log::warn!("downlink poll answered {}", r.status);
                return Ok(false);
            }
            Err(_) => return Ok(false),
        };
        for value in page.items {
            match DownlinkItem::from_value(value) {
                Ok(item) => self.apply_downlink(item)?,
                Err(e) => log::warn!("skipping downlink item: {e}"),
            }
        }
        self.persisted.cursor = page.cursor;
        Ok(true)
    }

    fn apply_downlink(&mut self, item: DownlinkItem) -> io::Result<()> {
        match item {
            DownlinkItem::Command(cmd) => self.dispatch(cmd, "cloud"),
            DownlinkItem::DrSignal(signal) => {
                if !self.persisted.dr.iter().any(|d| d.signal.signal_id == signal.signal_id) {
                    self.persisted.dr.push(DrState {
                        signal,
                        plan: None,
                        skipped: false,
                        restored: false,
                    });
                }
                Ok(())
            }
            DownlinkItem::EdgeConfig(c) => {
                self.persisted.edge = Some(c);
                self.detector.set_config(c.detector);
                Ok(())
            }
            DownlinkItem::Settings { device_id, settings } => {
                self.settings.insert(device_id.clone(), settings.clone());
                self.persisted.settings.insert(device_id, settings);
                Ok(())
            }
        }
    }

    fn snapshots(&self) -> Vec<DeviceSnapshot> {
        self.table
            .iter()
            .filter(|d| d.has_metric(MetricKind::PowerW))
            .map(|d| DeviceSnapshot {
                device_id: d.device_id.clone(),
                power_w: self.latest_power.get(&d.device_id).copied().unwrap_or(0.0),
                battery: d.capabilities.contains(&Capability::Action(ActionKind::SetChargeRateW)).then(|| BatterySnapshot {
                    max_rate_w: d.max_rate_w.unwrap_or(0.0),
                    // state of charge is not reported; assume energy is available
                    battery_wh: 1.0,
                }),
            })
            .collect()
    }

    fn priorities(&self) -> BTreeMap<DeviceId, u32> {
        self.settings
            .iter()
            .map(|(id, s)| (id.clone(), if s.curtailable { s.priority_rank } else { 0 }))
            .collect()
    }

    /// Starts and ends demand-response windows due at `now_ms`.
    pub fn advance(&mut self, now_ms: i64) -> io::Result<()> {
        for i in 0..self.persisted.dr.len() {
            let dr = self.persisted.dr[i].clone();
            if dr.skipped || dr.restored {
                continue;
            }
            match &dr.plan {
                None if now_ms >= dr.signal.window.end => {
                    self.persisted.dr[i].skipped = true;
                    let e = self
                        .event(EventKind::DrSignal, Severity::Warning)
                        .with("signal_id", dr.signal.signal_id.as_str())
                        .with("reason", "window ended before the signal reached the gateway");
                    self.emit(Envelope::Event(e))?;
                }
                None if now_ms >= dr.signal.window.start => {
                    let (snapshots, priorities) = (self.snapshots(), self.priorities());
                    let outcome = plan_curtailment(&dr.signal, &snapshots, &priorities, now_ms, &mut self.ids);
                    let plan = outcome.plan;
                    let e = self
                        .event(EventKind::DrSignal, Severity::Info)
                        .with("signal_id", dr.signal.signal_id.as_str())
                        .with("plan", json!(plan));
                    self.emit(Envelope::Event(e))?;
                    if let Some(w) = outcome.warning {
                        self.emit(Envelope::Event(w))?;
                    }
                    for a in &plan.actions {
                        self.dispatch(a.command.clone(), "demand-response")?;
                    }
                    self.persisted.dr[i].plan = Some(plan);
                }
                Some(plan) if now_ms >= plan.restore_at => {
                    let plan = plan.clone();
                    for (n, a) in plan.actions.iter().enumerate() {
                        let cmd = ControlCommand {
                            command_id: format!("{}-r{}", plan.signal_id, n + 1),
                            device_id: a.device_id.clone(),
                            action: a.restore,
                            origin: Origin::Edge,
                            issued_at: now_ms,
                        };
                        self.dispatch(cmd, "demand-response-restore")?;
                    }
                    self.persisted.dr[i].restored = true;
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn publish_status(&self, sync: SyncStatus) {
        let status = json!({
            "home_id": self.shared.home_id,
            "clock_ms": self.clock_ms,
            "devices": self.table.len(),
            "buffered": self.buffer.len(),
            "cloud_reachable": sync.reachable,
            "edge": self.edge_config(),
            "latest_power_w": self.latest_power,
        });
        self.shared.local.lock().unwrap().status = status;
    }

    fn save(&mut self) -> io::Result<()> {
        self.persisted.next_event = self.ids.peek();
        let bytes = serde_json::to_vec_pretty(&self.persisted).expect("serializable state");
        if bytes != self.saved {
            write_atomic(&self.config.data_dir.join("state.json"), &bytes)?;
            self.saved = bytes;
        }
        Ok(())
    }
}
