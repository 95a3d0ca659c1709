//! Plays a household scenario through the whole stack: simulated devices
//! talk to a real gateway over loopback transports, the gateway forwards to
//! a real cloud, and the run ends with a report built from cloud queries.
//!
//! The loop is lockstep: every tick waits until the gateway has taken all
//! frames emitted in that tick and every device has taken its commands, so
//! a run is a pure function of the scenario and seed.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use hems_core::adapter::{encode_event, encode_telemetry};
use hems_core::envelope::{self, Envelope};
use hems_core::flex::{earliest_cost, schedule_flexible_loads, slot_prices, FlexSchedule};
use hems_core::recommend::Recommendation;
use hems_core::scenario::{Fleet, HouseholdScenario};
use hems_core::sim::FaultKind;
use hems_core::trend::MaintenanceAlert;
use hems_core::{ControlCommand, DeviceId, Event, EventKind, Measurement, MetricKind, Origin};

use crate::buffer::record_key;
use crate::cloud::{CloudConfig, CloudService, HomeConfig};
use crate::device::{DeviceAuth, DeviceLink, LinkError};
use crate::gateway::{Gateway, GatewayConfig, GatewayDevice};
use crate::http;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("device link: {0}")]
    Link(#[from] LinkError),
    #[error("cloud: {0}")]
    Cloud(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Speed {
    #[default]
    Max,
    /// One tick per `tick_seconds` of wall time.
    Realtime,
}

/// Fixed ports; 0 picks a free one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Ports {
    pub cloud: u16,
    pub mqtt: u16,
    pub coap: u16,
    pub http: u16,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub work_dir: PathBuf,
    pub ports: Ports,
    pub speed: Speed,
    /// How long a tick may wait for frames and commands in flight.
    pub wait: Duration,
}

impl RunOptions {
    pub fn new(work_dir: impl Into<PathBuf>) -> Self {
        Self {
            seed: None,
            work_dir: work_dir.into(),
            ports: Ports::default(),
            speed: Speed::Max,
            wait: Duration::from_secs(10),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Invariant {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyCheck {
    pub device_id: DeviceId,
    /// Σ power·dt/3600 over every tick.
    pub oracle_wh: f64,
    /// Last cumulative reading stored in the cloud.
    pub reported_wh: f64,
    /// Sum of the cloud's hourly energy buckets.
    pub bucket_sum_wh: f64,
    /// Last minus first stored reading.
    pub reading_span_wh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub device_id: DeviceId,
    pub fault: String,
    pub onset_tick: u64,
    pub detected_tick: Option<u64>,
    pub detector: Option<String>,
    /// Samples of the flagged metric between window start and detection.
    pub samples: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlexSummary {
    pub schedule: Option<FlexSchedule>,
    pub error: Option<String>,
    pub baseline_cost: f64,
    pub peak_cap_w: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub home_id: String,
    pub seed: u64,
    pub ticks: u64,
    pub tick_seconds: u32,
    pub devices: usize,
    pub measurements_emitted: usize,
    pub device_events_emitted: usize,
    pub measurements_stored: usize,
    pub events_stored: usize,
    pub uplink_batches: usize,
    pub events_by_kind: BTreeMap<String, usize>,
    pub energy: Vec<EnergyCheck>,
    pub dr_plans: Vec<Value>,
    pub flex: Option<FlexSummary>,
    pub detections: Vec<Detection>,
    /// Anomaly events not explained by an injected fault.
    pub unexplained_anomalies: Vec<String>,
    pub maintenance: Vec<MaintenanceAlert>,
    pub recommendations: Vec<Recommendation>,
    pub invariants: Vec<Invariant>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable report");
        s.push('\n');
        s
    }

    pub fn invariant(&self, name: &str) -> Option<&Invariant> {
        self.invariants.iter().find(|i| i.name == name)
    }
}

pub struct RunOutput {
    pub report: RunReport,
    /// Every measurement and device event, in the order devices sent them.
    pub emissions: Vec<Envelope>,
    /// Ingest bodies the cloud accepted, in order.
    pub uplink: Vec<Vec<u8>>,
    /// Restarts the cloud on the run's store (ephemeral port).
    pub cloud_config: CloudConfig,
    pub cloud_token: String,
}

struct Pending {
    due_tick: u64,
    path: String,
    body: Vec<u8>,
}

struct Stack {
    scenario: HouseholdScenario,
    cloud_config: CloudConfig,
    cloud: Option<CloudService>,
    gateway_config: GatewayConfig,
    gateway: Option<Gateway>,
    links: BTreeMap<DeviceId, DeviceLink>,
    api: http::Client,
    /// Uplink of gateway instances that were restarted.
    saved_uplink: Vec<Vec<u8>>,
}

impl Stack {
    fn cloud_up(&mut self) -> Result<(), RunError> {
        if self.cloud.is_none() {
            self.cloud = Some(CloudService::start(self.cloud_config.clone())?);
        }
        Ok(())
    }

    fn cloud_down(&mut self) {
        if let Some(c) = self.cloud.take() {
            c.shutdown();
        }
    }

    fn gateway(&mut self) -> &mut Gateway {
        self.gateway.as_mut().expect("gateway running")
    }

    fn restart_gateway(&mut self) -> Result<(), RunError> {
        let mut old = self.gateway.take().expect("gateway running");
        let endpoints = old.endpoints();
        self.saved_uplink.extend(old.take_uplink());
        old.shutdown()?;
        let mut config = self.gateway_config.clone();
        config.mqtt_bind = endpoints.mqtt.to_string();
        config.coap_bind = endpoints.coap.to_string();
        config.http_bind = endpoints.http.to_string();
        let mut g = Gateway::start(config)?;
        g.record_uplink();
        self.gateway = Some(g);
        for link in self.links.values_mut() {
            link.reconnect(&endpoints)?;
        }
        Ok(())
    }

    /// Calls the cloud API; `None` when the cloud is down.
    fn call(&self, method: &str, path: &str, body: Option<&[u8]>) -> Option<http::Reply> {
        self.cloud.as_ref()?;
        self.api.call(method, path, body).ok()
    }

    fn query<T: for<'de> Deserialize<'de>>(&self, path: &str, field: &str) -> Result<T, RunError> {
        let r = self
            .call("GET", path, None)
            .ok_or_else(|| RunError::Cloud(format!("GET {path}: unreachable")))?;
        if r.status != 200 {
            return Err(RunError::Cloud(format!("GET {path}: {} {}", r.status, String::from_utf8_lossy(&r.body))));
        }
        let mut v: Value = serde_json::from_slice(&r.body).map_err(|e| RunError::Cloud(e.to_string()))?;
        let inner = if field.is_empty() { v } else { v[field].take() };
        serde_json::from_value(inner).map_err(|e| RunError::Cloud(format!("GET {path}: {e}")))
    }
}

pub fn run_scenario(scenario: &HouseholdScenario, opts: &RunOptions) -> Result<RunOutput, RunError> {
    let mut scenario = scenario.clone();
    if let Some(seed) = opts.seed {
        scenario.rng_seed = seed;
    }
    let problems = scenario.problems();
    if !problems.is_empty() {
        return Err(RunError::Scenario(problems.join("; ")));
    }
    std::fs::create_dir_all(&opts.work_dir)?;
    let home = scenario.home_id.clone();
    let token = format!("{home}-token");
    let cloud_dir = opts.work_dir.join("cloud");
    let gateway_dir = opts.work_dir.join("gateway");
    for d in [&cloud_dir, &gateway_dir] {
        if d.exists() {
            std::fs::remove_dir_all(d)?;
        }
    }

    let mut cloud_config = CloudConfig {
        bind: format!("127.0.0.1:{}", opts.ports.cloud),
        data_dir: cloud_dir,
        homes: vec![HomeConfig {
            home_id: home.clone(),
            token: token.clone(),
            tariff: scenario.tariff.clone(),
        }],
        maintenance: Default::default(),
        recommend: Default::default(),
        cycle_on_threshold_w: 10.0,
        workers: 4,
    };
    let cloud = CloudService::start(cloud_config.clone())?;
    cloud_config.bind = cloud.local_addr().to_string();
    let api = http::Client::new(cloud.base_url(), Some(token.clone()), Duration::from_secs(30));

    let settings = scenario.settings();
    let mut gateway_config = GatewayConfig::new(home.clone(), gateway_dir);
    gateway_config.mqtt_bind = format!("127.0.0.1:{}", opts.ports.mqtt);
    gateway_config.coap_bind = format!("127.0.0.1:{}", opts.ports.coap);
    gateway_config.http_bind = format!("127.0.0.1:{}", opts.ports.http);
    gateway_config.mqtt_credentials.insert(format!("{home}-devices"), format!("{home}-mqtt"));
    gateway_config.device_token = Some(format!("{home}-devices"));
    gateway_config.cloud_url = Some(cloud.base_url());
    gateway_config.cloud_token = Some(token.clone());
    gateway_config.devices = scenario
        .descriptors()
        .into_iter()
        .map(|descriptor| GatewayDevice {
            settings: settings.get(&descriptor.device_id).cloned().unwrap_or_default(),
            descriptor,
        })
        .collect();
    let mut gateway = Gateway::start(gateway_config.clone())?;
    gateway.record_uplink();
    let endpoints = gateway.endpoints();
    let auth = DeviceAuth {
        mqtt: Some((format!("{home}-devices"), format!("{home}-mqtt"))),
        http_token: Some(format!("{home}-devices")),
    };
    let mut links = BTreeMap::new();
    for spec in &scenario.devices {
        links.insert(
            spec.device_id.clone(),
            DeviceLink::connect(spec.protocol, &home, &spec.device_id, &endpoints, &auth)?,
        );
    }

    let mut stack = Stack {
        scenario: scenario.clone(),
        cloud_config,
        cloud: Some(cloud),
        gateway_config,
        gateway: Some(gateway),
        links,
        api,
        saved_uplink: Vec::new(),
    };
    register(&stack)?;

    // Cloud-side requests, sent in order once due and the cloud is up.
    let tick_s = u64::from(scenario.tick_seconds);
    let mut posts: VecDeque<Pending> = VecDeque::new();
    for s in scenario.dr_signals() {
        posts.push_back(Pending {
            due_tick: 0,
            path: format!("/api/v1/homes/{home}/dr-signals"),
            body: serde_json::to_vec(&s).expect("serializable signal"),
        });
    }
    let mut commands: Vec<_> = scenario.commands.iter().collect();
    commands.sort_by_key(|c| c.at_seconds);
    for (n, c) in commands.into_iter().enumerate() {
        let cmd = ControlCommand {
            command_id: format!("{home}-user-{:06}", n + 1),
            device_id: c.device_id.clone(),
            action: c.action,
            origin: Origin::User,
            issued_at: scenario.start_ms + c.at_seconds as i64 * 1000,
        };
        posts.push_back(Pending {
            due_tick: c.at_seconds / tick_s,
            path: format!("/api/v1/homes/{home}/commands"),
            body: envelope::encode(&Envelope::Command(cmd)).into_bytes(),
        });
    }

    let mut fleet = Fleet::new(&scenario);
    let mut oracle: BTreeMap<DeviceId, f64> = BTreeMap::new();
    let mut emissions: Vec<Envelope> = Vec::new();
    let mut rejections: Vec<Event> = Vec::new();
    let ticks = scenario.tick_count();
    let mut outage_state = vec![(false, false, false); scenario.outages.len()];

    for tick in 0..ticks {
        let elapsed = tick * tick_s;
        for (o, state) in scenario.outages.iter().zip(outage_state.iter_mut()) {
            if !state.0 && elapsed >= o.start_seconds {
                state.0 = true;
                log::info!("tick {tick}: cloud down");
                stack.cloud_down();
            }
            if let Some(at) = o.gateway_restart_seconds {
                if !state.2 && elapsed >= at {
                    state.2 = true;
                    log::info!("tick {tick}: gateway restart");
                    stack.restart_gateway()?;
                }
            }
            if state.0 && !state.1 && elapsed >= o.end_seconds {
                state.1 = true;
                log::info!("tick {tick}: cloud back");
                stack.cloud_up()?;
            }
        }
        while posts.front().is_some_and(|p| p.due_tick <= tick) {
            let p = posts.front().expect("checked");
            match stack.call("POST", &p.path, Some(&p.body)) {
                Some(r) => {
                    if r.status >= 300 {
                        log::warn!("POST {} answered {}: {}", p.path, r.status, String::from_utf8_lossy(&r.body));
                    }
                    posts.pop_front();
                }
                None => break,
            }
        }

        let out = fleet.tick();
        let now = fleet.clock_ms;
        for d in fleet.devices() {
            *oracle.entry(d.device_id().clone()).or_default() += d.power_w * tick_s as f64 / 3600.0;
        }
        let mut expected = BTreeSet::new();
        let outgoing = std::mem::take(&mut rejections)
            .into_iter()
            .chain(out.events)
            .map(Envelope::Event)
            .chain(out.measurements.into_iter().map(Envelope::Measurement));
        for env in outgoing {
            let (device, frame) = match &env {
                Envelope::Measurement(m) => (m.device_id.clone(), encode_telemetry(m, &home, stack.links[&m.device_id].protocol)),
                Envelope::Event(e) => {
                    let device = DeviceId::new(e.source.clone());
                    let Some(link) = stack.links.get(&device) else { continue };
                    (device, encode_event(e, &home, link.protocol))
                }
                Envelope::Command(_) => continue,
            };
            stack.links[&device].send(&frame)?;
            expected.insert(match &env {
                Envelope::Event(e) => e.event_id.clone(),
                other => record_key(other),
            });
            emissions.push(env);
        }

        let wait = opts.wait;
        stack.gateway().step(now, &expected, wait)?;
        let mut per_device: BTreeMap<DeviceId, usize> = BTreeMap::new();
        for cmd in stack.gateway().take_dispatched() {
            *per_device.entry(cmd.device_id).or_default() += 1;
        }
        for (device, n) in per_device {
            let Some(link) = stack.links.get(&device) else { continue };
            for cmd in link.receive(n, wait)? {
                if let Err(e) = fleet.command(&cmd) {
                    rejections.push(e);
                }
            }
        }
        if opts.speed == Speed::Realtime {
            std::thread::sleep(Duration::from_secs(tick_s));
        }
    }

    // drain: cloud back, remaining requests and buffer delivered
    stack.cloud_up()?;
    while let Some(p) = posts.pop_front() {
        stack.call("POST", &p.path, Some(&p.body));
    }
    let end = fleet.clock_ms;
    for _ in 0..1000 {
        let status = stack.gateway().step(end, &BTreeSet::new(), Duration::ZERO)?;
        if stack.gateway().buffered() == 0 && status.reachable {
            break;
        }
    }
    if stack.gateway().buffered() > 0 {
        return Err(RunError::Cloud(format!("{} records could not be delivered", stack.gateway().buffered())));
    }

    let mut report = build_report(&stack, &fleet, &oracle, &emissions)?;
    let mut uplink = std::mem::take(&mut stack.saved_uplink);
    if let Some(mut g) = stack.gateway.take() {
        uplink.extend(g.take_uplink());
        g.shutdown()?;
    }
    report.uplink_batches = uplink.len();
    stack.links.clear();
    stack.cloud_down();
    let mut cloud_config = stack.cloud_config.clone();
    cloud_config.bind = "127.0.0.1:0".into();
    Ok(RunOutput {
        report,
        emissions,
        uplink,
        cloud_config,
        cloud_token: token,
    })
}

/// Creates rooms and devices in the cloud registry.
fn register(stack: &Stack) -> Result<(), RunError> {
    let home = &stack.scenario.home_id;
    let settings = stack.scenario.settings();
    let rooms: BTreeSet<&String> = stack.scenario.devices.iter().map(|d| &d.room).collect();
    for room in rooms {
        let body = serde_json::to_vec(&json!({ "room": room })).expect("json");
        expect_status(stack.call("POST", &format!("/api/v1/homes/{home}/rooms"), Some(&body)), &[201, 409])?;
    }
    for d in stack.scenario.descriptors() {
        let body = serde_json::to_vec(&json!({
            "settings": settings.get(&d.device_id).cloned().unwrap_or_default(),
            "descriptor": d,
        }))
        .expect("json");
        expect_status(stack.call("POST", &format!("/api/v1/homes/{home}/devices"), Some(&body)), &[201])?;
    }
    Ok(())
}

fn expect_status(reply: Option<http::Reply>, ok: &[u16]) -> Result<http::Reply, RunError> {
    match reply {
        Some(r) if ok.contains(&r.status) => Ok(r),
        Some(r) => Err(RunError::Cloud(format!("{}: {}", r.status, String::from_utf8_lossy(&r.body)))),
        None => Err(RunError::Cloud("unreachable".into())),
    }
}

fn check(name: &str, passed: bool, detail: impl Into<String>) -> Invariant {
    Invariant {
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

/// Canonical text of an envelope, for multiset comparison.
fn canonical(env: &Envelope) -> String {
    envelope::encode(env)
}

fn per_device_order(envs: &[Envelope]) -> BTreeMap<String, Vec<String>> {
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for e in envs {
        let device = match e {
            Envelope::Measurement(m) => m.device_id.to_string(),
            Envelope::Event(ev) => ev.source.clone(),
            Envelope::Command(c) => c.device_id.to_string(),
        };
        out.entry(device).or_default().push(canonical(e));
    }
    out
}

fn build_report(
    stack: &Stack,
    fleet: &Fleet,
    oracle: &BTreeMap<DeviceId, f64>,
    emissions: &[Envelope],
) -> Result<RunReport, RunError> {
    let s = &stack.scenario;
    let home = &s.home_id;
    let measurements: Vec<Measurement> = stack.query(&format!("/api/v1/homes/{home}/measurements"), "measurements")?;
    let events: Vec<Event> = stack.query(&format!("/api/v1/homes/{home}/events"), "events")?;
    let mut invariants = Vec::new();

    // uplink completeness: device-originated records in the store
    let emitted_ids: BTreeSet<&str> = emissions
        .iter()
        .filter_map(|e| match e {
            Envelope::Event(ev) => Some(ev.event_id.as_str()),
            _ => None,
        })
        .collect();
    let stored: Vec<Envelope> = measurements
        .iter()
        .cloned()
        .map(Envelope::Measurement)
        .chain(
            events
                .iter()
                .filter(|e| emitted_ids.contains(e.event_id.as_str()))
                .cloned()
                .map(Envelope::Event),
        )
        .collect();
    let mut a: Vec<String> = emissions.iter().map(canonical).collect();
    let mut b: Vec<String> = stored.iter().map(canonical).collect();
    a.sort();
    b.sort();
    let missing = a.iter().filter(|x| b.binary_search(x).is_err()).count();
    let extra = b.iter().filter(|x| a.binary_search(x).is_err()).count();
    invariants.push(check(
        "uplink-multiset",
        a == b,
        format!("{} emitted, {} stored, {missing} missing, {extra} unexpected", a.len(), b.len()),
    ));
    let stored_measurements: Vec<Envelope> = measurements.iter().cloned().map(Envelope::Measurement).collect();
    let emitted_measurements: Vec<Envelope> = emissions.iter().filter(|e| matches!(e, Envelope::Measurement(_))).cloned().collect();
    let order_ok = per_device_order(&stored_measurements) == per_device_order(&emitted_measurements);
    invariants.push(check("uplink-order", order_ok, "per-device measurement order in the store matches emission order"));

    // energy conservation
    let mut energy = Vec::new();
    let mut worst = 0.0f64;
    for d in &s.devices {
        let readings: Vec<&Measurement> = measurements
            .iter()
            .filter(|m| m.device_id == d.device_id && m.metric == MetricKind::EnergyWh)
            .collect();
        let (Some(first), Some(last)) = (readings.first(), readings.last()) else { continue };
        let path = format!(
            "/api/v1/homes/{home}/energy?scope=device:{}&timeframe=hourly&from={}&to={}",
            d.device_id,
            s.start_ms,
            s.end_ms() + 1
        );
        let records: Vec<hems_core::aggregate::AggregateRecord> = stack.query(&path, "records")?;
        let bucket_sum: f64 = records.iter().map(|r| r.energy_wh_delta.unwrap_or(0.0)).sum();
        let check = EnergyCheck {
            device_id: d.device_id.clone(),
            oracle_wh: oracle.get(&d.device_id).copied().unwrap_or(0.0),
            reported_wh: last.value,
            bucket_sum_wh: bucket_sum,
            reading_span_wh: last.value - first.value,
        };
        worst = worst
            .max((check.reported_wh - check.oracle_wh).abs())
            .max((check.bucket_sum_wh - check.reading_span_wh).abs());
        energy.push(check);
    }
    invariants.push(check("energy-conservation", worst <= 1e-9, format!("max abs error {worst:e} Wh")));

    let mut events_by_kind: BTreeMap<String, usize> = BTreeMap::new();
    for e in &events {
        *events_by_kind.entry(e.kind.name().to_string()).or_default() += 1;
    }
    let dead_letters = stack.gateway_config.data_dir.join("buffer").join("dead-letter.jsonl");
    let dead = std::fs::read_to_string(&dead_letters).map(|t| t.lines().count()).unwrap_or(0);
    invariants.push(check("no-dead-letters", dead == 0, format!("{dead} dead-lettered records")));

    // DR plans never touch rank-0 devices
    let dr_value: Value = stack.query(&format!("/api/v1/homes/{home}/dr-signals"), "")?;
    let dr_plans: Vec<Value> = dr_value["plans"].as_array().cloned().unwrap_or_default();
    let settings = s.settings();
    let rank0: BTreeSet<String> = settings
        .iter()
        .filter(|(_, v)| !v.curtailable || v.priority_rank == 0)
        .map(|(k, _)| k.to_string())
        .collect();
    let touched: Vec<String> = dr_plans
        .iter()
        .flat_map(|p| p["actions"].as_array().cloned().unwrap_or_default())
        .filter_map(|a| a["device_id"].as_str().map(str::to_string))
        .filter(|d| rank0.contains(d))
        .collect();
    invariants.push(check("dr-rank0-untouched", touched.is_empty(), format!("{touched:?}")));

    let flex = (!s.flex_loads.is_empty()).then(|| {
        let slots = s.flex_loads.iter().map(|l| l.latest_slot as usize + 1).max().unwrap_or(0);
        let prices = slot_prices(&s.tariff, s.flex_slot_seconds, slots);
        let result = schedule_flexible_loads(&s.flex_loads, &s.tariff, s.flex_slot_seconds, s.peak_cap_w);
        FlexSummary {
            baseline_cost: earliest_cost(&s.flex_loads, &prices, s.flex_slot_seconds),
            error: result.as_ref().err().map(ToString::to_string),
            schedule: result.ok(),
            peak_cap_w: s.peak_cap_w,
        }
    });

    // detector hits against injected faults
    let tick_ms = i64::from(s.tick_seconds) * 1000;
    let tick_of = |t: i64| ((t - s.start_ms) / tick_ms) as u64;
    let anomalies: Vec<&Event> = events.iter().filter(|e| e.kind == EventKind::Anomaly).collect();
    let mut explained = BTreeSet::new();
    let mut detections = Vec::new();
    for f in &fleet.fault_log {
        let wanted = match f.kind {
            FaultKind::StuckSensor => Some("StuckSensor"),
            FaultKind::PhantomLoad { .. } => Some("PhantomLoad"),
            FaultKind::Degradation { .. } => None,
        };
        let hits: Vec<&&Event> = anomalies
            .iter()
            .filter(|e| wanted.is_some() && e.source == f.device_id.as_str() && e.payload_str("detector") == wanted && e.timestamp >= f.onset_ms)
            .collect();
        explained.extend(hits.iter().map(|e| e.event_id.clone()));
        let hit = hits.first().copied();
        let samples = hit.and_then(|e| {
            let metric = MetricKind::from_token(e.payload_str("metric")?)?;
            let from = e.payload.get("window_start")?.as_i64()?;
            Some(
                measurements
                    .iter()
                    .filter(|m| m.device_id == f.device_id && m.metric == metric && m.timestamp >= from && m.timestamp <= e.timestamp)
                    .count() as u64,
            )
        });
        detections.push(Detection {
            device_id: f.device_id.clone(),
            fault: f.kind.name().to_string(),
            onset_tick: tick_of(f.onset_ms),
            detected_tick: hit.map(|e| tick_of(e.timestamp)),
            detector: hit.and_then(|e| e.payload_str("detector")).map(str::to_string),
            samples,
        });
    }
    let unexplained_anomalies: Vec<String> = anomalies
        .iter()
        .filter(|e| !explained.contains(&e.event_id))
        .map(|e| format!("{} {} {}", e.event_id, e.source, e.payload_str("detector").unwrap_or("?")))
        .collect();

    let maintenance: Vec<MaintenanceAlert> = stack.query(&format!("/api/v1/homes/{home}/maintenance"), "alerts")?;
    let recommendations: Vec<Recommendation> = stack.query(&format!("/api/v1/homes/{home}/recommendations"), "recommendations")?;

    Ok(RunReport {
        scenario: s.name.clone(),
        home_id: home.clone(),
        seed: s.rng_seed,
        ticks: s.tick_count(),
        tick_seconds: s.tick_seconds,
        devices: s.devices.len(),
        measurements_emitted: emitted_measurements.len(),
        device_events_emitted: emissions.len() - emitted_measurements.len(),
        measurements_stored: measurements.len(),
        events_stored: events.len(),
        uplink_batches: 0,
        events_by_kind,
        energy,
        dr_plans,
        flex,
        detections,
        unexplained_anomalies,
        maintenance,
        recommendations,
        invariants,
    })
}

/// Scenario file loading shared by the CLI and tests.
pub fn load_scenario(path: &Path) -> Result<HouseholdScenario, crate::config::ConfigError> {
    crate::config::load(path)
}
