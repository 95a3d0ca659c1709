use std::time::{Duration, Instant};

use serde_json::{json, Value};

use hems::cloud::{CloudConfig, CloudService, HomeConfig};
use hems::http::{Client, Reply};
use hems_core::envelope::{self, Envelope};
use hems_core::model::{HourWindow, TariffBand};
use hems_core::{
    Action, ActionKind, Capability, Category, ControlCommand, DeviceDescriptor, DeviceId, Event, EventKind, Measurement,
    MetricKind, Origin, Protocol, Severity, TariffSchedule, DAY_MS, HOUR_MS,
};

const T0: i64 = 1_704_067_200_000;

fn config(dir: &std::path::Path) -> CloudConfig {
    CloudConfig {
        bind: "127.0.0.1:0".into(),
        data_dir: dir.to_path_buf(),
        homes: vec![
            HomeConfig {
                home_id: "h1".into(),
                token: "tok1".into(),
                tariff: TariffSchedule::flat(0.2),
            },
            HomeConfig {
                home_id: "h2".into(),
                token: "tok2".into(),
                tariff: TariffSchedule::flat(0.2),
            },
        ],
        maintenance: Default::default(),
        recommend: Default::default(),
        cycle_on_threshold_w: 10.0,
        workers: 4,
    }
}

fn plug(id: &str) -> DeviceDescriptor {
    DeviceDescriptor {
        device_id: DeviceId::new(id),
        home_id: "h1".into(),
        room: "kitchen".into(),
        category: Category::Controller,
        protocol: Protocol::Http,
        capabilities: [
            Capability::Metric(MetricKind::PowerW),
            Capability::Metric(MetricKind::EnergyWh),
            Capability::Action(ActionKind::SwitchOn),
            Capability::Action(ActionKind::SwitchOff),
        ]
        .into_iter()
        .collect(),
        seq_epoch: 0,
        max_rate_w: None,
    }
}

fn body(r: &Reply) -> Value {
    serde_json::from_slice(&r.body).unwrap_or(Value::Null)
}

fn energy(device: &str, seq: u64, ts: i64, wh: f64) -> Value {
    envelope::to_value(&Envelope::Measurement(Measurement {
        device_id: DeviceId::new(device),
        metric: MetricKind::EnergyWh,
        value: wh,
        timestamp: ts,
        seq_epoch: 0,
        seq,
    }))
}

struct Fixture {
    _dir: tempfile::TempDir,
    cloud: CloudService,
    api: Client,
}

fn setup() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let cloud = CloudService::start(config(dir.path())).unwrap();
    let api = Client::new(cloud.base_url(), Some("tok1".into()), Duration::from_secs(10));
    assert_eq!(api.post_json("/api/v1/homes/h1/rooms", &json!({"room": "kitchen"})).unwrap().status, 201);
    let r = api
        .post_json("/api/v1/homes/h1/devices", &json!({"descriptor": plug("kettle")}))
        .unwrap();
    assert_eq!(r.status, 201, "{}", String::from_utf8_lossy(&r.body));
    Fixture { _dir: dir, cloud, api }
}

#[test]
fn tokens_are_scoped_to_one_home() {
    let f = setup();
    let base = f.cloud.base_url();
    let anon = Client::new(&base, None, Duration::from_secs(5));
    assert_eq!(anon.get("/api/v1/homes/h1/devices").unwrap().status, 401);
    let bad = Client::new(&base, Some("nope".into()), Duration::from_secs(5));
    assert_eq!(bad.get("/api/v1/homes/h1/devices").unwrap().status, 401);
    let other = Client::new(&base, Some("tok2".into()), Duration::from_secs(5));
    let r = other.get("/api/v1/homes/h1/devices").unwrap();
    assert_eq!(r.status, 403);
    assert_eq!(body(&r)["code"], "Forbidden");
    assert_eq!(f.api.get("/api/v1/homes/h9/devices").unwrap().status, 404);
    assert_eq!(f.api.get("/api/v1/homes/h1/nothing").unwrap().status, 404);
}

#[test]
fn registry_lifecycle() {
    let f = setup();
    let api = &f.api;
    // duplicate and unknown room
    assert_eq!(api.post_json("/api/v1/homes/h1/devices", &json!({"descriptor": plug("kettle")})).unwrap().status, 409);
    let mut elsewhere = plug("lamp");
    elsewhere.room = "attic".into();
    let r = api.post_json("/api/v1/homes/h1/devices", &json!({"descriptor": elsewhere})).unwrap();
    assert_eq!((r.status, body(&r)["code"].clone()), (422, json!("UnknownRoom")));
    let mut foreign = plug("lamp");
    foreign.home_id = "h2".into();
    assert_eq!(api.post_json("/api/v1/homes/h1/devices", &json!({"descriptor": foreign})).unwrap().status, 422);
    let mut broken = plug("lamp");
    broken.capabilities.insert(Capability::Metric(MetricKind::Occupancy));
    assert_eq!(api.post_json("/api/v1/homes/h1/devices", &json!({"descriptor": broken})).unwrap().status, 422);
    assert_eq!(api.post_json("/api/v1/homes/h1/rooms", &json!({"room": "kitchen"})).unwrap().status, 409);

    // modify: settings change is versioned, audited and sent downlink
    let r = api
        .call(
            "PUT",
            "/api/v1/homes/h1/devices/kettle",
            Some(br#"{"settings": {"label": "Kettle", "priority_rank": 2, "curtailable": true}}"#),
        )
        .unwrap();
    assert_eq!(r.status, 200);
    assert_eq!(body(&r)["version"], 2);
    let page = body(&api.get("/api/v1/homes/h1/commands").unwrap());
    assert_eq!(page["items"][0]["type"], "settings");
    assert_eq!(page["items"][0]["settings"]["priority_rank"], 2);

    // delete leaves a tombstone
    assert_eq!(api.call("DELETE", "/api/v1/homes/h1/devices/kettle", None).unwrap().status, 200);
    assert_eq!(api.get("/api/v1/homes/h1/devices/kettle").unwrap().status, 404);
    assert_eq!(body(&api.get("/api/v1/homes/h1/devices").unwrap())["devices"], json!([]));
    let all = body(&api.get("/api/v1/homes/h1/devices?include_removed=true").unwrap());
    assert_eq!(all["devices"][0]["removed"], true);
    assert_eq!(all["devices"][0]["version"], 3);

    let audit = body(&api.get("/api/v1/homes/h1/events?kind=SystemAlert").unwrap());
    let ops: Vec<&str> = audit["events"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["payload"]["op"].as_str().unwrap())
        .collect();
    assert_eq!(ops, ["add", "modify", "remove"]);
    let changes = &audit["events"][1]["payload"]["changes"];
    assert_eq!(changes["priority_rank"], json!({"old": 0, "new": 2}));

    // re-adding revives the device with a new version
    let r = api.post_json("/api/v1/homes/h1/devices", &json!({"descriptor": plug("kettle")})).unwrap();
    assert_eq!((r.status, body(&r)["version"].clone()), (201, json!(4)));
}

#[test]
fn ingest_dedups_and_rejects_unknown_devices() {
    let f = setup();
    let batch = json!([energy("kettle", 0, T0, 10.0), energy("kettle", 1, T0 + 60_000, 12.0), energy("ghost", 0, T0, 1.0)]);
    let r = f.api.post_json("/api/v1/ingest", &batch).unwrap();
    assert_eq!(r.status, 200);
    let ack = body(&r);
    assert_eq!(ack["accepted"], json!(["kettle/0/0", "kettle/0/1"]));
    assert_eq!(ack["rejected"], json!(["ghost/0/0"]));
    // replay is absorbed
    assert_eq!(f.api.post_json("/api/v1/ingest", &batch).unwrap().status, 200);
    let ms = body(&f.api.get("/api/v1/homes/h1/measurements?device=kettle").unwrap());
    assert_eq!(ms["measurements"].as_array().unwrap().len(), 2);
    let alerts = body(&f.api.get("/api/v1/homes/h1/events?source=cloud-ingest").unwrap());
    assert_eq!(alerts["events"].as_array().unwrap().len(), 1);

    // a command in an uplink batch or a bad value fails the whole batch
    let cmd = envelope::to_value(&Envelope::Command(ControlCommand {
        command_id: "c".into(),
        device_id: "kettle".into(),
        action: Action::SwitchOn,
        origin: Origin::User,
        issued_at: T0,
    }));
    assert_eq!(f.api.post_json("/api/v1/ingest", &json!([cmd])).unwrap().status, 422);
    assert_eq!(f.api.post("/api/v1/ingest", b"{not json").unwrap().status, 422);
    let live = body(&f.api.get("/api/v1/homes/h1/live").unwrap());
    assert_eq!(live["devices"]["kettle"]["energy"]["value"], 12.0);
}

#[test]
fn energy_queries_bucket_by_calendar() {
    let f = setup();
    let mut batch = Vec::new();
    // 1 Wh per 15 minutes for two days
    for i in 0..(2 * 96) {
        batch.push(energy("kettle", i, T0 + i as i64 * 900_000, i as f64));
    }
    assert_eq!(f.api.post_json("/api/v1/ingest", &batch).unwrap().status, 200);
    let q = |query: &str| f.api.get(&format!("/api/v1/homes/h1/energy?{query}")).unwrap();
    let r = q(&format!("scope=home&timeframe=daily&from={T0}&to={}", T0 + 2 * DAY_MS));
    assert_eq!(r.status, 200);
    let records = body(&r)["records"].as_array().unwrap().clone();
    assert_eq!(records.len(), 2);
    assert_eq!(records[0]["energy_wh_delta"], 95.0);
    assert_eq!(records[1]["energy_wh_delta"], 96.0);
    let hourly = body(&q(&format!("scope=device:kettle&timeframe=Hourly&from={T0}&to={}", T0 + HOUR_MS)));
    assert_eq!(hourly["records"][0]["energy_wh_delta"], 3.0);

    assert_eq!(q("timeframe=fortnightly").status, 400);
    assert_eq!(q(&format!("from={}&to={T0}", T0 + 1)).status, 400);
    assert_eq!(q("scope=device:ghost").status, 404);
    assert_eq!(q("scope=room").status, 400);
}

#[test]
fn events_filter_and_reject_duplicates() {
    let f = setup();
    let e = Event::new("ext-1", EventKind::Anomaly, Severity::Warning, "kettle", T0).with("detector", "Outlier");
    let env = envelope::encode(&Envelope::Event(e));
    assert_eq!(f.api.post("/api/v1/homes/h1/events", env.as_bytes()).unwrap().status, 201);
    assert_eq!(f.api.post("/api/v1/homes/h1/events", env.as_bytes()).unwrap().status, 409);
    let q = |s: &str| f.api.get(&format!("/api/v1/homes/h1/events?{s}")).unwrap();
    assert_eq!(body(&q("kind=Anomaly&severity=Warning"))["events"].as_array().unwrap().len(), 1);
    assert_eq!(body(&q("kind=Anomaly&source=other"))["events"].as_array().unwrap().len(), 0);
    assert_eq!(body(&q(&format!("kind=Anomaly&from={}", T0 + 1)))["events"].as_array().unwrap().len(), 0);
    assert_eq!(q("kind=Bogus").status, 400);
    assert_eq!(q("severity=Loud").status, 400);
}

#[test]
fn commands_long_poll_and_validate() {
    let f = setup();
    let api = f.api.clone();
    let cmd = |id: &str, device: &str, action: Action| {
        envelope::encode(&Envelope::Command(ControlCommand {
            command_id: id.into(),
            device_id: device.into(),
            action,
            origin: Origin::User,
            issued_at: T0,
        }))
    };
    let waiter = std::thread::spawn(move || {
        let started = Instant::now();
        let r = api.get("/api/v1/homes/h1/commands?cursor=0&wait_ms=5000").unwrap();
        (started.elapsed(), body(&r))
    });
    std::thread::sleep(Duration::from_millis(200));
    let r = f.api.post("/api/v1/homes/h1/commands", cmd("c1", "kettle", Action::SwitchOff).as_bytes()).unwrap();
    assert_eq!(r.status, 202);
    let (waited, page) = waiter.join().unwrap();
    assert!(waited < Duration::from_secs(4), "long poll was not woken: {waited:?}");
    assert_eq!(page["cursor"], 1);
    assert_eq!(page["items"][0]["command_id"], "c1");

    assert_eq!(f.api.post("/api/v1/homes/h1/commands", cmd("c1", "kettle", Action::SwitchOff).as_bytes()).unwrap().status, 409);
    assert_eq!(f.api.post("/api/v1/homes/h1/commands", cmd("c2", "ghost", Action::SwitchOff).as_bytes()).unwrap().status, 404);
    let r = f.api.post("/api/v1/homes/h1/commands", cmd("c3", "kettle", Action::SetSetpointC(20.0)).as_bytes()).unwrap();
    assert_eq!(r.status, 422);
    let empty = body(&f.api.get("/api/v1/homes/h1/commands?cursor=1").unwrap());
    assert_eq!((empty["items"].clone(), empty["cursor"].clone()), (json!([]), json!(1)));
    let issued = body(&f.api.get("/api/v1/homes/h1/events?kind=CommandIssued").unwrap());
    assert_eq!(issued["events"][0]["payload"]["command_id"], "c1");
}

#[test]
fn dr_signals_and_edge_config() {
    let f = setup();
    let signal = json!({"signal_id": "dr1", "target_reduction_w": 1000.0, "window": {"start": T0, "end": T0 + HOUR_MS}});
    assert_eq!(f.api.post_json("/api/v1/homes/h1/dr-signals", &signal).unwrap().status, 202);
    assert_eq!(f.api.post_json("/api/v1/homes/h1/dr-signals", &signal).unwrap().status, 409);
    let empty = json!({"signal_id": "dr2", "target_reduction_w": 1000.0, "window": {"start": T0, "end": T0}});
    assert_eq!(f.api.post_json("/api/v1/homes/h1/dr-signals", &empty).unwrap().status, 422);
    let listed = body(&f.api.get("/api/v1/homes/h1/dr-signals").unwrap());
    assert_eq!(listed["signals"][0]["signal_id"], "dr1");

    let cfg = body(&f.api.get("/api/v1/homes/h1/edge-config").unwrap());
    assert_eq!(cfg["auto_mitigate"], true);
    let r = f
        .api
        .call("PUT", "/api/v1/homes/h1/edge-config", Some(br#"{"auto_mitigate": false}"#))
        .unwrap();
    assert_eq!(r.status, 200);
    assert_eq!(body(&f.api.get("/api/v1/homes/h1/edge-config").unwrap())["auto_mitigate"], false);
    let page = body(&f.api.get("/api/v1/homes/h1/commands").unwrap());
    let kinds: Vec<&str> = page["items"].as_array().unwrap().iter().map(|i| i["type"].as_str().unwrap()).collect();
    assert_eq!(kinds, ["dr_signal", "edge_config"]);
}

#[test]
fn recommendations_apply_once() {
    let peak = TariffSchedule {
        bands: vec![
            TariffBand { start_hour: 0, end_hour: 17, price_per_kwh: 0.1 },
            TariffBand { start_hour: 17, end_hour: 24, price_per_kwh: 0.4 },
        ],
        peak_windows: vec![HourWindow { start_hour: 17, end_hour: 24 }],
    };
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.homes[0].tariff = peak;
    let cloud = CloudService::start(cfg).unwrap();
    let api = Client::new(cloud.base_url(), Some("tok1".into()), Duration::from_secs(10));
    api.post_json("/api/v1/homes/h1/rooms", &json!({"room": "kitchen"})).unwrap();
    api.post_json("/api/v1/homes/h1/devices", &json!({"descriptor": plug("washer"), "settings": {"flexible": true}}))
        .unwrap();
    // the washer draws 2 kW for two hours in the evening peak, every day
    let mut batch = Vec::new();
    let mut wh = 0.0;
    let mut seq = 0;
    for day in 0..7 {
        for q in 0..96 {
            let ts = T0 + day * DAY_MS + q * 900_000;
            if (72..80).contains(&q) {
                wh += 500.0;
            }
            batch.push(energy("washer", seq, ts, wh));
            seq += 1;
        }
    }
    assert_eq!(api.post_json("/api/v1/ingest", &batch).unwrap().status, 200);
    let recs = body(&api.get("/api/v1/homes/h1/recommendations").unwrap());
    let rec = recs["recommendations"]
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["kind"] == "ShiftAppliance")
        .expect("shift recommendation")
        .clone();
    let id = rec["recommendation_id"].as_str().unwrap();
    assert_eq!(rec["status"], "proposed");
    let r = api.post(&format!("/api/v1/homes/h1/recommendations/{id}/apply"), b"").unwrap();
    assert_eq!((r.status, body(&r)["status"].clone()), (200, json!("applied")));
    assert_eq!(api.post(&format!("/api/v1/homes/h1/recommendations/{id}/dismiss"), b"").unwrap().status, 409);
    assert_eq!(api.post("/api/v1/homes/h1/recommendations/nope/apply", b"").unwrap().status, 404);
    let again = body(&api.get("/api/v1/homes/h1/recommendations").unwrap());
    assert!(again["recommendations"].as_array().unwrap().iter().any(|r| r["status"] == "applied"));
    assert_eq!(api.get("/api/v1/homes/h1/recommendations?lookback_days=0").unwrap().status, 400);
}

#[test]
fn store_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = CloudService::start(config(dir.path())).unwrap();
    let api = Client::new(cloud.base_url(), Some("tok1".into()), Duration::from_secs(10));
    api.post_json("/api/v1/homes/h1/rooms", &json!({"room": "kitchen"})).unwrap();
    api.post_json("/api/v1/homes/h1/devices", &json!({"descriptor": plug("kettle")})).unwrap();
    api.post_json("/api/v1/ingest", &json!([energy("kettle", 0, T0, 1.0)])).unwrap();
    cloud.shutdown();

    let cloud = CloudService::start(config(dir.path())).unwrap();
    let api = Client::new(cloud.base_url(), Some("tok1".into()), Duration::from_secs(10));
    let ms = body(&api.get("/api/v1/homes/h1/measurements").unwrap());
    assert_eq!(ms["measurements"].as_array().unwrap().len(), 1);
    assert_eq!(api.get("/api/v1/homes/h1/devices/kettle").unwrap().status, 200);
    let ack = body(&api.post_json("/api/v1/ingest", &json!([energy("kettle", 0, T0, 1.0)])).unwrap());
    assert_eq!(ack["accepted"], json!(["kettle/0/0"]));
    assert_eq!(body(&api.get("/api/v1/homes/h1/measurements").unwrap())["measurements"].as_array().unwrap().len(), 1);
}
