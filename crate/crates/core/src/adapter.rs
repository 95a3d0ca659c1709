//! Protocol-independent half of the edge proxy.
//!
//! Routing schemes per protocol:
//!
//! | direction | MQTT topic                          | CoAP path                     | HTTP path                            |
//! |-----------|-------------------------------------|-------------------------------|--------------------------------------|
//! | telemetry | `hems/{home}/{device}/tel/{metric}` | `/tel/{home}/{device}/{metric}` | `/ingest/{home}/{device}/{metric}` |
//! | command   | `hems/{home}/{device}/cmd`          | `/cmd/{home}/{device}`        | `/device/{home}/{device}/command`    |
//! | event     | `hems/{home}/{device}/evt`          | `/evt/{home}/{device}`        | `/event/{home}/{device}`             |
//!
//! Telemetry bodies are [`TelemetryPayload`]s; command and event bodies are
//! full canonical envelopes. The byte-level transports live in the `hems`
//! crate and hand over [`RawFrame`]s.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envelope::{self, Envelope, TelemetryPayload};
use crate::model::{
    validate_action, validate_measurement, ControlCommand, DeviceDescriptor, DeviceId, Event,
    EventKind, IdSeq, Measurement, MetricKind, Protocol, Severity,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawFrame {
    pub protocol: Protocol,
    /// Topic for MQTT, path for CoAP and HTTP.
    pub route: String,
    pub payload: Vec<u8>,
    pub received_at: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Route {
    Telemetry {
        home: String,
        device: String,
        metric: MetricKind,
    },
    Command {
        home: String,
        device: String,
    },
    Event {
        home: String,
        device: String,
    },
}

pub fn telemetry_route(protocol: Protocol, home: &str, device: &str, metric: MetricKind) -> String {
    let metric = metric.token();
    match protocol {
        Protocol::Mqtt => format!("hems/{home}/{device}/tel/{metric}"),
        Protocol::Coap => format!("/tel/{home}/{device}/{metric}"),
        Protocol::Http => format!("/ingest/{home}/{device}/{metric}"),
    }
}

pub fn command_route(protocol: Protocol, home: &str, device: &str) -> String {
    match protocol {
        Protocol::Mqtt => format!("hems/{home}/{device}/cmd"),
        Protocol::Coap => format!("/cmd/{home}/{device}"),
        Protocol::Http => format!("/device/{home}/{device}/command"),
    }
}

pub fn event_route(protocol: Protocol, home: &str, device: &str) -> String {
    match protocol {
        Protocol::Mqtt => format!("hems/{home}/{device}/evt"),
        Protocol::Coap => format!("/evt/{home}/{device}"),
        Protocol::Http => format!("/event/{home}/{device}"),
    }
}

/// MQTT filter matching every telemetry topic of a home.
pub fn mqtt_telemetry_filter(home: &str) -> String {
    format!("hems/{home}/+/tel/+")
}

pub fn mqtt_event_filter(home: &str) -> String {
    format!("hems/{home}/+/evt")
}

pub fn parse_route(protocol: Protocol, route: &str) -> Option<Route> {
    let trimmed = match protocol {
        Protocol::Mqtt => route,
        Protocol::Coap | Protocol::Http => route.strip_prefix('/')?,
    };
    let parts: Vec<&str> = trimmed.split('/').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return None;
    }
    let owned = |s: &str| s.to_string();
    match (protocol, parts.as_slice()) {
        (Protocol::Mqtt, ["hems", home, device, "tel", metric])
        | (Protocol::Coap, ["tel", home, device, metric])
        | (Protocol::Http, ["ingest", home, device, metric]) => Some(Route::Telemetry {
            home: owned(home),
            device: owned(device),
            metric: MetricKind::from_token(metric)?,
        }),
        (Protocol::Mqtt, ["hems", home, device, "cmd"])
        | (Protocol::Coap, ["cmd", home, device])
        | (Protocol::Http, ["device", home, device, "command"]) => Some(Route::Command {
            home: owned(home),
            device: owned(device),
        }),
        (Protocol::Mqtt, ["hems", home, device, "evt"])
        | (Protocol::Coap, ["evt", home, device])
        | (Protocol::Http, ["event", home, device]) => Some(Route::Event {
            home: owned(home),
            device: owned(device),
        }),
        _ => None,
    }
}

/// Where and how a device is reached.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolBinding {
    pub protocol: Protocol,
    pub home_id: String,
    pub device_id: DeviceId,
    /// `host:port` of the endpoint the frames go to.
    pub address: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credentials: Option<String>,
    /// Telemetry template with `{home}`, `{device}` and `{metric}` placeholders.
    pub topic_or_path_template: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BindingError {
    #[error("template `{0}` lacks a {{home}}, {{device}} or {{metric}} placeholder")]
    Template(String),
}

impl ProtocolBinding {
    pub fn standard(protocol: Protocol, home: &str, device: &DeviceId, address: &str) -> Self {
        let template = match protocol {
            Protocol::Mqtt => "hems/{home}/{device}/tel/{metric}",
            Protocol::Coap => "/tel/{home}/{device}/{metric}",
            Protocol::Http => "/ingest/{home}/{device}/{metric}",
        };
        Self {
            protocol,
            home_id: home.to_string(),
            device_id: device.clone(),
            address: address.to_string(),
            credentials: None,
            topic_or_path_template: template.to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), BindingError> {
        let t = &self.topic_or_path_template;
        if t.contains("{home}") && t.contains("{device}") && t.contains("{metric}") {
            Ok(())
        } else {
            Err(BindingError::Template(t.clone()))
        }
    }

    pub fn telemetry_route(&self, metric: MetricKind) -> String {
        self.topic_or_path_template
            .replace("{home}", &self.home_id)
            .replace("{device}", self.device_id.as_str())
            .replace("{metric}", metric.token())
    }

    pub fn command_route(&self) -> String {
        command_route(self.protocol, &self.home_id, self.device_id.as_str())
    }
}

/// Registered devices, keyed by `(home, device)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DeviceTable {
    devices: BTreeMap<(String, String), DeviceDescriptor>,
}

impl DeviceTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, descriptor: DeviceDescriptor) -> Option<DeviceDescriptor> {
        let key = (descriptor.home_id.clone(), descriptor.device_id.0.clone());
        self.devices.insert(key, descriptor)
    }

    pub fn remove(&mut self, home: &str, device: &str) -> Option<DeviceDescriptor> {
        self.devices.remove(&(home.to_string(), device.to_string()))
    }

    pub fn get(&self, home: &str, device: &str) -> Option<&DeviceDescriptor> {
        self.devices.get(&(home.to_string(), device.to_string()))
    }

    pub fn find(&self, device: &DeviceId) -> Option<&DeviceDescriptor> {
        self.devices.values().find(|d| &d.device_id == device)
    }

    pub fn iter(&self) -> impl Iterator<Item = &DeviceDescriptor> {
        self.devices.values()
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }
}

impl FromIterator<DeviceDescriptor> for DeviceTable {
    fn from_iter<I: IntoIterator<Item = DeviceDescriptor>>(iter: I) -> Self {
        let mut table = Self::new();
        for d in iter {
            table.insert(d);
        }
        table
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Ingested {
    Measurement(Measurement),
    Event(Event),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IngestError {
    #[error("no registered device for route `{route}`")]
    UnknownDevice { route: String },
    #[error("malformed payload on `{route}`: {reason}")]
    MalformedPayload { route: String, reason: String },
}

impl IngestError {
    pub fn code(&self) -> &'static str {
        match self {
            IngestError::UnknownDevice { .. } => "UnknownDevice",
            IngestError::MalformedPayload { .. } => "MalformedPayload",
        }
    }

    pub fn route(&self) -> &str {
        match self {
            IngestError::UnknownDevice { route } | IngestError::MalformedPayload { route, .. } => {
                route
            }
        }
    }

    /// The warning event logged in place of the rejected frame.
    pub fn to_event(&self, protocol: Protocol, ids: &mut IdSeq, timestamp: i64) -> Event {
        Event::new(
            ids.next_id(),
            EventKind::SystemAlert,
            Severity::Warning,
            "protocol-adapter",
            timestamp,
        )
        .with("error", self.code())
        .with("protocol", format!("{protocol:?}"))
        .with("route", self.route())
        .with("reason", self.to_string())
    }
}

fn malformed(route: &str, reason: impl ToString) -> IngestError {
    IngestError::MalformedPayload {
        route: route.to_string(),
        reason: reason.to_string(),
    }
}

/// Normalizes one device-to-edge frame.
pub fn ingest(frame: &RawFrame, devices: &DeviceTable) -> Result<Ingested, IngestError> {
    let route = frame.route.as_str();
    let unknown = || IngestError::UnknownDevice {
        route: route.to_string(),
    };
    if frame.payload.is_empty() {
        return Err(malformed(route, "empty payload"));
    }
    match parse_route(frame.protocol, route).ok_or_else(unknown)? {
        Route::Telemetry {
            home,
            device,
            metric,
        } => {
            let descriptor = devices.get(&home, &device).ok_or_else(unknown)?;
            if !descriptor.has_metric(metric) {
                return Err(malformed(
                    route,
                    format!("device does not expose {metric:?}"),
                ));
            }
            let payload = TelemetryPayload::decode(&frame.payload).map_err(|e| malformed(route, e))?;
            let m = Measurement {
                device_id: descriptor.device_id.clone(),
                metric,
                value: payload.value,
                timestamp: payload.ts,
                seq_epoch: payload.epoch,
                seq: payload.seq,
            };
            validate_measurement(&m).map_err(|e| malformed(route, e))?;
            Ok(Ingested::Measurement(m))
        }
        Route::Event { home, device } => {
            let descriptor = devices.get(&home, &device).ok_or_else(unknown)?;
            match envelope::decode(&frame.payload).map_err(|e| malformed(route, e))? {
                Envelope::Event(e) if e.source == descriptor.device_id.0 => Ok(Ingested::Event(e)),
                Envelope::Event(e) => Err(malformed(
                    route,
                    format!("event source `{}` does not match route", e.source),
                )),
                other => Err(malformed(route, format!("expected event, got {}", other.kind()))),
            }
        }
        Route::Command { .. } => Err(malformed(route, "command route is edge-to-device only")),
    }
}

/// Device-side encoding of one reading.
pub fn encode_telemetry(m: &Measurement, home: &str, protocol: Protocol) -> RawFrame {
    RawFrame {
        protocol,
        route: telemetry_route(protocol, home, m.device_id.as_str(), m.metric),
        payload: TelemetryPayload::of(m).encode(),
        received_at: m.timestamp,
    }
}

pub fn encode_event(event: &Event, home: &str, protocol: Protocol) -> RawFrame {
    RawFrame {
        protocol,
        route: event_route(protocol, home, &event.source),
        payload: envelope::encode(&Envelope::Event(event.clone())).into_bytes(),
        received_at: event.timestamp,
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EncodeFailure {
    #[error("binding is for {binding}, command targets {command}")]
    WrongBinding { binding: DeviceId, command: DeviceId },
    #[error("invalid command: {0}")]
    Invalid(#[from] crate::model::CommandError),
}

/// Edge-to-device encoding of a command for the device's transport.
pub fn emit_command(cmd: &ControlCommand, binding: &ProtocolBinding) -> Result<RawFrame, EncodeFailure> {
    if binding.device_id != cmd.device_id {
        return Err(EncodeFailure::WrongBinding {
            binding: binding.device_id.clone(),
            command: cmd.device_id.clone(),
        });
    }
    validate_action(&cmd.action)?;
    Ok(RawFrame {
        protocol: binding.protocol,
        route: binding.command_route(),
        payload: envelope::encode(&Envelope::Command(cmd.clone())).into_bytes(),
        received_at: cmd.issued_at,
    })
}

/// Device-side decoding of a command frame.
pub fn decode_command(frame: &RawFrame) -> Result<ControlCommand, IngestError> {
    let route = frame.route.as_str();
    let Some(Route::Command { device, .. }) = parse_route(frame.protocol, route) else {
        return Err(IngestError::UnknownDevice {
            route: route.to_string(),
        });
    };
    match envelope::decode(&frame.payload).map_err(|e| malformed(route, e))? {
        Envelope::Command(cmd) if cmd.device_id.0 == device => {
            validate_action(&cmd.action).map_err(|e| malformed(route, e))?;
            Ok(cmd)
        }
        Envelope::Command(_) => Err(malformed(route, "command device does not match route")),
        other => Err(malformed(route, format!("expected command, got {}", other.kind()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Action, Capability, Category, Origin};
    fn plug() -> DeviceDescriptor {
        DeviceDescriptor {
            device_id: "plug1".into(),
            home_id: "h1".into(),
            room: "kitchen".into(),
            category: Category::Controller,
            protocol: Protocol::Mqtt,
            capabilities: [
                Capability::Metric(MetricKind::PowerW),
                Capability::Metric(MetricKind::EnergyWh),
                Capability::Action(crate::model::ActionKind::SwitchOn),
                Capability::Action(crate::model::ActionKind::SwitchOff),
            ]
            .into_iter()
            .collect(),
            seq_epoch: 0,
            max_rate_w: None,
        }
    }

    fn table() -> DeviceTable {
        [plug()].into_iter().collect()
    }

    fn frame(protocol: Protocol, route: &str, payload: &str) -> RawFrame {
        RawFrame {
            protocol,
            route: route.into(),
            payload: payload.as_bytes().to_vec(),
            received_at: 0,
        }
    }

    #[test]
    fn mqtt_power_reading() {
        let f = frame(
            Protocol::Mqtt,
            "hems/h1/plug1/tel/power",
            r#"{"v":1,"value":800,"ts":1704067200000,"seq":7}"#,
        );
        let Ingested::Measurement(m) = ingest(&f, &table()).unwrap() else {
            panic!("expected a measurement")
        };
        assert_eq!(m.device_id.as_str(), "plug1");
        assert_eq!(m.metric, MetricKind::PowerW);
        assert_eq!(m.value, 800.0);
        assert_eq!(m.seq, 7);
    }

    #[test]
    fn same_reading_over_every_protocol_is_identical() {
        let body = r#"{"v":1,"value":800,"ts":1704067200000,"seq":7}"#;
        let mqtt = ingest(&frame(Protocol::Mqtt, "hems/h1/plug1/tel/power", body), &table());
        let coap = ingest(&frame(Protocol::Coap, "/tel/h1/plug1/power", body), &table());
        let http = ingest(&frame(Protocol::Http, "/ingest/h1/plug1/power", body), &table());
        assert_eq!(mqtt, coap);
        assert_eq!(mqtt, http);
    }

    #[test]
    fn errors_become_events() {
        let bad = frame(Protocol::Mqtt, "hems/h1/plug1/tel/power", r#"{"value":"high"}"#);
        let err = ingest(&bad, &table()).unwrap_err();
        assert_eq!(err.code(), "MalformedPayload");
        let event = err.to_event(Protocol::Mqtt, &mut IdSeq::new("ad"), 9);
        assert_eq!(event.kind, EventKind::SystemAlert);
        assert_eq!(event.payload_str("error"), Some("MalformedPayload"));

        let unknown = frame(Protocol::Http, "/ingest/h1/ghost/power", r#"{"v":1,"value":1,"ts":1,"seq":1}"#);
        assert_eq!(ingest(&unknown, &table()).unwrap_err().code(), "UnknownDevice");
        let nonsense = frame(Protocol::Coap, "/nope", "{}");
        assert_eq!(ingest(&nonsense, &table()).unwrap_err().code(), "UnknownDevice");
        let not_exposed = frame(Protocol::Coap, "/tel/h1/plug1/humidity", r#"{"v":1,"value":1,"ts":1,"seq":1}"#);
        assert_eq!(ingest(&not_exposed, &table()).unwrap_err().code(), "MalformedPayload");
        let empty = frame(Protocol::Coap, "/tel/h1/plug1/power", "");
        assert_eq!(ingest(&empty, &table()).unwrap_err().code(), "MalformedPayload");
    }

    #[test]
    fn command_routes_and_round_trip() {
        let cmd = ControlCommand {
            command_id: "c1".into(),
            device_id: "plug1".into(),
            action: Action::SwitchOff,
            origin: Origin::Cloud,
            issued_at: 5,
        };
        let expected = ["hems/h1/plug1/cmd", "/cmd/h1/plug1", "/device/h1/plug1/command"];
        for (protocol, route) in Protocol::ALL.into_iter().zip(expected) {
            let binding = ProtocolBinding::standard(protocol, "h1", &"plug1".into(), "127.0.0.1:1");
            let f = emit_command(&cmd, &binding).unwrap();
            assert_eq!(f.route, route);
            assert_eq!(decode_command(&f).unwrap(), cmd);
        }
    }

    #[test]
    fn out_of_range_setpoint_fails_to_encode() {
        let cmd = ControlCommand {
            command_id: "c1".into(),
            device_id: "th".into(),
            action: Action::SetSetpointC(50.0),
            origin: Origin::User,
            issued_at: 5,
        };
        let binding = ProtocolBinding::standard(Protocol::Coap, "h1", &"th".into(), "127.0.0.1:1");
        assert!(matches!(emit_command(&cmd, &binding), Err(EncodeFailure::Invalid(_))));
        let other = ProtocolBinding::standard(Protocol::Coap, "h1", &"x".into(), "127.0.0.1:1");
        assert!(matches!(emit_command(&cmd, &other), Err(EncodeFailure::WrongBinding { .. })));
    }

    #[test]
    fn binding_templates() {
        let b = ProtocolBinding::standard(Protocol::Mqtt, "h1", &"plug1".into(), "x:1");
        assert_eq!(b.telemetry_route(MetricKind::PowerW), "hems/h1/plug1/tel/power");
        b.validate().unwrap();
        let mut bad = b;
        bad.topic_or_path_template = "hems/all".into();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn device_events_are_accepted_only_from_their_source() {
        let event = Event::new("e1", EventKind::CommandApplied, Severity::Info, "plug1", 3);
        let f = encode_event(&event, "h1", Protocol::Http);
        assert_eq!(ingest(&f, &table()).unwrap(), Ingested::Event(event.clone()));
        let mut spoofed = event;
        spoofed.source = "other".into();
        let mut f = encode_event(&spoofed, "h1", Protocol::Http);
        f.route = event_route(Protocol::Http, "h1", "plug1");
        assert!(ingest(&f, &table()).is_err());
    }

    #[test]
    fn parse_rejects_empty_segments() {
        assert_eq!(parse_route(Protocol::Mqtt, "hems//plug1/cmd"), None);
        assert_eq!(parse_route(Protocol::Http, "ingest/h1/p/power"), None);
        assert_eq!(
            parse_route(Protocol::Coap, "/cmd/h1/p"),
            Some(Route::Command { home: "h1".into(), device: "p".into() })
        );
    }
}
