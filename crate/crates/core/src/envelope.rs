//! Canonical wire envelope.
//!
//! A record is a JSON object carrying `v` (schema version, 1), `type`
//! (`measurement`, `command` or `event`) and the fields of the wrapped type
//! under their canonical names. Unknown fields are rejected.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::model::{ControlCommand, Event, Measurement};

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Envelope {
    Measurement(Measurement),
    Command(ControlCommand),
    Event(Event),
}

impl Envelope {
    pub fn kind(&self) -> &'static str {
        match self {
            Envelope::Measurement(_) => "measurement",
            Envelope::Command(_) => "command",
            Envelope::Event(_) => "event",
        }
    }
}

impl From<Measurement> for Envelope {
    fn from(m: Measurement) -> Self {
        Envelope::Measurement(m)
    }
}

impl From<ControlCommand> for Envelope {
    fn from(c: ControlCommand) -> Self {
        Envelope::Command(c)
    }
}

impl From<Event> for Envelope {
    fn from(e: Event) -> Self {
        Envelope::Event(e)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvelopeError {
    #[error("invalid JSON: {0}")]
    Syntax(String),
    #[error("envelope must be a JSON object")]
    NotAnObject,
    #[error("missing or non-integer `v`")]
    MissingVersion,
    #[error("unsupported schema version {0}")]
    UnsupportedVersion(u64),
    #[error("missing `type`")]
    MissingKind,
    #[error("unknown kind `{0}`")]
    UnknownKind(String),
    #[error("invalid {kind} body: {reason}")]
    Body { kind: &'static str, reason: String },
    #[error("batch body must be a JSON array")]
    NotABatch,
    #[error("batch entry {index}: {source}")]
    BatchEntry {
        index: usize,
        #[source]
        source: alloc::boxed::Box<EnvelopeError>,
    },
}

fn body_value<T: Serialize>(body: &T) -> Map<String, Value> {
    match serde_json::to_value(body) {
        Ok(Value::Object(map)) => map,
        // canonical types are plain structs
        _ => unreachable!("canonical types serialize to objects"),
    }
}

pub fn to_value(envelope: &Envelope) -> Value {
    let mut map = match envelope {
        Envelope::Measurement(m) => body_value(m),
        Envelope::Command(c) => body_value(c),
        Envelope::Event(e) => body_value(e),
    };
    map.insert("v".to_string(), Value::from(SCHEMA_VERSION));
    map.insert("type".to_string(), Value::from(envelope.kind()));
    Value::Object(map)
}

pub fn encode(envelope: &Envelope) -> String {
    to_value(envelope).to_string()
}

/// Encodes a batch as a JSON array body.
pub fn encode_batch<'a>(envelopes: impl IntoIterator<Item = &'a Envelope>) -> String {
    Value::Array(envelopes.into_iter().map(to_value).collect()).to_string()
}

fn body<T: DeserializeOwned>(kind: &'static str, map: Map<String, Value>) -> Result<T, EnvelopeError> {
    serde_json::from_value(Value::Object(map)).map_err(|e| EnvelopeError::Body {
        kind,
        reason: e.to_string(),
    })
}

pub fn from_value(value: Value) -> Result<Envelope, EnvelopeError> {
    let Value::Object(mut map) = value else {
        return Err(EnvelopeError::NotAnObject);
    };
    let version = map
        .remove("v")
        .and_then(|v| v.as_u64())
        .ok_or(EnvelopeError::MissingVersion)?;
    if version != SCHEMA_VERSION {
        return Err(EnvelopeError::UnsupportedVersion(version));
    }
    let kind = match map.remove("type") {
        Some(Value::String(kind)) => kind,
        _ => return Err(EnvelopeError::MissingKind),
    };
    match kind.as_str() {
        "measurement" => body("measurement", map).map(Envelope::Measurement),
        "command" => body("command", map).map(Envelope::Command),
        "event" => body("event", map).map(Envelope::Event),
        _ => Err(EnvelopeError::UnknownKind(kind)),
    }
}

pub fn decode(bytes: &[u8]) -> Result<Envelope, EnvelopeError> {
    let value: Value =
        serde_json::from_slice(bytes).map_err(|e| EnvelopeError::Syntax(e.to_string()))?;
    from_value(value)
}

/// Decodes an array body. Any bad entry rejects the whole batch.
pub fn decode_batch(bytes: &[u8]) -> Result<Vec<Envelope>, EnvelopeError> {
    let value: Value =
        serde_json::from_slice(bytes).map_err(|e| EnvelopeError::Syntax(e.to_string()))?;
    let Value::Array(items) = value else {
        return Err(EnvelopeError::NotABatch);
    };
    items
        .into_iter()
        .enumerate()
        .map(|(index, item)| {
            from_value(item).map_err(|e| EnvelopeError::BatchEntry {
                index,
                source: alloc::boxed::Box::new(e),
            })
        })
        .collect()
}

/// Compact telemetry body sent by devices; device and metric come from the route.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TelemetryPayload {
    pub v: u64,
    pub value: f64,
    pub ts: i64,
    pub seq: u64,
    #[serde(default)]
    pub epoch: u32,
}

impl TelemetryPayload {
    pub fn of(m: &Measurement) -> Self {
        Self {
            v: SCHEMA_VERSION,
            value: m.value,
            ts: m.timestamp,
            seq: m.seq,
            epoch: m.seq_epoch,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).unwrap_or_default()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, EnvelopeError> {
        let payload: Self = serde_json::from_slice(bytes).map_err(|e| EnvelopeError::Body {
            kind: "telemetry",
            reason: e.to_string(),
        })?;
        if payload.v != SCHEMA_VERSION {
            return Err(EnvelopeError::UnsupportedVersion(payload.v));
        }
        if !payload.value.is_finite() {
            return Err(EnvelopeError::Body {
                kind: "telemetry",
                reason: format!("non-finite value {}", payload.value),
            });
        }
        Ok(payload)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Action, EventKind, MetricKind, Origin, Severity};

    fn sample_measurement() -> Measurement {
        Measurement {
            device_id: "plug1".into(),
            metric: MetricKind::PowerW,
            value: 800.0,
            timestamp: 1_704_067_200_000,
            seq_epoch: 0,
            seq: 7,
        }
    }

    #[test]
    fn measurement_envelope_shape() {
        let text = encode(&sample_measurement().into());
        let value: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(value["v"], 1);
        assert_eq!(value["type"], "measurement");
        assert_eq!(value["device_id"], "plug1");
        assert_eq!(value["metric"], "PowerW");
        assert!(value["value"].is_number());
        assert!(value["timestamp"].is_i64());
        assert_eq!(decode(text.as_bytes()).unwrap(), Envelope::Measurement(sample_measurement()));
    }

    #[test]
    fn field_order_is_irrelevant() {
        let text = r#"{"seq":7,"seq_epoch":0,"timestamp":1704067200000,"value":800,
                       "metric":"PowerW","device_id":"plug1","type":"measurement","v":1}"#;
        assert_eq!(decode(text.as_bytes()).unwrap(), Envelope::Measurement(sample_measurement()));
    }

    #[test]
    fn unknown_fields_and_versions_are_rejected() {
        let mut value = to_value(&sample_measurement().into());
        value["extra"] = Value::from(1);
        assert!(matches!(from_value(value), Err(EnvelopeError::Body { .. })));

        let mut value = to_value(&sample_measurement().into());
        value["v"] = Value::from(2);
        assert_eq!(from_value(value), Err(EnvelopeError::UnsupportedVersion(2)));

        let mut value = to_value(&sample_measurement().into());
        value["type"] = Value::from("telegram");
        assert!(matches!(from_value(value), Err(EnvelopeError::UnknownKind(_))));

        let mut value = to_value(&sample_measurement().into());
        value["value"] = Value::from("800");
        assert!(from_value(value).is_err());
    }

    #[test]
    fn command_and_event_round_trip() {
        let cmd = ControlCommand {
            command_id: "c-1".into(),
            device_id: "ev".into(),
            action: Action::SetChargeRateW(-3000.0),
            origin: Origin::Cloud,
            issued_at: 42,
        };
        let event = Event::new("e-1", EventKind::Anomaly, Severity::Warning, "t1", 5)
            .with("detector", "StuckSensor")
            .with("window_start", 1);
        for env in [Envelope::from(cmd), Envelope::from(event)] {
            assert_eq!(decode(encode(&env).as_bytes()).unwrap(), env);
        }
    }

    #[test]
    fn batch_rejects_on_any_bad_entry() {
        let good = to_value(&sample_measurement().into());
        let body = Value::Array(alloc::vec![good.clone(), Value::from(3)]).to_string();
        assert!(matches!(
            decode_batch(body.as_bytes()),
            Err(EnvelopeError::BatchEntry { index: 1, .. })
        ));
        assert_eq!(decode_batch(b"[]").unwrap(), Vec::new());
        assert_eq!(decode_batch(b"{}"), Err(EnvelopeError::NotABatch));
    }

    #[test]
    fn telemetry_payload() {
        let p = TelemetryPayload::decode(br#"{"v":1,"value":800,"ts":5,"seq":7}"#).unwrap();
        assert_eq!(p.epoch, 0);
        assert_eq!(p.value, 800.0);
        assert!(TelemetryPayload::decode(br#"{"value":"high"}"#).is_err());
        assert!(TelemetryPayload::decode(br#"{"v":1,"value":1,"ts":5,"seq":7,"x":0}"#).is_err());
    }
}
