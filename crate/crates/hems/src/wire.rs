//! JSON resources exchanged between gateway and cloud besides the envelope.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use hems_core::anomaly::AnomalyConfig;
use hems_core::envelope::{self, Envelope};
use hems_core::{ControlCommand, DeviceId, DeviceSettings, DrSignal};

/// Edge behaviour the user can change from the cloud.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgeConfig {
    pub auto_mitigate: bool,
    pub detector: AnomalyConfig,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        Self {
            auto_mitigate: true,
            detector: AnomalyConfig::default(),
        }
    }
}

/// One entry of a home's downlink queue.
#[derive(Debug, Clone, PartialEq)]
pub enum DownlinkItem {
    /// Serialized as the canonical command envelope.
    Command(ControlCommand),
    DrSignal(DrSignal),
    EdgeConfig(EdgeConfig),
    Settings { device_id: DeviceId, settings: DeviceSettings },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum Tagged {
    DrSignal { signal: DrSignal },
    EdgeConfig { config: EdgeConfig },
    Settings { device_id: DeviceId, settings: DeviceSettings },
}

impl DownlinkItem {
    pub fn to_value(&self) -> Value {
        let tagged = match self {
            DownlinkItem::Command(c) => return envelope::to_value(&Envelope::Command(c.clone())),
            DownlinkItem::DrSignal(s) => Tagged::DrSignal { signal: s.clone() },
            DownlinkItem::EdgeConfig(c) => Tagged::EdgeConfig { config: *c },
            DownlinkItem::Settings { device_id, settings } => Tagged::Settings {
                device_id: device_id.clone(),
                settings: settings.clone(),
            },
        };
        serde_json::to_value(tagged).expect("serializable downlink item")
    }

    pub fn from_value(value: Value) -> Result<Self, String> {
        if value.get("type").and_then(Value::as_str) == Some("command") {
            return match envelope::from_value(value).map_err(|e| e.to_string())? {
                Envelope::Command(c) => Ok(DownlinkItem::Command(c)),
                _ => Err("expected a command".into()),
            };
        }
        Ok(match serde_json::from_value(value).map_err(|e| e.to_string())? {
            Tagged::DrSignal { signal } => DownlinkItem::DrSignal(signal),
            Tagged::EdgeConfig { config } => DownlinkItem::EdgeConfig(config),
            Tagged::Settings { device_id, settings } => DownlinkItem::Settings { device_id, settings },
        })
    }
}

/// Response of `GET /homes/{h}/commands`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownlinkPage {
    pub items: Vec<Value>,
    pub cursor: u64,
}

/// Response of `POST /ingest`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestAck {
    /// Keys stored now or earlier.
    pub accepted: Vec<String>,
    /// Keys not stored because the device is unknown or removed.
    pub rejected: Vec<String>,
}
