//! Canonical domain types.
//!
//! Units are fixed: watts, watt-hours, degrees Celsius, percent, lux and UTC
//! milliseconds. Every protocol adapter converts into these types before any
//! other component sees the data.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lowest accepted thermostat setpoint.
pub const SETPOINT_MIN_C: f64 = 5.0;
/// Highest accepted thermostat setpoint.
pub const SETPOINT_MAX_C: f64 = 35.0;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeviceId(pub String);

impl DeviceId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for DeviceId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    Meter,
    Sensor,
    Controller,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Protocol {
    Mqtt,
    Coap,
    Http,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Mqtt, Protocol::Coap, Protocol::Http];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    PowerW,
    EnergyWh,
    TemperatureC,
    HumidityPct,
    Occupancy,
    LightLux,
}

impl MetricKind {
    pub const ALL: [MetricKind; 6] = [
        MetricKind::PowerW,
        MetricKind::EnergyWh,
        MetricKind::TemperatureC,
        MetricKind::HumidityPct,
        MetricKind::Occupancy,
        MetricKind::LightLux,
    ];

    /// Short token used in topics and paths.
    pub fn token(self) -> &'static str {
        match self {
            MetricKind::PowerW => "power",
            MetricKind::EnergyWh => "energy",
            MetricKind::TemperatureC => "temperature",
            MetricKind::HumidityPct => "humidity",
            MetricKind::Occupancy => "occupancy",
            MetricKind::LightLux => "light",
        }
    }

    pub fn from_token(token: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.token() == token)
    }

    pub fn is_metering(self) -> bool {
        matches!(self, MetricKind::PowerW | MetricKind::EnergyWh)
    }

    pub fn is_environmental(self) -> bool {
        !self.is_metering()
    }
}

/// Kind of actuation a controller accepts, without its argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ActionKind {
    SwitchOn,
    SwitchOff,
    SetSetpointC,
    SetChargeRateW,
}

/// A concrete actuation request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Action {
    SwitchOn,
    SwitchOff,
    SetSetpointC(f64),
    /// Positive charges, negative discharges back toward the home (V2G).
    SetChargeRateW(f64),
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        match self {
            Action::SwitchOn => ActionKind::SwitchOn,
            Action::SwitchOff => ActionKind::SwitchOff,
            Action::SetSetpointC(_) => ActionKind::SetSetpointC,
            Action::SetChargeRateW(_) => ActionKind::SetChargeRateW,
        }
    }
}

/// One entry of a device's capability set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Capability {
    Metric(MetricKind),
    Action(ActionKind),
}

impl Capability {
    pub fn name(self) -> &'static str {
        match self {
            Capability::Metric(MetricKind::PowerW) => "PowerW",
            Capability::Metric(MetricKind::EnergyWh) => "EnergyWh",
            Capability::Metric(MetricKind::TemperatureC) => "TemperatureC",
            Capability::Metric(MetricKind::HumidityPct) => "HumidityPct",
            Capability::Metric(MetricKind::Occupancy) => "Occupancy",
            Capability::Metric(MetricKind::LightLux) => "LightLux",
            Capability::Action(ActionKind::SwitchOn) => "SwitchOn",
            Capability::Action(ActionKind::SwitchOff) => "SwitchOff",
            Capability::Action(ActionKind::SetSetpointC) => "SetSetpointC",
            Capability::Action(ActionKind::SetChargeRateW) => "SetChargeRateW",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        const ALL: [Capability; 10] = [
            Capability::Metric(MetricKind::PowerW),
            Capability::Metric(MetricKind::EnergyWh),
            Capability::Metric(MetricKind::TemperatureC),
            Capability::Metric(MetricKind::HumidityPct),
            Capability::Metric(MetricKind::Occupancy),
            Capability::Metric(MetricKind::LightLux),
            Capability::Action(ActionKind::SwitchOn),
            Capability::Action(ActionKind::SwitchOff),
            Capability::Action(ActionKind::SetSetpointC),
            Capability::Action(ActionKind::SetChargeRateW),
        ];
        ALL.into_iter().find(|c| c.name() == name)
    }
}

impl From<Capability> for String {
    fn from(c: Capability) -> Self {
        c.name().to_string()
    }
}

impl TryFrom<String> for Capability {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        Capability::parse(&s).ok_or_else(|| format!("unknown capability `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceDescriptor {
    pub device_id: DeviceId,
    pub home_id: String,
    pub room: String,
    pub category: Category,
    pub protocol: Protocol,
    pub capabilities: BTreeSet<Capability>,
    #[serde(default)]
    pub seq_epoch: u32,
    /// Magnitude bound for `SetChargeRateW`; required when that action is exposed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_rate_w: Option<f64>,
}

impl DeviceDescriptor {
    pub fn has_metric(&self, metric: MetricKind) -> bool {
        self.capabilities.contains(&Capability::Metric(metric))
    }

    pub fn has_action(&self, action: ActionKind) -> bool {
        self.capabilities.contains(&Capability::Action(action))
    }

    /// Exposed metrics in canonical order.
    pub fn metrics(&self) -> impl Iterator<Item = MetricKind> + '_ {
        self.capabilities.iter().filter_map(|c| match c {
            Capability::Metric(m) => Some(*m),
            Capability::Action(_) => None,
        })
    }

    pub fn actions(&self) -> impl Iterator<Item = ActionKind> + '_ {
        self.capabilities.iter().filter_map(|c| match c {
            Capability::Action(a) => Some(*a),
            Capability::Metric(_) => None,
        })
    }
}

/// User-editable settings kept alongside a descriptor in the registry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSettings {
    #[serde(default)]
    pub label: String,
    /// Curtailment rank; 0 means the device is never curtailed.
    #[serde(default)]
    pub priority_rank: u32,
    #[serde(default)]
    pub curtailable: bool,
    /// Deferrable appliance eligible for load shifting.
    #[serde(default)]
    pub flexible: bool,
    #[serde(default)]
    pub lighting: bool,
    /// Current thermostat setpoint, for setback recommendations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub setpoint_c: Option<f64>,
}

impl Default for DeviceSettings {
    fn default() -> Self {
        Self {
            label: String::new(),
            priority_rank: 0,
            curtailable: false,
            flexible: false,
            lighting: false,
            setpoint_c: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Measurement {
    pub device_id: DeviceId,
    pub metric: MetricKind,
    pub value: f64,
    pub timestamp: i64,
    pub seq_epoch: u32,
    pub seq: u64,
}

/// Idempotency key of a measurement.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DedupKey {
    pub device_id: DeviceId,
    pub seq_epoch: u32,
    pub seq: u64,
}

impl fmt::Display for DedupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.device_id, self.seq_epoch, self.seq)
    }
}

pub fn dedup_key(m: &Measurement) -> DedupKey {
    DedupKey {
        device_id: m.device_id.clone(),
        seq_epoch: m.seq_epoch,
        seq: m.seq,
    }
}

impl Measurement {
    pub fn dedup_key(&self) -> DedupKey {
        dedup_key(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Origin {
    User,
    Edge,
    Cloud,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlCommand {
    pub command_id: String,
    pub device_id: DeviceId,
    pub action: Action,
    pub origin: Origin,
    pub issued_at: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Anomaly,
    DrSignal,
    CommandIssued,
    CommandApplied,
    MaintenanceAlert,
    Recommendation,
    SystemAlert,
}

impl EventKind {
    pub const ALL: [EventKind; 7] = [
        EventKind::Anomaly,
        EventKind::DrSignal,
        EventKind::CommandIssued,
        EventKind::CommandApplied,
        EventKind::MaintenanceAlert,
        EventKind::Recommendation,
        EventKind::SystemAlert,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EventKind::Anomaly => "Anomaly",
            EventKind::DrSignal => "DrSignal",
            EventKind::CommandIssued => "CommandIssued",
            EventKind::CommandApplied => "CommandApplied",
            EventKind::MaintenanceAlert => "MaintenanceAlert",
            EventKind::Recommendation => "Recommendation",
            EventKind::SystemAlert => "SystemAlert",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Severity {
    Info,
    Warning,
    Critical,
}

impl Severity {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "Info" => Some(Severity::Info),
            "Warning" => Some(Severity::Warning),
            "Critical" => Some(Severity::Critical),
            _ => None,
        }
    }
}

pub type Payload = serde_json::Map<String, serde_json::Value>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Event {
    pub event_id: String,
    pub kind: EventKind,
    pub severity: Severity,
    /// Device id or component name.
    pub source: String,
    pub timestamp: i64,
    #[serde(default)]
    pub payload: Payload,
}

impl Event {
    pub fn new(
        event_id: impl Into<String>,
        kind: EventKind,
        severity: Severity,
        source: impl Into<String>,
        timestamp: i64,
    ) -> Self {
        Self {
            event_id: event_id.into(),
            kind,
            severity,
            source: source.into(),
            timestamp,
            payload: Payload::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.payload.insert(key.to_string(), value.into());
        self
    }

    pub fn payload_str(&self, key: &str) -> Option<&str> {
        self.payload.get(key).and_then(|v| v.as_str())
    }
}

/// Deterministic identifier source: `prefix-000001`, `prefix-000002`, ...
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdSeq {
    prefix: String,
    next: u64,
}

impl IdSeq {
    pub fn new(prefix: impl Into<String>) -> Self {
        Self {
            prefix: prefix.into(),
            next: 1,
        }
    }

    pub fn starting_at(prefix: impl Into<String>, next: u64) -> Self {
        Self {
            prefix: prefix.into(),
            next,
        }
    }

    pub fn next_id(&mut self) -> String {
        let id = format!("{}-{:06}", self.prefix, self.next);
        self.next += 1;
        id
    }

    pub fn peek(&self) -> u64 {
        self.next
    }
}

/// Half-open UTC millisecond window `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeWindow {
    pub start: i64,
    pub end: i64,
}

impl TimeWindow {
    pub fn new(start: i64, end: i64) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, t: i64) -> bool {
        self.start <= t && t < self.end
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TariffBand {
    pub start_hour: u8,
    pub end_hour: u8,
    pub price_per_kwh: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HourWindow {
    pub start_hour: u8,
    pub end_hour: u8,
}

impl HourWindow {
    pub fn contains_hour(&self, hour: u8) -> bool {
        self.start_hour <= hour && hour < self.end_hour
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TariffSchedule {
    pub bands: Vec<TariffBand>,
    #[serde(default)]
    pub peak_windows: Vec<HourWindow>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TariffError {
    #[error("tariff has no bands")]
    Empty,
    #[error("band {index} is empty or exceeds 24 h")]
    BadBand { index: usize },
    #[error("band {index} starts at hour {start}, expected {expected} (gap or overlap)")]
    NotContiguous { index: usize, start: u8, expected: u8 },
    #[error("bands end at hour {0}, must cover the whole day")]
    Incomplete(u8),
    #[error("band {index} has non-positive price")]
    NonPositivePrice { index: usize },
    #[error("peak window {index} is empty or exceeds 24 h")]
    BadPeakWindow { index: usize },
}

impl TariffSchedule {
    /// A single band at `price` covering the whole day.
    pub fn flat(price: f64) -> Self {
        Self {
            bands: alloc::vec![TariffBand {
                start_hour: 0,
                end_hour: 24,
                price_per_kwh: price,
            }],
            peak_windows: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), TariffError> {
        if self.bands.is_empty() {
            return Err(TariffError::Empty);
        }
        let mut expected = 0u8;
        for (index, band) in self.bands.iter().enumerate() {
            if band.start_hour >= band.end_hour || band.end_hour > 24 {
                return Err(TariffError::BadBand { index });
            }
            if band.start_hour != expected {
                return Err(TariffError::NotContiguous {
                    index,
                    start: band.start_hour,
                    expected,
                });
            }
            if !(band.price_per_kwh > 0.0) || !band.price_per_kwh.is_finite() {
                return Err(TariffError::NonPositivePrice { index });
            }
            expected = band.end_hour;
        }
        if expected != 24 {
            return Err(TariffError::Incomplete(expected));
        }
        for (index, w) in self.peak_windows.iter().enumerate() {
            if w.start_hour >= w.end_hour || w.end_hour > 24 {
                return Err(TariffError::BadPeakWindow { index });
            }
        }
        Ok(())
    }

    /// Price for an hour of day (0..24). Hours past the last band fall back to it.
    pub fn price_at_hour(&self, hour: u8) -> f64 {
        let hour = hour % 24;
        self.bands
            .iter()
            .find(|b| b.start_hour <= hour && hour < b.end_hour)
            .or(self.bands.last())
            .map(|b| b.price_per_kwh)
            .unwrap_or(0.0)
    }

    pub fn price_at(&self, timestamp_ms: i64) -> f64 {
        self.price_at_hour(hour_of_day(timestamp_ms))
    }

    pub fn cheapest_price(&self) -> f64 {
        self.bands
            .iter()
            .map(|b| b.price_per_kwh)
            .fold(f64::INFINITY, f64::min)
    }

    /// Start hour of the first cheapest band.
    pub fn cheapest_start_hour(&self) -> u8 {
        let cheapest = self.cheapest_price();
        self.bands
            .iter()
            .find(|b| b.price_per_kwh == cheapest)
            .map(|b| b.start_hour)
            .unwrap_or(0)
    }

    pub fn is_peak_hour(&self, hour: u8) -> bool {
        self.peak_windows.iter().any(|w| w.contains_hour(hour))
    }

    pub fn is_peak(&self, timestamp_ms: i64) -> bool {
        self.is_peak_hour(hour_of_day(timestamp_ms))
    }
}

/// UTC hour of day of a millisecond timestamp.
pub fn hour_of_day(timestamp_ms: i64) -> u8 {
    (timestamp_ms.rem_euclid(crate::DAY_MS) / crate::HOUR_MS) as u8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrSignal {
    pub signal_id: String,
    pub target_reduction_w: f64,
    pub window: TimeWindow,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DrSignalError {
    #[error("DR window is empty")]
    EmptyWindow,
    #[error("target reduction must be positive")]
    NonPositiveTarget,
}

impl DrSignal {
    pub fn validate(&self) -> Result<(), DrSignalError> {
        if self.window.is_empty() {
            return Err(DrSignalError::EmptyWindow);
        }
        if !(self.target_reduction_w > 0.0) || !self.target_reduction_w.is_finite() {
            return Err(DrSignalError::NonPositiveTarget);
        }
        Ok(())
    }
}

/// A broken descriptor invariant.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("{0:?}: invalid device id (empty or contains characters outside [A-Za-z0-9_.-])")]
    InvalidId(DeviceId),
    #[error("{0}: duplicate id")]
    DuplicateId(DeviceId),
    #[error("{device}: action capability on non-controller ({action:?})")]
    ActionOnNonController { device: DeviceId, action: ActionKind },
    #[error("{device}: metric {metric:?} not allowed for {category:?}")]
    MetricNotAllowed {
        device: DeviceId,
        category: Category,
        metric: MetricKind,
    },
    #[error("{0}: controller exposes no action")]
    ControllerWithoutAction(DeviceId),
    #[error("{0}: SetChargeRateW requires a positive max_rate_w")]
    MissingRateLimit(DeviceId),
}

/// Ids are used verbatim as topic and path segments.
pub fn is_valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.'))
}

fn allowed_metric(category: Category, metric: MetricKind) -> bool {
    match category {
        Category::Meter | Category::Controller => metric.is_metering(),
        Category::Sensor => metric.is_environmental(),
    }
}

/// Checks the taxonomy rules for a single descriptor.
pub fn validate(descriptor: &DeviceDescriptor) -> Result<(), Vec<Violation>> {
    let id = &descriptor.device_id;
    let mut violations = Vec::new();
    if !is_valid_id(&id.0) {
        violations.push(Violation::InvalidId(id.clone()));
    }
    for cap in &descriptor.capabilities {
        match *cap {
            Capability::Action(action) if descriptor.category != Category::Controller => {
                violations.push(Violation::ActionOnNonController {
                    device: id.clone(),
                    action,
                });
            }
            Capability::Metric(metric) if !allowed_metric(descriptor.category, metric) => {
                violations.push(Violation::MetricNotAllowed {
                    device: id.clone(),
                    category: descriptor.category,
                    metric,
                });
            }
            _ => {}
        }
    }
    if descriptor.category == Category::Controller && descriptor.actions().next().is_none() {
        violations.push(Violation::ControllerWithoutAction(id.clone()));
    }
    if descriptor.has_action(ActionKind::SetChargeRateW)
        && !descriptor.max_rate_w.is_some_and(|r| r > 0.0 && r.is_finite())
    {
        violations.push(Violation::MissingRateLimit(id.clone()));
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// Validates every descriptor and the per-home uniqueness of ids.
pub fn validate_fleet(descriptors: &[DeviceDescriptor]) -> Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    let mut seen: BTreeSet<(&str, &DeviceId)> = BTreeSet::new();
    for d in descriptors {
        if let Err(mut v) = validate(d) {
            violations.append(&mut v);
        }
        if !seen.insert((d.home_id.as_str(), &d.device_id)) {
            violations.push(Violation::DuplicateId(d.device_id.clone()));
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MeasurementError {
    #[error("value is not finite")]
    NotFinite,
    #[error("humidity {0} outside [0, 100]")]
    HumidityRange(f64),
    #[error("occupancy must be 0 or 1, got {0}")]
    OccupancyValue(f64),
    #[error("energy decreased from {previous} to {value} within epoch")]
    EnergyDecreased { previous: f64, value: f64 },
}

/// Checks the value-level invariants of a single measurement.
pub fn validate_measurement(m: &Measurement) -> Result<(), MeasurementError> {
    if !m.value.is_finite() {
        return Err(MeasurementError::NotFinite);
    }
    match m.metric {
        MetricKind::HumidityPct if !(0.0..=100.0).contains(&m.value) => {
            Err(MeasurementError::HumidityRange(m.value))
        }
        MetricKind::Occupancy if m.value != 0.0 && m.value != 1.0 => {
            Err(MeasurementError::OccupancyValue(m.value))
        }
        _ => Ok(()),
    }
}

/// Tracks cumulative energy per (device, epoch) and rejects decreases.
///
/// Devices with signed power (batteries, PV meters) report net energy and are
/// registered as bidirectional to opt out of the check.
#[derive(Debug, Default, Clone)]
pub struct EnergyMonotonicity {
    last: BTreeMap<(DeviceId, u32), f64>,
    bidirectional: BTreeSet<DeviceId>,
}

impl EnergyMonotonicity {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn allow_bidirectional(&mut self, device: DeviceId) {
        self.bidirectional.insert(device);
    }

    pub fn check(&mut self, m: &Measurement) -> Result<(), MeasurementError> {
        validate_measurement(m)?;
        if m.metric != MetricKind::EnergyWh || self.bidirectional.contains(&m.device_id) {
            return Ok(());
        }
        let key = (m.device_id.clone(), m.seq_epoch);
        if let Some(&previous) = self.last.get(&key) {
            if m.value < previous {
                return Err(MeasurementError::EnergyDecreased {
                    previous,
                    value: m.value,
                });
            }
        }
        self.last.insert(key, m.value);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CommandError {
    #[error("command targets {command} but descriptor is {descriptor}")]
    WrongDevice { command: DeviceId, descriptor: DeviceId },
    #[error("{device} does not support {action:?}")]
    UnsupportedAction { device: DeviceId, action: ActionKind },
    #[error("setpoint {0} outside [5, 35] C")]
    SetpointRange(f64),
    #[error("charge rate {rate} outside [-{max}, {max}] W")]
    ChargeRateRange { rate: f64, max: f64 },
    #[error("command id is empty")]
    EmptyId,
}

/// Checks a command's argument ranges without a target descriptor.
pub fn validate_action(action: &Action) -> Result<(), CommandError> {
    match *action {
        Action::SetSetpointC(c) if !(SETPOINT_MIN_C..=SETPOINT_MAX_C).contains(&c) => {
            Err(CommandError::SetpointRange(c))
        }
        Action::SetChargeRateW(r) if !r.is_finite() => Err(CommandError::ChargeRateRange {
            rate: r,
            max: f64::NAN,
        }),
        _ => Ok(()),
    }
}

/// Full command validation against the target device.
pub fn validate_command(
    cmd: &ControlCommand,
    target: &DeviceDescriptor,
) -> Result<(), CommandError> {
    if cmd.command_id.is_empty() {
        return Err(CommandError::EmptyId);
    }
    if cmd.device_id != target.device_id {
        return Err(CommandError::WrongDevice {
            command: cmd.device_id.clone(),
            descriptor: target.device_id.clone(),
        });
    }
    let kind = cmd.action.kind();
    if !target.has_action(kind) {
        return Err(CommandError::UnsupportedAction {
            device: target.device_id.clone(),
            action: kind,
        });
    }
    validate_action(&cmd.action)?;
    if let Action::SetChargeRateW(rate) = cmd.action {
        let max = target.max_rate_w.unwrap_or(0.0);
        if rate.abs() > max {
            return Err(CommandError::ChargeRateRange { rate, max });
        }
    }
    Ok(())
}
