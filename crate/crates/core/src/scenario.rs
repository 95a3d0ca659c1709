//! Household scenarios and the fleet that plays them.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::flex::FlexLoad;
use crate::model::{
    validate_fleet, Action, Capability, Category, ControlCommand, DeviceDescriptor, DeviceId,
    DeviceSettings, DrSignal, Event, Measurement, Origin, Protocol, TariffSchedule, TimeWindow,
};
use crate::sim::{
    apply_command, behavior_problems, inject_fault, rejection_event, step_device, Behavior,
    DeviceState, FaultKind, SimRng,
};

/// 2024-01-01T00:00:00Z, a Monday.
pub const DEFAULT_START_MS: i64 = 1_704_067_200_000;

fn default_start() -> i64 {
    DEFAULT_START_MS
}

fn default_slot_seconds() -> u32 {
    900
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub device_id: DeviceId,
    pub room: String,
    pub category: Category,
    pub protocol: Protocol,
    pub capabilities: BTreeSet<Capability>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_rate_w: Option<f64>,
    #[serde(default)]
    pub settings: DeviceSettings,
    pub behavior: Behavior,
}

impl DeviceSpec {
    pub fn descriptor(&self, home_id: &str) -> DeviceDescriptor {
        DeviceDescriptor {
            device_id: self.device_id.clone(),
            home_id: home_id.into(),
            room: self.room.clone(),
            category: self.category,
            protocol: self.protocol,
            capabilities: self.capabilities.clone(),
            seq_epoch: 0,
            max_rate_w: self.max_rate_w,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub device_id: DeviceId,
    pub at_seconds: u64,
    pub fault: FaultKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrSignalSpec {
    pub signal_id: String,
    pub target_reduction_w: f64,
    pub start_seconds: u64,
    pub end_seconds: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandSpec {
    pub at_seconds: u64,
    pub device_id: DeviceId,
    pub action: Action,
}

/// The edge loses its cloud uplink for a while, optionally restarting midway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutageSpec {
    pub start_seconds: u64,
    pub end_seconds: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gateway_restart_seconds: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HouseholdScenario {
    pub name: String,
    pub home_id: String,
    #[serde(default = "default_start")]
    pub start_ms: i64,
    pub tick_seconds: u32,
    pub duration_seconds: u64,
    pub rng_seed: u64,
    /// Outdoor temperature, one value per hour of day.
    pub ambient_c: Vec<f64>,
    pub tariff: TariffSchedule,
    #[serde(default)]
    pub devices: Vec<DeviceSpec>,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    #[serde(default)]
    pub dr_signals: Vec<DrSignalSpec>,
    #[serde(default)]
    pub commands: Vec<CommandSpec>,
    #[serde(default)]
    pub outages: Vec<OutageSpec>,
    #[serde(default)]
    pub flex_loads: Vec<FlexLoad>,
    #[serde(default = "default_slot_seconds")]
    pub flex_slot_seconds: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peak_cap_w: Option<f64>,
}

impl HouseholdScenario {
    pub fn end_ms(&self) -> i64 {
        self.start_ms + (self.duration_seconds as i64) * 1000
    }

    pub fn tick_count(&self) -> u64 {
        self.duration_seconds / u64::from(self.tick_seconds.max(1))
    }

    pub fn descriptors(&self) -> Vec<DeviceDescriptor> {
        self.devices.iter().map(|d| d.descriptor(&self.home_id)).collect()
    }

    pub fn settings(&self) -> BTreeMap<DeviceId, DeviceSettings> {
        self.devices
            .iter()
            .map(|d| (d.device_id.clone(), d.settings.clone()))
            .collect()
    }

    pub fn dr_signals(&self) -> Vec<DrSignal> {
        self.dr_signals
            .iter()
            .map(|s| DrSignal {
                signal_id: s.signal_id.clone(),
                target_reduction_w: s.target_reduction_w,
                window: TimeWindow::new(
                    self.start_ms + s.start_seconds as i64 * 1000,
                    self.start_ms + s.end_seconds as i64 * 1000,
                ),
            })
            .collect()
    }

    pub fn spec(&self, device: &DeviceId) -> Option<&DeviceSpec> {
        self.devices.iter().find(|d| &d.device_id == device)
    }

    /// Every problem with the scenario, in a stable order. Empty when valid.
    pub fn problems(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if !crate::model::is_valid_id(&self.home_id) {
            problems.push(format!("home_id {:?} is not a valid id", self.home_id));
        }
        if self.tick_seconds == 0 || 3600 % self.tick_seconds != 0 {
            problems.push(format!("tick_seconds {} must divide 3600", self.tick_seconds));
        }
        if self.duration_seconds == 0 {
            problems.push("duration_seconds must be positive".into());
        }
        if self.ambient_c.len() != 24 || self.ambient_c.iter().any(|v| !v.is_finite()) {
            problems.push(format!("ambient_c needs 24 finite values, got {}", self.ambient_c.len()));
        }
        if let Err(e) = self.tariff.validate() {
            problems.push(format!("tariff: {e}"));
        }
        let descriptors = self.descriptors();
        if let Err(violations) = validate_fleet(&descriptors) {
            problems.extend(violations.iter().map(|v| format!("{v}")));
        }
        for spec in &self.devices {
            problems.extend(behavior_problems(&spec.descriptor(&self.home_id), &spec.behavior));
        }
        for f in &self.faults {
            match self.spec(&f.device_id) {
                None => problems.push(format!("fault targets unknown device {}", f.device_id)),
                Some(spec) => {
                    let state = DeviceState::new(spec.descriptor(&self.home_id), spec.behavior.clone(), 0);
                    if let Err(e) = inject_fault(&state, f.fault, 0) {
                        problems.push(format!("{e}"));
                    }
                }
            }
        }
        for (signal, spec) in self.dr_signals().iter().zip(&self.dr_signals) {
            if let Err(e) = signal.validate() {
                problems.push(format!("dr signal {}: {e}", spec.signal_id));
            }
        }
        for c in &self.commands {
            match self.spec(&c.device_id) {
                None => problems.push(format!("command targets unknown device {}", c.device_id)),
                Some(spec) => {
                    let cmd = ControlCommand {
                        command_id: "check".into(),
                        device_id: c.device_id.clone(),
                        action: c.action,
                        origin: Origin::User,
                        issued_at: 0,
                    };
                    if let Err(e) = crate::model::validate_command(&cmd, &spec.descriptor(&self.home_id)) {
                        problems.push(format!("command for {}: {e}", c.device_id));
                    }
                }
            }
        }
        for o in &self.outages {
            let restart_ok = o
                .gateway_restart_seconds
                .map_or(true, |r| o.start_seconds <= r && r < o.end_seconds);
            if o.start_seconds >= o.end_seconds || !restart_ok {
                problems.push(format!(
                    "outage {}..{}s is empty or restarts outside the outage",
                    o.start_seconds, o.end_seconds
                ));
            }
        }
        if self.flex_slot_seconds == 0 || 3600 % self.flex_slot_seconds != 0 {
            problems.push(format!("flex_slot_seconds {} must divide 3600", self.flex_slot_seconds));
        }
        problems
    }
}

/// Ground truth for an injected fault.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultRecord {
    pub device_id: DeviceId,
    pub kind: FaultKind,
    pub onset_ms: i64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TickOutput {
    pub measurements: Vec<Measurement>,
    pub events: Vec<Event>,
}

/// All devices of a scenario, advanced together.
#[derive(Debug, Clone)]
pub struct Fleet {
    pub home_id: String,
    pub tick_seconds: u32,
    pub clock_ms: i64,
    ambient: Vec<f64>,
    devices: Vec<DeviceState>,
    rngs: Vec<SimRng>,
    pending_faults: Vec<(i64, DeviceId, FaultKind)>,
    pub fault_log: Vec<FaultRecord>,
}

impl Fleet {
    pub fn new(scenario: &HouseholdScenario) -> Self {
        let devices = scenario
            .devices
            .iter()
            .map(|d| DeviceState::new(d.descriptor(&scenario.home_id), d.behavior.clone(), scenario.start_ms))
            .collect();
        let rngs = (0..scenario.devices.len())
            .map(|i| SimRng::new(scenario.rng_seed, i as u64))
            .collect();
        let mut pending_faults: Vec<_> = scenario
            .faults
            .iter()
            .map(|f| (scenario.start_ms + f.at_seconds as i64 * 1000, f.device_id.clone(), f.fault))
            .collect();
        pending_faults.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
        Self {
            home_id: scenario.home_id.clone(),
            tick_seconds: scenario.tick_seconds,
            clock_ms: scenario.start_ms,
            ambient: scenario.ambient_c.clone(),
            devices,
            rngs,
            pending_faults,
            fault_log: Vec::new(),
        }
    }

    pub fn devices(&self) -> &[DeviceState] {
        &self.devices
    }

    pub fn device(&self, id: &DeviceId) -> Option<&DeviceState> {
        self.devices.iter().find(|d| d.device_id() == id)
    }

    fn index(&self, id: &DeviceId) -> Option<usize> {
        self.devices.iter().position(|d| d.device_id() == id)
    }

    /// Queues a command. A rejected command yields its warning event.
    pub fn command(&mut self, cmd: &ControlCommand) -> Result<(), Event> {
        let Some(i) = self.index(&cmd.device_id) else {
            return Err(Event::new(
                format!("fleet-rejected-{}", cmd.command_id),
                crate::model::EventKind::SystemAlert,
                crate::model::Severity::Warning,
                "device-sim",
                self.clock_ms,
            )
            .with("error", "UnsupportedAction")
            .with("command_id", cmd.command_id.as_str())
            .with("reason", format!("unknown device {}", cmd.device_id)));
        };
        match apply_command(&self.devices[i], cmd) {
            Ok(next) => {
                self.devices[i] = next;
                Ok(())
            }
            Err(e) => Err(rejection_event(&self.devices[i], cmd, &e, self.clock_ms)),
        }
    }

    /// Advances every device by one tick, in scenario order.
    pub fn tick(&mut self) -> TickOutput {
        while let Some((at, _, _)) = self.pending_faults.first() {
            if *at > self.clock_ms {
                break;
            }
            let (at, device, kind) = self.pending_faults.remove(0);
            if let Some(i) = self.index(&device) {
                if let Ok(next) = inject_fault(&self.devices[i], kind, at) {
                    self.devices[i] = next;
                    self.fault_log.push(FaultRecord {
                        device_id: device,
                        kind,
                        onset_ms: at,
                    });
                }
            }
        }
        let ambient_now = crate::sim::hourly_curve(&self.ambient, self.clock_ms);
        let mut out = TickOutput::default();
        for (state, rng) in self.devices.iter_mut().zip(self.rngs.iter_mut()) {
            let step = step_device(state, self.tick_seconds, ambient_now, &self.ambient, rng);
            *state = step.state;
            out.measurements.extend(step.measurements);
            out.events.extend(step.events);
        }
        self.clock_ms += i64::from(self.tick_seconds) * 1000;
        out
    }
}
