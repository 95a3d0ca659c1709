//! Device physics for the simulated household.
//!
//! Every device advances in fixed ticks. Power is piecewise constant over a
//! tick, so a meter's cumulative energy is the exact sum of
//! `power_w * dt / 3600`. Commands are queued and take effect at the start of
//! the next tick. Sensor noise is the only source of randomness.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    validate_command, Action, Category, CommandError, ControlCommand, DeviceDescriptor, DeviceId,
    Event, EventKind, Measurement, MetricKind, Severity,
};

/// Seeded random stream, one per device.
#[derive(Debug, Clone)]
pub struct SimRng(ChaCha8Rng);

impl SimRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self(rng)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
    }
}

/// Linear interpolation over a daily curve of 24 hourly points.
pub fn hourly_curve(values: &[f64], t_ms: i64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let day_ms = t_ms.rem_euclid(crate::DAY_MS);
    let hour = (day_ms / crate::HOUR_MS) as usize;
    let frac = (day_ms % crate::HOUR_MS) as f64 / crate::HOUR_MS as f64;
    let a = values[hour % values.len()];
    let b = values[(hour + 1) % values.len()];
    a + (b - a) * frac
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Session {
    /// Hour of day the session starts (fractional hours allowed).
    pub start_hour: f64,
    pub duration_seconds: u32,
    pub power_w: f64,
}

/// Load drawn by an appliance while switched on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum LoadProfile {
    Constant {
        power_w: f64,
    },
    /// Duty cycle: `on_w` for `on_seconds` at the start of every period.
    Cycle {
        on_w: f64,
        on_seconds: u32,
        period_seconds: u32,
        #[serde(default)]
        offset_seconds: u32,
    },
    /// Daily curve, one value per hour, held constant within the hour.
    /// Negative values model generation (PV).
    Hourly {
        power_w: Vec<f64>,
    },
    /// Daily sessions such as a washing machine run.
    Sessions {
        sessions: Vec<Session>,
    },
}

impl LoadProfile {
    pub fn power_at(&self, t_ms: i64) -> f64 {
        match self {
            LoadProfile::Constant { power_w } => *power_w,
            LoadProfile::Cycle {
                on_w,
                on_seconds,
                period_seconds,
                offset_seconds,
            } => {
                let period = i64::from((*period_seconds).max(1)) * 1000;
                let phase = (t_ms - i64::from(*offset_seconds) * 1000).rem_euclid(period);
                if phase < i64::from(*on_seconds) * 1000 {
                    *on_w
                } else {
                    0.0
                }
            }
            LoadProfile::Hourly { power_w } => {
                if power_w.is_empty() {
                    0.0
                } else {
                    let hour = (t_ms.rem_euclid(crate::DAY_MS) / crate::HOUR_MS) as usize;
                    power_w[hour % power_w.len()]
                }
            }
            LoadProfile::Sessions { sessions } => {
                let day_ms = t_ms.rem_euclid(crate::DAY_MS);
                sessions
                    .iter()
                    .filter(|s| {
                        let start = (s.start_hour * crate::HOUR_MS as f64) as i64;
                        let end = start + i64::from(s.duration_seconds) * 1000;
                        // sessions may run past midnight
                        (start <= day_ms && day_ms < end)
                            || (end > crate::DAY_MS && day_ms < end - crate::DAY_MS)
                    })
                    .map(|s| s.power_w)
                    .sum()
            }
        }
    }

    /// Start of the cycle containing `t_ms`, for cycle profiles.
    fn cycle_start(&self, t_ms: i64) -> Option<i64> {
        match self {
            LoadProfile::Cycle {
                period_seconds,
                offset_seconds,
                ..
            } => {
                let period = i64::from((*period_seconds).max(1)) * 1000;
                let offset = i64::from(*offset_seconds) * 1000;
                Some((t_ms - offset).div_euclid(period) * period + offset)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum SignalShape {
    /// Outdoor temperature curve plus a fixed offset.
    Ambient { offset: f64 },
    Sine {
        base: f64,
        amplitude: f64,
        period_seconds: u32,
        #[serde(default)]
        phase_seconds: u32,
    },
    /// Daily curve of 24 hourly points, linearly interpolated.
    Hourly { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSignal {
    pub metric: MetricKind,
    pub signal: SignalShape,
    #[serde(default)]
    pub noise_std: f64,
}

impl SensorSignal {
    fn sample(&self, t_ms: i64, ambient: &[f64], rng: &mut SimRng) -> f64 {
        let clean = match &self.signal {
            SignalShape::Ambient { offset } => hourly_curve(ambient, t_ms) + offset,
            SignalShape::Sine {
                base,
                amplitude,
                period_seconds,
                phase_seconds,
            } => {
                let period = i64::from((*period_seconds).max(1)) * 1000;
                let phase = (t_ms + i64::from(*phase_seconds) * 1000).rem_euclid(period);
                base + amplitude * libm::sin(core::f64::consts::TAU * phase as f64 / period as f64)
            }
            SignalShape::Hourly { values } => hourly_curve(values, t_ms),
        };
        let noisy = if self.noise_std > 0.0 && self.metric != MetricKind::Occupancy {
            clean + self.noise_std * rng.normal()
        } else {
            clean
        };
        match self.metric {
            MetricKind::HumidityPct => noisy.clamp(0.0, 100.0),
            MetricKind::LightLux => noisy.max(0.0),
            MetricKind::Occupancy => {
                if noisy >= 0.5 {
                    1.0
                } else {
                    0.0
                }
            }
            _ => noisy,
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_hysteresis() -> f64 {
    0.5
}

/// How a simulated device behaves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Behavior {
    Meter {
        load: LoadProfile,
    },
    Sensor {
        signals: Vec<SensorSignal>,
    },
    /// Switchable appliance behind a smart plug or relay.
    Plug {
        load: LoadProfile,
        #[serde(default = "default_true")]
        initially_on: bool,
    },
    /// Space heating with a first-order room model and bang-bang control.
    Thermostat {
        heater_w: f64,
        /// Heat loss coefficient, 1/s.
        k_loss: f64,
        /// Heating rate while the heater runs, °C/s.
        k_heat: f64,
        initial_temp_c: f64,
        setpoint_c: f64,
        #[serde(default = "default_hysteresis")]
        hysteresis_c: f64,
        #[serde(default = "default_true")]
        initially_on: bool,
    },
    /// EV or stationary battery with signed power (negative discharges).
    Battery {
        capacity_wh: f64,
        initial_wh: f64,
        #[serde(default)]
        initial_rate_w: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum FaultKind {
    StuckSensor,
    PhantomLoad { phantom_w: f64 },
    Degradation { rate_per_day: f64 },
}

impl FaultKind {
    pub fn name(&self) -> &'static str {
        match self {
            FaultKind::StuckSensor => "StuckSensor",
            FaultKind::PhantomLoad { .. } => "PhantomLoad",
            FaultKind::Degradation { .. } => "Degradation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActiveFault {
    pub kind: FaultKind,
    pub onset_ms: i64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("{device}: {fault} fault does not apply to this device")]
    InapplicableFault { device: DeviceId, fault: &'static str },
    #[error("command rejected: {0}")]
    UnsupportedAction(#[from] CommandError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceState {
    pub descriptor: DeviceDescriptor,
    pub behavior: Behavior,
    /// Start of the next tick.
    pub clock_ms: i64,
    pub switch_on: bool,
    pub power_w: f64,
    pub energy_wh: f64,
    pub setpoint_c: f64,
    pub indoor_c: f64,
    pub heating: bool,
    pub battery_wh: f64,
    pub battery_capacity_wh: f64,
    pub charge_rate_w: f64,
    pub fault: Option<ActiveFault>,
    /// A repeated switch-off opened the supply relay; isolates phantom draw.
    pub relay_isolated: bool,
    pub next_seq: u64,
    pub pending: Vec<ControlCommand>,
    pub last_emitted: BTreeMap<MetricKind, f64>,
}

impl DeviceState {
    pub fn new(descriptor: DeviceDescriptor, behavior: Behavior, start_ms: i64) -> Self {
        let mut state = Self {
            descriptor,
            behavior,
            clock_ms: start_ms,
            switch_on: false,
            power_w: 0.0,
            energy_wh: 0.0,
            setpoint_c: 0.0,
            indoor_c: 0.0,
            heating: false,
            battery_wh: 0.0,
            battery_capacity_wh: 0.0,
            charge_rate_w: 0.0,
            fault: None,
            relay_isolated: false,
            next_seq: 0,
            pending: Vec::new(),
            last_emitted: BTreeMap::new(),
        };
        match &state.behavior {
            Behavior::Meter { .. } => state.switch_on = true,
            Behavior::Sensor { .. } => {}
            Behavior::Plug { initially_on, .. } => state.switch_on = *initially_on,
            Behavior::Thermostat {
                initial_temp_c,
                setpoint_c,
                initially_on,
                ..
            } => {
                state.switch_on = *initially_on;
                state.indoor_c = *initial_temp_c;
                state.setpoint_c = *setpoint_c;
            }
            Behavior::Battery {
                capacity_wh,
                initial_wh,
                initial_rate_w,
            } => {
                state.switch_on = true;
                state.battery_capacity_wh = *capacity_wh;
                state.battery_wh = initial_wh.clamp(0.0, *capacity_wh);
                state.charge_rate_w = *initial_rate_w;
            }
        }
        state
    }

    pub fn device_id(&self) -> &DeviceId {
        &self.descriptor.device_id
    }

    pub fn is_battery(&self) -> bool {
        matches!(self.behavior, Behavior::Battery { .. })
    }

    /// Devices whose power may be negative report net cumulative energy.
    pub fn is_bidirectional(&self) -> bool {
        match &self.behavior {
            Behavior::Battery { .. } => true,
            Behavior::Meter { load } | Behavior::Plug { load, .. } => match load {
                LoadProfile::Constant { power_w } => *power_w < 0.0,
                LoadProfile::Cycle { on_w, .. } => *on_w < 0.0,
                LoadProfile::Hourly { power_w } => power_w.iter().any(|p| *p < 0.0),
                LoadProfile::Sessions { sessions } => sessions.iter().any(|s| s.power_w < 0.0),
            },
            _ => false,
        }
    }

    fn degradation_factor(&self, t_ms: i64) -> f64 {
        let Some(ActiveFault {
            kind: FaultKind::Degradation { rate_per_day },
            onset_ms,
        }) = self.fault
        else {
            return 1.0;
        };
        let reference = match &self.behavior {
            Behavior::Meter { load } | Behavior::Plug { load, .. } => {
                load.cycle_start(t_ms).unwrap_or(t_ms)
            }
            _ => t_ms,
        };
        let days = (reference - onset_ms).max(0) as f64 / crate::DAY_MS as f64;
        1.0 + rate_per_day * days
    }

    fn phantom_w(&self) -> Option<f64> {
        match self.fault {
            Some(ActiveFault {
                kind: FaultKind::PhantomLoad { phantom_w },
                ..
            }) if !self.switch_on && !self.relay_isolated => Some(phantom_w),
            _ => None,
        }
    }

    /// Power drawn over the tick starting at `t_ms`.
    fn interval_power(&mut self, t_ms: i64, dt_s: u32) -> f64 {
        let factor = self.degradation_factor(t_ms);
        let power = match &self.behavior {
            Behavior::Sensor { .. } => 0.0,
            Behavior::Meter { load } => load.power_at(t_ms) * factor,
            Behavior::Plug { load, .. } => {
                if self.switch_on {
                    load.power_at(t_ms) * factor
                } else {
                    0.0
                }
            }
            Behavior::Thermostat {
                heater_w,
                hysteresis_c,
                ..
            } => {
                if !self.switch_on {
                    self.heating = false;
                } else if self.indoor_c < self.setpoint_c - hysteresis_c {
                    self.heating = true;
                } else if self.indoor_c > self.setpoint_c + hysteresis_c {
                    self.heating = false;
                }
                if self.heating {
                    heater_w * factor
                } else {
                    0.0
                }
            }
            Behavior::Battery { .. } => {
                if !self.switch_on {
                    0.0
                } else {
                    let hours = f64::from(dt_s) / 3600.0;
                    if self.charge_rate_w >= 0.0 {
                        let headroom = (self.battery_capacity_wh - self.battery_wh).max(0.0) / hours;
                        self.charge_rate_w.min(headroom)
                    } else {
                        let available = self.battery_wh.max(0.0) / hours;
                        self.charge_rate_w.max(-available)
                    }
                }
            }
        };
        match self.phantom_w() {
            Some(phantom) if power == 0.0 => phantom,
            _ => power,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub state: DeviceState,
    pub measurements: Vec<Measurement>,
    pub events: Vec<Event>,
}

fn applied_event(state: &DeviceState, cmd: &ControlCommand, t_ms: i64) -> Event {
    Event::new(
        format!("{}-applied-{}", state.device_id(), cmd.command_id),
        EventKind::CommandApplied,
        Severity::Info,
        state.device_id().as_str(),
        t_ms,
    )
    .with("command_id", cmd.command_id.as_str())
    .with("action", serde_json::to_value(cmd.action).unwrap_or_default())
    .with("switch_on", state.switch_on)
}

fn apply_action(state: &mut DeviceState, action: Action) {
    match action {
        Action::SwitchOn => {
            state.switch_on = true;
            state.relay_isolated = false;
        }
        Action::SwitchOff => {
            if !state.switch_on {
                state.relay_isolated = true;
            }
            state.switch_on = false;
        }
        Action::SetSetpointC(c) => state.setpoint_c = c,
        Action::SetChargeRateW(rate) => {
            state.charge_rate_w = rate;
            state.switch_on = true;
        }
    }
}

/// Advances one device by one tick of `dt_s` seconds.
///
/// Measurements are stamped with the end of the tick; one is emitted per
/// exposed metric, in canonical metric order, each with the next sequence
/// number.
pub fn step_device(
    state: &DeviceState,
    dt_s: u32,
    ambient_c: f64,
    ambient_curve: &[f64],
    rng: &mut SimRng,
) -> StepOutput {
    let mut next = state.clone();
    let t_start = state.clock_ms;
    let t_end = t_start + i64::from(dt_s) * 1000;

    let mut events = Vec::new();
    for cmd in core::mem::take(&mut next.pending) {
        apply_action(&mut next, cmd.action);
        events.push(applied_event(&next, &cmd, t_end));
    }

    let power = next.interval_power(t_start, dt_s);
    next.power_w = power;
    let delta_wh = power * f64::from(dt_s) / 3600.0;
    next.energy_wh += delta_wh;
    if next.is_battery() {
        next.battery_wh = (next.battery_wh + delta_wh).clamp(0.0, next.battery_capacity_wh);
    }
    if let Behavior::Thermostat { k_loss, k_heat, .. } = next.behavior {
        let heating = if next.heating { 1.0 } else { 0.0 };
        next.indoor_c += f64::from(dt_s) * (k_loss * (ambient_c - next.indoor_c) + k_heat * heating);
    }
    next.clock_ms = t_end;

    let stuck = matches!(
        next.fault,
        Some(ActiveFault {
            kind: FaultKind::StuckSensor,
            ..
        })
    );
    let metrics: Vec<MetricKind> = next.descriptor.metrics().collect();
    let mut measurements = Vec::with_capacity(metrics.len());
    for metric in metrics {
        let fresh = match metric {
            MetricKind::PowerW => next.power_w,
            MetricKind::EnergyWh => next.energy_wh,
            MetricKind::TemperatureC if matches!(next.behavior, Behavior::Thermostat { .. }) => {
                next.indoor_c
            }
            _ => match &next.behavior {
                Behavior::Sensor { signals } => signals
                    .iter()
                    .find(|s| s.metric == metric)
                    .map(|s| s.sample(t_end, ambient_curve, rng))
                    .unwrap_or(0.0),
                _ => 0.0,
            },
        };
        let value = match (stuck, next.last_emitted.get(&metric)) {
            (true, Some(&last)) => last,
            _ => fresh,
        };
        next.last_emitted.insert(metric, value);
        measurements.push(Measurement {
            device_id: next.descriptor.device_id.clone(),
            metric,
            value,
            timestamp: t_end,
            seq_epoch: next.descriptor.seq_epoch,
            seq: next.next_seq,
        });
        next.next_seq += 1;
    }
    StepOutput {
        state: next,
        measurements,
        events,
    }
}

/// Queues a command for the next tick after validating it against the device.
pub fn apply_command(state: &DeviceState, cmd: &ControlCommand) -> Result<DeviceState, SimError> {
    validate_command(cmd, &state.descriptor)?;
    let mut next = state.clone();
    next.pending.push(cmd.clone());
    Ok(next)
}

/// Warning event logged for a rejected command.
pub fn rejection_event(state: &DeviceState, cmd: &ControlCommand, error: &SimError, t_ms: i64) -> Event {
    Event::new(
        format!("{}-rejected-{}", state.device_id(), cmd.command_id),
        EventKind::SystemAlert,
        Severity::Warning,
        state.device_id().as_str(),
        t_ms,
    )
    .with("error", "UnsupportedAction")
    .with("command_id", cmd.command_id.as_str())
    .with("reason", format!("{error}"))
}

pub fn inject_fault(state: &DeviceState, kind: FaultKind, onset_ms: i64) -> Result<DeviceState, SimError> {
    let d = &state.descriptor;
    let applicable = match kind {
        FaultKind::StuckSensor => d.category == Category::Sensor,
        FaultKind::PhantomLoad { phantom_w } => {
            phantom_w > 0.0
                && d.has_metric(MetricKind::PowerW)
                && d.has_action(crate::model::ActionKind::SwitchOff)
        }
        FaultKind::Degradation { rate_per_day } => {
            rate_per_day.is_finite() && d.has_metric(MetricKind::PowerW) && !state.is_battery()
        }
    };
    if !applicable {
        return Err(SimError::InapplicableFault {
            device: d.device_id.clone(),
            fault: kind.name(),
        });
    }
    let mut next = state.clone();
    next.fault = Some(ActiveFault { kind, onset_ms });
    Ok(next)
}

/// Checks that a behavior is consistent with the descriptor it drives.
pub fn behavior_problems(descriptor: &DeviceDescriptor, behavior: &Behavior) -> Vec<String> {
    use crate::model::ActionKind;
    let mut problems = Vec::new();
    let id = &descriptor.device_id;
    let expected = match behavior {
        Behavior::Meter { .. } => Category::Meter,
        Behavior::Sensor { .. } => Category::Sensor,
        _ => Category::Controller,
    };
    if descriptor.category != expected {
        problems.push(format!("{id}: behavior requires category {expected:?}"));
    }
    match behavior {
        Behavior::Sensor { signals } => {
            for metric in descriptor.metrics() {
                if !signals.iter().any(|s| s.metric == metric) {
                    problems.push(format!("{id}: no signal for exposed metric {metric:?}"));
                }
            }
            for s in signals {
                if s.noise_std < 0.0 || !s.noise_std.is_finite() {
                    problems.push(format!("{id}: negative noise_std"));
                }
            }
        }
        Behavior::Plug { .. } => {
            if !descriptor.has_action(ActionKind::SwitchOff) || !descriptor.has_action(ActionKind::SwitchOn) {
                problems.push(format!("{id}: plug needs SwitchOn and SwitchOff"));
            }
        }
        Behavior::Thermostat {
            k_loss,
            k_heat,
            setpoint_c,
            ..
        } => {
            if !descriptor.has_action(ActionKind::SetSetpointC) {
                problems.push(format!("{id}: thermostat needs SetSetpointC"));
            }
            if *k_loss < 0.0 || *k_heat < 0.0 {
                problems.push(format!("{id}: thermal constants must be non-negative"));
            }
            if !(crate::model::SETPOINT_MIN_C..=crate::model::SETPOINT_MAX_C).contains(setpoint_c) {
                problems.push(format!("{id}: setpoint outside [5, 35]"));
            }
        }
        Behavior::Battery {
            capacity_wh,
            initial_wh,
            initial_rate_w,
        } => {
            if !descriptor.has_action(ActionKind::SetChargeRateW) {
                problems.push(format!("{id}: battery needs SetChargeRateW"));
            }
            if !(*capacity_wh > 0.0) || *initial_wh < 0.0 || initial_wh > capacity_wh {
                problems.push(format!("{id}: need 0 <= initial_wh <= capacity_wh, capacity > 0"));
            }
            if descriptor.max_rate_w.is_some_and(|m| initial_rate_w.abs() > m) {
                problems.push(format!("{id}: initial_rate_w exceeds max_rate_w"));
            }
        }
        Behavior::Meter { .. } => {}
    }
    problems
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ActionKind, Capability, Origin, Protocol};
    use alloc::vec;

    fn descriptor(id: &str, category: Category, caps: &[Capability]) -> DeviceDescriptor {
        DeviceDescriptor {
            device_id: id.into(),
            home_id: "h1".into(),
            room: "r".into(),
            category,
            protocol: Protocol::Mqtt,
            capabilities: caps.iter().copied().collect(),
            seq_epoch: 0,
            max_rate_w: Some(7000.0),
        }
    }

    fn plug(power_w: f64) -> DeviceState {
        DeviceState::new(
            descriptor(
                "plug",
                Category::Controller,
                &[
                    Capability::Metric(MetricKind::PowerW),
                    Capability::Metric(MetricKind::EnergyWh),
                    Capability::Action(ActionKind::SwitchOn),
                    Capability::Action(ActionKind::SwitchOff),
                ],
            ),
            Behavior::Plug {
                load: LoadProfile::Constant { power_w },
                initially_on: true,
            },
            0,
        )
    }

    fn cmd(device: &str, action: Action) -> ControlCommand {
        ControlCommand {
            command_id: "c1".into(),
            device_id: device.into(),
            action,
            origin: Origin::User,
            issued_at: 0,
        }
    }

    fn value(out: &StepOutput, metric: MetricKind) -> f64 {
        out.measurements.iter().find(|m| m.metric == metric).unwrap().value
    }

    fn rng() -> SimRng {
        SimRng::new(42, 0)
    }

    #[test]
    fn energy_of_constant_power() {
        let out = step_device(&plug(1000.0), 1800, 10.0, &[], &mut rng());
        assert_eq!(out.state.energy_wh, 500.0);
        assert_eq!(value(&out, MetricKind::EnergyWh), 500.0);
        assert_eq!(out.measurements[0].timestamp, 1_800_000);
    }

    #[test]
    fn off_plug_reports_zero() {
        let mut state = plug(800.0);
        state.switch_on = false;
        let out = step_device(&state, 10, 10.0, &[], &mut rng());
        assert_eq!(value(&out, MetricKind::PowerW), 0.0);
    }

    #[test]
    fn thermal_step() {
        let state = DeviceState::new(
            descriptor(
                "th",
                Category::Controller,
                &[
                    Capability::Metric(MetricKind::TemperatureC),
                    Capability::Action(ActionKind::SetSetpointC),
                ],
            ),
            Behavior::Thermostat {
                heater_w: 2000.0,
                k_loss: 0.001,
                k_heat: 0.002,
                initial_temp_c: 20.0,
                setpoint_c: 20.0,
                hysteresis_c: 0.5,
                initially_on: false,
            },
            0,
        );
        let out = step_device(&state, 60, 10.0, &[], &mut rng());
        // independent evaluation: 20 + 60 * (0.001 * (10 - 20))
        let expected = 20.0 - 0.6;
        assert!((out.state.indoor_c - expected).abs() < 1e-12);
        assert!((value(&out, MetricKind::TemperatureC) - 19.4).abs() < 1e-12);
    }

    #[test]
    fn thermostat_heats_below_setpoint() {
        let mut state = DeviceState::new(
            descriptor(
                "th",
                Category::Controller,
                &[
                    Capability::Metric(MetricKind::PowerW),
                    Capability::Action(ActionKind::SetSetpointC),
                ],
            ),
            Behavior::Thermostat {
                heater_w: 2000.0,
                k_loss: 0.0,
                k_heat: 0.01,
                initial_temp_c: 18.0,
                setpoint_c: 21.0,
                hysteresis_c: 0.5,
                initially_on: true,
            },
            0,
        );
        let out = step_device(&state, 60, 10.0, &[], &mut rng());
        assert_eq!(value(&out, MetricKind::PowerW), 2000.0);
        assert!((out.state.indoor_c - 18.6).abs() < 1e-12);
        state.indoor_c = 22.0;
        let out = step_device(&state, 60, 10.0, &[], &mut rng());
        assert_eq!(value(&out, MetricKind::PowerW), 0.0);
    }

    #[test]
    fn switch_off_takes_effect_next_tick() {
        let state = apply_command(&plug(800.0), &cmd("plug", Action::SwitchOff)).unwrap();
        assert!(state.switch_on, "not applied before the tick");
        let out = step_device(&state, 10, 10.0, &[], &mut rng());
        assert_eq!(value(&out, MetricKind::PowerW), 0.0);
        assert_eq!(out.events.len(), 1);
        assert_eq!(out.events[0].kind, EventKind::CommandApplied);
    }

    fn ev(battery_wh: f64) -> DeviceState {
        DeviceState::new(
            descriptor(
                "ev",
                Category::Controller,
                &[
                    Capability::Metric(MetricKind::PowerW),
                    Capability::Action(ActionKind::SetChargeRateW),
                ],
            ),
            Behavior::Battery {
                capacity_wh: 60_000.0,
                initial_wh: battery_wh,
                initial_rate_w: 0.0,
            },
            0,
        )
    }

    #[test]
    fn v2g_discharge_is_negative_power() {
        let state = apply_command(&ev(5000.0), &cmd("ev", Action::SetChargeRateW(-3000.0))).unwrap();
        let out = step_device(&state, 10, 10.0, &[], &mut rng());
        assert_eq!(out.state.power_w, -3000.0);
        assert!(out.state.battery_wh < 5000.0);
    }

    #[test]
    fn discharge_stops_at_empty() {
        let state = apply_command(&ev(1.0), &cmd("ev", Action::SetChargeRateW(-3000.0))).unwrap();
        let out = step_device(&state, 10, 10.0, &[], &mut rng());
        // 1 Wh over 10 s is at most 360 W
        assert_eq!(out.state.power_w, -360.0);
        assert_eq!(out.state.battery_wh, 0.0);
        let out = step_device(&out.state, 10, 10.0, &[], &mut rng());
        assert_eq!(out.state.power_w, 0.0);
    }

    fn temperature_sensor() -> DeviceState {
        DeviceState::new(
            descriptor("t1", Category::Sensor, &[Capability::Metric(MetricKind::TemperatureC)]),
            Behavior::Sensor {
                signals: vec![SensorSignal {
                    metric: MetricKind::TemperatureC,
                    signal: SignalShape::Sine {
                        base: 21.0,
                        amplitude: 1.0,
                        period_seconds: 3600,
                        phase_seconds: 0,
                    },
                    noise_std: 0.2,
                }],
            },
            0,
        )
    }

    #[test]
    fn sensor_on_switch_is_unsupported() {
        let err = apply_command(&temperature_sensor(), &cmd("t1", Action::SwitchOn)).unwrap_err();
        assert!(matches!(err, SimError::UnsupportedAction(_)));
        let event = rejection_event(&temperature_sensor(), &cmd("t1", Action::SwitchOn), &err, 0);
        assert_eq!(event.severity, Severity::Warning);
    }

    #[test]
    fn stuck_sensor_repeats_last_value() {
        let mut r = rng();
        let mut state = temperature_sensor();
        state.last_emitted.insert(MetricKind::TemperatureC, 21.5);
        let mut state = inject_fault(&state, FaultKind::StuckSensor, 0).unwrap();
        for _ in 0..100 {
            let out = step_device(&state, 10, 10.0, &[], &mut r);
            assert_eq!(value(&out, MetricKind::TemperatureC), 21.5);
            state = out.state;
        }
    }

    #[test]
    fn phantom_load_while_off() {
        let mut state = plug(800.0);
        state.switch_on = false;
        let state = inject_fault(&state, FaultKind::PhantomLoad { phantom_w: 40.0 }, 0).unwrap();
        let out = step_device(&state, 10, 10.0, &[], &mut rng());
        assert_eq!(value(&out, MetricKind::PowerW), 40.0);
        // a second switch-off isolates the load
        let state = apply_command(&out.state, &cmd("plug", Action::SwitchOff)).unwrap();
        let out = step_device(&state, 10, 10.0, &[], &mut rng());
        assert_eq!(value(&out, MetricKind::PowerW), 0.0);
    }

    #[test]
    fn faults_check_applicability() {
        assert!(inject_fault(&plug(1.0), FaultKind::StuckSensor, 0).is_err());
        assert!(inject_fault(&temperature_sensor(), FaultKind::PhantomLoad { phantom_w: 5.0 }, 0).is_err());
        assert!(inject_fault(&temperature_sensor(), FaultKind::Degradation { rate_per_day: 0.1 }, 0).is_err());
    }

    #[test]
    fn degradation_inflates_cycle_energy() {
        // 1000 W for 30 min per 2 h cycle → 500 Wh per cycle
        let state = DeviceState::new(
            descriptor(
                "pump",
                Category::Controller,
                &[
                    Capability::Metric(MetricKind::PowerW),
                    Capability::Action(ActionKind::SwitchOn),
                    Capability::Action(ActionKind::SwitchOff),
                ],
            ),
            Behavior::Plug {
                load: LoadProfile::Cycle {
                    on_w: 1000.0,
                    on_seconds: 1800,
                    period_seconds: 7200,
                    offset_seconds: 0,
                },
                initially_on: true,
            },
            10 * crate::DAY_MS,
        );
        let mut state = inject_fault(&state, FaultKind::Degradation { rate_per_day: 0.02 }, 0).unwrap();
        let start_energy = state.energy_wh;
        for _ in 0..(7200 / 60) {
            state = step_device(&state, 60, 10.0, &[], &mut rng()).state;
        }
        let cycle = state.energy_wh - start_energy;
        assert!((cycle - 500.0 * (1.0 + 0.02 * 10.0)).abs() < 1e-9, "{cycle}");
    }

    #[test]
    fn sequence_numbers_increment_per_emission() {
        let mut state = plug(100.0);
        let mut seqs = Vec::new();
        for _ in 0..3 {
            let out = step_device(&state, 10, 10.0, &[], &mut rng());
            seqs.extend(out.measurements.iter().map(|m| m.seq));
            state = out.state;
        }
        assert_eq!(seqs, (0..6).collect::<Vec<u64>>());
    }

    #[test]
    fn profiles() {
        let hourly = LoadProfile::Hourly { power_w: (0..24).map(|h| -(h as f64)).collect() };
        assert_eq!(hourly.power_at(13 * crate::HOUR_MS + 5), -13.0);
        let sessions = LoadProfile::Sessions {
            sessions: vec![Session { start_hour: 23.5, duration_seconds: 3600, power_w: 500.0 }],
        };
        assert_eq!(sessions.power_at(23 * crate::HOUR_MS + 40 * 60_000), 500.0);
        assert_eq!(sessions.power_at(crate::DAY_MS + 10 * 60_000), 500.0);
        assert_eq!(sessions.power_at(crate::DAY_MS + 40 * 60_000), 0.0);
        assert_eq!(hourly_curve(&[0.0, 10.0], crate::HOUR_MS / 2), 5.0);
    }

    #[test]
    fn rng_is_reproducible() {
        let a: Vec<f64> = { let mut r = SimRng::new(7, 3); (0..5).map(|_| r.normal()).collect() };
        let b: Vec<f64> = { let mut r = SimRng::new(7, 3); (0..5).map(|_| r.normal()).collect() };
        assert_eq!(a, b);
        let mut r = SimRng::new(7, 4);
        assert_ne!(a[0], r.normal());
    }
}
