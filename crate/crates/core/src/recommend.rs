//! Rule-based efficiency recommendations.
//!
//! Energy is attributed per interval between consecutive readings of a
//! device (cumulative `EnergyWh` when available, otherwise `PowerW` held
//! over the interval) and priced at the tariff band of the interval start.
//! Room occupancy is the latest occupancy reading of a sensor in the same
//! room; rooms without an occupancy sensor never trigger occupancy rules.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::{
    validate_command, Action, ActionKind, ControlCommand, DeviceDescriptor, DeviceId,
    DeviceSettings, Measurement, MetricKind, Origin, TariffSchedule, TimeWindow,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecommendConfig {
    pub min_peak_wh: f64,
    pub unoccupied_minutes: u32,
    pub setback_c: f64,
    /// Fraction of heating energy saved per degree of setback.
    pub pct_per_degree: f64,
}

impl Default for RecommendConfig {
    fn default() -> Self {
        Self {
            min_peak_wh: 500.0,
            unoccupied_minutes: 60,
            setback_c: 2.0,
            pct_per_degree: 0.06,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RecommendationKind {
    ShiftAppliance,
    AdjustSetpoint,
    ReduceLightingHours,
}

impl RecommendationKind {
    fn slug(self) -> &'static str {
        match self {
            RecommendationKind::ShiftAppliance => "shift",
            RecommendationKind::AdjustSetpoint => "setpoint",
            RecommendationKind::ReduceLightingHours => "lighting",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecommendationStatus {
    Proposed,
    Applied,
    Dismissed,
}

/// Move a flexible appliance's runs to the cheapest band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleChange {
    pub device_id: DeviceId,
    pub start_hour: u8,
    pub peak_energy_wh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub recommendation_id: String,
    pub kind: RecommendationKind,
    pub device_id: DeviceId,
    pub rationale: String,
    /// Currency per week.
    pub estimated_savings: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposed_command: Option<ControlCommand>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule_change: Option<ScheduleChange>,
    pub status: RecommendationStatus,
}

/// Energy used by one device between two consecutive readings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub start: i64,
    pub end: i64,
    pub energy_wh: f64,
}

/// Consumption intervals of one device inside `window`.
pub fn device_intervals(measurements: &[Measurement], device: &DeviceId, window: TimeWindow) -> Vec<Interval> {
    let series = |metric: MetricKind| {
        let mut rows: Vec<&Measurement> = measurements
            .iter()
            .filter(|m| &m.device_id == device && m.metric == metric && window.contains(m.timestamp))
            .collect();
        rows.sort_by_key(|m| (m.timestamp, m.seq_epoch, m.seq));
        rows
    };
    let energy = series(MetricKind::EnergyWh);
    if energy.len() >= 2 {
        return energy
            .windows(2)
            .map(|p| Interval {
                start: p[0].timestamp,
                end: p[1].timestamp,
                energy_wh: (p[1].value - p[0].value).max(0.0),
            })
            .collect();
    }
    series(MetricKind::PowerW)
        .windows(2)
        .map(|p| Interval {
            start: p[0].timestamp,
            end: p[1].timestamp,
            // power reported at the end of a tick covers the tick before it
            energy_wh: p[1].value.max(0.0) * (p[1].timestamp - p[0].timestamp) as f64 / 3_600_000.0,
        })
        .collect()
}

/// Occupancy per room as a step function of time.
struct Occupancy {
    rooms: BTreeMap<String, Vec<(i64, bool)>>,
}

impl Occupancy {
    fn new(measurements: &[Measurement], descriptors: &[DeviceDescriptor]) -> Self {
        let room_of: BTreeMap<&DeviceId, &str> =
            descriptors.iter().map(|d| (&d.device_id, d.room.as_str())).collect();
        let mut rooms: BTreeMap<String, Vec<(i64, bool)>> = BTreeMap::new();
        for m in measurements.iter().filter(|m| m.metric == MetricKind::Occupancy) {
            if let Some(room) = room_of.get(&m.device_id) {
                rooms.entry((*room).into()).or_default().push((m.timestamp, m.value >= 0.5));
            }
        }
        for readings in rooms.values_mut() {
            readings.sort_by_key(|r| r.0);
        }
        Self { rooms }
    }

    /// Whether the room is known to be empty at `t`.
    fn empty_at(&self, room: &str, t: i64) -> bool {
        self.unoccupied_since(room, t).is_some()
    }

    /// Start of the unoccupied run covering `t`, if the room is empty then.
    fn unoccupied_since(&self, room: &str, t: i64) -> Option<i64> {
        let readings = self.rooms.get(room)?;
        let idx = readings.partition_point(|r| r.0 <= t);
        if idx == 0 || readings[idx - 1].1 {
            return None;
        }
        let mut start = idx - 1;
        while start > 0 && !readings[start - 1].1 {
            start -= 1;
        }
        Some(readings[start].0)
    }

    /// End of the unoccupied run covering `t`.
    fn unoccupied_until(&self, room: &str, t: i64) -> i64 {
        let Some(readings) = self.rooms.get(room) else {
            return t;
        };
        let idx = readings.partition_point(|r| r.0 <= t);
        readings[idx..]
            .iter()
            .find(|r| r.1)
            .or(readings.last())
            .map_or(t, |r| r.0)
    }
}

fn command(home_id: &str, kind: RecommendationKind, device: &DeviceId, action: Action, at: i64) -> ControlCommand {
    ControlCommand {
        command_id: format!("{home_id}-{}-{device}-cmd", kind.slug()),
        device_id: device.clone(),
        action,
        origin: Origin::Cloud,
        issued_at: at,
    }
}

/// Runs the three rules over `window` (whole days) of home data.
pub fn recommend(
    home_id: &str,
    measurements: &[Measurement],
    descriptors: &[DeviceDescriptor],
    settings: &BTreeMap<DeviceId, DeviceSettings>,
    tariff: &TariffSchedule,
    window: TimeWindow,
    config: &RecommendConfig,
) -> Vec<Recommendation> {
    let days = ((window.end - window.start) as f64 / crate::DAY_MS as f64).max(1.0);
    let weekly = 7.0 / days;
    let cheapest = tariff.cheapest_price();
    let occupancy = Occupancy::new(measurements, descriptors);
    let default_settings = DeviceSettings::default();
    let mut out = Vec::new();

    for d in descriptors {
        let s = settings.get(&d.device_id).unwrap_or(&default_settings);
        let intervals = device_intervals(measurements, &d.device_id, window);
        if intervals.is_empty() {
            continue;
        }
        let id = |kind: RecommendationKind| format!("{home_id}-{}-{}", kind.slug(), d.device_id);

        if s.flexible {
            let peak: Vec<&Interval> = intervals.iter().filter(|i| tariff.is_peak(i.start)).collect();
            let peak_wh: f64 = peak.iter().map(|i| i.energy_wh).sum();
            let savings: f64 = peak
                .iter()
                .map(|i| i.energy_wh / 1000.0 * (tariff.price_at(i.start) - cheapest).max(0.0))
                .sum();
            if peak_wh >= config.min_peak_wh && savings > 0.0 {
                let start_hour = tariff.cheapest_start_hour();
                out.push(Recommendation {
                    recommendation_id: id(RecommendationKind::ShiftAppliance),
                    kind: RecommendationKind::ShiftAppliance,
                    device_id: d.device_id.clone(),
                    rationale: format!(
                        "{:.0} Wh used during peak hours; running from {start_hour:02}:00 costs {cheapest:.2}/kWh",
                        peak_wh
                    ),
                    estimated_savings: savings * weekly,
                    proposed_command: None,
                    schedule_change: Some(ScheduleChange {
                        device_id: d.device_id.clone(),
                        start_hour,
                        peak_energy_wh: peak_wh,
                    }),
                    status: RecommendationStatus::Proposed,
                });
            }
        }

        if d.has_action(ActionKind::SetSetpointC) {
            if let Some(current) = s.setpoint_c {
                let min_ms = i64::from(config.unoccupied_minutes) * 60_000;
                let wasted: Vec<&Interval> = intervals
                    .iter()
                    .filter(|i| i.energy_wh > 0.0)
                    .filter(|i| {
                        occupancy.unoccupied_since(&d.room, i.start).is_some_and(|since| {
                            occupancy.unoccupied_until(&d.room, i.start) - since >= min_ms
                        })
                    })
                    .collect();
                let heating_wh: f64 = wasted.iter().map(|i| i.energy_wh).sum();
                let savings: f64 = wasted
                    .iter()
                    .map(|i| config.pct_per_degree * config.setback_c * i.energy_wh / 1000.0 * tariff.price_at(i.start))
                    .sum();
                let cmd = command(
                    home_id,
                    RecommendationKind::AdjustSetpoint,
                    &d.device_id,
                    Action::SetSetpointC(current - config.setback_c),
                    window.end,
                );
                if savings > 0.0 && validate_command(&cmd, d).is_ok() {
                    out.push(Recommendation {
                        recommendation_id: id(RecommendationKind::AdjustSetpoint),
                        kind: RecommendationKind::AdjustSetpoint,
                        device_id: d.device_id.clone(),
                        rationale: format!(
                            "{heating_wh:.0} Wh of heating while {} was empty; lower setpoint by {:.1} C",
                            d.room, config.setback_c
                        ),
                        estimated_savings: savings * weekly,
                        proposed_command: Some(cmd),
                        schedule_change: None,
                        status: RecommendationStatus::Proposed,
                    });
                }
            }
        }

        if s.lighting {
            let wasted: Vec<&Interval> = intervals
                .iter()
                .filter(|i| i.energy_wh > 0.0 && occupancy.empty_at(&d.room, i.start))
                .collect();
            let lit_wh: f64 = wasted.iter().map(|i| i.energy_wh).sum();
            let savings: f64 = wasted.iter().map(|i| i.energy_wh / 1000.0 * tariff.price_at(i.start)).sum();
            let cmd = command(
                home_id,
                RecommendationKind::ReduceLightingHours,
                &d.device_id,
                Action::SwitchOff,
                window.end,
            );
            if savings > 0.0 && validate_command(&cmd, d).is_ok() {
                out.push(Recommendation {
                    recommendation_id: id(RecommendationKind::ReduceLightingHours),
                    kind: RecommendationKind::ReduceLightingHours,
                    device_id: d.device_id.clone(),
                    rationale: format!("{lit_wh:.0} Wh of lighting in empty {}; switch off when unoccupied", d.room),
                    estimated_savings: savings * weekly,
                    proposed_command: Some(cmd),
                    schedule_change: None,
                    status: RecommendationStatus::Proposed,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Capability, Category, HourWindow, Protocol, TariffBand};
    use alloc::vec;

    const T0: i64 = 1_704_067_200_000;
    const H: i64 = crate::HOUR_MS;

    fn tariff() -> TariffSchedule {
        TariffSchedule {
            bands: vec![
                TariffBand { start_hour: 0, end_hour: 7, price_per_kwh: 0.10 },
                TariffBand { start_hour: 7, end_hour: 17, price_per_kwh: 0.20 },
                TariffBand { start_hour: 17, end_hour: 21, price_per_kwh: 0.40 },
                TariffBand { start_hour: 21, end_hour: 24, price_per_kwh: 0.20 },
            ],
            peak_windows: vec![HourWindow { start_hour: 17, end_hour: 21 }],
        }
    }

    fn descriptor(id: &str, room: &str, category: Category, caps: &[Capability]) -> DeviceDescriptor {
        DeviceDescriptor {
            device_id: id.into(),
            home_id: "h1".into(),
            room: room.into(),
            category,
            protocol: Protocol::Mqtt,
            capabilities: caps.iter().copied().collect(),
            seq_epoch: 0,
            max_rate_w: None,
        }
    }

    fn reading(id: &str, metric: MetricKind, value: f64, ts: i64, seq: u64) -> Measurement {
        Measurement { device_id: id.into(), metric, value, timestamp: ts, seq_epoch: 0, seq }
    }

    fn plug_caps() -> Vec<Capability> {
        vec![
            Capability::Metric(MetricKind::PowerW),
            Capability::Metric(MetricKind::EnergyWh),
            Capability::Action(ActionKind::SwitchOn),
            Capability::Action(ActionKind::SwitchOff),
        ]
    }

    #[test]
    fn washer_in_peak_band() {
        let washer = descriptor("washer", "utility", Category::Controller, &plug_caps());
        let rows = vec![
            reading("washer", MetricKind::EnergyWh, 0.0, T0 + 18 * H, 0),
            reading("washer", MetricKind::EnergyWh, 1000.0, T0 + 19 * H, 1),
        ];
        let settings = [("washer".into(), DeviceSettings { flexible: true, ..Default::default() })]
            .into_iter()
            .collect();
        let day = TimeWindow::new(T0, T0 + crate::DAY_MS);
        let recs = recommend("h1", &rows, &[washer.clone()], &settings, &tariff(), day, &RecommendConfig::default());
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].kind, RecommendationKind::ShiftAppliance);
        // 1 kWh * (0.40 - 0.10) = 0.30 per day of the pattern
        assert!((recs[0].estimated_savings - 0.30 * 7.0).abs() < 1e-12);
        assert_eq!(recs[0].schedule_change.as_ref().unwrap().start_hour, 0);

        let week = TimeWindow::new(T0, T0 + 7 * crate::DAY_MS);
        let recs = recommend("h1", &rows, &[washer], &settings, &tariff(), week, &RecommendConfig::default());
        assert!((recs[0].estimated_savings - 0.30).abs() < 1e-12);
    }

    #[test]
    fn off_peak_and_occupied_gives_nothing() {
        let washer = descriptor("washer", "utility", Category::Controller, &plug_caps());
        let lamp = descriptor("lamp", "living", Category::Controller, &plug_caps());
        let occ = descriptor("occ", "living", Category::Sensor, &[Capability::Metric(MetricKind::Occupancy)]);
        let rows = vec![
            reading("washer", MetricKind::EnergyWh, 0.0, T0 + 2 * H, 0),
            reading("washer", MetricKind::EnergyWh, 1000.0, T0 + 3 * H, 1),
            reading("occ", MetricKind::Occupancy, 1.0, T0, 0),
            reading("lamp", MetricKind::EnergyWh, 0.0, T0 + 2 * H, 0),
            reading("lamp", MetricKind::EnergyWh, 60.0, T0 + 3 * H, 1),
        ];
        let settings = [
            ("washer".into(), DeviceSettings { flexible: true, ..Default::default() }),
            ("lamp".into(), DeviceSettings { lighting: true, ..Default::default() }),
        ]
        .into_iter()
        .collect();
        let recs = recommend(
            "h1",
            &rows,
            &[washer, lamp, occ],
            &settings,
            &tariff(),
            TimeWindow::new(T0, T0 + crate::DAY_MS),
            &RecommendConfig::default(),
        );
        assert!(recs.is_empty());
    }

    #[test]
    fn lighting_in_empty_room() {
        let lamp = descriptor("lamp", "living", Category::Controller, &plug_caps());
        let occ = descriptor("occ", "living", Category::Sensor, &[Capability::Metric(MetricKind::Occupancy)]);
        let rows = vec![
            reading("occ", MetricKind::Occupancy, 0.0, T0, 0),
            reading("lamp", MetricKind::EnergyWh, 0.0, T0 + 8 * H, 0),
            reading("lamp", MetricKind::EnergyWh, 100.0, T0 + 9 * H, 1),
        ];
        let settings = [("lamp".into(), DeviceSettings { lighting: true, ..Default::default() })]
            .into_iter()
            .collect();
        let recs = recommend(
            "h1",
            &rows,
            &[lamp.clone(), occ],
            &settings,
            &tariff(),
            TimeWindow::new(T0, T0 + 7 * crate::DAY_MS),
            &RecommendConfig::default(),
        );
        assert_eq!(recs.len(), 1);
        assert!((recs[0].estimated_savings - 0.1 * 0.20).abs() < 1e-12);
        let cmd = recs[0].proposed_command.as_ref().unwrap();
        assert_eq!(cmd.action, Action::SwitchOff);
        assert!(validate_command(cmd, &lamp).is_ok());
    }

    #[test]
    fn setback_while_empty() {
        let th = descriptor(
            "th",
            "living",
            Category::Controller,
            &[
                Capability::Metric(MetricKind::PowerW),
                Capability::Metric(MetricKind::EnergyWh),
                Capability::Action(ActionKind::SetSetpointC),
            ],
        );
        let occ = descriptor("occ", "living", Category::Sensor, &[Capability::Metric(MetricKind::Occupancy)]);
        let rows = vec![
            reading("occ", MetricKind::Occupancy, 0.0, T0 + 8 * H, 0),
            reading("occ", MetricKind::Occupancy, 1.0, T0 + 12 * H, 1),
            reading("th", MetricKind::EnergyWh, 0.0, T0 + 9 * H, 0),
            reading("th", MetricKind::EnergyWh, 2000.0, T0 + 10 * H, 1),
        ];
        let settings = [("th".into(), DeviceSettings { setpoint_c: Some(21.0), ..Default::default() })]
            .into_iter()
            .collect();
        let recs = recommend(
            "h1",
            &rows,
            &[th, occ],
            &settings,
            &tariff(),
            TimeWindow::new(T0, T0 + 7 * crate::DAY_MS),
            &RecommendConfig::default(),
        );
        assert_eq!(recs.len(), 1);
        // 6 %/C * 2 C * 2 kWh * 0.20
        assert!((recs[0].estimated_savings - 0.048).abs() < 1e-12);
        assert_eq!(recs[0].proposed_command.as_ref().unwrap().action, Action::SetSetpointC(19.0));
    }
}
