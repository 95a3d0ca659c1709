//! Fixed-width window aggregation of canonical measurements.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::{DeviceId, Measurement, MetricKind, TimeWindow};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scope {
    Device(DeviceId),
    Home(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRecord {
    pub scope: Scope,
    pub metric: MetricKind,
    pub window: TimeWindow,
    pub sum: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub sample_count: u64,
    /// Energy consumed in the window; set on `EnergyWh` records only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_wh_delta: Option<f64>,
}

impl AggregateRecord {
    /// Summary statistics of `values`, which must be non-empty.
    pub fn from_values(scope: Scope, metric: MetricKind, window: TimeWindow, values: &[f64]) -> Self {
        let sum: f64 = values.iter().sum();
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let count = values.len().max(1);
        // sum / n may round just outside [min, max] for constant inputs
        let mean = (sum / count as f64).clamp(min, max);
        Self {
            scope,
            metric,
            window,
            sum,
            mean,
            min,
            max,
            sample_count: values.len() as u64,
            energy_wh_delta: None,
        }
    }
}

fn window_of(timestamp: i64, window_ms: i64) -> TimeWindow {
    let start = timestamp.div_euclid(window_ms) * window_ms;
    TimeWindow::new(start, start + window_ms)
}

/// Metrics for which a home-level record is the per-timestamp sum of devices.
fn is_additive(metric: MetricKind) -> bool {
    metric.is_metering()
}

/// Aggregates one window's worth of samples.
///
/// `prior_energy` holds each device's last `EnergyWh` reading before the
/// window; the first reading inside the window is the baseline otherwise.
fn aggregate_group(
    samples: &[&Measurement],
    window: TimeWindow,
    home_id: &str,
    prior_energy: &BTreeMap<DeviceId, f64>,
) -> Vec<AggregateRecord> {
    let mut per_device: BTreeMap<(&DeviceId, MetricKind), Vec<f64>> = BTreeMap::new();
    // home series: metric → timestamp → Σ values
    let mut per_home: BTreeMap<MetricKind, BTreeMap<i64, f64>> = BTreeMap::new();
    for m in samples {
        per_device.entry((&m.device_id, m.metric)).or_default().push(m.value);
        if is_additive(m.metric) {
            *per_home
                .entry(m.metric)
                .or_default()
                .entry(m.timestamp)
                .or_insert(0.0) += m.value;
        }
    }

    let mut records = Vec::with_capacity(per_device.len() + per_home.len());
    let mut home_energy_delta = 0.0;
    for ((device, metric), values) in &per_device {
        let mut record =
            AggregateRecord::from_values(Scope::Device((*device).clone()), *metric, window, values);
        if *metric == MetricKind::EnergyWh {
            let baseline = prior_energy.get(*device).copied().unwrap_or(values[0]);
            let delta = values[values.len() - 1] - baseline;
            home_energy_delta += delta;
            record.energy_wh_delta = Some(delta);
        }
        records.push(record);
    }
    for (metric, series) in per_home {
        let values: Vec<f64> = series.into_values().collect();
        let mut record =
            AggregateRecord::from_values(Scope::Home(home_id.into()), metric, window, &values);
        if metric == MetricKind::EnergyWh {
            record.energy_wh_delta = Some(home_energy_delta);
        }
        records.push(record);
    }
    records
}

/// One record per (scope, metric, window) that holds at least one sample.
///
/// Windows are aligned to multiples of `window_seconds` since the epoch.
/// Home-level records are produced for power and energy only: the samples of
/// all devices sharing a timestamp are summed into one home sample.
pub fn aggregate_window(
    measurements: &[Measurement],
    window_seconds: u32,
    home_id: &str,
) -> Vec<AggregateRecord> {
    let window_ms = i64::from(window_seconds.max(1)) * 1000;
    let mut by_window: BTreeMap<i64, Vec<&Measurement>> = BTreeMap::new();
    for m in measurements {
        by_window
            .entry(window_of(m.timestamp, window_ms).start)
            .or_default()
            .push(m);
    }
    let mut prior_energy = BTreeMap::new();
    let mut records = Vec::new();
    for (start, samples) in by_window {
        let window = TimeWindow::new(start, start + window_ms);
        records.extend(aggregate_group(&samples, window, home_id, &prior_energy));
        for m in samples.iter().filter(|m| m.metric == MetricKind::EnergyWh) {
            prior_energy.insert(m.device_id.clone(), m.value);
        }
    }
    records
}

/// Incremental form of [`aggregate_window`] for an ordered stream.
///
/// Samples are buffered until a sample from a later window arrives; the
/// closed window is then summarized and returned.
#[derive(Debug, Clone)]
pub struct WindowAggregator {
    window_ms: i64,
    home_id: String,
    current: Option<TimeWindow>,
    pending: Vec<Measurement>,
    prior_energy: BTreeMap<DeviceId, f64>,
}

impl WindowAggregator {
    pub fn new(window_seconds: u32, home_id: impl Into<String>) -> Self {
        Self {
            window_ms: i64::from(window_seconds.max(1)) * 1000,
            home_id: home_id.into(),
            current: None,
            pending: Vec::new(),
            prior_energy: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, m: Measurement) -> Vec<AggregateRecord> {
        let window = window_of(m.timestamp, self.window_ms);
        let mut closed = Vec::new();
        match self.current {
            Some(current) if window.start > current.start => {
                closed = self.close();
                self.current = Some(window);
            }
            None => self.current = Some(window),
            // late samples are folded into the open window
            _ => {}
        }
        self.pending.push(m);
        closed
    }

    /// Closes the open window, if any.
    pub fn flush(&mut self) -> Vec<AggregateRecord> {
        let records = self.close();
        self.current = None;
        records
    }

    fn close(&mut self) -> Vec<AggregateRecord> {
        let Some(window) = self.current else {
            return Vec::new();
        };
        let samples: Vec<&Measurement> = self.pending.iter().collect();
        let records = aggregate_group(&samples, window, &self.home_id, &self.prior_energy);
        for m in self.pending.drain(..) {
            if m.metric == MetricKind::EnergyWh {
                self.prior_energy.insert(m.device_id, m.value);
            }
        }
        records
    }
}
