//! Streaming fault detectors run at the edge.
//!
//! Three rules: a sensor repeating the exact same value N times, power drawn
//! while the device's last known switch state is off, and a rolling z-score
//! outlier. Stuck and outlier checks apply to temperature and humidity
//! sensors only. Each detector latches after firing and re-arms once its
//! condition clears.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::{
    Category, DeviceDescriptor, DeviceId, Event, EventKind, IdSeq, Measurement, MetricKind, Severity,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnomalyConfig {
    pub stuck_window: usize,
    pub phantom_threshold_w: f64,
    pub zscore_window: usize,
    pub zscore_limit: f64,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        Self {
            stuck_window: 30,
            phantom_threshold_w: 5.0,
            zscore_window: 120,
            zscore_limit: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Detector {
    StuckSensor,
    PhantomLoad,
    Outlier,
}

impl Detector {
    pub fn name(self) -> &'static str {
        match self {
            Detector::StuckSensor => "StuckSensor",
            Detector::PhantomLoad => "PhantomLoad",
            Detector::Outlier => "Outlier",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Detector::StuckSensor, Detector::PhantomLoad, Detector::Outlier]
            .into_iter()
            .find(|d| d.name() == s)
    }
}

fn watched(category: Category, metric: MetricKind) -> bool {
    category == Category::Sensor && matches!(metric, MetricKind::TemperatureC | MetricKind::HumidityPct)
}

#[derive(Debug, Clone, Default)]
struct StuckRun {
    value: f64,
    count: usize,
    since: i64,
    fired: bool,
}

#[derive(Debug, Clone, Default)]
struct Rolling {
    values: VecDeque<f64>,
    since: VecDeque<i64>,
    fired: bool,
}

#[derive(Debug, Clone, Default)]
struct PhantomState {
    since: Option<i64>,
    fired: bool,
}

#[derive(Debug, Clone)]
pub struct AnomalyDetector {
    config: AnomalyConfig,
    ids: IdSeq,
    categories: BTreeMap<DeviceId, Category>,
    switch_on: BTreeMap<DeviceId, bool>,
    stuck: BTreeMap<(DeviceId, MetricKind), StuckRun>,
    rolling: BTreeMap<(DeviceId, MetricKind), Rolling>,
    phantom: BTreeMap<DeviceId, PhantomState>,
}

impl AnomalyDetector {
    pub fn new(config: AnomalyConfig, ids: IdSeq) -> Self {
        Self {
            config,
            ids,
            categories: BTreeMap::new(),
            switch_on: BTreeMap::new(),
            stuck: BTreeMap::new(),
            rolling: BTreeMap::new(),
            phantom: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AnomalyConfig {
        &self.config
    }

    pub fn set_config(&mut self, config: AnomalyConfig) {
        self.config = config;
    }

    pub fn register(&mut self, descriptor: &DeviceDescriptor) {
        self.categories.insert(descriptor.device_id.clone(), descriptor.category);
    }

    /// Records the latest known switch state of a controller.
    pub fn observe_switch(&mut self, device: &DeviceId, on: bool) {
        self.switch_on.insert(device.clone(), on);
        if on {
            self.phantom.remove(device);
        }
    }

    /// Picks switch state out of a `CommandApplied` event; ignores others.
    pub fn observe_event(&mut self, event: &Event) {
        if event.kind != EventKind::CommandApplied {
            return;
        }
        if let Some(on) = event.payload.get("switch_on").and_then(|v| v.as_bool()) {
            self.observe_switch(&DeviceId::new(event.source.clone()), on);
        }
    }

    pub fn switch_state(&self, device: &DeviceId) -> Option<bool> {
        self.switch_on.get(device).copied()
    }

    fn event(&mut self, detector: Detector, m: &Measurement, since: i64) -> Event {
        Event::new(
            self.ids.next_id(),
            EventKind::Anomaly,
            Severity::Warning,
            m.device_id.as_str(),
            m.timestamp,
        )
        .with("detector", detector.name())
        .with("device_id", m.device_id.as_str())
        .with("metric", m.metric.token())
        .with("value", m.value)
        .with("window_start", since)
        .with("window_end", m.timestamp)
    }

    /// Feeds one measurement; returns any anomalies it triggers.
    pub fn observe(&mut self, m: &Measurement) -> Vec<Event> {
        let mut out = Vec::new();
        let category = self.categories.get(&m.device_id).copied();
        if m.metric == MetricKind::PowerW {
            if let Some(e) = self.check_phantom(m) {
                out.push(e);
            }
        }
        if category.is_some_and(|c| watched(c, m.metric)) {
            if let Some(e) = self.check_stuck(m) {
                out.push(e);
            }
            if let Some(e) = self.check_outlier(m) {
                out.push(e);
            }
        }
        out
    }

    fn check_phantom(&mut self, m: &Measurement) -> Option<Event> {
        let off = self.switch_on.get(&m.device_id) == Some(&false);
        let qualifies = off && m.value > self.config.phantom_threshold_w;
        let state = self.phantom.entry(m.device_id.clone()).or_default();
        if !qualifies {
            *state = PhantomState::default();
            return None;
        }
        let since = *state.since.get_or_insert(m.timestamp);
        if state.fired {
            return None;
        }
        state.fired = true;
        Some(self.event(Detector::PhantomLoad, m, since))
    }

    fn check_stuck(&mut self, m: &Measurement) -> Option<Event> {
        let n = self.config.stuck_window.max(1);
        let run = self.stuck.entry((m.device_id.clone(), m.metric)).or_default();
        if run.count > 0 && run.value == m.value {
            run.count += 1;
        } else {
            *run = StuckRun {
                value: m.value,
                count: 1,
                since: m.timestamp,
                fired: false,
            };
        }
        if run.count >= n && !run.fired {
            run.fired = true;
            let since = run.since;
            return Some(self.event(Detector::StuckSensor, m, since));
        }
        None
    }

    fn check_outlier(&mut self, m: &Measurement) -> Option<Event> {
        let n = self.config.zscore_window.max(2);
        let limit = self.config.zscore_limit;
        let window = self.rolling.entry((m.device_id.clone(), m.metric)).or_default();
        let mut hit = None;
        if window.values.len() == n {
            let (lo, hi) = window
                .values
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
            if lo < hi {
                let mean = window.values.iter().sum::<f64>() / n as f64;
                let var = window.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let sigma = libm::sqrt(var);
                let z = if sigma > 0.0 { (m.value - mean) / sigma } else { 0.0 };
                if libm::fabs(z) > limit {
                    if !window.fired {
                        window.fired = true;
                        hit = Some((window.since[0], z));
                    }
                } else {
                    window.fired = false;
                }
            }
        }
        window.values.push_back(m.value);
        window.since.push_back(m.timestamp);
        while window.values.len() > n {
            window.values.pop_front();
            window.since.pop_front();
        }
        let (since, z) = hit?;
        Some(self.event(Detector::Outlier, m, since).with("zscore", z))
    }
}

/// Batch form of the detector.
///
/// Measurements and `CommandApplied` events are merged by timestamp, events
/// first, measurements then ordered by device and sequence.
pub fn detect_anomalies(
    measurements: &[Measurement],
    events: &[Event],
    descriptors: &[DeviceDescriptor],
    initial_switch: &BTreeMap<DeviceId, bool>,
    config: AnomalyConfig,
) -> Vec<Event> {
    let mut detector = AnomalyDetector::new(config, IdSeq::new("anomaly"));
    for d in descriptors {
        detector.register(d);
    }
    for (device, on) in initial_switch {
        detector.observe_switch(device, *on);
    }
    enum Item<'a> {
        Event(&'a Event),
        Measurement(&'a Measurement),
    }
    let mut items: Vec<(i64, u8, String, u32, u64, Item)> = Vec::new();
    for e in events {
        items.push((e.timestamp, 0, e.source.clone(), 0, 0, Item::Event(e)));
    }
    for m in measurements {
        items.push((m.timestamp, 1, m.device_id.0.clone(), m.seq_epoch, m.seq, Item::Measurement(m)));
    }
    items.sort_by(|a, b| (a.0, a.1, &a.2, a.3, a.4).cmp(&(b.0, b.1, &b.2, b.3, b.4)));
    let mut out = Vec::new();
    for (_, _, _, _, _, item) in items {
        match item {
            Item::Event(e) => detector.observe_event(e),
            Item::Measurement(m) => out.extend(detector.observe(m)),
        }
    }
    out
}
