//! Linear trend fitting for predictive maintenance.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::calendar::day_index;
use crate::model::{DeviceId, Measurement, MetricKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Coefficient of determination; 1 for an exact line, 0 when undefined.
    pub r_squared: f64,
}

impl LinearFit {
    pub fn at(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

/// Ordinary least squares over `(x, y)` points.
///
/// Returns `None` for fewer than two points or when every `x` is equal.
pub fn least_squares(points: &[(f64, f64)]) -> Option<LinearFit> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for &(x, y) in points {
        let dx = x - mean_x;
        let dy = y - mean_y;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let r_squared = if syy == 0.0 { 0.0 } else { (sxy * sxy) / (sxx * syy) };
    Some(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Indicator {
    EnergyPerCycleTrend,
    BaselinePowerTrend,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaintenanceConfig {
    pub min_points: usize,
    /// Alert when slope exceeds this fraction of the intercept per day.
    pub slope_threshold_frac_per_day: f64,
    /// Breach level as a fraction above the intercept.
    pub breach_margin: f64,
}

impl Default for MaintenanceConfig {
    fn default() -> Self {
        Self {
            min_points: 7,
            slope_threshold_frac_per_day: 0.01,
            breach_margin: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaintenanceAlert {
    pub device_id: DeviceId,
    pub indicator: Indicator,
    /// Indicator units per day.
    pub slope: f64,
    pub intercept: f64,
    /// Day (same origin as the input points) at which the fit crosses the breach level.
    pub projected_breach_day: f64,
    pub projected_breach_date_ms: i64,
    pub confidence: String,
}

/// Fits the indicator history and raises an alert on a steep upward trend.
///
/// `points` are `(day, value)` with day 0 at `origin_ms`.
pub fn analyze_maintenance(
    device_id: &DeviceId,
    indicator: Indicator,
    points: &[(f64, f64)],
    origin_ms: i64,
    config: &MaintenanceConfig,
) -> Option<MaintenanceAlert> {
    if points.len() < config.min_points.max(2) {
        return None;
    }
    let fit = least_squares(points)?;
    if !(fit.intercept > 0.0) {
        return None;
    }
    if !(fit.slope > config.slope_threshold_frac_per_day * fit.intercept) {
        return None;
    }
    let breach_level = fit.intercept * (1.0 + config.breach_margin);
    let projected_breach_day = (breach_level - fit.intercept) / fit.slope;
    Some(MaintenanceAlert {
        device_id: device_id.clone(),
        indicator,
        slope: fit.slope,
        intercept: fit.intercept,
        projected_breach_day,
        projected_breach_date_ms: origin_ms + (projected_breach_day * crate::DAY_MS as f64) as i64,
        confidence: format!(
            "n={} r2={:.4} slope={:.2}%/day",
            points.len(),
            fit.r_squared,
            100.0 * fit.slope / fit.intercept
        ),
    })
}

/// Mean energy per operating cycle for each UTC day.
///
/// A cycle starts on a `PowerW` rising edge across `on_threshold_w`. Energy
/// comes from consecutive `EnergyWh` readings, attributed to the day of the
/// interval start. Days without a cycle start are skipped. Returned days are
/// absolute day indices since the epoch.
pub fn daily_energy_per_cycle(samples: &[Measurement], on_threshold_w: f64) -> Vec<(i64, f64)> {
    let mut power: Vec<&Measurement> = samples.iter().filter(|m| m.metric == MetricKind::PowerW).collect();
    let mut energy: Vec<&Measurement> = samples.iter().filter(|m| m.metric == MetricKind::EnergyWh).collect();
    power.sort_by_key(|m| (m.timestamp, m.seq_epoch, m.seq));
    energy.sort_by_key(|m| (m.timestamp, m.seq_epoch, m.seq));

    let mut cycles: BTreeMap<i64, u32> = BTreeMap::new();
    let mut was_on = false;
    for m in power {
        let on = m.value > on_threshold_w;
        if on && !was_on {
            *cycles.entry(day_index(m.timestamp)).or_default() += 1;
        }
        was_on = on;
    }
    let mut day_energy: BTreeMap<i64, f64> = BTreeMap::new();
    for pair in energy.windows(2) {
        *day_energy.entry(day_index(pair[0].timestamp)).or_default() += pair[1].value - pair[0].value;
    }
    cycles
        .into_iter()
        .filter(|(_, n)| *n > 0)
        .map(|(day, n)| (day, day_energy.get(&day).copied().unwrap_or(0.0) / f64::from(n)))
        .collect()
}

/// Lowest `PowerW` reading of each UTC day.
pub fn daily_baseline_power(samples: &[Measurement]) -> Vec<(i64, f64)> {
    let mut out: BTreeMap<i64, f64> = BTreeMap::new();
    for m in samples.iter().filter(|m| m.metric == MetricKind::PowerW) {
        let slot = out.entry(day_index(m.timestamp)).or_insert(f64::INFINITY);
        *slot = slot.min(m.value);
    }
    out.into_iter().collect()
}
