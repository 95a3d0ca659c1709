//! Calendar-bucketed energy from cumulative `EnergyWh` readings.
//!
//! A bucket's energy is its last reading minus the last reading before the
//! bucket (or its own first reading when the device has no earlier one).
//! Buckets without readings are omitted.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::aggregate::{AggregateRecord, Scope};
use crate::calendar::{self, Timeframe};
use crate::model::{DeviceId, Measurement, MetricKind, TimeWindow};

#[derive(Debug, Clone, Copy, PartialEq)]
struct Bucket {
    window: TimeWindow,
    energy_wh: f64,
    readings: u64,
}

fn device_buckets(readings: &[(i64, f64)], timeframe: Timeframe) -> Vec<Bucket> {
    let mut buckets: Vec<Bucket> = Vec::new();
    let mut previous_last: Option<f64> = None;
    let mut i = 0;
    while i < readings.len() {
        let window = calendar::bucket(readings[i].0, timeframe);
        let first = readings[i].1;
        let mut last = first;
        let mut count = 0;
        while i < readings.len() && window.contains(readings[i].0) {
            last = readings[i].1;
            count += 1;
            i += 1;
        }
        let baseline = previous_last.unwrap_or(first);
        buckets.push(Bucket {
            window,
            energy_wh: last - baseline,
            readings: count,
        });
        previous_last = Some(last);
    }
    buckets
}

fn overlaps(window: &TimeWindow, range: &TimeWindow) -> bool {
    window.start < range.end && window.end > range.start
}

fn record(scope: Scope, bucket: Bucket) -> AggregateRecord {
    let e = bucket.energy_wh;
    AggregateRecord {
        scope,
        metric: MetricKind::EnergyWh,
        window: bucket.window,
        sum: e,
        mean: e,
        min: e,
        max: e,
        sample_count: bucket.readings,
        energy_wh_delta: Some(e),
    }
}

/// Energy series for a device or a whole home.
///
/// `measurements` may contain any metrics and devices; only `EnergyWh`
/// readings of the devices in scope are used (`home_devices` lists the
/// devices of the home). Buckets overlapping `range` are returned in time
/// order. Home buckets are the sum of device buckets, accumulated in device
/// id order.
pub fn query_energy(
    measurements: &[Measurement],
    scope: &Scope,
    home_devices: &[DeviceId],
    timeframe: Timeframe,
    range: TimeWindow,
) -> Vec<AggregateRecord> {
    let mut per_device: BTreeMap<&DeviceId, Vec<(i64, u32, u64, f64)>> = BTreeMap::new();
    for m in measurements.iter().filter(|m| m.metric == MetricKind::EnergyWh) {
        let in_scope = match scope {
            Scope::Device(d) => &m.device_id == d,
            Scope::Home(_) => home_devices.contains(&m.device_id),
        };
        if in_scope {
            per_device
                .entry(&m.device_id)
                .or_default()
                .push((m.timestamp, m.seq_epoch, m.seq, m.value));
        }
    }
    let mut per_bucket: BTreeMap<i64, Bucket> = BTreeMap::new();
    let mut device_series = Vec::new();
    for (_, mut rows) in per_device {
        rows.sort_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)));
        let readings: Vec<(i64, f64)> = rows.iter().map(|r| (r.0, r.3)).collect();
        for b in device_buckets(&readings, timeframe) {
            if !overlaps(&b.window, &range) {
                continue;
            }
            match scope {
                Scope::Device(_) => device_series.push(b),
                Scope::Home(_) => {
                    let slot = per_bucket.entry(b.window.start).or_insert(Bucket {
                        window: b.window,
                        energy_wh: 0.0,
                        readings: 0,
                    });
                    slot.energy_wh += b.energy_wh;
                    slot.readings += b.readings;
                }
            }
        }
    }
    match scope {
        Scope::Device(_) => device_series
            .into_iter()
            .map(|b| record(scope.clone(), b))
            .collect(),
        Scope::Home(_) => per_bucket
            .into_values()
            .map(|b| record(scope.clone(), b))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    const T0: i64 = 1_704_067_200_000;
    const MIN: i64 = 60_000;

    fn e(device: &str, value: f64, ts: i64, seq: u64) -> Measurement {
        Measurement {
            device_id: device.into(),
            metric: MetricKind::EnergyWh,
            value,
            timestamp: ts,
            seq_epoch: 0,
            seq,
        }
    }

    #[test]
    fn hourly_deltas() {
        let rows = vec![e("m", 0.0, T0, 1), e("m", 500.0, T0 + 59 * MIN, 2), e("m", 800.0, T0 + 90 * MIN, 3)];
        let out = query_energy(
            &rows,
            &Scope::Device("m".into()),
            &[],
            Timeframe::Hourly,
            TimeWindow::new(T0, T0 + crate::DAY_MS),
        );
        let values: Vec<f64> = out.iter().map(|r| r.energy_wh_delta.unwrap()).collect();
        assert_eq!(values, vec![500.0, 300.0]);
        assert_eq!(out[1].window.start, T0 + crate::HOUR_MS);
    }

    #[test]
    fn missing_buckets_are_omitted() {
        let rows = vec![e("m", 0.0, T0, 1), e("m", 100.0, T0 + 5 * crate::HOUR_MS, 2)];
        let out = query_energy(
            &rows,
            &Scope::Device("m".into()),
            &[],
            Timeframe::Hourly,
            TimeWindow::new(T0, T0 + crate::DAY_MS),
        );
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].energy_wh_delta, Some(100.0));
        let empty = query_energy(
            &rows,
            &Scope::Device("m".into()),
            &[],
            Timeframe::Hourly,
            TimeWindow::new(T0 + 2 * crate::DAY_MS, T0 + 3 * crate::DAY_MS),
        );
        assert!(empty.is_empty());
    }

    #[test]
    fn home_is_sum_of_devices() {
        let rows = vec![
            e("a", 0.0, T0, 1),
            e("b", 10.0, T0, 1),
            e("a", 40.0, T0 + 30 * MIN, 2),
            e("b", 15.0, T0 + 30 * MIN, 2),
            e("a", 90.0, T0 + 70 * MIN, 3),
        ];
        let devices = vec!["a".into(), "b".into()];
        let range = TimeWindow::new(T0, T0 + crate::DAY_MS);
        let home = query_energy(&rows, &Scope::Home("h1".into()), &devices, Timeframe::Hourly, range);
        let values: Vec<f64> = home.iter().map(|r| r.sum).collect();
        assert_eq!(values, vec![45.0, 50.0]);
    }
}
