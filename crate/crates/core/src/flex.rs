//! Flexible-load scheduling against a time-of-use tariff.
//!
//! Without a peak cap the loads are independent, so each one takes its
//! cheapest feasible start (earliest on ties) and the result is optimal.
//! With a cap, loads are placed greedily in descending energy order with
//! backtracking; the result is feasible and never costs more than running
//! every load at its earliest start when that baseline respects the cap.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::TariffSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlexLoad {
    pub load_id: String,
    pub power_w: f64,
    pub duration_slots: u32,
    pub earliest_slot: u32,
    /// Last slot the load may occupy.
    pub latest_slot: u32,
}

impl FlexLoad {
    fn last_start(&self) -> u32 {
        self.latest_slot + 1 - self.duration_slots
    }

    fn starts(&self) -> core::ops::RangeInclusive<u32> {
        self.earliest_slot..=self.last_start()
    }

    pub fn energy_wh(&self, slot_seconds: u32) -> f64 {
        self.power_w * f64::from(self.duration_slots) * f64::from(slot_seconds) / 3600.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub load_id: String,
    pub start_slot: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlexSchedule {
    pub assignments: Vec<Assignment>,
    pub slot_seconds: u32,
    pub total_cost: f64,
    pub peak_w: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FlexError {
    #[error("load `{0}` has a window shorter than its duration, no duration, or non-positive power")]
    InvalidLoad(String),
    #[error("load `{0}` cannot be placed under the peak cap")]
    Infeasible(String),
    #[error("slot length must be positive")]
    BadSlot,
}

/// Search budget for the capped placement.
const MAX_NODES: usize = 2_000_000;

/// Per-slot energy price, time-weighted over the tariff hours each slot covers.
pub fn slot_prices(tariff: &TariffSchedule, slot_seconds: u32, slots: usize) -> Vec<f64> {
    let slot_ms = i64::from(slot_seconds) * 1000;
    (0..slots as i64)
        .map(|s| {
            let start = s * slot_ms;
            let end = start + slot_ms;
            let mut t = start;
            let mut weighted = 0.0;
            while t < end {
                let hour_end = (t / crate::HOUR_MS + 1) * crate::HOUR_MS;
                let piece_end = hour_end.min(end);
                weighted += tariff.price_at(t) * (piece_end - t) as f64;
                t = piece_end;
            }
            weighted / slot_ms as f64
        })
        .collect()
}

/// Cost of running `load` from `start`, with prices per kWh.
pub fn load_cost(load: &FlexLoad, start: u32, prices: &[f64], slot_seconds: u32) -> f64 {
    let slot_kwh = load.power_w / 1000.0 * f64::from(slot_seconds) / 3600.0;
    let from = start as usize;
    let to = from + load.duration_slots as usize;
    prices[from..to].iter().map(|p| slot_kwh * p).sum()
}

fn check_loads(loads: &[FlexLoad]) -> Result<usize, FlexError> {
    let mut horizon = 0usize;
    for l in loads {
        let ok = l.duration_slots > 0
            && l.power_w > 0.0
            && l.power_w.is_finite()
            && l.latest_slot >= l.earliest_slot
            && l.latest_slot - l.earliest_slot + 1 >= l.duration_slots;
        if !ok {
            return Err(FlexError::InvalidLoad(l.load_id.clone()));
        }
        horizon = horizon.max(l.latest_slot as usize + 1);
    }
    Ok(horizon)
}

fn profile(loads: &[FlexLoad], starts: &[u32], horizon: usize) -> Vec<f64> {
    let mut usage = vec![0.0; horizon];
    for (l, &s) in loads.iter().zip(starts) {
        for slot in s..s + l.duration_slots {
            usage[slot as usize] += l.power_w;
        }
    }
    usage
}

fn finish(loads: &[FlexLoad], starts: &[u32], prices: &[f64], slot_seconds: u32, horizon: usize) -> FlexSchedule {
    let total_cost = loads
        .iter()
        .zip(starts)
        .map(|(l, &s)| load_cost(l, s, prices, slot_seconds))
        .sum();
    let peak_w = profile(loads, starts, horizon).into_iter().fold(0.0, f64::max);
    FlexSchedule {
        assignments: loads
            .iter()
            .zip(starts)
            .map(|(l, &s)| Assignment {
                load_id: l.load_id.clone(),
                start_slot: s,
            })
            .collect(),
        slot_seconds,
        total_cost,
        peak_w,
    }
}

fn cheapest_start(load: &FlexLoad, prices: &[f64], slot_seconds: u32) -> u32 {
    let mut best = load.earliest_slot;
    let mut best_cost = f64::INFINITY;
    for s in load.starts() {
        let c = load_cost(load, s, prices, slot_seconds);
        if c < best_cost {
            best = s;
            best_cost = c;
        }
    }
    best
}

fn fits(usage: &[f64], load: &FlexLoad, start: u32, cap: f64) -> bool {
    (start..start + load.duration_slots).all(|slot| usage[slot as usize] + load.power_w <= cap)
}

struct CappedSearch<'a> {
    loads: &'a [FlexLoad],
    order: Vec<usize>,
    candidates: Vec<Vec<u32>>,
    cap: f64,
    usage: Vec<f64>,
    starts: Vec<u32>,
    nodes: usize,
    deepest_failure: usize,
}

impl CappedSearch<'_> {
    fn place(&mut self, depth: usize) -> bool {
        if depth == self.order.len() {
            return true;
        }
        let index = self.order[depth];
        let load = &self.loads[index];
        for c in 0..self.candidates[depth].len() {
            self.nodes += 1;
            if self.nodes > MAX_NODES {
                return false;
            }
            let start = self.candidates[depth][c];
            if !fits(&self.usage, load, start, self.cap) {
                continue;
            }
            for slot in start..start + load.duration_slots {
                self.usage[slot as usize] += load.power_w;
            }
            self.starts[index] = start;
            if self.place(depth + 1) {
                return true;
            }
            for slot in start..start + load.duration_slots {
                self.usage[slot as usize] -= load.power_w;
            }
        }
        self.deepest_failure = self.deepest_failure.max(depth);
        false
    }
}

/// Schedules against explicit per-slot prices (currency per kWh).
pub fn schedule_with_prices(
    loads: &[FlexLoad],
    prices: &[f64],
    slot_seconds: u32,
    peak_cap_w: Option<f64>,
) -> Result<FlexSchedule, FlexError> {
    if slot_seconds == 0 {
        return Err(FlexError::BadSlot);
    }
    let horizon = check_loads(loads)?;
    assert!(prices.len() >= horizon, "price vector shorter than the load horizon");

    let unconstrained: Vec<u32> = loads
        .iter()
        .map(|l| cheapest_start(l, prices, slot_seconds))
        .collect();
    let Some(cap) = peak_cap_w else {
        return Ok(finish(loads, &unconstrained, prices, slot_seconds, horizon));
    };
    if let Some(l) = loads.iter().find(|l| l.power_w > cap) {
        return Err(FlexError::Infeasible(l.load_id.clone()));
    }
    if profile(loads, &unconstrained, horizon).iter().all(|&u| u <= cap) {
        return Ok(finish(loads, &unconstrained, prices, slot_seconds, horizon));
    }

    let mut order: Vec<usize> = (0..loads.len()).collect();
    order.sort_by(|&a, &b| {
        let ea = loads[a].power_w * f64::from(loads[a].duration_slots);
        let eb = loads[b].power_w * f64::from(loads[b].duration_slots);
        eb.partial_cmp(&ea)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then_with(|| loads[a].load_id.cmp(&loads[b].load_id))
    });
    let candidates = order
        .iter()
        .map(|&i| {
            let l = &loads[i];
            let mut starts: Vec<u32> = l.starts().collect();
            starts.sort_by(|&a, &b| {
                load_cost(l, a, prices, slot_seconds)
                    .partial_cmp(&load_cost(l, b, prices, slot_seconds))
                    .unwrap_or(core::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            starts
        })
        .collect();
    let mut search = CappedSearch {
        loads,
        order,
        candidates,
        cap,
        usage: vec![0.0; horizon],
        starts: vec![0; loads.len()],
        nodes: 0,
        deepest_failure: 0,
    };
    let earliest: Vec<u32> = loads.iter().map(|l| l.earliest_slot).collect();
    let baseline = finish(loads, &earliest, prices, slot_seconds, horizon);
    let baseline_fits = baseline.peak_w <= cap;
    if !search.place(0) {
        if baseline_fits {
            return Ok(baseline);
        }
        let index = search.order[search.deepest_failure.min(search.order.len() - 1)];
        return Err(FlexError::Infeasible(loads[index].load_id.clone()));
    }
    let greedy = finish(loads, &search.starts, prices, slot_seconds, horizon);
    if baseline_fits && baseline.total_cost < greedy.total_cost {
        return Ok(baseline);
    }
    Ok(greedy)
}

/// Schedules against a tariff; slot 0 starts at midnight UTC.
pub fn schedule_flexible_loads(
    loads: &[FlexLoad],
    tariff: &TariffSchedule,
    slot_seconds: u32,
    peak_cap_w: Option<f64>,
) -> Result<FlexSchedule, FlexError> {
    if slot_seconds == 0 {
        return Err(FlexError::BadSlot);
    }
    let horizon = check_loads(loads)?;
    let prices = slot_prices(tariff, slot_seconds, horizon);
    schedule_with_prices(loads, &prices, slot_seconds, peak_cap_w)
}

/// Cost of running every load at its earliest start.
pub fn earliest_cost(loads: &[FlexLoad], prices: &[f64], slot_seconds: u32) -> f64 {
    loads
        .iter()
        .map(|l| load_cost(l, l.earliest_slot, prices, slot_seconds))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TariffBand;
    use alloc::string::ToString;

    fn load(id: &str, power_w: f64, duration: u32, earliest: u32, latest: u32) -> FlexLoad {
        FlexLoad {
            load_id: id.to_string(),
            power_w,
            duration_slots: duration,
            earliest_slot: earliest,
            latest_slot: latest,
        }
    }

    #[test]
    fn cheapest_start_in_valley() {
        let prices = [5.0, 5.0, 1.0, 1.0, 5.0, 5.0];
        let s = schedule_with_prices(&[load("wm", 2000.0, 2, 0, 5)], &prices, 3600, None).unwrap();
        assert_eq!(s.assignments[0].start_slot, 2);
        assert_eq!(s.total_cost, 2.0 * 2.0 * 1.0);
        assert_eq!(s.peak_w, 2000.0);
    }

    #[test]
    fn zero_loads() {
        let s = schedule_with_prices(&[], &[], 3600, None).unwrap();
        assert!(s.assignments.is_empty());
        assert_eq!(s.total_cost, 0.0);
        let capped = schedule_with_prices(&[], &[], 3600, Some(1000.0)).unwrap();
        assert_eq!(capped.total_cost, 0.0);
    }

    #[test]
    fn ties_prefer_earliest() {
        let prices = [1.0; 6];
        let s = schedule_with_prices(&[load("a", 1000.0, 2, 1, 5)], &prices, 3600, None).unwrap();
        assert_eq!(s.assignments[0].start_slot, 1);
    }

    #[test]
    fn cap_spreads_loads() {
        let prices = [5.0, 5.0, 1.0, 1.0, 5.0, 5.0];
        let loads = [load("a", 2000.0, 2, 0, 5), load("b", 2000.0, 2, 0, 5)];
        let s = schedule_with_prices(&loads, &prices, 3600, Some(2500.0)).unwrap();
        assert!(s.peak_w <= 2500.0);
        let starts: Vec<u32> = s.assignments.iter().map(|a| a.start_slot).collect();
        assert_ne!(starts[0], starts[1]);
        assert!(s.total_cost <= earliest_cost(&loads, &prices, 3600));
    }

    #[test]
    fn infeasible_under_cap() {
        let prices = [1.0; 3];
        let loads = [load("a", 2000.0, 2, 0, 2), load("b", 2000.0, 2, 0, 2)];
        assert!(matches!(
            schedule_with_prices(&loads, &prices, 3600, Some(3000.0)),
            Err(FlexError::Infeasible(_))
        ));
        assert_eq!(
            schedule_with_prices(&[load("big", 5000.0, 1, 0, 2)], &prices, 3600, Some(3000.0)),
            Err(FlexError::Infeasible("big".into()))
        );
    }

    #[test]
    fn invalid_window() {
        assert_eq!(
            schedule_with_prices(&[load("x", 1.0, 3, 0, 1)], &[1.0; 4], 3600, None),
            Err(FlexError::InvalidLoad("x".into()))
        );
    }

    #[test]
    fn tariff_slot_prices() {
        let tariff = TariffSchedule {
            bands: alloc::vec![
                TariffBand { start_hour: 0, end_hour: 6, price_per_kwh: 0.1 },
                TariffBand { start_hour: 6, end_hour: 24, price_per_kwh: 0.3 },
            ],
            peak_windows: Vec::new(),
        };
        let quarter = slot_prices(&tariff, 900, 28);
        assert_eq!(quarter[0], 0.1);
        assert_eq!(quarter[24], 0.3);
        let two_hour = slot_prices(&tariff, 7200, 4);
        assert_eq!(two_hour[2], 0.1);
        assert!((two_hour[3] - 0.3).abs() < 1e-12);
        let s = schedule_flexible_loads(&[load("ev", 7000.0, 3, 4, 30)], &tariff, 3600, None).unwrap();
        assert_eq!(s.assignments[0].start_slot, 24, "wraps to the next night");
    }
}
