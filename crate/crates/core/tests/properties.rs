use std::collections::{BTreeMap, BTreeSet};

use hems_core::aggregate::{aggregate_window, Scope, WindowAggregator};
use hems_core::anomaly::{AnomalyConfig, AnomalyDetector};
use hems_core::calendar::{bucket, Timeframe};
use hems_core::curtail::{plan_curtailment, BatterySnapshot, DeviceSnapshot};
use hems_core::energy::query_energy;
use hems_core::envelope::{decode, encode, Envelope};
use hems_core::flex::{earliest_cost, load_cost, schedule_with_prices, FlexLoad};
use hems_core::model::{
    Capability, Category, DeviceDescriptor, IdSeq, Protocol, TimeWindow,
};
use hems_core::sim::{step_device, Behavior, DeviceState, LoadProfile, SimRng};
use hems_core::trend::least_squares;
use hems_core::{
    Action, ActionKind, ControlCommand, DeviceId, DrSignal, Event, EventKind, Measurement, MetricKind,
    Origin, Severity,
};
use proptest::prelude::*;

const T0: i64 = 1_704_067_200_000;

fn metric() -> impl Strategy<Value = MetricKind> {
    prop::sample::select(MetricKind::ALL.to_vec())
}

fn device_id() -> impl Strategy<Value = DeviceId> {
    "[a-z][a-z0-9_.-]{0,11}".prop_map(DeviceId::new)
}

fn measurement() -> impl Strategy<Value = Measurement> {
    (device_id(), metric(), -1e9f64..1e9, 0i64..4_000_000_000_000, any::<u32>(), any::<u64>()).prop_map(
        |(device_id, metric, value, timestamp, seq_epoch, seq)| Measurement {
            device_id,
            metric,
            value,
            timestamp,
            seq_epoch,
            seq,
        },
    )
}

fn action() -> impl Strategy<Value = Action> {
    prop_oneof![
        Just(Action::SwitchOn),
        Just(Action::SwitchOff),
        (5.0f64..35.0).prop_map(Action::SetSetpointC),
        (-7000.0f64..7000.0).prop_map(Action::SetChargeRateW),
    ]
}

fn envelope() -> impl Strategy<Value = Envelope> {
    prop_oneof![
        measurement().prop_map(Envelope::Measurement),
        (device_id(), action(), 0i64..i64::MAX / 2, "[a-z0-9-]{1,16}").prop_map(|(d, a, t, id)| {
            Envelope::Command(ControlCommand {
                command_id: id,
                device_id: d,
                action: a,
                origin: Origin::Cloud,
                issued_at: t,
            })
        }),
        ("[a-z0-9-]{1,16}", prop::sample::select(EventKind::ALL.to_vec()), 0i64..i64::MAX / 2, -1e6f64..1e6)
            .prop_map(|(id, kind, t, x)| {
                Envelope::Event(Event::new(id, kind, Severity::Critical, "gateway", t).with("x", x).with("note", "ok"))
            }),
    ]
}

proptest! {
    #[test]
    fn envelope_round_trips(e in envelope()) {
        let text = encode(&e);
        prop_assert_eq!(decode(text.as_bytes()).unwrap(), e);
    }

    #[test]
    fn dedup_keys_are_injective_on_identity(a in measurement(), b in measurement()) {
        let same_identity = a.device_id == b.device_id && a.seq_epoch == b.seq_epoch && a.seq == b.seq;
        prop_assert_eq!(a.dedup_key() == b.dedup_key(), same_identity);
    }

    #[test]
    fn duplicated_ingestion_equals_deduplicated_union(
        batch in prop::collection::vec(measurement(), 1..30),
        dupes in prop::collection::vec(0usize..30, 0..60),
    ) {
        let mut replayed = batch.clone();
        for i in dupes {
            replayed.push(batch[i % batch.len()].clone());
        }
        let mut store: BTreeMap<_, Measurement> = BTreeMap::new();
        for m in &replayed {
            store.entry(m.dedup_key()).or_insert_with(|| m.clone());
        }
        let union: BTreeSet<_> = batch.iter().map(|m| m.dedup_key()).collect();
        prop_assert_eq!(store.keys().cloned().collect::<BTreeSet<_>>(), union);
    }
}

fn plug_descriptor(id: &str) -> DeviceDescriptor {
    DeviceDescriptor {
        device_id: id.into(),
        home_id: "h1".into(),
        room: "r".into(),
        category: Category::Controller,
        protocol: Protocol::Http,
        capabilities: [
            Capability::Metric(MetricKind::PowerW),
            Capability::Metric(MetricKind::EnergyWh),
            Capability::Action(ActionKind::SwitchOn),
            Capability::Action(ActionKind::SwitchOff),
        ]
        .into_iter()
        .collect(),
        seq_epoch: 0,
        max_rate_w: None,
    }
}

fn profile() -> impl Strategy<Value = LoadProfile> {
    prop_oneof![
        (0.0f64..5000.0).prop_map(|power_w| LoadProfile::Constant { power_w }),
        (1.0f64..3000.0, 1u32..3600, 3600u32..7200, 0u32..3600).prop_map(|(on_w, on, period, offset)| {
            LoadProfile::Cycle { on_w, on_seconds: on, period_seconds: period, offset_seconds: offset }
        }),
        prop::collection::vec(0.0f64..4000.0, 24).prop_map(|power_w| LoadProfile::Hourly { power_w }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cumulative_energy_is_sum_of_power(load in profile(), dt in prop::sample::select(vec![1u32, 10, 60, 300]), ticks in 1usize..400, toggles in prop::collection::vec(any::<bool>(), 0..10)) {
        let mut state = DeviceState::new(plug_descriptor("p"), Behavior::Plug { load, initially_on: true }, T0);
        let mut rng = SimRng::new(1, 0);
        let mut oracle = 0.0;
        let mut last_energy = 0.0;
        for i in 0..ticks {
            if let Some(on) = toggles.get(i % 37) {
                state.switch_on = *on;
            }
            let out = step_device(&state, dt, 10.0, &[], &mut rng);
            let power = out.measurements.iter().find(|m| m.metric == MetricKind::PowerW).unwrap().value;
            let energy = out.measurements.iter().find(|m| m.metric == MetricKind::EnergyWh).unwrap().value;
            if !out.state.switch_on {
                prop_assert_eq!(power, 0.0);
            }
            oracle += power * f64::from(dt) / 3600.0;
            prop_assert!(energy >= last_energy);
            last_energy = energy;
            state = out.state;
        }
        let tolerance = 1e-9 * oracle.abs().max(1.0);
        prop_assert!((state.energy_wh - oracle).abs() <= tolerance, "{} vs {}", state.energy_wh, oracle);
    }
}

/// Per-device EnergyWh rows with integer readings, several devices.
fn energy_rows() -> impl Strategy<Value = Vec<Measurement>> {
    prop::collection::vec(
        (0usize..3, prop::collection::vec((0i64..40 * 86_400, 0u32..5000), 1..60)),
        1..4,
    )
    .prop_map(|devices| {
        let mut rows = Vec::new();
        for (d, (_, readings)) in devices.into_iter().enumerate() {
            let mut readings = readings;
            readings.sort();
            let mut total = 0.0;
            for (seq, (offset_s, inc)) in readings.into_iter().enumerate() {
                total += f64::from(inc);
                rows.push(Measurement {
                    device_id: DeviceId::new(format!("d{d}")),
                    metric: MetricKind::EnergyWh,
                    value: total,
                    timestamp: T0 + offset_s * 1000,
                    seq_epoch: 0,
                    seq: seq as u64,
                });
            }
        }
        rows
    })
}

/// Bucket energy recomputed from raw rows: for each bucket, the device's last
/// reading inside it minus its last reading strictly before it (or its first
/// reading inside it when nothing precedes).
fn brute_force_bucket(rows: &[Measurement], devices: &[DeviceId], window: TimeWindow) -> Option<(f64, u64)> {
    let mut total = 0.0;
    let mut count = 0;
    let mut any = false;
    for d in devices {
        let mine: Vec<&Measurement> = rows.iter().filter(|m| &m.device_id == d).collect();
        let inside: Vec<&&Measurement> = mine.iter().filter(|m| window.contains(m.timestamp)).collect();
        let Some(last) = inside.iter().max_by_key(|m| (m.timestamp, m.seq)) else {
            continue;
        };
        let first = inside.iter().min_by_key(|m| (m.timestamp, m.seq)).unwrap();
        let before = mine
            .iter()
            .filter(|m| m.timestamp < window.start)
            .max_by_key(|m| (m.timestamp, m.seq))
            .map(|m| m.value)
            .unwrap_or(first.value);
        total += last.value - before;
        count += inside.len() as u64;
        any = true;
    }
    any.then_some((total, count))
}

fn device_ids(rows: &[Measurement]) -> Vec<DeviceId> {
    rows.iter().map(|m| m.device_id.clone()).collect::<BTreeSet<_>>().into_iter().collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn energy_buckets_match_brute_force(rows in energy_rows(), tf in prop::sample::select(Timeframe::ALL.to_vec())) {
        let devices = device_ids(&rows);
        let range = TimeWindow::new(T0 - 400 * 86_400_000, T0 + 400 * 86_400_000);
        let home = query_energy(&rows, &Scope::Home("h1".into()), &devices, tf, range);
        let mut windows: BTreeSet<TimeWindow> = BTreeSet::new();
        for m in &rows {
            windows.insert(bucket(m.timestamp, tf));
        }
        prop_assert_eq!(home.len(), windows.len());
        for record in &home {
            let (energy, count) = brute_force_bucket(&rows, &devices, record.window).unwrap();
            prop_assert!((record.sum - energy).abs() <= 1e-9 * energy.abs().max(1.0));
            prop_assert_eq!(record.sample_count, count);
        }
        for d in &devices {
            for record in query_energy(&rows, &Scope::Device(d.clone()), &devices, tf, range) {
                let (energy, _) = brute_force_bucket(&rows, std::slice::from_ref(d), record.window).unwrap();
                prop_assert_eq!(record.sum, energy);
            }
        }
    }

    #[test]
    fn finer_buckets_sum_exactly_to_coarser(rows in energy_rows()) {
        let devices = device_ids(&rows);
        let scope = Scope::Home("h1".into());
        let all = TimeWindow::new(T0 - 400 * 86_400_000, T0 + 400 * 86_400_000);
        for (fine, coarse) in [
            (Timeframe::Hourly, Timeframe::Daily),
            (Timeframe::Daily, Timeframe::Weekly),
            (Timeframe::Daily, Timeframe::Monthly),
            (Timeframe::Monthly, Timeframe::Yearly),
        ] {
            for outer in query_energy(&rows, &scope, &devices, coarse, all) {
                let inner: f64 = query_energy(&rows, &scope, &devices, fine, outer.window)
                    .iter()
                    .filter(|r| outer.window.start <= r.window.start && r.window.end <= outer.window.end)
                    .map(|r| r.sum)
                    .sum();
                prop_assert_eq!(inner, outer.sum, "{:?} into {:?}", fine, coarse);
            }
        }
    }

    #[test]
    fn streaming_aggregation_matches_batch(rows in energy_rows(), window in prop::sample::select(vec![60u32, 900, 3600])) {
        let mut ordered = rows.clone();
        ordered.sort_by_key(|m| (m.timestamp, m.device_id.clone(), m.seq));
        let batch = aggregate_window(&ordered, window, "h1");
        let mut agg = WindowAggregator::new(window, "h1");
        let mut streamed = Vec::new();
        for m in ordered {
            streamed.extend(agg.push(m));
        }
        streamed.extend(agg.flush());
        prop_assert_eq!(streamed, batch.clone());
        for r in &batch {
            prop_assert!(r.min <= r.mean && r.mean <= r.max);
        }
    }
}

fn snapshots() -> impl Strategy<Value = (Vec<DeviceSnapshot>, BTreeMap<DeviceId, u32>)> {
    prop::collection::vec((0u32..4, 0u32..50, prop::option::weighted(0.2, (1u32..40, 0u32..3))), 0..=10).prop_map(
        |devices| {
            let mut states = Vec::new();
            let mut ranks = BTreeMap::new();
            for (i, (rank, power, battery)) in devices.into_iter().enumerate() {
                let id = DeviceId::new(format!("dev{i}"));
                states.push(DeviceSnapshot {
                    device_id: id.clone(),
                    power_w: f64::from(power) * 100.0,
                    battery: battery.map(|(rate, wh)| BatterySnapshot {
                        max_rate_w: f64::from(rate) * 100.0,
                        battery_wh: f64::from(wh) * 1000.0,
                    }),
                });
                ranks.insert(id, rank);
            }
            (states, ranks)
        },
    )
}

/// Largest reduction any subset of curtailable devices can reach.
fn best_subset_reduction(states: &[DeviceSnapshot], ranks: &BTreeMap<DeviceId, u32>) -> f64 {
    let reductions: Vec<f64> = states
        .iter()
        .filter(|s| ranks[&s.device_id] > 0)
        .map(|s| match s.battery {
            Some(b) => s.power_w + if b.battery_wh > 0.0 { b.max_rate_w } else { 0.0 },
            None => s.power_w,
        })
        .collect();
    let mut best: f64 = 0.0;
    for mask in 0u32..(1 << reductions.len()) {
        let total: f64 = (0..reductions.len()).filter(|i| mask & (1 << i) != 0).map(|i| reductions[i]).sum();
        best = best.max(total);
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn greedy_curtailment_meets_target_when_any_subset_does((states, ranks) in snapshots(), target in 1u32..300) {
        let signal = DrSignal {
            signal_id: "dr".into(),
            target_reduction_w: f64::from(target) * 100.0,
            window: TimeWindow::new(T0, T0 + 3_600_000),
        };
        let plan = plan_curtailment(&signal, &states, &ranks, T0, &mut IdSeq::new("e"));
        let again = plan_curtailment(&signal, &states, &ranks, T0, &mut IdSeq::new("e"));
        prop_assert_eq!(&plan, &again);
        if best_subset_reduction(&states, &ranks) >= signal.target_reduction_w {
            prop_assert!(plan.plan.meets_target());
            prop_assert!(plan.warning.is_none());
        } else {
            prop_assert!(plan.warning.is_some());
        }
        for a in &plan.plan.actions {
            prop_assert!(ranks[&a.device_id] > 0);
        }
    }
}

fn flex_instance() -> impl Strategy<Value = (Vec<FlexLoad>, Vec<f64>)> {
    (1usize..=8, 4usize..=24)
        .prop_flat_map(|(n, slots)| {
            let load = (1u32..=20, 1u32..=4, 0usize..slots, 0usize..slots).prop_map(move |(p, d, a, b)| {
                let d = (d as usize).min(slots);
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                let hi = hi.max(lo + d - 1).min(slots - 1);
                let lo = lo.min(hi + 1 - d);
                FlexLoad {
                    load_id: String::new(),
                    power_w: f64::from(p) * 100.0,
                    duration_slots: d as u32,
                    earliest_slot: lo as u32,
                    latest_slot: hi as u32,
                }
            });
            (
                prop::collection::vec(load, n),
                prop::collection::vec(prop::sample::select(vec![0.08, 0.1, 0.15, 0.2, 0.3, 0.45]), slots),
            )
        })
        .prop_map(|(mut loads, prices)| {
            for (i, l) in loads.iter_mut().enumerate() {
                l.load_id = format!("l{i}");
            }
            (loads, prices)
        })
}

/// Every combination of start slots, with its cost and peak.
fn all_assignments(loads: &[FlexLoad], prices: &[f64], slot_seconds: u32, mut visit: impl FnMut(f64, f64)) {
    fn rec(
        loads: &[FlexLoad],
        prices: &[f64],
        slot_seconds: u32,
        i: usize,
        usage: &mut Vec<f64>,
        cost: f64,
        visit: &mut dyn FnMut(f64, f64),
    ) {
        if i == loads.len() {
            visit(cost, usage.iter().copied().fold(0.0, f64::max));
            return;
        }
        let l = &loads[i];
        for s in l.earliest_slot..=l.latest_slot + 1 - l.duration_slots {
            for k in s..s + l.duration_slots {
                usage[k as usize] += l.power_w;
            }
            rec(loads, prices, slot_seconds, i + 1, usage, cost + load_cost(l, s, prices, slot_seconds), visit);
            for k in s..s + l.duration_slots {
                usage[k as usize] -= l.power_w;
            }
        }
    }
    let mut usage = vec![0.0; prices.len()];
    rec(loads, prices, slot_seconds, 0, &mut usage, 0.0, &mut visit);
}

fn search_space(loads: &[FlexLoad]) -> u64 {
    loads
        .iter()
        .map(|l| u64::from(l.latest_slot + 2 - l.duration_slots - l.earliest_slot))
        .product()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn uncapped_schedule_is_optimal((loads, prices) in flex_instance()) {
        prop_assume!(search_space(&loads) <= 3_000_000);
        let schedule = schedule_with_prices(&loads, &prices, 900, None).unwrap();
        let mut best = f64::INFINITY;
        all_assignments(&loads, &prices, 900, |cost, _| best = best.min(cost));
        prop_assert!((schedule.total_cost - best).abs() <= 1e-9 * best.max(1e-12), "{} vs {}", schedule.total_cost, best);
    }

    #[test]
    fn capped_schedule_is_feasible_and_beats_baseline((loads, prices) in flex_instance(), cap_units in 20u32..60) {
        prop_assume!(search_space(&loads) <= 3_000_000);
        let cap = f64::from(cap_units) * 100.0;
        let mut feasible = false;
        all_assignments(&loads, &prices, 900, |_, peak| feasible |= peak <= cap);
        let result = schedule_with_prices(&loads, &prices, 900, Some(cap));
        if !feasible {
            prop_assert!(result.is_err());
            return Ok(());
        }
        let schedule = result.unwrap();
        prop_assert!(schedule.peak_w <= cap);
        let earliest: Vec<u32> = loads.iter().map(|l| l.earliest_slot).collect();
        let mut usage = vec![0.0; prices.len()];
        for (l, s) in loads.iter().zip(&earliest) {
            for k in *s..s + l.duration_slots {
                usage[k as usize] += l.power_w;
            }
        }
        if usage.iter().all(|u| *u <= cap) {
            prop_assert!(schedule.total_cost <= earliest_cost(&loads, &prices, 900) + 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn least_squares_matches_normal_equations(
        ys in prop::collection::vec(-1e4f64..1e4, 2..40),
        slope in -100.0f64..100.0,
        intercept in -1e4f64..1e4,
        exact in any::<bool>(),
    ) {
        let points: Vec<(f64, f64)> = ys
            .iter()
            .enumerate()
            .map(|(i, y)| (i as f64, if exact { intercept + slope * i as f64 } else { *y }))
            .collect();
        let n = points.len() as f64;
        let sx: f64 = points.iter().map(|p| p.0).sum();
        let sy: f64 = points.iter().map(|p| p.1).sum();
        let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
        let b = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        let a = (sy - b * sx) / n;
        let fit = least_squares(&points).unwrap();
        let scale = points.iter().map(|p| p.1.abs()).fold(1.0, f64::max);
        prop_assert!((fit.slope - b).abs() <= 1e-9 * scale);
        prop_assert!((fit.intercept - a).abs() <= 1e-9 * scale * n);
        if exact {
            prop_assert!((fit.slope - slope).abs() <= 1e-9 * slope.abs().max(scale / n));
        }
    }

    #[test]
    fn stuck_detector_fires_exactly_at_n(
        prefix in prop::collection::vec(15.0f64..25.0, 0..50),
        n in 2usize..60,
        stuck_value in 30.0f64..40.0,
    ) {
        let config = AnomalyConfig { stuck_window: n, zscore_window: 10_000, ..Default::default() };
        let mut detector = AnomalyDetector::new(config, IdSeq::new("a"));
        let sensor = DeviceDescriptor {
            device_id: "t".into(),
            home_id: "h1".into(),
            room: "r".into(),
            category: Category::Sensor,
            protocol: Protocol::Coap,
            capabilities: [Capability::Metric(MetricKind::TemperatureC)].into_iter().collect(),
            seq_epoch: 0,
            max_rate_w: None,
        };
        detector.register(&sensor);
        let mut seq = 0;
        let mut sample = |value: f64| {
            seq += 1;
            detector.observe(&Measurement {
                device_id: "t".into(),
                metric: MetricKind::TemperatureC,
                value,
                timestamp: seq as i64,
                seq_epoch: 0,
                seq,
            })
        };
        // prefix values never equal stuck_value, and consecutive repeats are broken up
        let mut prev = f64::NAN;
        for v in prefix {
            let v = if v == prev { v + 0.5 } else { v };
            prop_assert!(sample(v).is_empty() || n <= 2);
            prev = v;
        }
        for i in 1..=n + 20 {
            let hits = sample(stuck_value);
            prop_assert_eq!(hits.len(), usize::from(i == n), "sample {}", i);
        }
    }
}
