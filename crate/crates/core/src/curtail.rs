//! Greedy demand-response curtailment planning.
//!
//! Curtailable devices (rank > 0, positive possible reduction) are taken in
//! ascending rank, ties broken by larger current power and then by device id,
//! until the accumulated reduction meets the target. Batteries contribute by
//! switching from their current rate to full discharge.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::model::{
    Action, ControlCommand, DeviceId, DrSignal, Event, EventKind, IdSeq, Origin, Severity,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatterySnapshot {
    pub max_rate_w: f64,
    pub battery_wh: f64,
}

/// Live state of one device at planning time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSnapshot {
    pub device_id: DeviceId,
    pub power_w: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub battery: Option<BatterySnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurtailAction {
    pub device_id: DeviceId,
    pub command: ControlCommand,
    pub expected_reduction_w: f64,
    /// Action that undoes the curtailment at `restore_at`.
    pub restore: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurtailmentPlan {
    pub signal_id: String,
    pub actions: Vec<CurtailAction>,
    pub achieved_reduction_w: f64,
    pub target_reduction_w: f64,
    pub restore_at: i64,
}

impl CurtailmentPlan {
    pub fn meets_target(&self) -> bool {
        self.achieved_reduction_w >= self.target_reduction_w
    }
}

struct Candidate<'a> {
    snapshot: &'a DeviceSnapshot,
    rank: u32,
    reduction_w: f64,
    action: Action,
    restore: Action,
}

fn candidate<'a>(snapshot: &'a DeviceSnapshot, rank: u32) -> Option<Candidate<'a>> {
    if rank == 0 {
        return None;
    }
    let (reduction_w, action, restore) = match snapshot.battery {
        Some(b) => {
            let discharge = if b.battery_wh > 0.0 { b.max_rate_w.max(0.0) } else { 0.0 };
            (
                snapshot.power_w + discharge,
                Action::SetChargeRateW(-discharge),
                Action::SetChargeRateW(snapshot.power_w),
            )
        }
        None => (snapshot.power_w, Action::SwitchOff, Action::SwitchOn),
    };
    (reduction_w > 0.0).then_some(Candidate {
        snapshot,
        rank,
        reduction_w,
        action,
        restore,
    })
}

/// Possible reduction of every curtailable device, in greedy order.
pub fn curtailable(
    states: &[DeviceSnapshot],
    priorities: &BTreeMap<DeviceId, u32>,
) -> Vec<(DeviceId, f64)> {
    ordered_candidates(states, priorities)
        .into_iter()
        .map(|c| (c.snapshot.device_id.clone(), c.reduction_w))
        .collect()
}

fn ordered_candidates<'a>(
    states: &'a [DeviceSnapshot],
    priorities: &BTreeMap<DeviceId, u32>,
) -> Vec<Candidate<'a>> {
    let mut candidates: Vec<Candidate<'a>> = states
        .iter()
        .filter_map(|s| candidate(s, priorities.get(&s.device_id).copied().unwrap_or(0)))
        .collect();
    candidates.sort_by(|a, b| {
        a.rank
            .cmp(&b.rank)
            .then_with(|| {
                b.snapshot
                    .power_w
                    .partial_cmp(&a.snapshot.power_w)
                    .unwrap_or(Ordering::Equal)
            })
            .then_with(|| a.snapshot.device_id.cmp(&b.snapshot.device_id))
    });
    candidates
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurtailmentOutcome {
    pub plan: CurtailmentPlan,
    /// Raised when the target cannot be met with every curtailable device.
    pub warning: Option<Event>,
}

pub fn plan_curtailment(
    signal: &DrSignal,
    states: &[DeviceSnapshot],
    priorities: &BTreeMap<DeviceId, u32>,
    issued_at: i64,
    event_ids: &mut IdSeq,
) -> CurtailmentOutcome {
    let mut actions = Vec::new();
    let mut achieved = 0.0;
    for (index, c) in ordered_candidates(states, priorities).into_iter().enumerate() {
        if achieved >= signal.target_reduction_w {
            break;
        }
        achieved += c.reduction_w;
        actions.push(CurtailAction {
            device_id: c.snapshot.device_id.clone(),
            command: ControlCommand {
                command_id: format!("{}-c{}", signal.signal_id, index + 1),
                device_id: c.snapshot.device_id.clone(),
                action: c.action,
                origin: Origin::Edge,
                issued_at,
            },
            expected_reduction_w: c.reduction_w,
            restore: c.restore,
        });
    }
    let plan = CurtailmentPlan {
        signal_id: signal.signal_id.clone(),
        actions,
        achieved_reduction_w: achieved,
        target_reduction_w: signal.target_reduction_w,
        restore_at: signal.window.end,
    };
    let warning = (!plan.meets_target()).then(|| {
        Event::new(
            event_ids.next_id(),
            EventKind::DrSignal,
            Severity::Warning,
            "dr-planner",
            issued_at,
        )
        .with("signal_id", signal.signal_id.as_str())
        .with("target_w", signal.target_reduction_w)
        .with("achieved_w", achieved)
        .with("reason", "target unreachable with all curtailable devices")
    });
    CurtailmentOutcome { plan, warning }
}
