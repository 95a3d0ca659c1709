//! Core of the home energy management stack.
//!
//! Everything in this crate is pure computation over owned values: the
//! canonical data model shared by every layer, the wire envelope, the device
//! physics used by the simulator, and the edge/cloud analytics (aggregation,
//! anomaly detection, demand-response curtailment, flexible-load scheduling,
//! calendar bucketing, trend fitting, recommendations).
//!
//! The crate is `no_std` and only needs `alloc`. Sockets, files and process
//! lifecycle live in the `hems` companion crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod adapter;
pub mod aggregate;
pub mod anomaly;
pub mod calendar;
pub mod curtail;
pub mod energy;
pub mod envelope;
pub mod flex;
pub mod model;
pub mod recommend;
pub mod scenario;
pub mod sim;
pub mod trend;

pub use model::{
    Action, ActionKind, Capability, Category, ControlCommand, DedupKey, DeviceDescriptor,
    DeviceId, DeviceSettings, DrSignal, Event, EventKind, Measurement, MetricKind, Origin,
    Protocol, Severity, TariffSchedule, TimeWindow,
};

/// Milliseconds in one hour.
pub const HOUR_MS: i64 = 3_600_000;
/// Milliseconds in one day.
pub const DAY_MS: i64 = 86_400_000;
