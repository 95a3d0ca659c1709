//! Device simulator, edge gateway and cloud service around `hems-core`.

pub mod buffer;
pub mod cloud;
pub mod coap;
pub mod config;
pub mod device;
pub mod gateway;
pub mod http;
pub mod mqtt;
pub mod runner;
pub mod wire;
