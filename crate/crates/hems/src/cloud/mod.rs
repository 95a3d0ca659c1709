//! Cloud service: durable per-home store behind the HTTP API v1.

pub mod api;
pub mod store;

use std::io;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use hems_core::recommend::RecommendConfig;
use hems_core::trend::MaintenanceConfig;
use hems_core::TariffSchedule;

use crate::http::{HttpServer, Request};
use api::Api;
use store::Store;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HomeConfig {
    pub home_id: String,
    /// Bearer token granting access to this home only.
    pub token: String,
    pub tariff: TariffSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudConfig {
    pub bind: String,
    pub data_dir: PathBuf,
    pub homes: Vec<HomeConfig>,
    #[serde(default)]
    pub maintenance: MaintenanceConfig,
    #[serde(default)]
    pub recommend: RecommendConfig,
    /// Power above which an appliance counts as running a cycle.
    #[serde(default = "default_on_threshold")]
    pub cycle_on_threshold_w: f64,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_on_threshold() -> f64 {
    10.0
}

fn default_workers() -> usize {
    4
}

pub struct CloudService {
    api: Arc<Api>,
    server: HttpServer,
}

impl CloudService {
    /// Opens (or replays) the store and starts serving.
    pub fn start(config: CloudConfig) -> io::Result<CloudService> {
        let homes: Vec<String> = config.homes.iter().map(|h| h.home_id.clone()).collect();
        let store = Store::open(&config.data_dir, &homes)?;
        let bind = config.bind.clone();
        let workers = config.workers;
        let api = Arc::new(Api::new(config, store));
        let handler = api.clone();
        let server = HttpServer::start(bind.as_str(), workers, Arc::new(move |r: &Request| handler.handle(r)))?;
        log::info!("cloud listening on {}", server.local_addr());
        Ok(CloudService { api, server })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.server.local_addr()
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.local_addr())
    }

    pub fn api(&self) -> &Api {
        &self.api
    }

    pub fn shutdown(mut self) {
        self.server.shutdown();
    }
}
