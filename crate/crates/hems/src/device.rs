//! Device side of the three transports, used by the simulator.

use std::time::{Duration, Instant};

use hems_core::adapter::{self, RawFrame};
use hems_core::{ControlCommand, DeviceId, Protocol};

use crate::coap::{self, CoapClient};
use crate::gateway::Endpoints;
use crate::http;
use crate::mqtt::{self, ClientOptions, QoS};

#[derive(Debug, thiserror::Error)]
pub enum LinkError {
    #[error("mqtt: {0}")]
    Mqtt(#[from] mqtt::ClientError),
    #[error("coap: {0}")]
    Coap(#[from] coap::CoapError),
    #[error("http: {0}")]
    Http(#[from] http::ClientError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("gateway answered {0}")]
    Status(String),
    #[error("bad command frame: {0}")]
    Command(#[from] adapter::IngestError),
}

/// Credentials devices present to the gateway.
#[derive(Debug, Clone, Default)]
pub struct DeviceAuth {
    pub mqtt: Option<(String, String)>,
    pub http_token: Option<String>,
}

enum Transport {
    Mqtt(mqtt::Client),
    Coap(CoapClient),
    Http(http::Client),
}

/// One device's connection to the gateway.
pub struct DeviceLink {
    pub device_id: DeviceId,
    pub protocol: Protocol,
    home_id: String,
    command_route: String,
    auth: DeviceAuth,
    transport: Transport,
}

impl DeviceLink {
    pub fn connect(
        protocol: Protocol,
        home_id: &str,
        device_id: &DeviceId,
        endpoints: &Endpoints,
        auth: &DeviceAuth,
    ) -> Result<DeviceLink, LinkError> {
        let command_route = adapter::command_route(protocol, home_id, device_id.as_str());
        let transport = open(protocol, home_id, device_id, &command_route, endpoints, auth)?;
        Ok(DeviceLink {
            device_id: device_id.clone(),
            protocol,
            home_id: home_id.to_string(),
            command_route,
            auth: auth.clone(),
            transport,
        })
    }

    /// Replaces the connection, e.g. after the gateway restarted.
    pub fn reconnect(&mut self, endpoints: &Endpoints) -> Result<(), LinkError> {
        self.transport = open(self.protocol, &self.home_id, &self.device_id, &self.command_route, endpoints, &self.auth)?;
        Ok(())
    }

    /// Sends one telemetry or event frame and waits for the transport-level
    /// acknowledgement.
    pub fn send(&self, frame: &RawFrame) -> Result<(), LinkError> {
        match &self.transport {
            Transport::Mqtt(c) => c.publish(&frame.route, &frame.payload, QoS::AtLeastOnce)?,
            Transport::Coap(c) => {
                let r = c.request(coap::POST, &frame.route, None, &frame.payload)?;
                if r.code != coap::CHANGED {
                    return Err(LinkError::Status(format!("CoAP code {:#04x}", r.code)));
                }
            }
            Transport::Http(c) => {
                let r = c.post(&frame.route, &frame.payload)?;
                if r.status != 202 {
                    return Err(LinkError::Status(format!("HTTP {}", r.status)));
                }
            }
        }
        Ok(())
    }

    /// Collects commands addressed to this device: waits up to `timeout` for
    /// at least `expected` of them, then returns whatever arrived.
    pub fn receive(&self, expected: usize, timeout: Duration) -> Result<Vec<ControlCommand>, LinkError> {
        let deadline = Instant::now() + timeout;
        let mut out = Vec::new();
        loop {
            match &self.transport {
                Transport::Mqtt(c) => {
                    let next = if out.len() < expected {
                        c.messages().recv_deadline(deadline).ok()
                    } else {
                        c.messages().try_recv().ok()
                    };
                    let Some(msg) = next else { break };
                    out.push(self.decode(&msg.topic, msg.payload)?);
                    continue;
                }
                Transport::Coap(c) => {
                    let r = c.request(coap::GET, &self.command_route, None, &[])?;
                    if r.code == coap::CONTENT && !r.payload.is_empty() {
                        out.push(self.decode(&self.command_route, r.payload)?);
                        continue;
                    }
                }
                Transport::Http(c) => {
                    let r = c.get(&self.command_route)?;
                    match r.status {
                        200 => {
                            out.push(self.decode(&self.command_route, r.body)?);
                            continue;
                        }
                        204 => {}
                        s => return Err(LinkError::Status(format!("HTTP {s}"))),
                    }
                }
            }
            // polling transports: mailbox empty
            if out.len() >= expected || Instant::now() >= deadline {
                break;
            }
            std::thread::sleep(Duration::from_millis(5));
        }
        Ok(out)
    }

    fn decode(&self, route: &str, payload: Vec<u8>) -> Result<ControlCommand, LinkError> {
        Ok(adapter::decode_command(&RawFrame {
            protocol: self.protocol,
            route: route.to_string(),
            payload,
            received_at: 0,
        })?)
    }
}

fn open(
    protocol: Protocol,
    home_id: &str,
    device_id: &DeviceId,
    command_route: &str,
    endpoints: &Endpoints,
    auth: &DeviceAuth,
) -> Result<Transport, LinkError> {
    Ok(match protocol {
        Protocol::Mqtt => {
            let mut opts = ClientOptions::new(format!("{home_id}-{device_id}"));
            if let Some((u, p)) = &auth.mqtt {
                opts = opts.credentials(u.clone(), p.clone());
            }
            let client = mqtt::Client::connect(endpoints.mqtt, opts)?;
            client.subscribe(command_route, QoS::AtLeastOnce)?;
            Transport::Mqtt(client)
        }
        Protocol::Coap => Transport::Coap(CoapClient::new(endpoints.coap, coap::ClientConfig::default())?),
        Protocol::Http => Transport::Http(http::Client::new(
            format!("http://{}", endpoints.http),
            auth.http_token.clone(),
            Duration::from_secs(10),
        )),
    })
}
