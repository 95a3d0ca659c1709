//! MQTT 3.1.1 subset: CONNECT with credentials, SUBSCRIBE with wildcards,
//! PUBLISH at QoS 0 and 1.

pub mod broker;
pub mod client;
pub mod codec;

pub use broker::{Broker, BrokerConfig};
pub use client::{Client, ClientError, ClientOptions, Message};
pub use codec::QoS;
