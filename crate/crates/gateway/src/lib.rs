//! HTTP gateway that applies an interruption policy to chat traffic:
//! transforming inbound messages, and interleaving interruptions into
//! streamed generations from an upstream.

pub mod audit;
pub mod config;
pub mod conversations;
pub mod error;
pub mod http;
pub mod metrics;
pub mod mock_server;
pub mod service;
pub mod upstream;
pub mod wire;

pub use config::{ConfigError, GatewayConfig};
pub use error::GatewayError;
pub use http::router;
pub use service::{Gateway, ProxyEvent};
