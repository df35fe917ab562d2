//! Connector node for the servicespace invocation layer: HTTP transport,
//! management API, operator client, a stub classifier, the end-to-end demo
//! and the latency benchmark.

pub mod bench;
pub mod classifier;
pub mod client;
pub mod config;
pub mod demo;
pub mod node;
pub mod transport;

pub use config::NodeConfig;
pub use node::{start, RunningNode};
