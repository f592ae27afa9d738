//! Secure clustered data collection for simulated IoT sensor fields.
//!
//! Three phases run every round: cluster formation with per-link keys,
//! hop-by-hop encrypted aggregation toward each cluster head, and head
//! authentication to the base station before upload.

pub mod adversary;
pub mod aggregation;
pub mod auth;
pub mod config;
pub mod crypto;
pub mod keys;
pub mod network;
pub mod sim;

pub use config::{parse_config, ScenarioConfig};
pub use network::NodeId;
pub use sim::{run, RunOutput, Simulation};
