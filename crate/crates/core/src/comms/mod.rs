//! Topic-based messaging between rovers, the lander and the ground station.

mod gateway;
mod network;
mod types;

pub use gateway::{GatewayBuffer, GatewayConfig, Overflow, Queued};
pub use network::{
    fragment_count, CommsEvent, CommsFault, CommsOutput, CommsParams, CommsStats, NamespaceEntry, NetEvent, Network,
};
pub use types::*;
