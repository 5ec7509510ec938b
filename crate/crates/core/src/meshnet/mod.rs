//! Mesh network layer: distance-based links, airtime routing metrics,
//! on-demand path discovery and frame forwarding with loss and outages.

mod link;
mod mesh;
mod routing;

pub use link::{airtime, airtime_plus, link_quality, update_per, LinkCurve, LinkQuality, LinkState, NetParams};
pub use mesh::{
    Blackout, DropReason, Dest, Frame, LinkSelector, Mesh, MeshError, MeshEvent, MeshOutput, MeshStats, NodeId,
    TrafficClass, WireCategory, WireCounters,
};
pub use routing::{find_loop, flood, Discovery, Edge, RouteEntry, RoutingTable};
