//! Deterministic simulator for a multi-rover exploration system: mesh
//! networking with relays and outages, per-rover occupancy mapping, map
//! merging on a lander, and a single-operator ground station.

pub mod comms;
pub mod geometry;
pub mod ground_station;
pub mod kernel;
pub mod mapping;
pub mod meshnet;
pub mod navigation;
mod raster;
pub mod rover;
pub mod scenario;
pub mod world;
