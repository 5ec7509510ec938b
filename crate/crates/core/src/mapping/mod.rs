//! Occupancy mapping from scans and lander-side map merging.

mod features;
mod grid;
mod merge;
pub mod wire;

pub use features::{extract_features, FeatureParams, GridFeature};
pub use grid::{classify, CellClass, OccupancyGrid, Scan, CLASS_THRESHOLD, DEFAULT_L_MAX, L_FREE, L_OCC};
pub use merge::{
    estimate_from_features, fit_rigid, match_and_estimate, merge, overlap_ratio, LocalMap, MergeError, MergeParams,
    MergeTransform, MergedMap, Placement,
};
