//! Ground-truth arena: static obstacles, sensor raycasts and coverage scoring.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec2;
use crate::mapping::OccupancyGrid;
use crate::raster;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("arena dimensions and resolution must be positive")]
    BadDimensions,
    #[error("obstacle {index} extends outside the arena")]
    ObstacleOutOfBounds { index: usize },
    #[error("obstacle {index} has a non-positive size")]
    BadObstacle { index: usize },
    #[error("ray origin ({x:.2}, {y:.2}) is outside the arena")]
    OriginOutside { x: f64, y: f64 },
    #[error("ray origin ({x:.2}, {y:.2}) is inside an occupied cell")]
    OriginOccupied { x: f64, y: f64 },
    #[error("resolution mismatch between merged map ({merged}) and ground truth ({truth})")]
    ResolutionMismatch { merged: f64, truth: f64 },
}

fn default_rim() -> f64 {
    0.3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Obstacle {
    Boulder {
        x: f64,
        y: f64,
        radius: f64,
    },
    /// Occupied rim of width `rim_width`; the floor inside stays free.
    Crater {
        x: f64,
        y: f64,
        radius: f64,
        #[serde(default = "default_rim")]
        rim_width: f64,
    },
    /// Axis-aligned box.
    Wall {
        x: f64,
        y: f64,
        half_width: f64,
        half_height: f64,
    },
}

impl Obstacle {
    pub fn center(&self) -> Vec2 {
        match *self {
            Obstacle::Boulder { x, y, .. } | Obstacle::Crater { x, y, .. } | Obstacle::Wall { x, y, .. } => {
                Vec2::new(x, y)
            }
        }
    }

    fn half_extent(&self) -> (f64, f64) {
        match *self {
            Obstacle::Boulder { radius, .. } | Obstacle::Crater { radius, .. } => (radius, radius),
            Obstacle::Wall { half_width, half_height, .. } => (half_width, half_height),
        }
    }

    fn is_valid(&self) -> bool {
        match *self {
            Obstacle::Boulder { radius, .. } => radius > 0.0,
            Obstacle::Crater { radius, rim_width, .. } => radius > 0.0 && rim_width > 0.0,
            Obstacle::Wall { half_width, half_height, .. } => half_width > 0.0 && half_height > 0.0,
        }
    }

    pub fn contains(&self, p: Vec2) -> bool {
        match *self {
            Obstacle::Boulder { x, y, radius } => p.dist(Vec2::new(x, y)) <= radius,
            Obstacle::Crater { x, y, radius, rim_width } => {
                let d = p.dist(Vec2::new(x, y));
                d <= radius && d >= radius - rim_width
            }
            Obstacle::Wall { x, y, half_width, half_height } => {
                (p.x - x).abs() <= half_width && (p.y - y).abs() <= half_height
            }
        }
    }
}

fn default_width() -> f64 {
    50.0
}
fn default_height() -> f64 {
    36.0
}
fn default_resolution() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArenaSpec {
    #[serde(default = "default_width")]
    pub width_m: f64,
    #[serde(default = "default_height")]
    pub height_m: f64,
    #[serde(default = "default_resolution")]
    pub resolution_m: f64,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
}

impl Default for ArenaSpec {
    fn default() -> Self {
        ArenaSpec {
            width_m: default_width(),
            height_m: default_height(),
            resolution_m: default_resolution(),
            obstacles: Vec::new(),
        }
    }
}

impl ArenaSpec {
    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= self.width_m && p.y <= self.height_m
    }
}

/// Rasterized, immutable ground truth. The outermost ring of cells is occupied.
#[derive(Clone, Debug)]
pub struct GroundTruthGrid {
    width: usize,
    height: usize,
    resolution: f64,
    occupied: Vec<bool>,
}

pub fn load_world(spec: &ArenaSpec) -> Result<GroundTruthGrid, WorldError> {
    if !(spec.width_m > 0.0 && spec.height_m > 0.0 && spec.resolution_m > 0.0) {
        return Err(WorldError::BadDimensions);
    }
    for (index, o) in spec.obstacles.iter().enumerate() {
        if !o.is_valid() {
            return Err(WorldError::BadObstacle { index });
        }
        let c = o.center();
        let (hx, hy) = o.half_extent();
        if c.x - hx < 0.0 || c.y - hy < 0.0 || c.x + hx > spec.width_m || c.y + hy > spec.height_m {
            return Err(WorldError::ObstacleOutOfBounds { index });
        }
    }
    let res = spec.resolution_m;
    let width = (spec.width_m / res - 1e-9).ceil() as usize;
    let height = (spec.height_m / res - 1e-9).ceil() as usize;
    let mut occupied = vec![false; width * height];
    for j in 0..height {
        for i in 0..width {
            if i == 0 || j == 0 || i == width - 1 || j == height - 1 {
                occupied[j * width + i] = true;
            }
        }
    }
    for o in &spec.obstacles {
        let c = o.center();
        let (hx, hy) = o.half_extent();
        let i0 = ((c.x - hx) / res).floor().max(0.0) as usize;
        let j0 = ((c.y - hy) / res).floor().max(0.0) as usize;
        let i1 = (((c.x + hx) / res).ceil() as usize).min(width - 1);
        let j1 = (((c.y + hy) / res).ceil() as usize).min(height - 1);
        for j in j0..=j1 {
            for i in i0..=i1 {
                let p = Vec2::new((i as f64 + 0.5) * res, (j as f64 + 0.5) * res);
                if o.contains(p) {
                    occupied[j * width + i] = true;
                }
            }
        }
    }
    Ok(GroundTruthGrid { width, height, resolution: res, occupied })
}

impl GroundTruthGrid {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn is_occupied(&self, i: usize, j: usize) -> bool {
        self.occupied[j * self.width + i]
    }

    pub fn cell_of(&self, p: Vec2) -> Option<(usize, usize)> {
        let (u, v) = (p.x / self.resolution, p.y / self.resolution);
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            return None;
        }
        Some((u as usize, v as usize))
    }

    pub fn cell_center(&self, i: usize, j: usize) -> Vec2 {
        Vec2::new((i as f64 + 0.5) * self.resolution, (j as f64 + 0.5) * self.resolution)
    }

    /// Outside the arena counts as occupied.
    pub fn occupied_at(&self, p: Vec2) -> bool {
        self.cell_of(p).map(|(i, j)| self.is_occupied(i, j)).unwrap_or(true)
    }

    pub fn free_count(&self) -> usize {
        self.occupied.iter().filter(|o| !**o).count()
    }

    /// Distance to the first occupied cell along the ray, or `None` beyond `max_range`.
    pub fn raycast(&self, origin: Vec2, bearing: f64, max_range: f64) -> Result<Option<f64>, WorldError> {
        let Some((oi, oj)) = self.cell_of(origin) else {
            return Err(WorldError::OriginOutside { x: origin.x, y: origin.y });
        };
        if self.is_occupied(oi, oj) {
            return Err(WorldError::OriginOccupied { x: origin.x, y: origin.y });
        }
        let inv = 1.0 / self.resolution;
        let start = (origin.x * inv, origin.y * inv);
        let end = (start.0 + bearing.cos() * max_range * inv, start.1 + bearing.sin() * max_range * inv);
        let mut hit = None;
        raster::traverse(start, end, |i, j, t| {
            if i < 0 || j < 0 || i >= self.width as i64 || j >= self.height as i64 {
                hit = Some(t * self.resolution);
                return false;
            }
            if self.occupied[j as usize * self.width + i as usize] {
                hit = Some(t * self.resolution);
                return false;
            }
            true
        });
        Ok(hit.filter(|d| *d <= max_range))
    }
}

/// Share of ground-truth free cells that the merged map marks as known.
///
/// The merged map must be in the world frame; each free truth cell is
/// looked up at its center.
pub fn coverage_fraction(merged: &OccupancyGrid, truth: &GroundTruthGrid, eps: f64) -> Result<f64, WorldError> {
    if (merged.resolution() - truth.resolution()).abs() > 1e-9 {
        return Err(WorldError::ResolutionMismatch { merged: merged.resolution(), truth: truth.resolution() });
    }
    let mut free = 0usize;
    let mut known = 0usize;
    for j in 0..truth.height {
        for i in 0..truth.width {
            if truth.is_occupied(i, j) {
                continue;
            }
            free += 1;
            if let Some((mi, mj)) = merged.cell_of(truth.cell_center(i, j)) {
                if merged.is_known(mi, mj, eps) {
                    known += 1;
                }
            }
        }
    }
    if free == 0 {
        return Ok(0.0);
    }
    Ok(known as f64 / free as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose2;

    #[test]
    fn default_arena_dimensions() {
        let g = load_world(&ArenaSpec::default()).unwrap();
        assert_eq!((g.width(), g.height()), (500, 360));
    }

    #[test]
    fn empty_arena_interior_is_free() {
        let g = load_world(&ArenaSpec { width_m: 5.0, height_m: 4.0, ..Default::default() }).unwrap();
        for j in 1..g.height() - 1 {
            for i in 1..g.width() - 1 {
                assert!(!g.is_occupied(i, j));
            }
        }
        assert!(g.is_occupied(0, 7) && g.is_occupied(g.width() - 1, 3));
    }

    #[test]
    fn boulder_area_matches_disk() {
        let spec = ArenaSpec { obstacles: vec![Obstacle::Boulder { x: 25.0, y: 18.0, radius: 1.0 }], ..Default::default() };
        let g = load_world(&spec).unwrap();
        let interior = (g.width() - 2) * (g.height() - 2);
        let occupied_inside = interior - g.free_count();
        let expected = std::f64::consts::PI * 100.0;
        assert!((occupied_inside as f64 - expected).abs() / expected < 0.05, "{occupied_inside}");
    }

    #[test]
    fn crater_floor_stays_free() {
        let spec = ArenaSpec {
            obstacles: vec![Obstacle::Crater { x: 10.0, y: 10.0, radius: 2.0, rim_width: 0.3 }],
            ..Default::default()
        };
        let g = load_world(&spec).unwrap();
        assert!(!g.occupied_at(Vec2::new(10.0, 10.0)));
        assert!(g.occupied_at(Vec2::new(11.85, 10.0)));
    }

    #[test]
    fn out_of_bounds_obstacle_is_rejected() {
        let spec = ArenaSpec { obstacles: vec![Obstacle::Boulder { x: 0.5, y: 5.0, radius: 1.0 }], ..Default::default() };
        assert_eq!(load_world(&spec).unwrap_err(), WorldError::ObstacleOutOfBounds { index: 0 });
    }

    #[test]
    fn raycast_cases() {
        let spec = ArenaSpec {
            obstacles: vec![Obstacle::Wall { x: 13.05, y: 18.0, half_width: 0.05, half_height: 3.0 }],
            ..Default::default()
        };
        let g = load_world(&spec).unwrap();
        // Wall face at x = 13.0, origin at x = 10.0.
        let d = g.raycast(Vec2::new(10.0, 18.0), 0.0, 8.0).unwrap().unwrap();
        assert!((d - 3.0).abs() <= 0.1, "{d}");
        assert_eq!(g.raycast(Vec2::new(25.0, 18.0), std::f64::consts::FRAC_PI_2, 8.0).unwrap(), None);
        // Top boundary ring starts at 35.9.
        let d = g.raycast(Vec2::new(25.0, 34.0), std::f64::consts::FRAC_PI_2, 8.0).unwrap().unwrap();
        assert!((d - 2.0).abs() <= 0.1, "{d}");
        assert!(matches!(g.raycast(Vec2::new(13.05, 18.0), 0.0, 8.0), Err(WorldError::OriginOccupied { .. })));
    }

    #[test]
    fn coverage_extremes_and_half() {
        let spec = ArenaSpec { width_m: 4.0, height_m: 4.0, ..Default::default() };
        let truth = load_world(&spec).unwrap();
        let mut merged = OccupancyGrid::new(Pose2::IDENTITY, 0.1, 40, 40);
        assert_eq!(coverage_fraction(&merged, &truth, 0.1).unwrap(), 0.0);
        // Interior is 38x38 free cells; mark the left 19 columns.
        for j in 1..39 {
            for i in 1..20 {
                merged.set(i, j, -1.0);
            }
        }
        assert_eq!(coverage_fraction(&merged, &truth, 0.1).unwrap(), 0.5);
        for j in 0..40 {
            for i in 0..40 {
                merged.set(i, j, -1.0);
            }
        }
        assert_eq!(coverage_fraction(&merged, &truth, 0.1).unwrap(), 1.0);
        let coarse = OccupancyGrid::new(Pose2::IDENTITY, 0.2, 20, 20);
        assert!(coverage_fraction(&coarse, &truth, 0.1).is_err());
    }
}
