use serde::{Deserialize, Serialize};

use crate::geometry::{Pose2, Vec2};
use crate::raster;

pub const DEFAULT_L_MAX: f64 = 6.0;
pub const L_FREE: f64 = -0.4;
pub const L_OCC: f64 = 0.85;
/// Log-odds magnitude at which a cell is classified free or occupied.
pub const CLASS_THRESHOLD: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellClass {
    Unknown,
    Free,
    Occupied,
}

pub fn classify(l: f64) -> CellClass {
    if l >= CLASS_THRESHOLD {
        CellClass::Occupied
    } else if l <= -CLASS_THRESHOLD {
        CellClass::Free
    } else {
        CellClass::Unknown
    }
}

/// One range scan in the sensor frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Scan {
    /// Beam bearings relative to the rover heading.
    pub bearings: Vec<f64>,
    /// `None` means no return within `max_range`.
    pub ranges: Vec<Option<f64>>,
    /// Effective censoring range of this scan.
    pub max_range: f64,
}

impl Scan {
    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }
}

/// Log-odds occupancy grid. Cell `(i, j)` spans `[i*res, (i+1)*res) x [j*res, (j+1)*res)`
/// in the grid's own frame, and `origin` places that frame in the map frame.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    origin: Pose2,
    resolution: f64,
    width: usize,
    height: usize,
    cells: Vec<f64>,
    l_max: f64,
}

impl OccupancyGrid {
    pub fn new(origin: Pose2, resolution: f64, width: usize, height: usize) -> Self {
        assert!(resolution > 0.0, "resolution must be positive");
        OccupancyGrid { origin, resolution, width, height, cells: vec![0.0; width * height], l_max: DEFAULT_L_MAX }
    }

    /// Axis-aligned grid covering `[min, max]` in the map frame.
    pub fn covering(min: Vec2, max: Vec2, resolution: f64) -> Self {
        let w = ((max.x - min.x) / resolution).ceil().max(1.0) as usize;
        let h = ((max.y - min.y) / resolution).ceil().max(1.0) as usize;
        OccupancyGrid::new(Pose2::new(min.x, min.y, 0.0), resolution, w, h)
    }

    pub fn with_l_max(mut self, l_max: f64) -> Self {
        self.l_max = l_max;
        self
    }

    pub fn origin(&self) -> Pose2 {
        self.origin
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn l_max(&self) -> f64 {
        self.l_max
    }

    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.width + i
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.cells[self.index(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, l: f64) {
        let idx = self.index(i, j);
        self.cells[idx] = l.clamp(-self.l_max, self.l_max);
    }

    /// Adds `delta` then clamps to `[-l_max, l_max]`.
    pub fn add(&mut self, i: usize, j: usize, delta: f64) {
        let idx = self.index(i, j);
        self.add_at(idx, delta);
    }

    fn add_at(&mut self, idx: usize, delta: f64) {
        let v = self.cells[idx] + delta;
        self.cells[idx] = v.clamp(-self.l_max, self.l_max);
    }

    /// Continuous cell coordinates of a map-frame point.
    pub fn to_cell_coords(&self, p: Vec2) -> (f64, f64) {
        let local = self.origin.inverse().apply(p);
        (local.x / self.resolution, local.y / self.resolution)
    }

    pub fn cell_of(&self, p: Vec2) -> Option<(usize, usize)> {
        let (u, v) = self.to_cell_coords(p);
        let (i, j) = (u.floor(), v.floor());
        if i < 0.0 || j < 0.0 || i >= self.width as f64 || j >= self.height as f64 {
            return None;
        }
        Some((i as usize, j as usize))
    }

    pub fn cell_center(&self, i: usize, j: usize) -> Vec2 {
        let local = Vec2::new((i as f64 + 0.5) * self.resolution, (j as f64 + 0.5) * self.resolution);
        self.origin.apply(local)
    }

    pub fn value_at(&self, p: Vec2) -> f64 {
        self.cell_of(p).map(|(i, j)| self.get(i, j)).unwrap_or(0.0)
    }

    pub fn class(&self, i: usize, j: usize) -> CellClass {
        classify(self.get(i, j))
    }

    pub fn is_known(&self, i: usize, j: usize, eps: f64) -> bool {
        self.get(i, j).abs() > eps
    }

    pub fn known_count(&self, eps: f64) -> usize {
        self.cells.iter().filter(|l| l.abs() > eps).count()
    }

    /// Grows the grid in whole cells so that `p` falls inside with at least
    /// `margin` meters to spare. The cell contents keep their map-frame position.
    pub fn ensure_contains(&mut self, p: Vec2, margin: f64) {
        let (u, v) = self.to_cell_coords(p);
        let m = (margin / self.resolution).ceil();
        let grow_left = if u - m < 0.0 { (m - u).ceil() as usize } else { 0 };
        let grow_down = if v - m < 0.0 { (m - v).ceil() as usize } else { 0 };
        let grow_right = if u + m >= self.width as f64 { (u + m - self.width as f64).ceil() as usize + 1 } else { 0 };
        let grow_up = if v + m >= self.height as f64 { (v + m - self.height as f64).ceil() as usize + 1 } else { 0 };
        if grow_left + grow_down + grow_right + grow_up == 0 {
            return;
        }
        let new_w = self.width + grow_left + grow_right;
        let new_h = self.height + grow_down + grow_up;
        let mut cells = vec![0.0; new_w * new_h];
        for j in 0..self.height {
            let src = &self.cells[j * self.width..(j + 1) * self.width];
            let dst_start = (j + grow_down) * new_w + grow_left;
            cells[dst_start..dst_start + self.width].copy_from_slice(src);
        }
        let shift = Pose2::new(-(grow_left as f64) * self.resolution, -(grow_down as f64) * self.resolution, 0.0);
        self.origin = self.origin.compose(&shift);
        self.width = new_w;
        self.height = new_h;
        self.cells = cells;
    }

    /// Bounding box `(i0, j0, i1, j1)` (inclusive) of cells with `|l| > eps`.
    pub fn known_bounds(&self, eps: f64) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for j in 0..self.height {
            let row = &self.cells[j * self.width..(j + 1) * self.width];
            let first = row.iter().position(|l| l.abs() > eps);
            if let Some(i0) = first {
                let i1 = row.iter().rposition(|l| l.abs() > eps).unwrap();
                b = Some(match b {
                    None => (i0, j, i1, j),
                    Some((a0, b0, a1, _)) => (a0.min(i0), b0, a1.max(i1), j),
                });
            }
        }
        b
    }

    /// Log-odds update from one scan taken at `pose` (map frame).
    ///
    /// Every cell crossed by a beam before its return gets `L_FREE`, the
    /// return cell gets `L_OCC`. Each cell is updated at most once per scan
    /// and a return wins over a pass-through. Censored beams only clear
    /// space up to the scan's `max_range`.
    pub fn integrate_scan(&mut self, pose: Pose2, scan: &Scan) {
        let reach = scan
            .ranges
            .iter()
            .filter_map(|r| *r)
            .fold(scan.max_range, f64::max);
        if reach <= 0.0 {
            return;
        }
        self.ensure_contains(pose.position() + Vec2::new(reach, reach), 1.0);
        self.ensure_contains(pose.position() - Vec2::new(reach, reach), 1.0);

        let start = self.to_cell_coords(pose.position());
        let inv_res = 1.0 / self.resolution;
        let (w, h) = (self.width as i64, self.height as i64);
        let mut free: Vec<usize> = Vec::new();
        let mut hits: Vec<usize> = Vec::new();
        for (bearing, range) in scan.bearings.iter().zip(&scan.ranges) {
            let (len, hit) = match range {
                Some(r) => (*r, true),
                None => (scan.max_range, false),
            };
            if len <= 0.0 {
                continue;
            }
            let dir = Vec2::new(1.0, 0.0).rotate(pose.theta + bearing - self.origin.theta);
            let end = (start.0 + dir.x * len * inv_res, start.1 + dir.y * len * inv_res);
            let end_cell = (end.0.floor() as i64, end.1.floor() as i64);
            raster::traverse(start, end, |i, j, _| {
                if i < 0 || j < 0 || i >= w || j >= h {
                    return false;
                }
                let idx = (j * w + i) as usize;
                if hit && (i, j) == end_cell {
                    hits.push(idx);
                    return false;
                }
                free.push(idx);
                true
            });
            if hit && end_cell.0 >= 0 && end_cell.1 >= 0 && end_cell.0 < w && end_cell.1 < h {
                let idx = (end_cell.1 * w + end_cell.0) as usize;
                if hits.last() != Some(&idx) {
                    hits.push(idx);
                }
            }
        }
        hits.sort_unstable();
        hits.dedup();
        free.sort_unstable();
        free.dedup();
        for idx in free {
            if hits.binary_search(&idx).is_err() {
                self.add_at(idx, L_FREE);
            }
        }
        for idx in hits {
            self.add_at(idx, L_OCC);
        }
    }
}
