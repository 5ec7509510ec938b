//! Waypoint autonomy on a rover's own map: A* over an inflated costmap and a
//! pure-pursuit follower.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{normalize_angle, Pose2, Vec2};
use crate::mapping::{classify, CellClass, OccupancyGrid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NavError {
    #[error("no path to goal")]
    NoPath,
    #[error("start cell is occupied")]
    StartBlocked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerParams {
    pub inflation_radius: f64,
    /// Cost multiplier for stepping into unknown space.
    pub unknown_cost: f64,
    /// Planning window margin around start and goal, meters.
    pub margin: f64,
}

impl Default for PlannerParams {
    fn default() -> Self {
        PlannerParams { inflation_radius: 0.25, unknown_cost: 2.0, margin: 3.0 }
    }
}

/// Axis-aligned planning lattice.
#[derive(Clone, Debug)]
pub struct CostMap {
    pub origin: Vec2,
    pub resolution: f64,
    pub width: usize,
    pub height: usize,
    /// Occupied after inflation.
    pub blocked: Vec<bool>,
    /// Step cost multiplier of entering each cell.
    pub mult: Vec<f64>,
}

impl CostMap {
    /// Samples `grid` over the box `[min, max]`; outside the grid is unknown.
    pub fn build(grid: &OccupancyGrid, min: Vec2, max: Vec2, params: &PlannerParams) -> CostMap {
        let res = grid.resolution();
        let width = ((max.x - min.x) / res).ceil().max(1.0) as usize;
        let height = ((max.y - min.y) / res).ceil().max(1.0) as usize;
        let mut occ = vec![false; width * height];
        let mut mult = vec![1.0; width * height];
        for j in 0..height {
            for i in 0..width {
                let p = Vec2::new(min.x + (i as f64 + 0.5) * res, min.y + (j as f64 + 0.5) * res);
                let k = j * width + i;
                match classify(grid.value_at(p)) {
                    CellClass::Occupied => occ[k] = true,
                    CellClass::Unknown => mult[k] = params.unknown_cost,
                    CellClass::Free => {}
                }
            }
        }
        let r = (params.inflation_radius / res).ceil() as i64;
        let reach = params.inflation_radius / res + 0.5;
        let mut blocked = occ.clone();
        for j in 0..height as i64 {
            for i in 0..width as i64 {
                if !occ[j as usize * width + i as usize] {
                    continue;
                }
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (x, y) = (i + dx, j + dy);
                        if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
                            continue;
                        }
                        if ((dx * dx + dy * dy) as f64).sqrt() <= reach {
                            blocked[y as usize * width + x as usize] = true;
                        }
                    }
                }
            }
        }
        CostMap { origin: min, resolution: res, width, height, blocked, mult }
    }

    pub fn cell_of(&self, p: Vec2) -> Option<(usize, usize)> {
        let u = ((p.x - self.origin.x) / self.resolution).floor();
        let v = ((p.y - self.origin.y) / self.resolution).floor();
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            return None;
        }
        Some((u as usize, v as usize))
    }

    pub fn cell_center(&self, i: usize, j: usize) -> Vec2 {
        Vec2::new(
            self.origin.x + (i as f64 + 0.5) * self.resolution,
            self.origin.y + (j as f64 + 0.5) * self.resolution,
        )
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        j * self.width + i
    }

    /// 8-connected moves out of `(i, j)` with their costs. Diagonals may not
    /// cut a blocked corner.
    pub fn moves(&self, i: usize, j: usize) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        const D: [(i64, i64); 8] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];
        D.iter().filter_map(move |&(dx, dy)| {
            let (x, y) = (i as i64 + dx, j as i64 + dy);
            if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
                return None;
            }
            let (x, y) = (x as usize, y as usize);
            if self.blocked[self.idx(x, y)] {
                return None;
            }
            let diagonal = dx != 0 && dy != 0;
            if diagonal && (self.blocked[self.idx(x, j)] || self.blocked[self.idx(i, y)]) {
                return None;
            }
            let step = if diagonal { std::f64::consts::SQRT_2 } else { 1.0 };
            Some(((x, y), step * self.resolution * self.mult[self.idx(x, y)]))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannedPath {
    /// Cost-map cells from start to goal.
    pub cells: Vec<(usize, usize)>,
    pub waypoints: Vec<Vec2>,
    pub length_m: f64,
    pub cost: f64,
    pub planned_at: f64,
}

#[derive(PartialEq)]
struct Open {
    f: f64,
    g: f64,
    k: usize,
}

impl Eq for Open {}

impl Ord for Open {
    fn cmp(&self, o: &Self) -> Ordering {
        o.f.total_cmp(&self.f).then(o.k.cmp(&self.k))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

fn octile(a: (usize, usize), b: (usize, usize), res: f64) -> f64 {
    let dx = a.0.abs_diff(b.0) as f64;
    let dy = a.1.abs_diff(b.1) as f64;
    (dx.max(dy) + (std::f64::consts::SQRT_2 - 1.0) * dx.min(dy)) * res
}

/// A* on a prepared cost map. The start cell may sit inside the inflation
/// band so a rover brushing an obstacle can still leave.
pub fn plan_on(cm: &CostMap, start: (usize, usize), goal: (usize, usize)) -> Result<(Vec<(usize, usize)>, f64), NavError> {
    if cm.blocked[cm.idx(goal.0, goal.1)] {
        return Err(NavError::NoPath);
    }
    let n = cm.width * cm.height;
    let mut g = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut open = BinaryHeap::new();
    let s = cm.idx(start.0, start.1);
    let t = cm.idx(goal.0, goal.1);
    g[s] = 0.0;
    open.push(Open { f: octile(start, goal, cm.resolution), g: 0.0, k: s });
    while let Some(Open { g: gk, k, .. }) = open.pop() {
        if closed[k] || gk > g[k] {
            continue;
        }
        closed[k] = true;
        if k == t {
            let mut cells = vec![goal];
            let mut c = k;
            while parent[c] != usize::MAX {
                c = parent[c];
                cells.push((c % cm.width, c / cm.width));
            }
            cells.reverse();
            return Ok((cells, g[t]));
        }
        let (i, j) = (k % cm.width, k / cm.width);
        for ((x, y), c) in cm.moves(i, j) {
            let m = cm.idx(x, y);
            let ng = gk + c;
            if ng < g[m] {
                g[m] = ng;
                parent[m] = k;
                open.push(Open { f: ng + octile((x, y), goal, cm.resolution), g: ng, k: m });
            }
        }
    }
    Err(NavError::NoPath)
}

/// Plans from `start` to `goal`, both in the grid's frame.
pub fn plan(grid: &OccupancyGrid, start: Vec2, goal: Vec2, params: &PlannerParams, now: f64) -> Result<PlannedPath, NavError> {
    if classify(grid.value_at(start)) == CellClass::Occupied {
        return Err(NavError::StartBlocked);
    }
    let (gmin, gmax) = grid_bounds(grid);
    let m = params.margin;
    let min = Vec2::new(gmin.x.min(start.x.min(goal.x) - m), gmin.y.min(start.y.min(goal.y) - m));
    let max = Vec2::new(gmax.x.max(start.x.max(goal.x) + m), gmax.y.max(start.y.max(goal.y) + m));
    let cm = CostMap::build(grid, min, max, params);
    let (s, t) = (cm.cell_of(start).expect("inside window"), cm.cell_of(goal).expect("inside window"));
    let (cells, cost) = plan_on(&cm, s, t)?;
    let mut waypoints: Vec<Vec2> = cells.iter().map(|&(i, j)| cm.cell_center(i, j)).collect();
    if let Some(last) = waypoints.last_mut() {
        *last = goal;
    }
    let length_m = waypoints.windows(2).map(|w| w[0].dist(w[1])).sum();
    Ok(PlannedPath { cells, waypoints, length_m, cost, planned_at: now })
}

fn grid_bounds(grid: &OccupancyGrid) -> (Vec2, Vec2) {
    let corners = [
        grid.cell_center(0, 0),
        grid.cell_center(grid.width() - 1, grid.height() - 1),
    ];
    let h = grid.resolution() / 2.0;
    let min = Vec2::new(corners[0].x.min(corners[1].x) - h, corners[0].y.min(corners[1].y) - h);
    let max = Vec2::new(corners[0].x.max(corners[1].x) + h, corners[0].y.max(corners[1].y) + h);
    (min, max)
}

/// True when some remaining waypoint now lies within the inflation radius
/// of an occupied cell.
pub fn path_obstructed(grid: &OccupancyGrid, waypoints: &[Vec2], params: &PlannerParams) -> bool {
    let res = grid.resolution();
    let r = (params.inflation_radius / res).ceil() as i64;
    waypoints.iter().any(|&p| {
        (-r..=r).any(|dy| {
            (-r..=r).any(|dx| {
                let q = p + Vec2::new(dx as f64 * res, dy as f64 * res);
                q.dist(p) <= params.inflation_radius && classify(grid.value_at(q)) == CellClass::Occupied
            })
        })
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FollowerParams {
    pub lookahead: f64,
    pub tolerance: f64,
    /// Cross-track distance that triggers a replan.
    pub max_deviation: f64,
    pub v_max: f64,
    pub omega_max: f64,
}

impl Default for FollowerParams {
    fn default() -> Self {
        FollowerParams { lookahead: 0.5, tolerance: 0.3, max_deviation: 1.0, v_max: 0.4, omega_max: 2.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FollowEvent {
    Following,
    GoalReached,
    ReplanNeeded,
}

fn closest_on_segment(a: Vec2, b: Vec2, p: Vec2) -> (f64, Vec2) {
    let ab = b - a;
    let l2 = ab.dot(ab);
    let t = if l2 == 0.0 { 0.0 } else { ((p - a).dot(ab) / l2).clamp(0.0, 1.0) };
    let q = a + ab * t;
    (t, q)
}

/// Pure pursuit along a waypoint polyline.
#[derive(Clone, Debug)]
pub struct Follower {
    pub params: FollowerParams,
    path: Vec<Vec2>,
    /// Index of the segment the rover was last closest to.
    seg: usize,
}

impl Follower {
    pub fn new(params: FollowerParams, path: Vec<Vec2>) -> Follower {
        assert!(!path.is_empty(), "empty path");
        Follower { params, path, seg: 0 }
    }

    pub fn path(&self) -> &[Vec2] {
        &self.path
    }

    pub fn remaining(&self) -> &[Vec2] {
        &self.path[self.seg..]
    }

    pub fn goal(&self) -> Vec2 {
        *self.path.last().expect("non-empty")
    }

    /// Drive command `(v, omega)` for the current pose.
    pub fn step(&mut self, pose: Pose2) -> ((f64, f64), FollowEvent) {
        let p = pose.position();
        let goal = self.goal();
        if p.dist(goal) <= self.params.tolerance {
            return ((0.0, 0.0), FollowEvent::GoalReached);
        }
        // Advance along the path, looking at most a few segments ahead.
        let mut best = (f64::INFINITY, self.seg, Vec2::ZERO);
        let last = self.path.len().saturating_sub(1);
        for s in self.seg..last.min(self.seg + 20).max(self.seg) {
            let (_, q) = closest_on_segment(self.path[s], self.path[s + 1], p);
            let d = q.dist(p);
            if d < best.0 {
                best = (d, s, q);
            }
        }
        if last == 0 {
            best = (p.dist(goal), 0, goal);
        }
        let (dev, seg, foot) = best;
        self.seg = seg;
        if dev > self.params.max_deviation {
            return ((0.0, 0.0), FollowEvent::ReplanNeeded);
        }
        let target = self.lookahead_point(seg, foot);
        let local = pose.inverse().apply(target);
        let alpha = normalize_angle(local.y.atan2(local.x));
        let pm = &self.params;
        if alpha.abs() > std::f64::consts::FRAC_PI_2 {
            return ((0.0, pm.omega_max.copysign(alpha)), FollowEvent::Following);
        }
        let l = local.norm().max(1e-6);
        let kappa = 2.0 * alpha.sin() / l;
        let mut v = pm.v_max * alpha.cos().max(0.2);
        let mut w = kappa * v;
        if w.abs() > pm.omega_max {
            v *= pm.omega_max / w.abs();
            w = pm.omega_max.copysign(w);
        }
        ((v, w), FollowEvent::Following)
    }

    fn lookahead_point(&self, seg: usize, foot: Vec2) -> Vec2 {
        let mut left = self.params.lookahead;
        let mut from = foot;
        for s in seg + 1..self.path.len() {
            let to = self.path[s];
            let d = from.dist(to);
            if d >= left {
                return from + (to - from) * (left / d);
            }
            left -= d;
            from = to;
        }
        self.goal()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NavEvent {
    Planning,
    Following { length_m: f64 },
    GoalReached,
    NoPath,
    Replan,
}

/// Goal state of one rover.
#[derive(Clone, Debug)]
pub struct Navigator {
    pub planner: PlannerParams,
    pub follower_params: FollowerParams,
    follower: Option<Follower>,
    goal: Option<Vec2>,
    /// Disabled autonomy refuses goals; the operator has to drive.
    pub enabled: bool,
}

impl Navigator {
    pub fn new(planner: PlannerParams, follower: FollowerParams) -> Navigator {
        Navigator { planner, follower_params: follower, follower: None, goal: None, enabled: true }
    }

    pub fn goal(&self) -> Option<Vec2> {
        self.goal
    }

    pub fn active(&self) -> bool {
        self.goal.is_some()
    }

    pub fn path(&self) -> Option<&[Vec2]> {
        self.follower.as_ref().map(|f| f.path())
    }

    pub fn cancel(&mut self) {
        self.goal = None;
        self.follower = None;
    }

    /// Accepts a goal in the grid frame and plans immediately.
    pub fn set_goal(&mut self, goal: Vec2, grid: &OccupancyGrid, pose: Pose2, now: f64) -> Vec<NavEvent> {
        self.goal = Some(goal);
        let mut ev = vec![NavEvent::Planning];
        self.replan(grid, pose, now, &mut ev);
        ev
    }

    fn replan(&mut self, grid: &OccupancyGrid, pose: Pose2, now: f64, ev: &mut Vec<NavEvent>) {
        let Some(goal) = self.goal else { return };
        match plan(grid, pose.position(), goal, &self.planner, now) {
            Ok(p) => {
                ev.push(NavEvent::Following { length_m: p.length_m });
                self.follower = Some(Follower::new(self.follower_params.clone(), p.waypoints));
            }
            Err(_) => {
                ev.push(NavEvent::NoPath);
                self.cancel();
            }
        }
    }

    /// One control period. Returns the drive command and any status changes.
    pub fn tick(&mut self, grid: &OccupancyGrid, pose: Pose2, now: f64) -> ((f64, f64), Vec<NavEvent>) {
        let mut ev = Vec::new();
        if self.goal.is_none() {
            return ((0.0, 0.0), ev);
        }
        let obstructed = self
            .follower
            .as_ref()
            .is_none_or(|f| path_obstructed(grid, f.remaining(), &self.planner));
        if obstructed {
            ev.push(NavEvent::Replan);
            self.replan(grid, pose, now, &mut ev);
        }
        let Some(f) = self.follower.as_mut() else { return ((0.0, 0.0), ev) };
        let (cmd, e) = f.step(pose);
        match e {
            FollowEvent::Following => {}
            FollowEvent::GoalReached => {
                ev.push(NavEvent::GoalReached);
                self.cancel();
            }
            FollowEvent::ReplanNeeded => {
                ev.push(NavEvent::Replan);
                self.replan(grid, pose, now, &mut ev);
            }
        }
        (cmd, ev)
    }
}
