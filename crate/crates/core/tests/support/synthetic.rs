//! Synthetic map pairs with a known ground-truth transform.
//!
//! Both maps are rasterized directly from continuous obstacle geometry, each
//! in its own frame, so the expected transform is exact and independent of
//! any resampling done by the code under test.

use std::collections::HashMap;

use rovermesh::geometry::{Pose2, Vec2};
use rovermesh::kernel::RngStream;
use rovermesh::mapping::{extract_features, FeatureParams, OccupancyGrid};

#[derive(Clone, Debug)]
pub enum Shape {
    Disk { c: Vec2, r: f64 },
    Rect { c: Vec2, hx: f64, hy: f64, angle: f64 },
}

impl Shape {
    fn contains(&self, p: Vec2) -> bool {
        match *self {
            Shape::Disk { c, r } => p.dist(c) <= r,
            Shape::Rect { c, hx, hy, angle } => {
                let q = (p - c).rotate(-angle);
                q.x.abs() <= hx && q.y.abs() <= hy
            }
        }
    }
}

pub struct Scene {
    pub shapes: Vec<Shape>,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

const BUCKET: f64 = 2.0;

fn bucket_of(p: Vec2) -> (i64, i64) {
    ((p.x / BUCKET).floor() as i64, (p.y / BUCKET).floor() as i64)
}

impl Scene {
    pub fn random(rng: &mut RngStream, extent: f64, boulders: usize, rects: usize) -> Scene {
        let mut shapes = Vec::new();
        for _ in 0..boulders {
            let c = Vec2::new(rng.range(0.0, extent), rng.range(0.0, extent));
            shapes.push(Shape::Disk { c, r: rng.range(0.2, 0.6) });
        }
        for _ in 0..rects {
            let c = Vec2::new(rng.range(0.0, extent), rng.range(0.0, extent));
            shapes.push(Shape::Rect {
                c,
                hx: rng.range(0.4, 1.5),
                hy: rng.range(0.2, 1.0),
                angle: rng.range(-3.14, 3.14),
            });
        }
        // Every shape fits in a 1.9 m radius, so a 3x3 bucket query is exhaustive.
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (k, s) in shapes.iter().enumerate() {
            let c = match *s {
                Shape::Disk { c, .. } | Shape::Rect { c, .. } => c,
            };
            buckets.entry(bucket_of(c)).or_default().push(k);
        }
        Scene { shapes, buckets }
    }

    pub fn occupied(&self, p: Vec2) -> bool {
        let (bx, by) = bucket_of(p);
        (-1..=1).any(|dy| {
            (-1..=1).any(|dx| {
                self.buckets
                    .get(&(bx + dx, by + dy))
                    .is_some_and(|ks| ks.iter().any(|&k| self.shapes[k].contains(p)))
            })
        })
    }

    /// Fully known map of a `w x h` window whose frame sits at `frame` in the world.
    pub fn render(&self, frame: Pose2, w: f64, h: f64, res: f64) -> OccupancyGrid {
        let mut g = OccupancyGrid::covering(Vec2::ZERO, Vec2::new(w, h), res);
        for j in 0..g.height() {
            for i in 0..g.width() {
                let p = frame.apply(g.cell_center(i, j));
                g.set(i, j, if self.occupied(p) { 2.0 } else { -2.0 });
            }
        }
        g
    }
}

/// Fraction of window B (placed at `tb`) inside window A (placed at `ta`),
/// estimated on a regular sample lattice.
pub fn window_overlap(ta: Pose2, tb: Pose2, w: f64, h: f64) -> f64 {
    let n = 60;
    let inv_a = ta.inverse();
    let mut inside = 0;
    for a in 0..n {
        for b in 0..n {
            let local = Vec2::new((a as f64 + 0.5) * w / n as f64, (b as f64 + 0.5) * h / n as f64);
            let q = inv_a.apply(tb.apply(local));
            if q.x >= 0.0 && q.y >= 0.0 && q.x < w && q.y < h {
                inside += 1;
            }
        }
    }
    inside as f64 / (n * n) as f64
}

pub struct Pair {
    pub a: OccupancyGrid,
    pub b: OccupancyGrid,
    /// B map frame -> A map frame.
    pub truth: Pose2,
    pub overlap: f64,
}

/// Draws a pair whose window overlap falls inside `[lo, hi]`.
pub fn pair_with_overlap(rng: &mut RngStream, lo: f64, hi: f64) -> Pair {
    let size = 20.0;
    let res = 0.1;
    let scene = Scene::random(rng, 60.0, 520, 60);
    let ta = Pose2::new(20.0, 20.0, 0.0);
    loop {
        let theta = rng.range(-std::f64::consts::PI, std::f64::consts::PI);
        let center = Vec2::new(30.0 + rng.range(-18.0, 18.0), 30.0 + rng.range(-18.0, 18.0));
        let half = Vec2::new(size / 2.0, size / 2.0).rotate(theta);
        let tb = Pose2::new(center.x - half.x, center.y - half.y, theta);
        let ov = window_overlap(ta, tb, size, size);
        if ov < lo || ov > hi {
            continue;
        }
        let a = scene.render(ta, size, size, res);
        let b = scene.render(tb, size, size, res);
        let truth = ta.inverse().compose(&tb);
        return Pair { a, b, truth, overlap: ov };
    }
}

/// Features of B whose true position in A lies within `tol` of a feature of A.
pub fn truth_matched(pair: &Pair, params: &FeatureParams, tol: f64) -> usize {
    let fa = extract_features(&pair.a, params);
    let fb = extract_features(&pair.b, params);
    fb.iter()
        .filter(|f| {
            let q = pair.truth.apply(f.position);
            fa.iter().any(|g| g.position.dist(q) <= tol)
        })
        .count()
}
