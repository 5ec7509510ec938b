//! Map-to-map registration and fusion.
//!
//! Registration matches steered patch descriptors by Hamming distance,
//! then runs a random-sample consensus over two-point rigid fits and
//! refines the winner by least squares on its inliers. A transform is only
//! accepted when the aligned maps overlap enough.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::features::{extract_features, FeatureParams, GridFeature};
use super::grid::{classify, CellClass, OccupancyGrid};
use crate::geometry::{normalize_angle, Pose2, Vec2};
use crate::kernel::RngStream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MergeError {
    #[error("not enough features to register (a: {a}, b: {b})")]
    InsufficientFeatures { a: usize, b: usize },
    #[error("no consensus transform (best inlier count {best_inliers})")]
    NoConsensus { best_inliers: usize },
    #[error("overlap ratio {ratio:.3} below the merge threshold")]
    InsufficientOverlap { ratio: f64, inliers: usize },
    #[error("resolution mismatch: {a} vs {b}")]
    ResolutionMismatch { a: f64, b: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeParams {
    pub min_overlap: f64,
    pub min_inliers: usize,
    /// Fewer features than this on either map refuses registration outright.
    pub min_features: usize,
    pub max_hamming: u32,
    /// Candidate matches kept per feature of the second map.
    pub top_k: usize,
    pub ransac_iterations: usize,
    pub inlier_tol_cells: f64,
    pub known_eps: f64,
    /// Share of aligned occupied cells that must land on occupied cells.
    pub min_agreement: f64,
    /// Largest disagreement between a correspondence's patch rotation and
    /// the sampled rotation, radians.
    pub max_orientation_error: f64,
    pub features: FeatureParams,
}

impl Default for MergeParams {
    fn default() -> Self {
        MergeParams {
            min_overlap: 0.20,
            min_inliers: 10,
            min_features: 10,
            max_hamming: 20,
            top_k: 4,
            ransac_iterations: 5000,
            inlier_tol_cells: 1.5,
            known_eps: 0.1,
            min_agreement: 0.6,
            max_orientation_error: 0.35,
            features: FeatureParams::default(),
        }
    }
}

/// Transform taking map-frame coordinates of B into the map frame of A.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeTransform {
    pub transform: Pose2,
    pub overlap_ratio: f64,
    pub inlier_count: usize,
}

/// `|known(B->A) ∩ known(A)| / min(|known(A)|, |known(B)|)`.
pub fn overlap_ratio(a: &OccupancyGrid, b: &OccupancyGrid, b_to_a: &Pose2, eps: f64) -> f64 {
    let known_a = a.known_count(eps);
    let mut known_b = 0usize;
    let mut both = 0usize;
    for j in 0..b.height() {
        for i in 0..b.width() {
            if !b.is_known(i, j, eps) {
                continue;
            }
            known_b += 1;
            let p = b_to_a.apply(b.cell_center(i, j));
            if let Some((ai, aj)) = a.cell_of(p) {
                if a.is_known(ai, aj, eps) {
                    both += 1;
                }
            }
        }
    }
    let denom = known_a.min(known_b);
    if denom == 0 {
        return 0.0;
    }
    both as f64 / denom as f64
}

/// Least-squares rigid fit of `src -> dst`.
pub fn fit_rigid(pairs: &[(Vec2, Vec2)]) -> Pose2 {
    let n = pairs.len() as f64;
    let (mut cs, mut cd) = (Vec2::ZERO, Vec2::ZERO);
    for (s, d) in pairs {
        cs = cs + *s;
        cd = cd + *d;
    }
    cs = cs * (1.0 / n);
    cd = cd * (1.0 / n);
    let (mut dot, mut cross) = (0.0, 0.0);
    for (s, d) in pairs {
        let (ds, dd) = (*s - cs, *d - cd);
        dot += ds.dot(dd);
        cross += ds.cross(dd);
    }
    let theta = cross.atan2(dot);
    let t = cd - cs.rotate(theta);
    Pose2::new(t.x, t.y, theta)
}

struct Candidate {
    b: usize,
    a: usize,
}

fn candidates(fa: &[GridFeature], fb: &[GridFeature], params: &MergeParams) -> Vec<Candidate> {
    let mut out = Vec::new();
    let mut scored: Vec<(u32, usize)> = Vec::with_capacity(fa.len());
    for (bi, f) in fb.iter().enumerate() {
        scored.clear();
        scored.extend(fa.iter().enumerate().map(|(ai, g)| (f.hamming(g), ai)));
        scored.sort_unstable();
        for &(d, ai) in scored.iter().take(params.top_k) {
            if d <= params.max_hamming {
                out.push(Candidate { b: bi, a: ai });
            }
        }
    }
    out
}

/// Bucketed positions of A's features for nearest-neighbour queries.
struct FeatureIndex {
    bin: f64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

impl FeatureIndex {
    fn new(fa: &[GridFeature], bin: f64) -> Self {
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (k, f) in fa.iter().enumerate() {
            buckets.entry(Self::key(f.position, bin)).or_default().push(k);
        }
        FeatureIndex { bin, buckets }
    }

    fn key(p: Vec2, bin: f64) -> (i64, i64) {
        ((p.x / bin).floor() as i64, (p.y / bin).floor() as i64)
    }

    fn nearest(&self, fa: &[GridFeature], p: Vec2, tol: f64, like: &GridFeature, max_h: u32) -> Option<(usize, f64)> {
        let (kx, ky) = Self::key(p, self.bin);
        let mut best: Option<(usize, f64)> = None;
        for dy in -1..=1 {
            for dx in -1..=1 {
                let Some(list) = self.buckets.get(&(kx + dx, ky + dy)) else { continue };
                for &a in list {
                    let d = fa[a].position.dist(p);
                    if d <= tol && fa[a].hamming(like) <= max_h && best.is_none_or(|(ba, bd)| d < bd || (d == bd && a < ba)) {
                        best = Some((a, d));
                    }
                }
            }
        }
        best
    }
}

/// Geometrically verified matches under `t`: each B feature paired with the
/// nearest A feature within `tol`, one-to-one, closest pairs first.
fn inliers(t: &Pose2, index: &FeatureIndex, fa: &[GridFeature], fb: &[GridFeature], tol: f64, max_h: u32) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(f64, usize, usize)> = fb
        .iter()
        .enumerate()
        .filter_map(|(b, f)| index.nearest(fa, t.apply(f.position), tol, f, max_h).map(|(a, d)| (d, b, a)))
        .collect();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    let mut used_a = vec![false; fa.len()];
    let mut out: Vec<(usize, usize)> = Vec::with_capacity(pairs.len());
    for (_, b, a) in pairs {
        if !used_a[a] {
            used_a[a] = true;
            out.push((b, a));
        }
    }
    out.sort_unstable();
    out
}

fn two_point_fit(b1: Vec2, b2: Vec2, a1: Vec2, a2: Vec2) -> Pose2 {
    let vb = b2 - b1;
    let va = a2 - a1;
    let theta = va.y.atan2(va.x) - vb.y.atan2(vb.x);
    let mb = (b1 + b2) * 0.5;
    let ma = (a1 + a2) * 0.5;
    let t = ma - mb.rotate(theta);
    Pose2::new(t.x, t.y, theta)
}

/// Estimates the transform taking map B into map A.
pub fn match_and_estimate(
    a: &OccupancyGrid,
    b: &OccupancyGrid,
    params: &MergeParams,
    rng: &mut RngStream,
) -> Result<MergeTransform, MergeError> {
    if (a.resolution() - b.resolution()).abs() > 1e-12 {
        return Err(MergeError::ResolutionMismatch { a: a.resolution(), b: b.resolution() });
    }
    let fa = extract_features(a, &params.features);
    let fb = extract_features(b, &params.features);
    estimate_from_features(a, b, &fa, &fb, params, rng)
}

pub fn estimate_from_features(
    a: &OccupancyGrid,
    b: &OccupancyGrid,
    fa: &[GridFeature],
    fb: &[GridFeature],
    params: &MergeParams,
    rng: &mut RngStream,
) -> Result<MergeTransform, MergeError> {
    if fa.len() < params.min_features || fb.len() < params.min_features {
        return Err(MergeError::InsufficientFeatures { a: fa.len(), b: fb.len() });
    }
    let res = a.resolution();
    let tol = params.inlier_tol_cells * res;
    let cands = candidates(fa, fb, params);
    if cands.len() < 2 {
        return Err(MergeError::NoConsensus { best_inliers: 0 });
    }

    let index = FeatureIndex::new(fa, tol.max(res));
    let min_sep = 4.0 * res;
    let max_draws = params.ransac_iterations * 100;
    let max_turn = params.max_orientation_error;
    let mut evaluated = 0;
    // Best few distinct hypotheses, most inliers first.
    let mut top: Vec<(Vec<(usize, usize)>, Pose2)> = Vec::new();
    for _ in 0..max_draws {
        if evaluated >= params.ransac_iterations {
            break;
        }
        let c1 = &cands[rng.below(cands.len())];
        let c2 = &cands[rng.below(cands.len())];
        if c1.a == c2.a || c1.b == c2.b {
            continue;
        }
        let (a1, a2) = (fa[c1.a].position, fa[c2.a].position);
        let (b1, b2) = (fb[c1.b].position, fb[c2.b].position);
        let (da, db) = (a1.dist(a2), b1.dist(b2));
        if da < min_sep || (da - db).abs() > 2.0 * res {
            continue;
        }
        // Each correspondence implies a rotation through its patch orientations;
        // both must agree with the rotation of the segment joining them.
        let turn1 = fa[c1.a].orientation - fb[c1.b].orientation;
        let turn2 = fa[c2.a].orientation - fb[c2.b].orientation;
        let seg = (a2 - a1).y.atan2((a2 - a1).x) - (b2 - b1).y.atan2((b2 - b1).x);
        if normalize_angle(turn1 - seg).abs() > max_turn || normalize_angle(turn2 - seg).abs() > max_turn {
            continue;
        }
        evaluated += 1;
        let t = two_point_fit(b1, b2, a1, a2);
        let inl = inliers(&t, &index, fa, fb, tol, params.max_hamming);
        if inl.len() < 3 {
            continue;
        }
        keep_hypothesis(&mut top, inl, t, res, HYPOTHESES_KEPT);
    }
    let best_inliers = top.first().map_or(0, |h| h.0.len());
    if best_inliers < 3 {
        return Err(MergeError::NoConsensus { best_inliers });
    }
    let b_occ = occupied_cells(b);
    for (seed_inl, seed_t) in top {
        let (inl, t) = refine_on_features(seed_inl, seed_t, &index, fa, fb, tol, params.max_hamming);
        if agreement_within(a, &b_occ, &t, params.known_eps, 2) < params.min_agreement {
            continue;
        }
        let t = refine_dense(a, b, t, params.known_eps);
        let t = refine_field(a, b, t, params.known_eps);
        if agreement(a, b, &t, params.known_eps) < params.min_agreement {
            continue;
        }
        let inl = inliers(&t, &index, fa, fb, tol, params.max_hamming).len().max(inl.len());
        let ratio = overlap_ratio(a, b, &t, params.known_eps);
        if ratio < params.min_overlap {
            return Err(MergeError::InsufficientOverlap { ratio, inliers: inl });
        }
        if inl < params.min_inliers {
            return Err(MergeError::NoConsensus { best_inliers: inl });
        }
        return Ok(MergeTransform { transform: t, overlap_ratio: ratio, inlier_count: inl });
    }
    // Every hypothesis was refuted by the dense check, so no shared area could be
    // verified at all.
    Err(MergeError::InsufficientOverlap { ratio: 0.0, inliers: best_inliers })
}

const HYPOTHESES_KEPT: usize = 64;

fn keep_hypothesis(top: &mut Vec<(Vec<(usize, usize)>, Pose2)>, inl: Vec<(usize, usize)>, t: Pose2, res: f64, cap: usize) {
    if let Some(k) = top
        .iter()
        .position(|(_, u)| u.translation_dist(&t) < 5.0 * res && u.angle_dist(&t) < 3f64.to_radians())
    {
        if top[k].0.len() >= inl.len() {
            return;
        }
        top.remove(k);
    }
    let at = top.partition_point(|(h, _)| h.len() >= inl.len());
    if at < cap {
        top.insert(at, (inl, t));
        top.truncate(cap);
    }
}

fn refine_on_features(
    mut best: Vec<(usize, usize)>,
    mut best_t: Pose2,
    index: &FeatureIndex,
    fa: &[GridFeature],
    fb: &[GridFeature],
    tol: f64,
    max_h: u32,
) -> (Vec<(usize, usize)>, Pose2) {
    for _ in 0..3 {
        let pairs: Vec<(Vec2, Vec2)> = best.iter().map(|&(bi, ai)| (fb[bi].position, fa[ai].position)).collect();
        let t = fit_rigid(&pairs);
        let inl = inliers(&t, index, fa, fb, tol, max_h);
        if inl.len() < best.len() {
            break;
        }
        let converged = inl == best;
        best = inl;
        best_t = t;
        if converged {
            break;
        }
    }
    (best, best_t)
}

fn occupied_cells(g: &OccupancyGrid) -> Vec<Vec2> {
    let mut out = Vec::new();
    for j in 0..g.height() {
        for i in 0..g.width() {
            if classify(g.get(i, j)) == CellClass::Occupied {
                out.push(g.cell_center(i, j));
            }
        }
    }
    out
}

/// Nearest occupied cell of `a` to `p` within `r` cells.
fn nearest_occupied(a: &OccupancyGrid, p: Vec2, r: i64) -> Option<Vec2> {
    let (ci, cj) = a.to_cell_coords(p);
    let (ci, cj) = (ci.floor() as i64, cj.floor() as i64);
    let mut best: Option<(f64, Vec2)> = None;
    for dj in -r..=r {
        for di in -r..=r {
            let (i, j) = (ci + di, cj + dj);
            if i < 0 || j < 0 || i >= a.width() as i64 || j >= a.height() as i64 {
                continue;
            }
            if classify(a.get(i as usize, j as usize)) != CellClass::Occupied {
                continue;
            }
            let q = a.cell_center(i as usize, j as usize);
            let d = q.dist(p);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, q));
            }
        }
    }
    best.map(|(_, q)| q)
}

/// Point-to-point ICP on occupied cells, seeded by the feature estimate.
fn refine_dense(a: &OccupancyGrid, b: &OccupancyGrid, seed: Pose2, eps: f64) -> Pose2 {
    let pts = occupied_cells(b);
    let mut t = seed;
    for _ in 0..40 {
        let pairs: Vec<(Vec2, Vec2)> = pts
            .iter()
            .filter_map(|&p| {
                let q = t.apply(p);
                let (i, j) = a.cell_of(q)?;
                if !a.is_known(i, j, eps) {
                    return None;
                }
                nearest_occupied(a, q, 2).map(|m| (p, m))
            })
            .collect();
        if pairs.len() < 3 {
            return t;
        }
        let next = fit_rigid(&pairs);
        let done = next.translation_dist(&t) < 1e-4 && next.angle_dist(&t) < 1e-5;
        t = next;
        if done {
            break;
        }
    }
    t
}

/// Smoothed occupancy of A, sampled bilinearly for sub-cell alignment.
struct Field<'a> {
    grid: &'a OccupancyGrid,
    vals: Vec<f64>,
}

impl<'a> Field<'a> {
    fn new(grid: &'a OccupancyGrid) -> Self {
        let (w, h) = (grid.width(), grid.height());
        let mut occ = vec![0.0; w * h];
        for j in 0..h {
            for i in 0..w {
                if classify(grid.get(i, j)) == CellClass::Occupied {
                    occ[j * w + i] = 1.0;
                }
            }
        }
        let k = [0.054, 0.242, 0.399, 0.242, 0.054];
        let mut tmp = vec![0.0; w * h];
        for j in 0..h {
            for i in 0..w {
                let mut acc = 0.0;
                for (d, kv) in k.iter().enumerate() {
                    let ii = i as i64 + d as i64 - 2;
                    if ii >= 0 && (ii as usize) < w {
                        acc += kv * occ[j * w + ii as usize];
                    }
                }
                tmp[j * w + i] = acc;
            }
        }
        let mut vals = vec![0.0; w * h];
        for j in 0..h {
            for i in 0..w {
                let mut acc = 0.0;
                for (d, kv) in k.iter().enumerate() {
                    let jj = j as i64 + d as i64 - 2;
                    if jj >= 0 && (jj as usize) < h {
                        acc += kv * tmp[jj as usize * w + i];
                    }
                }
                vals[j * w + i] = acc;
            }
        }
        Field { grid, vals }
    }

    /// Value and map-frame gradient at `q`.
    fn sample(&self, q: Vec2) -> Option<(f64, Vec2)> {
        let (u, v) = self.grid.to_cell_coords(q);
        let (u, v) = (u - 0.5, v - 0.5);
        let (i, j) = (u.floor(), v.floor());
        let (w, h) = (self.grid.width() as f64, self.grid.height() as f64);
        if i < 0.0 || j < 0.0 || i + 1.0 >= w || j + 1.0 >= h {
            return None;
        }
        let (fu, fv) = (u - i, v - j);
        let (i, j, w) = (i as usize, j as usize, w as usize);
        let v00 = self.vals[j * w + i];
        let v10 = self.vals[j * w + i + 1];
        let v01 = self.vals[(j + 1) * w + i];
        let v11 = self.vals[(j + 1) * w + i + 1];
        let val = v00 * (1.0 - fu) * (1.0 - fv) + v10 * fu * (1.0 - fv) + v01 * (1.0 - fu) * fv + v11 * fu * fv;
        let du = (v10 - v00) * (1.0 - fv) + (v11 - v01) * fv;
        let dv = (v01 - v00) * (1.0 - fu) + (v11 - v10) * fu;
        let res = self.grid.resolution();
        let grad = Vec2::new(du / res, dv / res).rotate(self.grid.origin().theta);
        Some((val, grad))
    }
}

/// Gauss-Newton fit of B's occupied cells onto the smoothed occupancy of A.
fn refine_field(a: &OccupancyGrid, b: &OccupancyGrid, seed: Pose2, eps: f64) -> Pose2 {
    let field = Field::new(a);
    let pts = occupied_cells(b);
    let mut t = seed;
    for _ in 0..20 {
        let mut h = [[0.0f64; 3]; 3];
        let mut g = [0.0f64; 3];
        let mut n = 0usize;
        for &p in &pts {
            let q = t.apply(p);
            let Some((i, j)) = a.cell_of(q) else { continue };
            if !a.is_known(i, j, eps) {
                continue;
            }
            let Some((val, grad)) = field.sample(q) else { continue };
            let rp = p.rotate(t.theta);
            let jac = [grad.x, grad.y, grad.x * -rp.y + grad.y * rp.x];
            let r = 1.0 - val;
            for (r_i, ji) in jac.iter().enumerate() {
                g[r_i] += ji * r;
                for (c, jc) in jac.iter().enumerate() {
                    h[r_i][c] += ji * jc;
                }
            }
            n += 1;
        }
        if n < 3 {
            return t;
        }
        // Light damping keeps flat directions from blowing up.
        for (k, row) in h.iter_mut().enumerate() {
            row[k] += 1e-6 + row[k] * 1e-3;
        }
        let Some(d) = solve3(h, g) else { return t };
        t = Pose2::new(t.x + d[0], t.y + d[1], t.theta + d[2]);
        if d[0].hypot(d[1]) < 1e-5 && d[2].abs() < 1e-6 {
            break;
        }
    }
    t
}

fn solve3(m: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let det = |m: &[[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(&m);
    if d.abs() < 1e-18 {
        return None;
    }
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let mut mc = m;
        for r in 0..3 {
            mc[r][c] = b[r];
        }
        *o = det(&mc) / d;
    }
    Some(out)
}

/// Share of B's occupied cells landing on known A cells that sit within one
/// cell of an occupied A cell.
fn agreement(a: &OccupancyGrid, b: &OccupancyGrid, b_to_a: &Pose2, eps: f64) -> f64 {
    agreement_within(a, &occupied_cells(b), b_to_a, eps, 1)
}

fn agreement_within(a: &OccupancyGrid, b_occ: &[Vec2], b_to_a: &Pose2, eps: f64, r: i64) -> f64 {
    let (mut seen, mut hit) = (0usize, 0usize);
    for &p in b_occ {
        let q = b_to_a.apply(p);
        let Some((i, j)) = a.cell_of(q) else { continue };
        if !a.is_known(i, j, eps) {
            continue;
        }
        seen += 1;
        if nearest_occupied(a, q, r).is_some() {
            hit += 1;
        }
    }
    if seen == 0 {
        0.0
    } else {
        hit as f64 / seen as f64
    }
}

/// One local map handed to [`merge`].
#[derive(Clone, Debug)]
pub struct LocalMap<'a> {
    pub name: String,
    pub grid: &'a OccupancyGrid,
    /// Local map frame into the global frame; `None` when registration failed.
    pub transform: Option<Pose2>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub name: String,
    pub transform: Pose2,
    pub anchored: bool,
}

#[derive(Clone, Debug)]
pub struct MergedMap {
    pub grid: OccupancyGrid,
    pub placements: Vec<Placement>,
}

/// Fuses anchored local maps into one grid by summing resampled log-odds.
///
/// Unanchored maps are not fused. They keep an identity placement and are
/// flagged so a viewer can draw them apart from the merged map.
pub fn merge(locals: &[LocalMap<'_>]) -> Option<MergedMap> {
    let first = locals.first()?;
    let res = first.grid.resolution();
    let l_max = first.grid.l_max();
    let anchored: Vec<(&OccupancyGrid, Pose2)> =
        locals.iter().filter_map(|l| l.transform.map(|t| (l.grid, t))).collect();
    let placements = locals
        .iter()
        .map(|l| Placement {
            name: l.name.clone(),
            transform: l.transform.unwrap_or(Pose2::IDENTITY),
            anchored: l.transform.is_some(),
        })
        .collect();
    if anchored.is_empty() {
        return Some(MergedMap { grid: OccupancyGrid::new(Pose2::IDENTITY, res, 1, 1), placements });
    }

    // Bounding box of every anchored grid in the global frame.
    let (mut lo, mut hi) = (Vec2::new(f64::MAX, f64::MAX), Vec2::new(f64::MIN, f64::MIN));
    for (g, t) in &anchored {
        let full = g.origin();
        let (w, h) = (g.width() as f64 * g.resolution(), g.height() as f64 * g.resolution());
        for c in [Vec2::ZERO, Vec2::new(w, 0.0), Vec2::new(0.0, h), Vec2::new(w, h)] {
            let p = t.apply(full.apply(c));
            lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
        }
    }
    let snap = |v: f64| (v / res).round() * res;
    let lo = Vec2::new(snap(lo.x), snap(lo.y));
    let hi = Vec2::new(snap(hi.x), snap(hi.y));
    let mut out = OccupancyGrid::covering(lo, hi, res).with_l_max(l_max);
    let mut acc = vec![0.0; out.width() * out.height()];
    for (g, t) in &anchored {
        let inv = t.inverse();
        for j in 0..out.height() {
            for i in 0..out.width() {
                let p = inv.apply(out.cell_center(i, j));
                if let Some((li, lj)) = g.cell_of(p) {
                    acc[j * out.width() + i] += g.get(li, lj);
                }
            }
        }
    }
    for j in 0..out.height() {
        for i in 0..out.width() {
            out.set(i, j, acc[j * out.width() + i]);
        }
    }
    Some(MergedMap { grid: out, placements })
}
