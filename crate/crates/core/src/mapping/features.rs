//! Corner features on the thresholded occupancy image.
//!
//! Keypoints are Harris responses of the binary "occupied" image. Each one
//! carries an 8x8 binary occupancy patch sampled in a frame steered by the
//! local occupancy centroid, so descriptors survive map rotation.

use serde::{Deserialize, Serialize};

use super::grid::{classify, CellClass, OccupancyGrid};
use crate::geometry::Vec2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureParams {
    /// Harris `k`.
    pub harris_k: f64,
    /// Minimum Harris response for a keypoint.
    pub min_response: f64,
    /// Non-maximum suppression radius, cells.
    pub nms_radius: usize,
    /// Radius of the disk used for the orientation centroid, cells.
    pub orientation_radius: i64,
    /// Spacing of descriptor samples, cells.
    pub patch_step: f64,
    pub max_features: usize,
    /// `|log-odds|` above which a cell counts as known.
    pub known_eps: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        FeatureParams {
            harris_k: 0.04,
            min_response: 2.0,
            nms_radius: 2,
            orientation_radius: 15,
            patch_step: 4.0,
            max_features: 400,
            known_eps: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridFeature {
    /// Map-frame position of the keypoint cell center.
    pub position: Vec2,
    pub cell: (usize, usize),
    /// Patch orientation in the grid frame, radians.
    pub orientation: f64,
    pub response: f64,
    /// Row-major 8x8 occupancy bits.
    pub descriptor: u64,
}

impl GridFeature {
    pub fn hamming(&self, other: &GridFeature) -> u32 {
        (self.descriptor ^ other.descriptor).count_ones()
    }
}

/// Binary occupancy image restricted to a window of a grid.
struct Image {
    i0: usize,
    j0: usize,
    w: usize,
    h: usize,
    occ: Vec<f64>,
}

impl Image {
    fn at(&self, x: i64, y: i64) -> f64 {
        if x < 0 || y < 0 || x >= self.w as i64 || y >= self.h as i64 {
            return 0.0;
        }
        self.occ[y as usize * self.w + x as usize]
    }
}

fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn blur(src: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let xx = x as i64 + k as i64 - r;
                if xx >= 0 && xx < w as i64 {
                    acc += kv * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let yy = y as i64 + k as i64 - r;
                if yy >= 0 && yy < h as i64 {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

pub fn extract_features(grid: &OccupancyGrid, params: &FeatureParams) -> Vec<GridFeature> {
    let Some((bi0, bj0, bi1, bj1)) = grid.known_bounds(params.known_eps) else {
        return Vec::new();
    };
    let pad = (params.orientation_radius.max(0) as usize).max((params.patch_step * 5.0).ceil() as usize);
    let i0 = bi0.saturating_sub(pad);
    let j0 = bj0.saturating_sub(pad);
    let i1 = (bi1 + pad).min(grid.width() - 1);
    let j1 = (bj1 + pad).min(grid.height() - 1);
    let (w, h) = (i1 - i0 + 1, j1 - j0 + 1);
    let mut occ = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            if classify(grid.get(i0 + x, j0 + y)) == CellClass::Occupied {
                occ[y * w + x] = 1.0;
            }
        }
    }
    let img = Image { i0, j0, w, h, occ };

    let mut ixx = vec![0.0; w * h];
    let mut iyy = vec![0.0; w * h];
    let mut ixy = vec![0.0; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let gx = (img.at(x + 1, y - 1) + 2.0 * img.at(x + 1, y) + img.at(x + 1, y + 1))
                - (img.at(x - 1, y - 1) + 2.0 * img.at(x - 1, y) + img.at(x - 1, y + 1));
            let gy = (img.at(x - 1, y + 1) + 2.0 * img.at(x, y + 1) + img.at(x + 1, y + 1))
                - (img.at(x - 1, y - 1) + 2.0 * img.at(x, y - 1) + img.at(x + 1, y - 1));
            let idx = y as usize * w + x as usize;
            ixx[idx] = gx * gx;
            iyy[idx] = gy * gy;
            ixy[idx] = gx * gy;
        }
    }
    let kernel = gaussian_kernel(1.5, 3);
    let sxx = blur(&ixx, w, h, &kernel);
    let syy = blur(&iyy, w, h, &kernel);
    let sxy = blur(&ixy, w, h, &kernel);
    let response: Vec<f64> = (0..w * h)
        .map(|k| {
            let tr = sxx[k] + syy[k];
            sxx[k] * syy[k] - sxy[k] * sxy[k] - params.harris_k * tr * tr
        })
        .collect();

    let r = params.nms_radius as i64;
    let mut feats = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let idx = y as usize * w + x as usize;
            let v = response[idx];
            if v < params.min_response {
                continue;
            }
            let (gi, gj) = (img.i0 + x as usize, img.j0 + y as usize);
            if !grid.is_known(gi, gj, params.known_eps) {
                continue;
            }
            let mut is_max = true;
            'nms: for dy in -r..=r {
                for dx in -r..=r {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (xx, yy) = (x + dx, y + dy);
                    if xx < 0 || yy < 0 || xx >= w as i64 || yy >= h as i64 {
                        continue;
                    }
                    let nv = response[yy as usize * w + xx as usize];
                    // Plateau ties go to the earliest cell in row-major order.
                    let earlier = (yy, xx) < (y, x);
                    if nv > v || (nv == v && earlier) {
                        is_max = false;
                        break 'nms;
                    }
                }
            }
            if !is_max {
                continue;
            }
            let orientation = centroid_orientation(&img, x, y, params.orientation_radius);
            let descriptor = steered_patch(&img, x as f64, y as f64, orientation, params.patch_step);
            feats.push(GridFeature {
                position: grid.cell_center(gi, gj),
                cell: (gi, gj),
                orientation,
                response: v,
                descriptor,
            });
        }
    }
    feats.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then((a.cell.1, a.cell.0).cmp(&(b.cell.1, b.cell.0)))
    });
    feats.truncate(params.max_features);
    feats
}

fn centroid_orientation(img: &Image, x: i64, y: i64, radius: i64) -> f64 {
    let (mut mx, mut my) = (0.0, 0.0);
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if dx * dx + dy * dy > radius * radius {
                continue;
            }
            let v = img.at(x + dx, y + dy);
            mx += dx as f64 * v;
            my += dy as f64 * v;
        }
    }
    if mx.abs() < 1e-9 && my.abs() < 1e-9 {
        0.0
    } else {
        my.atan2(mx)
    }
}

fn steered_patch(img: &Image, x: f64, y: f64, theta: f64, step: f64) -> u64 {
    let (s, c) = theta.sin_cos();
    let mut bits = 0u64;
    for row in 0..8 {
        for col in 0..8 {
            let u = (col as f64 - 3.5) * step;
            let v = (row as f64 - 3.5) * step;
            let px = x + 0.5 + c * u - s * v;
            let py = y + 0.5 + s * u + c * v;
            if img.at(px.floor() as i64, py.floor() as i64) > 0.5 {
                bits |= 1 << (row * 8 + col);
            }
        }
    }
    bits
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose2;

    fn free_grid() -> OccupancyGrid {
        let mut g = OccupancyGrid::new(Pose2::IDENTITY, 0.1, 80, 80);
        for j in 0..80 {
            for i in 0..80 {
                g.set(i, j, -2.0);
            }
        }
        g
    }

    #[test]
    fn unknown_grid_has_no_features() {
        let g = OccupancyGrid::new(Pose2::IDENTITY, 0.1, 50, 50);
        assert!(extract_features(&g, &FeatureParams::default()).is_empty());
    }

    #[test]
    fn flat_free_map_has_no_features() {
        assert!(extract_features(&free_grid(), &FeatureParams::default()).is_empty());
    }

    #[test]
    fn rectangle_yields_corner_features() {
        let mut g = free_grid();
        for j in 30..50 {
            for i in 20..60 {
                g.set(i, j, 2.0);
            }
        }
        let feats = extract_features(&g, &FeatureParams::default());
        let corners = [(20.0, 30.0), (60.0, 30.0), (20.0, 50.0), (60.0, 50.0)];
        for (cx, cy) in corners {
            let p = Vec2::new(cx * 0.1, cy * 0.1);
            let near = feats.iter().any(|f| f.position.dist(p) < 0.35);
            assert!(near, "no feature near corner {:?}: {:?}", p, feats.iter().map(|f| f.position).collect::<Vec<_>>());
        }
    }

    #[test]
    fn ordering_is_deterministic() {
        let mut g = free_grid();
        for j in 10..20 {
            for i in 10..25 {
                g.set(i, j, 2.0);
            }
        }
        let a = extract_features(&g, &FeatureParams::default());
        let b = extract_features(&g.clone(), &FeatureParams::default());
        assert_eq!(a, b);
    }
}
