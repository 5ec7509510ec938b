//! Grid traversal along a ray (Amanatides & Woo), in cell units.

/// Visits every cell the segment from `start` to `end` passes through, in order.
///
/// Coordinates are continuous cell coordinates: cell `(i, j)` covers
/// `[i, i+1) x [j, j+1)`. The callback receives the cell and the parametric
/// distance (in cell units) at which the segment enters it, and returns
/// `false` to stop early.
pub fn traverse<F>(start: (f64, f64), end: (f64, f64), mut visit: F)
where
    F: FnMut(i64, i64, f64) -> bool,
{
    let (x0, y0) = start;
    let (dx, dy) = (end.0 - x0, end.1 - y0);
    let len = dx.hypot(dy);
    let mut i = x0.floor() as i64;
    let mut j = y0.floor() as i64;
    if !visit(i, j, 0.0) || len == 0.0 {
        return;
    }
    let (ux, uy) = (dx / len, dy / len);
    let step_i: i64 = if ux > 0.0 { 1 } else { -1 };
    let step_j: i64 = if uy > 0.0 { 1 } else { -1 };
    let t_delta_x = if ux != 0.0 { (1.0 / ux).abs() } else { f64::INFINITY };
    let t_delta_y = if uy != 0.0 { (1.0 / uy).abs() } else { f64::INFINITY };
    let mut t_max_x = if ux > 0.0 {
        ((i + 1) as f64 - x0) / ux
    } else if ux < 0.0 {
        (i as f64 - x0) / ux
    } else {
        f64::INFINITY
    };
    let mut t_max_y = if uy > 0.0 {
        ((j + 1) as f64 - y0) / uy
    } else if uy < 0.0 {
        (j as f64 - y0) / uy
    } else {
        f64::INFINITY
    };
    loop {
        let t = if t_max_x < t_max_y {
            let t = t_max_x;
            t_max_x += t_delta_x;
            i += step_i;
            t
        } else {
            let t = t_max_y;
            t_max_y += t_delta_y;
            j += step_j;
            t
        };
        if t > len {
            return;
        }
        if !visit(i, j, t) {
            return;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn horizontal_ray_visits_consecutive_cells() {
        let mut cells = vec![];
        traverse((0.5, 0.5), (3.5, 0.5), |i, j, _| {
            cells.push((i, j));
            true
        });
        assert_eq!(cells, vec![(0, 0), (1, 0), (2, 0), (3, 0)]);
    }

    #[test]
    fn diagonal_ray_is_connected() {
        let mut cells = vec![];
        traverse((0.2, 0.3), (4.7, 3.1), |i, j, _| {
            cells.push((i, j));
            true
        });
        for w in cells.windows(2) {
            let d = (w[1].0 - w[0].0).abs() + (w[1].1 - w[0].1).abs();
            assert_eq!(d, 1);
        }
        assert_eq!(*cells.last().unwrap(), (4, 3));
    }

    #[test]
    fn entry_distance_matches_boundary() {
        let mut hit = None;
        traverse((0.5, 0.5), (10.0, 0.5), |i, _, t| {
            if i == 3 {
                hit = Some(t);
                return false;
            }
            true
        });
        assert!((hit.unwrap() - 2.5).abs() < 1e-12);
    }
}
