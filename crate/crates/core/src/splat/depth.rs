//! Unbiased (ray-plane) depth from the blended normal and distance buffers,
//! and normals recovered from depth by central differences.

use nalgebra::Vector3;

use super::raster::RenderedBuffers;
use crate::scene::ViewRecord;

/// Marker for pixels without a defined depth.
pub const INVALID_DEPTH: f64 = 0.0;

const DENOM_EPS: f64 = 1e-6;

#[inline]
pub fn is_valid_depth(d: f64) -> bool {
    d > 0.0 && d.is_finite()
}

/// `depth(p) = D(p) / (N(p) . K^-1 p~)` on covered pixels. The blended normal
/// is used as is, matching the blended plane offset. Returns the depth map
/// and the number of covered pixels that fell back to the sentinel.
pub fn compute_depth_map(b: &RenderedBuffers, view: &ViewRecord) -> (Vec<f64>, usize) {
    let k = &view.intrinsics;
    let mut depth = vec![INVALID_DEPTH; b.width * b.height];
    let mut degenerate = 0;
    for y in 0..b.height {
        for x in 0..b.width {
            let i = y * b.width + x;
            if b.count[i] == 0 {
                continue;
            }
            let ray = k.unproject_dir(x as f64, y as f64);
            let denom = b.normal_at(i).dot(&ray);
            let d = b.distance[i] / denom;
            if denom.abs() <= DENOM_EPS || !is_valid_depth(d) {
                degenerate += 1;
                continue;
            }
            depth[i] = d;
        }
    }
    (depth, degenerate)
}

/// Chain a depth gradient into gradients on the blended normal and distance.
/// Accumulates into `g_normal` (3 per pixel) and `g_distance`.
pub fn depth_backward(
    b: &RenderedBuffers,
    view: &ViewRecord,
    g_depth: &[f64],
    g_normal: &mut [f64],
    g_distance: &mut [f64],
) {
    let k = &view.intrinsics;
    for y in 0..b.height {
        for x in 0..b.width {
            let i = y * b.width + x;
            if g_depth[i] == 0.0 || !is_valid_depth(b.depth[i]) {
                continue;
            }
            let ray = k.unproject_dir(x as f64, y as f64);
            let denom = b.normal_at(i).dot(&ray);
            g_distance[i] += g_depth[i] / denom;
            let s = -g_depth[i] * b.distance[i] / (denom * denom);
            for c in 0..3 {
                g_normal[3 * i + c] += s * ray[c];
            }
        }
    }
}

/// Camera-frame normals from depth, `normalize((P_down - P_up) x (P_right - P_left))`,
/// which faces the camera (negative z for a fronto-parallel plane). Pixels on
/// the border or next to an invalid depth get `None`.
pub fn depth_to_normal(depth: &[f64], view: &ViewRecord) -> Vec<Option<Vector3<f64>>> {
    let (w, h) = (view.width(), view.height());
    let k = &view.intrinsics;
    let point = |x: usize, y: usize| depth[y * w + x] * k.unproject_dir(x as f64, y as f64);
    let mut out = vec![None; w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let nb = [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1), (x, y)];
            if nb.iter().any(|&(a, b)| !is_valid_depth(depth[b * w + a])) {
                continue;
            }
            let a = point(x, y + 1) - point(x, y - 1);
            let b = point(x + 1, y) - point(x - 1, y);
            let c = a.cross(&b);
            let len = c.norm();
            if len > 0.0 {
                out[y * w + x] = Some(c / len);
            }
        }
    }
    out
}

/// Backward of [`depth_to_normal`]: accumulates into `g_depth` from per-pixel
/// gradients on the returned unit normals.
pub fn depth_to_normal_backward(
    depth: &[f64],
    view: &ViewRecord,
    g_normal: &[Option<Vector3<f64>>],
    g_depth: &mut [f64],
) {
    let (w, h) = (view.width(), view.height());
    let k = &view.intrinsics;
    let ray = |x: usize, y: usize| k.unproject_dir(x as f64, y as f64);
    let point = |x: usize, y: usize| depth[y * w + x] * ray(x, y);
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let Some(gn) = g_normal[y * w + x] else {
                continue;
            };
            let nb = [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1), (x, y)];
            if nb.iter().any(|&(a, b)| !is_valid_depth(depth[b * w + a])) {
                continue;
            }
            let a = point(x, y + 1) - point(x, y - 1);
            let b = point(x + 1, y) - point(x - 1, y);
            let c = a.cross(&b);
            let len = c.norm();
            if len == 0.0 {
                continue;
            }
            let n = c / len;
            let gc = (gn - n * n.dot(&gn)) / len;
            let ga = b.cross(&gc);
            let gb = gc.cross(&a);
            g_depth[(y + 1) * w + x] += ga.dot(&ray(x, y + 1));
            g_depth[(y - 1) * w + x] -= ga.dot(&ray(x, y - 1));
            g_depth[y * w + x + 1] += gb.dot(&ray(x + 1, y));
            g_depth[y * w + x - 1] -= gb.dot(&ray(x - 1, y));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::CameraIntrinsics;
    use nalgebra::Matrix3;

    fn view() -> ViewRecord {
        ViewRecord::new(
            0,
            "v.png",
            Matrix3::identity(),
            Vector3::zeros(),
            CameraIntrinsics::new(30.0, 30.0, 12.0, 10.0, 24, 20),
        )
    }

    #[test]
    fn fronto_parallel_depth_faces_camera() {
        let v = view();
        let d = vec![5.0; 24 * 20];
        let n = depth_to_normal(&d, &v);
        for y in 1..19 {
            for x in 1..23 {
                let nn = n[y * 24 + x].unwrap();
                assert!((nn - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
            }
        }
        assert!(n[0].is_none());
    }

    #[test]
    fn ramp_matches_plane_normal() {
        // Plane y_cam - z_cam = -5 (45 degree tilt about x): z = 5 / (1 - ry)
        let v = view();
        let k = v.intrinsics;
        let mut d = vec![0.0; 24 * 20];
        for y in 0..20 {
            for x in 0..24 {
                let r = k.unproject_dir(x as f64, y as f64);
                d[y * 24 + x] = 5.0 / (1.0 - r.y);
            }
        }
        let expected = Vector3::new(0.0, 1.0, -1.0).normalize();
        let n = depth_to_normal(&d, &v);
        for y in 1..19 {
            for x in 1..23 {
                let nn = n[y * 24 + x].unwrap();
                assert!((nn - expected).norm() < 1e-4, "{nn}");
            }
        }
    }

    #[test]
    fn invalid_neighbor_propagates() {
        let v = view();
        let mut d = vec![5.0; 24 * 20];
        d[5 * 24 + 5] = INVALID_DEPTH;
        let n = depth_to_normal(&d, &v);
        assert!(n[5 * 24 + 6].is_none());
        assert!(n[4 * 24 + 5].is_none());
        assert!(n[5 * 24 + 5].is_none());
        assert!(n[7 * 24 + 7].is_some());
    }

    #[test]
    fn normal_backward_matches_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let v = view();
        let depth: Vec<f64> = (0..24 * 20).map(|_| 4.0 + rng.gen::<f64>()).collect();
        let g: Vec<Option<Vector3<f64>>> = (0..24 * 20)
            .map(|_| Some(Vector3::new(rng.gen(), rng.gen(), rng.gen())))
            .collect();
        let loss = |d: &[f64]| -> f64 {
            depth_to_normal(d, &v)
                .iter()
                .zip(&g)
                .filter_map(|(n, g)| n.map(|n| n.dot(&g.unwrap())))
                .sum()
        };
        let mut an = vec![0.0; depth.len()];
        depth_to_normal_backward(&depth, &v, &g, &mut an);
        for i in [30usize, 100, 211, 333] {
            let h = 1e-6;
            let mut p = depth.clone();
            p[i] += h;
            let mut m = depth.clone();
            m[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - an[i]).abs() < 1e-5 * (1.0 + fd.abs()), "{fd} vs {}", an[i]);
        }
    }
}
