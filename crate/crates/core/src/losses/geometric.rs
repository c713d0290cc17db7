//! Flattening, boundary-weighted normal agreement and cross-view depth
//! consistency.

use nalgebra::Vector3;

use super::photometric::landing_pixel;
use crate::mask::MaskBitmap;
use crate::scene::ViewRecord;
use crate::splat::depth::is_valid_depth;
use crate::splat::GaussianPrimitive;

/// Truncation of the per-pixel depth disagreement, in world units.
pub const MV_GEO_CAP: f64 = 0.5;

/// Mean over primitives of the smallest axis scale, with the gradient w.r.t.
/// each primitive's log-scales.
pub fn loss_flatten(prims: &[GaussianPrimitive]) -> (f64, Vec<Vector3<f64>>) {
    if prims.is_empty() {
        return (0.0, Vec::new());
    }
    let n = prims.len() as f64;
    let mut total = 0.0;
    let grads = prims
        .iter()
        .map(|p| {
            let mut g = Vector3::zeros();
            let axis = p.normal_axis();
            let s = p.log_scale[axis].exp();
            total += s;
            g[axis] = s / n;
            g
        })
        .collect();
    (total / n, grads)
}

/// Gradients of [`loss_ban`].
pub struct BanGrad {
    /// W.r.t. the depth-derived unit normals.
    pub depth_normal: Vec<Option<Vector3<f64>>>,
    /// W.r.t. the raw blended normal buffer (interleaved).
    pub rendered_normal: Vec<f64>,
}

/// `sum_i w_i |n_depth,i - n_rendered,i / |n_rendered,i||^2 / #{i : w_i > 0}`
/// over pixels where both normals exist.
pub fn loss_ban(n_depth: &[Option<Vector3<f64>>], n_rendered: &[f64], ban_w: &[f64]) -> (f64, BanGrad) {
    let n = ban_w.len();
    let mut grad = BanGrad {
        depth_normal: vec![None; n],
        rendered_normal: vec![0.0; 3 * n],
    };
    let usable = |i: usize| -> Option<(Vector3<f64>, Vector3<f64>, f64)> {
        let nd = n_depth[i]?;
        let raw = Vector3::new(n_rendered[3 * i], n_rendered[3 * i + 1], n_rendered[3 * i + 2]);
        let len = raw.norm();
        (ban_w[i] > 0.0 && len > 0.0).then_some((nd, raw / len, len))
    };
    let count = (0..n).filter(|&i| usable(i).is_some()).count();
    if count == 0 {
        return (0.0, grad);
    }
    let inv = 1.0 / count as f64;
    let mut sum = 0.0;
    for i in 0..n {
        let Some((nd, m, len)) = usable(i) else {
            continue;
        };
        let r = nd - m;
        sum += ban_w[i] * r.norm_squared();
        let gr = 2.0 * ban_w[i] * inv * r;
        grad.depth_normal[i] = Some(gr);
        let gm = -gr;
        let graw = (gm - m * m.dot(&gm)) / len;
        for c in 0..3 {
            grad.rendered_normal[3 * i + c] = graw[c];
        }
    }
    (sum * inv, grad)
}

/// Back-project masked pixels of A through A's depth, project into B and
/// compare the projected depth with B's depth at the landing pixel. Returns
/// the mean truncated absolute difference and its gradient w.r.t. A's depth
/// (B's depth is held fixed).
pub fn loss_mv_geo(
    view_a: &ViewRecord,
    view_b: &ViewRecord,
    depth_a: &[f64],
    depth_b: &[f64],
    rbm_a: &MaskBitmap,
) -> (f64, Vec<f64>) {
    let (w, h) = (view_a.width(), view_a.height());
    let mut grad = vec![0.0; w * h];
    let k = &view_a.intrinsics;
    let rel = view_b.rotation * view_a.rotation.transpose();
    let mut terms: Vec<(usize, f64, f64)> = Vec::new();
    let mut sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !rbm_a.bits[i] || !is_valid_depth(depth_a[i]) {
                continue;
            }
            let ray = k.unproject_dir(x as f64, y as f64);
            let world = view_a.rotation.transpose() * (depth_a[i] * ray) + view_a.center;
            let Some((j, zb)) = landing_pixel(view_b, &world) else {
                continue;
            };
            if !is_valid_depth(depth_b[j]) {
                continue;
            }
            let diff = zb - depth_b[j];
            if diff.abs() < MV_GEO_CAP {
                sum += diff.abs();
                terms.push((i, diff.signum(), (rel * ray).z));
            } else {
                sum += MV_GEO_CAP;
                terms.push((i, 0.0, 0.0));
            }
        }
    }
    if terms.is_empty() {
        log::warn!("geometric consistency: no valid correspondences");
        return (0.0, grad);
    }
    let inv = 1.0 / terms.len() as f64;
    for (i, s, dz) in terms {
        grad[i] = s * dz * inv;
    }
    (sum * inv, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::CameraIntrinsics;
    use nalgebra::{Matrix3, Vector4};

    fn prim(scale: [f64; 3]) -> GaussianPrimitive {
        GaussianPrimitive::new(
            Vector3::zeros(),
            Vector3::from(scale),
            Vector4::new(1.0, 0.0, 0.0, 0.0),
            0.5,
            [0.5; 3],
        )
    }

    #[test]
    fn flatten_examples() {
        assert!(loss_flatten(&[prim([1.0, 1.0, 1e-8])]).0 < 1e-7);
        assert!((loss_flatten(&[prim([2.0, 3.0, 4.0])]).0 - 2.0).abs() < 1e-12);
        let ps = [prim([0.1, 1.0, 1.0]), prim([1.0, 0.2, 1.0]), prim([1.0, 1.0, 0.3])];
        let (l, g) = loss_flatten(&ps);
        assert!((l - 0.2).abs() < 1e-12);
        assert!((g[1][1] - 0.2 / 3.0).abs() < 1e-12);
        assert_eq!(g[1][0], 0.0);
    }

    #[test]
    fn ban_examples() {
        let n = Vector3::new(0.0, 0.0, -1.0);
        let (l, _) = loss_ban(&[Some(n)], &[0.0, 0.0, -2.0], &[1.0]);
        assert_eq!(l, 0.0);
        let (l, _) = loss_ban(&[Some(n)], &[0.0, 0.0, 3.0], &[1.0]);
        assert!((l - 4.0).abs() < 1e-12);
        let (l, _) = loss_ban(&[Some(n), Some(n), Some(n)], &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0], &[1.0, 0.1, 0.0]);
        assert!((l - 2.2).abs() < 1e-12);
        // Sentinel pixels drop out of the denominator too.
        let (l, _) = loss_ban(&[Some(n), None], &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0], &[1.0, 1.0]);
        assert!((l - 4.0).abs() < 1e-12);
    }

    #[test]
    fn ban_gradient_matches_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let nd: Vec<Option<Vector3<f64>>> = (0..6)
            .map(|_| Some(Vector3::new(rng.gen(), rng.gen(), rng.gen::<f64>() - 1.5).normalize()))
            .collect();
        let raw: Vec<f64> = (0..18).map(|_| rng.gen::<f64>() - 0.5).collect();
        let w = [1.0, 0.1, 1.0, 0.0, 1.0, 0.1];
        let (_, g) = loss_ban(&nd, &raw, &w);
        for i in 0..18 {
            let h = 1e-6;
            let mut p = raw.clone();
            p[i] += h;
            let mut q = raw.clone();
            q[i] -= h;
            let fd = (loss_ban(&nd, &p, &w).0 - loss_ban(&nd, &q, &w).0) / (2.0 * h);
            assert!((fd - g.rendered_normal[i]).abs() < 1e-7, "{i}");
        }
        let gd = g.depth_normal[2].unwrap();
        for c in 0..3 {
            let h = 1e-6;
            let mut p = nd.clone();
            p[2] = Some(p[2].unwrap() + Vector3::ith(c, h));
            let mut q = nd.clone();
            q[2] = Some(q[2].unwrap() - Vector3::ith(c, h));
            let fd = (loss_ban(&p, &raw, &w).0 - loss_ban(&q, &raw, &w).0) / (2.0 * h);
            assert!((fd - gd[c]).abs() < 1e-7);
        }
    }

    fn pair() -> (ViewRecord, ViewRecord) {
        let k = CameraIntrinsics::new(40.0, 40.0, 20.0, 15.0, 40, 30);
        let a = ViewRecord::new(0, "a.png", Matrix3::identity(), Vector3::zeros(), k);
        let b = ViewRecord::new(1, "b.png", Matrix3::identity(), Vector3::new(0.3, 0.0, 0.0), k);
        (a, b)
    }

    #[test]
    fn consistent_plane_is_zero_and_bias_is_recovered() {
        let (a, b) = pair();
        let da = vec![5.0; 1200];
        let m = MaskBitmap::full(40, 30);
        assert_eq!(loss_mv_geo(&a, &b, &da, &da.clone(), &m).0, 0.0);
        let delta = 0.07;
        let db = vec![5.0 + delta; 1200];
        assert!((loss_mv_geo(&a, &b, &da, &db, &m).0 - delta).abs() < 1e-12);
        let far = vec![9.0; 1200];
        assert!((loss_mv_geo(&a, &b, &da, &far, &m).0 - MV_GEO_CAP).abs() < 1e-12);
    }

    #[test]
    fn geo_gradient_matches_differences() {
        let (a, mut b) = pair();
        b.rotation = crate::scene::quaternion_to_rotation(0.995, 0.0, 0.0998, 0.0);
        let da: Vec<f64> = (0..1200).map(|i| 5.0 + 0.001 * (i % 40) as f64).collect();
        let db: Vec<f64> = (0..1200).map(|i| 5.1 + 0.002 * (i / 40) as f64).collect();
        let m = MaskBitmap::full(40, 30);
        let (_, g) = loss_mv_geo(&a, &b, &da, &db, &m);
        let mut checked = 0;
        for i in (0..1200).step_by(37) {
            let h = 1e-7;
            let mut p = da.clone();
            p[i] += h;
            let mut q = da.clone();
            q[i] -= h;
            let (lp, gp) = loss_mv_geo(&a, &b, &p, &db, &m);
            let (lq, _) = loss_mv_geo(&a, &b, &q, &db, &m);
            // Skip probes that move the landing pixel.
            if gp[i] != g[i] {
                continue;
            }
            let fd = (lp - lq) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6, "{i}: {fd} vs {}", g[i]);
            checked += 1;
        }
        assert!(checked > 20);
    }

    #[test]
    fn no_correspondence_is_zero() {
        let (a, b) = pair();
        let m = MaskBitmap::empty(40, 30);
        assert_eq!(loss_mv_geo(&a, &b, &[5.0; 1200], &[5.0; 1200], &m).0, 0.0);
    }
}
