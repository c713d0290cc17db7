//! EWA projection of 3D Gaussians to screen-space splats, and its adjoint.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};

use super::gaussian::{
    eval_color, eval_color_backward, flatten_normal_signed, quat_backward, sigmoid, GaussianPrimitive,
};
use crate::scene::ViewRecord;

/// Skip threshold on per-pixel alpha.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;

#[derive(Debug, Clone)]
pub struct ProjectedSplat {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub normal_cam: Vector3<f64>,
    /// Camera-frame plane offset `n_cam . mu_cam`.
    pub dist: f64,
    /// Sort key: camera-frame z of the center.
    pub depth: f64,
    /// Conservative pixel radius outside of which alpha < [`ALPHA_MIN`].
    pub radius: f64,
    cam: Vector3<f64>,
    jw: Matrix2x3<f64>,
    normal_world: Vector3<f64>,
    normal_sign: f64,
}

/// Screen-space gradient of one splat.
#[derive(Debug, Clone, Copy, Default)]
pub struct SplatGrad {
    pub mean: Vector2<f64>,
    /// The part of `mean` coming from the blended channels, without the
    /// soft-count term. Densification reads this one.
    pub mean_blend: Vector2<f64>,
    /// Gradient w.r.t. the conic written as `[[a, b], [b, c]]`, taking `b` as one scalar.
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub normal_cam: Vector3<f64>,
    pub dist: f64,
}

impl SplatGrad {
    pub fn add(&mut self, o: &SplatGrad) {
        self.mean += o.mean;
        self.mean_blend += o.mean_blend;
        for k in 0..3 {
            self.conic[k] += o.conic[k];
        }
        self.opacity += o.opacity;
        self.color += o.color;
        self.normal_cam += o.normal_cam;
        self.dist += o.dist;
    }
}

/// Parameter-space gradient of one primitive. `mean2d_norm` is the norm of
/// the screen-space position gradient of the blended channels (the count
/// term is left out), used by densification.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveGrad {
    pub mu: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    pub rot: Vector4<f64>,
    pub opacity_logit: f64,
    pub sh: Vec<Vector3<f64>>,
    pub mean2d_norm: f64,
}

impl PrimitiveGrad {
    pub fn zeros_like(p: &GaussianPrimitive) -> Self {
        Self {
            mu: Vector3::zeros(),
            log_scale: Vector3::zeros(),
            rot: Vector4::zeros(),
            opacity_logit: 0.0,
            sh: vec![Vector3::zeros(); p.sh.len()],
            mean2d_norm: 0.0,
        }
    }

    pub fn add_scaled(&mut self, o: &PrimitiveGrad, s: f64) {
        self.mu += o.mu * s;
        self.log_scale += o.log_scale * s;
        self.rot += o.rot * s;
        self.opacity_logit += o.opacity_logit * s;
        for (a, b) in self.sh.iter_mut().zip(&o.sh) {
            *a += b * s;
        }
        self.mean2d_norm += o.mean2d_norm * s.abs();
    }

    /// Flattened in the same order as [`GaussianPrimitive::param_count`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(11 + 3 * self.sh.len());
        v.extend(self.mu.iter());
        v.extend(self.log_scale.iter());
        v.extend(self.rot.iter());
        v.push(self.opacity_logit);
        for c in &self.sh {
            v.extend(c.iter());
        }
        v
    }
}

/// Perspective Jacobian at camera-frame point `t`.
fn jacobian(t: &Vector3<f64>, fx: f64, fy: f64) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    Matrix2x3::new(fx * iz, 0.0, -fx * t.x * iz * iz, 0.0, fy * iz, -fy * t.y * iz * iz)
}

/// Largest eigenvalue of a symmetric 2x2 matrix.
pub fn max_eigenvalue(m: &Matrix2<f64>) -> f64 {
    let mid = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let det = m.determinant();
    mid + (mid * mid - det).max(0.0).sqrt()
}

/// Project `prim` into `view`. Returns `None` when the center is within the
/// near plane or the splat can never reach the alpha threshold.
pub fn project_gaussian(
    prim: &GaussianPrimitive,
    view: &ViewRecord,
    near: f64,
    low_pass: f64,
) -> Option<ProjectedSplat> {
    let k = &view.intrinsics;
    let w = view.rotation;
    let cam = view.world_to_camera(&prim.mu);
    if cam.z <= near {
        return None;
    }
    let jw = jacobian(&cam, k.fx, k.fy) * w;
    let cov = jw * prim.covariance() * jw.transpose() + Matrix2::identity() * low_pass;
    let det = cov.determinant();
    if !(det > 0.0) {
        return None;
    }
    let conic = cov.try_inverse()?;
    let opacity = prim.opacity();
    if opacity < ALPHA_MIN {
        return None;
    }
    let lmax = max_eigenvalue(&cov);
    let q_cut = 2.0 * (255.0 * opacity).ln();
    let radius = (9.0f64.max(q_cut) * lmax).sqrt();
    let (normal_world, normal_sign) = flatten_normal_signed(prim, view);
    let normal_cam = w * normal_world;
    Some(ProjectedSplat {
        mean: Vector2::new(k.fx * cam.x / cam.z + k.cx, k.fy * cam.y / cam.z + k.cy),
        cov,
        conic,
        opacity,
        color: eval_color(prim, &view.center),
        dist: normal_cam.dot(&cam),
        normal_cam,
        depth: cam.z,
        radius,
        cam,
        jw,
        normal_world,
        normal_sign,
    })
}

/// Chain a splat gradient back to the primitive's parameters.
pub fn project_backward(
    prim: &GaussianPrimitive,
    view: &ViewRecord,
    splat: &ProjectedSplat,
    g: &SplatGrad,
) -> PrimitiveGrad {
    let k = &view.intrinsics;
    let w = view.rotation;
    let t = splat.cam;
    let (fx, fy) = (k.fx, k.fy);
    let iz = 1.0 / t.z;

    // Conic -> 2D covariance: dA = -A dS A.
    let ga = Matrix2::new(g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2]);
    let a = splat.conic;
    let g_cov2 = -(a * ga * a);

    // 2D covariance -> (JW, Sigma3).
    let rot = prim.rotation();
    let s = prim.scale();
    let m = rot * Matrix3::from_diagonal(&s);
    let sigma = m * m.transpose();
    let jw = splat.jw;
    let g_sigma = jw.transpose() * g_cov2 * jw;
    let g_jw = 2.0 * g_cov2 * jw * sigma;
    let g_j = g_jw * w.transpose();

    // J and the 2D mean -> camera point.
    let mut gt = Vector3::zeros();
    gt.x += g_j[(0, 2)] * (-fx * iz * iz);
    gt.y += g_j[(1, 2)] * (-fy * iz * iz);
    gt.z += g_j[(0, 0)] * (-fx * iz * iz)
        + g_j[(0, 2)] * (2.0 * fx * t.x * iz * iz * iz)
        + g_j[(1, 1)] * (-fy * iz * iz)
        + g_j[(1, 2)] * (2.0 * fy * t.y * iz * iz * iz);
    gt.x += g.mean.x * fx * iz;
    gt.y += g.mean.y * fy * iz;
    gt.z += -g.mean.x * fx * t.x * iz * iz - g.mean.y * fy * t.y * iz * iz;

    // Plane offset d = n_world . (mu - C); n_cam = W n_world.
    let rel = prim.mu - view.center;
    let mut g_nworld = w.transpose() * g.normal_cam + rel * g.dist;
    let mut g_mu = w.transpose() * gt + splat.normal_world * g.dist;

    // Sigma3 = M M^T, M = R S.
    let g_m = 2.0 * g_sigma * m;
    let mut g_rot = g_m * Matrix3::from_diagonal(&s);
    let rtgm = rot.transpose() * g_m;
    let g_log_scale = Vector3::new(rtgm[(0, 0)] * s.x, rtgm[(1, 1)] * s.y, rtgm[(2, 2)] * s.z);

    // Normal is a signed rotation column.
    let axis = prim.normal_axis();
    g_nworld *= splat.normal_sign;
    for r in 0..3 {
        g_rot[(r, axis)] += g_nworld[r];
    }
    let g_quat = quat_backward(&prim.rot, &g_rot);

    let (g_sh, g_mu_color) = eval_color_backward(prim, &view.center, &g.color);
    g_mu += g_mu_color;

    let o = sigmoid(prim.opacity_logit);
    PrimitiveGrad {
        mu: g_mu,
        log_scale: g_log_scale,
        rot: g_quat,
        opacity_logit: g.opacity * o * (1.0 - o),
        sh: g_sh,
        mean2d_norm: g.mean_blend.norm(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::CameraIntrinsics;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, StandardNormal};

    fn view(fx: f64) -> ViewRecord {
        ViewRecord::new(
            0,
            "v.png",
            Matrix3::identity(),
            Vector3::zeros(),
            CameraIntrinsics::new(fx, fx, 32.0, 32.0, 64, 64),
        )
    }

    #[test]
    fn isotropic_on_axis_is_isotropic() {
        let p = GaussianPrimitive::new(
            Vector3::new(0.0, 0.0, 5.0),
            Vector3::new(0.3, 0.3, 0.3),
            Vector4::new(0.3, 0.1, -0.7, 0.2),
            0.8,
            [0.2; 3],
        );
        let s = project_gaussian(&p, &view(50.0), 0.01, 0.3).unwrap();
        assert!(s.cov[(0, 1)].abs() < 1e-9);
        assert!((s.cov[(0, 0)] - s.cov[(1, 1)]).abs() < 1e-9);
    }

    #[test]
    fn focal_scales_offset() {
        let p = GaussianPrimitive::new(
            Vector3::new(0.4, -0.3, 5.0),
            Vector3::new(0.1, 0.2, 0.3),
            Vector4::new(1.0, 0.0, 0.0, 0.0),
            0.8,
            [0.2; 3],
        );
        let a = project_gaussian(&p, &view(50.0), 0.01, 0.3).unwrap();
        let b = project_gaussian(&p, &view(100.0), 0.01, 0.3).unwrap();
        let c = Vector2::new(32.0, 32.0);
        assert!(((b.mean - c) - 2.0 * (a.mean - c)).norm() < 1e-12);
    }

    #[test]
    fn behind_near_plane_is_culled() {
        let p = GaussianPrimitive::new(
            Vector3::new(0.0, 0.0, 0.005),
            Vector3::new(0.1, 0.1, 0.1),
            Vector4::new(1.0, 0.0, 0.0, 0.0),
            0.8,
            [0.2; 3],
        );
        assert!(project_gaussian(&p, &view(50.0), 0.01, 0.3).is_none());
    }

    #[test]
    fn covariance_matches_monte_carlo() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let p = GaussianPrimitive::new(
            Vector3::new(0.3, -0.2, 6.0),
            Vector3::new(0.05, 0.12, 0.03),
            Vector4::new(0.8, 0.3, -0.4, 0.2),
            0.8,
            [0.2; 3],
        );
        let v = view(80.0);
        let s = project_gaussian(&p, &v, 0.01, 0.0).unwrap();
        let m = p.rotation() * Matrix3::from_diagonal(&p.scale());
        let n = 1_000_000;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let z = Vector3::new(
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            );
            let x = p.mu + m * z;
            let pr = crate::scene::project_point(&x, &v);
            samples.push(Vector2::new(pr.u, pr.v));
        }
        let mean = samples.iter().sum::<Vector2<f64>>() / n as f64;
        let mut cov = Matrix2::zeros();
        for x in &samples {
            let d = x - mean;
            cov += d * d.transpose();
        }
        cov /= n as f64;
        let rel = (cov - s.cov).norm() / s.cov.norm();
        assert!(rel < 0.02, "relative Frobenius error {rel}");
        let _ = rng.gen::<f64>();
    }
}
