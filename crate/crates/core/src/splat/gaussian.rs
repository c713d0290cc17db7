use nalgebra::{Matrix3, Vector3, Vector4};

use crate::scene::ViewRecord;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// A flattened-capable 3D Gaussian. Scale is stored in log domain, opacity as
/// a logit and color as spherical-harmonics coefficients (`(deg+1)^2` RGB triples).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub mu: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    /// Quaternion `(w, x, y, z)`; normalized at every use site.
    pub rot: Vector4<f64>,
    pub opacity_logit: f64,
    pub sh: Vec<Vector3<f64>>,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl GaussianPrimitive {
    /// Degree-0 primitive with the given base color.
    pub fn new(mu: Vector3<f64>, scale: Vector3<f64>, rot: Vector4<f64>, opacity: f64, rgb: [f64; 3]) -> Self {
        Self {
            mu,
            log_scale: scale.map(f64::ln),
            rot,
            opacity_logit: logit(opacity),
            sh: vec![Vector3::new(
                (rgb[0] - 0.5) / SH_C0,
                (rgb[1] - 0.5) / SH_C0,
                (rgb[2] - 0.5) / SH_C0,
            )],
        }
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn sh_degree(&self) -> usize {
        match self.sh.len() {
            0..=1 => 0,
            2..=4 => 1,
            5..=9 => 2,
            _ => 3,
        }
    }

    pub fn unit_quaternion(&self) -> Vector4<f64> {
        let n = self.rot.norm();
        if n > 0.0 {
            self.rot / n
        } else {
            Vector4::new(1.0, 0.0, 0.0, 0.0)
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        quat_to_matrix(&self.unit_quaternion())
    }

    /// World-frame covariance `R S^2 R^T`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let m = self.rotation() * Matrix3::from_diagonal(&self.scale());
        m * m.transpose()
    }

    /// Axis of the smallest scale; equal scales resolve to the lower index.
    pub fn normal_axis(&self) -> usize {
        let s = &self.log_scale;
        let mut a = 0;
        for k in 1..3 {
            if s[k] < s[a] {
                a = k;
            }
        }
        a
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.rot.iter().all(|v| v.is_finite())
            && self.rot.norm() > 0.0
            && self.opacity_logit.is_finite()
            && self.sh.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }

    /// Number of scalar parameters.
    pub fn param_count(&self) -> usize {
        11 + 3 * self.sh.len()
    }
}

/// World-frame normal of the flattened primitive, oriented so that it faces
/// the camera (`n . (mu - center) < 0`). Returns the normal and the sign that
/// was applied to the rotation column.
pub fn flatten_normal_signed(prim: &GaussianPrimitive, view: &ViewRecord) -> (Vector3<f64>, f64) {
    let r = prim.rotation();
    let n: Vector3<f64> = r.column(prim.normal_axis()).into();
    if n.dot(&(prim.mu - view.center)) > 0.0 {
        (-n, -1.0)
    } else {
        (n, 1.0)
    }
}

pub fn flatten_normal(prim: &GaussianPrimitive, view: &ViewRecord) -> Vector3<f64> {
    flatten_normal_signed(prim, view).0
}

pub fn quat_to_matrix(q: &Vector4<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Gradient w.r.t. the raw (unnormalized) quaternion given `dL/dR`.
pub fn quat_backward(raw: &Vector4<f64>, grad_r: &Matrix3<f64>) -> Vector4<f64> {
    let norm = raw.norm();
    let q = raw / norm;
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let g = grad_r;
    let dw = Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Matrix3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x);
    let dy = Matrix3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y);
    let dz = Matrix3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0);
    let gq = Vector4::new(
        g.component_mul(&dw).sum(),
        g.component_mul(&dx).sum(),
        g.component_mul(&dy).sum(),
        g.component_mul(&dz).sum(),
    );
    (gq - q * q.dot(&gq)) / norm
}

/// Real SH basis up to degree 3 at unit direction `d` and its Jacobian.
pub fn sh_basis(d: &Vector3<f64>, n: usize) -> ([f64; 16], [[f64; 3]; 16]) {
    let (x, y, z) = (d.x, d.y, d.z);
    let mut b = [0.0; 16];
    let mut g = [[0.0; 3]; 16];
    b[0] = SH_C0;
    if n > 1 {
        b[1] = -SH_C1 * y;
        b[2] = SH_C1 * z;
        b[3] = -SH_C1 * x;
        g[1] = [0.0, -SH_C1, 0.0];
        g[2] = [0.0, 0.0, SH_C1];
        g[3] = [-SH_C1, 0.0, 0.0];
    }
    if n > 4 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b[4] = SH_C2[0] * x * y;
        b[5] = SH_C2[1] * y * z;
        b[6] = SH_C2[2] * (2.0 * zz - xx - yy);
        b[7] = SH_C2[3] * x * z;
        b[8] = SH_C2[4] * (xx - yy);
        g[4] = [SH_C2[0] * y, SH_C2[0] * x, 0.0];
        g[5] = [0.0, SH_C2[1] * z, SH_C2[1] * y];
        g[6] = [-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z];
        g[7] = [SH_C2[3] * z, 0.0, SH_C2[3] * x];
        g[8] = [2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0];
    }
    if n > 9 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b[9] = SH_C3[0] * y * (3.0 * xx - yy);
        b[10] = SH_C3[1] * x * y * z;
        b[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
        b[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
        b[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
        b[14] = SH_C3[5] * z * (xx - yy);
        b[15] = SH_C3[6] * x * (xx - 3.0 * yy);
        g[9] = [SH_C3[0] * 6.0 * x * y, SH_C3[0] * (3.0 * xx - 3.0 * yy), 0.0];
        g[10] = [SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y];
        g[11] = [
            SH_C3[2] * (-2.0 * x * y),
            SH_C3[2] * (4.0 * zz - xx - 3.0 * yy),
            SH_C3[2] * 8.0 * y * z,
        ];
        g[12] = [
            SH_C3[3] * (-6.0 * x * z),
            SH_C3[3] * (-6.0 * y * z),
            SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
        ];
        g[13] = [
            SH_C3[4] * (4.0 * zz - 3.0 * xx - yy),
            SH_C3[4] * (-2.0 * x * y),
            SH_C3[4] * 8.0 * x * z,
        ];
        g[14] = [SH_C3[5] * 2.0 * x * z, SH_C3[5] * (-2.0 * y * z), SH_C3[5] * (xx - yy)];
        g[15] = [SH_C3[6] * (3.0 * xx - 3.0 * yy), SH_C3[6] * (-6.0 * x * y), 0.0];
    }
    (b, g)
}

/// View-dependent RGB (offset by 0.5, unclamped).
pub fn eval_color(prim: &GaussianPrimitive, camera_center: &Vector3<f64>) -> Vector3<f64> {
    let n = prim.sh.len().min(16);
    let mut c = Vector3::new(0.5, 0.5, 0.5);
    if n <= 1 {
        return c + prim.sh.first().copied().unwrap_or_else(Vector3::zeros) * SH_C0;
    }
    let v = prim.mu - camera_center;
    let d = v / v.norm();
    let (b, _) = sh_basis(&d, n);
    for k in 0..n {
        c += prim.sh[k] * b[k];
    }
    c
}

/// Backward of [`eval_color`]: returns `(dL/dsh, dL/dmu)`.
pub fn eval_color_backward(
    prim: &GaussianPrimitive,
    camera_center: &Vector3<f64>,
    grad_c: &Vector3<f64>,
) -> (Vec<Vector3<f64>>, Vector3<f64>) {
    let n = prim.sh.len().min(16);
    let mut gsh = vec![Vector3::zeros(); prim.sh.len()];
    if n <= 1 {
        if let Some(g) = gsh.first_mut() {
            *g = grad_c * SH_C0;
        }
        return (gsh, Vector3::zeros());
    }
    let v = prim.mu - camera_center;
    let len = v.norm();
    let d = v / len;
    let (b, jac) = sh_basis(&d, n);
    let mut gd = Vector3::zeros();
    for k in 0..n {
        gsh[k] = grad_c * b[k];
        let s = grad_c.dot(&prim.sh[k]);
        gd += Vector3::new(jac[k][0], jac[k][1], jac[k][2]) * s;
    }
    let gmu = (gd - d * d.dot(&gd)) / len;
    (gsh, gmu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::CameraIntrinsics;

    fn view_at(center: Vector3<f64>) -> ViewRecord {
        ViewRecord::new(
            0,
            "v.png",
            Matrix3::identity(),
            center,
            CameraIntrinsics::new(50.0, 50.0, 32.0, 32.0, 64, 64),
        )
    }

    fn disk() -> GaussianPrimitive {
        GaussianPrimitive::new(
            Vector3::zeros(),
            Vector3::new(1.0, 1.0, 0.01),
            Vector4::new(1.0, 0.0, 0.0, 0.0),
            0.5,
            [0.5; 3],
        )
    }

    #[test]
    fn disk_normal_faces_camera() {
        let n = flatten_normal(&disk(), &view_at(Vector3::new(0.0, 0.0, 5.0)));
        assert_eq!(n, Vector3::new(0.0, 0.0, 1.0));
        let n = flatten_normal(&disk(), &view_at(Vector3::new(0.0, 0.0, -5.0)));
        assert_eq!(n, Vector3::new(0.0, 0.0, -1.0));
    }

    #[test]
    fn equal_scales_pick_lowest_axis() {
        let mut p = disk();
        p.log_scale = Vector3::new(0.2, 0.1, 0.1);
        assert_eq!(p.normal_axis(), 1);
    }

    #[test]
    fn rotated_normal_minimizes_extent() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let mut p = disk();
            p.rot = Vector4::new(rng.gen(), rng.gen(), rng.gen(), rng.gen());
            p.log_scale = Vector3::new(0.3f64.ln(), 0.7f64.ln(), 0.05f64.ln());
            let cam = Vector3::new(0.0, 0.0, 4.0);
            let n = flatten_normal(&p, &view_at(cam));
            // Direction sweep: the unit vector minimizing d^T Sigma d.
            let cov = p.covariance();
            let mut best = (f64::MAX, Vector3::zeros());
            let steps = 400;
            for i in 0..steps {
                let th = std::f64::consts::PI * (i as f64 + 0.5) / steps as f64;
                for j in 0..2 * steps {
                    let ph = std::f64::consts::PI * j as f64 / steps as f64;
                    let d = Vector3::new(th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos());
                    let e = d.dot(&(cov * d));
                    if e < best.0 {
                        best = (e, d);
                    }
                }
            }
            assert!(n.dot(&best.1).abs() > 0.999, "{n} vs {}", best.1);
            assert!(n.dot(&(p.mu - cam)) < 0.0);
        }
    }

    #[test]
    fn sh_jacobian_matches_differences() {
        let d = Vector3::new(0.3, -0.5, 0.81).normalize();
        let (_, jac) = sh_basis(&d, 16);
        let h = 1e-6;
        for axis in 0..3 {
            let mut dp = d;
            dp[axis] += h;
            let mut dm = d;
            dm[axis] -= h;
            let (bp, _) = sh_basis(&dp, 16);
            let (bm, _) = sh_basis(&dm, 16);
            for k in 0..16 {
                let fd = (bp[k] - bm[k]) / (2.0 * h);
                assert!((fd - jac[k][axis]).abs() < 1e-6, "basis {k} axis {axis}");
            }
        }
    }

    #[test]
    fn quaternion_gradient_matches_differences() {
        let raw = Vector4::new(0.9, -0.2, 0.4, 0.3);
        let gr = Matrix3::new(0.1, -0.3, 0.7, 0.2, 0.5, -0.6, 0.9, -0.1, 0.4);
        let f = |q: &Vector4<f64>| quat_to_matrix(&(q / q.norm())).component_mul(&gr).sum();
        let an = quat_backward(&raw, &gr);
        for k in 0..4 {
            let h = 1e-6;
            let mut qp = raw;
            qp[k] += h;
            let mut qm = raw;
            qm[k] -= h;
            let fd = (f(&qp) - f(&qm)) / (2.0 * h);
            assert!((fd - an[k]).abs() < 1e-7);
        }
    }
}
