//! Gaussian-window SSIM with an exact adjoint.
//!
//! Windows are renormalized at the image border (weights restricted to
//! in-image samples), so constant images have constant local statistics.

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

fn kernel() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let r = (WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Zero-padded 1D correlation along rows or columns.
fn conv1d(src: &[f64], w: usize, h: usize, k: &[f64; WINDOW], horizontal: bool) -> Vec<f64> {
    let r = (WINDOW / 2) as i64;
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let o = j as i64 - r;
                let (xx, yy) = if horizontal { (x as i64 + o, y as i64) } else { (x as i64, y as i64 + o) };
                if xx >= 0 && yy >= 0 && xx < w as i64 && yy < h as i64 {
                    acc += kv * src[yy as usize * w + xx as usize];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Border-renormalized separable Gaussian blur and its adjoint.
pub struct Blur {
    w: usize,
    h: usize,
    k: [f64; WINDOW],
    zx: Vec<f64>,
    zy: Vec<f64>,
}

impl Blur {
    pub fn new(w: usize, h: usize) -> Self {
        let k = kernel();
        let norm = |n: usize| -> Vec<f64> {
            let r = (WINDOW / 2) as i64;
            (0..n as i64)
                .map(|i| {
                    k.iter()
                        .enumerate()
                        .filter(|(j, _)| {
                            let t = i + *j as i64 - r;
                            t >= 0 && t < n as i64
                        })
                        .map(|(_, v)| v)
                        .sum()
                })
                .collect()
        };
        Self {
            w,
            h,
            k,
            zx: norm(w),
            zy: norm(h),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (w, h) = (self.w, self.h);
        let mut t = conv1d(x, w, h, &self.k, true);
        for (i, v) in t.iter_mut().enumerate() {
            *v /= self.zx[i % w];
        }
        let mut o = conv1d(&t, w, h, &self.k, false);
        for (i, v) in o.iter_mut().enumerate() {
            *v /= self.zy[i / w];
        }
        o
    }

    pub fn adjoint(&self, a: &[f64]) -> Vec<f64> {
        let (w, h) = (self.w, self.h);
        let scaled: Vec<f64> = a.iter().enumerate().map(|(i, v)| v / self.zy[i / w]).collect();
        let t = conv1d(&scaled, w, h, &self.k, false);
        let scaled: Vec<f64> = t.iter().enumerate().map(|(i, v)| v / self.zx[i % w]).collect();
        conv1d(&scaled, w, h, &self.k, true)
    }
}

/// Per-pixel SSIM map of two single-channel images.
pub fn ssim_map(blur: &Blur, x: &[f64], y: &[f64]) -> Vec<f64> {
    ssim_parts(blur, x, y).0
}

struct Stats {
    mx: Vec<f64>,
    my: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    b1: Vec<f64>,
    b2: Vec<f64>,
}

fn ssim_parts(blur: &Blur, x: &[f64], y: &[f64]) -> (Vec<f64>, Stats) {
    let mx = blur.apply(x);
    let my = blur.apply(y);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let exx = blur.apply(&xx);
    let eyy = blur.apply(&yy);
    let exy = blur.apply(&xy);
    let n = x.len();
    let mut s = vec![0.0; n];
    let mut st = Stats {
        mx,
        my,
        a1: vec![0.0; n],
        a2: vec![0.0; n],
        b1: vec![0.0; n],
        b2: vec![0.0; n],
    };
    for i in 0..n {
        let (mx, my) = (st.mx[i], st.my[i]);
        let sxx = exx[i] - mx * mx;
        let syy = eyy[i] - my * my;
        let sxy = exy[i] - mx * my;
        st.a1[i] = 2.0 * mx * my + C1;
        st.a2[i] = 2.0 * sxy + C2;
        st.b1[i] = mx * mx + my * my + C1;
        st.b2[i] = sxx + syy + C2;
        s[i] = st.a1[i] * st.a2[i] / (st.b1[i] * st.b2[i]);
    }
    (s, st)
}

/// SSIM map of `x` against `y` and the gradient of `sum(weights * ssim)` w.r.t. `x`.
pub fn ssim_weighted_grad(blur: &Blur, x: &[f64], y: &[f64], weights: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (s, st) = ssim_parts(blur, x, y);
    let n = x.len();
    let mut ga = vec![0.0; n];
    let mut gb = vec![0.0; n];
    let mut gc = vec![0.0; n];
    for i in 0..n {
        let wgt = weights[i];
        if wgt == 0.0 {
            continue;
        }
        let (mx, my) = (st.mx[i], st.my[i]);
        let denom = st.b1[i] * st.b2[i];
        // Partials w.r.t. mu_x, E[x^2], E[xy] with sigma terms expanded.
        let d_mx = (2.0 * my * st.a2[i] - 2.0 * my * st.a1[i]) / denom
            - s[i] * (2.0 * mx / st.b1[i] - 2.0 * mx / st.b2[i]);
        let d_exx = -s[i] / st.b2[i];
        let d_exy = 2.0 * st.a1[i] / denom;
        ga[i] = wgt * d_mx;
        gb[i] = wgt * d_exx;
        gc[i] = wgt * d_exy;
    }
    let ta = blur.adjoint(&ga);
    let tb = blur.adjoint(&gb);
    let tc = blur.adjoint(&gc);
    let grad = (0..n).map(|i| ta[i] + 2.0 * x[i] * tb[i] + y[i] * tc[i]).collect();
    (s, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn identical_images_score_one() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..20 * 15).map(|_| rng.gen()).collect();
        let s = ssim_map(&Blur::new(20, 15), &x, &x);
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn constant_images_closed_form() {
        let (a, b) = (0.3, 0.4);
        let x = vec![a; 16 * 12];
        let y = vec![b; 16 * 12];
        let s = ssim_map(&Blur::new(16, 12), &x, &y);
        let expected = (2.0 * a * b + C1) / (a * a + b * b + C1);
        assert!(s.iter().all(|v| (v - expected).abs() < 1e-9));
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let blur = Blur::new(13, 9);
        let x: Vec<f64> = (0..117).map(|_| rng.gen()).collect();
        let a: Vec<f64> = (0..117).map(|_| rng.gen()).collect();
        let lhs: f64 = blur.apply(&x).iter().zip(&a).map(|(p, q)| p * q).sum();
        let rhs: f64 = x.iter().zip(&blur.adjoint(&a)).map(|(p, q)| p * q).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn gradient_matches_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let (w, h) = (14, 10);
        let blur = Blur::new(w, h);
        let x: Vec<f64> = (0..w * h).map(|_| rng.gen()).collect();
        let y: Vec<f64> = (0..w * h).map(|_| rng.gen()).collect();
        let wts: Vec<f64> = (0..w * h).map(|i| if i % 3 == 0 { 0.0 } else { rng.gen() }).collect();
        let f = |x: &[f64]| -> f64 { ssim_map(&blur, x, &y).iter().zip(&wts).map(|(s, w)| s * w).sum() };
        let (_, g) = ssim_weighted_grad(&blur, &x, &y, &wts);
        for i in [0usize, 17, 55, 139] {
            let hh = 1e-6;
            let mut p = x.clone();
            p[i] += hh;
            let mut m = x.clone();
            m[i] -= hh;
            let fd = (f(&p) - f(&m)) / (2.0 * hh);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", g[i]);
        }
    }
}
