//! Masked color loss and patch-correlation consistency between views.

use super::ssim::{ssim_weighted_grad, Blur};
use crate::imaging::RgbImage;
use crate::mask::MaskBitmap;
use crate::scene::{pixel_index, project_point, ViewRecord};
use crate::splat::depth::is_valid_depth;

/// Side of the square correlation patch.
pub const NCC_PATCH: usize = 7;

const L1_WEIGHT: f64 = 0.8;
const DSSIM_WEIGHT: f64 = 0.2;

/// `0.8 * L1 + 0.2 * (1 - SSIM)` averaged over mask pixels and channels, with
/// the gradient w.r.t. the interleaved rendered colors.
pub fn loss_rgb(rendered: &[f64], reference: &RgbImage, rbm: &MaskBitmap) -> (f64, Vec<f64>) {
    let (w, h) = (reference.width, reference.height);
    let mut grad = vec![0.0; rendered.len()];
    let n = rbm.count();
    if n == 0 {
        log::warn!("color loss: empty mask");
        return (0.0, grad);
    }
    let norm = 1.0 / (3 * n) as f64;
    let mut l1 = 0.0;
    for i in 0..w * h {
        if !rbm.bits[i] {
            continue;
        }
        for c in 0..3 {
            let d = rendered[3 * i + c] - reference.data[3 * i + c];
            l1 += d.abs();
            grad[3 * i + c] += L1_WEIGHT * norm * d.signum() * (d != 0.0) as u8 as f64;
        }
    }
    l1 *= norm;

    let blur = Blur::new(w, h);
    let weights: Vec<f64> = rbm.bits.iter().map(|&b| if b { norm } else { 0.0 }).collect();
    let mut ssim = 0.0;
    for c in 0..3 {
        // Outside the mask the reference stands in for the render, so the
        // windows never see unmasked error.
        let x: Vec<f64> = (0..w * h)
            .map(|i| if rbm.bits[i] { rendered[3 * i + c] } else { reference.data[3 * i + c] })
            .collect();
        let y: Vec<f64> = (0..w * h).map(|i| reference.data[3 * i + c]).collect();
        let (s, g) = ssim_weighted_grad(&blur, &x, &y, &weights);
        ssim += s.iter().zip(&weights).map(|(s, w)| s * w).sum::<f64>();
        for i in 0..w * h {
            if rbm.bits[i] {
                grad[3 * i + c] -= DSSIM_WEIGHT * g[i];
            }
        }
    }
    (L1_WEIGHT * l1 + DSSIM_WEIGHT * (1.0 - ssim), grad)
}

/// Sum over all pixels of `|(1 - T) - mask|`, divided by the mask size so it
/// sits on the same scale as the masked color loss. Accumulated opacity
/// should fill the refined mask and stay empty outside it. Returns the loss
/// and its gradient w.r.t. the final transmittance.
pub fn loss_coverage(transmittance: &[f64], rbm: &MaskBitmap) -> (f64, Vec<f64>) {
    let n = rbm.count().max(1) as f64;
    let mut l = 0.0;
    let grad = transmittance
        .iter()
        .zip(&rbm.bits)
        .map(|(&t, &m)| {
            let d = 1.0 - t - m as u8 as f64;
            l += d.abs();
            if d == 0.0 {
                0.0
            } else {
                -d.signum() / n
            }
        })
        .collect();
    (l / n, grad)
}

fn bilinear(img: &[f64], w: usize, h: usize, u: f64, v: f64) -> Option<f64> {
    if u < 0.0 || v < 0.0 || u > (w - 1) as f64 || v > (h - 1) as f64 {
        return None;
    }
    let (x0, y0) = (u.floor() as usize, v.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
    let top = img[y0 * w + x0] * (1.0 - fx) + img[y0 * w + x1] * fx;
    let bot = img[y1 * w + x0] * (1.0 - fx) + img[y1 * w + x1] * fx;
    Some(top * (1.0 - fy) + bot * fy)
}

fn ncc(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa < 1e-10 || sbb < 1e-10 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Mean of `1 - NCC` between 7x7 gray patches of view A and their reprojection
/// into view B through A's depth, over masked pixels of A whose whole patch
/// has valid depth, lands in B and is not flat. Used as a monitored term only.
pub fn loss_mv_rgb(
    view_a: &ViewRecord,
    view_b: &ViewRecord,
    gray_a: &[f64],
    gray_b: &[f64],
    depth_a: &[f64],
    rbm_a: &MaskBitmap,
    stride: usize,
) -> f64 {
    let (w, h) = (view_a.width(), view_a.height());
    let (wb, hb) = (view_b.width(), view_b.height());
    let r = (NCC_PATCH / 2) as i64;
    let k = &view_a.intrinsics;
    let to_world = |x: usize, y: usize| {
        let d = depth_a[y * w + x];
        view_a.rotation.transpose() * (d * k.unproject_dir(x as f64, y as f64)) + view_a.center
    };
    let mut pa = Vec::with_capacity(NCC_PATCH * NCC_PATCH);
    let mut pb = Vec::with_capacity(NCC_PATCH * NCC_PATCH);
    let (mut sum, mut n) = (0.0, 0usize);
    let stride = stride.max(1);
    for y in (r as usize..h.saturating_sub(r as usize)).step_by(stride) {
        'px: for x in (r as usize..w.saturating_sub(r as usize)).step_by(stride) {
            if !rbm_a.get(x, y) {
                continue;
            }
            pa.clear();
            pb.clear();
            for dy in -r..=r {
                for dx in -r..=r {
                    let (xx, yy) = ((x as i64 + dx) as usize, (y as i64 + dy) as usize);
                    if !is_valid_depth(depth_a[yy * w + xx]) {
                        continue 'px;
                    }
                    let p = project_point(&to_world(xx, yy), view_b);
                    if p.z <= 0.0 {
                        continue 'px;
                    }
                    let Some(vb) = bilinear(gray_b, wb, hb, p.u, p.v) else {
                        continue 'px;
                    };
                    pa.push(gray_a[yy * w + xx]);
                    pb.push(vb);
                }
            }
            if let Some(c) = ncc(&pa, &pb) {
                sum += 1.0 - c;
                n += 1;
            }
        }
    }
    if n == 0 {
        log::warn!("photometric consistency: no valid correspondences");
        return 0.0;
    }
    sum / n as f64
}

/// Landing pixel of a world point in a view, if in bounds and in front.
pub(crate) fn landing_pixel(view: &ViewRecord, x: &nalgebra::Vector3<f64>) -> Option<(usize, f64)> {
    let p = project_point(x, view);
    if p.z <= 0.0 {
        return None;
    }
    let (px, py) = (pixel_index(p.u), pixel_index(p.v));
    if px < 0 || py < 0 || px >= view.width() as i64 || py >= view.height() as i64 {
        return None;
    }
    Some((py as usize * view.width() + px as usize, p.z))
}

#[cfg(test)]
mod tests {
    use super::super::ssim::C1;
    use super::*;
    use crate::scene::CameraIntrinsics;
    use nalgebra::{Matrix3, Vector3};
    use rand::{Rng, SeedableRng};

    #[test]
    fn identical_is_zero() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut img = RgbImage::new(16, 12);
        img.data.iter_mut().for_each(|v| *v = rng.gen());
        let (l, g) = loss_rgb(&img.data.clone(), &img, &MaskBitmap::full(16, 12));
        assert!(l.abs() < 1e-12);
        assert!(g.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn constant_offset_closed_form() {
        let a = 0.4;
        let reference = RgbImage::filled(20, 14, [a; 3]);
        let rendered = vec![a + 0.1; 20 * 14 * 3];
        let (l, _) = loss_rgb(&rendered, &reference, &MaskBitmap::full(20, 14));
        let b = a + 0.1;
        let s = (2.0 * a * b + C1) / (a * a + b * b + C1);
        assert!((l - (0.08 + 0.2 * (1.0 - s))).abs() < 1e-9, "{l}");
    }

    #[test]
    fn error_outside_mask_is_ignored() {
        let reference = RgbImage::filled(20, 14, [0.5; 3]);
        let mut rendered = reference.data.clone();
        for y in 0..14 {
            for x in 10..20 {
                rendered[3 * (y * 20 + x)] = 0.9;
            }
        }
        let m = MaskBitmap::from_fn(20, 14, |x, _| x < 10);
        assert!(loss_rgb(&rendered, &reference, &m).0.abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_zero() {
        let reference = RgbImage::filled(8, 8, [0.5; 3]);
        assert_eq!(loss_rgb(&vec![0.0; 192], &reference, &MaskBitmap::empty(8, 8)).0, 0.0);
    }

    #[test]
    fn gradient_matches_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let (w, h) = (14, 11);
        let mut reference = RgbImage::new(w, h);
        reference.data.iter_mut().for_each(|v| *v = rng.gen());
        let x: Vec<f64> = (0..w * h * 3).map(|_| rng.gen()).collect();
        let m = MaskBitmap::from_fn(w, h, |x, y| x > 2 && y < 9);
        let (_, g) = loss_rgb(&x, &reference, &m);
        for i in [0usize, 40, 133, 301, 420] {
            let hh = 1e-6;
            let mut p = x.clone();
            p[i] += hh;
            let mut q = x.clone();
            q[i] -= hh;
            let fd = (loss_rgb(&p, &reference, &m).0 - loss_rgb(&q, &reference, &m).0) / (2.0 * hh);
            assert!((fd - g[i]).abs() < 1e-6, "{i}: {fd} vs {}", g[i]);
        }
    }

    fn plane_pair() -> (ViewRecord, ViewRecord) {
        let k = CameraIntrinsics::new(40.0, 40.0, 20.0, 15.0, 40, 30);
        let a = ViewRecord::new(0, "a.png", Matrix3::identity(), Vector3::zeros(), k);
        let b = ViewRecord::new(1, "b.png", Matrix3::identity(), Vector3::new(0.4, 0.0, 0.0), k);
        (a, b)
    }

    #[test]
    fn consistent_texture_correlates_perfectly() {
        let (a, b) = plane_pair();
        let z = 5.0;
        // Texture on the plane z = 5, as a function of world x, y.
        let tex = |x: f64, y: f64| (3.0 * x).sin() + 0.5 * (5.0 * y).cos();
        let render = |v: &ViewRecord| -> Vec<f64> {
            let k = &v.intrinsics;
            (0..v.width() * v.height())
                .map(|i| {
                    let r = k.unproject_dir((i % v.width()) as f64, (i / v.width()) as f64);
                    tex(r.x * z + v.center.x, r.y * z)
                })
                .collect()
        };
        let (ga, gb) = (render(&a), render(&b));
        let depth = vec![z; 40 * 30];
        let l = loss_mv_rgb(&a, &b, &ga, &gb, &depth, &MaskBitmap::full(40, 30), 1);
        assert!(l < 1e-3, "{l}");
    }
}
