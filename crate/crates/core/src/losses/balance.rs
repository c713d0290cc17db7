//! Gradient-constrained load balance: spread of per-pixel contributor counts
//! relative to local image detail.

use crate::mask::MaskBitmap;

pub const GRAD_W_FLOOR: f64 = 0.1;
pub const GRAD_W_CAP: f64 = 10.0;

/// Sobel magnitude with replicated borders.
pub fn sobel_magnitude(gray: &[f64], w: usize, h: usize) -> Vec<f64> {
    let at = |x: i64, y: i64| gray[y.clamp(0, h as i64 - 1) as usize * w + x.clamp(0, w as i64 - 1) as usize];
    let mut out = vec![0.0; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            out[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// `clamp(|sobel| / mean_rbm(|sobel|), floor, cap)`. A flat image (or an
/// empty mask) gives the floor everywhere.
pub fn gradient_weight(gray: &[f64], rbm: &MaskBitmap) -> Vec<f64> {
    let mag = sobel_magnitude(gray, rbm.width, rbm.height);
    let (sum, n) = mag
        .iter()
        .zip(&rbm.bits)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    let mean = if n > 0 { sum / n as f64 } else { 0.0 };
    if mean <= 0.0 {
        return vec![GRAD_W_FLOOR; mag.len()];
    }
    mag.iter().map(|v| (v / mean).clamp(GRAD_W_FLOOR, GRAD_W_CAP)).collect()
}

/// Population std of `g_i / grad_w_i` over mask pixels, and its gradient
/// w.r.t. `g` (zero outside the mask).
pub fn loss_gc_load(g: &[f64], grad_w: &[f64], rbm: &MaskBitmap) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; g.len()];
    let idx: Vec<usize> = (0..g.len()).filter(|&i| rbm.bits[i]).collect();
    if idx.is_empty() {
        return (0.0, grad);
    }
    let n = idx.len() as f64;
    let mean = idx.iter().map(|&i| g[i] / grad_w[i]).sum::<f64>() / n;
    let var = idx.iter().map(|&i| (g[i] / grad_w[i] - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std > 0.0 {
        for &i in &idx {
            grad[i] = (g[i] / grad_w[i] - mean) / (n * std) / grad_w[i];
        }
    }
    (std, grad)
}

/// Scale-free surrogate used for descent: std / mean of `g_i / grad_w_i`
/// over mask pixels, and its gradient w.r.t. `g`. The plain std is minimized
/// by making every primitive transparent; this version only rewards evening
/// out the load.
pub fn loss_count_balance(g: &[f64], grad_w: &[f64], rbm: &MaskBitmap) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; g.len()];
    let idx: Vec<usize> = (0..g.len()).filter(|&i| rbm.bits[i]).collect();
    if idx.is_empty() {
        return (0.0, grad);
    }
    let n = idx.len() as f64;
    let mean = idx.iter().map(|&i| g[i] / grad_w[i]).sum::<f64>() / n;
    let std = (idx.iter().map(|&i| (g[i] / grad_w[i] - mean).powi(2)).sum::<f64>() / n).sqrt();
    if mean <= 0.0 || std <= 0.0 {
        return (0.0, grad);
    }
    let cv = std / mean;
    for &i in &idx {
        let r = g[i] / grad_w[i];
        grad[i] = ((r - mean) / (n * std) - cv / n) / (mean * grad_w[i]);
    }
    (cv, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn constant_image_gives_floor() {
        let m = MaskBitmap::full(8, 8);
        assert!(gradient_weight(&[0.4; 64], &m).iter().all(|&v| v == GRAD_W_FLOOR));
    }

    #[test]
    fn step_edge_peaks_on_edge() {
        let (w, h) = (12, 8);
        let gray: Vec<f64> = (0..w * h).map(|i| if i % w < 6 { 0.0 } else { 1.0 }).collect();
        let gw = gradient_weight(&gray, &MaskBitmap::full(w, h));
        let row: Vec<f64> = gw[3 * w..4 * w].to_vec();
        let max = row.iter().cloned().fold(0.0, f64::max);
        assert_eq!(row[5], max);
        assert_eq!(row[6], max);
        assert_eq!(row[0], GRAD_W_FLOOR);
    }

    #[test]
    fn random_image_normalizes_to_unit_mean() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let (w, h) = (20, 16);
        let gray: Vec<f64> = (0..w * h).map(|_| rng.gen()).collect();
        let m = MaskBitmap::from_fn(w, h, |x, y| x > 2 && y > 3);
        let mag = sobel_magnitude(&gray, w, h);
        let sel: Vec<f64> = (0..w * h).filter(|&i| m.bits[i]).map(|i| mag[i]).collect();
        let mean = sel.iter().sum::<f64>() / sel.len() as f64;
        let normalized = sel.iter().map(|v| v / mean).sum::<f64>() / sel.len() as f64;
        assert!((normalized - 1.0).abs() < 1e-12);
        assert!(gradient_weight(&gray, &m).iter().all(|&v| (GRAD_W_FLOOR..=GRAD_W_CAP).contains(&v)));
    }

    #[test]
    fn std_examples() {
        let m = MaskBitmap::full(2, 2);
        assert_eq!(loss_gc_load(&[3.0; 4], &[1.5; 4], &m).0, 0.0);
        let w = [0.5, 1.0, 2.0, 4.0];
        let g: Vec<f64> = w.iter().map(|v| 3.0 * v).collect();
        assert!(loss_gc_load(&g, &w, &m).0.abs() < 1e-12);
        assert!((loss_gc_load(&[1.0, 1.0, 3.0, 3.0], &[1.0; 4], &m).0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scale_covariant_and_shift_invariant() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let m = MaskBitmap::from_fn(6, 5, |x, _| x != 2);
        let g: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..9.0)).collect();
        let w: Vec<f64> = (0..30).map(|_| rng.gen_range(0.1..3.0)).collect();
        let base = loss_gc_load(&g, &w, &m).0;
        let scaled: Vec<f64> = g.iter().map(|v| 2.5 * v).collect();
        assert!((loss_gc_load(&scaled, &w, &m).0 - 2.5 * base).abs() < 1e-12);
        let shifted: Vec<f64> = g.iter().zip(&w).map(|(g, w)| g + 0.7 * w).collect();
        assert!((loss_gc_load(&shifted, &w, &m).0 - base).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let m = MaskBitmap::from_fn(5, 4, |x, y| (x + y) % 3 != 0);
        let g: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..5.0)).collect();
        let w: Vec<f64> = (0..20).map(|_| rng.gen_range(0.2..2.0)).collect();
        let (_, an) = loss_gc_load(&g, &w, &m);
        for i in 0..20 {
            let h = 1e-6;
            let mut p = g.clone();
            p[i] += h;
            let mut q = g.clone();
            q[i] -= h;
            let fd = (loss_gc_load(&p, &w, &m).0 - loss_gc_load(&q, &w, &m).0) / (2.0 * h);
            assert!((fd - an[i]).abs() < 1e-7, "{i}: {fd} vs {}", an[i]);
        }
    }

    #[test]
    fn balance_surrogate_is_scale_free_with_matching_gradient() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let m = MaskBitmap::from_fn(5, 4, |x, y| (x * y) % 4 != 1);
        let g: Vec<f64> = (0..20).map(|_| rng.gen_range(0.5..5.0)).collect();
        let w: Vec<f64> = (0..20).map(|_| rng.gen_range(0.2..2.0)).collect();
        let (cv, an) = loss_count_balance(&g, &w, &m);
        let scaled: Vec<f64> = g.iter().map(|v| 3.0 * v).collect();
        assert!((loss_count_balance(&scaled, &w, &m).0 - cv).abs() < 1e-12);
        assert_eq!(loss_count_balance(&[0.0; 20], &w, &m).0, 0.0);
        for i in 0..20 {
            let h = 1e-6;
            let mut p = g.clone();
            p[i] += h;
            let mut q = g.clone();
            q[i] -= h;
            let fd = (loss_count_balance(&p, &w, &m).0 - loss_count_balance(&q, &w, &m).0) / (2.0 * h);
            assert!((fd - an[i]).abs() < 1e-7, "{i}: {fd} vs {}", an[i]);
        }
    }
}
