//! Binary masks, segment label maps and square-window morphology.

use std::collections::BTreeMap;
use std::path::Path;

use image::{ImageBuffer, Luma};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskBitmap {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl MaskBitmap {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.bits[y * self.width + x] = on;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Nearest-neighbour resample to `width x height`.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let src = nearest_index(self.width, self.height, width, height);
        Self {
            width,
            height,
            bits: src.into_iter().map(|i| self.bits[i]).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn xor(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a ^ b)
    }

    pub fn and(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a & b)
    }

    pub fn or(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a | b)
    }

    pub fn and_not(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a & !b)
    }

    fn zip(&self, other: &Self, f: impl Fn(bool, bool) -> bool) -> Self {
        assert_eq!((self.width, self.height), (other.width, other.height));
        Self {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    pub fn check_shape(&self, width: usize, height: usize, what: &str) -> Result<()> {
        if (self.width, self.height) != (width, height) {
            return Err(Error::Shape {
                what: what.to_string(),
                expected_w: width,
                expected_h: height,
                actual_w: self.width,
                actual_h: self.height,
            });
        }
        Ok(())
    }

    /// Any nonzero pixel of an 8-bit (or wider) grayscale PNG is set.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })?
            .to_luma16();
        let (w, h) = img.dimensions();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            bits: img.into_raw().into_iter().map(|v| v != 0).collect(),
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let raw: Vec<u8> = self.bits.iter().map(|b| if *b { 255 } else { 0 }).collect();
        let buf: ImageBuffer<Luma<u8>, _> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, raw)
                .expect("buffer size matches dimensions");
        buf.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

/// Load a mask and require it to match the owning view's size.
pub fn load_mask(path: &Path, width: usize, height: usize) -> Result<MaskBitmap> {
    let m = MaskBitmap::load_png(path)?;
    m.check_shape(width, height, &path.display().to_string())?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentLabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u16>,
}

impl SegmentLabelMap {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.labels[y * self.width + x]
    }

    pub fn resized(&self, width: usize, height: usize) -> Self {
        let src = nearest_index(self.width, self.height, width, height);
        Self {
            width,
            height,
            labels: src.into_iter().map(|i| self.labels[i]).collect(),
        }
    }

    /// Pixel count of every label present.
    pub fn histogram(&self) -> BTreeMap<u16, usize> {
        let mut h = BTreeMap::new();
        for l in &self.labels {
            *h.entry(*l).or_insert(0) += 1;
        }
        h
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })?
            .to_luma16();
        let (w, h) = img.dimensions();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            labels: img.into_raw(),
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: ImageBuffer<Luma<u16>, _> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.labels.clone())
                .expect("buffer size matches dimensions");
        buf.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

/// Source pixel under each target pixel center.
fn nearest_index(sw: usize, sh: usize, w: usize, h: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let sy = (((y as f64 + 0.5) * sh as f64 / h as f64) as usize).min(sh - 1);
        for x in 0..w {
            let sx = (((x as f64 + 0.5) * sw as f64 / w as f64) as usize).min(sw - 1);
            out.push(sy * sw + sx);
        }
    }
    out
}

pub fn load_segment_labels(path: &Path, width: usize, height: usize) -> Result<SegmentLabelMap> {
    let s = SegmentLabelMap::load_png(path)?;
    if (s.width, s.height) != (width, height) {
        return Err(Error::Shape {
            what: path.display().to_string(),
            expected_w: width,
            expected_h: height,
            actual_w: s.width,
            actual_h: s.height,
        });
    }
    Ok(s)
}

/// 1D pass of a separable square-window filter; out-of-image samples read as `pad`.
fn pass(
    src: &[bool],
    width: usize,
    height: usize,
    r: usize,
    horizontal: bool,
    pad: bool,
    any: bool,
) -> Vec<bool> {
    let mut out = vec![false; src.len()];
    let (n_lines, line_len) = if horizontal { (height, width) } else { (width, height) };
    let idx = |line: usize, k: usize| {
        if horizontal {
            line * width + k
        } else {
            k * width + line
        }
    };
    for line in 0..n_lines {
        for k in 0..line_len {
            let lo = k as i64 - r as i64;
            let hi = k as i64 + r as i64;
            let mut acc = !any;
            for j in lo..=hi {
                let v = if j < 0 || j >= line_len as i64 {
                    pad
                } else {
                    src[idx(line, j as usize)]
                };
                if any {
                    acc |= v;
                } else {
                    acc &= v;
                }
            }
            out[idx(line, k)] = acc;
        }
    }
    out
}

/// Dilation with a `(2r+1)x(2r+1)` square window.
pub fn dilate(m: &MaskBitmap, r: usize) -> MaskBitmap {
    let h = pass(&m.bits, m.width, m.height, r, true, false, true);
    let bits = pass(&h, m.width, m.height, r, false, false, true);
    MaskBitmap {
        width: m.width,
        height: m.height,
        bits,
    }
}

/// Erosion with a `(2r+1)x(2r+1)` square window and zero padding, so the mask
/// shrinks away from the image border.
pub fn erode(m: &MaskBitmap, r: usize) -> MaskBitmap {
    let h = pass(&m.bits, m.width, m.height, r, true, false, false);
    let bits = pass(&h, m.width, m.height, r, false, false, false);
    MaskBitmap {
        width: m.width,
        height: m.height,
        bits,
    }
}

/// Boundary band `dilate(rbm, r) XOR erode(rbm, r)`: a band of width `2r`
/// straddling the mask edge.
pub fn extract_boundary(rbm: &MaskBitmap, band_radius: usize) -> MaskBitmap {
    let r = band_radius.max(1);
    dilate(rbm, r).xor(&erode(rbm, r))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Pixel-enumeration morphology oracle.
    fn brute(m: &MaskBitmap, r: usize, dilation: bool) -> MaskBitmap {
        let r = r as i64;
        MaskBitmap::from_fn(m.width, m.height, |x, y| {
            let mut any = false;
            let mut all = true;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (xx, yy) = (x as i64 + dx, y as i64 + dy);
                    let v = xx >= 0
                        && yy >= 0
                        && xx < m.width as i64
                        && yy < m.height as i64
                        && m.get(xx as usize, yy as usize);
                    any |= v;
                    all &= v;
                }
            }
            if dilation {
                any
            } else {
                all
            }
        })
    }

    #[test]
    fn halving_keeps_block_pattern() {
        let m = MaskBitmap::from_fn(8, 6, |x, _| x >= 4);
        let r = m.resized(4, 3);
        assert_eq!(r, MaskBitmap::from_fn(4, 3, |x, _| x >= 2));
        assert_eq!(m.resized(8, 6), m);
    }

    #[test]
    fn empty_mask_has_no_boundary() {
        assert!(extract_boundary(&MaskBitmap::empty(20, 10), 2).is_empty());
    }

    #[test]
    fn full_mask_boundary_is_border_frame() {
        let r = 2;
        let mb = extract_boundary(&MaskBitmap::full(20, 12), r);
        let expected = MaskBitmap::from_fn(20, 12, |x, y| x < r || y < r || x >= 20 - r || y >= 12 - r);
        assert_eq!(mb, expected);
    }

    #[test]
    fn rectangle_band_matches_enumeration() {
        let (w, h) = (7usize, 5usize);
        let m = MaskBitmap::from_fn(30, 20, |x, y| (10..10 + w).contains(&x) && (8..8 + h).contains(&y));
        let mb = extract_boundary(&m, 1);
        let oracle = brute(&m, 1, true).xor(&brute(&m, 1, false));
        assert_eq!(mb, oracle);
        // outer ring (w+2)(h+2)-wh plus inner ring wh-(w-2)(h-2)
        assert_eq!(mb.count(), 4 * w + 4 * h);
    }

    #[test]
    fn random_masks_match_enumeration() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let m = MaskBitmap::from_fn(17, 13, |_, _| rng.gen_bool(0.4));
            for r in 1..4 {
                assert_eq!(dilate(&m, r), brute(&m, r, true));
                assert_eq!(erode(&m, r), brute(&m, r, false));
            }
        }
    }

    #[test]
    fn band_invariants() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let m = MaskBitmap::from_fn(24, 18, |x, y| {
                let dx = x as f64 - 12.0;
                let dy = y as f64 - 9.0;
                dx * dx + dy * dy < 30.0 + rng.gen_range(0.0..20.0)
            });
            for r in 1..4 {
                let mb = extract_boundary(&m, r);
                assert!(mb.and_not(&dilate(&m, r)).is_empty());
                assert!(mb.and(&erode(&m, r)).is_empty());
            }
        }
    }

    #[test]
    fn png_round_trip_and_shape_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let checker = MaskBitmap::from_fn(8, 6, |x, y| (x + y) % 2 == 0);
        checker.save_png(&p).unwrap();
        let back = load_mask(&p, 8, 6).unwrap();
        assert_eq!(back.count(), 24);
        assert!(matches!(load_mask(&p, 9, 6), Err(Error::Shape { expected_w: 9, actual_w: 8, .. })));

        MaskBitmap::empty(8, 6).save_png(&p).unwrap();
        assert_eq!(load_mask(&p, 8, 6).unwrap().count(), 0);
        MaskBitmap::full(8, 6).save_png(&p).unwrap();
        assert_eq!(load_mask(&p, 8, 6).unwrap().count(), 48);

        let seg = SegmentLabelMap {
            width: 3,
            height: 2,
            labels: vec![0, 1, 700, 65535, 2, 2],
        };
        let sp = dir.path().join("s.png");
        seg.save_png(&sp).unwrap();
        assert_eq!(load_segment_labels(&sp, 3, 2).unwrap(), seg);
    }
}
