//! Browser bindings: splat rendering, boundary bands and DBSCAN.

use nalgebra::{UnitQuaternion, Vector3, Vector4};
use wasm_bindgen::prelude::*;

use groupsplat::grouping::dbscan_cluster;
use groupsplat::mask::{extract_boundary, MaskBitmap};
use groupsplat::scene::{CameraIntrinsics, ViewRecord};
use groupsplat::splat::{rasterize_forward, GaussianPrimitive, RasterSettings};
use groupsplat::synth::{look_at, SynthWorld};

const PALETTE: [[f64; 3]; 4] = [[0.85, 0.55, 0.35], [0.35, 0.55, 0.85], [0.5, 0.75, 0.4], [0.8, 0.8, 0.8]];

/// Flat splats covering two boxes.
#[wasm_bindgen]
pub struct SplatScene {
    prims: Vec<GaussianPrimitive>,
    settings: RasterSettings,
}

#[wasm_bindgen]
impl SplatScene {
    #[wasm_bindgen(constructor)]
    pub fn new(spacing: f64, seed: u64) -> SplatScene {
        let spacing = spacing.clamp(0.05, 1.0);
        let mut w = SynthWorld::default();
        w.add_box(0, Vector3::new(-2.0, -0.5, 0.0), Vector3::new(-0.5, 0.5, 1.5), PALETTE[0]);
        w.add_box(1, Vector3::new(0.7, -0.8, 0.0), Vector3::new(2.0, 0.8, 0.9), PALETTE[1]);
        let (pts, normals, building) = w.sample_surface(spacing, seed);
        let s = spacing * 0.7;
        let prims = pts
            .iter()
            .zip(&normals)
            .zip(&building)
            .map(|((p, n), b)| {
                let q = UnitQuaternion::rotation_between(&Vector3::z(), n).unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI));
                let shade = 0.6 + 0.4 * n.z.abs().max(0.5 * n.x.abs());
                let rgb = PALETTE[*b as usize % PALETTE.len()].map(|c| c * shade);
                GaussianPrimitive::new(*p, Vector3::new(s, s, s * 0.05), Vector4::new(q.w, q.i, q.j, q.k), 0.9, rgb)
            })
            .collect();
        SplatScene {
            prims,
            settings: RasterSettings::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.prims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prims.is_empty()
    }

    /// RGBA pixels seen from an orbit camera; angles in degrees.
    pub fn render(&self, azimuth: f64, elevation: f64, width: usize, height: usize) -> Vec<u8> {
        let (az, el) = (azimuth.to_radians(), elevation.clamp(-80.0, 80.0).to_radians());
        let target = Vector3::new(0.0, 0.0, 0.6);
        let eye = target + Vector3::new(az.cos() * el.cos(), az.sin() * el.cos(), el.sin()) * 6.0;
        let f = 0.9 * width as f64;
        let k = CameraIntrinsics::new(f, f, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0, width, height);
        let view = ViewRecord::new(1, "demo.png", look_at(&eye, &target), eye, k);
        let b = rasterize_forward(&self.prims, &view, &self.settings);
        let mut out = Vec::with_capacity(width * height * 4);
        for px in b.color.chunks(3) {
            out.extend(px.iter().map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8));
            out.push(255);
        }
        out
    }
}

/// Boundary band of a mask given as one byte per pixel (nonzero is inside).
#[wasm_bindgen]
pub fn boundary_band(mask: &[u8], width: usize, height: usize, radius: usize) -> Vec<u8> {
    if mask.len() != width * height {
        return Vec::new();
    }
    let m = MaskBitmap::from_fn(width, height, |x, y| mask[y * width + x] != 0);
    let band = extract_boundary(&m, radius);
    (0..height)
        .flat_map(|y| (0..width).map(move |x| (x, y)))
        .map(|(x, y)| band.get(x, y) as u8)
        .collect()
}

/// DBSCAN labels for 2-D points given as `[x0, y0, x1, y1, ..]`; -1 is noise.
#[wasm_bindgen]
pub fn cluster_points(xy: &[f64], eps: f64, min_pts: usize) -> Vec<i32> {
    if !(eps > 0.0) || min_pts == 0 {
        return vec![-1; xy.len() / 2];
    }
    let pts: Vec<Vector3<f64>> = xy.chunks_exact(2).map(|c| Vector3::new(c[0], c[1], 0.0)).collect();
    dbscan_cluster(&pts, eps, min_pts)
}
