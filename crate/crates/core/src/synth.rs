//! Ray-cast synthetic scenes with exact masks, segment labels, depth and
//! normals, used as fixtures for tests and demos.
//!
//! A world is a set of planar convex faces grouped into buildings, standing on
//! an optional textured ground plane `z = ground_z`. Cameras use the usual
//! convention: x right, y down, z forward, pixel centers at integer
//! coordinates.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use crate::mask::{MaskBitmap, SegmentLabelMap};
use crate::ply::{PlyData, Precision};
use crate::scene::{write_sparse_model, CameraIntrinsics, SceneBundle, SparsePoint, ViewRecord};

/// Segment labels at or above this value belong to the ground.
pub const GROUND_LABEL_BASE: u16 = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct Face {
    pub building: u32,
    pub label: u16,
    /// Convex polygon, counter-clockwise seen from outside.
    pub verts: Vec<Vector3<f64>>,
    pub normal: Vector3<f64>,
    pub base: [f64; 3],
}

impl Face {
    pub fn new(building: u32, label: u16, verts: Vec<Vector3<f64>>, base: [f64; 3]) -> Self {
        let normal = (verts[1] - verts[0]).cross(&(verts[2] - verts[0])).normalize();
        Self {
            building,
            label,
            verts,
            normal,
            base,
        }
    }

    pub fn area(&self) -> f64 {
        (1..self.verts.len() - 1)
            .map(|i| 0.5 * (self.verts[i] - self.verts[0]).cross(&(self.verts[i + 1] - self.verts[0])).norm())
            .sum()
    }

    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let den = self.normal.dot(d);
        if den.abs() < 1e-12 {
            return None;
        }
        let t = self.normal.dot(&(self.verts[0] - o)) / den;
        if t <= 1e-9 {
            return None;
        }
        let p = o + d * t;
        let n = self.verts.len();
        for i in 0..n {
            let a = self.verts[i];
            let b = self.verts[(i + 1) % n];
            if (b - a).cross(&(p - a)).dot(&self.normal) < -1e-12 {
                return None;
            }
        }
        Some(t)
    }

    /// Texture-plane axes: horizontal along the face, and its in-plane complement.
    fn axes(&self) -> (Vector3<f64>, Vector3<f64>) {
        let up = Vector3::z();
        let mut a = up.cross(&self.normal);
        if a.norm() < 1e-6 {
            a = Vector3::x();
        }
        let a = a.normalize();
        (a, self.normal.cross(&a))
    }
}

fn pattern(u: f64, v: f64) -> f64 {
    use std::f64::consts::TAU;
    let waves = 0.5 * (TAU * u / 0.9).sin() * (TAU * v / 0.7).sin() + 0.3 * (TAU * (u + 0.6 * v) / 0.45).cos();
    // Window-like darker cells.
    let cell = ((u / 0.5).rem_euclid(1.0) < 0.35) && ((v / 0.6).rem_euclid(1.0) < 0.4);
    waves - if cell { 0.6 } else { 0.0 }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ground {
    pub z: f64,
    /// Side of the square ground segments.
    pub cell: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
    /// Face index, `None` for the ground.
    pub face: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SynthWorld {
    pub faces: Vec<Face>,
    pub ground: Option<Ground>,
}

impl SynthWorld {
    /// Axis-aligned box without its bottom face.
    pub fn add_box(&mut self, building: u32, min: Vector3<f64>, max: Vector3<f64>, base: [f64; 3]) {
        let p = |x: usize, y: usize, z: usize| {
            Vector3::new([min.x, max.x][x], [min.y, max.y][y], [min.z, max.z][z])
        };
        let quads = [
            [p(0, 0, 0), p(1, 0, 0), p(1, 0, 1), p(0, 0, 1)],
            [p(1, 0, 0), p(1, 1, 0), p(1, 1, 1), p(1, 0, 1)],
            [p(1, 1, 0), p(0, 1, 0), p(0, 1, 1), p(1, 1, 1)],
            [p(0, 1, 0), p(0, 0, 0), p(0, 0, 1), p(0, 1, 1)],
            [p(0, 0, 1), p(1, 0, 1), p(1, 1, 1), p(0, 1, 1)],
        ];
        self.push_faces(building, quads.iter().map(|q| q.to_vec()), base);
    }

    /// Box walls from `z0` to eave height `z1` under a gable roof whose ridge
    /// runs along x at height `ridge`.
    pub fn add_gable_house(&mut self, building: u32, min: Vector3<f64>, max: Vector3<f64>, ridge: f64, base: [f64; 3]) {
        let ym = 0.5 * (min.y + max.y);
        let v = |x: f64, y: f64, z: f64| Vector3::new(x, y, z);
        let faces = vec![
            vec![v(min.x, min.y, min.z), v(max.x, min.y, min.z), v(max.x, min.y, max.z), v(min.x, min.y, max.z)],
            vec![
                v(max.x, min.y, min.z),
                v(max.x, max.y, min.z),
                v(max.x, max.y, max.z),
                v(max.x, ym, ridge),
                v(max.x, min.y, max.z),
            ],
            vec![v(max.x, max.y, min.z), v(min.x, max.y, min.z), v(min.x, max.y, max.z), v(max.x, max.y, max.z)],
            vec![
                v(min.x, max.y, min.z),
                v(min.x, min.y, min.z),
                v(min.x, min.y, max.z),
                v(min.x, ym, ridge),
                v(min.x, max.y, max.z),
            ],
            vec![v(min.x, min.y, max.z), v(max.x, min.y, max.z), v(max.x, ym, ridge), v(min.x, ym, ridge)],
            vec![v(max.x, max.y, max.z), v(min.x, max.y, max.z), v(min.x, ym, ridge), v(max.x, ym, ridge)],
        ];
        self.push_faces(building, faces.into_iter(), base);
    }

    fn push_faces(&mut self, building: u32, faces: impl Iterator<Item = Vec<Vector3<f64>>>, base: [f64; 3]) {
        for (k, verts) in faces.enumerate() {
            // Shade faces slightly differently so segments look distinct.
            let s = 0.85 + 0.05 * (k % 4) as f64;
            let label = (1 + self.faces.len()) as u16;
            self.faces.push(Face::new(building, label, verts, base.map(|c| c * s)));
        }
    }

    pub fn cast(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, f) in self.faces.iter().enumerate() {
            if let Some(t) = f.intersect(o, d) {
                if best.map_or(true, |b| t < b.t) {
                    best = Some(Hit {
                        t,
                        point: o + d * t,
                        normal: f.normal,
                        face: Some(i),
                    });
                }
            }
        }
        if let Some(g) = self.ground {
            if d.z.abs() > 1e-12 {
                let t = (g.z - o.z) / d.z;
                if t > 1e-9 && best.map_or(true, |b| t < b.t) {
                    best = Some(Hit {
                        t,
                        point: o + d * t,
                        normal: Vector3::z(),
                        face: None,
                    });
                }
            }
        }
        best
    }

    pub fn color(&self, h: &Hit) -> [f64; 3] {
        match h.face {
            Some(i) => {
                let f = &self.faces[i];
                let (a, b) = f.axes();
                let q = h.point - f.verts[0];
                let s = pattern(q.dot(&a), q.dot(&b));
                f.base.map(|c| (c * (1.0 + 0.35 * s)).clamp(0.02, 0.98))
            }
            None => {
                let (x, y) = (h.point.x, h.point.y);
                let checker = ((x / 0.5).floor() + (y / 0.5).floor()).rem_euclid(2.0);
                let s = 0.5 + 0.15 * checker + 0.1 * (x * 3.1).sin() * (y * 2.3).cos();
                [0.45 * s, 0.55 * s, 0.4 * s]
            }
        }
    }

    pub fn label(&self, h: &Hit) -> u16 {
        match h.face {
            Some(i) => self.faces[i].label,
            None => {
                let cell = self.ground.map_or(1.0, |g| g.cell);
                let cx = (h.point.x / cell).floor().rem_euclid(30.0) as u16;
                let cy = (h.point.y / cell).floor().rem_euclid(30.0) as u16;
                GROUND_LABEL_BASE + cy * 30 + cx
            }
        }
    }

    pub fn building_count(&self) -> usize {
        self.faces.iter().map(|f| f.building as usize + 1).max().unwrap_or(0)
    }

    /// Area-weighted random samples of building faces with their normals.
    pub fn sample_surface(&self, spacing: f64, seed: u64) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>, Vec<u32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut pts, mut nrm, mut bld) = (Vec::new(), Vec::new(), Vec::new());
        for f in &self.faces {
            for i in 1..f.verts.len() - 1 {
                let (a, b, c) = (f.verts[0], f.verts[i], f.verts[i + 1]);
                let area = 0.5 * (b - a).cross(&(c - a)).norm();
                let n = (area / (spacing * spacing)).round() as usize;
                for _ in 0..n {
                    let (u, v): (f64, f64) = (rng.gen(), rng.gen());
                    let su = u.sqrt();
                    pts.push(a * (1.0 - su) + b * (su * (1.0 - v)) + c * (su * v));
                    nrm.push(f.normal);
                    bld.push(f.building);
                }
            }
        }
        (pts, nrm, bld)
    }

    /// Whether `p` is the first surface hit from `view`'s center.
    pub fn visible_from(&self, p: &Vector3<f64>, view: &ViewRecord) -> bool {
        let d = p - view.center;
        let dist = d.norm();
        match self.cast(&view.center, &(d / dist)) {
            Some(h) => (h.t - dist).abs() <= 1e-6 * dist.max(1.0),
            None => false,
        }
    }
}

/// World-to-camera rotation looking from `eye` toward `target` with world z up.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> Matrix3<f64> {
    let f = (target - eye).normalize();
    let mut r = f.cross(&Vector3::z());
    if r.norm() < 1e-9 {
        r = Vector3::x();
    }
    let r = r.normalize();
    let down = f.cross(&r);
    Matrix3::from_rows(&[r.transpose(), down.transpose(), f.transpose()])
}

/// `n` views on a horizontal circle of `radius` at height `height`, all
/// looking at `target`. View ids start at 1.
pub fn orbit_views(n: usize, radius: f64, height: f64, target: Vector3<f64>, k: CameraIntrinsics) -> Vec<ViewRecord> {
    (0..n)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n as f64;
            let eye = Vector3::new(target.x + radius * a.cos(), target.y + radius * a.sin(), height);
            ViewRecord::new(i as u32 + 1, format!("view_{:03}.png", i + 1), look_at(&eye, &target), eye, k)
        })
        .collect()
}

/// Per-view ground truth rendered by ray casting.
#[derive(Debug, Clone)]
pub struct SynthView {
    pub image: RgbImage,
    pub mask: MaskBitmap,
    pub segments: SegmentLabelMap,
    /// Camera-frame z of the first building hit, 0 elsewhere.
    pub depth: Vec<f64>,
    /// World normal of the first building hit.
    pub normals: Vec<Option<Vector3<f64>>>,
    /// Building id per pixel, `None` for ground.
    pub building: Vec<Option<u32>>,
}

/// Renders one view. Color is supersampled `ss x ss`; labels, depth and
/// normals come from the pixel center ray.
pub fn render_view(world: &SynthWorld, view: &ViewRecord, ss: usize) -> SynthView {
    let (w, h) = (view.width(), view.height());
    let k = &view.intrinsics;
    let rt = view.rotation.transpose();
    let ray = |u: f64, v: f64| (rt * k.unproject_dir(u, v)).normalize();
    let rows: Vec<_> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(w);
            for x in 0..w {
                let center = world.cast(&view.center, &ray(x as f64, y as f64));
                let mut acc = [0.0; 3];
                for sy in 0..ss {
                    for sx in 0..ss {
                        let u = x as f64 - 0.5 + (sx as f64 + 0.5) / ss as f64;
                        let v = y as f64 - 0.5 + (sy as f64 + 0.5) / ss as f64;
                        let c = world.cast(&view.center, &ray(u, v)).map_or([0.6, 0.7, 0.9], |hh| world.color(&hh));
                        for k in 0..3 {
                            acc[k] += c[k];
                        }
                    }
                }
                let n = (ss * ss) as f64;
                row.push((acc.map(|c| c / n), center));
            }
            row
        })
        .collect();
    let mut out = SynthView {
        image: RgbImage::new(w, h),
        mask: MaskBitmap::empty(w, h),
        segments: SegmentLabelMap {
            width: w,
            height: h,
            labels: vec![0; w * h],
        },
        depth: vec![0.0; w * h],
        normals: vec![None; w * h],
        building: vec![None; w * h],
    };
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (c, hit)) in row.into_iter().enumerate() {
            let i = y * w + x;
            out.image.set(x, y, c);
            let Some(hit) = hit else { continue };
            out.segments.labels[i] = world.label(&hit);
            if let Some(f) = hit.face {
                out.mask.set(x, y, true);
                out.depth[i] = view.world_to_camera(&hit.point).z;
                out.normals[i] = Some(hit.normal);
                out.building[i] = Some(world.faces[f].building);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseSpec {
    /// Mean spacing of building points.
    pub building_spacing: f64,
    /// Ground points scattered over this square half-width around the origin.
    pub ground_extent: f64,
    pub ground_points: usize,
    pub min_track: usize,
    pub seed: u64,
}

impl Default for SparseSpec {
    fn default() -> Self {
        Self {
            building_spacing: 0.25,
            ground_extent: 6.0,
            ground_points: 300,
            min_track: 2,
            seed: 7,
        }
    }
}

/// Sparse points with visibility tracks and texture colors.
pub fn sparse_points(world: &SynthWorld, views: &[ViewRecord], spec: &SparseSpec) -> Vec<SparsePoint> {
    let (mut pts, _, building) = world.sample_surface(spec.building_spacing, spec.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed);
    if let Some(g) = world.ground {
        for _ in 0..spec.ground_points {
            let x = rng.gen_range(-spec.ground_extent..spec.ground_extent);
            let y = rng.gen_range(-spec.ground_extent..spec.ground_extent);
            pts.push(Vector3::new(x, y, g.z));
        }
    }
    // Points on a silhouette edge whose pixel shows another surface are
    // dropped, as a feature matcher would fail there.
    let pixel_surface = |v: &ViewRecord, x: usize, y: usize| {
        let ray = (v.rotation.transpose() * v.intrinsics.unproject_dir(x as f64, y as f64)).normalize();
        world.cast(&v.center, &ray).map(|h| h.face.map(|f| world.faces[f].building))
    };
    let mut out = Vec::new();
    'points: for (i, p) in pts.into_iter().enumerate() {
        let owner = building.get(i).copied();
        let mut track = Vec::new();
        for v in views {
            let Some((x, y)) = v.pixel_of(&p) else { continue };
            if !world.visible_from(&p, v) {
                continue;
            }
            if pixel_surface(v, x, y) != Some(owner) {
                continue 'points;
            }
            track.push(v.view_id);
        }
        if track.len() < spec.min_track {
            continue;
        }
        let v0 = views.iter().find(|v| v.view_id == track[0]).expect("track view exists");
        let d = (p - v0.center).normalize();
        let color = world
            .cast(&v0.center, &d)
            .map(|h| world.color(&h).map(|c| (c * 255.0).round() as u8));
        out.push(SparsePoint {
            point_id: out.len() as u32 + 1,
            xyz: p,
            color,
            track,
        });
    }
    out
}

/// A complete synthetic capture: scene, rendered views and ground truth.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub world: SynthWorld,
    pub scene: SceneBundle,
    pub views: Vec<SynthView>,
    pub gt_points: Vec<Vector3<f64>>,
    pub gt_normals: Vec<Vector3<f64>>,
}

impl SynthScene {
    pub fn build(world: SynthWorld, cams: Vec<ViewRecord>, spec: &SparseSpec, gt_spacing: f64, ss: usize) -> Self {
        let views: Vec<SynthView> = cams.iter().map(|v| render_view(&world, v, ss)).collect();
        let points = sparse_points(&world, &cams, spec);
        let (gt_points, gt_normals, _) = world.sample_surface(gt_spacing, spec.seed ^ 0x67);
        Self {
            scene: SceneBundle { views: cams, points },
            world,
            views,
            gt_points,
            gt_normals,
        }
    }

    pub fn images(&self) -> Vec<RgbImage> {
        self.views.iter().map(|v| v.image.clone()).collect()
    }

    pub fn masks(&self) -> Vec<MaskBitmap> {
        self.views.iter().map(|v| v.mask.clone()).collect()
    }

    pub fn segments(&self) -> Vec<SegmentLabelMap> {
        self.views.iter().map(|v| v.segments.clone()).collect()
    }

    /// Writes the standard scene layout under `root` plus `gt.ply`.
    pub fn write(&self, root: &Path) -> Result<()> {
        write_sparse_model(&self.scene, &root.join("sparse"))?;
        for d in ["images", "masks", "segments"] {
            let p = root.join(d);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        for (v, sv) in self.scene.views.iter().zip(&self.views) {
            sv.image.save_png(&root.join(&v.image_path))?;
            sv.mask.save_png(&root.join(&v.mask_path))?;
            sv.segments.save_png(&root.join(&v.segment_path))?;
        }
        write_point_cloud(&self.gt_points, &root.join("gt.ply"))
    }
}

pub fn write_point_cloud(points: &[Vector3<f64>], path: &Path) -> Result<()> {
    PlyData::from_positions(&points.iter().map(|p| [p.x, p.y, p.z]).collect::<Vec<_>>()).write(path, Precision::F64)
}

pub fn read_point_cloud(path: &Path) -> Result<Vec<Vector3<f64>>> {
    let d = PlyData::read(path)?;
    let pos = d
        .positions()
        .ok_or_else(|| Error::parse(path, 0, "missing x/y/z properties"))?;
    Ok(pos.into_iter().map(Vector3::from).collect())
}

/// Two box buildings 4 m apart seen by `n_views` cameras on an elevated orbit.
pub fn two_buildings(n_views: usize, width: usize, height: usize) -> SynthScene {
    let mut world = SynthWorld {
        faces: Vec::new(),
        ground: Some(Ground { z: 0.0, cell: 1.0 }),
    };
    world.add_box(0, Vector3::new(-4.0, -1.0, 0.0), Vector3::new(-2.0, 1.0, 2.5), [0.8, 0.55, 0.4]);
    world.add_box(1, Vector3::new(2.0, -1.5, 0.0), Vector3::new(4.0, 1.5, 1.5), [0.45, 0.55, 0.8]);
    let f = 0.75 * width as f64;
    let k = CameraIntrinsics::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height);
    let cams = orbit_views(n_views, 7.5, 9.0, Vector3::new(0.0, 0.0, 0.8), k);
    SynthScene::build(world, cams, &SparseSpec::default(), 0.03, 2)
}

/// One gable-roofed house: a sharp ridge and eaves, for normal checks.
pub fn gable_house(n_views: usize, width: usize, height: usize) -> SynthScene {
    let mut world = SynthWorld {
        faces: Vec::new(),
        ground: Some(Ground { z: 0.0, cell: 1.0 }),
    };
    world.add_gable_house(0, Vector3::new(-1.5, -1.0, 0.0), Vector3::new(1.5, 1.0, 1.2), 2.2, [0.75, 0.6, 0.5]);
    let f = 0.9 * width as f64;
    let k = CameraIntrinsics::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height);
    let cams = orbit_views(n_views, 5.0, 5.0, Vector3::new(0.0, 0.0, 1.0), k);
    let spec = SparseSpec {
        building_spacing: 0.15,
        ground_extent: 4.0,
        ..SparseSpec::default()
    };
    SynthScene::build(world, cams, &spec, 0.03, 2)
}

/// A textured 2 m square facing the cameras at distance 5, seen from a
/// small fan of nearly frontal views.
pub fn textured_square(n_views: usize, size: usize) -> SynthScene {
    let mut world = SynthWorld::default();
    let z = 5.0;
    let v = |x: f64, y: f64| Vector3::new(x, y, z);
    // Counter-clockwise seen from the cameras at negative z.
    world.faces.push(Face::new(0, 1, vec![v(-1.0, -1.0), v(-1.0, 1.0), v(1.0, 1.0), v(1.0, -1.0)], [0.7, 0.5, 0.35]));
    let f = 1.1 * size as f64;
    let k = CameraIntrinsics::new(f, f, size as f64 / 2.0, size as f64 / 2.0, size, size);
    let cams = (0..n_views)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n_views.max(1) as f64;
            let eye = Vector3::new(0.6 * a.cos(), 0.6 * a.sin(), 0.0);
            // Image axes stay aligned with world x / y.
            ViewRecord::new(i as u32 + 1, format!("view_{:03}.png", i + 1), Matrix3::identity(), eye, k)
        })
        .collect();
    let spec = SparseSpec {
        building_spacing: 0.1,
        ground_points: 0,
        ..SparseSpec::default()
    };
    SynthScene::build(world, cams, &spec, 0.02, 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_is_a_rotation_facing_target() {
        let eye = Vector3::new(3.0, -4.0, 5.0);
        let r = look_at(&eye, &Vector3::zeros());
        assert!((r * r.transpose() - Matrix3::identity()).norm() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
        let c = r * (Vector3::zeros() - eye);
        assert!(c.x.abs() < 1e-12 && c.y.abs() < 1e-12 && c.z > 0.0);
        // World up appears toward the top of the image.
        assert!((r * Vector3::z()).y < 0.0);
    }

    #[test]
    fn box_faces_point_outward() {
        let mut w = SynthWorld::default();
        w.add_box(0, Vector3::zeros(), Vector3::repeat(1.0), [0.5; 3]);
        for f in &w.faces {
            let c = f.verts.iter().sum::<Vector3<f64>>() / f.verts.len() as f64;
            assert!(f.normal.dot(&(c - Vector3::repeat(0.5))) > 0.0);
        }
        let mut g = SynthWorld::default();
        g.add_gable_house(0, Vector3::zeros(), Vector3::new(2.0, 2.0, 1.0), 2.0, [0.5; 3]);
        for f in &g.faces {
            let c = f.verts.iter().sum::<Vector3<f64>>() / f.verts.len() as f64;
            assert!(f.normal.dot(&(c - Vector3::new(1.0, 1.0, 0.8))) > 0.0);
        }
    }

    #[test]
    fn square_depth_is_exact() {
        let s = textured_square(1, 32);
        let v = &s.views[0];
        let covered: Vec<f64> = v.depth.iter().copied().filter(|d| *d > 0.0).collect();
        assert!(covered.len() > 100);
        assert!(covered.iter().all(|d| (d - 5.0).abs() < 1e-12));
        assert_eq!(covered.len(), v.mask.count());
        assert!(v.normals.iter().flatten().all(|n| (n - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12));
    }

    #[test]
    fn sparse_points_project_into_masks_where_tracked() {
        let s = two_buildings(6, 64, 48);
        assert!(!s.scene.points.is_empty());
        s.scene.validate().unwrap();
        let idx = s.scene.view_index();
        let (mut inside, mut total) = (0, 0);
        for p in s.scene.points.iter().filter(|p| p.xyz.z > 1e-9) {
            for vid in &p.track {
                let i = idx[vid];
                let (x, y) = s.scene.views[i].pixel_of(&p.xyz).unwrap();
                inside += s.views[i].mask.get(x, y) as usize;
                total += 1;
            }
        }
        // Only silhouette-edge pixels may disagree.
        assert!(inside as f64 > 0.95 * total as f64, "{inside}/{total}");
    }
}
