//! Depth rendering and fusion, TSDF integration, marching cubes and mesh
//! merging across groups.

mod tables;

use std::collections::{BTreeMap, HashMap};
use std::io::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::Aabb;
use crate::mask::MaskBitmap;
use crate::ply::{PlyData, Precision};
use crate::scene::{pixel_index, ViewRecord};
use crate::splat::depth::is_valid_depth;
use crate::splat::{rasterize_forward, GaussianPrimitive, RasterSettings, INVALID_DEPTH};

use tables::{EDGE_TABLE, TRIANGLE_TABLE};

/// Unbiased depth for each view, with pixels outside the view's mask set to
/// the sentinel.
pub fn render_depth_set(
    prims: &[GaussianPrimitive],
    views: &[(ViewRecord, MaskBitmap)],
    raster: &RasterSettings,
) -> Vec<Vec<f64>> {
    views
        .iter()
        .map(|(v, m)| {
            let mut d = rasterize_forward(prims, v, raster).depth;
            for (x, &keep) in d.iter_mut().zip(&m.bits) {
                if !keep {
                    *x = INVALID_DEPTH;
                }
            }
            d
        })
        .collect()
}

/// Per-pixel mean of the valid values; the sentinel where none is valid.
pub fn fuse_overlapping_depths(maps: &[&[f64]]) -> Vec<f64> {
    let n = maps.first().map_or(0, |m| m.len());
    assert!(maps.iter().all(|m| m.len() == n), "depth maps must share dimensions");
    (0..n)
        .map(|i| {
            let (s, c) = maps
                .iter()
                .map(|m| m[i])
                .filter(|d| is_valid_depth(*d))
                .fold((0.0, 0usize), |(s, c), d| (s + d, c + 1));
            if c == 0 {
                INVALID_DEPTH
            } else {
                s / c as f64
            }
        })
        .collect()
}

/// Dense truncated signed distance grid. Sample `(x, y, z)` sits at
/// `origin + voxel_size * (x, y, z)`; storage is x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct TsdfVolume {
    pub origin: Vector3<f64>,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    pub tsdf: Vec<f64>,
    pub weight: Vec<f64>,
}

impl TsdfVolume {
    pub fn new(origin: Vector3<f64>, voxel_size: f64, dims: [usize; 3]) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Self {
            origin,
            voxel_size,
            dims,
            tsdf: vec![1.0; n],
            weight: vec![0.0; n],
        }
    }

    /// Grid covering `aabb` plus one voxel of padding on every side.
    pub fn covering(aabb: &Aabb, voxel_size: f64) -> Self {
        let origin = Vector3::new(aabb.min[0], aabb.min[1], aabb.min[2]) - Vector3::repeat(voxel_size);
        let dims = [0, 1, 2].map(|k| ((aabb.max[k] - aabb.min[k]) / voxel_size).ceil() as usize + 3);
        Self::new(origin, voxel_size, dims)
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn position(&self, x: usize, y: usize, z: usize) -> Vector3<f64> {
        self.origin + Vector3::new(x as f64, y as f64, z as f64) * self.voxel_size
    }

    /// Running-average update from one depth map. Voxels in front of the
    /// observed surface or within `truncation` behind it are updated.
    pub fn integrate(&mut self, depth: &[f64], view: &ViewRecord, truncation: f64) {
        let [nx, ny, _] = self.dims;
        let (w, h) = (view.width() as i64, view.height() as i64);
        let k = view.intrinsics;
        let (origin, vs) = (self.origin, self.voxel_size);
        let slab = nx * ny;
        self.tsdf
            .par_chunks_mut(slab)
            .zip(self.weight.par_chunks_mut(slab))
            .enumerate()
            .for_each(|(z, (ts, ws))| {
                for y in 0..ny {
                    for x in 0..nx {
                        let p = origin + Vector3::new(x as f64, y as f64, z as f64) * vs;
                        let c = view.world_to_camera(&p);
                        if c.z <= 0.0 {
                            continue;
                        }
                        let (px, py) = (pixel_index(k.fx * c.x / c.z + k.cx), pixel_index(k.fy * c.y / c.z + k.cy));
                        if px < 0 || py < 0 || px >= w || py >= h {
                            continue;
                        }
                        let d = depth[(py * w + px) as usize];
                        if !is_valid_depth(d) {
                            continue;
                        }
                        let sdf = d - c.z;
                        if sdf <= -truncation {
                            continue;
                        }
                        let v = (sdf / truncation).clamp(-1.0, 1.0);
                        let i = y * nx + x;
                        ts[i] = (ts[i] * ws[i] + v) / (ws[i] + 1.0);
                        ws[i] += 1.0;
                    }
                }
            });
    }

    /// Raw little-endian f32 TSDF values plus a JSON header next to it.
    pub fn dump(&self, raw_path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.tsdf.len() * 4);
        for v in &self.tsdf {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        std::fs::write(raw_path, bytes).map_err(|e| Error::io(raw_path, e))?;
        let header = serde_json::json!({
            "origin": [self.origin.x, self.origin.y, self.origin.z],
            "voxel_size": self.voxel_size,
            "dims": self.dims,
            "dtype": "float32",
            "order": "x-fastest",
            "observed_voxels": self.weight.iter().filter(|w| **w > 0.0).count(),
        });
        let hp = raw_path.with_extension("json");
        std::fs::write(&hp, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(&hp, e))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[u32; 3]>,
    /// Source group of each triangle.
    pub tags: Vec<u32>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i as usize]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Signed enclosed volume; positive when triangles face outward.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i as usize]);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    pub fn append(&mut self, other: &TriangleMesh) {
        let off = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles.extend(other.triangles.iter().map(|t| t.map(|i| i + off)));
        self.tags.extend_from_slice(&other.tags);
    }

    /// Merge bit-identical vertices, drop triangles with repeated or
    /// collinear corners, and drop unreferenced vertices.
    pub fn cleanup(&mut self) {
        let mut remap = vec![0u32; self.vertices.len()];
        let mut seen: HashMap<[u64; 3], u32> = HashMap::new();
        let mut verts = Vec::new();
        for (i, v) in self.vertices.iter().enumerate() {
            let key = [v.x.to_bits(), v.y.to_bits(), v.z.to_bits()];
            remap[i] = *seen.entry(key).or_insert_with(|| {
                verts.push(*v);
                verts.len() as u32 - 1
            });
        }
        let mut tris = Vec::new();
        let mut tags = Vec::new();
        for (t, tag) in self.triangles.iter().zip(&self.tags) {
            let t = t.map(|i| remap[i as usize]);
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                continue;
            }
            let [a, b, c] = t.map(|i| verts[i as usize]);
            if (b - a).cross(&(c - a)).norm() == 0.0 {
                continue;
            }
            tris.push(t);
            tags.push(*tag);
        }
        let mut used = vec![u32::MAX; verts.len()];
        let mut compact = Vec::new();
        for t in tris.iter_mut() {
            for i in t.iter_mut() {
                if used[*i as usize] == u32::MAX {
                    used[*i as usize] = compact.len() as u32;
                    compact.push(verts[*i as usize]);
                }
                *i = used[*i as usize];
            }
        }
        self.vertices = compact;
        self.triangles = tris;
        self.tags = tags;
    }

    /// Count of triangles using each undirected edge.
    pub fn edge_use(&self) -> BTreeMap<(u32, u32), usize> {
        let mut m = BTreeMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *m.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        m
    }

    pub fn is_watertight(&self) -> bool {
        !self.triangles.is_empty() && self.edge_use().values().all(|&c| c == 2)
    }

    pub fn write_ply(&self, path: &Path) -> Result<()> {
        let mut d = PlyData::from_positions(&self.vertices.iter().map(|v| [v.x, v.y, v.z]).collect::<Vec<_>>());
        d.faces = self.triangles.clone();
        d.write(path, Precision::F32)
    }

    pub fn read_ply(path: &Path) -> Result<Self> {
        let d = PlyData::read(path)?;
        let pos = d
            .positions()
            .ok_or_else(|| Error::parse(path, 0, "missing vertex positions"))?;
        let n = pos.len() as u32;
        if let Some(t) = d.faces.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::parse(path, 0, format!("face {t:?} indexes past {n} vertices")));
        }
        Ok(Self {
            vertices: pos.into_iter().map(Vector3::from).collect(),
            tags: vec![0; d.faces.len()],
            triangles: d.faces,
        })
    }

    /// Wavefront OBJ with one `g` block per provenance tag.
    pub fn write_obj(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for v in &self.vertices {
            s.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
        }
        let mut by_tag: BTreeMap<u32, Vec<&[u32; 3]>> = BTreeMap::new();
        for (t, tag) in self.triangles.iter().zip(&self.tags) {
            by_tag.entry(*tag).or_default().push(t);
        }
        for (tag, tris) in by_tag {
            s.push_str(&format!("g group_{tag}\n"));
            for t in tris {
                s.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

// Corner offsets and edge endpoints in the table's numbering.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];
const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [3, 2],
    [0, 3],
    [4, 5],
    [5, 6],
    [7, 6],
    [4, 7],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Marching cubes at iso level 0 over cubes whose eight samples all carry
/// weight. Negative is inside. Triangles are counter-clockwise seen from the
/// positive side, so normals point toward free space. Vertices on shared
/// edges are shared.
pub fn extract_mesh(vol: &TsdfVolume, tag: u32) -> TriangleMesh {
    let [nx, ny, nz] = vol.dims;
    let mut mesh = TriangleMesh::default();
    if nx < 2 || ny < 2 || nz < 2 {
        log::warn!("mesh extraction: volume too small");
        return mesh;
    }
    let mut edge_vertex: HashMap<(usize, usize), u32> = HashMap::new();
    for z in 0..nz - 1 {
        for y in 0..ny - 1 {
            for x in 0..nx - 1 {
                let idx: [usize; 8] = CORNERS.map(|c| vol.index(x + c[0], y + c[1], z + c[2]));
                if idx.iter().any(|&i| vol.weight[i] <= 0.0) {
                    continue;
                }
                let vals = idx.map(|i| vol.tsdf[i]);
                let mut case = 0usize;
                for (k, v) in vals.iter().enumerate() {
                    if *v < 0.0 {
                        case |= 1 << k;
                    }
                }
                let mask = EDGE_TABLE[case];
                if mask == 0 {
                    continue;
                }
                let mut ev = [u32::MAX; 12];
                for (e, [a, b]) in EDGES.iter().enumerate() {
                    if mask & (1 << e) == 0 {
                        continue;
                    }
                    // `a` is always the lower-coordinate endpoint.
                    let axis = (0..3).find(|&k| CORNERS[*a][k] != CORNERS[*b][k]).unwrap();
                    let key = (idx[*a], axis);
                    ev[e] = *edge_vertex.entry(key).or_insert_with(|| {
                        let (va, vb) = (vals[*a], vals[*b]);
                        let t = va / (va - vb);
                        let pa = vol.position(x + CORNERS[*a][0], y + CORNERS[*a][1], z + CORNERS[*a][2]);
                        let mut p = pa;
                        p[axis] += t * vol.voxel_size;
                        mesh.vertices.push(p);
                        mesh.vertices.len() as u32 - 1
                    });
                }
                for tri in TRIANGLE_TABLE[case].chunks(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    mesh.triangles.push([ev[tri[0] as usize], ev[tri[2] as usize], ev[tri[1] as usize]]);
                    mesh.tags.push(tag);
                }
            }
        }
    }
    mesh.cleanup();
    if mesh.is_empty() {
        log::warn!("mesh extraction: no zero crossings");
    }
    mesh
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    /// Fuse every group's depth per view and integrate into shared volumes.
    Global,
    /// Extract each group on its own and concatenate.
    Concatenate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeshingConfig {
    /// Fixed voxel size; by default the group box diagonal over `resolution`.
    pub voxel_size: Option<f64>,
    pub resolution: f64,
    /// Truncation as a multiple of the voxel size.
    pub truncation_voxels: f64,
    pub mode: MergeMode,
}

impl Default for MeshingConfig {
    fn default() -> Self {
        Self {
            voxel_size: None,
            resolution: 256.0,
            truncation_voxels: 4.0,
            mode: MergeMode::Global,
        }
    }
}

impl MeshingConfig {
    pub fn voxel_for(&self, aabb: &Aabb) -> f64 {
        self.voxel_size.unwrap_or(aabb.diagonal() / self.resolution)
    }
}

/// A trained group as seen by the mesher.
#[derive(Debug, Clone)]
pub struct MeshInput {
    pub group_id: u32,
    pub aabb: Aabb,
    pub primitives: Vec<GaussianPrimitive>,
    pub views: Vec<(ViewRecord, MaskBitmap)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshReport {
    pub mode: MergeMode,
    pub volumes: Vec<VolumeReport>,
    pub vertices: usize,
    pub triangles: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeReport {
    pub groups: Vec<u32>,
    pub voxel_size: f64,
    pub truncation: f64,
    pub dims: [usize; 3],
    pub triangles: usize,
}

fn components(boxes: &[Aabb]) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..boxes.len()).collect();
    fn find(p: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        p[i] = r;
        r
    }
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            if boxes[i].intersects(&boxes[j]) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..boxes.len() {
        let r = find(&mut parent, i);
        out.entry(r).or_default().push(i);
    }
    out.into_values().collect()
}

/// Build the final mesh from trained groups. In global mode, the depths of
/// all groups are mean-fused per view and integrated into one volume per
/// cluster of overlapping group boxes (non-overlapping clusters cannot share
/// surface, so this equals a single global volume). `dump_dir`, if given,
/// receives raw volume dumps.
pub fn merge_group_meshes(
    inputs: &[MeshInput],
    cfg: &MeshingConfig,
    raster: &RasterSettings,
    dump_dir: Option<&Path>,
) -> Result<(TriangleMesh, MeshReport)> {
    if inputs.is_empty() {
        return Err(Error::InvalidScene("no groups to mesh".into()));
    }
    let depths: Vec<Vec<Vec<f64>>> = inputs
        .iter()
        .map(|g| render_depth_set(&g.primitives, &g.views, raster))
        .collect();
    let clusters: Vec<Vec<usize>> = match cfg.mode {
        MergeMode::Global => components(&inputs.iter().map(|g| g.aabb).collect::<Vec<_>>()),
        MergeMode::Concatenate => (0..inputs.len()).map(|i| vec![i]).collect(),
    };
    let mut mesh = TriangleMesh::default();
    let mut reports = Vec::new();
    for members in clusters {
        let aabb = members.iter().skip(1).fold(inputs[members[0]].aabb, |a, &i| a.union(&inputs[i].aabb));
        let voxel = members
            .iter()
            .map(|&i| cfg.voxel_for(&inputs[i].aabb))
            .fold(f64::INFINITY, f64::min);
        let trunc = cfg.truncation_voxels * voxel;
        let mut vol = TsdfVolume::covering(&aabb, voxel);
        // Per view: fuse the depth maps of every group that sees it.
        let mut per_view: BTreeMap<u32, (ViewRecord, Vec<&[f64]>)> = BTreeMap::new();
        let sources: Vec<usize> = match cfg.mode {
            MergeMode::Global => (0..inputs.len()).collect(),
            MergeMode::Concatenate => members.clone(),
        };
        for &g in &sources {
            for ((v, _), d) in inputs[g].views.iter().zip(&depths[g]) {
                per_view
                    .entry(v.view_id)
                    .or_insert_with(|| (v.clone(), Vec::new()))
                    .1
                    .push(d.as_slice());
            }
        }
        for (view, maps) in per_view.values() {
            let fused = fuse_overlapping_depths(maps);
            vol.integrate(&fused, view, trunc);
        }
        let tag = inputs[members[0]].group_id;
        let mut part = extract_mesh(&vol, tag);
        if members.len() > 1 {
            // Tag each triangle with the first member box holding its centroid.
            for (t, tag) in part.triangles.iter().zip(part.tags.iter_mut()) {
                let c = t.iter().map(|&i| part.vertices[i as usize]).sum::<Vector3<f64>>() / 3.0;
                if let Some(&g) = members.iter().find(|&&g| inputs[g].aabb.contains(&c)) {
                    *tag = inputs[g].group_id;
                }
            }
        }
        if let Some(dir) = dump_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            vol.dump(&dir.join(format!("volume_{tag:03}.raw")))?;
        }
        reports.push(VolumeReport {
            groups: members.iter().map(|&i| inputs[i].group_id).collect(),
            voxel_size: voxel,
            truncation: trunc,
            dims: vol.dims,
            triangles: part.triangles.len(),
        });
        mesh.append(&part);
    }
    let report = MeshReport {
        mode: cfg.mode,
        volumes: reports,
        vertices: mesh.vertices.len(),
        triangles: mesh.triangles.len(),
    };
    Ok((mesh, report))
}

/// Volume holding `clamp(sdf / truncation)` of an analytic field, with unit
/// weight everywhere.
pub fn volume_from_sdf(aabb: &Aabb, voxel: f64, truncation: f64, sdf: impl Fn(&Vector3<f64>) -> f64 + Sync) -> TsdfVolume {
    let mut vol = TsdfVolume::covering(aabb, voxel);
    let [nx, ny, _] = vol.dims;
    let (origin, vs) = (vol.origin, vol.voxel_size);
    vol.tsdf.par_chunks_mut(nx * ny).enumerate().for_each(|(z, s)| {
        for y in 0..ny {
            for x in 0..nx {
                let p = origin + Vector3::new(x as f64, y as f64, z as f64) * vs;
                s[y * nx + x] = (sdf(&p) / truncation).clamp(-1.0, 1.0);
            }
        }
    });
    vol.weight.iter_mut().for_each(|w| *w = 1.0);
    vol
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::CameraIntrinsics;
    use nalgebra::Matrix3;

    fn cube_box(h: f64) -> Aabb {
        Aabb {
            min: [-h; 3],
            max: [h; 3],
        }
    }

    #[test]
    fn fusion_examples() {
        let s = INVALID_DEPTH;
        assert_eq!(fuse_overlapping_depths(&[&[4.0, s]]), vec![4.0, s]);
        assert_eq!(fuse_overlapping_depths(&[&[4.0], &[6.0]]), vec![5.0]);
        assert_eq!(fuse_overlapping_depths(&[&[4.0], &[s], &[6.0], &[8.0]]), vec![6.0]);
    }

    fn ortho_view() -> ViewRecord {
        ViewRecord::new(
            0,
            "v.png",
            Matrix3::identity(),
            Vector3::zeros(),
            CameraIntrinsics::new(50.0, 50.0, 20.0, 20.0, 40, 40),
        )
    }

    #[test]
    fn integration_values() {
        // One voxel column along the optical axis.
        let mut vol = TsdfVolume::new(Vector3::new(0.0, 0.0, 3.0), 0.25, [1, 1, 9]);
        let depth = vec![4.0; 1600];
        vol.integrate(&depth, &ortho_view(), 1.0);
        let at = |z: f64| vol.tsdf[((z - 3.0) / 0.25) as usize];
        assert_eq!(at(4.0), 0.0);
        assert_eq!(at(3.5), 0.5);
        assert_eq!(at(3.0), 1.0);
        assert_eq!(at(4.75), -0.75);
        // z = 5 is one truncation behind: untouched.
        assert_eq!(vol.weight[8], 0.0);
        assert_eq!(vol.weight[7], 1.0);
    }

    #[test]
    fn integration_is_order_invariant() {
        let view = ortho_view();
        let maps: Vec<Vec<f64>> = (0..4)
            .map(|k| (0..1600).map(|i| 3.5 + 0.01 * ((i * 7 + k * 13) % 50) as f64).collect())
            .collect();
        let mk = |order: &[usize]| {
            let mut v = TsdfVolume::new(Vector3::new(-0.5, -0.5, 3.0), 0.05, [20, 20, 20]);
            for &k in order {
                v.integrate(&maps[k], &view, 0.2);
            }
            v
        };
        let a = mk(&[0, 1, 2, 3]);
        let b = mk(&[3, 1, 0, 2]);
        assert_eq!(a.weight, b.weight);
        for (x, y) in a.tsdf.iter().zip(&b.tsdf) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    fn sphere(r: f64, voxel: f64) -> TriangleMesh {
        let vol = volume_from_sdf(&cube_box(r * 1.3), voxel, 4.0 * voxel, |p| p.norm() - r);
        extract_mesh(&vol, 0)
    }

    #[test]
    fn sphere_vertices_on_radius_and_closed() {
        let (r, voxel) = (1.0, 0.1);
        let m = sphere(r, voxel);
        assert!(!m.is_empty());
        assert!(m.vertices.iter().all(|v| (v.norm() - r).abs() < voxel));
        assert!(m.is_watertight());
        assert!(m.signed_volume() > 0.0, "normals must face outward");
        let expect = 4.0 / 3.0 * std::f64::consts::PI;
        assert!((m.signed_volume() - expect).abs() / expect < 0.02);
    }

    #[test]
    fn all_positive_volume_is_empty() {
        let vol = volume_from_sdf(&cube_box(1.0), 0.1, 0.4, |_| 1.0);
        assert!(extract_mesh(&vol, 0).is_empty());
    }

    #[test]
    fn plane_is_flat() {
        let voxel = 0.1;
        let vol = volume_from_sdf(&cube_box(1.0), voxel, 0.4, |p| p.z - 0.234);
        let m = extract_mesh(&vol, 0);
        assert!(!m.is_empty());
        assert!(m.vertices.iter().all(|v| (v.z - 0.234).abs() < voxel));
    }

    #[test]
    fn cleanup_removes_degenerate() {
        let mut m = TriangleMesh {
            vertices: vec![Vector3::zeros(), Vector3::x(), Vector3::y(), Vector3::x() * 2.0, Vector3::zeros()],
            triangles: vec![[0, 1, 2], [0, 1, 3], [0, 4, 1]],
            tags: vec![0, 0, 0],
        };
        m.cleanup();
        assert_eq!(m.triangles, vec![[0, 1, 2]]);
        assert_eq!(m.vertices.len(), 3);
    }

    #[test]
    fn mesh_ply_and_obj_round_trip() {
        let m = sphere(0.5, 0.1);
        let dir = tempfile::tempdir().unwrap();
        m.write_ply(&dir.path().join("m.ply")).unwrap();
        let back = TriangleMesh::read_ply(&dir.path().join("m.ply")).unwrap();
        assert_eq!(back.triangles, m.triangles);
        assert!(back.vertices.iter().zip(&m.vertices).all(|(a, b)| (a - b).norm() < 1e-6));
        m.write_obj(&dir.path().join("m.obj")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("m.obj")).unwrap();
        assert!(text.contains("g group_0"));
    }

    #[test]
    fn dump_writes_header() {
        let vol = volume_from_sdf(&cube_box(0.2), 0.1, 0.4, |p| p.norm() - 0.1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.raw");
        vol.dump(&p).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len() as usize, vol.tsdf.len() * 4);
        let h: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p.with_extension("json")).unwrap()).unwrap();
        assert_eq!(h["dims"][0], vol.dims[0]);
    }

    #[test]
    fn aabb_components() {
        let b = |x: f64| Aabb {
            min: [x, 0.0, 0.0],
            max: [x + 1.0, 1.0, 1.0],
        };
        assert_eq!(components(&[b(0.0), b(5.0), b(0.5)]), vec![vec![0, 2], vec![1]]);
    }
}
