//! Density clustering of reliable building points into independently
//! trainable groups.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::SceneBundle;
use crate::voting::{RefinedMaskSet, ReliablePointSet};

pub const NOISE: i32 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn from_points<'a>(pts: impl IntoIterator<Item = &'a Vector3<f64>>) -> Option<Self> {
        let mut it = pts.into_iter();
        let first = it.next()?;
        let mut b = Aabb {
            min: [first.x, first.y, first.z],
            max: [first.x, first.y, first.z],
        };
        for p in it {
            for k in 0..3 {
                b.min[k] = b.min[k].min(p[k]);
                b.max[k] = b.max[k].max(p[k]);
            }
        }
        Some(b)
    }

    /// Grow each side by `frac` of the extent along that axis. Thin axes get
    /// at least `0.2 * frac` of the diagonal so planar groups keep some depth.
    pub fn expanded(&self, frac: f64) -> Self {
        let diag = self.diagonal();
        let mut out = *self;
        for k in 0..3 {
            let m = ((self.max[k] - self.min[k]) * frac)
                .max(0.2 * frac * diag)
                .max(1e-3 * (1.0 + diag));
            out.min[k] -= m;
            out.max[k] += m;
        }
        out
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn diagonal(&self) -> f64 {
        (0..3)
            .map(|k| (self.max[k] - self.min[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn union(&self, o: &Aabb) -> Aabb {
        let mut out = *self;
        for k in 0..3 {
            out.min[k] = out.min[k].min(o.min[k]);
            out.max[k] = out.max[k].max(o.max[k]);
        }
        out
    }

    pub fn intersects(&self, o: &Aabb) -> bool {
        (0..3).all(|k| self.min[k] <= o.max[k] && o.min[k] <= self.max[k])
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::new(
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildingGroup {
    pub group_id: u32,
    pub point_ids: BTreeSet<u32>,
    pub view_ids: BTreeSet<u32>,
    pub aabb: Aabb,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupingConfig {
    pub eps: f64,
    pub min_pts: usize,
    pub min_group_votes: usize,
    pub aabb_margin: f64,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self {
            eps: 15.0,
            min_pts: 10,
            min_group_votes: 5,
            aabb_margin: 0.1,
        }
    }
}

struct Grid {
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl Grid {
    fn new(points: &[Vector3<f64>], cell: f64) -> Self {
        let mut cells: HashMap<_, Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self { cell, cells }
    }

    fn key(p: &Vector3<f64>, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// Indices within `eps` of `points[i]` (including `i`), ascending.
    fn neighbors(&self, points: &[Vector3<f64>], i: usize, eps: f64) -> Vec<usize> {
        let (cx, cy, cz) = Self::key(&points[i], self.cell);
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(list) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        out.extend(
                            list.iter()
                                .copied()
                                .filter(|&j| (points[j] - points[i]).norm_squared() <= eps * eps),
                        );
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// DBSCAN over `points` scanned in index order. A point is core when at least
/// `min_pts` points (itself included) lie within `eps`. Border points take the
/// first cluster that reaches them. Noise is labeled [`NOISE`].
pub fn dbscan_cluster(points: &[Vector3<f64>], eps: f64, min_pts: usize) -> Vec<i32> {
    assert!(eps > 0.0 && min_pts >= 1);
    let grid = Grid::new(points, eps);
    let neigh: Vec<Vec<usize>> = (0..points.len())
        .map(|i| grid.neighbors(points, i, eps))
        .collect();
    const UNVISITED: i32 = -2;
    let mut labels = vec![UNVISITED; points.len()];
    let mut next = 0;
    for i in 0..points.len() {
        if labels[i] != UNVISITED {
            continue;
        }
        if neigh[i].len() < min_pts {
            labels[i] = NOISE;
            continue;
        }
        let cid = next;
        next += 1;
        labels[i] = cid;
        let mut queue: VecDeque<usize> = neigh[i].iter().copied().collect();
        while let Some(j) = queue.pop_front() {
            if labels[j] == NOISE {
                labels[j] = cid;
            }
            if labels[j] != UNVISITED {
                continue;
            }
            labels[j] = cid;
            if neigh[j].len() >= min_pts {
                queue.extend(neigh[j].iter().copied());
            }
        }
    }
    labels
}

/// DBSCAN with explicit point ids; the scan runs in ascending id order so the
/// result does not depend on input order. Labels are returned in input order.
pub fn dbscan_by_id(points: &[(u32, Vector3<f64>)], eps: f64, min_pts: usize) -> Vec<i32> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by_key(|&i| points[i].0);
    let sorted: Vec<Vector3<f64>> = order.iter().map(|&i| points[i].1).collect();
    let sorted_labels = dbscan_cluster(&sorted, eps, min_pts);
    let mut labels = vec![NOISE; points.len()];
    for (rank, &i) in order.iter().enumerate() {
        labels[i] = sorted_labels[rank];
    }
    labels
}

/// Views where at least `min_group_votes` group points land inside the refined mask.
pub fn assign_views(
    point_ids: &BTreeSet<u32>,
    scene: &SceneBundle,
    refined: &RefinedMaskSet,
    min_group_votes: usize,
) -> BTreeSet<u32> {
    let pidx = scene.point_index();
    let pts: Vec<Vector3<f64>> = point_ids
        .iter()
        .filter_map(|id| pidx.get(id).map(|&i| scene.points[i].xyz))
        .collect();
    scene
        .views
        .iter()
        .zip(&refined.rbm)
        .filter(|(v, rbm)| {
            let votes = pts
                .iter()
                .filter(|p| v.pixel_of(p).is_some_and(|(x, y)| rbm.get(x, y)))
                .count();
            votes >= min_group_votes
        })
        .map(|(v, _)| v.view_id)
        .collect()
}

/// One group per DBSCAN cluster of reliable points. Noise points join the
/// nearest cluster centroid within `2 * eps`, or are dropped.
pub fn build_groups(
    scene: &SceneBundle,
    reliable: &ReliablePointSet,
    refined: &RefinedMaskSet,
    cfg: &GroupingConfig,
) -> Result<Vec<BuildingGroup>> {
    let pidx = scene.point_index();
    let pts: Vec<(u32, Vector3<f64>)> = reliable
        .point_ids
        .iter()
        .filter_map(|id| pidx.get(id).map(|&i| (*id, scene.points[i].xyz)))
        .collect();
    if pts.is_empty() {
        return Err(Error::InvalidScene("no reliable points to group".into()));
    }
    let labels = dbscan_by_id(&pts, cfg.eps, cfg.min_pts);
    let n_clusters = labels.iter().copied().max().unwrap_or(NOISE) + 1;
    if n_clusters <= 0 {
        return Err(Error::NoClusters {
            eps: cfg.eps,
            min_pts: cfg.min_pts,
        });
    }
    let mut members: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n_clusters as usize];
    let mut sums = vec![(Vector3::zeros(), 0usize); n_clusters as usize];
    for ((id, p), &l) in pts.iter().zip(&labels) {
        if l >= 0 {
            members[l as usize].insert(*id);
            sums[l as usize].0 += p;
            sums[l as usize].1 += 1;
        }
    }
    let centroids: Vec<Vector3<f64>> = sums.iter().map(|(s, n)| s / *n as f64).collect();
    for ((id, p), &l) in pts.iter().zip(&labels) {
        if l != NOISE {
            continue;
        }
        if let Some(c) = nearest_centroid(p, &centroids, 2.0 * cfg.eps) {
            members[c].insert(*id);
        }
    }

    let mut groups = Vec::with_capacity(members.len());
    for (gid, point_ids) in members.into_iter().enumerate() {
        let aabb = Aabb::from_points(point_ids.iter().map(|id| &scene.points[pidx[id]].xyz))
            .expect("clusters are non-empty")
            .expanded(cfg.aabb_margin);
        let view_ids = assign_views(&point_ids, scene, refined, cfg.min_group_votes);
        let mut warnings = Vec::new();
        if view_ids.is_empty() {
            let w = format!("group {gid} has no assignable views");
            log::warn!("{w}");
            warnings.push(w);
        }
        groups.push(BuildingGroup {
            group_id: gid as u32,
            point_ids,
            view_ids,
            aabb,
            warnings,
        });
    }
    Ok(groups)
}

/// Index of the closest centroid within `max_dist`; ties go to the lower index.
pub fn nearest_centroid(p: &Vector3<f64>, centroids: &[Vector3<f64>], max_dist: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in centroids.iter().enumerate() {
        let d = (p - c).norm();
        if d <= max_dist && best.map_or(true, |(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

pub fn write_manifest(groups: &[BuildingGroup], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(groups)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<BuildingGroup>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::MaskBitmap;
    use crate::scene::{CameraIntrinsics, SparsePoint, ViewRecord};
    use nalgebra::Matrix3;

    fn clump(center: [f64; 3], n: usize, spread: f64) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|i| {
                let t = i as f64 / n as f64 * std::f64::consts::TAU;
                Vector3::new(
                    center[0] + spread * t.cos(),
                    center[1] + spread * t.sin(),
                    center[2] + spread * (i % 3) as f64 / 3.0,
                )
            })
            .collect()
    }

    #[test]
    fn separated_clumps_form_two_clusters() {
        let mut pts = clump([0.0; 3], 12, 0.3);
        pts.extend(clump([10.0, 0.0, 0.0], 12, 0.3));
        let l = dbscan_cluster(&pts, 1.0, 4);
        assert!(l[..12].iter().all(|&x| x == 0));
        assert!(l[12..].iter().all(|&x| x == 1));
    }

    #[test]
    fn isolated_point_is_noise() {
        let l = dbscan_cluster(&[Vector3::zeros()], 1.0, 2);
        assert_eq!(l, vec![NOISE]);
        // With min_pts = 1 every point is its own core.
        assert_eq!(dbscan_cluster(&[Vector3::zeros()], 1.0, 1), vec![0]);
    }

    #[test]
    fn border_point_goes_to_first_cluster() {
        // Two cores (0 and 2, each with two satellites) share border point 1.
        let pts = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(2.0, 0.0, 0.0),
            Vector3::new(-0.5, 0.0, 0.0),
            Vector3::new(2.5, 0.0, 0.0),
            Vector3::new(-0.3, 0.0, 0.0),
            Vector3::new(2.3, 0.0, 0.0),
        ];
        let l = dbscan_cluster(&pts, 1.0, 4);
        assert_eq!(l, vec![0, 0, 1, 0, 1, 0, 1]);
    }

    fn view(id: u32, x: f64) -> ViewRecord {
        let k = CameraIntrinsics::new(40.0, 40.0, 20.0, 20.0, 40, 40);
        ViewRecord::new(id, format!("{id}.png"), Matrix3::identity(), Vector3::new(x, 0.0, -10.0), k)
    }

    #[test]
    fn vote_threshold_selects_views() {
        // 12 points; view 1 sees all 12, view 2 sees 5, view 3 sees 4 inside its RBM.
        let pts: Vec<SparsePoint> = (0..12)
            .map(|i| SparsePoint {
                point_id: i,
                xyz: Vector3::new(0.25 * i as f64 - 1.0, 0.0, 0.0),
                color: None,
                track: vec![1],
            })
            .collect();
        let scene = SceneBundle {
            views: vec![view(1, 0.0), view(2, 0.0), view(3, 0.0)],
            points: pts,
        };
        // u = 4x + 20 -> point i lands on pixel 16 + i
        let upto = |n: usize| MaskBitmap::from_fn(40, 40, move |x, _| x < 16 + n);
        let refined = RefinedMaskSet {
            rbm: vec![MaskBitmap::full(40, 40), upto(5), upto(4)],
            mb: vec![MaskBitmap::empty(40, 40); 3],
        };
        let ids: BTreeSet<u32> = (0..12).collect();
        let counts: Vec<usize> = scene
            .views
            .iter()
            .zip(&refined.rbm)
            .map(|(v, m)| scene.points.iter().filter(|p| v.pixel_of(&p.xyz).is_some_and(|(x, y)| m.get(x, y))).count())
            .collect();
        assert_eq!(counts, vec![12, 5, 4]);
        assert_eq!(assign_views(&ids, &scene, &refined, 5), [1, 2].into_iter().collect());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = vec![BuildingGroup {
            group_id: 0,
            point_ids: [1, 2].into_iter().collect(),
            view_ids: [3].into_iter().collect(),
            aabb: Aabb {
                min: [0.0; 3],
                max: [1.0; 3],
            },
            warnings: vec![],
        }];
        let p = dir.path().join("groups.json");
        write_manifest(&g, &p).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), g);
    }
}
