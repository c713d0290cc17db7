//! Surface sampling and precision / recall / F1 against a reference cloud.

use std::collections::BTreeMap;

use rstar::RTree;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meshing::TriangleMesh;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub sample_count: usize,
    pub gt_count: usize,
    pub threshold: f64,
    pub sample_density: f64,
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Area-weighted uniform samples, about one per `density^2` of area.
pub fn sample_mesh_surface(mesh: &TriangleMesh, density: f64, seed: u64) -> Vec<Vector3<f64>> {
    assert!(density > 0.0, "density must be positive");
    let areas: Vec<f64> = (0..mesh.triangles.len()).map(|t| mesh.triangle_area(t)).collect();
    let total: f64 = areas.iter().sum();
    if total <= 0.0 {
        return Vec::new();
    }
    let n = (total / (density * density)).round() as usize;
    let mut cdf = Vec::with_capacity(areas.len());
    let mut acc = 0.0;
    for a in &areas {
        acc += a;
        cdf.push(acc);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let r = rng.gen::<f64>() * total;
            let t = cdf.partition_point(|&c| c <= r).min(cdf.len() - 1);
            let [a, b, c] = mesh.triangles[t].map(|i| mesh.vertices[i as usize]);
            let (u, v): (f64, f64) = (rng.gen(), rng.gen());
            let su = u.sqrt();
            a * (1.0 - su) + b * (su * (1.0 - v)) + c * (su * v)
        })
        .collect()
}

/// Exact distance from each query to its nearest reference point (R-tree).
pub fn nearest_distances(queries: &[Vector3<f64>], reference: &[Vector3<f64>]) -> Vec<f64> {
    if reference.is_empty() {
        return vec![f64::INFINITY; queries.len()];
    }
    let pts: Vec<[f64; 3]> = reference.iter().map(|p| [p.x, p.y, p.z]).collect();
    let tree = RTree::bulk_load(pts);
    queries
        .par_iter()
        .map(|q| {
            let p = tree.nearest_neighbor(&[q.x, q.y, q.z]).expect("non-empty tree");
            (Vector3::from(*p) - q).norm()
        })
        .collect()
}

/// Precision over samples and recall over the reference at `threshold`.
pub fn precision_recall_f1(samples: &[Vector3<f64>], gt: &[Vector3<f64>], threshold: f64) -> Result<EvalReport> {
    if !(threshold > 0.0) {
        return Err(Error::Config(format!("threshold must be positive, got {threshold}")));
    }
    if samples.is_empty() {
        return Err(Error::EmptyCloud { side: "samples" });
    }
    if gt.is_empty() {
        return Err(Error::EmptyCloud { side: "ground truth" });
    }
    let hit = |d: &[f64]| d.iter().filter(|&&x| x < threshold).count() as f64 / d.len() as f64;
    let precision = hit(&nearest_distances(samples, gt));
    let recall = hit(&nearest_distances(gt, samples));
    Ok(EvalReport {
        precision,
        recall,
        f1: f1_score(precision, recall),
        sample_count: samples.len(),
        gt_count: gt.len(),
        threshold,
        sample_density: 0.0,
    })
}

/// One centroid per occupied voxel of side `size`, in voxel-key order.
pub fn voxel_downsample(points: &[Vector3<f64>], size: f64) -> Vec<Vector3<f64>> {
    let mut cells: BTreeMap<[i64; 3], (Vector3<f64>, usize)> = BTreeMap::new();
    for p in points {
        let k = [0, 1, 2].map(|a| (p[a] / size).floor() as i64);
        let e = cells.entry(k).or_insert((Vector3::zeros(), 0));
        e.0 += p;
        e.1 += 1;
    }
    cells.into_values().map(|(s, n)| s / n as f64).collect()
}

/// Sample `mesh` at `density` and score it against `gt`.
pub fn evaluate_mesh(mesh: &TriangleMesh, gt: &[Vector3<f64>], threshold: f64, density: f64, seed: u64) -> Result<EvalReport> {
    let samples = sample_mesh_surface(mesh, density, seed);
    let mut r = precision_recall_f1(&samples, gt, threshold)?;
    r.sample_density = density;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> TriangleMesh {
        TriangleMesh {
            vertices: vec![Vector3::zeros(), Vector3::x(), Vector3::new(1.0, 1.0, 0.0), Vector3::y()],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
            tags: vec![0, 0],
        }
    }

    #[test]
    fn unit_square_sample_count() {
        let s = sample_mesh_surface(&square(), 0.1, 1);
        assert!((s.len() as i64 - 100).abs() <= 1);
        assert!(s.iter().all(|p| p.z == 0.0 && (0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y)));
        assert!(sample_mesh_surface(&TriangleMesh::default(), 0.1, 1).is_empty());
    }

    #[test]
    fn area_weighting() {
        // Areas 3:1.
        let m = TriangleMesh {
            vertices: vec![
                Vector3::zeros(),
                Vector3::new(3.0, 0.0, 0.0),
                Vector3::new(0.0, 2.0, 0.0),
                Vector3::new(10.0, 0.0, 0.0),
                Vector3::new(11.0, 0.0, 0.0),
                Vector3::new(10.0, 2.0, 0.0),
            ],
            triangles: vec![[0, 1, 2], [3, 4, 5]],
            tags: vec![0, 0],
        };
        let s = sample_mesh_surface(&m, 0.05, 7);
        let left = s.iter().filter(|p| p.x < 5.0).count() as f64;
        let n = s.len() as f64;
        // Binomial std at p = 0.75.
        let sd = (n * 0.75 * 0.25).sqrt();
        assert!((left - 0.75 * n).abs() < 4.0 * sd, "{left} of {n}");
    }

    #[test]
    fn identity_and_shift() {
        let pts: Vec<Vector3<f64>> = (0..200).map(|i| Vector3::new((i % 20) as f64 * 0.1, (i / 20) as f64 * 0.1, 0.0)).collect();
        let r = precision_recall_f1(&pts, &pts, 0.05).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        let shifted: Vec<Vector3<f64>> = pts.iter().map(|p| p + Vector3::new(10.0, 0.0, 0.0)).collect();
        let r = precision_recall_f1(&shifted, &pts, 0.05).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn reported_row_arithmetic() {
        assert!((f1_score(0.671, 0.467) - 0.551).abs() < 5e-4);
    }

    #[test]
    fn empty_side_is_named() {
        let p = vec![Vector3::zeros()];
        match precision_recall_f1(&[], &p, 1.0) {
            Err(Error::EmptyCloud { side }) => assert_eq!(side, "samples"),
            other => panic!("{other:?}"),
        }
        match precision_recall_f1(&p, &[], 1.0) {
            Err(Error::EmptyCloud { side }) => assert_eq!(side, "ground truth"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn grid_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<Vector3<f64>> = (0..500).map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen()) * 4.0).collect();
        let b: Vec<Vector3<f64>> = (0..300).map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen::<f64>() * 0.1) * 4.0).collect();
        let d = nearest_distances(&a, &b);
        for (q, dq) in a.iter().zip(&d) {
            let bf = b.iter().map(|p| (p - q).norm()).fold(f64::INFINITY, f64::min);
            assert!((dq - bf).abs() <= 1e-15 * bf.max(1.0));
        }
    }

    #[test]
    fn downsample_keeps_one_per_voxel() {
        let pts = vec![Vector3::new(0.1, 0.1, 0.1), Vector3::new(0.3, 0.3, 0.3), Vector3::new(1.5, 0.0, 0.0)];
        let d = voxel_downsample(&pts, 1.0);
        assert_eq!(d.len(), 2);
        assert!((d[0] - Vector3::repeat(0.2)).norm() < 1e-12);
    }
}
