use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;

use groupsplat::eval::{evaluate_mesh, precision_recall_f1};
use groupsplat::grouping::{dbscan_by_id, dbscan_cluster, NOISE};
use groupsplat::meshing::{TriangleMesh, TsdfVolume};
use groupsplat::scene::{CameraIntrinsics, ViewRecord};
use groupsplat::synth::look_at;

fn v3() -> impl Strategy<Value = Vector3<f64>> {
    (-5.0..5.0f64, -5.0..5.0f64, -1.0..1.0f64).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn cloud(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Vector3<f64>>> {
    prop::collection::vec(v3(), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dbscan_by_id_ignores_input_order(pts in cloud(1..120), seed in any::<u64>(), eps in 0.3..2.0f64, min_pts in 1usize..6) {
        let tagged: Vec<(u32, Vector3<f64>)> = pts.iter().enumerate().map(|(i, p)| (i as u32, *p)).collect();
        let base = dbscan_by_id(&tagged, eps, min_pts);
        let mut shuffled = tagged.clone();
        // Fisher-Yates driven by a simple LCG keeps the shrinker useful.
        let mut s = seed;
        for i in (1..shuffled.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        let labels = dbscan_by_id(&shuffled, eps, min_pts);
        for ((id, _), l) in shuffled.iter().zip(&labels) {
            prop_assert_eq!(*l, base[*id as usize]);
        }
    }

    #[test]
    fn dbscan_core_partition_is_order_free(pts in cloud(1..100), eps in 0.3..2.0f64, min_pts in 1usize..6) {
        let fwd = dbscan_cluster(&pts, eps, min_pts);
        let rev_pts: Vec<_> = pts.iter().rev().copied().collect();
        let mut rev = dbscan_cluster(&rev_pts, eps, min_pts);
        rev.reverse();
        let n = pts.len();
        let core: Vec<bool> = (0..n)
            .map(|i| (0..n).filter(|&j| (pts[i] - pts[j]).norm() <= eps).count() >= min_pts)
            .collect();
        for i in 0..n {
            prop_assert_eq!(fwd[i] == NOISE, rev[i] == NOISE);
            for j in 0..n {
                if core[i] && core[j] {
                    prop_assert_eq!(fwd[i] == fwd[j], rev[i] == rev[j]);
                }
            }
        }
    }

    #[test]
    fn f1_is_symmetric(a in cloud(1..80), b in cloud(1..80), t in 0.05..3.0f64) {
        let ab = precision_recall_f1(&a, &b, t).unwrap();
        let ba = precision_recall_f1(&b, &a, t).unwrap();
        prop_assert_eq!(ab.precision, ba.recall);
        prop_assert_eq!(ab.recall, ba.precision);
        prop_assert!((ab.f1 - ba.f1).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&ab.f1));
    }

    #[test]
    fn eval_is_rigid_invariant(gt in cloud(20..200), axis in v3(), angle in -3.0..3.0f64, shift in v3(), seed in any::<u64>()) {
        prop_assume!(axis.norm() > 1e-3);
        let mesh = TriangleMesh {
            vertices: vec![
                Vector3::new(-3.0, -3.0, 0.0),
                Vector3::new(3.0, -3.0, 0.0),
                Vector3::new(3.0, 3.0, 0.0),
                Vector3::new(-3.0, 3.0, 0.5),
            ],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
            tags: vec![0, 0],
        };
        let r = Rotation3::new(axis.normalize() * angle);
        let moved = TriangleMesh {
            vertices: mesh.vertices.iter().map(|p| r * p + shift).collect(),
            ..mesh.clone()
        };
        let gt_moved: Vec<_> = gt.iter().map(|p| r * p + shift).collect();
        let a = evaluate_mesh(&mesh, &gt, 0.4, 0.2, seed).unwrap();
        let b = evaluate_mesh(&moved, &gt_moved, 0.4, 0.2, seed).unwrap();
        prop_assert_eq!(a.sample_count, b.sample_count);
        // Distances agree to rounding, so only exact ties could flip.
        prop_assert!((a.precision - b.precision).abs() <= 2.0 / a.sample_count as f64);
        prop_assert!((a.recall - b.recall).abs() <= 2.0 / a.gt_count as f64);
    }

    #[test]
    fn tsdf_fusion_ignores_view_order(depths in prop::collection::vec(2.0..6.0f64, 2..6), az0 in 0.0..6.2f64) {
        let k = CameraIntrinsics::new(30.0, 30.0, 15.5, 11.5, 32, 24);
        let target = Vector3::zeros();
        let views: Vec<ViewRecord> = (0..depths.len())
            .map(|i| {
                let a = az0 + i as f64 * 0.7;
                let eye = Vector3::new(a.cos() * 4.0, a.sin() * 4.0, 1.5);
                ViewRecord::new(i as u32 + 1, format!("v{i}.png"), look_at(&eye, &target), eye, k)
            })
            .collect();
        let maps: Vec<Vec<f64>> = depths
            .iter()
            .enumerate()
            .map(|(i, d)| (0..32 * 24).map(|p| d + 0.01 * ((p + i) % 7) as f64).collect())
            .collect();
        let fuse = |order: &mut dyn Iterator<Item = usize>| {
            let mut vol = TsdfVolume::new(Vector3::repeat(-1.5), 0.1, [30, 30, 30]);
            for i in order {
                vol.integrate(&maps[i], &views[i], 0.3);
            }
            vol
        };
        let a = fuse(&mut (0..depths.len()));
        let b = fuse(&mut (0..depths.len()).rev());
        prop_assert!(a.weight.iter().any(|&w| w > 1.0));
        prop_assert_eq!(&a.weight, &b.weight);
        for (x, y) in a.tsdf.iter().zip(&b.tsdf) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
