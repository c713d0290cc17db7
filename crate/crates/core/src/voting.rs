//! Multi-view voting filter over coarse building masks and segment-union mask
//! refinement.
//!
//! A sparse point is a *potential* building point when at least one view sees
//! it inside its coarse mask. Its unreliability score counts the views that
//! see it (in front of the camera, inside the image) but outside the mask.
//! Occlusion is deliberately not modeled.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rayon::prelude::*;

use crate::error::Result;
use crate::mask::{extract_boundary, MaskBitmap, SegmentLabelMap};
use crate::ply::{PlyData, Precision};
use crate::scene::{SceneBundle, SparsePoint, ViewRecord};

/// Per-point vote tallies over all views.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PointVotes {
    /// Views where the point lands inside the mask.
    pub in_mask: u32,
    /// Views where the point lands in the image but outside the mask.
    pub unreliability: u32,
}

impl PointVotes {
    pub fn visible(&self) -> u32 {
        self.in_mask + self.unreliability
    }
}

/// Tolerance on the unreliability score. `0` keeps only fully consistent
/// points, `f64::INFINITY` disables the filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance(pub f64);

impl Tolerance {
    pub const UNBOUNDED: Tolerance = Tolerance(f64::INFINITY);

    pub fn accepts(&self, us: u32) -> bool {
        if self.0 <= 0.0 {
            us == 0
        } else {
            (us as f64) < self.0
        }
    }
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance(2.0)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReliablePointSet {
    pub point_ids: BTreeSet<u32>,
    pub scores: BTreeMap<u32, u32>,
    pub in_mask_counts: BTreeMap<u32, u32>,
}

impl ReliablePointSet {
    pub fn len(&self) -> usize {
        self.point_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point_ids.is_empty()
    }

    pub fn contains(&self, id: u32) -> bool {
        self.point_ids.contains(&id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedMaskSet {
    /// Refined building mask per view, aligned with `SceneBundle::views`.
    pub rbm: Vec<MaskBitmap>,
    /// Boundary band per view.
    pub mb: Vec<MaskBitmap>,
}

fn tally(point: &SparsePoint, views: &[ViewRecord], masks: &[MaskBitmap]) -> PointVotes {
    let mut votes = PointVotes::default();
    for (view, mask) in views.iter().zip(masks) {
        if let Some((x, y)) = view.pixel_of(&point.xyz) {
            if mask.get(x, y) {
                votes.in_mask += 1;
            } else {
                votes.unreliability += 1;
            }
        }
    }
    votes
}

/// In-mask vote count for every point; `masks` is aligned with `scene.views`.
/// Points with a nonzero count are potential building points.
pub fn find_potential_points(scene: &SceneBundle, masks: &[MaskBitmap]) -> BTreeMap<u32, u32> {
    assert_eq!(scene.views.len(), masks.len(), "one mask per view");
    scene
        .points
        .par_iter()
        .map(|p| (p.point_id, tally(p, &scene.views, masks).in_mask))
        .collect()
}

/// Number of views seeing `point` inside the image but outside the mask.
pub fn unreliability_score(point: &SparsePoint, scene: &SceneBundle, masks: &[MaskBitmap]) -> u32 {
    tally(point, &scene.views, masks).unreliability
}

/// Votes for every potential building point.
pub fn score_points(scene: &SceneBundle, masks: &[MaskBitmap]) -> BTreeMap<u32, PointVotes> {
    assert_eq!(scene.views.len(), masks.len(), "one mask per view");
    scene
        .points
        .par_iter()
        .map(|p| (p.point_id, tally(p, &scene.views, masks)))
        .filter(|(_, v)| v.in_mask > 0)
        .collect()
}

pub fn filter_reliable_points(potentials: &BTreeMap<u32, PointVotes>, tau: Tolerance) -> ReliablePointSet {
    let mut out = ReliablePointSet::default();
    for (&id, v) in potentials {
        if v.in_mask == 0 || !tau.accepts(v.unreliability) {
            continue;
        }
        out.point_ids.insert(id);
        out.scores.insert(id, v.unreliability);
        out.in_mask_counts.insert(id, v.in_mask);
    }
    out
}

/// Union of every fine segment hit by at least `min_hits` reliable point projections.
pub fn refine_mask(
    view: &ViewRecord,
    scene: &SceneBundle,
    reliable: &ReliablePointSet,
    segments: &SegmentLabelMap,
    min_hits: usize,
) -> MaskBitmap {
    let mut hits: HashMap<u16, usize> = HashMap::new();
    for p in scene.points.iter().filter(|p| reliable.contains(p.point_id)) {
        if let Some((x, y)) = view.pixel_of(&p.xyz) {
            *hits.entry(segments.get(x, y)).or_insert(0) += 1;
        }
    }
    let min_hits = min_hits.max(1);
    let chosen: BTreeSet<u16> = hits
        .into_iter()
        .filter(|(_, n)| *n >= min_hits)
        .map(|(l, _)| l)
        .collect();
    MaskBitmap {
        width: segments.width,
        height: segments.height,
        bits: segments.labels.iter().map(|l| chosen.contains(l)).collect(),
    }
}

/// Refined masks and boundary bands for every view.
pub fn refine_all(
    scene: &SceneBundle,
    reliable: &ReliablePointSet,
    segments: &[SegmentLabelMap],
    min_hits: usize,
    band_radius: usize,
) -> RefinedMaskSet {
    assert_eq!(scene.views.len(), segments.len(), "one segment map per view");
    let (rbm, mb) = scene
        .views
        .par_iter()
        .zip(segments.par_iter())
        .map(|(v, s)| {
            let rbm = refine_mask(v, scene, reliable, s, min_hits);
            let mb = extract_boundary(&rbm, band_radius);
            (rbm, mb)
        })
        .unzip();
    RefinedMaskSet { rbm, mb }
}

impl RefinedMaskSet {
    /// Writes `<stem>_rbm.png` and `<stem>_mb.png` for every view.
    pub fn save(&self, scene: &SceneBundle, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| crate::error::Error::io(dir, e))?;
        for (i, v) in scene.views.iter().enumerate() {
            let stem = view_stem(v);
            self.rbm[i].save_png(&dir.join(format!("{stem}_rbm.png")))?;
            self.mb[i].save_png(&dir.join(format!("{stem}_mb.png")))?;
        }
        Ok(())
    }

    pub fn load(scene: &SceneBundle, dir: &Path) -> Result<Self> {
        let mut rbm = Vec::new();
        let mut mb = Vec::new();
        for v in &scene.views {
            let stem = view_stem(v);
            rbm.push(crate::mask::load_mask(
                &dir.join(format!("{stem}_rbm.png")),
                v.width(),
                v.height(),
            )?);
            mb.push(crate::mask::load_mask(
                &dir.join(format!("{stem}_mb.png")),
                v.width(),
                v.height(),
            )?);
        }
        Ok(Self { rbm, mb })
    }
}

pub fn view_stem(v: &ViewRecord) -> String {
    Path::new(&v.name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| v.name.clone())
}

/// Reliable points as PLY with `us` and `votes` scalar properties.
pub fn write_reliable_ply(scene: &SceneBundle, reliable: &ReliablePointSet, path: &Path) -> Result<()> {
    let pts: Vec<&SparsePoint> = scene
        .points
        .iter()
        .filter(|p| reliable.contains(p.point_id))
        .collect();
    let mut d = PlyData::from_positions(&pts.iter().map(|p| [p.xyz.x, p.xyz.y, p.xyz.z]).collect::<Vec<_>>());
    d.push_prop("point_id", pts.iter().map(|p| p.point_id as f64).collect());
    d.push_prop("us", pts.iter().map(|p| reliable.scores[&p.point_id] as f64).collect());
    d.push_prop(
        "votes",
        pts.iter().map(|p| reliable.in_mask_counts[&p.point_id] as f64).collect(),
    );
    d.write(path, Precision::F64)
}

/// Point ids from a reliable-point PLY written by [`write_reliable_ply`].
pub fn read_reliable_ply(path: &Path) -> Result<ReliablePointSet> {
    let d = PlyData::read(path)?;
    let missing = |p: &str| crate::error::Error::parse(path, 0, format!("missing property {p}"));
    let ids = d.prop("point_id").ok_or_else(|| missing("point_id"))?;
    let us = d.prop("us").ok_or_else(|| missing("us"))?;
    let votes = d.prop("votes").ok_or_else(|| missing("votes"))?;
    let mut out = ReliablePointSet::default();
    for i in 0..ids.len() {
        let id = ids[i] as u32;
        out.point_ids.insert(id);
        out.scores.insert(id, us[i] as u32);
        out.in_mask_counts.insert(id, votes[i] as u32);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::CameraIntrinsics;
    use nalgebra::{Matrix3, Vector3};

    fn view_at(id: u32, x: f64) -> ViewRecord {
        let k = CameraIntrinsics::new(20.0, 20.0, 10.0, 10.0, 20, 20);
        ViewRecord::new(id, format!("v{id}.png"), Matrix3::identity(), Vector3::new(x, 0.0, 0.0), k)
    }

    fn point(id: u32, xyz: [f64; 3]) -> SparsePoint {
        SparsePoint {
            point_id: id,
            xyz: Vector3::from(xyz),
            color: None,
            track: vec![1],
        }
    }

    fn scene3() -> SceneBundle {
        SceneBundle {
            views: vec![view_at(1, 0.0), view_at(2, 0.1), view_at(3, -0.1)],
            points: vec![point(0, [0.0, 0.0, 5.0]), point(1, [0.0, 0.0, -5.0])],
        }
    }

    #[test]
    fn full_vote_and_zero_case() {
        let s = scene3();
        let masks = vec![MaskBitmap::full(20, 20); 3];
        let c = find_potential_points(&s, &masks);
        assert_eq!(c[&0], 3);
        assert_eq!(c[&1], 0);
        assert_eq!(unreliability_score(&s.points[0], &s, &masks), 0);
        let scored = score_points(&s, &masks);
        assert!(!scored.contains_key(&1));
    }

    #[test]
    fn one_view_disagrees() {
        let s = scene3();
        let mut masks = vec![MaskBitmap::full(20, 20); 3];
        masks[1] = MaskBitmap::empty(20, 20);
        assert_eq!(find_potential_points(&s, &masks)[&0], 2);
        assert_eq!(unreliability_score(&s.points[0], &s, &masks), 1);
    }

    #[test]
    fn out_of_bounds_view_contributes_nothing() {
        let mut s = scene3();
        s.views[2].center = Vector3::new(-100.0, 0.0, 0.0);
        let masks = vec![MaskBitmap::empty(20, 20); 3];
        assert_eq!(unreliability_score(&s.points[0], &s, &masks), 2);
    }

    #[test]
    fn threshold_evaluation() {
        let pots: BTreeMap<u32, PointVotes> = (0..5)
            .map(|i| (i, PointVotes { in_mask: 1, unreliability: i }))
            .collect();
        let keep = |t: f64| filter_reliable_points(&pots, Tolerance(t)).point_ids.into_iter().collect::<Vec<_>>();
        assert_eq!(keep(3.0), vec![0, 1, 2]);
        assert_eq!(keep(1.0), vec![0]);
        assert_eq!(keep(0.0), vec![0]);
        assert_eq!(keep(f64::INFINITY), vec![0, 1, 2, 3, 4]);
    }

    fn segments_3() -> SegmentLabelMap {
        // Three vertical stripes, labels 5, 6, 7.
        SegmentLabelMap {
            width: 20,
            height: 20,
            labels: (0..400).map(|i| 5 + ((i % 20) / 7) as u16).collect(),
        }
    }

    #[test]
    fn refine_selects_segments_by_hits() {
        let v = view_at(1, 0.0);
        // x pixel = 20 * X / 5 + 10; X=-2 -> 2 (stripe 5), X=0 -> 10 (stripe 6)
        let s = SceneBundle {
            views: vec![v.clone()],
            points: vec![
                point(0, [-2.0, 0.0, 5.0]),
                point(1, [-2.0, 1.0, 5.0]),
                point(2, [0.0, 0.0, 5.0]),
            ],
        };
        let reliable = ReliablePointSet {
            point_ids: [0, 1, 2].into_iter().collect(),
            ..Default::default()
        };
        let seg = segments_3();
        let rbm = refine_mask(&v, &s, &reliable, &seg, 2);
        let expected = MaskBitmap::from_fn(20, 20, |x, _| x < 7);
        assert_eq!(rbm, expected);
        let rbm1 = refine_mask(&v, &s, &reliable, &seg, 1);
        assert_eq!(rbm1, MaskBitmap::from_fn(20, 20, |x, _| x < 14));
        let none = refine_mask(&v, &s, &ReliablePointSet::default(), &seg, 1);
        assert!(none.is_empty());
    }

    #[test]
    fn reliable_ply_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = scene3();
        let masks = vec![MaskBitmap::full(20, 20); 3];
        let r = filter_reliable_points(&score_points(&s, &masks), Tolerance::default());
        let p = dir.path().join("r.ply");
        write_reliable_ply(&s, &r, &p).unwrap();
        assert_eq!(read_reliable_ply(&p).unwrap(), r);
    }
}
