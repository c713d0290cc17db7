//! In-memory composition of the stages, shared by the command line and tests.

use std::path::Path;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate_mesh, voxel_downsample, EvalReport};
use crate::grouping::{build_groups, BuildingGroup};
use crate::imaging::RgbImage;
use crate::mask::{MaskBitmap, SegmentLabelMap};
use crate::meshing::{merge_group_meshes, MeshInput, MeshReport, TriangleMesh};
use crate::scene::SceneBundle;
use crate::trainer::{prepare_group_views, train_all_groups, GroupCheckpoint, RunReport, TrainView};
use crate::voting::{filter_reliable_points, refine_all, score_points, RefinedMaskSet, ReliablePointSet};

use nalgebra::Vector3;

/// Voting filter followed by segment-union refinement.
pub fn refine_stage(
    scene: &SceneBundle,
    masks: &[MaskBitmap],
    segments: &[SegmentLabelMap],
    cfg: &PipelineConfig,
) -> (ReliablePointSet, RefinedMaskSet) {
    let votes = score_points(scene, masks);
    let reliable = filter_reliable_points(&votes, cfg.tau);
    let refined = refine_all(scene, &reliable, segments, cfg.min_hits, cfg.band_radius);
    (reliable, refined)
}

pub fn group_stage(
    scene: &SceneBundle,
    reliable: &ReliablePointSet,
    refined: &RefinedMaskSet,
    cfg: &PipelineConfig,
) -> Result<Vec<BuildingGroup>> {
    build_groups(scene, reliable, refined, &cfg.grouping)
}

/// Training views for every group, each with the masks of its own points.
pub fn group_jobs(
    groups: &[BuildingGroup],
    scene: &SceneBundle,
    images: &[RgbImage],
    segments: &[SegmentLabelMap],
    cfg: &PipelineConfig,
) -> Vec<(BuildingGroup, Vec<TrainView>)> {
    groups
        .iter()
        .map(|g| {
            let views = prepare_group_views(
                g,
                scene,
                images,
                segments,
                cfg.min_hits,
                cfg.band_radius,
                cfg.train.weights.boundary_weight,
            );
            (g.clone(), views)
        })
        .collect()
}

pub fn train_stage(
    jobs: &[(BuildingGroup, Vec<TrainView>)],
    scene: &SceneBundle,
    cfg: &PipelineConfig,
    workers: usize,
    out_dir: Option<&Path>,
) -> Result<(Vec<Option<GroupCheckpoint>>, RunReport)> {
    train_all_groups(jobs, scene, &cfg.train, workers, out_dir)
}

/// Mesh the successfully trained groups.
pub fn mesh_stage(
    jobs: &[(BuildingGroup, Vec<TrainView>)],
    checkpoints: &[Option<GroupCheckpoint>],
    cfg: &PipelineConfig,
    dump_dir: Option<&Path>,
) -> Result<(TriangleMesh, MeshReport)> {
    let inputs: Vec<MeshInput> = jobs
        .iter()
        .zip(checkpoints)
        .filter_map(|((g, views), ck)| {
            ck.as_ref().map(|ck| MeshInput {
                group_id: g.group_id,
                aabb: g.aabb,
                primitives: ck.primitives.clone(),
                views: views.iter().map(|tv| (tv.view.clone(), tv.rbm.clone())).collect(),
            })
        })
        .collect();
    if inputs.is_empty() {
        return Err(Error::InvalidScene("no trained groups to mesh".into()));
    }
    merge_group_meshes(&inputs, &cfg.meshing, &cfg.train.raster, dump_dir)
}

pub fn eval_stage(mesh: &TriangleMesh, gt: &[Vector3<f64>], cfg: &PipelineConfig, seed: u64) -> Result<EvalReport> {
    let e = &cfg.eval;
    if e.gt_downsample {
        let gt = voxel_downsample(gt, e.density);
        evaluate_mesh(mesh, &gt, e.threshold, e.density, seed)
    } else {
        evaluate_mesh(mesh, gt, e.threshold, e.density, seed)
    }
}
