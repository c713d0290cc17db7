//! Per-group optimization with adaptive densification, and a worker pool
//! that trains all groups independently.

pub mod checkpoint;
pub mod optim;

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Matrix3, UnitQuaternion, Vector3, Vector4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rstar::primitives::GeomWithData;
use rstar::RTree;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::{Aabb, BuildingGroup};
use crate::imaging::RgbImage;
use crate::losses::{
    loss_ban, loss_count_balance, loss_coverage, loss_flatten, loss_gc_load, loss_mv_geo, loss_mv_rgb, loss_rgb, total_loss, LossComponents,
    LossWeights, PixelWeightMaps,
};
use crate::mask::{extract_boundary, MaskBitmap, SegmentLabelMap};
use crate::scene::{SceneBundle, ViewRecord};
use crate::splat::{
    depth_backward, depth_to_normal, depth_to_normal_backward, rasterize_backward, rasterize_forward,
    GaussianPrimitive, PixelGrads, RasterSettings, RenderedBuffers,
};
use crate::voting::{refine_mask, ReliablePointSet};

pub use checkpoint::{read_primitives_ply, write_primitives_ply};
use optim::{adam_step, AdamState, StepRates};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Initial and final position rate, multiplied by the group extent.
    pub lr_position: f64,
    pub lr_position_final: f64,
    pub lr_opacity: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub lr_color: f64,
    pub sh_degree: usize,
    /// Iterations between SH degree increments.
    pub sh_interval: usize,
    pub densify_from: usize,
    pub densify_interval: usize,
    /// Fraction of `iterations` after which densification stops.
    pub densify_until: f64,
    /// Threshold on the mean screen-space position gradient, in normalized
    /// device units.
    pub densify_grad_threshold: f64,
    /// Clone below, split above this fraction of the group extent.
    pub percent_dense: f64,
    pub opacity_prune_threshold: f64,
    pub max_primitives: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub raster: RasterSettings,
    /// Iterations between loss-log rows; the patch-correlation term is only
    /// evaluated on those rows.
    pub log_interval: usize,
    pub mv_rgb_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 30_000,
            lr_position: 1.6e-4,
            lr_position_final: 1.6e-6,
            lr_opacity: 0.05,
            lr_scale: 5e-3,
            lr_rotation: 1e-3,
            lr_color: 2.5e-3,
            sh_degree: 3,
            sh_interval: 1000,
            densify_from: 500,
            densify_interval: 100,
            densify_until: 0.6,
            densify_grad_threshold: 2e-4,
            percent_dense: 0.01,
            opacity_prune_threshold: 0.005,
            max_primitives: 200_000,
            seed: 0,
            weights: LossWeights::default(),
            raster: RasterSettings::default(),
            log_interval: 10,
            mv_rgb_stride: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let positive = [
            self.lr_position,
            self.lr_opacity,
            self.lr_scale,
            self.lr_rotation,
            self.lr_color,
            self.densify_grad_threshold,
            self.opacity_prune_threshold,
            self.percent_dense,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("learning rates and thresholds must be positive".into()));
        }
        if self.densify_interval == 0 || self.log_interval == 0 || self.raster.tile_size == 0 {
            return Err(Error::Config("intervals and tile size must be positive".into()));
        }
        Ok(())
    }
}

/// One view prepared for a group: reference image, the group's refined mask
/// and band, and the per-pixel loss weights.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub view: ViewRecord,
    pub image: RgbImage,
    pub gray: Vec<f64>,
    pub rbm: MaskBitmap,
    pub mb: MaskBitmap,
    pub weights: PixelWeightMaps,
}

impl TrainView {
    pub fn new(view: ViewRecord, image: RgbImage, rbm: MaskBitmap, band_radius: usize, boundary_weight: f64) -> Self {
        let gray = image.to_gray();
        let mb = extract_boundary(&rbm, band_radius);
        let weights = PixelWeightMaps::new(&rbm, &mb, boundary_weight, &gray);
        Self {
            view,
            image,
            gray,
            rbm,
            mb,
            weights,
        }
    }
}

/// Views of one group with masks restricted to the segments its own points
/// hit. `images` and `segments` are aligned with `scene.views`.
pub fn prepare_group_views(
    group: &BuildingGroup,
    scene: &SceneBundle,
    images: &[RgbImage],
    segments: &[SegmentLabelMap],
    min_hits: usize,
    band_radius: usize,
    boundary_weight: f64,
) -> Vec<TrainView> {
    let own = ReliablePointSet {
        point_ids: group.point_ids.clone(),
        ..Default::default()
    };
    scene
        .views
        .iter()
        .enumerate()
        .filter(|(_, v)| group.view_ids.contains(&v.view_id))
        .map(|(i, v)| {
            let rbm = refine_mask(v, scene, &own, &segments[i], min_hits);
            TrainView::new(v.clone(), images[i].clone(), rbm, band_radius, boundary_weight)
        })
        .collect()
}

/// Loads every view's image, resolving paths against the scene root.
pub fn load_images(scene: &SceneBundle) -> Result<Vec<RgbImage>> {
    scene
        .views
        .par_iter()
        .map(|v| {
            let img = RgbImage::load_png(&v.image_path)?;
            if img.width != v.width() || img.height != v.height() {
                return Err(Error::Shape {
                    what: format!("image {}", v.image_path.display()),
                    expected_w: v.width(),
                    expected_h: v.height(),
                    actual_w: img.width,
                    actual_h: img.height,
                });
            }
            Ok(img)
        })
        .collect()
}

/// Mean distance to the three nearest other points, per point.
/// Mean distance to the 3 nearest neighbours and a PCA normal over the 8
/// nearest, per point. The normal is `None` with fewer than 3 neighbours.
fn local_geometry(points: &[Vector3<f64>]) -> Vec<(f64, Option<Vector3<f64>>)> {
    let tree = RTree::bulk_load(points.iter().enumerate().map(|(i, p)| GeomWithData::new([p.x, p.y, p.z], i)).collect());
    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let near: Vec<Vector3<f64>> = tree
                .nearest_neighbor_iter(&[p.x, p.y, p.z])
                .filter(|n| n.data != i)
                .take(8)
                .map(|n| points[n.data])
                .collect();
            let k = near.len().min(3);
            let scale = if k == 0 { 0.0 } else { near[..k].iter().map(|q| (q - p).norm()).sum::<f64>() / k as f64 };
            let normal = (near.len() >= 3).then(|| {
                let c = near.iter().sum::<Vector3<f64>>() / near.len() as f64;
                let cov = near.iter().fold(Matrix3::zeros(), |m, q| m + (q - c) * (q - c).transpose());
                let e = cov.symmetric_eigen();
                let j = e.eigenvalues.imin();
                e.eigenvectors.column(j).into_owned()
            });
            (scale, normal)
        })
        .collect()
}

/// One isotropic primitive per group point.
pub fn init_gaussians_from_points(group: &BuildingGroup, scene: &SceneBundle) -> Vec<GaussianPrimitive> {
    let idx = scene.point_index();
    let pts: Vec<_> = group
        .point_ids
        .iter()
        .filter_map(|id| idx.get(id).map(|&i| &scene.points[i]))
        .collect();
    let xyz: Vec<Vector3<f64>> = pts.iter().map(|p| p.xyz).collect();
    let fallback = 0.01 * group.aabb.diagonal();
    let geo = if xyz.len() < 4 { vec![(fallback, None); xyz.len()] } else { local_geometry(&xyz) };
    pts.iter()
        .zip(geo)
        .map(|(p, (s, n))| {
            let s = if s > 0.0 && s.is_finite() { s } else { fallback };
            let rgb = p.color.map_or([0.5; 3], |c| c.map(|v| v as f64 / 255.0));
            // Scales are isotropic, so the normal falls to the first local
            // axis on ties; point that axis along the neighbourhood normal.
            let q = n
                .and_then(|n| UnitQuaternion::rotation_between(&Vector3::x(), &n))
                .unwrap_or_else(UnitQuaternion::identity);
            let rot = Vector4::new(q.w, q.i, q.j, q.k);
            GaussianPrimitive::new(p.xyz, Vector3::repeat(s), rot, 0.1, rgb)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub view_id: u32,
    pub components: LossComponents,
    pub total: f64,
    pub count_std: f64,
    pub primitives: usize,
}

pub fn write_loss_log(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("iteration,view_id,rgb,mv_geo,mv_rgb,flatten,ban,coverage,gc_load,total,count_std,primitives\n");
    for r in rows {
        let c = r.components.values();
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.iteration, r.view_id, c[0], c[1], c[2], c[3], c[4], c[5], r.total, r.count_std, r.primitives
        ));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheckpoint {
    pub group_id: u32,
    pub aabb: Aabb,
    pub primitives: Vec<GaussianPrimitive>,
    pub iteration: usize,
    pub log: Vec<LogRow>,
    pub loss_log: Option<PathBuf>,
}

impl GroupCheckpoint {
    pub fn final_losses(&self) -> Option<&LogRow> {
        self.log.last()
    }
}

/// Population std of the hard contributor count over mask pixels.
pub fn count_std(b: &RenderedBuffers, rbm: &MaskBitmap) -> f64 {
    let vals: Vec<f64> = (0..b.pixel_count()).filter(|&i| rbm.bits[i]).map(|i| b.count[i] as f64).collect();
    if vals.is_empty() {
        return 0.0;
    }
    let n = vals.len() as f64;
    let m = vals.iter().sum::<f64>() / n;
    (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
}

/// Partner for the cross-view terms: the other view sharing the most group
/// points inside both refined masks.
fn pick_partners(views: &[TrainView], points: &[Vector3<f64>]) -> Vec<Option<usize>> {
    let seen: Vec<BTreeSet<usize>> = views
        .iter()
        .map(|tv| {
            points
                .iter()
                .enumerate()
                .filter(|(_, p)| tv.view.pixel_of(p).is_some_and(|(x, y)| tv.rbm.get(x, y)))
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    (0..views.len())
        .map(|a| {
            let mut best: Option<(usize, usize)> = None;
            for b in 0..views.len() {
                if b == a {
                    continue;
                }
                let shared = seen[a].intersection(&seen[b]).count();
                if shared > 0 && best.map_or(true, |(_, s)| shared > s) {
                    best = Some((b, shared));
                }
            }
            best.map(|(b, _)| b)
        })
        .collect()
}

struct DensifyStats {
    accum: Vec<f64>,
    denom: Vec<u32>,
}

impl DensifyStats {
    fn new(n: usize) -> Self {
        Self {
            accum: vec![0.0; n],
            denom: vec![0; n],
        }
    }
}

fn grow_sh(prims: &mut [GaussianPrimitive], degree: usize) {
    let n = (degree + 1) * (degree + 1);
    for p in prims {
        if p.sh.len() < n {
            p.sh.resize(n, Vector3::zeros());
        }
    }
}

fn quantile_free_max(v: &Vector3<f64>) -> f64 {
    v.x.max(v.y).max(v.z)
}

/// Clone small, split large primitives with a high mean screen gradient;
/// then drop transparent, escaped, oversized or non-finite ones.
#[allow(clippy::too_many_arguments)]
fn densify_and_prune(
    prims: &mut Vec<GaussianPrimitive>,
    states: &mut Vec<AdamState>,
    stats: &DensifyStats,
    cfg: &TrainConfig,
    extent: f64,
    aabb: &Aabb,
    grow: bool,
    rng: &mut ChaCha8Rng,
) {
    let n = prims.len();
    let mut out = Vec::with_capacity(n);
    let mut out_states = Vec::with_capacity(n);
    let mut budget = cfg.max_primitives.saturating_sub(n);
    for i in 0..n {
        let p = &prims[i];
        let avg = if stats.denom[i] > 0 { stats.accum[i] / stats.denom[i] as f64 } else { 0.0 };
        let hot = grow && avg >= cfg.densify_grad_threshold && budget > 0;
        if hot && quantile_free_max(&p.scale()) > cfg.percent_dense * extent {
            let r = p.rotation();
            let s = p.scale();
            for _ in 0..2 {
                let z = Vector3::new(
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                );
                let mut q = p.clone();
                q.mu = p.mu + r * s.component_mul(&z);
                q.log_scale = (s / 1.6).map(f64::ln);
                out.push(q);
                out_states.push(AdamState::zeros(p.param_count()));
            }
            budget -= 1;
            continue;
        }
        out.push(p.clone());
        out_states.push(states[i].clone());
        if hot {
            out.push(p.clone());
            out_states.push(AdamState::zeros(p.param_count()));
            budget -= 1;
        }
    }
    let keep: Vec<bool> = out
        .iter()
        .map(|p| {
            p.is_finite()
                && p.opacity() >= cfg.opacity_prune_threshold
                && aabb.contains(&p.mu)
                && quantile_free_max(&p.scale()) <= extent
        })
        .collect();
    *prims = out.iter().zip(&keep).filter(|(_, k)| **k).map(|(p, _)| p.clone()).collect();
    *states = out_states.into_iter().zip(&keep).filter(|(_, k)| **k).map(|(s, _)| s).collect();
}

/// Everything one step computes before the parameter update.
pub struct StepOutput {
    pub buffers: RenderedBuffers,
    pub components: LossComponents,
    pub total: f64,
    pub grads: Vec<crate::splat::PrimitiveGrad>,
}

/// Loss and gradient for one view. `partner` supplies the other view and its
/// most recent depth for the cross-view geometric term. When `with_mv_rgb`,
/// the (non-differentiated) patch-correlation term is evaluated.
pub fn loss_and_grad(
    prims: &[GaussianPrimitive],
    tv: &TrainView,
    partner: Option<(&TrainView, &[f64])>,
    cfg: &TrainConfig,
    with_mv_rgb: bool,
) -> Result<StepOutput> {
    let view = &tv.view;
    let b = rasterize_forward(prims, view, &cfg.raster);
    let n = b.pixel_count();
    let k = cfg.weights.coefficients();
    let mut comps = LossComponents::default();

    let (l_rgb, g_color) = loss_rgb(&b.color, &tv.image, &tv.rbm);
    comps.rgb = l_rgb;

    let n_depth = depth_to_normal(&b.depth, view);
    let (l_ban, ban_g) = loss_ban(&n_depth, &b.normal, &tv.weights.ban_w);
    comps.ban = l_ban;
    let mut g_depth = vec![0.0; n];
    depth_to_normal_backward(&b.depth, view, &ban_g.depth_normal, &mut g_depth);
    g_depth.iter_mut().for_each(|v| *v *= k.ban);

    if let Some((pv, pdepth)) = partner {
        let (l_geo, g_geo) = loss_mv_geo(view, &pv.view, &b.depth, pdepth, &tv.rbm);
        comps.mv_geo = l_geo;
        for (d, g) in g_depth.iter_mut().zip(&g_geo) {
            *d += k.mv_geo * g;
        }
        if with_mv_rgb {
            comps.mv_rgb = loss_mv_rgb(view, &pv.view, &tv.gray, &pv.gray, &b.depth, &tv.rbm, cfg.mv_rgb_stride);
        }
    }

    let counts: Vec<f64> = b.count.iter().map(|&c| c as f64).collect();
    comps.gc_load = loss_gc_load(&counts, &tv.weights.grad_w, &tv.rbm).0;
    let g_soft = loss_count_balance(&b.soft_count, &tv.weights.grad_w, &tv.rbm).1;

    let (l_cov, g_cov) = loss_coverage(&b.transmittance, &tv.rbm);
    comps.coverage = l_cov;

    let (l_s, g_s) = loss_flatten(prims);
    comps.flatten = l_s;

    let total = total_loss(&comps, &cfg.weights)?;

    let mut up = PixelGrads {
        color: g_color.iter().map(|v| v * k.rgb).collect(),
        normal: ban_g.rendered_normal.iter().map(|v| v * k.ban).collect(),
        distance: vec![0.0; n],
        soft_count: if k.gc_load > 0.0 { g_soft.iter().map(|v| v * k.gc_load).collect() } else { Vec::new() },
        transmittance: g_cov.iter().map(|v| v * k.coverage).collect(),
    };
    depth_backward(&b, view, &g_depth, &mut up.normal, &mut up.distance);
    let mut grads = rasterize_backward(prims, view, &cfg.raster, &up);
    for (g, gs) in grads.iter_mut().zip(&g_s) {
        g.log_scale += gs * k.flatten;
    }
    Ok(StepOutput {
        buffers: b,
        components: comps,
        total,
        grads,
    })
}

fn position_rate(cfg: &TrainConfig, it: usize, extent: f64) -> f64 {
    let t = if cfg.iterations > 1 { it as f64 / (cfg.iterations - 1) as f64 } else { 0.0 };
    let a = cfg.lr_position.ln();
    let b = cfg.lr_position_final.max(1e-300).ln();
    (a + (b - a) * t.clamp(0.0, 1.0)).exp() * extent
}

/// Optimize `initial` against `views`. `out_dir`, if given, receives the loss
/// log and, on a non-finite loss, a dump of the primitives before the step.
pub fn train_group_from(
    group: &BuildingGroup,
    initial: Vec<GaussianPrimitive>,
    views: &[TrainView],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<GroupCheckpoint> {
    cfg.validate()?;
    if views.is_empty() && cfg.iterations > 0 {
        return Err(Error::InvalidScene(format!("group {} has no views to train on", group.group_id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ group.group_id as u64);
    let mut prims = initial;
    let mut states: Vec<AdamState> = prims.iter().map(|p| AdamState::zeros(p.param_count())).collect();
    let extent = 0.5 * group.aabb.diagonal();
    let points: Vec<Vector3<f64>> = prims.iter().map(|p| p.mu).collect();
    let partners = pick_partners(views, &points);
    let mut depth_cache: Vec<Option<Vec<f64>>> = vec![None; views.len()];
    let mut stats = DensifyStats::new(prims.len());
    let densify_stop = (cfg.densify_until * cfg.iterations as f64) as usize;
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::new();

    for it in 0..cfg.iterations {
        if cfg.sh_interval > 0 && it > 0 && it % cfg.sh_interval == 0 {
            let deg = (it / cfg.sh_interval).min(cfg.sh_degree);
            grow_sh(&mut prims, deg);
        }
        if order.is_empty() {
            order = (0..views.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let vi = order.pop().expect("refilled above");
        let tv = &views[vi];
        let partner = partners[vi].and_then(|p| depth_cache[p].as_deref().map(|d| (&views[p], d)));
        let logging = (it + 1) % cfg.log_interval == 0 || it + 1 == cfg.iterations;
        let step = match loss_and_grad(&prims, tv, partner, cfg, logging) {
            Ok(s) => s,
            Err(e) => {
                if let Some(dir) = out_dir {
                    let _ = std::fs::create_dir_all(dir);
                    let _ = write_primitives_ply(&prims, &dir.join(format!("group_{:03}_abort.ply", group.group_id)));
                }
                return Err(e);
            }
        };
        let comps = step.components;
        if logging {
            let total = total_loss(&comps, &cfg.weights)?;
            log.push(LogRow {
                iteration: it + 1,
                view_id: tv.view.view_id,
                components: comps,
                total,
                count_std: count_std(&step.buffers, &tv.rbm),
                primitives: prims.len(),
            });
        }

        let rates = StepRates {
            position: position_rate(cfg, it, extent),
            scale: cfg.lr_scale,
            rotation: cfg.lr_rotation,
            opacity: cfg.lr_opacity,
            color: cfg.lr_color,
            color_rest: cfg.lr_color / 20.0,
        };
        // Losses are means over mask pixels; rescale to a full-image mean so
        // the threshold does not depend on how much of the view is masked.
        let ndc = 0.5 * tv.view.width().max(tv.view.height()) as f64 * tv.rbm.count() as f64
            / tv.view.width().max(1) as f64
            / tv.view.height().max(1) as f64;
        for (i, g) in step.grads.iter().enumerate() {
            if g.mean2d_norm > 0.0 {
                stats.accum[i] += g.mean2d_norm * ndc;
                stats.denom[i] += 1;
            }
        }
        prims
            .par_iter_mut()
            .zip(states.par_iter_mut())
            .zip(step.grads.par_iter())
            .for_each(|((p, s), g)| adam_step(p, s, g, &rates, it as u64 + 1));
        depth_cache[vi] = Some(step.buffers.depth);

        let in_window = it + 1 >= cfg.densify_from && it + 1 <= densify_stop;
        if in_window && (it + 1) % cfg.densify_interval == 0 {
            densify_and_prune(&mut prims, &mut states, &stats, cfg, extent, &group.aabb, true, &mut rng);
            stats = DensifyStats::new(prims.len());
        }
    }
    if cfg.iterations > 0 {
        // Final cull so every primitive lies inside the group box.
        let none = DensifyStats::new(prims.len());
        densify_and_prune(&mut prims, &mut states, &none, cfg, extent, &group.aabb, false, &mut rng);
    }
    let loss_log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join(format!("group_{:03}_loss.csv", group.group_id));
            write_loss_log(&log, &p)?;
            Some(p)
        }
        None => None,
    };
    Ok(GroupCheckpoint {
        group_id: group.group_id,
        aabb: group.aabb,
        primitives: prims,
        iteration: cfg.iterations,
        log,
        loss_log,
    })
}

/// Initialize from the group's points and optimize.
pub fn train_group(
    group: &BuildingGroup,
    scene: &SceneBundle,
    views: &[TrainView],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<GroupCheckpoint> {
    if group.point_ids.is_empty() {
        return Err(Error::InvalidScene(format!("group {} has no points", group.group_id)));
    }
    let init = init_gaussians_from_points(group, scene);
    train_group_from(group, init, views, cfg, out_dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group_id: u32,
    pub ok: bool,
    pub error: Option<String>,
    pub wall_time_s: f64,
    pub started_s: f64,
    pub iterations: usize,
    pub primitives: usize,
    pub final_losses: Option<LossComponents>,
    pub final_total: Option<f64>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub workers: usize,
    pub seed: u64,
    pub groups: Vec<GroupReport>,
}

impl RunReport {
    pub fn failed(&self) -> usize {
        self.groups.iter().filter(|g| !g.ok).count()
    }
}

/// Train every group on a pool of `workers` threads. Each group's result
/// depends only on its data and the seed. Failures are reported per group.
pub fn train_all_groups(
    jobs: &[(BuildingGroup, Vec<TrainView>)],
    scene: &SceneBundle,
    cfg: &TrainConfig,
    workers: usize,
    out_dir: Option<&Path>,
) -> Result<(Vec<Option<GroupCheckpoint>>, RunReport)> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let start = Instant::now();
    let results: Vec<(Result<GroupCheckpoint>, f64, f64)> = pool.install(|| {
        jobs.par_iter()
            .map(|(g, views)| {
                let t0 = Instant::now();
                let started = start.elapsed().as_secs_f64();
                let r = train_group(g, scene, views, cfg, out_dir).and_then(|ck| {
                    if let Some(dir) = out_dir {
                        write_primitives_ply(&ck.primitives, &dir.join(format!("group_{:03}.ply", g.group_id)))?;
                    }
                    Ok(ck)
                });
                (r, started, t0.elapsed().as_secs_f64())
            })
            .collect()
    });
    let mut cks = Vec::new();
    let mut reports = Vec::new();
    for ((g, _), (r, started, wall)) in jobs.iter().zip(results) {
        match r {
            Ok(ck) => {
                let last = ck.final_losses().cloned();
                reports.push(GroupReport {
                    group_id: g.group_id,
                    ok: true,
                    error: None,
                    wall_time_s: wall,
                    started_s: started,
                    iterations: ck.iteration,
                    primitives: ck.primitives.len(),
                    final_losses: last.as_ref().map(|l| l.components),
                    final_total: last.map(|l| l.total),
                    checkpoint: out_dir.map(|d| d.join(format!("group_{:03}.ply", g.group_id))),
                });
                cks.push(Some(ck));
            }
            Err(e) => {
                log::error!("group {} failed: {e}", g.group_id);
                reports.push(GroupReport {
                    group_id: g.group_id,
                    ok: false,
                    error: Some(e.to_string()),
                    wall_time_s: wall,
                    started_s: started,
                    iterations: 0,
                    primitives: 0,
                    final_losses: None,
                    final_total: None,
                    checkpoint: None,
                });
                cks.push(None);
            }
        }
    }
    Ok((
        cks,
        RunReport {
            workers: workers.max(1),
            seed: cfg.seed,
            groups: reports,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::SparsePoint;

    fn scene_with(points: Vec<Vector3<f64>>) -> (SceneBundle, BuildingGroup) {
        let pts: Vec<SparsePoint> = points
            .iter()
            .enumerate()
            .map(|(i, p)| SparsePoint {
                point_id: i as u32,
                xyz: *p,
                color: Some([255, 0, 51]),
                track: vec![],
            })
            .collect();
        let aabb = Aabb::from_points(points.iter()).unwrap().expanded(0.1);
        let group = BuildingGroup {
            group_id: 0,
            point_ids: (0..points.len() as u32).collect(),
            view_ids: BTreeSet::new(),
            aabb,
            warnings: vec![],
        };
        (SceneBundle { views: vec![], points: pts }, group)
    }

    #[test]
    fn single_point_uses_fallback_scale() {
        let (scene, group) = scene_with(vec![Vector3::new(1.0, 2.0, 3.0)]);
        let g = init_gaussians_from_points(&group, &scene);
        assert_eq!(g.len(), 1);
        let expect = 0.01 * group.aabb.diagonal();
        assert!((g[0].scale().x - expect).abs() < 1e-12);
        assert!((g[0].opacity() - 0.1).abs() < 1e-12);
        assert!((crate::splat::gaussian::eval_color(&g[0], &Vector3::zeros()).x - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grid_spacing_sets_scale() {
        let h = 0.25;
        let mut pts = Vec::new();
        for i in 0..8 {
            for j in 0..8 {
                for k in 0..8 {
                    pts.push(Vector3::new(i as f64, j as f64, k as f64) * h);
                }
            }
        }
        let (scene, group) = scene_with(pts.clone());
        let g = init_gaussians_from_points(&group, &scene);
        assert_eq!(g.len(), pts.len());
        // Interior points have six neighbours at distance h.
        let interior = g.iter().find(|p| (p.mu - Vector3::repeat(3.0 * h)).norm() < 1e-12).unwrap();
        assert!((interior.log_scale.x - h.ln()).abs() < 1e-12);
        for (p, q) in g.iter().zip(&pts) {
            assert_eq!(p.mu, *q);
        }
    }

    #[test]
    fn zero_iterations_is_identity() {
        let (scene, group) = scene_with(vec![Vector3::zeros(), Vector3::x(), Vector3::y(), Vector3::z(), Vector3::repeat(1.0)]);
        let cfg = TrainConfig { iterations: 0, ..Default::default() };
        let ck = train_group(&group, &scene, &[], &cfg, None).unwrap();
        assert_eq!(ck.primitives, init_gaussians_from_points(&group, &scene));
        assert_eq!(ck.iteration, 0);
    }

    #[test]
    fn knn_matches_brute_force() {
        let pts = vec![Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 2.0, 0.0), Vector3::new(0.0, 0.0, 4.0), Vector3::new(9.0, 0.0, 0.0)];
        let g = local_geometry(&pts);
        assert!((g[0].0 - (1.0 + 2.0 + 4.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn init_normals_follow_local_plane() {
        let pts: Vec<Vector3<f64>> = (0..25).map(|i| Vector3::new((i % 5) as f64 * 0.3, 2.0, (i / 5) as f64 * 0.3)).collect();
        let (scene, group) = scene_with(pts);
        for p in init_gaussians_from_points(&group, &scene) {
            let n = p.rotation().column(p.normal_axis()).into_owned();
            assert!((n.dot(&Vector3::y()).abs() - 1.0).abs() < 1e-9);
        }
    }
}
