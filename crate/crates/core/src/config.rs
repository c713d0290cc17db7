//! Flat `key = value` configuration overriding stage defaults.
//!
//! Blank lines and lines starting with `#` are ignored. Keys:
//!
//! | key | meaning |
//! |---|---|
//! | `tau` | unreliability tolerance (`inf` disables the filter) |
//! | `min_hits` | reliable projections needed to keep a segment |
//! | `band_radius` | boundary band half-width in pixels |
//! | `eps`, `min_pts`, `min_group_votes`, `aabb_margin` | grouping |
//! | `lambda`, `lambda1` .. `lambda4`, `coverage_weight`, `boundary_weight` | loss weights |
//! | `tile_size`, `near`, `low_pass` | rasterizer |
//! | `iterations`, `sh_degree`, `sh_interval` | training schedule |
//! | `lr_position`, `lr_position_final`, `lr_opacity`, `lr_scale`, `lr_rotation`, `lr_color` | learning rates |
//! | `densify_from`, `densify_interval`, `densify_until`, `densify_grad_threshold`, `percent_dense`, `opacity_prune_threshold`, `max_primitives` | densification |
//! | `log_interval`, `mv_rgb_stride` | logging |
//! | `voxel_size`, `resolution`, `truncation`, `merge_mode` | meshing (`truncation` in voxels, `merge_mode` is `global` or `concatenate`) |
//! | `eval_threshold`, `eval_density`, `gt_downsample` | evaluation |
//! | `seed` | global seed |

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::GroupingConfig;
use crate::meshing::{MergeMode, MeshingConfig};
use crate::trainer::TrainConfig;
use crate::voting::Tolerance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub threshold: f64,
    pub density: f64,
    /// Voxel-downsample the reference cloud at `density` first.
    pub gt_downsample: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.6,
            density: 0.35,
            gt_downsample: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub tau: Tolerance,
    pub min_hits: usize,
    pub band_radius: usize,
    pub grouping: GroupingConfig,
    pub train: TrainConfig,
    pub meshing: MeshingConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tau: Tolerance::default(),
            min_hits: 1,
            band_radius: 2,
            grouping: GroupingConfig::default(),
            train: TrainConfig::default(),
            meshing: MeshingConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{v}` for `{key}`"))),
    }
}

impl PipelineConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "tau" => self.tau = Tolerance(num(key, v)?),
            "min_hits" => self.min_hits = num(key, v)?,
            "band_radius" => self.band_radius = num(key, v)?,
            "eps" => self.grouping.eps = num(key, v)?,
            "min_pts" => self.grouping.min_pts = num(key, v)?,
            "min_group_votes" => self.grouping.min_group_votes = num(key, v)?,
            "aabb_margin" => self.grouping.aabb_margin = num(key, v)?,
            "lambda" => t.weights.lambda = num(key, v)?,
            "lambda1" => t.weights.lambda1 = num(key, v)?,
            "lambda2" => t.weights.lambda2 = num(key, v)?,
            "lambda3" => t.weights.lambda3 = num(key, v)?,
            "lambda4" => t.weights.lambda4 = num(key, v)?,
            "coverage_weight" => t.weights.coverage = num(key, v)?,
            "boundary_weight" => t.weights.boundary_weight = num(key, v)?,
            "tile_size" => t.raster.tile_size = num(key, v)?,
            "near" => t.raster.near = num(key, v)?,
            "low_pass" => t.raster.low_pass = num(key, v)?,
            "iterations" => t.iterations = num(key, v)?,
            "sh_degree" => t.sh_degree = num(key, v)?,
            "sh_interval" => t.sh_interval = num(key, v)?,
            "lr_position" => t.lr_position = num(key, v)?,
            "lr_position_final" => t.lr_position_final = num(key, v)?,
            "lr_opacity" => t.lr_opacity = num(key, v)?,
            "lr_scale" => t.lr_scale = num(key, v)?,
            "lr_rotation" => t.lr_rotation = num(key, v)?,
            "lr_color" => t.lr_color = num(key, v)?,
            "densify_from" => t.densify_from = num(key, v)?,
            "densify_interval" => t.densify_interval = num(key, v)?,
            "densify_until" => t.densify_until = num(key, v)?,
            "densify_grad_threshold" => t.densify_grad_threshold = num(key, v)?,
            "percent_dense" => t.percent_dense = num(key, v)?,
            "opacity_prune_threshold" => t.opacity_prune_threshold = num(key, v)?,
            "max_primitives" => t.max_primitives = num(key, v)?,
            "log_interval" => t.log_interval = num(key, v)?,
            "mv_rgb_stride" => t.mv_rgb_stride = num(key, v)?,
            "seed" => t.seed = num(key, v)?,
            "voxel_size" => self.meshing.voxel_size = Some(num(key, v)?),
            "resolution" => self.meshing.resolution = num(key, v)?,
            "truncation" => self.meshing.truncation_voxels = num(key, v)?,
            "merge_mode" => {
                self.meshing.mode = match v {
                    "global" => MergeMode::Global,
                    "concatenate" => MergeMode::Concatenate,
                    _ => return Err(Error::Config(format!("invalid value `{v}` for `{key}`"))),
                }
            }
            "eval_threshold" => self.eval.threshold = num(key, v)?,
            "eval_density" => self.eval.density = num(key, v)?,
            "gt_downsample" => self.eval.gt_downsample = flag(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        self.validate()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::default();
        c.apply_text(&text)?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let g = &self.grouping;
        if !(g.eps > 0.0) || g.min_pts == 0 {
            return Err(Error::Config("eps must be positive and min_pts at least 1".into()));
        }
        if self.tau.0.is_nan() {
            return Err(Error::Config("tau must be a number".into()));
        }
        if self.meshing.truncation_voxels < 2.0 {
            return Err(Error::Config("truncation must be at least 2 voxels".into()));
        }
        if self.meshing.voxel_size.is_some_and(|v| !(v > 0.0)) || !(self.meshing.resolution > 0.0) {
            return Err(Error::Config("voxel size and resolution must be positive".into()));
        }
        if !(self.eval.threshold > 0.0 && self.eval.density > 0.0) {
            return Err(Error::Config("evaluation threshold and density must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_comments() {
        let mut c = PipelineConfig::default();
        c.apply_text("# grouping\neps = 3.5\nmin_pts=4\n\ntau = inf\nlambda = 0\nmerge_mode = concatenate\nvoxel_size = 0.05\n")
            .unwrap();
        assert_eq!(c.grouping.eps, 3.5);
        assert_eq!(c.grouping.min_pts, 4);
        assert_eq!(c.tau, Tolerance::UNBOUNDED);
        assert_eq!(c.train.weights.lambda, 0.0);
        assert_eq!(c.meshing.mode, MergeMode::Concatenate);
        assert_eq!(c.meshing.voxel_size, Some(0.05));
        assert_eq!(c.train.iterations, 30_000);
    }

    #[test]
    fn rejects_bad_lines() {
        let mut c = PipelineConfig::default();
        let e = c.apply_text("eps = 1\nbogus = 2\n").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("bogus"), "{e}");
        assert!(PipelineConfig::default().apply_text("eps 1").is_err());
        assert!(PipelineConfig::default().apply_text("eps = x").is_err());
        assert!(PipelineConfig::default().apply_text("lambda = 1.5").is_err());
        assert!(PipelineConfig::default().apply_text("truncation = 1").is_err());
    }
}
