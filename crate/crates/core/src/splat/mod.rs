//! Differentiable rasterization of flattened Gaussians.

pub mod depth;
pub mod gaussian;
pub mod project;
pub mod raster;

pub use depth::{compute_depth_map, depth_backward, depth_to_normal, depth_to_normal_backward, INVALID_DEPTH};
pub use gaussian::{flatten_normal, GaussianPrimitive};
pub use project::{project_gaussian, PrimitiveGrad, ProjectedSplat};
pub use raster::{
    rasterize_backward, rasterize_backward_with_plan, rasterize_forward, rasterize_forward_recorded,
    rasterize_with_plan, PixelGrads, RasterSettings, RenderPlan, RenderedBuffers,
};
