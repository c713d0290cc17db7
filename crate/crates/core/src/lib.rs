//! Building-focused surface reconstruction with grouped, flattened Gaussian
//! splatting: mask voting, spatial grouping, per-group optimization, TSDF
//! meshing and point-cloud evaluation.

pub mod config;
pub mod error;
pub mod eval;
pub mod grouping;
pub mod imaging;
pub mod losses;
pub mod mask;
pub mod meshing;
pub mod pipeline;
pub mod ply;
pub mod scene;
pub mod splat;
pub mod synth;
pub mod trainer;
pub mod voting;

pub use error::{Error, Result};
