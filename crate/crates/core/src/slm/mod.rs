//! SLM feature backbone, the 13-layer feature stack, the linear projection
//! head shared by the SLM critics, and the per-layer importance analysis.

mod backbone;
mod head;

pub use backbone::{SlmBackbone, SlmFeatureStack};
pub use head::{layer_importance, ImportanceNorm, LayerImportance, ProjectionHead};

/// Layers in the stack: front-end output plus 12 blocks.
pub const N_LAYERS: usize = 13;
pub const FEATURE_DIM: usize = 768;
pub const PROJECTED_DIM: usize = 256;
/// Input samples per frame at 16 kHz.
pub const FRAME_STRIDE: usize = 320;
/// Layers compared by the speech consistency loss (inclusive).
pub const CONSISTENCY_LAYERS: std::ops::RangeInclusive<usize> = 6..=9;
