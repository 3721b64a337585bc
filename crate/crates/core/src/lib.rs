//! Geometric core of joint self-supervised depth and optical-flow estimation.
//!
//! Flow synthesis and decomposition from depth and pose, bilateral
//! photometric reprojection losses, flow-based motion segmentation, direct
//! pose optimization, KITTI evaluation metrics and codecs, and a synthetic
//! rigid-scene generator that supplies ground truth for all of them.

// `!(x > 0.0)` is deliberate throughout: NaN must fail positivity checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod field;
pub mod flow;
pub mod geometry;
pub mod kitti_io;
pub mod loss;
pub mod metrics;
pub mod optimize;
pub mod segmentation;
pub mod synth;

pub use error::{Error, Result};
pub use field::ScalarField;
pub use flow::{
    composite_flow, decompose_flow, endpoint_error_map, synthesize_flow, FlowField, FlowPart,
};
pub use geometry::{
    backproject, project_point, reproject_coords, sample_bilinear, warp_image, DepthMap,
    ImageBuffer, Intrinsics, PixelGrid, PoseSE3,
};
pub use loss::{LossConfig, LossReport, PosePair};
pub use metrics::{DepthCaps, DepthMetrics, FlowMetrics};
pub use optimize::{OptimizeConfig, OptimizeTrace};
pub use segmentation::{RegionLabels, SegmentationConfig};
pub use synth::{SceneBundle, SceneSpec};
