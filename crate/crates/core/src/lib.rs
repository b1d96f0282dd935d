//! Pose-guided handgun detection: keypoint ingestion, hand-region proposals,
//! binary pose images, IoMin auto-labelling, dataset transforms and
//! IoMin-matched detection metrics.

pub mod autolabel;
pub mod evaluation;
pub mod geometry;
pub mod hand_region;
pub mod keypoints;
pub mod pose_render;
pub mod transforms;

pub use geometry::{
    area, intersect, iomin, iou, BBox, Detection, GeometryError, GroundTruthBox, Keypoint2D,
    Skeleton, NUM_KEYPOINTS,
};
