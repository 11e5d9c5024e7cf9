//! Dataset ingestion and quality control: manifests, blur filtering, frame
//! selection, test splits, depth-seeded grids, metrics and label transfer.

mod blur;
mod labels;
mod manifest;
mod metrics;
mod points;

pub use blur::{blur_score, blur_score_gray, gaussian_blur, BLUR_THRESHOLD};
pub use labels::{transfer_labels, transfer_labels_brute_force, LabeledPointCloud, IGNORE_CLASS, LABEL_RADIUS};
pub use manifest::{
    assign_split, select_frames, test_indices, Bounds, Frame, SceneManifest, Split, DEFAULT_DEPTH_SCALE, MAX_FRAMES,
    TEST_FRACTION,
};
pub use metrics::{psnr, ssim};
pub use points::{
    filter_connected_components, init_grid_from_points, padded_bounds, unproject_depth, CC_CELL, CC_MIN_FRACTION,
    INIT_DENSITY,
};

use crate::geometry::GeometryError;
use crate::grid::GridError;
use crate::raster::RasterError;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("referenced file does not exist: {0}")]
    MissingFile(PathBuf),
    #[error("frame {index}: {source}")]
    Frame { index: usize, source: GeometryError },
    #[error("frame {frame} has no depth map")]
    MissingDepth { frame: usize },
    #[error("scene {scene} is defective: {reason}")]
    Defective { scene: String, reason: String },
    #[error("image size mismatch: {left:?} vs {right:?}")]
    DimensionMismatch { left: (usize, usize), right: (usize, usize) },
    #[error("image {width}x{height} is smaller than {min}x{min}")]
    ImageTooSmall { width: usize, height: usize, min: usize },
    #[error("point set is empty")]
    EmptyPoints,
    #[error("point coordinates must be finite")]
    NonFinitePoint,
    #[error("{points} points but {labels} labels")]
    LabelCount { points: usize, labels: usize },
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Grid(#[from] GridError),
}
