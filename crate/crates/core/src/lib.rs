//! Sparse-voxel radiance fields: grid representation, differentiable volume
//! rendering, analytic-gradient training, quantized scene containers, and
//! dataset ingestion/augmentation tooling.

pub mod atomic;
pub mod geometry;
pub mod grid;
pub mod raster;
pub mod render;
pub mod train;
pub mod pipeline;
pub mod synthetic;
pub mod augment;
pub mod serialization;
pub mod cli;
