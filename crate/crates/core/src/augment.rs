//! Pose sampling between nearby training cameras, intrinsics resampling,
//! background substitution and camera-parameter manipulation.

use crate::geometry::{
    intermediate_rotation, pose_matrix, rotation_distance, translation_distance, Camera, Intrinsics, Mat3, Vec3,
};
use crate::grid::{BackgroundModel, SparseVoxelGrid};
use crate::raster::Raster;
use crate::render::{composite_foreground_background, render_image, RenderConfig, RenderError};
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("invalid pose sampling config: {0}")]
    Config(String),
    #[error("need at least 2 poses, got {0}")]
    TooFewPoses(usize),
    #[error("no pose pair within thresholds after {0} attempts")]
    NoValidPair(usize),
    #[error("camera set is empty")]
    EmptyCameraSet,
    #[error("focal scale must be positive and finite, got {0}")]
    BadFocalScale(f64),
    #[error("background probability must lie in [0, 1], got {0}")]
    BadProbability(f64),
    #[error(transparent)]
    Render(#[from] RenderError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSampleConfig {
    /// Radians.
    pub rotation_threshold: f64,
    /// Squared world units.
    pub translation_threshold: f64,
    pub max_attempts: usize,
    pub rng_seed: u64,
}

impl Default for PoseSampleConfig {
    fn default() -> Self {
        PoseSampleConfig {
            rotation_threshold: std::f64::consts::PI / 24.0,
            translation_threshold: 0.5,
            max_attempts: 10_000,
            rng_seed: 0,
        }
    }
}

impl PoseSampleConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(self.rotation_threshold > 0.0 && self.rotation_threshold <= std::f64::consts::PI) {
            return Err(AugmentError::Config(format!("rotation threshold {} outside (0, π]", self.rotation_threshold)));
        }
        if !(self.translation_threshold > 0.0 && self.translation_threshold.is_finite()) {
            return Err(AugmentError::Config(format!("translation threshold {} must be positive", self.translation_threshold)));
        }
        if self.max_attempts == 0 {
            return Err(AugmentError::Config("max_attempts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSample {
    pub rotation: Mat3,
    pub translation: Vec3,
    /// Indices (j, k) of the interpolated pair.
    pub pair: (usize, usize),
    pub s: f64,
}

impl PoseSample {
    /// Row-major camera-to-world matrix.
    pub fn c2w(&self) -> [f64; 16] {
        pose_matrix(&self.rotation, &self.translation)
    }
}

/// Draws `s ~ U[0, 1]`, then rejects random pose pairs until both the
/// rotation and the squared translation distance fall below the thresholds,
/// and interpolates between them.
pub fn random_pose(poses: &[(Mat3, Vec3)], cfg: &PoseSampleConfig, rng: &mut impl Rng) -> Result<PoseSample, AugmentError> {
    let s = rng.gen::<f64>();
    random_pose_at(poses, cfg, s, rng)
}

/// [`random_pose`] with a fixed interpolation parameter.
pub fn random_pose_at(
    poses: &[(Mat3, Vec3)],
    cfg: &PoseSampleConfig,
    s: f64,
    rng: &mut impl Rng,
) -> Result<PoseSample, AugmentError> {
    cfg.validate()?;
    if poses.len() < 2 {
        return Err(AugmentError::TooFewPoses(poses.len()));
    }
    let n = poses.len();
    for _ in 0..cfg.max_attempts {
        let j = rng.gen_range(0..n);
        let k = (j + rng.gen_range(1..n)) % n;
        let (rj, tj) = &poses[j];
        let (rk, tk) = &poses[k];
        if rotation_distance(rj, rk) < cfg.rotation_threshold && translation_distance(tj, tk) < cfg.translation_threshold {
            return Ok(PoseSample {
                rotation: intermediate_rotation(rj, rk, s),
                translation: tk * s + tj * (1.0 - s),
                pair: (j, k),
                s,
            });
        }
    }
    Err(AugmentError::NoValidPair(cfg.max_attempts))
}

/// Intrinsics and image shape of a uniformly chosen training camera.
pub fn random_intrinsics(cameras: &[Camera], rng: &mut impl Rng) -> Result<Intrinsics, AugmentError> {
    cameras.choose(rng).map(Camera::intrinsics).ok_or(AugmentError::EmptyCameraSet)
}

#[derive(Debug, Clone)]
pub struct AugmentedView {
    pub image: Raster,
    pub substituted: bool,
}

/// With probability `p`, renders scene A's foreground over background
/// `other`; otherwise renders scene A as is.
pub fn augment_background(
    grid: &SparseVoxelGrid,
    own: &BackgroundModel,
    other: &BackgroundModel,
    cam: &Camera,
    cfg: &RenderConfig,
    p: f64,
    rng: &mut impl Rng,
) -> Result<AugmentedView, AugmentError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(AugmentError::BadProbability(p));
    }
    cfg.validate()?;
    let substituted = rng.gen::<f64>() < p;
    let image = if substituted {
        composite_foreground_background(grid, Some(other), cam, cfg)?
    } else {
        render_image(grid, Some(own), cam, cfg)
    };
    Ok(AugmentedView { image, substituted })
}

/// Scales the focal lengths and replaces the radial distortion.
pub fn manipulate_camera(cam: &Camera, focal_scale: f64, k1: f64, k2: f64) -> Result<Camera, AugmentError> {
    if !(focal_scale > 0.0 && focal_scale.is_finite()) {
        return Err(AugmentError::BadFocalScale(focal_scale));
    }
    let mut out = cam.clone();
    out.fx *= focal_scale;
    out.fy *= focal_scale;
    Ok(out.with_distortion(k1, k2))
}
