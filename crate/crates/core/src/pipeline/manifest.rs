use super::blur::blur_score;
use super::points::unproject_depth;
use super::PipelineError;
use crate::geometry::{Camera, Intrinsics, Vec3};
use crate::raster::{load_depth_u16, Raster};
use crate::train::TrainingView;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const MAX_FRAMES: usize = 1500;
pub const TEST_FRACTION: f64 = 0.1;
/// Depth PNGs store millimeters.
pub const DEFAULT_DEPTH_SCALE: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    /// Image path, relative to the manifest directory unless absolute.
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<PathBuf>,
    pub intrinsics: Intrinsics,
    /// Row-major 4×4 camera-to-world matrix.
    pub c2w: [f64; 16],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blur_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub scene_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<String>,
    /// World units per stored depth unit.
    #[serde(default = "default_depth_scale")]
    pub depth_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Bounds>,
    pub frames: Vec<Frame>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_depth_scale() -> f64 {
    DEFAULT_DEPTH_SCALE
}

impl SceneManifest {
    /// Parses JSON text; relative paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut m: SceneManifest = serde_json::from_str(text).map_err(|e| PipelineError::Manifest(e.to_string()))?;
        m.base_dir = base_dir.to_path_buf();
        m.check_structure()?;
        Ok(m)
    }

    /// Reads a manifest and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io { path: path.to_path_buf(), source })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::parse(&text, &base)?;
        m.check_files()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        crate::atomic::write_atomic(path, (self.to_json() + "\n").as_bytes()).map_err(|source| PipelineError::Io { path: path.to_path_buf(), source })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Re-bases relative paths so the manifest can be saved in `new_base`.
    pub fn rebase(&mut self, new_base: &Path) {
        let abs = |m: &SceneManifest, p: &Path| std::path::absolute(m.resolve(p)).unwrap_or_else(|_| m.resolve(p));
        let frames: Vec<Frame> = self
            .frames
            .iter()
            .map(|f| Frame { image: abs(self, &f.image), depth: f.depth.as_ref().map(|d| abs(self, d)), ..f.clone() })
            .collect();
        self.frames = frames;
        self.base_dir = new_base.to_path_buf();
    }

    fn check_structure(&self) -> Result<(), PipelineError> {
        if !(self.depth_scale > 0.0 && self.depth_scale.is_finite()) {
            return Err(PipelineError::Manifest(format!("depth_scale must be positive, got {}", self.depth_scale)));
        }
        if let Some(b) = &self.bounds {
            if !(0..3).all(|i| b.min[i].is_finite() && b.max[i].is_finite() && b.min[i] < b.max[i]) {
                return Err(PipelineError::Manifest("bounds must satisfy min < max on every axis".into()));
            }
        }
        for i in 0..self.frames.len() {
            self.camera(i)?;
        }
        Ok(())
    }

    pub fn check_files(&self) -> Result<(), PipelineError> {
        for f in &self.frames {
            for p in std::iter::once(&f.image).chain(f.depth.as_ref()) {
                let r = self.resolve(p);
                if !r.is_file() {
                    return Err(PipelineError::MissingFile(r));
                }
            }
        }
        Ok(())
    }

    pub fn camera(&self, index: usize) -> Result<Camera, PipelineError> {
        let f = &self.frames[index];
        Camera::from_c2w(&f.c2w, f.intrinsics).map_err(|e| PipelineError::Frame { index, source: e })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.frames.len()).filter(|&i| self.frames[i].split.unwrap_or(Split::Train) == split).collect()
    }

    pub fn world_bounds(&self) -> Option<(Vec3, Vec3)> {
        self.bounds.as_ref().map(|b| (Vec3::from(b.min), Vec3::from(b.max)))
    }

    /// Fills in missing blur scores from the images, in parallel.
    pub fn compute_blur_scores(&mut self) -> Result<(), PipelineError> {
        let scores: Vec<Result<f64, PipelineError>> = self
            .frames
            .par_iter()
            .map(|f| match f.blur_score {
                Some(s) => Ok(s),
                None => blur_score(&Raster::load(&self.resolve(&f.image))?),
            })
            .collect();
        for (f, s) in self.frames.iter_mut().zip(scores) {
            f.blur_score = Some(s?);
        }
        Ok(())
    }

    /// A frozen manifest has a split on every frame, at least two training
    /// frames and, from ten frames up, a test share within [5%, 15%].
    pub fn check_frozen(&self) -> Result<(), PipelineError> {
        if self.frames.iter().any(|f| f.split.is_none()) {
            return Err(PipelineError::Manifest("manifest is not frozen: frames without a split".into()));
        }
        let train = self.indices(Split::Train).len();
        if train < 2 {
            return Err(self.defective(format!("only {train} training frames")));
        }
        let n = self.frames.len();
        let share = self.indices(Split::Test).len() as f64 / n as f64;
        if n >= 10 && !(0.05..=0.15).contains(&share) {
            return Err(PipelineError::Manifest(format!("test share {share:.3} outside [0.05, 0.15]")));
        }
        Ok(())
    }

    fn defective(&self, reason: String) -> PipelineError {
        PipelineError::Defective { scene: self.scene_id.clone(), reason }
    }

    /// Loads images and cameras of one split.
    pub fn load_views(&self, split: Split) -> Result<Vec<TrainingView>, PipelineError> {
        self.indices(split)
            .into_par_iter()
            .map(|i| {
                let camera = self.camera(i)?;
                let image = Raster::load(&self.resolve(&self.frames[i].image))?;
                if (image.width, image.height) != (camera.width as usize, camera.height as usize) {
                    return Err(PipelineError::DimensionMismatch {
                        left: (image.width, image.height),
                        right: (camera.width as usize, camera.height as usize),
                    });
                }
                Ok(TrainingView { camera, image })
            })
            .collect()
    }

    /// Unprojects the depth maps of all training frames.
    pub fn depth_points(&self) -> Result<Vec<Vec3>, PipelineError> {
        let per_frame: Vec<Result<Vec<Vec3>, PipelineError>> = self
            .indices(Split::Train)
            .into_par_iter()
            .map(|i| {
                let path = self.frames[i].depth.as_ref().ok_or(PipelineError::MissingDepth { frame: i })?;
                let cam = self.camera(i)?;
                let (w, h, raw) = load_depth_u16(&self.resolve(path))?;
                if (w, h) != (cam.width as usize, cam.height as usize) {
                    return Err(PipelineError::DimensionMismatch { left: (w, h), right: (cam.width as usize, cam.height as usize) });
                }
                let depth: Vec<f64> = raw.iter().map(|&d| d as f64 * self.depth_scale).collect();
                Ok(unproject_depth(&cam, &depth))
            })
            .collect();
        let mut out = Vec::new();
        for p in per_frame {
            out.extend(p?);
        }
        Ok(out)
    }
}

/// Caps the frame count by keeping every ⌈N/max⌉-th frame when there are
/// more than `max_frames`; otherwise keeps the frames whose blur score
/// reaches `blur_threshold`. Fewer than two survivors marks the scene
/// defective.
pub fn select_frames(m: &SceneManifest, max_frames: usize, blur_threshold: f64) -> Result<SceneManifest, PipelineError> {
    if max_frames == 0 {
        return Err(PipelineError::Manifest("max_frames must be positive".into()));
    }
    let n = m.frames.len();
    let frames: Vec<Frame> = if n > max_frames {
        let step = n.div_ceil(max_frames);
        m.frames.iter().step_by(step).cloned().collect()
    } else {
        let mut kept = Vec::new();
        for (i, f) in m.frames.iter().enumerate() {
            let score = f
                .blur_score
                .ok_or_else(|| PipelineError::Manifest(format!("frame {i} has no blur score")))?;
            if score >= blur_threshold {
                kept.push(f.clone());
            }
        }
        kept
    };
    if frames.len() < 2 {
        return Err(m.defective(format!("{} of {n} frames survive selection", frames.len())));
    }
    Ok(SceneManifest { frames, ..m.clone() })
}

/// Test indices spread evenly over `n` frames: the i-th sits within ±1 of
/// `(i + ½)·n/k`, jittered by the seeded RNG.
pub fn test_indices(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let k = (n as f64 * fraction).round() as usize;
    if k == 0 {
        return Vec::new();
    }
    let spacing = n as f64 / k as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<usize> = Vec::with_capacity(k);
    for i in 0..k {
        let base = ((i as f64 + 0.5) * spacing).floor() as i64;
        let jitter = rng.gen_range(-1..=1i64);
        let mut idx = (base + jitter).clamp(0, n as i64 - 1) as usize;
        if out.last().is_some_and(|&p| idx <= p) {
            idx = base as usize;
        }
        out.push(idx);
    }
    out
}

/// Assigns `Split::Test` to roughly `fraction` of the frames (stratified,
/// seeded) and `Split::Train` to the rest.
pub fn assign_split(m: &SceneManifest, fraction: f64, seed: u64) -> SceneManifest {
    let test = test_indices(m.frames.len(), fraction, seed);
    let mut out = m.clone();
    for (i, f) in out.frames.iter_mut().enumerate() {
        f.split = Some(if test.binary_search(&i).is_ok() { Split::Test } else { Split::Train });
    }
    out
}
