//! Differentiable volume rendering over the sparse grid.
//!
//! Per sample `α = 1 − exp(−σδ)`, the sample contributes `T·α·c` and the
//! transmittance becomes `T·(1 − α)`. Samples are spaced `step_size` voxels
//! apart starting at the ray's entry into the grid bounds, and `δ` is that
//! spacing in world units. Light that survives the grid picks up the
//! background.

use crate::geometry::{pixel_to_ray_unchecked, Camera, Ray};
use crate::grid::sh::{sh_basis, sh_logits, sigmoid};
use crate::grid::{eval_color, BackgroundModel, BackgroundTrace, Corners, SparseVoxelGrid, EMPTY, SH_COEFFS, SH_DIM};
use crate::raster::Raster;
use rayon::prelude::*;
use thiserror::Error;

/// Brightness used when background rendering is on but no model exists.
pub const DEFAULT_BRIGHTNESS: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("scene has no background model to substitute")]
    MissingBackground,
    #[error("invalid render config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    /// Sample spacing in units of the smallest voxel edge.
    pub step_size: f64,
    /// Samples with density below this are skipped by the fast path.
    pub sigma_threshold: f64,
    /// The fast path stops once transmittance falls below this.
    pub early_stop_t: f64,
    pub use_background: bool,
    /// Offsets the first sample by a per-ray pseudo-random fraction of a step.
    pub jitter: bool,
    /// Treats the grid as empty (background-only rendering).
    pub skip_foreground: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            step_size: 0.5,
            sigma_threshold: 1e-8,
            early_stop_t: 1e-4,
            use_background: true,
            jitter: false,
            skip_foreground: false,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(RenderError::Config(format!("step_size must be positive, got {}", self.step_size)));
        }
        if !(0.0..1.0).contains(&self.early_stop_t) {
            return Err(RenderError::Config(format!("early_stop_t must lie in [0, 1), got {}", self.early_stop_t)));
        }
        if !(self.sigma_threshold >= 0.0) {
            return Err(RenderError::Config("sigma_threshold must be non-negative".into()));
        }
        Ok(())
    }

    /// Every sample evaluated, no early termination.
    pub fn exhaustive(self) -> Self {
        RenderConfig { sigma_threshold: 0.0, early_stop_t: 0.0, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayOutput {
    pub rgb: [f64; 3],
    /// Foreground transmittance before the background is added.
    pub transmittance: f64,
}

/// Slab intersection with the grid bounds, restricted to the ray's own span.
pub fn clip_ray(grid: &SparseVoxelGrid, ray: &Ray) -> Option<(f64, f64)> {
    let (lo, hi) = (grid.world_min(), grid.world_max());
    let mut t0 = ray.t_near;
    let mut t1 = ray.t_far;
    for i in 0..3 {
        let inv = 1.0 / ray.direction[i];
        let (mut a, mut b) = ((lo[i] - ray.origin[i]) * inv, (hi[i] - ray.origin[i]) * inv);
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        if a.is_nan() || b.is_nan() {
            // direction component is zero and the origin sits on the slab plane
            continue;
        }
        t0 = t0.max(a);
        t1 = t1.min(b);
    }
    (t0 < t1).then_some((t0, t1))
}

/// World-space sample spacing for a grid and config.
pub fn step_length(grid: &SparseVoxelGrid, cfg: &RenderConfig) -> f64 {
    cfg.step_size * grid.voxel_size().min()
}

fn jitter_offset(ray: &Ray) -> f64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in ray.origin.iter().chain(ray.direction.iter()) {
        h ^= v.to_bits();
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// First sample distance, spacing, and exclusive end of the march.
fn sample_span(grid: &SparseVoxelGrid, ray: &Ray, cfg: &RenderConfig) -> Option<(f64, f64, f64)> {
    if cfg.skip_foreground {
        return None;
    }
    let (t0, t1) = clip_ray(grid, ray)?;
    let step = step_length(grid, cfg);
    let start = if cfg.jitter { t0 + jitter_offset(ray) * step } else { t0 };
    Some((start, step, t1))
}

fn add_background(
    rgb: &mut [f64; 3],
    transmittance: f64,
    bg: Option<&BackgroundModel>,
    ray: &Ray,
    cfg: &RenderConfig,
) {
    if !cfg.use_background {
        return;
    }
    let add = match bg {
        Some(model) => model.background_radiance(ray, transmittance),
        None => [transmittance * DEFAULT_BRIGHTNESS; 3],
    };
    for c in 0..3 {
        rgb[c] += add[c];
    }
}

/// One recorded sample, kept for the backward pass.
#[derive(Debug, Clone, Copy)]
pub struct SampleRecord {
    pub corners: Corners,
    pub raw_sigma: f64,
    pub alpha: f64,
    /// Transmittance in front of the sample.
    pub transmittance: f64,
    pub rgb: [f64; 3],
}

/// Forward pass with everything the gradient needs.
#[derive(Debug, Clone, Default)]
pub struct RayTrace {
    pub samples: Vec<SampleRecord>,
    pub delta: f64,
    pub basis: [f64; SH_COEFFS],
    pub foreground: [f64; 3],
    pub transmittance: f64,
    pub background: Option<BackgroundTrace>,
    /// Radiance behind the grid for unit transmittance.
    pub background_radiance: [f64; 3],
    pub rgb: [f64; 3],
}

/// Fast-path march recording samples that contribute.
pub fn trace_ray(grid: &SparseVoxelGrid, bg: Option<&BackgroundModel>, ray: &Ray, cfg: &RenderConfig) -> RayTrace {
    let mut trace = RayTrace { transmittance: 1.0, basis: sh_basis(&ray.direction), ..Default::default() };
    march(grid, ray, cfg, &trace.basis.clone(), |rec| trace.samples.push(rec), &mut trace.foreground, &mut trace.transmittance, &mut trace.delta);
    let t = trace.transmittance;
    trace.rgb = trace.foreground;
    if cfg.use_background {
        match bg {
            Some(model) => {
                let bt = model.trace(ray);
                trace.background_radiance = bt.radiance;
                trace.background = Some(bt);
            }
            None => trace.background_radiance = [DEFAULT_BRIGHTNESS; 3],
        }
        for c in 0..3 {
            trace.rgb[c] += t * trace.background_radiance[c];
        }
    }
    trace
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn march(
    grid: &SparseVoxelGrid,
    ray: &Ray,
    cfg: &RenderConfig,
    basis: &[f64; SH_COEFFS],
    mut record: impl FnMut(SampleRecord),
    color: &mut [f64; 3],
    transmittance: &mut f64,
    delta_out: &mut f64,
) {
    let Some((start, step, end)) = sample_span(grid, ray, cfg) else { return };
    *delta_out = step;
    let mut sh = [0.0; SH_DIM];
    let mut t = *transmittance;
    let mut i = 0usize;
    loop {
        let dist = start + i as f64 * step;
        if dist >= end {
            break;
        }
        i += 1;
        let Some(corners) = grid.corners(&ray.at(dist)) else { continue };
        if corners.iter().all(|(s, _)| *s == EMPTY) {
            continue;
        }
        let raw_sigma = grid.raw_density(&corners);
        let sigma = raw_sigma.max(0.0);
        if sigma == 0.0 || sigma < cfg.sigma_threshold {
            continue;
        }
        grid.interp_sh(&corners, &mut sh);
        let rgb = sh_logits(&sh, basis).map(sigmoid);
        let alpha = 1.0 - (-sigma * step).exp();
        let w = t * alpha;
        for c in 0..3 {
            color[c] += w * rgb[c];
        }
        record(SampleRecord { corners, raw_sigma, alpha, transmittance: t, rgb });
        t *= 1.0 - alpha;
        if t < cfg.early_stop_t {
            break;
        }
    }
    *transmittance = t;
}

/// Renders one ray: composited color (with background) and the
/// foreground transmittance.
pub fn render_ray(grid: &SparseVoxelGrid, bg: Option<&BackgroundModel>, ray: &Ray, cfg: &RenderConfig) -> RayOutput {
    let basis = sh_basis(&ray.direction);
    let mut rgb = [0.0; 3];
    let mut t = 1.0;
    let mut delta = 0.0;
    march(grid, ray, cfg, &basis, |_| {}, &mut rgb, &mut t, &mut delta);
    add_background(&mut rgb, t, bg, ray, cfg);
    RayOutput { rgb, transmittance: t }
}

/// Reference renderer: every sample along the clipped ray is evaluated in
/// order with full trilinear lookup and per-sample color evaluation.
pub fn render_ray_oracle(
    grid: &SparseVoxelGrid,
    bg: Option<&BackgroundModel>,
    ray: &Ray,
    cfg: &RenderConfig,
) -> RayOutput {
    let mut rgb = [0.0; 3];
    let mut t = 1.0;
    if let Some((start, step, end)) = sample_span(grid, ray, cfg) {
        let n = ((end - start) / step).ceil().max(0.0) as usize;
        for i in 0..=n {
            let dist = start + i as f64 * step;
            if dist >= end {
                break;
            }
            let (sigma, sh) = grid.sample_trilinear(&ray.at(dist));
            let c = eval_color(&sh, &ray.direction);
            let alpha = 1.0 - (-sigma * step).exp();
            for k in 0..3 {
                rgb[k] += t * alpha * c[k];
            }
            t *= 1.0 - alpha;
        }
    }
    add_background(&mut rgb, t, bg, ray, cfg);
    RayOutput { rgb, transmittance: t }
}

/// Renders every pixel of `cam`. Output is independent of thread count.
pub fn render_image(grid: &SparseVoxelGrid, bg: Option<&BackgroundModel>, cam: &Camera, cfg: &RenderConfig) -> Raster {
    render_image_with(cam, |ray| render_ray(grid, bg, ray, cfg).rgb)
}

/// Per-pixel foreground transmittance for `cam`.
pub fn transmittance_image(grid: &SparseVoxelGrid, cam: &Camera, cfg: &RenderConfig) -> Vec<f64> {
    let (w, h) = (cam.width as usize, cam.height as usize);
    (0..w * h)
        .into_par_iter()
        .map(|i| {
            let ray = pixel_to_ray_unchecked(cam, (i % w) as f64, (i / w) as f64);
            render_ray(grid, None, &ray, &RenderConfig { use_background: false, ..*cfg }).transmittance
        })
        .collect()
}

pub(crate) fn render_image_with(cam: &Camera, f: impl Fn(&Ray) -> [f64; 3] + Sync) -> Raster {
    let (w, h) = (cam.width as usize, cam.height as usize);
    let mut out = Raster::new(w, h);
    out.data.par_chunks_mut(w * 3).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let ray = pixel_to_ray_unchecked(cam, x as f64, y as f64);
            row[x * 3..x * 3 + 3].copy_from_slice(&f(&ray));
        }
    });
    out
}

/// Renders scene A's foreground over another scene's background.
pub fn composite_foreground_background(
    grid_fg: &SparseVoxelGrid,
    bg_other: Option<&BackgroundModel>,
    cam: &Camera,
    cfg: &RenderConfig,
) -> Result<Raster, RenderError> {
    let bg = bg_other.ok_or(RenderError::MissingBackground)?;
    Ok(render_image(grid_fg, Some(bg), cam, &RenderConfig { use_background: true, ..*cfg }))
}

/// Ray through the center of pixel `(x, y)`.
pub fn ray_for_pixel(cam: &Camera, x: usize, y: usize) -> Ray {
    pixel_to_ray_unchecked(cam, x as f64, y as f64)
}
