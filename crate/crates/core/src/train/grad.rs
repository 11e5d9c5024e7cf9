//! Analytic gradients of the photometric loss through the volume renderer.

use super::regularizers::{beta_loss, bg_tv_loss, sparsity_loss, tv_loss};
use super::{TrainConfig, TrainError};
use crate::geometry::Ray;
use crate::grid::{BackgroundModel, SparseVoxelGrid, EMPTY, SH_COEFFS, SH_DIM, TEXEL_CHANNELS};
use crate::render::{trace_ray, RayTrace, RenderConfig};

/// Dense gradient storage with a record of which voxels and texels were
/// touched, so clearing and sparse updates only visit those.
#[derive(Debug, Clone, Default)]
pub struct GradientBuffer {
    pub d_density: Vec<f64>,
    pub d_sh: Vec<f64>,
    pub d_bg: Vec<f64>,
    pub ray_count: usize,
    touched_slots: Vec<u32>,
    slot_mark: Vec<bool>,
    touched_texels: Vec<u32>,
    texel_mark: Vec<bool>,
}

impl GradientBuffer {
    pub fn new(n_slots: usize, n_bg_values: usize) -> Self {
        GradientBuffer {
            d_density: vec![0.0; n_slots],
            d_sh: vec![0.0; n_slots * SH_DIM],
            d_bg: vec![0.0; n_bg_values],
            ray_count: 0,
            touched_slots: Vec::new(),
            slot_mark: vec![false; n_slots],
            touched_texels: Vec::new(),
            texel_mark: vec![false; n_bg_values / TEXEL_CHANNELS],
        }
    }

    pub fn for_scene(grid: &SparseVoxelGrid, bg: Option<&BackgroundModel>) -> Self {
        Self::new(grid.len(), bg.map_or(0, |b| b.texels().len()))
    }

    pub fn matches(&self, grid: &SparseVoxelGrid, bg: Option<&BackgroundModel>) -> bool {
        self.d_density.len() == grid.len() && self.d_bg.len() == bg.map_or(0, |b| b.texels().len())
    }

    #[inline]
    pub fn touch_slot(&mut self, slot: usize) {
        if !self.slot_mark[slot] {
            self.slot_mark[slot] = true;
            self.touched_slots.push(slot as u32);
        }
    }

    /// `base` is the first channel index of the texel.
    #[inline]
    pub fn touch_texel(&mut self, base: usize) {
        let t = base / TEXEL_CHANNELS;
        if !self.texel_mark[t] {
            self.texel_mark[t] = true;
            self.touched_texels.push(t as u32);
        }
    }

    pub fn touched_slots(&self) -> &[u32] {
        &self.touched_slots
    }

    pub fn touched_texels(&self) -> &[u32] {
        &self.touched_texels
    }

    /// Zeroes every touched entry.
    pub fn clear(&mut self) {
        for &s in &self.touched_slots {
            let s = s as usize;
            self.d_density[s] = 0.0;
            self.d_sh[s * SH_DIM..(s + 1) * SH_DIM].fill(0.0);
            self.slot_mark[s] = false;
        }
        let ch = TEXEL_CHANNELS;
        for &t in &self.touched_texels {
            let t = t as usize;
            self.d_bg[t * ch..(t + 1) * ch].fill(0.0);
            self.texel_mark[t] = false;
        }
        self.touched_slots.clear();
        self.touched_texels.clear();
        self.ray_count = 0;
    }

    pub fn is_zero(&self) -> bool {
        self.d_density.iter().chain(&self.d_sh).chain(&self.d_bg).all(|&v| v == 0.0)
    }

    /// Adds `other` into `self`, visiting only what `other` touched.
    pub fn merge_from(&mut self, other: &GradientBuffer) {
        for &s in &other.touched_slots {
            let s = s as usize;
            self.touch_slot(s);
            self.d_density[s] += other.d_density[s];
            for k in s * SH_DIM..(s + 1) * SH_DIM {
                self.d_sh[k] += other.d_sh[k];
            }
        }
        let ch = TEXEL_CHANNELS;
        for &t in &other.touched_texels {
            let t = t as usize;
            self.touch_texel(t * ch);
            for k in t * ch..(t + 1) * ch {
                self.d_bg[k] += other.d_bg[k];
            }
        }
        self.ray_count += other.ray_count;
    }
}

/// Which voxels (or texels) a regularizer visits this step.
#[derive(Debug, Clone, PartialEq)]
pub enum SlotSet {
    All,
    Subset(Vec<usize>),
}

impl SlotSet {
    pub fn for_each(&self, len: usize, mut f: impl FnMut(usize)) {
        match self {
            SlotSet::All => (0..len).for_each(f),
            SlotSet::Subset(v) => v.iter().copied().filter(|&i| i < len).for_each(&mut f),
        }
    }
}

/// Regularizer sampling for one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct RegSelection {
    pub tv_slots: SlotSet,
    pub sparsity_slots: SlotSet,
    pub bg_texels: SlotSet,
}

impl RegSelection {
    pub fn all() -> Self {
        RegSelection { tv_slots: SlotSet::All, sparsity_slots: SlotSet::All, bg_texels: SlotSet::All }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub mse: f64,
    /// Weighted TV over grid and background.
    pub tv: f64,
    pub sparsity: f64,
    pub beta: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.mse + self.tv + self.sparsity + self.beta
    }
}

/// Propagates `∂L/∂rgb` (and `∂L/∂T_final`) of one traced ray into the buffer.
pub fn backward_ray(
    bg: Option<&BackgroundModel>,
    trace: &RayTrace,
    d_rgb: [f64; 3],
    d_transmittance: f64,
    grad: &mut GradientBuffer,
) {
    let t_final = trace.transmittance;
    let delta = trace.delta;
    // light arriving from behind the current sample
    let mut suffix = [0.0; 3];
    for c in 0..3 {
        suffix[c] = t_final * trace.background_radiance[c];
    }
    for s in trace.samples.iter().rev() {
        let w = s.transmittance * s.alpha;
        let t_next = s.transmittance * (1.0 - s.alpha);
        let mut d_sigma = -d_transmittance * delta * t_final;
        let mut d_logit = [0.0; 3];
        for c in 0..3 {
            d_sigma += d_rgb[c] * delta * (t_next * s.rgb[c] - suffix[c]);
            d_logit[c] = d_rgb[c] * w * s.rgb[c] * (1.0 - s.rgb[c]);
            suffix[c] += w * s.rgb[c];
        }
        if s.raw_sigma <= 0.0 {
            d_sigma = 0.0;
        }
        for &(slot, weight) in s.corners.iter().filter(|(slot, _)| *slot != EMPTY) {
            let slot = slot as usize;
            grad.touch_slot(slot);
            grad.d_density[slot] += weight * d_sigma;
            let dst = &mut grad.d_sh[slot * SH_DIM..(slot + 1) * SH_DIM];
            for c in 0..3 {
                let g = weight * d_logit[c];
                for k in 0..SH_COEFFS {
                    dst[c * SH_COEFFS + k] += g * trace.basis[k];
                }
            }
        }
    }
    if let (Some(model), Some(bt)) = (bg, trace.background.as_ref()) {
        let d_bg_rgb = d_rgb.map(|g| g * t_final);
        for hit in &bt.hits {
            for &(base, _) in &hit.corners {
                grad.touch_texel(base);
            }
        }
        model.backward(bt, d_bg_rgb, &mut grad.d_bg);
    }
}

/// Photometric loss over one batch, accumulated into `grad`. Returns the
/// summed squared error, the beta-loss value and the final transmittances.
/// `scale` is `1/(3·total_rays)` for the MSE and `1/total_rays` for beta.
pub(crate) fn photometric_pass(
    grid: &SparseVoxelGrid,
    bg: Option<&BackgroundModel>,
    batch: &[(Ray, [f64; 3])],
    first_index: usize,
    total_rays: usize,
    lambda_beta: f64,
    render: &RenderConfig,
    grad: &mut GradientBuffer,
) -> Result<(f64, f64), TrainError> {
    let mse_scale = 1.0 / (3.0 * total_rays as f64);
    let mut sq_err = 0.0;
    let mut beta = 0.0;
    for (i, (ray, target)) in batch.iter().enumerate() {
        let trace = trace_ray(grid, bg, ray, render);
        let mut d_rgb = [0.0; 3];
        let mut ray_err = 0.0;
        for c in 0..3 {
            let diff = trace.rgb[c] - target[c];
            ray_err += diff * diff;
            d_rgb[c] = 2.0 * diff * mse_scale;
        }
        if !ray_err.is_finite() {
            return Err(TrainError::NonFiniteLoss { ray: first_index + i });
        }
        sq_err += ray_err;
        let (b, db) = beta_loss(&[trace.transmittance], lambda_beta);
        beta += b;
        backward_ray(bg, &trace, d_rgb, db[0] / total_rays as f64, grad);
        grad.ray_count += 1;
    }
    Ok((sq_err, beta))
}

/// Loss and analytic gradient for a batch of `(ray, target RGB)` pairs.
///
/// `loss = MSE + Σλ·TV + λ_sparsity·Σ log(1 + 2σ²) + λ_beta·mean(log T + log(1 − T))`,
/// with the MSE averaged over rays and channels.
pub fn loss_and_grad(
    grid: &SparseVoxelGrid,
    bg: Option<&BackgroundModel>,
    batch: &[(Ray, [f64; 3])],
    cfg: &TrainConfig,
    render: &RenderConfig,
    selection: &RegSelection,
) -> Result<(LossBreakdown, GradientBuffer), TrainError> {
    let mut grad = GradientBuffer::for_scene(grid, bg);
    let loss = loss_and_grad_into(grid, bg, batch, cfg, render, selection, &mut grad)?;
    Ok((loss, grad))
}

pub fn loss_and_grad_into(
    grid: &SparseVoxelGrid,
    bg: Option<&BackgroundModel>,
    batch: &[(Ray, [f64; 3])],
    cfg: &TrainConfig,
    render: &RenderConfig,
    selection: &RegSelection,
    grad: &mut GradientBuffer,
) -> Result<LossBreakdown, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let (sq_err, beta_sum) = photometric_pass(grid, bg, batch, 0, batch.len(), cfg.lambda_beta, render, grad)?;
    let mut loss = LossBreakdown {
        mse: sq_err / (3.0 * batch.len() as f64),
        beta: beta_sum / batch.len() as f64,
        ..Default::default()
    };
    add_regularizers(grid, bg, cfg, render, selection, grad, &mut loss);
    Ok(loss)
}

pub(crate) fn add_regularizers(
    grid: &SparseVoxelGrid,
    bg: Option<&BackgroundModel>,
    cfg: &TrainConfig,
    render: &RenderConfig,
    selection: &RegSelection,
    grad: &mut GradientBuffer,
    loss: &mut LossBreakdown,
) {
    if !render.skip_foreground {
        loss.tv += tv_loss(grid, &selection.tv_slots, cfg.lambda_tv_density, cfg.lambda_tv_sh, Some(grad));
        loss.sparsity += sparsity_loss(grid, &selection.sparsity_slots, cfg.lambda_sparsity, Some(grad));
    }
    if let Some(model) = bg {
        if render.use_background {
            loss.tv += bg_tv_loss(
                model,
                &selection.bg_texels,
                cfg.lambda_tv_bg_color,
                cfg.lambda_tv_bg_density,
                Some(grad),
            );
        }
    }
}
