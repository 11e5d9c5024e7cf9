//! Optimization of grid and background parameters from posed images.

mod config;
pub mod grad;
pub mod gradcheck;
pub mod regularizers;

pub use config::{Optimizer, TrainConfig};
pub use grad::{backward_ray, loss_and_grad, loss_and_grad_into, GradientBuffer, LossBreakdown, RegSelection, SlotSet};
pub use regularizers::{beta_loss, bg_tv_loss, sparsity_loss, tv_loss};

use crate::geometry::{Camera, Ray};
use crate::grid::{BackgroundModel, GridError, SparseVoxelGrid, SH_DIM, TEXEL_CHANNELS};
use crate::raster::Raster;
use crate::render::{ray_for_pixel, RenderConfig};
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::io::Write;
use thiserror::Error;

/// Consecutive steps above 10× the initial loss that count as divergence.
pub const DIVERGENCE_WINDOW: usize = 500;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("non-finite loss at ray {ray}")]
    NonFiniteLoss { ray: usize },
    #[error("training diverged at step {step}: mse {mse:.4e} stayed above 10x the initial {initial:.4e} for {DIVERGENCE_WINDOW} steps")]
    Diverged { step: usize, mse: f64, initial: f64 },
    #[error("need at least 2 training views, got {0}")]
    NotEnoughViews(usize),
    #[error("view {index}: image is {got:?} but camera expects {expected:?}")]
    ImageShape { index: usize, got: (usize, usize), expected: (usize, usize) },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("failed to build worker pool: {0}")]
    Pool(String),
}

/// A posed training image.
#[derive(Debug, Clone)]
pub struct TrainingView {
    pub camera: Camera,
    pub image: Raster,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub mse: f64,
    pub tv: f64,
    pub sparsity: f64,
    pub beta: f64,
    pub psnr_train: f64,
}

pub fn write_loss_log(log: &[LossRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "iteration,mse,tv,sparsity,beta,psnr_train")?;
    for r in log {
        writeln!(out, "{},{:e},{:e},{:e},{:e},{:.6}", r.iteration, r.mse, r.tv, r.sparsity, r.beta, r.psnr_train)?;
    }
    Ok(())
}

/// Least-squares slope of the MSE over the last half of the log.
pub fn loss_trend_slope(log: &[LossRecord]) -> f64 {
    let tail = &log[log.len() / 2..];
    let n = tail.len() as f64;
    if tail.len() < 2 {
        return 0.0;
    }
    let mx = tail.iter().map(|r| r.iteration as f64).sum::<f64>() / n;
    let my = tail.iter().map(|r| r.mse).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for r in tail {
        let dx = r.iteration as f64 - mx;
        sxy += dx * (r.mse - my);
        sxx += dx * dx;
    }
    sxy / sxx
}

/// Shuffled pool of every training pixel, reshuffled once exhausted.
struct PixelPool {
    offsets: Vec<usize>,
    order: Vec<u32>,
    cursor: usize,
}

impl PixelPool {
    fn new(views: &[TrainingView], rng: &mut ChaCha8Rng) -> Self {
        let mut offsets = Vec::with_capacity(views.len() + 1);
        let mut total = 0;
        for v in views {
            offsets.push(total);
            total += v.camera.pixel_count();
        }
        offsets.push(total);
        let mut order: Vec<u32> = (0..total as u32).collect();
        order.shuffle(rng);
        PixelPool { offsets, order, cursor: 0 }
    }

    fn next_batch(&mut self, views: &[TrainingView], n: usize, rng: &mut ChaCha8Rng, out: &mut Vec<(Ray, [f64; 3])>) {
        out.clear();
        for _ in 0..n {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            let id = self.order[self.cursor] as usize;
            self.cursor += 1;
            let view = self.offsets.partition_point(|&o| o <= id) - 1;
            let local = id - self.offsets[view];
            let v = &views[view];
            let w = v.camera.width as usize;
            let (x, y) = (local % w, local / w);
            out.push((ray_for_pixel(&v.camera, x, y), v.image.get(x, y)));
        }
    }
}

/// Per-parameter accumulators for RMSprop.
struct OptimizerState {
    v_density: Vec<f64>,
    v_sh: Vec<f64>,
    v_bg: Vec<f64>,
}

impl OptimizerState {
    fn new(grid: &SparseVoxelGrid, bg: Option<&BackgroundModel>) -> Self {
        OptimizerState {
            v_density: vec![0.0; grid.len()],
            v_sh: vec![0.0; grid.len() * SH_DIM],
            v_bg: vec![0.0; bg.map_or(0, |b| b.texels().len())],
        }
    }
}

#[inline]
fn update(p: &mut f64, g: f64, v: &mut f64, lr: f64, opt: Optimizer) {
    match opt {
        Optimizer::Sgd => *p -= lr * g,
        Optimizer::RmsProp { decay, eps } => {
            *v = decay * *v + (1.0 - decay) * g * g;
            *p -= lr * g / (v.sqrt() + eps);
        }
    }
}

/// Applies one update to every parameter the gradient touched.
pub fn apply_gradient(
    grid: &mut SparseVoxelGrid,
    bg: Option<&mut BackgroundModel>,
    grad: &GradientBuffer,
    cfg: &TrainConfig,
) {
    let mut state = OptimizerState::new(grid, bg.as_deref());
    apply_with_state(grid, bg, grad, cfg, &mut state, 1.0);
}

fn apply_with_state(
    grid: &mut SparseVoxelGrid,
    bg: Option<&mut BackgroundModel>,
    grad: &GradientBuffer,
    cfg: &TrainConfig,
    state: &mut OptimizerState,
    lr_factor: f64,
) {
    let opt = cfg.optimizer;
    let (lr_density, lr_sh) = (cfg.lr_density * lr_factor, cfg.lr_sh * lr_factor);
    for &s in grad.touched_slots() {
        let s = s as usize;
        update(&mut grid.density_mut()[s], grad.d_density[s], &mut state.v_density[s], lr_density, opt);
        let sh = &mut grid.sh_mut()[s * SH_DIM..(s + 1) * SH_DIM];
        for (k, p) in sh.iter_mut().enumerate() {
            let i = s * SH_DIM + k;
            update(p, grad.d_sh[i], &mut state.v_sh[i], lr_sh, opt);
        }
    }
    if let Some(bg) = bg {
        let texels = bg.texels_mut();
        for &t in grad.touched_texels() {
            let base = t as usize * TEXEL_CHANNELS;
            for ch in 0..TEXEL_CHANNELS {
                let lr = lr_factor * if ch < 3 { cfg.lr_bg_color } else { cfg.lr_bg_density };
                let i = base + ch;
                update(&mut texels[i], grad.d_bg[i], &mut state.v_bg[i], lr, opt);
            }
        }
    }
}

fn sample_set(len: usize, fraction: f64, rng: &mut ChaCha8Rng) -> SlotSet {
    if fraction >= 1.0 || len == 0 {
        return SlotSet::All;
    }
    let n = ((len as f64 * fraction).ceil() as usize).max(1);
    SlotSet::Subset((0..n).map(|_| rng.gen_range(0..len)).collect())
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub grid: SparseVoxelGrid,
    pub background: Option<BackgroundModel>,
    pub log: Vec<LossRecord>,
}

/// Runs `cfg.total_steps` of batched ray optimization.
pub fn train(
    views: &[TrainingView],
    grid: SparseVoxelGrid,
    background: Option<BackgroundModel>,
    cfg: &TrainConfig,
    render: &RenderConfig,
) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    render.validate().map_err(|e| TrainError::Config(e.to_string()))?;
    if views.len() < 2 {
        return Err(TrainError::NotEnoughViews(views.len()));
    }
    for (index, v) in views.iter().enumerate() {
        let expected = (v.camera.width as usize, v.camera.height as usize);
        if (v.image.width, v.image.height) != expected {
            return Err(TrainError::ImageShape { index, got: (v.image.width, v.image.height), expected });
        }
    }
    let pool = (cfg.workers > 1)
        .then(|| rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build())
        .transpose()
        .map_err(|e| TrainError::Pool(e.to_string()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut pixels = PixelPool::new(views, &mut rng);
    let mut grid = grid;
    let mut background = background;
    let mut state = OptimizerState::new(&grid, background.as_ref());
    let mut buffers: Vec<GradientBuffer> =
        (0..cfg.workers).map(|_| GradientBuffer::for_scene(&grid, background.as_ref())).collect();
    let mut batch = Vec::with_capacity(cfg.rays_per_batch);
    let mut log = Vec::with_capacity(cfg.total_steps);
    let mut initial_mse = None;
    let mut above = 0usize;

    for step in 0..cfg.total_steps {
        let mut restructured = false;
        if cfg.prune_at == Some(step) {
            let before = grid.len();
            grid = grid.prune(cfg.prune_threshold);
            info!("step {step}: pruned {} of {before} voxels below {}", before - grid.len(), cfg.prune_threshold);
            restructured = true;
        }
        if cfg.upsample_at == Some(step) {
            grid = grid.upsample()?;
            info!("step {step}: upsampled to {:?} ({} voxels)", grid.resolution(), grid.len());
            restructured = true;
        }
        if restructured {
            state = OptimizerState::new(&grid, background.as_ref());
            for b in buffers.iter_mut() {
                *b = GradientBuffer::for_scene(&grid, background.as_ref());
            }
        }

        let step_render = RenderConfig {
            skip_foreground: background.is_some() && step < cfg.fg_skip_steps,
            ..*render
        };
        pixels.next_batch(views, cfg.rays_per_batch, &mut rng, &mut batch);
        let selection = RegSelection {
            tv_slots: sample_set(grid.len(), cfg.reg_fraction, &mut rng),
            sparsity_slots: sample_set(grid.len(), cfg.reg_fraction, &mut rng),
            bg_texels: sample_set(background.as_ref().map_or(0, |b| b.texel_count()), cfg.reg_fraction, &mut rng),
        };

        for b in buffers.iter_mut() {
            b.clear();
        }
        let bg_ref = background.as_ref();
        let (sq_err, beta_sum) = match &pool {
            None => grad::photometric_pass(&grid, bg_ref, &batch, 0, batch.len(), cfg.lambda_beta, &step_render, &mut buffers[0])?,
            Some(pool) => {
                let chunk = batch.len().div_ceil(cfg.workers);
                let grid_ref = &grid;
                let results: Vec<Result<(f64, f64), TrainError>> = pool.install(|| {
                    buffers
                        .par_iter_mut()
                        .zip(batch.par_chunks(chunk))
                        .enumerate()
                        .map(|(w, (buf, rays))| {
                            grad::photometric_pass(grid_ref, bg_ref, rays, w * chunk, batch.len(), cfg.lambda_beta, &step_render, buf)
                        })
                        .collect()
                });
                let mut acc = (0.0, 0.0);
                for r in results {
                    let (a, b) = r?;
                    acc.0 += a;
                    acc.1 += b;
                }
                let (head, rest) = buffers.split_at_mut(1);
                for other in rest.iter() {
                    head[0].merge_from(other);
                }
                acc
            }
        };
        let n = batch.len() as f64;
        let mut loss = LossBreakdown { mse: sq_err / (3.0 * n), beta: beta_sum / n, ..Default::default() };
        grad::add_regularizers(&grid, bg_ref, cfg, &step_render, &selection, &mut buffers[0], &mut loss);

        let initial = *initial_mse.get_or_insert(loss.mse);
        if loss.mse > 10.0 * initial && loss.mse > 1e-8 {
            above += 1;
            if above >= DIVERGENCE_WINDOW {
                return Err(TrainError::Diverged { step, mse: loss.mse, initial });
            }
        } else {
            above = 0;
        }

        apply_with_state(&mut grid, background.as_mut(), &buffers[0], cfg, &mut state, cfg.lr_factor(step));
        let record = LossRecord {
            iteration: step,
            mse: loss.mse,
            tv: loss.tv,
            sparsity: loss.sparsity,
            beta: loss.beta,
            psnr_train: -10.0 * loss.mse.log10(),
        };
        if step % 500 == 0 {
            debug!("step {step}: mse {:.3e} psnr {:.2} voxels {}", record.mse, record.psnr_train, grid.len());
        }
        log.push(record);
    }
    Ok(TrainOutput { grid, background, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{look_at, Vec3};
    use crate::render::render_image;

    fn rig(n: usize, size: u32) -> Vec<Camera> {
        (0..n)
            .map(|i| {
                let a = i as f64 / n as f64 * std::f64::consts::TAU;
                let eye = Vec3::new(3.0 * a.cos(), 3.0 * a.sin(), 0.8);
                let f = size as f64 * 1.2;
                Camera::new(f, f, size as f64 / 2.0, size as f64 / 2.0, look_at(&eye, &Vec3::zeros(), &Vec3::z()), eye, size, size)
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn sgd_step_is_exact() {
        let mut g = SparseVoxelGrid::dense([2; 3], Vec3::zeros(), Vec3::repeat(1.0), 0.5, &[0.1; SH_DIM]).unwrap();
        let before = g.clone();
        let mut buf = GradientBuffer::for_scene(&g, None);
        for s in 0..g.len() {
            buf.touch_slot(s);
            buf.d_density[s] = 0.25 * s as f64;
            buf.d_sh[s * SH_DIM + 3] = -0.5;
        }
        let cfg = TrainConfig { optimizer: Optimizer::Sgd, lr_density: 30.0, lr_sh: 1e-2, ..Default::default() };
        apply_gradient(&mut g, None, &buf, &cfg);
        for s in 0..g.len() {
            assert_eq!(g.density()[s], before.density()[s] - 30.0 * buf.d_density[s]);
            assert_eq!(g.sh()[s * SH_DIM + 3], before.sh()[s * SH_DIM + 3] - 1e-2 * -0.5);
            assert_eq!(g.sh()[s * SH_DIM + 4], before.sh()[s * SH_DIM + 4]);
        }
    }

    #[test]
    fn zero_image_gradient_leaves_parameters_in_place() {
        let cams = rig(4, 8);
        let g = SparseVoxelGrid::dense([4; 3], Vec3::repeat(-0.5), Vec3::repeat(0.5), 0.3, &[0.05; SH_DIM]).unwrap();
        let render = RenderConfig::default();
        let views: Vec<TrainingView> =
            cams.iter().map(|c| TrainingView { camera: c.clone(), image: render_image(&g, None, c, &render) }).collect();
        let cfg = TrainConfig {
            total_steps: 20,
            upsample_at: None,
            prune_at: None,
            rays_per_batch: 32,
            lambda_beta: 0.0,
            ..Default::default()
        };
        let out = train(&views, g.clone(), None, &cfg, &render).unwrap();
        let steps = cfg.total_steps as f64;
        // drift comes only from TV (exactly zero on a constant grid, up to
        // ε) and sparsity, bounded by λ·lr·steps·max|∂penalty|
        let bound = steps * (cfg.lr_density * (cfg.lambda_sparsity * 4.0 + cfg.lambda_tv_density * 3.0) + 1e-12);
        for (a, b) in out.grid.density().iter().zip(g.density()) {
            assert!((a - b).abs() <= bound, "{a} vs {b}");
        }
        for (a, b) in out.grid.sh().iter().zip(g.sh()) {
            assert!((a - b).abs() <= steps * cfg.lr_sh * cfg.lambda_tv_sh * 3.0 + 1e-12);
        }
        let worst = out.log.iter().map(|r| r.mse).fold(0.0, f64::max);
        assert!(worst < 1e-10, "{worst}");
    }

    #[test]
    fn unseen_voxels_are_pruned() {
        let cams = rig(4, 8);
        // grid far larger than what the cameras see; corner voxels are never hit
        let lo = Vec3::new(-0.5, -0.5, -0.5);
        let hi = Vec3::new(0.5, 0.5, 6.5);
        let g = SparseVoxelGrid::dense([4, 4, 28], lo, hi, 0.1, &[0.0; SH_DIM]).unwrap();
        let target = Raster::filled(8, 8, [0.9, 0.2, 0.1]);
        let views: Vec<TrainingView> = cams.iter().map(|c| TrainingView { camera: c.clone(), image: target.clone() }).collect();
        let cfg = TrainConfig {
            total_steps: 30,
            prune_at: Some(29),
            upsample_at: None,
            rays_per_batch: 64,
            lambda_tv_density: 0.0,
            lambda_tv_sh: 0.0,
            lambda_sparsity: 0.0,
            lambda_beta: 0.0,
            optimizer: Optimizer::rmsprop(),
            lr_density: 1.0,
            ..Default::default()
        };
        let render = RenderConfig::default();
        // coverage oracle: every voxel some training ray's samples touch
        let mut touched = vec![false; g.len()];
        for c in &cams {
            for y in 0..8 {
                for x in 0..8 {
                    let tr = crate::render::trace_ray(&g, None, &ray_for_pixel(c, x, y), &render.exhaustive());
                    for s in &tr.samples {
                        for &(slot, _) in &s.corners {
                            if slot != crate::grid::EMPTY {
                                touched[slot as usize] = true;
                            }
                        }
                    }
                }
            }
        }
        assert!(touched.iter().any(|t| !t));
        let out = train(&views, g.clone(), None, &cfg, &render).unwrap();
        for (slot, c) in g.coords().iter().enumerate() {
            if !touched[slot] {
                assert!(out.grid.slot_at(*c).is_none(), "unseen voxel {c:?} survived");
            }
        }
    }

    #[test]
    fn training_is_reproducible() {
        let cams = rig(4, 8);
        let g = SparseVoxelGrid::dense([6; 3], Vec3::repeat(-0.5), Vec3::repeat(0.5), 0.5, &[0.0; SH_DIM]).unwrap();
        let views: Vec<TrainingView> = cams
            .iter()
            .enumerate()
            .map(|(i, c)| TrainingView { camera: c.clone(), image: Raster::filled(8, 8, [0.1 * i as f64, 0.5, 0.7]) })
            .collect();
        let cfg = TrainConfig { total_steps: 15, upsample_at: None, prune_at: None, rays_per_batch: 40, rng_seed: 9, ..Default::default() };
        let a = train(&views, g.clone(), None, &cfg, &RenderConfig::default()).unwrap();
        let b = train(&views, g.clone(), None, &cfg, &RenderConfig::default()).unwrap();
        assert_eq!(a.grid, b.grid);
        assert_eq!(a.log, b.log);
        // worker count changes reduction order only
        let multi = TrainConfig { workers: 3, ..cfg.clone() };
        let c = train(&views, g.clone(), None, &multi, &RenderConfig::default()).unwrap();
        let d = train(&views, g, None, &multi, &RenderConfig::default()).unwrap();
        assert_eq!(c.grid, d.grid);
        for (x, y) in a.grid.density().iter().zip(c.grid.density()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let cams = rig(2, 4);
        let g = SparseVoxelGrid::dense([2; 3], Vec3::repeat(-0.5), Vec3::repeat(0.5), 0.5, &[0.0; SH_DIM]).unwrap();
        let one = vec![TrainingView { camera: cams[0].clone(), image: Raster::new(4, 4) }];
        let cfg = TrainConfig { total_steps: 1, upsample_at: None, prune_at: None, ..Default::default() };
        assert!(matches!(train(&one, g.clone(), None, &cfg, &RenderConfig::default()), Err(TrainError::NotEnoughViews(1))));
        let wrong = vec![
            TrainingView { camera: cams[0].clone(), image: Raster::new(4, 4) },
            TrainingView { camera: cams[1].clone(), image: Raster::new(5, 4) },
        ];
        assert!(matches!(train(&wrong, g, None, &cfg, &RenderConfig::default()), Err(TrainError::ImageShape { index: 1, .. })));
    }

    #[test]
    fn slope_of_decreasing_log_is_negative() {
        let log: Vec<LossRecord> = (0..100)
            .map(|i| LossRecord { iteration: i, mse: 1.0 / (1.0 + i as f64), tv: 0.0, sparsity: 0.0, beta: 0.0, psnr_train: 0.0 })
            .collect();
        assert!(loss_trend_slope(&log) < 0.0);
        let mut buf = Vec::new();
        write_loss_log(&log[..2], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iteration,mse,tv,sparsity,beta,psnr_train\n0,"));
    }
}
