//! Central finite-difference verification of the analytic loss gradient.

use super::grad::{loss_and_grad_into, GradientBuffer, RegSelection};
use super::regularizers::{BETA_CLAMP, TV_EPS};
use super::{TrainConfig, TrainError};
use crate::geometry::{look_at, Camera, Ray, Vec3};
use crate::grid::{BackgroundModel, SparseVoxelGrid, SH_COEFFS, SH_DIM, TEXEL_CHANNELS};
use crate::render::{ray_for_pixel, render_ray_oracle, RenderConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    Density(usize),
    Sh(usize),
    Background(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamCheck {
    pub param: Param,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Parameter classes compared as whole gradient vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamClass {
    Density,
    /// SH band 0, 1 or 2, all color channels.
    ShBand(u8),
    BackgroundColor,
    BackgroundDensity,
}

impl ParamClass {
    pub fn of(param: Param) -> Self {
        match param {
            Param::Density(_) => ParamClass::Density,
            Param::Sh(i) => ParamClass::ShBand(match i % SH_COEFFS {
                0 => 0,
                1..=3 => 1,
                _ => 2,
            }),
            Param::Background(i) if i % TEXEL_CHANNELS == 3 => ParamClass::BackgroundDensity,
            Param::Background(_) => ParamClass::BackgroundColor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassCheck {
    pub class: ParamClass,
    pub count: usize,
    /// `‖a − n‖ / max(‖a‖, ‖n‖)` over the class.
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Component with the largest [`relative_error`].
    pub worst: Option<ParamCheck>,
    pub classes: Vec<ClassCheck>,
}

impl GradCheckReport {
    /// Largest per-class relative error.
    pub fn max_rel_error(&self) -> f64 {
        self.classes.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    /// Largest per-component relative error. Ill-conditioned where
    /// contributions to one component nearly cancel.
    pub fn max_component_error(&self) -> f64 {
        self.worst.map_or(0.0, |w| w.rel_error)
    }
}

/// `|a − n| / max(|a|, |n|)`, falling back to the absolute difference when
/// both are below `1e-9`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-9 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Every additive term of the full loss, evaluated independently of the
/// training code: per-ray squared error and beta terms, then per-voxel and
/// per-texel TV and sparsity terms. Differencing term by term makes terms a
/// perturbation does not touch cancel exactly.
pub fn loss_terms(
    grid: &SparseVoxelGrid,
    bg: Option<&BackgroundModel>,
    batch: &[(Ray, [f64; 3])],
    cfg: &TrainConfig,
    render: &RenderConfig,
) -> Vec<f64> {
    let n = batch.len() as f64;
    let mut terms = Vec::new();
    for (ray, target) in batch {
        let out = render_ray_oracle(grid, bg, ray, render);
        for c in 0..3 {
            terms.push((out.rgb[c] - target[c]).powi(2) / (3.0 * n));
        }
        if cfg.lambda_beta != 0.0 {
            let t = out.transmittance.clamp(BETA_CLAMP, 1.0 - BETA_CLAMP);
            terms.push(cfg.lambda_beta * (t.ln() + (1.0 - t).ln()) / n);
        }
    }
    let tv = |values: &[f64], own: usize, nbrs: &[Option<usize>]| {
        let sq: f64 = nbrs.iter().flatten().map(|&q| (values[q] - values[own]).powi(2)).sum();
        (sq + TV_EPS).sqrt()
    };
    if !render.skip_foreground {
        let (density, sh) = (grid.density(), grid.sh());
        for slot in 0..grid.len() {
            let c = grid.coords()[slot];
            let nbrs = [
                grid.slot_at([c[0] + 1, c[1], c[2]]),
                grid.slot_at([c[0], c[1] + 1, c[2]]),
                grid.slot_at([c[0], c[1], c[2] + 1]),
            ];
            terms.push(cfg.lambda_tv_density * tv(density, slot, &nbrs));
            for k in 0..SH_DIM {
                let idx = nbrs.map(|q| q.map(|q| q * SH_DIM + k));
                terms.push(cfg.lambda_tv_sh * tv(sh, slot * SH_DIM + k, &idx));
            }
            terms.push(cfg.lambda_sparsity * (1.0 + 2.0 * density[slot].powi(2)).ln());
        }
    }
    if let (Some(model), true) = (bg, render.use_background) {
        let (layers, h, w) = (model.n_layers(), model.layer_resolution(), model.width());
        for layer in 0..layers {
            for row in 0..h {
                for col in 0..w {
                    let own = model.texel_index(layer, row, col);
                    let nbrs = [
                        Some(model.texel_index(layer, row, (col + 1) % w)),
                        (row + 1 < h).then(|| model.texel_index(layer, row + 1, col)),
                        (layer + 1 < layers).then(|| model.texel_index(layer + 1, row, col)),
                    ];
                    for ch in 0..TEXEL_CHANNELS {
                        let lambda = if ch < 3 { cfg.lambda_tv_bg_color } else { cfg.lambda_tv_bg_density };
                        terms.push(lambda * tv(model.texels(), own + ch, &nbrs.map(|q| q.map(|q| q + ch))));
                    }
                }
            }
        }
    }
    terms
}

fn central_difference(plus: &[f64], minus: &[f64], h: f64) -> f64 {
    plus.iter().zip(minus).map(|(p, m)| p - m).sum::<f64>() / (2.0 * h)
}

/// Compares the analytic gradient of the full loss (all regularizers over
/// every voxel and texel) against central differences with step `h`, for
/// every grid and background parameter.
pub fn check_gradients(
    grid: &SparseVoxelGrid,
    bg: Option<&BackgroundModel>,
    batch: &[(Ray, [f64; 3])],
    cfg: &TrainConfig,
    render: &RenderConfig,
    h: f64,
) -> Result<GradCheckReport, TrainError> {
    let mut analytic = GradientBuffer::for_scene(grid, bg);
    let loss = loss_and_grad_into(grid, bg, batch, cfg, render, &RegSelection::all(), &mut analytic)?;
    let reference: f64 = loss_terms(grid, bg, batch, cfg, render).iter().sum();
    if (reference - loss.total()).abs() > 1e-9 * loss.total().abs().max(1.0) {
        return Err(TrainError::Config(format!(
            "term-wise loss {reference} disagrees with the training loss {}",
            loss.total()
        )));
    }
    let mut g = grid.clone();
    let mut b = bg.cloned();
    let mut report = GradCheckReport::default();

    let mut sums: std::collections::BTreeMap<ParamClass, (usize, f64, f64, f64)> = Default::default();
    let mut record = |param: Param, a: f64, numeric: f64| {
        let e = sums.entry(ParamClass::of(param)).or_default();
        *e = (e.0 + 1, e.1 + (a - numeric).powi(2), e.2 + a * a, e.3 + numeric * numeric);
        let rel_error = relative_error(a, numeric);
        report.checked += 1;
        if report.worst.map_or(true, |w| rel_error > w.rel_error) {
            report.worst = Some(ParamCheck { param, analytic: a, numeric, rel_error });
        }
    };

    for i in 0..g.len() {
        let orig = g.density()[i];
        g.density_mut()[i] = orig + h;
        let plus = loss_terms(&g, b.as_ref(), batch, cfg, render);
        g.density_mut()[i] = orig - h;
        let minus = loss_terms(&g, b.as_ref(), batch, cfg, render);
        g.density_mut()[i] = orig;
        record(Param::Density(i), analytic.d_density[i], central_difference(&plus, &minus, h));
    }
    for i in 0..g.sh().len() {
        let orig = g.sh()[i];
        g.sh_mut()[i] = orig + h;
        let plus = loss_terms(&g, b.as_ref(), batch, cfg, render);
        g.sh_mut()[i] = orig - h;
        let minus = loss_terms(&g, b.as_ref(), batch, cfg, render);
        g.sh_mut()[i] = orig;
        record(Param::Sh(i), analytic.d_sh[i], central_difference(&plus, &minus, h));
    }
    if let Some(model) = b.as_mut() {
        for i in 0..model.texels().len() {
            let orig = model.texels()[i];
            model.texels_mut()[i] = orig + h;
            let plus = loss_terms(&g, Some(model), batch, cfg, render);
            model.texels_mut()[i] = orig - h;
            let minus = loss_terms(&g, Some(model), batch, cfg, render);
            model.texels_mut()[i] = orig;
            record(Param::Background(i), analytic.d_bg[i], central_difference(&plus, &minus, h));
        }
    }
    report.classes = sums
        .into_iter()
        .map(|(class, (count, diff, a, n))| {
            let scale = a.max(n).sqrt();
            ClassCheck { class, count, rel_error: if scale == 0.0 { 0.0 } else { diff.sqrt() / scale } }
        })
        .collect();
    Ok(report)
}

/// Random grid with positive densities plus 16 rays from a 4×4 camera
/// looking at it, for gradient checks. Every TV term is kept at least
/// `0.05` away from the `√ε` kink so central differences stay valid.
pub fn random_fixture(n: usize, seed: u64) -> (SparseVoxelGrid, Vec<(Ray, [f64; 3])>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = SparseVoxelGrid::new([n; 3], Vec3::repeat(-0.5), Vec3::repeat(0.5)).expect("valid fixture grid");
    for x in 0..n as u32 {
        for y in 0..n as u32 {
            for z in 0..n as u32 {
                if rng.gen::<f64>() < 0.8 {
                    let sh: Vec<f64> = (0..SH_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    g.insert([x, y, z], rng.gen_range(0.5..4.0), &sh).expect("fresh cell");
                }
            }
        }
    }
    separate_tv_terms(&mut g);
    let eye = Vec3::new(1.5, 1.2, 0.9);
    let cam = Camera::new(6.0, 6.0, 2.0, 2.0, look_at(&eye, &Vec3::zeros(), &Vec3::z()), eye, 4, 4)
        .expect("valid fixture camera");
    let batch = (0..16).map(|i| (ray_for_pixel(&cam, i % 4, i / 4), [rng.gen(), rng.gen(), rng.gen()])).collect();
    (g, batch)
}

fn separate_tv_terms(g: &mut SparseVoxelGrid) {
    const MIN_NORM: f64 = 0.05;
    for _ in 0..100 {
        let mut changed = false;
        for slot in 0..g.len() {
            let c = g.coords()[slot];
            let nbrs: Vec<usize> = [[c[0] + 1, c[1], c[2]], [c[0], c[1] + 1, c[2]], [c[0], c[1], c[2] + 1]]
                .iter()
                .filter_map(|&q| g.slot_at(q))
                .collect();
            if nbrs.is_empty() {
                continue;
            }
            let norm = |vals: &[f64], stride: usize, k: usize| {
                nbrs.iter().map(|&n| (vals[n * stride + k] - vals[slot * stride + k]).powi(2)).sum::<f64>().sqrt()
            };
            if norm(g.density(), 1, 0) < MIN_NORM {
                g.density_mut()[slot] += 0.2;
                changed = true;
            }
            for k in 0..SH_DIM {
                if norm(g.sh(), SH_DIM, k) < MIN_NORM {
                    g.sh_mut()[slot * SH_DIM + k] += 0.2;
                    changed = true;
                }
            }
        }
        if !changed {
            return;
        }
    }
}
