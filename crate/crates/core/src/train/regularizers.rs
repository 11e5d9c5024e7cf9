//! TV, sparsity and beta regularizers with their gradients.

use super::grad::{GradientBuffer, SlotSet};
use crate::grid::{BackgroundModel, SparseVoxelGrid, SH_DIM, TEXEL_CHANNELS};

pub const TV_EPS: f64 = 1e-12;
pub const BETA_CLAMP: f64 = 1e-6;

/// Forward-difference TV on the grid, summed over the selected voxels:
/// `λ_σ·Σ √(Δx² + Δy² + Δz² + ε)` on density plus the same per SH
/// coefficient weighted by `λ_sh`. Differences toward empty neighbors are
/// dropped. Returns the weighted value; gradients go into `grad` if given.
pub fn tv_loss(
    grid: &SparseVoxelGrid,
    slots: &SlotSet,
    lambda_density: f64,
    lambda_sh: f64,
    mut grad: Option<&mut GradientBuffer>,
) -> f64 {
    if lambda_density == 0.0 && lambda_sh == 0.0 {
        return 0.0;
    }
    let density = grid.density();
    let sh = grid.sh();
    let mut total = 0.0;
    slots.for_each(grid.len(), |slot| {
        let c = grid.coords()[slot];
        let neighbors = [
            grid.slot_at([c[0] + 1, c[1], c[2]]),
            grid.slot_at([c[0], c[1] + 1, c[2]]),
            grid.slot_at([c[0], c[1], c[2] + 1]),
        ];
        if lambda_density != 0.0 {
            let mut d = [0.0; 3];
            for (a, n) in neighbors.iter().enumerate() {
                if let Some(n) = n {
                    d[a] = density[*n] - density[slot];
                }
            }
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2] + TV_EPS).sqrt();
            total += lambda_density * norm;
            if let Some(g) = grad.as_deref_mut() {
                let scale = lambda_density / norm;
                g.touch_slot(slot);
                for (a, n) in neighbors.iter().enumerate() {
                    if let Some(n) = n {
                        g.touch_slot(*n);
                        g.d_density[*n] += scale * d[a];
                        g.d_density[slot] -= scale * d[a];
                    }
                }
            }
        }
        if lambda_sh != 0.0 {
            for k in 0..SH_DIM {
                let own = sh[slot * SH_DIM + k];
                let mut d = [0.0; 3];
                for (a, n) in neighbors.iter().enumerate() {
                    if let Some(n) = n {
                        d[a] = sh[n * SH_DIM + k] - own;
                    }
                }
                let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2] + TV_EPS).sqrt();
                total += lambda_sh * norm;
                if let Some(g) = grad.as_deref_mut() {
                    let scale = lambda_sh / norm;
                    g.touch_slot(slot);
                    for (a, n) in neighbors.iter().enumerate() {
                        if let Some(n) = n {
                            g.touch_slot(*n);
                            g.d_sh[n * SH_DIM + k] += scale * d[a];
                            g.d_sh[slot * SH_DIM + k] -= scale * d[a];
                        }
                    }
                }
            }
        }
    });
    total
}

/// TV over background texels: neighbors along longitude (wrapping),
/// latitude and layer, per channel. Color channels use `lambda_color`,
/// density uses `lambda_density`.
pub fn bg_tv_loss(
    bg: &BackgroundModel,
    texels: &SlotSet,
    lambda_color: f64,
    lambda_density: f64,
    mut grad: Option<&mut GradientBuffer>,
) -> f64 {
    if lambda_color == 0.0 && lambda_density == 0.0 {
        return 0.0;
    }
    let (layers, h, w) = (bg.n_layers(), bg.layer_resolution(), bg.width());
    let values = bg.texels();
    let mut total = 0.0;
    texels.for_each(bg.texel_count(), |t| {
        let col = t % w;
        let row = (t / w) % h;
        let layer = t / (w * h);
        let own = bg.texel_index(layer, row, col);
        let neighbors = [
            Some(bg.texel_index(layer, row, (col + 1) % w)),
            (row + 1 < h).then(|| bg.texel_index(layer, row + 1, col)),
            (layer + 1 < layers).then(|| bg.texel_index(layer + 1, row, col)),
        ];
        for ch in 0..TEXEL_CHANNELS {
            let lambda = if ch < 3 { lambda_color } else { lambda_density };
            if lambda == 0.0 {
                continue;
            }
            let mut d = [0.0; 3];
            for (a, n) in neighbors.iter().enumerate() {
                if let Some(n) = n {
                    d[a] = values[n + ch] - values[own + ch];
                }
            }
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2] + TV_EPS).sqrt();
            total += lambda * norm;
            if let Some(g) = grad.as_deref_mut() {
                let scale = lambda / norm;
                g.touch_texel(own);
                for (a, n) in neighbors.iter().enumerate() {
                    if let Some(n) = n {
                        g.touch_texel(*n);
                        g.d_bg[n + ch] += scale * d[a];
                        g.d_bg[own + ch] -= scale * d[a];
                    }
                }
            }
        }
    });
    total
}

/// Cauchy sparsity penalty `λ·Σ log(1 + 2σ²)` over the selected voxels'
/// stored densities.
pub fn sparsity_loss(grid: &SparseVoxelGrid, slots: &SlotSet, lambda: f64, mut grad: Option<&mut GradientBuffer>) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let density = grid.density();
    let mut total = 0.0;
    slots.for_each(grid.len(), |slot| {
        let s = density[slot];
        total += lambda * (1.0 + 2.0 * s * s).ln();
        if let Some(g) = grad.as_deref_mut() {
            g.touch_slot(slot);
            g.d_density[slot] += lambda * 4.0 * s / (1.0 + 2.0 * s * s);
        }
    });
    total
}

/// `λ·mean(log T + log(1 − T))` over final transmittances clamped to
/// `[1e-6, 1 − 1e-6]`. Largest at `T = 0.5`; minimizing it pushes rays
/// toward fully opaque or fully clear. Returns the value and `∂L/∂T` per
/// entry (zero where the clamp is active).
pub fn beta_loss(transmittances: &[f64], lambda: f64) -> (f64, Vec<f64>) {
    if transmittances.is_empty() || lambda == 0.0 {
        return (0.0, vec![0.0; transmittances.len()]);
    }
    let n = transmittances.len() as f64;
    let mut value = 0.0;
    let grads = transmittances
        .iter()
        .map(|&t| {
            let tc = t.clamp(BETA_CLAMP, 1.0 - BETA_CLAMP);
            value += tc.ln() + (1.0 - tc).ln();
            if t > BETA_CLAMP && t < 1.0 - BETA_CLAMP {
                lambda / n * (1.0 / tc - 1.0 / (1.0 - tc))
            } else {
                0.0
            }
        })
        .collect();
    (lambda * value / n, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(seed: u64) -> SparseVoxelGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = SparseVoxelGrid::new([4; 3], Vec3::zeros(), Vec3::repeat(1.0)).unwrap();
        for x in 0..4 {
            for y in 0..4 {
                for z in 0..4 {
                    if rng.gen::<f64>() < 0.7 {
                        let sh: Vec<f64> = (0..SH_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
                        g.insert([x, y, z], rng.gen_range(-2.0..3.0), &sh).unwrap();
                    }
                }
            }
        }
        g
    }

    fn rel_err(a: f64, n: f64) -> f64 {
        let scale = a.abs().max(n.abs());
        if scale < 1e-9 {
            (a - n).abs()
        } else {
            (a - n).abs() / scale
        }
    }

    #[test]
    fn constant_grid_has_epsilon_tv() {
        let g = SparseVoxelGrid::dense([3; 3], Vec3::zeros(), Vec3::repeat(1.0), 2.0, &[0.3; SH_DIM]).unwrap();
        let tv = tv_loss(&g, &SlotSet::All, 1.0, 1.0, None);
        assert!(tv <= TV_EPS.sqrt() * 28.0 * 27.0 + 1e-15);
    }

    #[test]
    fn unit_step_density_tv() {
        let mut g = SparseVoxelGrid::new([3; 3], Vec3::zeros(), Vec3::repeat(1.0)).unwrap();
        g.insert([0, 0, 0], 0.0, &[0.0; SH_DIM]).unwrap();
        g.insert([1, 0, 0], 1.0, &[0.0; SH_DIM]).unwrap();
        let lambda = 5e-5;
        let tv = tv_loss(&g, &SlotSet::All, lambda, 0.0, None);
        assert!((tv - lambda).abs() <= lambda * 2.0 * TV_EPS.sqrt() + 1e-18);
    }

    #[test]
    fn tv_gradient_matches_finite_difference() {
        let g = random_grid(1);
        let mut buf = GradientBuffer::for_scene(&g, None);
        tv_loss(&g, &SlotSet::All, 0.7, 0.3, Some(&mut buf));
        let h = 1e-4;
        for slot in [0, 5, g.len() / 2, g.len() - 1] {
            let mut p = g.clone();
            p.density_mut()[slot] += h;
            let up = tv_loss(&p, &SlotSet::All, 0.7, 0.3, None);
            p.density_mut()[slot] -= 2.0 * h;
            let down = tv_loss(&p, &SlotSet::All, 0.7, 0.3, None);
            assert!(rel_err(buf.d_density[slot], (up - down) / (2.0 * h)) < 1e-4);
            let k = slot * SH_DIM + 13;
            let mut p = g.clone();
            p.sh_mut()[k] += h;
            let up = tv_loss(&p, &SlotSet::All, 0.7, 0.3, None);
            p.sh_mut()[k] -= 2.0 * h;
            let down = tv_loss(&p, &SlotSet::All, 0.7, 0.3, None);
            assert!(rel_err(buf.d_sh[k], (up - down) / (2.0 * h)) < 1e-4);
        }
    }

    #[test]
    fn bg_tv_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut bg = BackgroundModel::new(3, 4, 0.5, Vec3::zeros(), 1.0).unwrap();
        for v in bg.texels_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let mut buf = GradientBuffer::new(0, bg.texels().len());
        bg_tv_loss(&bg, &SlotSet::All, 0.4, 0.9, Some(&mut buf));
        let h = 1e-4;
        for i in [0, 3, 17, 50, bg.texels().len() - 1] {
            let mut p = bg.clone();
            p.texels_mut()[i] += h;
            let up = bg_tv_loss(&p, &SlotSet::All, 0.4, 0.9, None);
            p.texels_mut()[i] -= 2.0 * h;
            let down = bg_tv_loss(&p, &SlotSet::All, 0.4, 0.9, None);
            assert!(rel_err(buf.d_bg[i], (up - down) / (2.0 * h)) < 1e-4);
        }
    }

    #[test]
    fn sparsity_cases() {
        let g = SparseVoxelGrid::dense([2; 3], Vec3::zeros(), Vec3::repeat(1.0), 0.0, &[0.0; SH_DIM]).unwrap();
        assert_eq!(sparsity_loss(&g, &SlotSet::All, 1e-10, None), 0.0);
        let mut one = SparseVoxelGrid::new([2; 3], Vec3::zeros(), Vec3::repeat(1.0)).unwrap();
        one.insert([0, 0, 0], 1.0, &[0.0; SH_DIM]).unwrap();
        let lambda = 1e-10;
        assert!((sparsity_loss(&one, &SlotSet::All, lambda, None) - lambda * 3f64.ln()).abs() < 1e-24);
        let mut neg = one.clone();
        neg.density_mut()[0] = -1.0;
        assert_eq!(sparsity_loss(&neg, &SlotSet::All, lambda, None), sparsity_loss(&one, &SlotSet::All, lambda, None));
    }

    #[test]
    fn sparsity_gradient_matches_finite_difference() {
        let g = random_grid(3);
        let mut buf = GradientBuffer::for_scene(&g, None);
        sparsity_loss(&g, &SlotSet::All, 0.5, Some(&mut buf));
        let h = 1e-4;
        for slot in 0..g.len() {
            let mut p = g.clone();
            p.density_mut()[slot] += h;
            let up = sparsity_loss(&p, &SlotSet::All, 0.5, None);
            p.density_mut()[slot] -= 2.0 * h;
            let down = sparsity_loss(&p, &SlotSet::All, 0.5, None);
            assert!(rel_err(buf.d_density[slot], (up - down) / (2.0 * h)) < 1e-4);
        }
    }

    #[test]
    fn beta_extremum_and_symmetry() {
        let (mid, _) = beta_loss(&[0.5, 0.5], 1.0);
        for t in [0.01, 0.2, 0.4, 0.6, 0.99, 1e-6, 1.0 - 1e-6] {
            assert!(beta_loss(&[t, t], 1.0).0 < mid);
        }
        let (a, _) = beta_loss(&[1e-6], 1e-5);
        let (b, _) = beta_loss(&[1.0 - 1e-6], 1e-5);
        assert!((a - b).abs() < 1e-15);
        let (_, g) = beta_loss(&[0.5], 1.0);
        assert!(g[0].abs() < 1e-12);
    }

    #[test]
    fn beta_gradient_matches_finite_difference() {
        let ts = [0.1, 0.35, 0.5, 0.8, 0.97];
        let (_, g) = beta_loss(&ts, 0.3);
        let h = 1e-6;
        for i in 0..ts.len() {
            let mut up = ts;
            up[i] += h;
            let mut down = ts;
            down[i] -= h;
            let n = (beta_loss(&up, 0.3).0 - beta_loss(&down, 0.3).0) / (2.0 * h);
            assert!(rel_err(g[i], n) < 1e-4, "{i}: {} vs {n}", g[i]);
        }
    }
}
