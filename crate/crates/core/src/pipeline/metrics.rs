use super::PipelineError;
use crate::raster::Raster;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_shape(a: &Raster, b: &Raster) -> Result<(), PipelineError> {
    if a.same_shape(b).is_err() {
        return Err(PipelineError::DimensionMismatch { left: (a.width, a.height), right: (b.width, b.height) });
    }
    Ok(())
}

/// `10·log10(1/MSE)` over all pixels and channels; identical images give
/// `f64::INFINITY`.
pub fn psnr(rendered: &Raster, target: &Raster) -> Result<f64, PipelineError> {
    check_shape(rendered, target)?;
    let mse = rendered.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        / rendered.data.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable valid-region filtering with the normalized Gaussian window.
fn filter_valid(img: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of the luma channels over all valid 11×11 window positions
/// (Gaussian σ = 1.5, dynamic range 1).
pub fn ssim(rendered: &Raster, target: &Raster) -> Result<f64, PipelineError> {
    check_shape(rendered, target)?;
    let (w, h) = (rendered.width, rendered.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(PipelineError::ImageTooSmall { width: w, height: h, min: SSIM_WINDOW });
    }
    let (a, b) = (rendered.gray(), target.gray());
    let k = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<f64>>();
    let mu_a = filter_valid(&a, w, h, &k);
    let mu_b = filter_valid(&b, w, h, &k);
    let aa = filter_valid(&prod(&a, &a), w, h, &k);
    let bb = filter_valid(&prod(&b, &b), w, h, &k);
    let ab = filter_valid(&prod(&a, &b), w, h, &k);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    Ok(total / mu_a.len() as f64)
}
