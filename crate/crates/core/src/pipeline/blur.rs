use super::PipelineError;
use crate::raster::Raster;

/// Frames scoring below this are rejected as blurry (0–255 luma scale).
pub const BLUR_THRESHOLD: f64 = 10.0;

/// Variance of the 4-neighbor Laplacian response over the valid region of
/// the 0–255 luma image.
pub fn blur_score(image: &Raster) -> Result<f64, PipelineError> {
    let gray: Vec<f64> = image.gray().into_iter().map(|v| v * 255.0).collect();
    blur_score_gray(&gray, image.width, image.height)
}

pub fn blur_score_gray(gray: &[f64], width: usize, height: usize) -> Result<f64, PipelineError> {
    if width < 3 || height < 3 {
        return Err(PipelineError::ImageTooSmall { width, height, min: 3 });
    }
    let at = |x: usize, y: usize| gray[y * width + x];
    let n = ((width - 2) * (height - 2)) as f64;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for y in 1..height - 1 {
        for x in 1..width - 1 {
            let l = at(x - 1, y) + at(x + 1, y) + at(x, y - 1) + at(x, y + 1) - 4.0 * at(x, y);
            sum += l;
            sum_sq += l * l;
        }
    }
    let mean = sum / n;
    Ok((sum_sq / n - mean * mean).max(0.0))
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(image: &Raster, sigma: f64) -> Raster {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let (w, h) = (image.width as isize, image.height as isize);
    let pass = |src: &Raster, horizontal: bool| {
        Raster::from_fn(src.width, src.height, |x, y| {
            let mut acc = [0.0; 3];
            for (j, kv) in k.iter().enumerate() {
                let o = j as isize - r;
                let (sx, sy) = if horizontal {
                    ((x as isize + o).clamp(0, w - 1), y as isize)
                } else {
                    (x as isize, (y as isize + o).clamp(0, h - 1))
                };
                let p = src.get(sx as usize, sy as usize);
                for c in 0..3 {
                    acc[c] += kv * p[c];
                }
            }
            acc
        })
    };
    pass(&pass(image, true), false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_scores_zero() {
        assert_eq!(blur_score(&Raster::filled(8, 6, [0.3, 0.6, 0.1])).unwrap(), 0.0);
        assert!(blur_score(&Raster::new(2, 9)).is_err());
    }

    #[test]
    fn checkerboard_matches_direct_loop() {
        let (w, h) = (9, 7);
        let img = Raster::from_fn(w, h, |x, y| [((x + y) % 2) as f64; 3]);
        let g: Vec<f64> = (0..w * h).map(|i| (((i % w) + (i / w)) % 2) as f64 * 255.0).collect();
        let mut resp = Vec::new();
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let c = g[y * w + x];
                resp.push(g[y * w + x - 1] + g[y * w + x + 1] + g[(y - 1) * w + x] + g[(y + 1) * w + x] - 4.0 * c);
            }
        }
        let mean = resp.iter().sum::<f64>() / resp.len() as f64;
        let var = resp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / resp.len() as f64;
        assert!((blur_score(&img).unwrap() - var).abs() < 1e-9 * var.max(1.0));
    }

    #[test]
    fn blurring_lowers_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let img = Raster::from_fn(24, 24, |_, _| {
                let v = rng.gen::<f64>();
                [v, (v + rng.gen::<f64>() * 0.2).min(1.0), v * 0.8]
            });
            assert!(blur_score(&img).unwrap() > blur_score(&gaussian_blur(&img, 2.0)).unwrap());
        }
    }
}
