//! Float RGB images and their 8-bit PNG encoding.

use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("image I/O failed for {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
}

/// Row-major interleaved RGB image with values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize) -> Self {
        Raster { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut r = Self::new(width, height);
        for px in r.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        r
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut r = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                r.set(x, y, f(x, y));
            }
        }
        r
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &Raster) -> Result<(), RasterError> {
        if self.width != other.width || self.height != other.height {
            return Err(RasterError::DimensionMismatch(self.width, self.height, other.width, other.height));
        }
        Ok(())
    }

    /// Luma (0.299 R + 0.587 G + 0.114 B), same scale as the input.
    pub fn gray(&self) -> Vec<f64> {
        self.data.chunks_exact(3).map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect()
    }

    /// 8-bit quantization: `v·255` rounded half up, clamped.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Self {
        Raster { width, height, data: bytes.iter().map(|&b| b as f64 / 255.0).collect() }
    }

    pub fn load(path: &Path) -> Result<Raster, RasterError> {
        let img = image::open(path)
            .map_err(|source| RasterError::Io { path: path.display().to_string(), source })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Self::from_rgb8(w as usize, h as usize, img.as_raw()))
    }

    /// Writes an 8-bit PNG atomically.
    pub fn save_png(&self, path: &Path) -> Result<(), RasterError> {
        let buf: image::RgbImage =
            image::ImageBuffer::from_raw(self.width as u32, self.height as u32, self.to_rgb8()).expect("buffer size matches");
        write_png(path, &image::DynamicImage::ImageRgb8(buf))
    }
}

/// Reads a 16-bit grayscale depth PNG as raw millimeter counts.
pub fn load_depth_u16(path: &Path) -> Result<(usize, usize, Vec<u16>), RasterError> {
    let img = image::open(path)
        .map_err(|source| RasterError::Io { path: path.display().to_string(), source })?
        .to_luma16();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw()))
}

pub fn save_depth_u16(path: &Path, width: usize, height: usize, mm: &[u16]) -> Result<(), RasterError> {
    let buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
        image::ImageBuffer::from_raw(width as u32, height as u32, mm.to_vec()).expect("buffer size matches");
    write_png(path, &image::DynamicImage::ImageLuma16(buf))
}

fn write_png(path: &Path, img: &image::DynamicImage) -> Result<(), RasterError> {
    let err = |source| RasterError::Io { path: path.display().to_string(), source };
    let mut bytes = std::io::Cursor::new(Vec::new());
    img.write_to(&mut bytes, image::ImageFormat::Png).map_err(err)?;
    crate::atomic::write_atomic(path, bytes.get_ref()).map_err(|e| err(image::ImageError::IoError(e)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb8_rounds_half_up() {
        let r = Raster { width: 2, height: 1, data: vec![0.5, 1.0, 0.0, -0.2, 1.3, 0.5 / 255.0] };
        assert_eq!(r.to_rgb8(), vec![128, 255, 0, 0, 255, 1]);
    }

    #[test]
    fn png_and_depth_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = Raster::from_fn(5, 3, |x, y| [x as f64 / 4.0, y as f64 / 2.0, 0.5]);
        let p = dir.path().join("a.png");
        r.save_png(&p).unwrap();
        let back = Raster::load(&p).unwrap();
        assert_eq!(back.to_rgb8(), r.to_rgb8());

        let mm: Vec<u16> = (0..15).map(|i| i * 1000 + 7).collect();
        let d = dir.path().join("d.png");
        save_depth_u16(&d, 5, 3, &mm).unwrap();
        assert_eq!(load_depth_u16(&d).unwrap(), (5, 3, mm));
    }
}
