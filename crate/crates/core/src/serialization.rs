//! Compact scene container: f32 densities, per-channel u8-quantized SH,
//! optional background, little-endian with a trailing CRC-32.
//!
//! Layout:
//!
//! | field | type |
//! |---|---|
//! | magic `PRFX` | 4 bytes |
//! | version | u32 |
//! | resolution | u32 × 3 |
//! | bounds (min xyz, max xyz) | f32 × 6 |
//! | voxel count N | u64 |
//! | has background | u8 |
//! | SH quantization (scale, offset) | f32 × 2 × 27 |
//! | coords | u16 × 3 × N |
//! | densities | f32 × N |
//! | SH codes | u8 × 27 × N |
//! | background block | optional |
//! | CRC-32 of everything above | u32 |
//!
//! Background block: u32 layer count L, u32 layer resolution H, f32 × 3
//! center, f32 × L radii, f32 brightness, f32 × 2 × 3 RGB quantization,
//! u8 × 3 RGB codes then f32 density per texel (L·H·2H texels).

use crate::geometry::Vec3;
use crate::grid::{BackgroundModel, GridError, SparseVoxelGrid, SH_DIM, TEXEL_CHANNELS};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"PRFX";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 4 + 4 + 12 + 24 + 8 + 1 + SH_DIM * 8;
pub const BYTES_PER_VOXEL: usize = 6 + 4 + SH_DIM;
/// Dense float32 baseline: density plus 27 SH values per cell.
pub const DENSE_BYTES_PER_CELL: usize = (SH_DIM + 1) * 4;
const CRC_BYTES: usize = 4;

#[derive(Debug, Error)]
pub enum SerializationError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad magic {0:?}, not a scene file")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0} (expected {VERSION})")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("file length {actual} does not match the {expected} bytes its header implies")]
    Length { expected: usize, actual: usize },
    #[error("inconsistent scene: {0}")]
    Inconsistent(String),
    #[error("resolution {0:?} does not fit 16-bit coordinates")]
    ResolutionTooLarge([usize; 3]),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Affine u8 code: `value ≈ offset + scale·q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f32,
    pub offset: f32,
}

impl QuantParams {
    /// Parameters covering `[min, max]`: the offset is the largest f32 not
    /// above `min`, the scale the smallest f32 step reaching `max` in 255
    /// codes. A degenerate range gets scale 1.
    pub fn fit(min: f64, max: f64) -> Self {
        let mut offset = min as f32;
        if offset as f64 > min {
            offset = next_down(offset);
        }
        if max <= min {
            return QuantParams { scale: 1.0, offset };
        }
        let mut scale = ((max - offset as f64) / 255.0) as f32;
        while (offset as f64 + 255.0 * scale as f64) < max {
            scale = next_up(scale);
        }
        if scale == 0.0 {
            scale = 1.0;
        }
        QuantParams { scale, offset }
    }

    pub fn encode(&self, v: f64) -> u8 {
        ((v - self.offset as f64) / self.scale as f64).round().clamp(0.0, 255.0) as u8
    }

    pub fn decode(&self, q: u8) -> f64 {
        self.offset as f64 + self.scale as f64 * q as f64
    }
}

fn next_up(x: f32) -> f32 {
    if x == 0.0 {
        return f32::from_bits(1);
    }
    f32::from_bits(if x > 0.0 { x.to_bits() + 1 } else { x.to_bits() - 1 })
}

fn next_down(x: f32) -> f32 {
    -next_up(-x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBackground {
    pub layer_resolution: u32,
    pub center: [f32; 3],
    pub radii: Vec<f32>,
    pub brightness: f32,
    pub rgb_params: [QuantParams; 3],
    pub rgb_q: Vec<u8>,
    pub density: Vec<f32>,
}

impl QuantizedBackground {
    fn texel_count(&self) -> usize {
        let h = self.layer_resolution as usize;
        self.radii.len() * h * 2 * h
    }

    fn byte_len(&self) -> usize {
        4 + 4 + 12 + 4 * self.radii.len() + 4 + 24 + self.texel_count() * (3 + 4)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedScene {
    pub resolution: [u32; 3],
    pub bounds_min: [f32; 3],
    pub bounds_max: [f32; 3],
    /// Lexicographically sorted, unique.
    pub coords: Vec<[u16; 3]>,
    pub density: Vec<f32>,
    pub sh_params: [QuantParams; SH_DIM],
    /// 27 codes per voxel.
    pub sh_q: Vec<u8>,
    pub background: Option<QuantizedBackground>,
}

/// Quantizes a trained scene. Voxels are reordered by coordinate.
pub fn quantize(grid: &SparseVoxelGrid, bg: Option<&BackgroundModel>) -> Result<QuantizedScene, SerializationError> {
    let res = grid.resolution();
    if res.iter().any(|&r| r > u16::MAX as usize + 1) {
        return Err(SerializationError::ResolutionTooLarge(res));
    }
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_unstable_by_key(|&s| grid.coords()[s]);

    let mut sh_params = [QuantParams { scale: 1.0, offset: 0.0 }; SH_DIM];
    for (k, p) in sh_params.iter_mut().enumerate() {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for s in 0..grid.len() {
            let v = grid.sh()[s * SH_DIM + k];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if grid.len() > 0 {
            *p = QuantParams::fit(lo, hi);
        }
    }
    let mut coords = Vec::with_capacity(grid.len());
    let mut density = Vec::with_capacity(grid.len());
    let mut sh_q = Vec::with_capacity(grid.len() * SH_DIM);
    for &s in &order {
        let c = grid.coords()[s];
        coords.push([c[0] as u16, c[1] as u16, c[2] as u16]);
        density.push(grid.density()[s] as f32);
        for k in 0..SH_DIM {
            sh_q.push(sh_params[k].encode(grid.sh()[s * SH_DIM + k]));
        }
    }
    let wmin = grid.world_min();
    let wmax = grid.world_max();
    Ok(QuantizedScene {
        resolution: [res[0] as u32, res[1] as u32, res[2] as u32],
        bounds_min: [wmin.x as f32, wmin.y as f32, wmin.z as f32],
        bounds_max: [wmax.x as f32, wmax.y as f32, wmax.z as f32],
        coords,
        density,
        sh_params,
        sh_q,
        background: bg.map(quantize_background),
    })
}

fn quantize_background(bg: &BackgroundModel) -> QuantizedBackground {
    let texels = bg.texels();
    let n = bg.texel_count();
    let mut rgb_params = [QuantParams { scale: 1.0, offset: 0.0 }; 3];
    for (c, p) in rgb_params.iter_mut().enumerate() {
        let vals = (0..n).map(|t| texels[t * TEXEL_CHANNELS + c].clamp(0.0, 1.0));
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if n > 0 {
            *p = QuantParams::fit(lo, hi);
        }
    }
    let mut rgb_q = Vec::with_capacity(n * 3);
    let mut density = Vec::with_capacity(n);
    for t in 0..n {
        for c in 0..3 {
            rgb_q.push(rgb_params[c].encode(texels[t * TEXEL_CHANNELS + c].clamp(0.0, 1.0)));
        }
        density.push(texels[t * TEXEL_CHANNELS + 3] as f32);
    }
    let c = bg.center();
    QuantizedBackground {
        layer_resolution: bg.layer_resolution() as u32,
        center: [c.x as f32, c.y as f32, c.z as f32],
        radii: bg.radii().iter().map(|&r| r as f32).collect(),
        brightness: bg.brightness as f32,
        rgb_params,
        rgb_q,
        density,
    }
}

/// Byte counts per section of the encoded file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StorageReport {
    pub header: usize,
    pub coords: usize,
    pub densities: usize,
    pub sh: usize,
    pub background: usize,
    pub checksum: usize,
    pub total: usize,
    /// Unquantized dense float32 grid of the same resolution.
    pub dense_baseline: usize,
    /// `total / dense_baseline`.
    pub ratio: f64,
}

impl QuantizedScene {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn voxel_sh_codes(&self, i: usize) -> &[u8] {
        &self.sh_q[i * SH_DIM..(i + 1) * SH_DIM]
    }

    /// Index of a voxel by binary search over the sorted coordinates.
    pub fn lookup(&self, coord: [u16; 3]) -> Option<usize> {
        self.coords.binary_search(&coord).ok()
    }

    pub fn dequantized_sh(&self, i: usize) -> [f64; SH_DIM] {
        let mut out = [0.0; SH_DIM];
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.sh_params[k].decode(self.sh_q[i * SH_DIM + k]);
        }
        out
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<(), SerializationError> {
        let bad = |m: String| Err(SerializationError::Inconsistent(m));
        let n = self.coords.len();
        if self.density.len() != n || self.sh_q.len() != n * SH_DIM {
            return bad(format!("{n} coords but {} densities and {} SH codes", self.density.len(), self.sh_q.len()));
        }
        if self.resolution.iter().any(|&r| r == 0 || r as usize > crate::grid::MAX_RESOLUTION) {
            return bad(format!("resolution {:?} out of range", self.resolution));
        }
        if !(0..3).all(|i| self.bounds_min[i].is_finite() && self.bounds_max[i].is_finite() && self.bounds_min[i] < self.bounds_max[i]) {
            return bad("world bounds are empty or non-finite".into());
        }
        for (i, c) in self.coords.iter().enumerate() {
            if (0..3).any(|a| c[a] as u32 >= self.resolution[a]) {
                return bad(format!("coord {c:?} outside resolution {:?}", self.resolution));
            }
            if i > 0 && self.coords[i - 1] >= *c {
                return bad(format!("coords not strictly sorted at index {i}"));
            }
        }
        if self.sh_params.iter().any(|p| !(p.scale > 0.0 && p.scale.is_finite() && p.offset.is_finite())) {
            return bad("SH quantization parameters must be finite with positive scale".into());
        }
        if let Some(b) = &self.background {
            let t = b.texel_count();
            if b.radii.is_empty() || b.layer_resolution == 0 {
                return bad("background needs at least one layer of positive resolution".into());
            }
            if b.rgb_q.len() != 3 * t || b.density.len() != t {
                return bad("background texel arrays do not match its shape".into());
            }
        }
        Ok(())
    }

    /// Rebuilds the grid and background from the stored codes.
    pub fn dequantize(&self) -> Result<(SparseVoxelGrid, Option<BackgroundModel>), SerializationError> {
        self.validate()?;
        let res = self.resolution.map(|r| r as usize);
        let lo = Vec3::from(self.bounds_min.map(f64::from));
        let hi = Vec3::from(self.bounds_max.map(f64::from));
        let mut grid = SparseVoxelGrid::new(res, lo, hi)?;
        for i in 0..self.len() {
            let c = self.coords[i];
            grid.insert([c[0] as u32, c[1] as u32, c[2] as u32], self.density[i] as f64, &self.dequantized_sh(i))?;
        }
        let bg = match &self.background {
            None => None,
            Some(b) => {
                let mut texels = Vec::with_capacity(b.texel_count() * TEXEL_CHANNELS);
                for t in 0..b.texel_count() {
                    for c in 0..3 {
                        texels.push(b.rgb_params[c].decode(b.rgb_q[t * 3 + c]));
                    }
                    texels.push(b.density[t] as f64);
                }
                Some(BackgroundModel::from_parts(
                    b.layer_resolution as usize,
                    Vec3::from(b.center.map(f64::from)),
                    b.radii.iter().map(|&r| r as f64).collect(),
                    texels,
                    b.brightness as f64,
                )?)
            }
        };
        Ok((grid, bg))
    }

    pub fn storage_report(&self) -> StorageReport {
        let n = self.len();
        let background = self.background.as_ref().map_or(0, QuantizedBackground::byte_len);
        let total = HEADER_BYTES + n * BYTES_PER_VOXEL + background + CRC_BYTES;
        let cells: usize = self.resolution.iter().map(|&r| r as usize).product();
        let dense_baseline = cells * DENSE_BYTES_PER_CELL;
        StorageReport {
            header: HEADER_BYTES,
            coords: 6 * n,
            densities: 4 * n,
            sh: SH_DIM * n,
            background,
            checksum: CRC_BYTES,
            total,
            dense_baseline,
            ratio: total as f64 / dense_baseline as f64,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, SerializationError> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.storage_report().total);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for r in self.resolution {
            out.extend_from_slice(&r.to_le_bytes());
        }
        for v in self.bounds_min.iter().chain(&self.bounds_max) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.push(self.background.is_some() as u8);
        for p in &self.sh_params {
            out.extend_from_slice(&p.scale.to_le_bytes());
            out.extend_from_slice(&p.offset.to_le_bytes());
        }
        for c in &self.coords {
            for v in c {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for d in &self.density {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&self.sh_q);
        if let Some(b) = &self.background {
            out.extend_from_slice(&(b.radii.len() as u32).to_le_bytes());
            out.extend_from_slice(&b.layer_resolution.to_le_bytes());
            for v in b.center.iter().chain(&b.radii).chain(std::iter::once(&b.brightness)) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for p in &b.rgb_params {
                out.extend_from_slice(&p.scale.to_le_bytes());
                out.extend_from_slice(&p.offset.to_le_bytes());
            }
            out.extend_from_slice(&b.rgb_q);
            for d in &b.density {
                out.extend_from_slice(&d.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SerializationError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.array()?;
        if magic != MAGIC {
            return Err(SerializationError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(SerializationError::UnsupportedVersion(version));
        }
        let resolution = [r.u32()?, r.u32()?, r.u32()?];
        let bounds_min = [r.f32()?, r.f32()?, r.f32()?];
        let bounds_max = [r.f32()?, r.f32()?, r.f32()?];
        let count = r.u64()?;
        let has_bg = r.array::<1>()?[0];
        if has_bg > 1 {
            return Err(SerializationError::Inconsistent(format!("background flag {has_bg}")));
        }
        // reject impossible counts before allocating
        let n = usize::try_from(count)
            .ok()
            .filter(|n| n.checked_mul(BYTES_PER_VOXEL).is_some_and(|b| b <= bytes.len()))
            .ok_or(SerializationError::Length { expected: usize::MAX, actual: bytes.len() })?;
        let mut sh_params = [QuantParams { scale: 1.0, offset: 0.0 }; SH_DIM];
        for p in sh_params.iter_mut() {
            *p = QuantParams { scale: r.f32()?, offset: r.f32()? };
        }
        let mut coords = Vec::with_capacity(n);
        for _ in 0..n {
            coords.push([r.u16()?, r.u16()?, r.u16()?]);
        }
        let mut density = Vec::with_capacity(n);
        for _ in 0..n {
            density.push(r.f32()?);
        }
        let sh_q = r.take(n * SH_DIM)?.to_vec();
        let background = if has_bg == 1 {
            let layers = r.u32()? as usize;
            let h = r.u32()? as usize;
            let texels = layers.checked_mul(h).and_then(|v| v.checked_mul(2 * h)).filter(|t| t * 7 <= bytes.len());
            let texels = texels.ok_or(SerializationError::Length { expected: usize::MAX, actual: bytes.len() })?;
            let center = [r.f32()?, r.f32()?, r.f32()?];
            let mut radii = Vec::with_capacity(layers);
            for _ in 0..layers {
                radii.push(r.f32()?);
            }
            let brightness = r.f32()?;
            let mut rgb_params = [QuantParams { scale: 1.0, offset: 0.0 }; 3];
            for p in rgb_params.iter_mut() {
                *p = QuantParams { scale: r.f32()?, offset: r.f32()? };
            }
            let rgb_q = r.take(3 * texels)?.to_vec();
            let mut dens = Vec::with_capacity(texels);
            for _ in 0..texels {
                dens.push(r.f32()?);
            }
            Some(QuantizedBackground { layer_resolution: h as u32, center, radii, brightness, rgb_params, rgb_q, density: dens })
        } else {
            None
        };
        let expected = r.pos + CRC_BYTES;
        if bytes.len() != expected {
            return Err(SerializationError::Length { expected, actual: bytes.len() });
        }
        let computed = crc32fast::hash(&bytes[..r.pos]);
        let stored = r.u32()?;
        if stored != computed {
            return Err(SerializationError::Checksum { stored, computed });
        }
        let scene = QuantizedScene { resolution, bounds_min, bounds_max, coords, density, sh_params, sh_q, background };
        scene.validate()?;
        Ok(scene)
    }

    /// Writes atomically: a temporary file in the target directory is
    /// renamed over `path`.
    pub fn write(&self, path: &Path) -> Result<(), SerializationError> {
        let bytes = self.to_bytes()?;
        crate::atomic::write_atomic(path, &bytes).map_err(|source| SerializationError::Io { path: path.to_path_buf(), source })
    }

    pub fn read(path: &Path) -> Result<Self, SerializationError> {
        let bytes = std::fs::read(path).map_err(|source| SerializationError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SerializationError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(SerializationError::Length { expected: self.pos.saturating_add(n) + CRC_BYTES, actual: self.bytes.len() })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], SerializationError> {
        Ok(self.take(N)?.try_into().expect("slice has length N"))
    }

    fn u16(&mut self) -> Result<u16, SerializationError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, SerializationError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, SerializationError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32, SerializationError> {
        Ok(f32::from_le_bytes(self.array()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(res: usize, n: usize, seed: u64) -> SparseVoxelGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = SparseVoxelGrid::new([res; 3], Vec3::repeat(-1.0), Vec3::new(1.0, 1.5, 2.0)).unwrap();
        while g.len() < n {
            let c = [rng.gen_range(0..res as u32), rng.gen_range(0..res as u32), rng.gen_range(0..res as u32)];
            if g.slot_at(c).is_none() {
                let sh: Vec<f64> = (0..SH_DIM).map(|k| rng.gen_range(-1.0..1.0) * (k + 1) as f64 / 9.0).collect();
                g.insert(c, rng.gen_range(-5.0..300.0), &sh).unwrap();
            }
        }
        g
    }

    #[test]
    fn constant_channel_is_exact() {
        let g = SparseVoxelGrid::dense([3; 3], Vec3::zeros(), Vec3::repeat(1.0), 1.5, &[0.3; SH_DIM]).unwrap();
        let q = quantize(&g, None).unwrap();
        for p in &q.sh_params {
            assert_eq!(p.scale, 1.0);
            assert!((p.offset as f64) <= 0.3 && 0.3 - (p.offset as f64) < 1e-7);
        }
        assert!(q.sh_q.iter().all(|&v| v == 0));
        // f32 offset is the only loss
        let (back, _) = q.dequantize().unwrap();
        for v in back.sh() {
            assert_eq!(*v, q.sh_params[0].offset as f64);
        }
        let p = QuantParams::fit(0.25, 0.25);
        assert_eq!((p.scale, p.offset, p.decode(p.encode(0.25))), (1.0, 0.25, 0.25));
    }

    #[test]
    fn symmetric_range_error_bound() {
        let p = QuantParams::fit(-1.0, 1.0);
        let mut worst: f64 = 0.0;
        for i in 0..=20_000 {
            let v = -1.0 + 2.0 * i as f64 / 20_000.0;
            worst = worst.max((p.decode(p.encode(v)) - v).abs());
        }
        assert!(worst <= p.scale as f64 / 2.0);
        assert!(worst <= 1.0 / 255.0 + 1e-9);
    }

    #[test]
    fn round_trip_bitwise_and_within_half_step() {
        let g = random_grid(64, 10_000, 1);
        let q = quantize(&g, None).unwrap();
        let bytes = q.to_bytes().unwrap();
        let back = QuantizedScene::from_bytes(&bytes).unwrap();
        assert_eq!(back, q);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        for s in 0..g.len() {
            let i = q.lookup(g.coords()[s].map(|v| v as u16)).unwrap();
            assert_eq!(q.density[i], g.density()[s] as f32);
            let deq = q.dequantized_sh(i);
            for k in 0..SH_DIM {
                assert!((deq[k] - g.sh()[s * SH_DIM + k]).abs() <= q.sh_params[k].scale as f64 / 2.0);
            }
        }
        assert_eq!(bytes.len(), q.storage_report().total);
    }

    #[test]
    fn empty_scene() {
        let g = SparseVoxelGrid::new([4; 3], Vec3::zeros(), Vec3::repeat(1.0)).unwrap();
        let q = quantize(&g, None).unwrap();
        let bytes = q.to_bytes().unwrap();
        assert_eq!(bytes.len(), HEADER_BYTES + CRC_BYTES);
        assert_eq!(QuantizedScene::from_bytes(&bytes).unwrap(), q);
    }

    #[test]
    fn corruption_is_reported() {
        let g = random_grid(16, 200, 2);
        let mut bg = BackgroundModel::new(3, 4, 0.5, Vec3::zeros(), 2.0).unwrap();
        bg.fill_layer(1, [0.2, 0.9, 0.4], 1.5);
        let bytes = quantize(&g, Some(&bg)).unwrap().to_bytes().unwrap();
        for cut in [0, 3, 10, HEADER_BYTES, bytes.len() / 2, bytes.len() - 1] {
            let e = QuantizedScene::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(e, SerializationError::Length { .. } | SerializationError::Checksum { .. }), "{cut}: {e}");
        }
        let mut flipped = bytes.clone();
        flipped[HEADER_BYTES + 20] ^= 0x40;
        assert!(matches!(QuantizedScene::from_bytes(&flipped), Err(SerializationError::Checksum { .. })));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(QuantizedScene::from_bytes(&magic), Err(SerializationError::BadMagic(_))));
        let mut version = bytes.clone();
        version[4] = 2;
        assert!(matches!(QuantizedScene::from_bytes(&version), Err(SerializationError::UnsupportedVersion(2))));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(QuantizedScene::from_bytes(&longer), Err(SerializationError::Length { .. })));
    }

    #[test]
    fn background_round_trip() {
        let g = random_grid(8, 50, 3);
        let mut bg = BackgroundModel::new(2, 4, 0.5, Vec3::new(0.1, 0.0, 0.0), 1.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (i, v) in bg.texels_mut().iter_mut().enumerate() {
            *v = if i % 4 == 3 { rng.gen_range(-1.0..4.0) } else { rng.gen() };
        }
        let q = quantize(&g, Some(&bg)).unwrap();
        let (_, back) = q.dequantize().unwrap();
        let back = back.unwrap();
        for (a, b) in back.texels().iter().zip(bg.texels()).enumerate().map(|(i, (a, b))| ((i, a), b)) {
            let (i, a) = a;
            if i % 4 == 3 {
                assert_eq!(*a, *b as f32 as f64);
            } else {
                assert!((a - b).abs() <= q.background.as_ref().unwrap().rgb_params[i % 4].scale as f64 / 2.0);
            }
        }
        let path = tempfile::tempdir().unwrap();
        let file = path.path().join("scene.prfx");
        q.write(&file).unwrap();
        assert_eq!(std::fs::metadata(&file).unwrap().len() as usize, q.storage_report().total);
        assert_eq!(QuantizedScene::read(&file).unwrap(), q);
    }

    #[test]
    fn storage_ratio_at_one_percent() {
        let res = 256usize;
        let n = res * res * res / 100;
        let q = QuantizedScene {
            resolution: [res as u32; 3],
            bounds_min: [0.0; 3],
            bounds_max: [1.0; 3],
            coords: (0..n).map(|i| [(i / 65536) as u16, ((i / 256) % 256) as u16, (i % 256) as u16]).collect(),
            density: vec![1.0; n],
            sh_params: [QuantParams { scale: 1.0, offset: 0.0 }; SH_DIM],
            sh_q: vec![0; n * SH_DIM],
            background: None,
        };
        let r = q.storage_report();
        assert_eq!(r.total, r.header + r.coords + r.densities + r.sh + r.background + r.checksum);
        assert!(r.ratio < 0.04);
        assert_eq!(r.dense_baseline, res * res * res * 112);
    }

    #[test]
    fn lookup_agrees_with_occupancy() {
        let g = random_grid(32, 3000, 4);
        let q = quantize(&g, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100_000 {
            let c = [rng.gen_range(0..32u32), rng.gen_range(0..32u32), rng.gen_range(0..32u32)];
            assert_eq!(q.lookup(c.map(|v| v as u16)).is_some(), g.slot_at(c).is_some());
        }
    }
}
