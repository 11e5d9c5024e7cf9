//! Sparse voxel scene representation: per-voxel density and degree-2 SH
//! color, trilinear sampling, pruning and upsampling, plus the layered
//! spherical background.

mod background;
pub mod sh;

pub use background::{BackgroundModel, BackgroundTrace, LayerHit, TEXEL_CHANNELS};
pub use sh::{eval_color, sh_basis, sigmoid, SH_COEFFS, SH_DIM};

use crate::geometry::Vec3;
use thiserror::Error;

/// Occupancy marker for cells without a voxel.
pub const EMPTY: u32 = u32::MAX;
/// Largest supported resolution per axis.
pub const MAX_RESOLUTION: usize = 1024;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("resolution {0:?} must be positive and at most {MAX_RESOLUTION} per axis")]
    BadResolution([usize; 3]),
    #[error("upsampling {0:?} would exceed the maximum resolution {MAX_RESOLUTION}")]
    ResolutionOverflow([usize; 3]),
    #[error("world bounds are empty or non-finite")]
    BadBounds,
    #[error("voxel {0:?} lies outside the grid")]
    CoordOutOfRange([u32; 3]),
    #[error("voxel {0:?} inserted twice")]
    DuplicateVoxel([u32; 3]),
    #[error("expected {expected} SH coefficients, got {got}")]
    ShLength { expected: usize, got: usize },
}

/// The eight trilinear corners around a point: slot (or [`EMPTY`]) and weight.
pub type Corners = [(u32, f64); 8];

#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxelGrid {
    resolution: [usize; 3],
    world_min: Vec3,
    world_max: Vec3,
    voxel_size: Vec3,
    occupancy: Vec<u32>,
    coords: Vec<[u32; 3]>,
    density: Vec<f64>,
    sh: Vec<f64>,
}

impl SparseVoxelGrid {
    /// An empty grid over `[world_min, world_max]`.
    pub fn new(resolution: [usize; 3], world_min: Vec3, world_max: Vec3) -> Result<Self, GridError> {
        if resolution.iter().any(|&n| n == 0 || n > MAX_RESOLUTION) {
            return Err(GridError::BadResolution(resolution));
        }
        if !(0..3).all(|i| world_min[i].is_finite() && world_max[i].is_finite() && world_min[i] < world_max[i]) {
            return Err(GridError::BadBounds);
        }
        let cells = resolution[0] * resolution[1] * resolution[2];
        let voxel_size = (world_max - world_min).component_div(&Vec3::new(
            resolution[0] as f64,
            resolution[1] as f64,
            resolution[2] as f64,
        ));
        Ok(SparseVoxelGrid {
            resolution,
            world_min,
            world_max,
            voxel_size,
            occupancy: vec![EMPTY; cells],
            coords: Vec::new(),
            density: Vec::new(),
            sh: Vec::new(),
        })
    }

    /// A fully occupied grid with constant initial values.
    pub fn dense(
        resolution: [usize; 3],
        world_min: Vec3,
        world_max: Vec3,
        density: f64,
        sh: &[f64; SH_DIM],
    ) -> Result<Self, GridError> {
        let mut grid = Self::new(resolution, world_min, world_max)?;
        let cells = grid.occupancy.len();
        grid.coords.reserve(cells);
        grid.density.reserve(cells);
        grid.sh.reserve(cells * SH_DIM);
        for x in 0..resolution[0] as u32 {
            for y in 0..resolution[1] as u32 {
                for z in 0..resolution[2] as u32 {
                    grid.insert([x, y, z], density, sh)?;
                }
            }
        }
        Ok(grid)
    }

    /// Adds a voxel and returns its slot.
    pub fn insert(&mut self, coord: [u32; 3], density: f64, sh: &[f64]) -> Result<usize, GridError> {
        if sh.len() != SH_DIM {
            return Err(GridError::ShLength { expected: SH_DIM, got: sh.len() });
        }
        let cell = self.cell_index(coord).ok_or(GridError::CoordOutOfRange(coord))?;
        if self.occupancy[cell] != EMPTY {
            return Err(GridError::DuplicateVoxel(coord));
        }
        let slot = self.coords.len();
        self.occupancy[cell] = slot as u32;
        self.coords.push(coord);
        self.density.push(density);
        self.sh.extend_from_slice(sh);
        Ok(slot)
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn world_min(&self) -> Vec3 {
        self.world_min
    }

    pub fn world_max(&self) -> Vec3 {
        self.world_max
    }

    pub fn voxel_size(&self) -> Vec3 {
        self.voxel_size
    }

    /// Number of occupied voxels.
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn cell_count(&self) -> usize {
        self.occupancy.len()
    }

    pub fn coords(&self) -> &[[u32; 3]] {
        &self.coords
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn density_mut(&mut self) -> &mut [f64] {
        &mut self.density
    }

    pub fn sh(&self) -> &[f64] {
        &self.sh
    }

    pub fn sh_mut(&mut self) -> &mut [f64] {
        &mut self.sh
    }

    pub fn voxel_sh(&self, slot: usize) -> &[f64] {
        &self.sh[slot * SH_DIM..(slot + 1) * SH_DIM]
    }

    #[inline]
    fn cell_index(&self, c: [u32; 3]) -> Option<usize> {
        let [nx, ny, nz] = self.resolution;
        let (x, y, z) = (c[0] as usize, c[1] as usize, c[2] as usize);
        (x < nx && y < ny && z < nz).then(|| (x * ny + y) * nz + z)
    }

    /// Slot stored at a cell, if occupied.
    pub fn slot_at(&self, coord: [u32; 3]) -> Option<usize> {
        self.cell_index(coord)
            .map(|i| self.occupancy[i])
            .filter(|&s| s != EMPTY)
            .map(|s| s as usize)
    }

    #[inline]
    fn slot_signed(&self, x: i64, y: i64, z: i64) -> u32 {
        let [nx, ny, nz] = self.resolution;
        if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 || z >= nz as i64 {
            return EMPTY;
        }
        self.occupancy[(x as usize * ny + y as usize) * nz + z as usize]
    }

    pub fn voxel_center(&self, coord: [u32; 3]) -> Vec3 {
        Vec3::new(
            self.world_min.x + (coord[0] as f64 + 0.5) * self.voxel_size.x,
            self.world_min.y + (coord[1] as f64 + 0.5) * self.voxel_size.y,
            self.world_min.z + (coord[2] as f64 + 0.5) * self.voxel_size.z,
        )
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.world_min[i] && p[i] <= self.world_max[i])
    }

    /// Cell containing a world point, if inside the bounds.
    pub fn cell_of(&self, p: &Vec3) -> Option<[u32; 3]> {
        if !self.contains(p) {
            return None;
        }
        let mut c = [0u32; 3];
        for i in 0..3 {
            let g = ((p[i] - self.world_min[i]) / self.voxel_size[i]).floor() as i64;
            c[i] = g.clamp(0, self.resolution[i] as i64 - 1) as u32;
        }
        Some(c)
    }

    /// Trilinear corners around `p`, interpolating between voxel centers.
    /// Returns `None` outside the world bounds.
    #[inline]
    pub fn corners(&self, p: &Vec3) -> Option<Corners> {
        if !self.contains(p) {
            return None;
        }
        let mut base = [0i64; 3];
        let mut frac = [0.0; 3];
        for i in 0..3 {
            let g = (p[i] - self.world_min[i]) / self.voxel_size[i] - 0.5;
            let f = g.floor();
            base[i] = f as i64;
            frac[i] = g - f;
        }
        let mut out = [(EMPTY, 0.0); 8];
        for (n, corner) in out.iter_mut().enumerate() {
            let (dx, dy, dz) = ((n >> 2) & 1, (n >> 1) & 1, n & 1);
            let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
            let slot = self.slot_signed(base[0] + dx as i64, base[1] + dy as i64, base[2] + dz as i64);
            *corner = (slot, wx * wy * wz);
        }
        Some(out)
    }

    /// Interpolated raw (pre-activation) density.
    #[inline]
    pub fn raw_density(&self, corners: &Corners) -> f64 {
        corners
            .iter()
            .filter(|(s, _)| *s != EMPTY)
            .map(|&(s, w)| w * self.density[s as usize])
            .sum()
    }

    /// Interpolated SH coefficients.
    #[inline]
    pub fn interp_sh(&self, corners: &Corners, out: &mut [f64; SH_DIM]) {
        *out = [0.0; SH_DIM];
        for &(s, w) in corners.iter().filter(|(s, _)| *s != EMPTY) {
            let src = &self.sh[s as usize * SH_DIM..(s as usize + 1) * SH_DIM];
            for (o, v) in out.iter_mut().zip(src) {
                *o += w * v;
            }
        }
    }

    /// Density (ReLU-activated) and SH coefficients at a world point.
    /// Points outside the bounds sample to zero.
    pub fn sample_trilinear(&self, p: &Vec3) -> (f64, [f64; SH_DIM]) {
        let mut sh = [0.0; SH_DIM];
        match self.corners(p) {
            None => (0.0, sh),
            Some(c) => {
                self.interp_sh(&c, &mut sh);
                (self.raw_density(&c).max(0.0), sh)
            }
        }
    }

    /// Copy keeping only voxels with density `>= threshold`; survivors keep
    /// their relative slot order and bit-identical values.
    pub fn prune(&self, threshold: f64) -> SparseVoxelGrid {
        self.retain(|slot| !(self.density[slot] < threshold))
    }

    /// Copy keeping only the slots for which `keep` returns true.
    pub fn retain(&self, mut keep: impl FnMut(usize) -> bool) -> SparseVoxelGrid {
        let mut out = SparseVoxelGrid {
            resolution: self.resolution,
            world_min: self.world_min,
            world_max: self.world_max,
            voxel_size: self.voxel_size,
            occupancy: vec![EMPTY; self.occupancy.len()],
            coords: Vec::new(),
            density: Vec::new(),
            sh: Vec::new(),
        };
        for slot in 0..self.len() {
            if keep(slot) {
                let cell = self.cell_index(self.coords[slot]).unwrap();
                out.occupancy[cell] = out.coords.len() as u32;
                out.coords.push(self.coords[slot]);
                out.density.push(self.density[slot]);
                out.sh.extend_from_slice(self.voxel_sh(slot));
            }
        }
        out
    }

    /// Doubles the resolution. Every occupied voxel spawns its eight
    /// children, each taking the trilinear interpolation of the coarse grid
    /// at the child's center.
    pub fn upsample(&self) -> Result<SparseVoxelGrid, GridError> {
        let res = self.resolution.map(|n| n * 2);
        if res.iter().any(|&n| n > MAX_RESOLUTION) {
            return Err(GridError::ResolutionOverflow(res));
        }
        let mut out = SparseVoxelGrid::new(res, self.world_min, self.world_max)?;
        out.coords.reserve(self.len() * 8);
        out.density.reserve(self.len() * 8);
        out.sh.reserve(self.len() * 8 * SH_DIM);
        let mut sh = [0.0; SH_DIM];
        for coord in &self.coords {
            for n in 0..8u32 {
                let child = [coord[0] * 2 + (n >> 2 & 1), coord[1] * 2 + (n >> 1 & 1), coord[2] * 2 + (n & 1)];
                let p = out.voxel_center(child);
                let corners = self.corners(&p).expect("child center inside bounds");
                self.interp_sh(&corners, &mut sh);
                out.insert(child, self.raw_density(&corners), &sh)?;
            }
        }
        Ok(out)
    }

    /// Checks the occupancy/slot bijection and array lengths.
    pub fn audit(&self) -> Result<(), String> {
        if self.sh.len() != SH_DIM * self.coords.len() || self.density.len() != self.coords.len() {
            return Err("array lengths disagree with slot count".into());
        }
        let mut seen = vec![false; self.coords.len()];
        for (cell, &slot) in self.occupancy.iter().enumerate() {
            if slot == EMPTY {
                continue;
            }
            let s = slot as usize;
            if s >= self.coords.len() {
                return Err(format!("cell {cell} references slot {s} beyond {}", self.coords.len()));
            }
            if seen[s] {
                return Err(format!("slot {s} referenced twice"));
            }
            seen[s] = true;
            if self.cell_index(self.coords[s]) != Some(cell) {
                return Err(format!("slot {s} coordinate does not map back to cell {cell}"));
            }
        }
        if let Some(s) = seen.iter().position(|v| !v) {
            return Err(format!("slot {s} is unreferenced"));
        }
        Ok(())
    }

    /// Radius of the sphere circumscribing the world bounds.
    pub fn bounding_radius(&self) -> f64 {
        0.5 * (self.world_max - self.world_min).norm()
    }

    pub fn center(&self) -> Vec3 {
        0.5 * (self.world_max + self.world_min)
    }
}
