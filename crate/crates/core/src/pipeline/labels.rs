use super::PipelineError;
use crate::geometry::Vec3;
use crate::grid::SparseVoxelGrid;
use rayon::prelude::*;
use std::collections::HashMap;

/// Label assigned to voxels with no cloud point within the transfer radius.
pub const IGNORE_CLASS: u16 = u16::MAX;
pub const LABEL_RADIUS: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPointCloud {
    points: Vec<Vec3>,
    labels: Vec<u16>,
}

impl LabeledPointCloud {
    pub fn new(points: Vec<Vec3>, labels: Vec<u16>) -> Result<Self, PipelineError> {
        if points.len() != labels.len() {
            return Err(PipelineError::LabelCount { points: points.len(), labels: labels.len() });
        }
        if points.iter().any(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite())) {
            return Err(PipelineError::NonFinitePoint);
        }
        Ok(LabeledPointCloud { points, labels })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Uniform hash grid with cell edge `radius`; any point closer than
/// `radius` lies in the 27 cells around the query's cell.
struct SpatialHash {
    cell: f64,
    buckets: HashMap<[i64; 3], Vec<u32>>,
}

impl SpatialHash {
    fn new(points: &[Vec3], cell: f64) -> Self {
        let mut buckets: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(Self::key(p, cell)).or_default().push(i as u32);
        }
        SpatialHash { cell, buckets }
    }

    fn key(p: &Vec3, cell: f64) -> [i64; 3] {
        [(p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64]
    }

    /// Nearest point strictly closer than the cell size, ties to the lowest index.
    fn nearest_within(&self, points: &[Vec3], q: &Vec3) -> Option<usize> {
        let k = Self::key(q, self.cell);
        let mut best: Option<(f64, usize)> = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(bucket) = self.buckets.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) else { continue };
                    for &i in bucket {
                        let i = i as usize;
                        let d = (points[i] - q).norm_squared();
                        if best.map_or(true, |(bd, bi)| d < bd || (d == bd && i < bi)) {
                            best = Some((d, i));
                        }
                    }
                }
            }
        }
        best.filter(|(d, _)| d.sqrt() < self.cell).map(|(_, i)| i)
    }
}

/// Label of the nearest cloud point to each occupied voxel center, or
/// [`IGNORE_CLASS`] when that point is `radius` or farther away. Output is
/// indexed by voxel slot.
pub fn transfer_labels(grid: &SparseVoxelGrid, cloud: &LabeledPointCloud, radius: f64) -> Vec<u16> {
    if cloud.is_empty() {
        return vec![IGNORE_CLASS; grid.len()];
    }
    let index = SpatialHash::new(&cloud.points, radius);
    grid.coords()
        .par_iter()
        .map(|c| {
            let center = grid.voxel_center(*c);
            index.nearest_within(&cloud.points, &center).map_or(IGNORE_CLASS, |i| cloud.labels[i])
        })
        .collect()
}

/// All-pairs reference for [`transfer_labels`].
pub fn transfer_labels_brute_force(grid: &SparseVoxelGrid, cloud: &LabeledPointCloud, radius: f64) -> Vec<u16> {
    grid.coords()
        .iter()
        .map(|c| {
            let center = grid.voxel_center(*c);
            let mut best: Option<(f64, usize)> = None;
            for (i, p) in cloud.points.iter().enumerate() {
                let d = (p - center).norm_squared();
                if best.map_or(true, |(bd, _)| d < bd) {
                    best = Some((d, i));
                }
            }
            match best {
                Some((d, i)) if d.sqrt() < radius => cloud.labels[i],
                _ => IGNORE_CLASS,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::SH_DIM;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_grid(n: usize) -> SparseVoxelGrid {
        SparseVoxelGrid::dense([n; 3], Vec3::zeros(), Vec3::repeat(1.0), 0.1, &[0.0; SH_DIM]).unwrap()
    }

    #[test]
    fn coincident_and_out_of_range() {
        let g = unit_grid(2);
        let c0 = g.voxel_center([0, 0, 0]);
        let c1 = g.voxel_center([1, 1, 1]);
        let cloud = LabeledPointCloud::new(vec![c0, c1 + Vec3::new(0.06, 0.0, 0.0)], vec![3, 4]).unwrap();
        let labels = transfer_labels(&g, &cloud, LABEL_RADIUS);
        assert_eq!(labels[g.slot_at([0, 0, 0]).unwrap()], 3);
        assert_eq!(labels[g.slot_at([1, 1, 1]).unwrap()], IGNORE_CLASS);
        let empty = LabeledPointCloud::new(vec![], vec![]).unwrap();
        assert!(transfer_labels(&g, &empty, LABEL_RADIUS).iter().all(|&l| l == IGNORE_CLASS));
        assert!(LabeledPointCloud::new(vec![c0], vec![]).is_err());
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = unit_grid(12);
        let pts: Vec<Vec3> = (0..2000).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        let labels: Vec<u16> = (0..2000).map(|_| rng.gen_range(0..20)).collect();
        let cloud = LabeledPointCloud::new(pts, labels).unwrap();
        assert_eq!(transfer_labels(&g, &cloud, LABEL_RADIUS), transfer_labels_brute_force(&g, &cloud, LABEL_RADIUS));
    }
}
