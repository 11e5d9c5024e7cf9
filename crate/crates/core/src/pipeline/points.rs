use super::PipelineError;
use crate::geometry::{Camera, Vec3};
use crate::grid::{SparseVoxelGrid, SH_DIM};
use std::collections::{HashMap, VecDeque};

/// Cell size for connected-component filtering, in world units.
pub const CC_CELL: f64 = 0.05;
/// Components smaller than this fraction of the largest are dropped.
pub const CC_MIN_FRACTION: f64 = 0.01;
pub const INIT_DENSITY: f64 = 0.1;

/// Back-projects every pixel with positive depth through the pinhole
/// model (distortion ignored). `depth` holds z-depth in
/// world units, row-major, 0 = invalid.
pub fn unproject_depth(cam: &Camera, depth: &[f64]) -> Vec<Vec3> {
    let w = cam.width as usize;
    depth
        .iter()
        .enumerate()
        .filter(|(_, d)| **d > 0.0 && d.is_finite())
        .map(|(i, &d)| {
            let (u, v) = ((i % w) as f64, (i / w) as f64);
            let x = (u + 0.5 - cam.cx) / cam.fx;
            let y = (v + 0.5 - cam.cy) / cam.fy;
            cam.rotation * Vec3::new(d * x, d * y, d) + cam.translation
        })
        .collect()
}

fn cell_key(p: &Vec3, cell: f64) -> [i64; 3] {
    [(p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64]
}

/// Drops points whose 26-connected cell component holds fewer than
/// `min_fraction` × the points of the largest component. Survivors keep
/// their order.
pub fn filter_connected_components(points: &[Vec3], cell: f64, min_fraction: f64) -> Result<Vec<Vec3>, PipelineError> {
    if points.is_empty() {
        return Err(PipelineError::EmptyPoints);
    }
    let keys: Vec<[i64; 3]> = points.iter().map(|p| cell_key(p, cell)).collect();
    let mut cell_points: HashMap<[i64; 3], usize> = HashMap::new();
    for k in &keys {
        *cell_points.entry(*k).or_default() += 1;
    }
    let mut component: HashMap<[i64; 3], usize> = HashMap::with_capacity(cell_points.len());
    let mut sizes: Vec<usize> = Vec::new();
    let mut queue = VecDeque::new();
    // seed in first-seen point order so labels are deterministic
    for k in &keys {
        if component.contains_key(k) {
            continue;
        }
        let id = sizes.len();
        let mut size = 0;
        component.insert(*k, id);
        queue.push_back(*k);
        while let Some(c) = queue.pop_front() {
            size += cell_points[&c];
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        let n = [c[0] + dx, c[1] + dy, c[2] + dz];
                        if cell_points.contains_key(&n) && !component.contains_key(&n) {
                            component.insert(n, id);
                            queue.push_back(n);
                        }
                    }
                }
            }
        }
        sizes.push(size);
    }
    let largest = *sizes.iter().max().expect("at least one component") as f64;
    Ok(points
        .iter()
        .zip(&keys)
        .filter(|(_, k)| sizes[component[*k]] as f64 >= min_fraction * largest)
        .map(|(p, _)| *p)
        .collect())
}

/// World bounds: the points' AABB padded by 5% of its extent per side.
/// Axes with zero extent get a pad of 5% of the largest extent (or 0.05
/// when all points coincide).
pub fn padded_bounds(points: &[Vec3]) -> Result<(Vec3, Vec3), PipelineError> {
    let first = points.first().ok_or(PipelineError::EmptyPoints)?;
    let (mut lo, mut hi) = (*first, *first);
    for p in points {
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
            return Err(PipelineError::NonFinitePoint);
        }
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let extent = hi - lo;
    let fallback = (0.05 * extent.max()).max(if extent.max() == 0.0 { 0.05 } else { 0.0 });
    let pad = extent.map(|e| if e > 0.0 { 0.05 * e } else { fallback });
    Ok((lo - pad, hi + pad))
}

/// Occupies every cell holding a point plus a one-cell dilation, with
/// σ = 0.1 and zero SH.
pub fn init_grid_from_points(points: &[Vec3], resolution: usize) -> Result<SparseVoxelGrid, PipelineError> {
    let (lo, hi) = padded_bounds(points)?;
    let mut grid = SparseVoxelGrid::new([resolution; 3], lo, hi)?;
    let r = resolution as i64;
    let mut seeds: Vec<[u32; 3]> = points.iter().filter_map(|p| grid.cell_of(p)).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut cells = Vec::with_capacity(seeds.len() * 27);
    for c in seeds {
        for dx in -1..=1i64 {
            for dy in -1..=1i64 {
                for dz in -1..=1i64 {
                    let n = [c[0] as i64 + dx, c[1] as i64 + dy, c[2] as i64 + dz];
                    if n.iter().all(|&v| (0..r).contains(&v)) {
                        cells.push([n[0] as u32, n[1] as u32, n[2] as u32]);
                    }
                }
            }
        }
    }
    cells.sort_unstable();
    cells.dedup();
    let sh = [0.0; SH_DIM];
    for c in cells {
        grid.insert(c, INIT_DENSITY, &sh)?;
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{look_at, Mat3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn identity_cam(w: u32, h: u32, f: f64, c: f64) -> Camera {
        Camera::new(f, f, c, c, Mat3::identity(), Vec3::zeros(), w, h).unwrap()
    }

    #[test]
    fn hand_evaluated_pixel() {
        let cam = identity_cam(101, 1, 100.0, 0.0);
        let mut depth = vec![0.0; 101];
        depth[100] = 1.0;
        let pts = unproject_depth(&cam, &depth);
        assert_eq!(pts.len(), 1);
        assert!((pts[0] - Vec3::new(1.005, 0.005, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn principal_ray_and_round_trip() {
        let eye = Vec3::new(0.3, -2.0, 0.7);
        let r = look_at(&eye, &Vec3::zeros(), &Vec3::z());
        let cam = Camera::new(50.0, 55.0, 15.5, 11.5, r, eye, 32, 24).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let depth: Vec<f64> = (0..32 * 24).map(|i| if i % 7 == 0 { 0.0 } else { rng.gen_range(0.5..4.0) }).collect();
        let pts = unproject_depth(&cam, &depth);
        let valid: Vec<usize> = (0..depth.len()).filter(|i| depth[*i] > 0.0).collect();
        assert_eq!(pts.len(), valid.len());
        for (p, &i) in pts.iter().zip(&valid) {
            let (u, v) = cam.project(p).unwrap();
            assert!((u - (i % 32) as f64).abs() < 1e-6 && (v - (i / 32) as f64).abs() < 1e-6);
        }
        // pixel (15, 11) sits on the principal point
        let d = depth[11 * 32 + 15];
        let k = valid.iter().position(|&i| i == 11 * 32 + 15).unwrap();
        assert!((pts[k] - (eye + r * Vec3::new(0.0, 0.0, d))).norm() < 1e-12);
    }

    fn blob(center: Vec3, n: usize, radius: f64, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
        (0..n).map(|_| center + Vec3::new(rng.gen_range(-radius..radius), rng.gen_range(-radius..radius), rng.gen_range(-radius..radius))).collect()
    }

    #[test]
    fn isolated_points_removed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pts = blob(Vec3::zeros(), 10_000, 0.3, &mut rng);
        let outliers: Vec<Vec3> = (0..5).map(|i| Vec3::new(1.3 + 0.2 * i as f64, 0.0, 0.0)).collect();
        for (i, o) in outliers.iter().enumerate() {
            pts.insert(1000 * i + 7, *o);
        }
        let kept = filter_connected_components(&pts, CC_CELL, CC_MIN_FRACTION).unwrap();
        assert_eq!(kept.len(), 10_000);
        assert!(outliers.iter().all(|o| !kept.contains(o)));
        let expected: Vec<Vec3> = pts.iter().filter(|p| !outliers.contains(p)).copied().collect();
        assert_eq!(kept, expected);
        assert_eq!(filter_connected_components(&kept, CC_CELL, CC_MIN_FRACTION).unwrap(), kept);
    }

    #[test]
    fn equal_clusters_both_kept() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut pts = blob(Vec3::zeros(), 2000, 0.2, &mut rng);
        pts.extend(blob(Vec3::new(1.0, 0.0, 0.0), 2000, 0.2, &mut rng));
        assert_eq!(filter_connected_components(&pts, CC_CELL, CC_MIN_FRACTION).unwrap().len(), 4000);
        assert!(matches!(filter_connected_components(&[], CC_CELL, 0.01), Err(PipelineError::EmptyPoints)));
    }

    #[test]
    fn single_point_gives_dilated_block() {
        let g = init_grid_from_points(&[Vec3::new(0.2, -0.1, 3.0)], 256).unwrap();
        assert_eq!(g.len(), 27);
        assert!(g.density().iter().all(|&d| d == INIT_DENSITY));
        assert!(g.sh().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn occupancy_matches_naive_voxelizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts = blob(Vec3::new(1.0, 2.0, -1.0), 500, 0.8, &mut rng);
        let g = init_grid_from_points(&pts, 32).unwrap();
        let (lo, hi) = padded_bounds(&pts).unwrap();
        let vs = (hi - lo) / 32.0;
        let mut naive = HashSet::new();
        for p in &pts {
            assert!(g.contains(p));
            let c: Vec<i64> = (0..3).map(|a| (((p[a] - lo[a]) / vs[a]).floor() as i64).clamp(0, 31)).collect();
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        let n = [c[0] + dx, c[1] + dy, c[2] + dz];
                        if n.iter().all(|v| (0..32).contains(v)) {
                            naive.insert(n);
                        }
                    }
                }
            }
        }
        assert_eq!(g.len(), naive.len());
        for c in g.coords() {
            assert!(naive.contains(&[c[0] as i64, c[1] as i64, c[2] as i64]));
        }
    }
}
