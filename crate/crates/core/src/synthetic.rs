//! Analytic colored-cube scene with exact ground-truth rendering, used as a
//! convergence fixture for the trainer and the command-line tools.

use crate::geometry::{look_at, Camera, Ray, Vec3};
use crate::raster::Raster;
use crate::render::{ray_for_pixel, DEFAULT_BRIGHTNESS};
use crate::train::TrainingView;

/// Axis-aligned cube centered at the origin, one flat color per face, seen
/// against a uniform gray background.
#[derive(Debug, Clone, PartialEq)]
pub struct ColoredCube {
    pub half_extent: f64,
    /// Face colors in the order +x, −x, +y, −y, +z, −z.
    pub face_colors: [[f64; 3]; 6],
    pub background: f64,
    /// Samples per pixel axis for box-filtered ground truth.
    pub supersample: usize,
}

impl Default for ColoredCube {
    fn default() -> Self {
        ColoredCube {
            half_extent: 0.3,
            face_colors: [
                [0.9, 0.15, 0.1],
                [0.1, 0.75, 0.2],
                [0.15, 0.25, 0.9],
                [0.95, 0.85, 0.1],
                [0.85, 0.2, 0.8],
                [0.1, 0.8, 0.85],
            ],
            background: DEFAULT_BRIGHTNESS,
            supersample: 1,
        }
    }
}

impl ColoredCube {
    /// World bounds for a grid that encloses the cube with margin.
    pub fn grid_bounds(&self) -> (Vec3, Vec3) {
        let r = (self.half_extent * 5.0 / 3.0).max(self.half_extent + 1e-3);
        (Vec3::repeat(-r), Vec3::repeat(r))
    }

    /// Color seen along a ray.
    pub fn ray_color(&self, ray: &Ray) -> [f64; 3] {
        let h = self.half_extent;
        let (mut t_in, mut t_out) = (f64::NEG_INFINITY, f64::INFINITY);
        let mut face = 0;
        for a in 0..3 {
            let (o, d) = (ray.origin[a], ray.direction[a]);
            if d.abs() < 1e-15 {
                if o.abs() > h {
                    return [self.background; 3];
                }
                continue;
            }
            let (t0, t1) = ((-h - o) / d, (h - o) / d);
            // the entry plane faces the ray origin
            let (near, near_face) = if t0 < t1 { (t0, 2 * a + 1) } else { (t1, 2 * a) };
            t_out = t_out.min(t0.max(t1));
            if near > t_in {
                t_in = near;
                face = near_face;
            }
        }
        if t_in <= t_out && t_in > 0.0 {
            self.face_colors[face]
        } else {
            [self.background; 3]
        }
    }

    /// Exact rendering with the renderer's pixel-center convention,
    /// box-filtered over `supersample²` sub-pixel rays.
    pub fn render(&self, camera: &Camera) -> Raster {
        let s = self.supersample.max(1);
        Raster::from_fn(camera.width as usize, camera.height as usize, |x, y| {
            if s == 1 {
                return self.ray_color(&ray_for_pixel(camera, x, y));
            }
            let mut acc = [0.0; 3];
            for j in 0..s {
                for i in 0..s {
                    let u = x as f64 + (i as f64 + 0.5) / s as f64 - 0.5;
                    let v = y as f64 + (j as f64 + 0.5) / s as f64 - 0.5;
                    let ray = crate::geometry::pixel_to_ray_unchecked(camera, u, v);
                    let c = self.ray_color(&ray);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            acc.map(|v| v / (s * s) as f64)
        })
    }

    pub fn views(&self, cameras: &[Camera]) -> Vec<TrainingView> {
        cameras.iter().map(|c| TrainingView { camera: c.clone(), image: self.render(c) }).collect()
    }
}

/// Cameras evenly spaced on a horizontal circle around the origin, raised
/// by `elevation` radians and looking at the center. `phase` offsets the
/// first azimuth as a fraction of the spacing.
pub fn circle_cameras(n: usize, size: u32, radius: f64, elevation: f64, phase: f64) -> Vec<Camera> {
    let f = size as f64 * 1.1;
    let c = size as f64 / 2.0;
    (0..n)
        .map(|i| {
            let az = (i as f64 + phase) / n as f64 * std::f64::consts::TAU;
            let eye = Vec3::new(
                radius * elevation.cos() * az.cos(),
                radius * elevation.cos() * az.sin(),
                radius * elevation.sin(),
            );
            Camera::new(f, f, c, c, look_at(&eye, &Vec3::zeros(), &Vec3::z()), eye, size, size)
                .expect("circle camera is well-formed")
        })
        .collect()
}

/// Default training rig: 16 cameras at radius 2.5, 25° elevation.
pub fn training_rig(size: u32) -> Vec<Camera> {
    circle_cameras(16, size, 2.5, 25f64.to_radians(), 0.0)
}

/// Held-out cameras halfway between training azimuths.
pub fn heldout_rig(n: usize, size: u32) -> Vec<Camera> {
    circle_cameras(16, size, 2.5, 25f64.to_radians(), 0.5).into_iter().step_by(16 / n.clamp(1, 16)).take(n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn face_colors_seen_head_on() {
        let cube = ColoredCube::default();
        let axes = [Vec3::x(), -Vec3::x(), Vec3::y(), -Vec3::y(), Vec3::z(), -Vec3::z()];
        for (k, a) in axes.iter().enumerate() {
            let ray = Ray::new(a * 3.0, -a);
            assert_eq!(cube.ray_color(&ray), cube.face_colors[k]);
        }
        let miss = Ray::new(Vec3::new(3.0, 0.5, 0.0), -Vec3::x());
        assert_eq!(cube.ray_color(&miss), [0.5; 3]);
        let away = Ray::new(Vec3::new(3.0, 0.0, 0.0), Vec3::x());
        assert_eq!(cube.ray_color(&away), [0.5; 3]);
    }

    #[test]
    fn rig_sees_cube_and_background() {
        let cube = ColoredCube::default();
        for cam in training_rig(32).iter().chain(&heldout_rig(4, 32)) {
            let img = cube.render(cam);
            let center = img.get(16, 16);
            assert_ne!(center, [0.5; 3]);
            assert_eq!(img.get(0, 0), [0.5; 3]);
        }
        assert_eq!(heldout_rig(4, 8).len(), 4);
    }

    #[test]
    fn supersampling_blends_edges() {
        let cube = ColoredCube { supersample: 4, ..Default::default() };
        let img = cube.render(&training_rig(32)[0]);
        let mixed = img.data.iter().filter(|v| **v != 0.5 && !cube.face_colors.iter().flatten().any(|c| c == *v)).count();
        assert!(mixed > 0);
    }
}
