//! Cameras, rays and rotation utilities.
//!
//! Poses are stored camera-to-world everywhere. Rotations use the axis-angle
//! machinery that pose interpolation is built on.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("rotation is not orthonormal with det +1 (deviation {0:.3e})")]
    NotARotation(f64),
    #[error("focal lengths must be positive (fx={fx}, fy={fy})")]
    BadFocal { fx: f64, fy: f64 },
    #[error("principal point ({cx}, {cy}) outside image {width}x{height}")]
    BadPrincipalPoint { cx: f64, cy: f64, width: u32, height: u32 },
    #[error("image dimensions must be positive")]
    EmptyImage,
    #[error("non-finite pixel coordinate ({0}, {1})")]
    NonFinitePixel(f64, f64),
}

/// Deviation of `r` from SO(3): max-norm of `RᵀR − I`, or infinity for det ≤ 0.
pub fn rotation_deviation(r: &Mat3) -> f64 {
    if r.determinant() <= 0.0 {
        return f64::INFINITY;
    }
    (r.transpose() * r - Mat3::identity()).amax()
}

pub fn is_rotation(r: &Mat3) -> bool {
    rotation_deviation(r) < 1e-6
}

/// Pinhole camera with two-term radial distortion.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub k1: f64,
    pub k2: f64,
    /// Camera-to-world rotation.
    pub rotation: Mat3,
    /// Camera-to-world translation (camera center in world coordinates).
    pub translation: Vec3,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Mat3,
        translation: Vec3,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let cam = Camera { fx, fy, cx, cy, k1: 0.0, k2: 0.0, rotation, translation, width, height };
        cam.validate()?;
        Ok(cam)
    }

    pub fn with_distortion(mut self, k1: f64, k2: f64) -> Self {
        self.k1 = k1;
        self.k2 = k2;
        self
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::EmptyImage);
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::BadFocal { fx: self.fx, fy: self.fy });
        }
        if !(0.0..=self.width as f64).contains(&self.cx) || !(0.0..=self.height as f64).contains(&self.cy) {
            return Err(GeometryError::BadPrincipalPoint {
                cx: self.cx,
                cy: self.cy,
                width: self.width,
                height: self.height,
            });
        }
        let dev = rotation_deviation(&self.rotation);
        if dev >= 1e-6 {
            return Err(GeometryError::NotARotation(dev));
        }
        Ok(())
    }

    /// Builds a camera from a row-major 4×4 camera-to-world matrix.
    pub fn from_c2w(
        c2w: &[f64; 16],
        intrinsics: Intrinsics,
    ) -> Result<Self, GeometryError> {
        let m = Matrix4::from_row_slice(c2w);
        let rotation: Mat3 = m.fixed_view::<3, 3>(0, 0).into_owned();
        let translation: Vec3 = m.fixed_view::<3, 1>(0, 3).into_owned();
        let cam = Camera {
            fx: intrinsics.fx,
            fy: intrinsics.fy,
            cx: intrinsics.cx,
            cy: intrinsics.cy,
            k1: intrinsics.k1,
            k2: intrinsics.k2,
            rotation,
            translation,
            width: intrinsics.width,
            height: intrinsics.height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Builds a camera from a row-major 4×4 world-to-camera matrix.
    pub fn from_w2c(
        w2c: &[f64; 16],
        intrinsics: Intrinsics,
    ) -> Result<Self, GeometryError> {
        let m = Matrix4::from_row_slice(w2c);
        let r_wc: Mat3 = m.fixed_view::<3, 3>(0, 0).into_owned();
        let t_wc: Vec3 = m.fixed_view::<3, 1>(0, 3).into_owned();
        let rotation = r_wc.transpose();
        let translation = -(rotation * t_wc);
        let c2w = pose_matrix(&rotation, &translation);
        Self::from_c2w(&c2w, intrinsics)
    }

    pub fn c2w(&self) -> [f64; 16] {
        pose_matrix(&self.rotation, &self.translation)
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            k1: self.k1,
            k2: self.k2,
            width: self.width,
            height: self.height,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Undistorted pinhole projection of a world point to continuous pixel
    /// coordinates, using the same pixel-center convention as
    /// [`pixel_to_ray`]. Returns `None` for points at or behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        let pc = self.rotation.transpose() * (p - self.translation);
        if pc.z <= 0.0 {
            return None;
        }
        let u = self.fx * pc.x / pc.z + self.cx - 0.5;
        let v = self.fy * pc.y / pc.z + self.cy - 0.5;
        Some((u, v))
    }
}

/// Intrinsic parameters together with the image shape they belong to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub k1: f64,
    #[serde(default)]
    pub k2: f64,
    pub width: u32,
    pub height: u32,
}

/// Row-major 4×4 pose with bottom row (0, 0, 0, 1).
pub fn pose_matrix(rotation: &Mat3, translation: &Vec3) -> [f64; 16] {
    let mut out = [0.0; 16];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 4 + c] = rotation[(r, c)];
        }
        out[r * 4 + 3] = translation[r];
    }
    out[15] = 1.0;
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    /// Normalizes `direction`; the ray spans `[0, ∞)`.
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        Ray { origin, direction: direction.normalize(), t_near: 0.0, t_far: f64::INFINITY }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisAngle {
    pub axis: Vec3,
    pub angle: f64,
}

impl AxisAngle {
    pub fn new(axis: Vec3, angle: f64) -> Self {
        let n = axis.norm();
        let axis = if n > 0.0 { axis / n } else { Vec3::z() };
        AxisAngle { axis, angle }
    }
}

fn skew_vector(r: &Mat3) -> Vec3 {
    Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)])
}

/// Rodrigues' formula.
pub fn aa_to_rotation(a: &AxisAngle) -> Mat3 {
    if a.angle == 0.0 {
        return Mat3::identity();
    }
    let v = a.axis;
    let k = Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0);
    let (s, c) = a.angle.sin_cos();
    Mat3::identity() + k * s + k * k * (1.0 - c)
}

/// Inverse of [`aa_to_rotation`]. The angle is recovered as
/// `atan2(|skew|/2, (tr−1)/2)`, which equals `arccos((tr−1)/2)` on SO(3)
/// but keeps full precision near 0 and π.
pub fn rotation_to_aa(r: &Mat3) -> AxisAngle {
    let w = skew_vector(r);
    let sin = 0.5 * w.norm();
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let angle = sin.atan2(cos);
    if angle < 1e-12 {
        return AxisAngle { axis: Vec3::z(), angle: 0.0 };
    }
    if sin > 1e-4 || cos > 0.0 {
        return AxisAngle { axis: w / w.norm(), angle };
    }
    // Near π the skew part vanishes; read the axis from the symmetric part
    // (R + Rᵀ)/2 − cos·I = (1 − cos)·v·vᵀ, using its largest diagonal.
    let sym = (r + r.transpose()) * 0.5 - Mat3::identity() * cos;
    let b = sym / (1.0 - cos);
    let i = (0..3).max_by(|&a, &c| b[(a, a)].total_cmp(&b[(c, c)])).unwrap();
    let mut axis: Vec3 = b.column(i).into_owned() / b[(i, i)].max(0.0).sqrt();
    axis.normalize_mut();
    if axis.dot(&w) < 0.0 {
        axis = -axis;
    }
    AxisAngle { axis, angle }
}

/// Geodesic distance between two rotations, in `[0, π]`.
pub fn rotation_distance(r1: &Mat3, r2: &Mat3) -> f64 {
    rotation_to_aa(&(r2.transpose() * r1)).angle
}

/// Squared Euclidean distance `‖t2 − t1‖²`.
pub fn translation_distance(t1: &Vec3, t2: &Vec3) -> f64 {
    (t2 - t1).norm_squared()
}

/// Scales the rotation angle of `r` by `s`, keeping its axis.
pub fn reduce_angle(r: &Mat3, s: f64) -> Mat3 {
    let aa = rotation_to_aa(r);
    aa_to_rotation(&AxisAngle { axis: aa.axis, angle: s * aa.angle })
}

/// Rotation a fraction `s` of the way along the geodesic from `r1` to `r2`.
pub fn intermediate_rotation(r1: &Mat3, r2: &Mat3, s: f64) -> Mat3 {
    reduce_angle(&(r2 * r1.transpose()), s) * r1
}

/// Ray through the center of pixel `(u, v)`. Radial distortion is applied
/// forward to the normalized coordinates before forming the direction.
pub fn pixel_to_ray(cam: &Camera, u: f64, v: f64) -> Result<Ray, GeometryError> {
    if !u.is_finite() || !v.is_finite() {
        return Err(GeometryError::NonFinitePixel(u, v));
    }
    Ok(pixel_to_ray_unchecked(cam, u, v))
}

pub(crate) fn pixel_to_ray_unchecked(cam: &Camera, u: f64, v: f64) -> Ray {
    let x = (u + 0.5 - cam.cx) / cam.fx;
    let y = (v + 0.5 - cam.cy) / cam.fy;
    let (xd, yd) = if cam.k1 == 0.0 && cam.k2 == 0.0 {
        (x, y)
    } else {
        let r2 = x * x + y * y;
        let f = 1.0 + cam.k1 * r2 + cam.k2 * r2 * r2;
        (x * f, y * f)
    };
    Ray::new(cam.translation, cam.rotation * Vec3::new(xd, yd, 1.0))
}

/// Rotation about a unit axis; convenience for fixtures and rigs.
pub fn rotation_about(axis: Vec3, angle: f64) -> Mat3 {
    aa_to_rotation(&AxisAngle::new(axis, angle))
}

/// Camera-to-world rotation for a camera at `eye` looking at `target`.
/// Camera axes follow the +z-forward, +y-down image convention.
pub fn look_at(eye: &Vec3, target: &Vec3, up: &Vec3) -> Mat3 {
    let forward = (target - eye).normalize();
    let mut right = forward.cross(up);
    if right.norm() < 1e-12 {
        right = forward.cross(&Vec3::x());
    }
    let right = right.normalize();
    let down = forward.cross(&right);
    Mat3::from_columns(&[right, down, forward])
}

pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a < 0.0 {
        a += 2.0 * PI;
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut impl Rng) -> Mat3 {
        let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        rotation_about(axis, rng.gen_range(0.0..PI))
    }

    fn rot_z(a: f64) -> Mat3 {
        rotation_about(Vec3::z(), a)
    }

    #[test]
    fn zero_angle_is_identity() {
        let r = aa_to_rotation(&AxisAngle { axis: Vec3::new(0.3, -0.2, 0.9).normalize(), angle: 0.0 });
        assert_eq!(r, Mat3::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = aa_to_rotation(&AxisAngle { axis: Vec3::z(), angle: PI / 2.0 });
        let expected = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((r - expected).amax() < 1e-15);
        let aa = rotation_to_aa(&expected);
        assert!((aa.axis - Vec3::z()).norm() < 1e-15);
        assert!((aa.angle - PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn identity_has_zero_angle() {
        let aa = rotation_to_aa(&Mat3::identity());
        assert_eq!(aa.angle, 0.0);
        assert_eq!(aa.axis, Vec3::z());
    }

    #[test]
    fn half_turn_about_x_uses_symmetric_branch() {
        let r = Mat3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
        let aa = rotation_to_aa(&r);
        assert!((aa.angle - PI).abs() < 1e-15);
        assert!((aa.axis.abs() - Vec3::x()).norm() < 1e-15);
        assert!((aa_to_rotation(&aa) - r).amax() < 1e-15);
    }

    #[test]
    fn round_trip_random_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let r = random_rotation(&mut rng);
            let back = aa_to_rotation(&rotation_to_aa(&r));
            worst = worst.max((back - r).amax());
            assert!(is_rotation(&back));
            assert!((back.determinant() - 1.0).abs() < 1e-12);
        }
        assert!(worst < 1e-9, "worst {worst}");
    }

    #[test]
    fn round_trip_near_pi_and_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for &angle in &[PI, PI - 1e-9, PI - 1e-5, PI - 1e-3, 1e-10, 1e-7, 1e-3] {
            for _ in 0..50 {
                let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                let r = rotation_about(axis, angle);
                let back = aa_to_rotation(&rotation_to_aa(&r));
                assert!((back - r).amax() < 1e-9, "angle {angle}");
            }
        }
    }

    #[test]
    fn rotation_distance_cases() {
        let r = rot_z(0.4) * rotation_about(Vec3::x(), 1.1);
        assert_eq!(rotation_distance(&r, &r), 0.0);
        assert!((rotation_distance(&Mat3::identity(), &rot_z(PI / 2.0)) - PI / 2.0).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (a, b, c) = (random_rotation(&mut rng), random_rotation(&mut rng), random_rotation(&mut rng));
            let ab = rotation_distance(&a, &b);
            assert!((ab - rotation_distance(&b, &a)).abs() < 1e-12);
            assert!(ab <= rotation_distance(&a, &c) + rotation_distance(&c, &b) + 1e-12);
        }
    }

    #[test]
    fn translation_distance_is_squared() {
        let t = Vec3::new(1.0, -2.0, 0.5);
        assert_eq!(translation_distance(&t, &t), 0.0);
        assert_eq!(translation_distance(&Vec3::zeros(), &Vec3::new(1.0, 2.0, 2.0)), 9.0);
        let u = Vec3::new(-0.3, 4.0, 2.0);
        assert_eq!(translation_distance(&t, &u), translation_distance(&u, &t));
    }

    #[test]
    fn reduce_angle_cases() {
        let r = rot_z(PI / 2.0);
        assert!((reduce_angle(&r, 0.0) - Mat3::identity()).amax() < 1e-15);
        assert!((reduce_angle(&r, 1.0) - r).amax() < 1e-15);
        assert!((reduce_angle(&r, 0.5) - rot_z(PI / 4.0)).amax() < 1e-15);
    }

    #[test]
    fn intermediate_rotation_endpoints_and_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let r1 = random_rotation(&mut rng);
            let r2 = random_rotation(&mut rng);
            assert!((intermediate_rotation(&r1, &r2, 0.0) - r1).amax() < 1e-12);
            assert!((intermediate_rotation(&r1, &r2, 1.0) - r2).amax() < 1e-9);
            let total = rotation_distance(&r1, &r2);
            if total > PI - 0.1 {
                continue;
            }
            let mid = intermediate_rotation(&r1, &r2, 0.5);
            let d1 = rotation_distance(&mid, &r1);
            let d2 = rotation_distance(&mid, &r2);
            assert!((d1 - d2).abs() < 1e-9);
            let s: f64 = rng.gen();
            let rs = intermediate_rotation(&r1, &r2, s);
            assert!((rotation_distance(&rs, &r1) - s * total).abs() < 1e-9);
        }
    }

    fn test_camera() -> Camera {
        Camera::new(50.0, 60.0, 32.0, 24.0, rotation_about(Vec3::new(1.0, 2.0, 3.0), 0.7), Vec3::new(1.0, 2.0, 3.0), 64, 48)
            .unwrap()
    }

    #[test]
    fn principal_point_ray_follows_optical_axis() {
        let cam = test_camera();
        let ray = pixel_to_ray(&cam, cam.cx - 0.5, cam.cy - 0.5).unwrap();
        assert!((ray.direction - cam.rotation * Vec3::z()).norm() < 1e-15);
        assert_eq!(ray.origin, cam.translation);
        let distorted = cam.clone().with_distortion(0.1, 0.0);
        let ray_d = pixel_to_ray(&distorted, cam.cx - 0.5, cam.cy - 0.5).unwrap();
        assert_eq!(ray.direction, ray_d.direction);
    }

    #[test]
    fn corner_ray_matches_hand_evaluated_distortion() {
        let cam = test_camera().with_distortion(0.1, 0.0);
        let ray = pixel_to_ray(&cam, 0.0, 0.0).unwrap();
        let x = (0.5 - 32.0) / 50.0;
        let y = (0.5 - 24.0) / 60.0;
        let r2 = x * x + y * y;
        let scale = 1.0 + 0.1 * r2;
        let local = Vec3::new(x * scale, y * scale, 1.0);
        let expected = (cam.rotation * local).normalize();
        assert!((ray.direction - expected).norm() < 1e-14);
        assert!((ray.direction.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_pixel_rejected() {
        let cam = test_camera();
        assert!(matches!(pixel_to_ray(&cam, f64::NAN, 0.0), Err(GeometryError::NonFinitePixel(..))));
        assert!(pixel_to_ray(&cam, 0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn project_inverts_pixel_to_ray() {
        let cam = test_camera();
        for (u, v) in [(0.0, 0.0), (10.0, 40.0), (63.0, 47.0)] {
            let ray = pixel_to_ray(&cam, u, v).unwrap();
            let (pu, pv) = cam.project(&ray.at(3.7)).unwrap();
            assert!((pu - u).abs() < 1e-9 && (pv - v).abs() < 1e-9);
        }
    }

    #[test]
    fn camera_invariants_enforced() {
        let r = Mat3::identity();
        assert!(matches!(Camera::new(0.0, 1.0, 1.0, 1.0, r, Vec3::zeros(), 4, 4), Err(GeometryError::BadFocal { .. })));
        assert!(matches!(
            Camera::new(1.0, 1.0, 5.0, 1.0, r, Vec3::zeros(), 4, 4),
            Err(GeometryError::BadPrincipalPoint { .. })
        ));
        assert!(matches!(Camera::new(1.0, 1.0, 1.0, 1.0, r * 2.0, Vec3::zeros(), 4, 4), Err(GeometryError::NotARotation(_))));
        let flip = Mat3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Camera::new(1.0, 1.0, 1.0, 1.0, flip, Vec3::zeros(), 4, 4).is_err());
    }

    #[test]
    fn w2c_conversion_matches_c2w() {
        let cam = test_camera();
        let c2w = Matrix4::from_row_slice(&cam.c2w());
        let w2c = c2w.try_inverse().unwrap();
        let mut rows = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                rows[r * 4 + c] = w2c[(r, c)];
            }
        }
        let back = Camera::from_w2c(&rows, cam.intrinsics()).unwrap();
        assert!((back.rotation - cam.rotation).amax() < 1e-12);
        assert!((back.translation - cam.translation).norm() < 1e-12);
    }

    #[test]
    fn look_at_points_forward() {
        let eye = Vec3::new(3.0, 1.0, 2.0);
        let r = look_at(&eye, &Vec3::zeros(), &Vec3::z());
        assert!(is_rotation(&r));
        assert!((r * Vec3::z() - (-eye).normalize()).norm() < 1e-12);
    }
}
