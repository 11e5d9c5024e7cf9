//! Real spherical harmonics up to degree 2 and SH color evaluation.

use crate::geometry::Vec3;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];

/// Coefficients per color channel.
pub const SH_COEFFS: usize = 9;
/// Coefficients per voxel (three channels).
pub const SH_DIM: usize = 3 * SH_COEFFS;

/// Basis values ordered l=0; l=1 (m=−1,0,1); l=2 (m=−2..2).
pub fn sh_basis(dir: &Vec3) -> [f64; SH_COEFFS] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        SH_C0,
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * x * y,
        SH_C2[1] * y * z,
        SH_C2[2] * (2.0 * zz - xx - yy),
        SH_C2[3] * x * z,
        SH_C2[4] * (xx - yy),
    ]
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Pre-activation color per channel; `sh` is channel-major (R0..R8, G0..G8, B0..B8).
#[inline]
pub fn sh_logits(sh: &[f64], basis: &[f64; SH_COEFFS]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let coeffs = &sh[c * SH_COEFFS..(c + 1) * SH_COEFFS];
        *o = coeffs.iter().zip(basis).map(|(a, b)| a * b).sum();
    }
    out
}

/// Sigmoid-activated view-dependent RGB.
pub fn eval_color(sh: &[f64], dir: &Vec3) -> [f64; 3] {
    let logits = sh_logits(sh, &sh_basis(dir));
    logits.map(sigmoid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut impl Rng) -> Vec3 {
        // uniform on the sphere via z/phi sampling
        let z: f64 = rng.gen_range(-1.0..1.0);
        let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let r = (1.0 - z * z).sqrt();
        Vec3::new(r * phi.cos(), r * phi.sin(), z)
    }

    #[test]
    fn dc_term_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let b = sh_basis(&random_unit(&mut rng));
            assert!((b[0] - 0.2820948).abs() < 1e-7);
        }
    }

    #[test]
    fn z_axis_kills_l1_except_m0() {
        let b = sh_basis(&Vec3::z());
        assert_eq!(b[1], 0.0);
        assert_eq!(b[3], 0.0);
        assert!(b[2] > 0.0);
    }

    #[test]
    fn monte_carlo_orthonormality() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let mut gram = [[0.0f64; SH_COEFFS]; SH_COEFFS];
        for _ in 0..n {
            let b = sh_basis(&random_unit(&mut rng));
            for i in 0..SH_COEFFS {
                for j in 0..SH_COEFFS {
                    gram[i][j] += b[i] * b[j];
                }
            }
        }
        let scale = 4.0 * std::f64::consts::PI / n as f64;
        for (i, row) in gram.iter().enumerate() {
            for (j, g) in row.iter().enumerate() {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((g * scale - expected).abs() < 1e-2, "({i},{j}) = {}", g * scale);
            }
        }
    }

    #[test]
    fn zero_coefficients_give_mid_gray() {
        assert_eq!(eval_color(&[0.0; SH_DIM], &Vec3::x()), [0.5, 0.5, 0.5]);
    }

    #[test]
    fn dc_only_is_direction_independent() {
        let mut sh = [0.0; SH_DIM];
        sh[0] = 1.5;
        sh[SH_COEFFS] = -0.7;
        sh[2 * SH_COEFFS] = 3.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let c = eval_color(&sh, &random_unit(&mut rng));
            assert!((c[0] - sigmoid(1.5 * 0.2820948)).abs() < 1e-7);
            assert!((c[1] - sigmoid(-0.7 * 0.2820948)).abs() < 1e-7);
            assert!((c[2] - sigmoid(3.0 * 0.2820948)).abs() < 1e-7);
        }
    }

    #[test]
    fn even_bands_are_parity_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut sh = [0.0; SH_DIM];
        for c in 0..3 {
            sh[c * SH_COEFFS] = rng.gen_range(-1.0..1.0);
            for k in 4..9 {
                sh[c * SH_COEFFS + k] = rng.gen_range(-1.0..1.0);
            }
        }
        for _ in 0..20 {
            let d = random_unit(&mut rng);
            let a = eval_color(&sh, &d);
            let b = eval_color(&sh, &(-d));
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-15);
            }
        }
    }
}
