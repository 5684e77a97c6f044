//! Fixed-corotational elasticity.

use crate::error::Result;
use crate::linalg::{cofactor, polar_decompose, polar_rotation_backward, Mat3, Polar};

/// Determinant below which an element is reported as degenerate.
pub const DEGENERATE_J: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Stress {
    /// First Piola-Kirchhoff stress.
    pub p: Mat3,
    /// `det(F) <= DEGENERATE_J`.
    pub degenerate: bool,
}

/// First Piola-Kirchhoff stress `2 mu (F - R) + lambda (J - 1) J F^{-T}`.
///
/// The volumetric term is evaluated as `lambda (J - 1) cof(F)`, which equals
/// the textbook form for `J > 0` and stays finite for collapsed elements.
pub fn compute_stress(f: &Mat3, mu: f64, lambda: f64) -> Result<Stress> {
    let polar = polar_decompose(f)?;
    let j = f.determinant();
    let p = 2.0 * mu * (f - polar.r) + lambda * (j - 1.0) * cofactor(f);
    Ok(Stress {
        p,
        degenerate: j <= DEGENERATE_J,
    })
}

/// Kirchhoff stress `P F^T = 2 mu (F - R) F^T + lambda J (J - 1) I`, the form
/// consumed by the MLS-MPM momentum transfer.
pub fn kirchhoff(f: &Mat3, polar: &Polar, mu: f64, lambda: f64) -> Mat3 {
    let j = f.determinant();
    2.0 * mu * (f - polar.r) * f.transpose() + Mat3::from_diagonal_element(lambda * j * (j - 1.0))
}

/// Pulls a gradient on the Kirchhoff stress back to `F`.
pub fn kirchhoff_backward(f: &Mat3, polar: &Polar, mu: f64, lambda: f64, g_tau: &Mat3) -> Mat3 {
    let j = f.determinant();
    let mut g = 2.0 * mu * (g_tau + g_tau.transpose()) * f;
    g -= 2.0 * mu * g_tau.transpose() * polar.r;
    let g_r = -2.0 * mu * g_tau * f;
    g += polar_rotation_backward(polar, &g_r);
    let g_j = lambda * (2.0 * j - 1.0) * g_tau.trace();
    g += g_j * cofactor(f);
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{ddot, rotation_z, Vec3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rest_and_rotation_are_stress_free() {
        let s = compute_stress(&Mat3::identity(), 1e3, 2e4).unwrap();
        assert!(s.p.norm() < 1e-12);
        let s = compute_stress(&rotation_z(0.7), 1e3, 2e4).unwrap();
        assert!(s.p.norm() < 1e-9);
    }

    #[test]
    fn uniaxial_stretch_matches_scalar_evaluation() {
        // F = diag(1.1, 1, 1): R = I, J = 1.1, F^{-T} = diag(1/1.1, 1, 1)
        let (mu, lambda) = (1e3, 2e4);
        let s = compute_stress(&Mat3::from_diagonal(&Vec3::new(1.1, 1.0, 1.0)), mu, lambda).unwrap();
        let j: f64 = 1.1;
        let vol = lambda * (j - 1.0) * j;
        let p11 = 2.0 * mu * 0.1 + vol / 1.1;
        let p22 = vol;
        assert!((s.p[(0, 0)] - p11).abs() < 1e-9);
        assert!((s.p[(1, 1)] - p22).abs() < 1e-9);
        assert!((s.p[(2, 2)] - p22).abs() < 1e-9);
        assert!(s.p[(0, 1)].abs() < 1e-12);
        assert!(!s.degenerate);
    }

    #[test]
    fn degenerate_element_is_flagged() {
        let s = compute_stress(&Mat3::from_diagonal(&Vec3::new(1.0, 1.0, 1e-10)), 1e3, 2e4).unwrap();
        assert!(s.degenerate);
        assert!(s.p.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn kirchhoff_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mu, lambda) = (1e3, 2e4);
        for _ in 0..20 {
            let f = Mat3::identity() + Mat3::from_fn(|_, _| rng.random_range(-0.3..0.3));
            let g = Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let polar = polar_decompose(&f).unwrap();
            let analytic = kirchhoff_backward(&f, &polar, mu, lambda, &g);
            let h = 1e-6;
            for i in 0..3 {
                for k in 0..3 {
                    let mut fp = f;
                    fp[(i, k)] += h;
                    let mut fm = f;
                    fm[(i, k)] -= h;
                    let tp = kirchhoff(&fp, &polar_decompose(&fp).unwrap(), mu, lambda);
                    let tm = kirchhoff(&fm, &polar_decompose(&fm).unwrap(), mu, lambda);
                    let fd = ddot(&g, &(tp - tm)) / (2.0 * h);
                    assert!((fd - analytic[(i, k)]).abs() < 1e-5 * (1.0 + analytic.norm()));
                }
            }
        }
    }
}
