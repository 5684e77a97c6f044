//! Render Gaussians built from the stretch part of the deformation gradient.

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{polar_decompose, soft_clamp, soft_clamp_grad, Mat3, Polar, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussianParams {
    /// Base scale for anchors.
    pub sigma0: f64,
    /// Base scale for children.
    pub sigma_iso: f64,
    pub sv_min: f64,
    pub sv_max: f64,
    pub opacity: f64,
    pub color: [f64; 3],
}

impl Default for GaussianParams {
    fn default() -> Self {
        GaussianParams {
            sigma0: 0.055,
            sigma_iso: 0.036,
            sv_min: 0.35,
            sv_max: 2.5,
            opacity: 0.8,
            color: [0.27, 0.51, 0.71],
        }
    }
}

impl GaussianParams {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("gaussian.sigma0", self.sigma0 > 0.0),
            ("gaussian.sigma_iso", self.sigma_iso > 0.0),
            ("gaussian.sv_min", self.sv_min > 0.0 && self.sv_min < self.sv_max),
            ("gaussian.sv_max", self.sv_max.is_finite()),
            ("gaussian.opacity", self.opacity > 0.0 && self.opacity <= 1.0),
            ("gaussian.color", self.color.iter().all(|c| (0.0..=1.0).contains(c))),
        ];
        for (key, ok) in checks {
            if !ok {
                return Err(Error::config(key, "out of range"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderGaussian {
    pub mean: Vec3,
    pub cov: Mat3,
    pub opacity: f64,
    pub color: Vec3,
}

/// Forward state kept for the backward pass.
#[derive(Clone, Debug)]
pub struct CovState {
    pub polar: Polar,
    pub scale: f64,
    pub lo: f64,
    pub hi: f64,
}

impl CovState {
    fn h(&self, x: f64) -> f64 {
        soft_clamp(x, self.lo, self.hi).powi(2)
    }

    fn dh(&self, x: f64) -> f64 {
        2.0 * soft_clamp(x, self.lo, self.hi) * soft_clamp_grad(x, self.lo, self.hi)
    }

    /// Divided differences `(h_i - h_j) / (σ_i² - σ_j²)`, with the
    /// derivative limit on the diagonal and at near-coincident values.
    fn phi(&self) -> Mat3 {
        let s = &self.polar.sigma;
        Mat3::from_fn(|i, j| {
            let (a, b) = (s[i], s[j]);
            if i == j {
                return self.dh(a) / (2.0 * a);
            }
            let diff = a - b;
            let q = if diff.abs() < 1e-6 * (1.0 + a.abs().max(b.abs())) {
                self.dh(0.5 * (a + b))
            } else {
                (self.h(a) - self.h(b)) / diff
            };
            q / (a + b)
        })
    }
}

/// `Σ' = s² S_c²` where `S_c` is the stretch of `f` with its singular values
/// soft-clamped to `[lo, hi]`.
pub fn build_covariance(f: &Mat3, scale: f64, lo: f64, hi: f64) -> Result<(Mat3, CovState)> {
    if !(lo > 0.0 && lo < hi) {
        return Err(Error::InvalidArgument(format!("bad clamp range [{lo}, {hi}]")));
    }
    let polar = polar_decompose(f)?;
    let st = CovState { polar, scale, lo, hi };
    let h = st.polar.sigma.map(|x| st.h(x));
    let v = &st.polar.v;
    let cov = scale * scale * v * Mat3::from_diagonal(&h) * v.transpose();
    Ok((0.5 * (cov + cov.transpose()), st))
}

/// Reverse-mode map `∂L/∂Σ' -> ∂L/∂F`.
pub fn covariance_backward(st: &CovState, g_cov: &Mat3) -> Mat3 {
    let p = &st.polar;
    let gs = 0.5 * (g_cov + g_cov.transpose());
    let gp = st.scale * st.scale * p.v.transpose() * gs * p.v;
    let phi = st.phi();
    let mut gdp = Mat3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            gdp[(i, j)] = if i == j {
                st.dh(p.sigma[i]) * gp[(i, i)]
            } else {
                2.0 * p.sigma[i] * phi[(i, j)] * gp[(i, j)]
            };
        }
    }
    p.u * gdp * p.v.transpose()
}

/// Forward-mode map `dF -> dΣ'`.
pub fn covariance_jvp(st: &CovState, df: &Mat3) -> Mat3 {
    let p = &st.polar;
    let dp = p.u.transpose() * df * p.v;
    let phi = st.phi();
    let m = Mat3::from_fn(|i, j| {
        if i == j {
            st.dh(p.sigma[i]) * dp[(i, i)]
        } else {
            phi[(i, j)] * (p.sigma[i] * dp[(i, j)] + p.sigma[j] * dp[(j, i)])
        }
    });
    st.scale * st.scale * p.v * m * p.v.transpose()
}

/// Axis-length ratio `sqrt(λ_max / λ_min)`.
pub fn anisotropy(cov: &Mat3) -> f64 {
    let e = SymmetricEigen::new(0.5 * (cov + cov.transpose())).eigenvalues;
    let (lo, hi) = (e.min(), e.max());
    if lo <= 0.0 {
        return f64::INFINITY;
    }
    (hi / lo).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{ddot, rotation_axis_angle, rotation_z};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const S: f64 = 0.055;

    fn cov(f: &Mat3) -> Mat3 {
        build_covariance(f, S, 0.35, 2.5).unwrap().0
    }

    #[test]
    fn examples() {
        assert!((cov(&Mat3::identity()) - S * S * Mat3::identity()).norm() < 1e-12 * S * S + 1e-6 * S * S);
        let r = rotation_z(0.7);
        assert!((cov(&r) - cov(&Mat3::identity())).norm() < 1e-15);
        let c = cov(&Mat3::from_diagonal(&Vec3::new(2.0, 1.0, 1.0)));
        let expect = Mat3::from_diagonal(&Vec3::new(0.0121, 0.003025, 0.003025));
        assert!(((c - expect).norm() / expect.norm()) < 1e-3);
    }

    #[test]
    fn rotation_invariance_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let f = Mat3::identity() + Mat3::from_fn(|_, _| rng.random_range(-0.8..0.8));
            if f.determinant() <= 0.05 {
                continue;
            }
            let axis = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let rot = rotation_axis_angle(&axis, rng.random_range(0.0..6.0));
            let a = cov(&f);
            assert!((cov(&(rot * f)) - a).norm() <= 1e-9 * a.norm());
            let e = SymmetricEigen::new(a).eigenvalues;
            assert!(e.min() >= (S * 0.35).powi(2) * (1.0 - 1e-3));
            assert!(e.max() <= (S * 2.5).powi(2) * (1.0 + 1e-3));
        }
    }

    #[test]
    fn backward_examples() {
        let (_, st) = build_covariance(&Mat3::identity(), S, 0.35, 2.5).unwrap();
        assert_eq!(covariance_backward(&st, &Mat3::zeros()), Mat3::zeros());
        let f = Mat3::from_diagonal(&Vec3::new(1.3, 0.9, 1.1));
        let (_, st) = build_covariance(&f, S, 0.35, 2.5).unwrap();
        let mut g = Mat3::zeros();
        g[(0, 0)] = 1.0;
        let gf = covariance_backward(&st, &g);
        assert!((gf[(0, 0)] - 2.0 * S * S * 1.3).abs() < 1e-3 * 2.0 * S * S * 1.3);
    }

    #[test]
    fn backward_matches_fd_and_jvp() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut checked = 0;
        while checked < 200 {
            let f = Mat3::identity() + Mat3::from_fn(|_, _| rng.random_range(-0.6..0.6));
            if f.determinant() <= 0.1 {
                continue;
            }
            checked += 1;
            let g = Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let (_, st) = build_covariance(&f, S, 0.35, 2.5).unwrap();
            let gf = covariance_backward(&st, &g);
            let h = 1e-6;
            for r in 0..3 {
                for c in 0..3 {
                    let mut fp = f;
                    fp[(r, c)] += h;
                    let mut fm = f;
                    fm[(r, c)] -= h;
                    let fd = (ddot(&g, &cov(&fp)) - ddot(&g, &cov(&fm))) / (2.0 * h);
                    let err = (gf[(r, c)] - fd).abs() / fd.abs().max(1e-3 * S * S);
                    assert!(err < 1e-3, "({r},{c}) {} vs {fd}", gf[(r, c)]);
                }
            }
            let v = Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let lhs = ddot(&gf, &v);
            let rhs = ddot(&g, &covariance_jvp(&st, &v));
            assert!((lhs - rhs).abs() <= 1e-8 * lhs.abs().max(S * S));
        }
    }

    #[test]
    fn backward_at_identity_couples_shear() {
        // At F = I a symmetric shear changes Σ' to first order.
        let (_, st) = build_covariance(&Mat3::identity(), S, 0.35, 2.5).unwrap();
        let mut g = Mat3::zeros();
        g[(0, 1)] = 1.0;
        let gf = covariance_backward(&st, &g);
        let h = 1e-6;
        let mut fp = Mat3::identity();
        fp[(0, 1)] += h;
        let mut fm = Mat3::identity();
        fm[(0, 1)] -= h;
        let fd = (cov(&fp)[(0, 1)] - cov(&fm)[(0, 1)]) / (2.0 * h);
        assert!(fd.abs() > 1e-4);
        assert!((gf[(0, 1)] - fd).abs() < 1e-6 * fd.abs().max(1.0));
    }

    #[test]
    fn anisotropy_examples() {
        assert!((anisotropy(&(S * S * Mat3::identity())) - 1.0).abs() < 1e-12);
        let d = S * S * Mat3::from_diagonal(&Vec3::new(4.0, 1.0, 1.0));
        assert!((anisotropy(&d) - 2.0).abs() < 1e-12);
        let r = rotation_axis_angle(&Vec3::new(1.0, 2.0, 3.0), 0.9);
        assert!((anisotropy(&(r * d * r.transpose())) - 2.0).abs() < 1e-9);
    }
}
