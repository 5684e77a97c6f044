//! Small fixed-size linear algebra: 3x3 SVD, polar decomposition, the
//! singular-value soft clamp and the reverse-mode rules for all of them.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Mat3 = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;

/// Sharpness of the softplus used by [`soft_clamp`].
pub const SOFT_CLAMP_BETA: f64 = 20.0;

/// Regularizer for `1 / (s_i^2 - s_j^2)` in the SVD adjoint.
pub const SVD_GAP_EPS: f64 = 1e-6;

/// Singular value decomposition `m = u * diag(sigma) * v^T`.
///
/// `sigma` is non-negative and sorted in descending order; `u` and `v` are
/// orthogonal but may be reflections.
#[derive(Clone, Debug, PartialEq)]
pub struct Svd3 {
    pub u: Mat3,
    pub sigma: Vec3,
    pub v: Mat3,
}

impl Svd3 {
    pub fn reconstruct(&self) -> Mat3 {
        self.u * Mat3::from_diagonal(&self.sigma) * self.v.transpose()
    }
}

pub fn is_finite(m: &Mat3) -> bool {
    m.iter().all(|x| x.is_finite())
}

pub fn svd3(m: &Mat3) -> Result<Svd3> {
    if !is_finite(m) {
        return Err(Error::NonFinite);
    }
    let svd = m.svd(true, true);
    let u = svd.u.ok_or(Error::NonFinite)?;
    let v_t = svd.v_t.ok_or(Error::NonFinite)?;
    let v = v_t.transpose();
    let s = svd.singular_values;

    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));

    let mut out = Svd3 {
        u: Mat3::zeros(),
        sigma: Vec3::zeros(),
        v: Mat3::zeros(),
    };
    for (dst, &src) in order.iter().enumerate() {
        let mut uc = u.column(src).into_owned();
        let mut sc = s[src];
        if sc < 0.0 {
            sc = -sc;
            uc = -uc;
        }
        out.u.set_column(dst, &uc);
        out.v.set_column(dst, &v.column(src));
        out.sigma[dst] = sc;
    }
    Ok(out)
}

/// Polar decomposition `f = r * s` together with the rotation-only SVD it
/// was built from (`u`, `v` proper rotations, `sigma` signed so that
/// `f = u * diag(sigma) * v^T`).
#[derive(Clone, Debug)]
pub struct Polar {
    pub r: Mat3,
    pub s: Mat3,
    pub u: Mat3,
    pub sigma: Vec3,
    pub v: Mat3,
    /// `det(f) <= 0`; the smallest singular value carries the sign.
    pub inverted: bool,
}

pub fn polar_decompose(f: &Mat3) -> Result<Polar> {
    let Svd3 {
        mut u,
        mut sigma,
        mut v,
    } = svd3(f)?;
    if u.determinant() < 0.0 {
        let c = -u.column(2);
        u.set_column(2, &c);
        sigma[2] = -sigma[2];
    }
    if v.determinant() < 0.0 {
        let c = -v.column(2);
        v.set_column(2, &c);
        sigma[2] = -sigma[2];
    }
    let inverted = sigma[2] < 0.0 || f.determinant() <= 0.0;
    let r = u * v.transpose();
    let s = v * Mat3::from_diagonal(&sigma) * v.transpose();
    let s = 0.5 * (s + s.transpose());
    Ok(Polar {
        r,
        s,
        u,
        sigma,
        v,
        inverted,
    })
}

/// Reverse-mode rule for the rotation factor of the polar decomposition.
///
/// Uses `dR = U [(dP - dP^T) / (s_i + s_j)] V^T` with `dP = U^T dF V`,
/// which stays bounded at repeated singular values (e.g. `F = I`).
pub fn polar_rotation_backward(polar: &Polar, grad_r: &Mat3) -> Mat3 {
    let gp = polar.u.transpose() * grad_r * polar.v;
    let mut k = Mat3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            if i == j {
                continue;
            }
            let mut den = polar.sigma[i] + polar.sigma[j];
            if den.abs() < 1e-9 {
                den = 1e-9_f64.copysign(den);
            }
            k[(i, j)] = (gp[(i, j)] - gp[(j, i)]) / den;
        }
    }
    polar.u * k * polar.v.transpose()
}

#[inline]
fn softplus(x: f64, beta: f64) -> f64 {
    let bx = beta * x;
    (bx.max(0.0) + (-bx.abs()).exp().ln_1p()) / beta
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Smooth clamp of a scalar into `[lo, hi]`: smooth max with `lo` followed
/// by smooth min with `hi`, both built from a softplus of sharpness
/// [`SOFT_CLAMP_BETA`].
#[inline]
pub fn soft_clamp(x: f64, lo: f64, hi: f64) -> f64 {
    let y = lo + softplus(x - lo, SOFT_CLAMP_BETA);
    hi - softplus(hi - y, SOFT_CLAMP_BETA)
}

/// Derivative of [`soft_clamp`] with respect to `x`.
#[inline]
pub fn soft_clamp_grad(x: f64, lo: f64, hi: f64) -> f64 {
    let y = lo + softplus(x - lo, SOFT_CLAMP_BETA);
    sigmoid(SOFT_CLAMP_BETA * (hi - y)) * sigmoid(SOFT_CLAMP_BETA * (x - lo))
}

pub fn soft_clamp_singular(sigma: &Vec3, lo: f64, hi: f64) -> Result<Vec3> {
    if !(lo < hi) || lo <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "soft clamp needs 0 < lo < hi, got [{lo}, {hi}]"
        )));
    }
    Ok(sigma.map(|s| soft_clamp(s, lo, hi)))
}

/// Upstream gradient with respect to the three SVD factors.
#[derive(Clone, Debug)]
pub struct SvdGrad {
    pub u: Mat3,
    pub sigma: Vec3,
    pub v: Mat3,
}

impl SvdGrad {
    pub fn zeros() -> Self {
        SvdGrad {
            u: Mat3::zeros(),
            sigma: Vec3::zeros(),
            v: Mat3::zeros(),
        }
    }
}

/// Pulls gradients on `(U, sigma, V)` back to the decomposed matrix.
///
/// Square full-rank form of the SVD adjoint; the `1/(s_j^2 - s_i^2)` factor
/// is replaced by `d / (d^2 + eps^2)` so repeated singular values give a
/// bounded (if biased) result.
pub fn svd_backward(svd: &Svd3, grad: &SvdGrad) -> Mat3 {
    let s = &svd.sigma;
    let mut gap = Mat3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                let d = s[j] * s[j] - s[i] * s[i];
                gap[(i, j)] = d / (d * d + SVD_GAP_EPS * SVD_GAP_EPS);
            }
        }
    }
    let ut_gu = svd.u.transpose() * grad.u;
    let vt_gv = svd.v.transpose() * grad.v;
    let j = gap.component_mul(&(ut_gu - ut_gu.transpose()));
    let k = gap.component_mul(&(vt_gv - vt_gv.transpose()));
    let sig = Mat3::from_diagonal(s);
    let inner = j * sig + Mat3::from_diagonal(&grad.sigma) + sig * k;
    svd.u * inner * svd.v.transpose()
}

/// Cofactor matrix, `det(m) * m^{-T}` without a division.
pub fn cofactor(m: &Mat3) -> Mat3 {
    let c0 = m.column(1).cross(&m.column(2));
    let c1 = m.column(2).cross(&m.column(0));
    let c2 = m.column(0).cross(&m.column(1));
    Mat3::from_columns(&[c0, c1, c2])
}

/// Frobenius inner product.
#[inline]
pub fn ddot(a: &Mat3, b: &Mat3) -> f64 {
    a.component_mul(b).sum()
}

pub fn rotation_z(theta: f64) -> Mat3 {
    let (s, c) = theta.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Rotation by `angle` about the (normalized) `axis`.
pub fn rotation_axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    let a = axis.normalize();
    let (s, c) = angle.sin_cos();
    let k = Mat3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0);
    Mat3::identity() + s * k + (1.0 - c) * k * k
}
