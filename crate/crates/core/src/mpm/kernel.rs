//! Quadratic B-spline transfer stencil.

use crate::linalg::Vec3;

/// 3x3x3 quadratic B-spline stencil of one particle.
#[derive(Clone, Copy, Debug)]
pub struct Stencil {
    /// Lowest node index touched on each axis.
    pub base: [i64; 3],
    /// Position relative to `base`, in cells, each component in `[0.5, 1.5)`.
    pub fx: Vec3,
    /// Per-axis weights for node offsets 0, 1, 2.
    pub w: [[f64; 3]; 3],
    /// Derivatives of `w` with respect to `fx`.
    pub dw: [[f64; 3]; 3],
}

impl Stencil {
    pub fn new(x: &Vec3, inv_dx: f64) -> Self {
        let mut base = [0i64; 3];
        let mut fx = Vec3::zeros();
        let mut w = [[0.0; 3]; 3];
        let mut dw = [[0.0; 3]; 3];
        for a in 0..3 {
            let xg = x[a] * inv_dx;
            let b = (xg - 0.5).floor();
            base[a] = b as i64;
            let f = xg - b;
            fx[a] = f;
            w[a] = [
                0.5 * (1.5 - f).powi(2),
                0.75 - (f - 1.0).powi(2),
                0.5 * (f - 0.5).powi(2),
            ];
            dw[a] = [f - 1.5, -2.0 * (f - 1.0), f - 0.5];
        }
        Stencil { base, fx, w, dw }
    }

    #[inline]
    pub fn weight(&self, o: [usize; 3]) -> f64 {
        self.w[0][o[0]] * self.w[1][o[1]] * self.w[2][o[2]]
    }

    /// Gradient of the node weight with respect to `fx`.
    #[inline]
    pub fn weight_grad(&self, o: [usize; 3]) -> Vec3 {
        let (w, dw) = (&self.w, &self.dw);
        Vec3::new(
            dw[0][o[0]] * w[1][o[1]] * w[2][o[2]],
            w[0][o[0]] * dw[1][o[1]] * w[2][o[2]],
            w[0][o[0]] * w[1][o[1]] * dw[2][o[2]],
        )
    }

    /// Node position minus particle position, in cells.
    #[inline]
    pub fn offset(&self, o: [usize; 3]) -> Vec3 {
        Vec3::new(o[0] as f64, o[1] as f64, o[2] as f64) - self.fx
    }

    #[inline]
    pub fn node(&self, o: [usize; 3]) -> [i64; 3] {
        [
            self.base[0] + o[0] as i64,
            self.base[1] + o[1] as i64,
            self.base[2] + o[2] as i64,
        ]
    }
}

/// The 27 stencil offsets in a fixed order.
pub const OFFSETS: [[usize; 3]; 27] = {
    let mut out = [[0usize; 3]; 27];
    let mut n = 0;
    while n < 27 {
        out[n] = [n / 9, (n / 3) % 3, n % 3];
        n += 1;
    }
    out
};

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_of_unity() {
        for &x in &[2.0, 2.5, 3.1234, 7.999, 5.5] {
            let s = Stencil::new(&Vec3::new(x, x + 0.37, x - 0.21), 1.0);
            let total: f64 = OFFSETS.iter().map(|&o| s.weight(o)).sum();
            assert!((total - 1.0).abs() < 1e-12);
            let first_moment: Vec3 = OFFSETS.iter().map(|&o| s.weight(o) * s.offset(o)).sum();
            assert!(first_moment.norm() < 1e-12);
        }
    }

    #[test]
    fn node_centered_particle_weights() {
        let s = Stencil::new(&Vec3::new(4.0, 4.0, 4.0), 1.0);
        assert_eq!(s.base, [3, 3, 3]);
        assert_eq!(s.w[0], [0.125, 0.75, 0.125]);
        let s = Stencil::new(&Vec3::new(4.5, 4.5, 4.5), 1.0);
        assert_eq!(s.w[0], [0.5, 0.5, 0.0]);
    }

    #[test]
    fn weight_grad_matches_fd() {
        let x = Vec3::new(3.3, 4.71, 5.05);
        let s = Stencil::new(&x, 1.0);
        for &o in &OFFSETS {
            let g = s.weight_grad(o);
            for a in 0..3 {
                let h = 1e-7;
                let mut xp = x;
                xp[a] += h;
                let mut xm = x;
                xm[a] -= h;
                let fd = (Stencil::new(&xp, 1.0).weight(o) - Stencil::new(&xm, 1.0).weight(o)) / (2.0 * h);
                assert!((fd - g[a]).abs() < 1e-7);
            }
        }
    }
}
