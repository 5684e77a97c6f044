//! Differentiable MLS-MPM with learnable control deformation gradients.

mod adjoint;
pub mod kernel;
mod sim;
mod step;
pub mod stress;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat3, Vec3};

pub use adjoint::{adjoint, AdjointResult, FinalGrad, StateGrad};
pub use sim::{simulate, Tape, Trajectory};
pub use step::{apply_control, g2p, grid_update, p2g, p2g_mass, step, StepFlags};
pub use stress::compute_stress;

/// Cubic background lattice with `resolution` cells (`resolution + 1` nodes)
/// per axis, spanning `[0, resolution * dx]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub resolution: usize,
    pub dx: f64,
    /// Interior margin in cells; particles must stay at least this far from
    /// the domain faces and nodes inside it are sticky.
    pub margin: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            resolution: 32,
            dx: 1.0,
            margin: 2.0,
        }
    }
}

impl GridSpec {
    pub fn new(resolution: usize, dx: f64) -> Self {
        GridSpec {
            resolution,
            dx,
            margin: 2.0,
        }
    }

    pub fn nodes_per_axis(&self) -> usize {
        self.resolution + 1
    }

    pub fn node_count(&self) -> usize {
        self.nodes_per_axis().pow(3)
    }

    pub fn inv_dx(&self) -> f64 {
        1.0 / self.dx
    }

    /// Flat index of a node, `None` when outside the lattice.
    #[inline]
    pub fn node_index(&self, n: [i64; 3]) -> Option<usize> {
        let m = self.nodes_per_axis() as i64;
        if n.iter().any(|&c| c < 0 || c >= m) {
            return None;
        }
        Some(((n[0] * m + n[1]) * m + n[2]) as usize)
    }

    pub fn node_coords(&self, index: usize) -> [i64; 3] {
        let m = self.nodes_per_axis();
        [(index / (m * m)) as i64, ((index / m) % m) as i64, (index % m) as i64]
    }

    pub fn node_position(&self, index: usize) -> Vec3 {
        let c = self.node_coords(index);
        Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64) * self.dx
    }

    #[inline]
    pub fn is_boundary(&self, n: [i64; 3]) -> bool {
        let bound = self.margin.floor() as i64;
        let res = self.resolution as i64;
        n.iter().any(|&c| c < bound || c > res - bound)
    }

    pub fn lower(&self) -> f64 {
        self.margin * self.dx
    }

    pub fn upper(&self) -> f64 {
        (self.resolution as f64 - self.margin) * self.dx
    }

    pub fn inside_margin(&self, x: &Vec3) -> bool {
        let (lo, hi) = (self.lower(), self.upper());
        x.iter().all(|&c| c >= lo && c <= hi)
    }

    /// Domain centre; world coordinates are lattice coordinates minus this.
    pub fn center(&self) -> Vec3 {
        Vec3::repeat(0.5 * self.resolution as f64 * self.dx)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 5 {
            return Err(Error::config("grid.resolution", "must be at least 5"));
        }
        if !(self.dx > 0.0 && self.dx.is_finite()) {
            return Err(Error::config("grid.dx", "must be positive"));
        }
        if !(self.margin >= 1.5 && self.margin < 0.5 * self.resolution as f64) {
            return Err(Error::config("grid.margin", "must be in [1.5, resolution/2)"));
        }
        Ok(())
    }
}

/// Material and integrator parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    pub dt: f64,
    pub mu: f64,
    pub lambda: f64,
    pub drag: f64,
    pub external_force: [f64; 3],
    pub density: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            dt: 1.0 / 120.0,
            mu: 1.0e3,
            lambda: 2.0e4,
            drag: 0.5,
            external_force: [0.0; 3],
            density: 60.0,
        }
    }
}

impl SimParams {
    pub fn external_force(&self) -> Vec3 {
        Vec3::from(self.external_force)
    }

    /// Lamé parameters from Young's modulus and Poisson's ratio.
    pub fn lame_from_young(e: f64, nu: f64) -> (f64, f64) {
        let mu = e / (2.0 * (1.0 + nu));
        let lambda = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
        (mu, lambda)
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("sim.dt", self.dt > 0.0),
            ("sim.mu", self.mu > 0.0),
            ("sim.lambda", self.lambda > 0.0),
            ("sim.drag", (0.0..=1.0).contains(&self.drag)),
            ("sim.density", self.density > 0.0),
            ("sim.external_force", self.external_force.iter().all(|f| f.is_finite())),
        ];
        for (key, ok) in checks {
            if !ok {
                return Err(Error::config(key, "out of range"));
            }
        }
        Ok(())
    }
}

/// Anchor particle arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleState {
    pub x: Vec<Vec3>,
    pub v: Vec<Vec3>,
    pub c: Vec<Mat3>,
    pub f: Vec<Mat3>,
    pub mass: Vec<f64>,
}

impl ParticleState {
    /// Particles at rest (`v = 0`, `C = 0`, `F = I`).
    pub fn at_rest(x: Vec<Vec3>, mass: Vec<f64>) -> Self {
        let n = x.len();
        ParticleState {
            x,
            v: vec![Vec3::zeros(); n],
            c: vec![Mat3::zeros(); n],
            f: vec![Mat3::identity(); n],
            mass,
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        crate::par::sum(&self.mass)
    }

    pub fn kinetic_energy(&self) -> f64 {
        self.mass
            .iter()
            .zip(&self.v)
            .map(|(m, v)| 0.5 * m * v.norm_squared())
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x.len();
        if self.v.len() != n || self.c.len() != n || self.f.len() != n || self.mass.len() != n {
            return Err(Error::InvalidArgument("particle arrays differ in length".into()));
        }
        if let Some(i) = self.mass.iter().position(|&m| !(m > 0.0)) {
            return Err(Error::InvalidArgument(format!("particle {i} has non-positive mass")));
        }
        Ok(())
    }
}

/// Per-particle control increments added to `F` on every `stride`-th step.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlField {
    pub stride: usize,
    /// `slots[k][p]` is applied at step `k * stride`.
    pub slots: Vec<Vec<Mat3>>,
}

impl ControlField {
    pub fn zeros(n_particles: usize, steps: usize, stride: usize) -> Self {
        let stride = stride.max(1);
        ControlField {
            stride,
            slots: vec![vec![Mat3::zeros(); n_particles]; steps.div_ceil(stride)],
        }
    }

    pub fn slot_for_step(&self, step: usize) -> Option<usize> {
        step.is_multiple_of(self.stride)
            .then_some(step / self.stride)
            .filter(|&k| k < self.slots.len())
    }

    pub fn n_particles(&self) -> usize {
        self.slots.first().map_or(0, |s| s.len())
    }

    /// Number of scalar parameters.
    pub fn len(&self) -> usize {
        self.slots.len() * self.n_particles() * 9
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major flattening `[slot][particle][row][col]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for slot in &self.slots {
            for m in slot {
                for r in 0..3 {
                    for c in 0..3 {
                        out.push(m[(r, c)]);
                    }
                }
            }
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.len(), "control vector length");
        let mut it = flat.iter();
        for slot in &mut self.slots {
            for m in slot.iter_mut() {
                for r in 0..3 {
                    for c in 0..3 {
                        m[(r, c)] = *it.next().unwrap();
                    }
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for slot in &mut self.slots {
            for m in slot.iter_mut() {
                *m *= factor;
            }
        }
    }
}

/// Eulerian node arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct GridState {
    pub spec: GridSpec,
    pub mass: Vec<f64>,
    pub momentum: Vec<Vec3>,
    /// Node velocities; filled by [`grid_update`].
    pub velocity: Vec<Vec3>,
}

impl GridState {
    pub fn zeros(spec: GridSpec) -> Self {
        let n = spec.node_count();
        GridState {
            spec,
            mass: vec![0.0; n],
            momentum: vec![Vec3::zeros(); n],
            velocity: vec![Vec3::zeros(); n],
        }
    }

    pub fn total_mass(&self) -> f64 {
        crate::par::sum(&self.mass)
    }
}
