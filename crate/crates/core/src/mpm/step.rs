//! One explicit MLS-MPM step: P2G scatter, grid update, G2P gather.

use rayon::prelude::*;

use super::kernel::{Stencil, OFFSETS};
use super::stress::{kirchhoff, DEGENERATE_J};
use super::{GridSpec, GridState, ParticleState, SimParams};
use crate::error::{Error, Result};
use crate::linalg::{polar_decompose, Mat3, Polar, Vec3};
use crate::par;

/// Diagnostics raised while stepping.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepFlags {
    /// Per particle and axis: advection was clamped to the interior margin.
    pub clamped: Vec<[bool; 3]>,
    /// Number of particles whose `det(F)` fell below the degeneracy floor.
    pub degenerate: usize,
}

impl StepFlags {
    pub fn any_clamped(&self) -> bool {
        self.clamped.iter().any(|c| c.iter().any(|&b| b))
    }
}

/// Per-particle quantities shared by the scatter and its adjoint.
pub(crate) struct ParticleCache {
    pub stencil: Stencil,
    pub polar: Polar,
    /// `-dt vol 4/dx^2 tau + m C`.
    pub affine: Mat3,
}

pub(crate) fn check_margin(x: &[Vec3], spec: &GridSpec) -> Result<()> {
    match x.iter().position(|p| !spec.inside_margin(p)) {
        Some(index) => Err(Error::OutsideMargin {
            index,
            position: x[index].into(),
        }),
        None => Ok(()),
    }
}

pub(crate) fn particle_cache(
    particles: &ParticleState,
    params: &SimParams,
    spec: &GridSpec,
) -> Result<Vec<ParticleCache>> {
    check_margin(&particles.x, spec)?;
    let inv_dx = spec.inv_dx();
    let d_inv = 4.0 * inv_dx * inv_dx;
    (0..particles.len())
        .into_par_iter()
        .map(|p| {
            let f = &particles.f[p];
            let polar = polar_decompose(f)?;
            let vol = particles.mass[p] / params.density;
            let tau = kirchhoff(f, &polar, params.mu, params.lambda);
            let affine = -params.dt * vol * d_inv * tau + particles.mass[p] * particles.c[p];
            Ok(ParticleCache {
                stencil: Stencil::new(&particles.x[p], inv_dx),
                polar,
                affine,
            })
        })
        .collect()
}

pub(crate) fn scatter(particles: &ParticleState, cache: &[ParticleCache], spec: &GridSpec) -> GridState {
    let n_nodes = spec.node_count();
    let dx = spec.dx;
    let (mass, momentum) = par::chunked_reduce(
        particles.len(),
        || (vec![0.0; n_nodes], vec![Vec3::zeros(); n_nodes]),
        |(gm, gp), p| {
            let pc = &cache[p];
            let m = particles.mass[p];
            let mv = m * particles.v[p];
            for &o in &OFFSETS {
                let w = pc.stencil.weight(o);
                let idx = spec.node_index(pc.stencil.node(o)).expect("stencil inside lattice");
                let dpos = pc.stencil.offset(o) * dx;
                gm[idx] += w * m;
                gp[idx] += w * (mv + pc.affine * dpos);
            }
        },
        |(am, ap), (bm, bp)| {
            par::add_assign(am, &bm);
            par::add_assign(ap, &bp);
        },
    );
    GridState {
        spec: *spec,
        mass,
        momentum,
        velocity: vec![Vec3::zeros(); n_nodes],
    }
}

/// Particle-to-grid transfer of mass and APIC momentum with the fused
/// MLS-MPM stress impulse.
pub fn p2g(particles: &ParticleState, params: &SimParams, spec: &GridSpec) -> Result<GridState> {
    particles.validate()?;
    let cache = particle_cache(particles, params, spec)?;
    Ok(scatter(particles, &cache, spec))
}

/// Mass-only deposit of point masses through the transfer kernel.
pub fn p2g_mass(x: &[Vec3], mass: &[f64], spec: &GridSpec) -> Result<Vec<f64>> {
    check_margin(x, spec)?;
    let n_nodes = spec.node_count();
    let inv_dx = spec.inv_dx();
    Ok(par::chunked_reduce(
        x.len(),
        || vec![0.0; n_nodes],
        |gm, p| {
            let s = Stencil::new(&x[p], inv_dx);
            for &o in &OFFSETS {
                let idx = spec.node_index(s.node(o)).expect("stencil inside lattice");
                gm[idx] += s.weight(o) * mass[p];
            }
        },
        |a, b| par::add_assign(a, &b),
    ))
}

/// Momentum to velocity, drag, external force and the sticky boundary.
pub fn grid_update(grid: &mut GridState, params: &SimParams) {
    let spec = grid.spec;
    let damp = 1.0 - params.drag * params.dt;
    let force = params.external_force() * params.dt;
    let (mass, momentum) = (&grid.mass, &grid.momentum);
    grid.velocity.par_iter_mut().enumerate().for_each(|(i, v)| {
        let m = mass[i];
        *v = if m > 0.0 && !spec.is_boundary(spec.node_coords(i)) {
            momentum[i] / m * damp + force
        } else {
            Vec3::zeros()
        };
    });
}

/// Control-augmented deformation update `(I + dt C)(F + F~)`.
#[inline]
pub fn apply_control(f: &Mat3, f_tilde: &Mat3, c: &Mat3, dt: f64) -> Mat3 {
    (Mat3::identity() + dt * c) * (f + f_tilde)
}

/// Grid-to-particle gather of velocity and affine velocity, advection and
/// the deformation update. `control` holds this step's `F~` (if any).
pub fn g2p(
    grid: &GridState,
    particles: &ParticleState,
    control: Option<&[Mat3]>,
    params: &SimParams,
) -> (ParticleState, StepFlags) {
    let spec = grid.spec;
    let inv_dx = spec.inv_dx();
    let d_inv = 4.0 * inv_dx * inv_dx;
    let (lo, hi) = (spec.lower(), spec.upper());
    let dt = params.dt;
    let out: Vec<(Vec3, Vec3, Mat3, Mat3, [bool; 3], bool)> = (0..particles.len())
        .into_par_iter()
        .map(|p| {
            let s = Stencil::new(&particles.x[p], inv_dx);
            let mut v = Vec3::zeros();
            let mut c = Mat3::zeros();
            for &o in &OFFSETS {
                let w = s.weight(o);
                let gv = grid.velocity[spec.node_index(s.node(o)).expect("stencil inside lattice")];
                v += w * gv;
                c += (d_inv * w) * gv * (s.offset(o) * spec.dx).transpose();
            }
            let mut x = particles.x[p] + dt * v;
            let mut clamped = [false; 3];
            for a in 0..3 {
                if x[a] < lo {
                    x[a] = lo;
                    clamped[a] = true;
                } else if x[a] > hi {
                    x[a] = hi;
                    clamped[a] = true;
                }
            }
            let zero = Mat3::zeros();
            let ft = control.map_or(&zero, |k| &k[p]);
            let f = apply_control(&particles.f[p], ft, &c, dt);
            let degenerate = f.determinant() <= DEGENERATE_J;
            (x, v, c, f, clamped, degenerate)
        })
        .collect();

    let mut next = ParticleState {
        x: Vec::with_capacity(out.len()),
        v: Vec::with_capacity(out.len()),
        c: Vec::with_capacity(out.len()),
        f: Vec::with_capacity(out.len()),
        mass: particles.mass.clone(),
    };
    let mut flags = StepFlags::default();
    for (x, v, c, f, clamped, degenerate) in out {
        next.x.push(x);
        next.v.push(v);
        next.c.push(c);
        next.f.push(f);
        flags.clamped.push(clamped);
        flags.degenerate += degenerate as usize;
    }
    (next, flags)
}

/// One full step `p2g -> grid_update -> g2p`.
pub fn step(
    particles: &ParticleState,
    control: Option<&[Mat3]>,
    params: &SimParams,
    spec: &GridSpec,
) -> Result<(ParticleState, GridState, StepFlags)> {
    let mut grid = p2g(particles, params, spec)?;
    grid_update(&mut grid, params);
    let (next, flags) = g2p(&grid, particles, control, params);
    Ok((next, grid, flags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec8() -> GridSpec {
        GridSpec::new(8, 1.0)
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, spec: &GridSpec) -> ParticleState {
        let (lo, hi) = (spec.lower() + 0.5, spec.upper() - 0.5);
        let x = (0..n).map(|_| Vec3::from_fn(|_, _| rng.random_range(lo..hi))).collect();
        let mass = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        let mut s = ParticleState::at_rest(x, mass);
        for p in 0..n {
            s.v[p] = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            s.f[p] += Mat3::from_fn(|_, _| rng.random_range(-0.1..0.1));
        }
        s
    }

    #[test]
    fn apply_control_examples() {
        let i = Mat3::identity();
        let z = Mat3::zeros();
        let f = Mat3::new(1.0, 0.2, 0.0, 0.0, 0.9, 0.1, 0.0, 0.0, 1.1);
        assert_eq!(apply_control(&f, &z, &z, 1.0 / 120.0), f);
        assert_eq!(apply_control(&i, &(0.1 * i), &z, 1.0 / 120.0), 1.1 * i);
        let c = Mat3::from_diagonal(&Vec3::new(1.0, 0.0, 0.0));
        let out = apply_control(&i, &z, &c, 1.0 / 120.0);
        let expected = Mat3::from_diagonal(&Vec3::new(1.0 + 1.0 / 120.0, 1.0, 1.0));
        assert!((out - expected).norm() < 1e-15);
    }

    #[test]
    fn single_particle_partition_of_unity() {
        let spec = spec8();
        let s = ParticleState::at_rest(vec![Vec3::new(4.0, 4.0, 4.0)], vec![1.0]);
        let grid = p2g(&s, &SimParams::default(), &spec).unwrap();
        assert!((grid.total_mass() - 1.0).abs() < 1e-15);
        let centre = spec.node_index([4, 4, 4]).unwrap();
        assert!((grid.mass[centre] - 0.75f64.powi(3)).abs() < 1e-15);
    }

    #[test]
    fn duplicate_particles_double_mass() {
        let spec = spec8();
        let x = Vec3::new(3.3, 4.1, 4.7);
        let one = p2g(
            &ParticleState::at_rest(vec![x], vec![1.5]),
            &SimParams::default(),
            &spec,
        )
        .unwrap();
        let two = p2g(
            &ParticleState::at_rest(vec![x, x], vec![1.5, 1.5]),
            &SimParams::default(),
            &spec,
        )
        .unwrap();
        for (a, b) in one.mass.iter().zip(&two.mass) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn mass_conservation_random_clouds() {
        let spec = GridSpec::new(16, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let s = random_cloud(&mut rng, 300, &spec);
            let grid = p2g(&s, &SimParams::default(), &spec).unwrap();
            let rel = (grid.total_mass() - s.total_mass()).abs() / s.total_mass();
            assert!(rel < 1e-10);
        }
    }

    #[test]
    fn p2g_rejects_particle_outside_margin() {
        let spec = spec8();
        let s = ParticleState::at_rest(vec![Vec3::new(4.0, 4.0, 4.0), Vec3::new(1.0, 4.0, 4.0)], vec![1.0, 1.0]);
        match p2g(&s, &SimParams::default(), &spec) {
            Err(Error::OutsideMargin { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn grid_update_drag_and_boundary() {
        let spec = spec8();
        let mut grid = GridState::zeros(spec);
        let inner = spec.node_index([4, 4, 4]).unwrap();
        let edge = spec.node_index([1, 4, 4]).unwrap();
        for &i in &[inner, edge] {
            grid.mass[i] = 2.0;
            grid.momentum[i] = Vec3::new(2.0, -4.0, 6.0);
        }
        let mut params = SimParams {
            drag: 0.0,
            ..Default::default()
        };
        grid_update(&mut grid, &params);
        assert_eq!(grid.velocity[inner], Vec3::new(1.0, -2.0, 3.0));
        assert_eq!(grid.velocity[edge], Vec3::zeros());

        params.drag = 0.5;
        grid_update(&mut grid, &params);
        let k = 1.0 - 0.5 / 120.0;
        assert!((grid.velocity[inner] - Vec3::new(1.0, -2.0, 3.0) * k).norm() < 1e-15);
    }

    #[test]
    fn g2p_reproduces_uniform_and_linear_fields() {
        let spec = GridSpec::new(16, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = random_cloud(&mut rng, 50, &spec);
        let u = Vec3::new(0.3, -0.2, 0.5);
        let a = Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let mut grid = GridState::zeros(spec);
        for i in 0..spec.node_count() {
            grid.velocity[i] = u;
        }
        let params = SimParams::default();
        let (next, _) = g2p(&grid, &s, None, &params);
        for p in 0..s.len() {
            assert!((next.v[p] - u).norm() < 1e-12);
            assert!(next.c[p].norm() < 1e-12);
        }
        for i in 0..spec.node_count() {
            grid.velocity[i] = a * spec.node_position(i);
        }
        let (next, _) = g2p(&grid, &s, None, &params);
        for p in 0..s.len() {
            assert!((next.c[p] - a).norm() < 1e-6);
            assert!((next.v[p] - a * s.x[p]).norm() < 1e-9);
        }
    }

    #[test]
    fn zero_grid_leaves_positions() {
        let spec = GridSpec::new(16, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = random_cloud(&mut rng, 20, &spec);
        let grid = GridState::zeros(spec);
        let (next, flags) = g2p(&grid, &s, None, &SimParams::default());
        assert_eq!(next.x, s.x);
        assert!(!flags.any_clamped());
    }

    #[test]
    fn advection_past_margin_is_clamped() {
        let spec = spec8();
        let s = ParticleState::at_rest(vec![Vec3::new(5.99, 4.0, 4.0)], vec![1.0]);
        let mut grid = GridState::zeros(spec);
        for v in grid.velocity.iter_mut() {
            *v = Vec3::new(100.0, 0.0, 0.0);
        }
        let (next, flags) = g2p(&grid, &s, None, &SimParams::default());
        assert_eq!(next.x[0].x, spec.upper());
        assert!(flags.clamped[0][0]);
    }
}
