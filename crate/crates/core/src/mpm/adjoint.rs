//! Reverse pass of [`simulate`](super::simulate).
//!
//! Each step is differentiated at the operation level: G2P gather, grid
//! normalization, P2G scatter with the stress impulse, and the control
//! update. Step-`t` grids are rebuilt from the checkpointed particle state.

use rayon::prelude::*;

use super::kernel::{Stencil, OFFSETS};
use super::sim::{check_controls, Tape};
use super::step::{particle_cache, scatter, ParticleCache};
use super::stress::kirchhoff_backward;
use super::{grid_update, ControlField, GridState, ParticleState};
use crate::error::{Error, Result};
use crate::linalg::{Mat3, Vec3};
use crate::par;

/// Gradient of a downstream scalar with respect to the final particle state
/// and the final grid mass. Empty vectors stand for zero.
#[derive(Clone, Debug, Default)]
pub struct FinalGrad {
    pub x: Vec<Vec3>,
    pub v: Vec<Vec3>,
    pub c: Vec<Mat3>,
    pub f: Vec<Mat3>,
    pub grid_mass: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateGrad {
    pub x: Vec<Vec3>,
    pub v: Vec<Vec3>,
    pub c: Vec<Mat3>,
    pub f: Vec<Mat3>,
}

impl StateGrad {
    fn zeros(n: usize) -> Self {
        StateGrad {
            x: vec![Vec3::zeros(); n],
            v: vec![Vec3::zeros(); n],
            c: vec![Mat3::zeros(); n],
            f: vec![Mat3::zeros(); n],
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdjointResult {
    /// `dL/dF~`, laid out like the control field.
    pub controls: ControlField,
    pub state0: StateGrad,
}

fn or_zero<T: Clone>(v: &[T], n: usize, zero: T, what: &str) -> Result<Vec<T>> {
    match v.len() {
        0 => Ok(vec![zero; n]),
        m if m == n => Ok(v.to_vec()),
        m => Err(Error::TapeMismatch(format!(
            "{what} gradient has {m} entries, expected {n}"
        ))),
    }
}

/// Reverse-mode gradients through all recorded steps.
pub fn adjoint(tape: &Tape, controls: &ControlField, grad_final: &FinalGrad) -> Result<AdjointResult> {
    let n = tape.states[0].len();
    let steps = tape.steps();
    check_controls(controls, n, steps)?;
    if controls.stride != tape.stride {
        return Err(Error::TapeMismatch(format!(
            "control stride {} differs from recorded stride {}",
            controls.stride, tape.stride
        )));
    }
    let spec = tape.spec;
    let params = &tape.params;

    let mut g = StateGrad {
        x: or_zero(&grad_final.x, n, Vec3::zeros(), "x")?,
        v: or_zero(&grad_final.v, n, Vec3::zeros(), "v")?,
        c: or_zero(&grad_final.c, n, Mat3::zeros(), "C")?,
        f: or_zero(&grad_final.f, n, Mat3::zeros(), "F")?,
    };
    if !grad_final.grid_mass.is_empty() {
        if grad_final.grid_mass.len() != spec.node_count() {
            return Err(Error::TapeMismatch("grid mass gradient has wrong node count".into()));
        }
        let last = &tape.states[steps];
        let inv_dx = spec.inv_dx();
        let gm = &grad_final.grid_mass;
        let extra: Vec<Vec3> = (0..n)
            .into_par_iter()
            .map(|p| {
                let s = Stencil::new(&last.x[p], inv_dx);
                let mut gfx = Vec3::zeros();
                for &o in &OFFSETS {
                    let idx = spec.node_index(s.node(o)).expect("stencil inside lattice");
                    gfx += gm[idx] * last.mass[p] * s.weight_grad(o);
                }
                gfx * inv_dx
            })
            .collect();
        for (gx, e) in g.x.iter_mut().zip(extra) {
            *gx += e;
        }
    }

    let mut g_controls = ControlField::zeros(n, steps, controls.stride);
    for t in (0..steps).rev() {
        let state = &tape.states[t];
        let next = &tape.states[t + 1];
        let slot = controls.slot_for_step(t);
        let zero = Mat3::zeros();
        let ft = |p: usize| slot.map_or(&zero, |k| &controls.slots[k][p]);

        let cache = particle_cache(state, params, &spec)?;
        let mut grid = scatter(state, &cache, &spec);
        grid_update(&mut grid, params);

        let (g_prev, g_ft) = step_backward(tape, t, state, next, &cache, &grid, &g, ft)?;
        if let Some(k) = slot {
            g_controls.slots[k] = g_ft;
        }
        g = g_prev;
    }
    Ok(AdjointResult {
        controls: g_controls,
        state0: g,
    })
}

#[allow(clippy::too_many_arguments)]
fn step_backward<'a>(
    tape: &Tape,
    t: usize,
    state: &ParticleState,
    next: &ParticleState,
    cache: &[ParticleCache],
    grid: &GridState,
    g_next: &StateGrad,
    ft: impl Fn(usize) -> &'a Mat3 + Sync,
) -> Result<(StateGrad, Vec<Mat3>)> {
    let spec = tape.spec;
    let params = &tape.params;
    let n = state.len();
    let dt = params.dt;
    let dx = spec.dx;
    let inv_dx = spec.inv_dx();
    let d_inv = 4.0 * inv_dx * inv_dx;
    let clamped = &tape.clamped[t];

    // Control update and advection: upstream gradients on this step's
    // gathered v and C, plus direct contributions to F and x.
    struct Local {
        g_v_new: Vec3,
        g_c_new: Mat3,
        g_f: Mat3,
        g_ft: Mat3,
        g_x: Vec3,
    }
    let local: Vec<Local> = (0..n)
        .into_par_iter()
        .map(|p| {
            let c_new = next.c[p];
            let g_fn = g_next.f[p];
            let base = state.f[p] + ft(p);
            let g_c_new = g_next.c[p] + dt * g_fn * base.transpose();
            let g_base = (Mat3::identity() + dt * c_new).transpose() * g_fn;
            let mut g_x = g_next.x[p];
            for a in 0..3 {
                if clamped[p][a] {
                    g_x[a] = 0.0;
                }
            }
            Local {
                g_v_new: g_next.v[p] + dt * g_x,
                g_c_new,
                g_f: g_base,
                g_ft: g_base,
                g_x,
            }
        })
        .collect();

    // G2P adjoint, node side.
    let n_nodes = spec.node_count();
    let g_gv = par::chunked_reduce(
        n,
        || vec![Vec3::zeros(); n_nodes],
        |acc, p| {
            let s = &cache[p].stencil;
            let l = &local[p];
            for &o in &OFFSETS {
                let w = s.weight(o);
                let idx = spec.node_index(s.node(o)).expect("stencil inside lattice");
                let dpos = s.offset(o) * dx;
                acc[idx] += w * l.g_v_new + (d_inv * w) * (l.g_c_new * dpos);
            }
        },
        |a, b| par::add_assign(a, &b),
    );

    // Grid update adjoint.
    let damp = 1.0 - params.drag * dt;
    let node_grads: Vec<(f64, Vec3)> = (0..n_nodes)
        .into_par_iter()
        .map(|i| {
            let m = grid.mass[i];
            if m > 0.0 && !spec.is_boundary(spec.node_coords(i)) {
                let gv = g_gv[i];
                let g_p = gv * (damp / m);
                let g_m = -damp * gv.dot(&grid.momentum[i]) / (m * m);
                (g_m, g_p)
            } else {
                (0.0, Vec3::zeros())
            }
        })
        .collect();

    // Particle side of G2P and the full P2G adjoint (gathers only).
    let results: Vec<(Vec3, Vec3, Mat3, Mat3)> = (0..n)
        .into_par_iter()
        .map(|p| {
            let pc = &cache[p];
            let s = &pc.stencil;
            let l = &local[p];
            let m = state.mass[p];
            let mv = m * state.v[p];
            let mut g_fx = Vec3::zeros();
            let mut g_v = Vec3::zeros();
            let mut g_a = Mat3::zeros();
            for &o in &OFFSETS {
                let w = s.weight(o);
                let dw = s.weight_grad(o);
                let idx = spec.node_index(s.node(o)).expect("stencil inside lattice");
                let dpos = s.offset(o) * dx;

                // gather: v += w gv, C += d_inv w gv dpos^T
                let gv = grid.velocity[idx];
                let g_w = l.g_v_new.dot(&gv) + d_inv * gv.dot(&(l.g_c_new * dpos));
                let g_dpos = (d_inv * w) * (l.g_c_new.transpose() * gv);
                g_fx += g_w * dw - g_dpos * dx;

                // scatter: m_i += w m, p_i += w (m v + A dpos)
                let (g_m, g_p) = node_grads[idx];
                let contrib = mv + pc.affine * dpos;
                let g_w = g_m * m + g_p.dot(&contrib);
                g_v += (w * m) * g_p;
                g_a += w * g_p * dpos.transpose();
                let g_dpos = w * (pc.affine.transpose() * g_p);
                g_fx += g_w * dw - g_dpos * dx;
            }
            let vol = m / params.density;
            let g_tau = (-dt * vol * d_inv) * g_a;
            let g_f = l.g_f + kirchhoff_backward(&state.f[p], &pc.polar, params.mu, params.lambda, &g_tau);
            let g_c = m * g_a;
            let g_x = l.g_x + g_fx * inv_dx;
            (g_x, g_v, g_c, g_f)
        })
        .collect();

    let mut out = StateGrad::zeros(n);
    for (p, (gx, gv, gc, gf)) in results.into_iter().enumerate() {
        out.x[p] = gx;
        out.v[p] = gv;
        out.c[p] = gc;
        out.f[p] = gf;
    }
    let g_ft = local.into_iter().map(|l| l.g_ft).collect();
    Ok((out, g_ft))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::ddot;
    use crate::mpm::{simulate, GridSpec, SimParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, spec: &GridSpec) -> ParticleState {
        let mut x = Vec::new();
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    let jitter = Vec3::from_fn(|_, _| rng.random_range(-0.1..0.1));
                    x.push(Vec3::new(3.4, 3.4, 3.4) + Vec3::new(i as f64, j as f64, k as f64) * 0.6 + jitter);
                }
            }
        }
        assert!(x.iter().all(|p| spec.inside_margin(p)));
        let mut s = ParticleState::at_rest(x, vec![0.3; 27]);
        for p in 0..27 {
            s.v[p] = Vec3::from_fn(|_, _| rng.random_range(-0.5..0.5));
        }
        s
    }

    /// Scalar objective touching every final field and the grid mass.
    fn objective(
        s0: &ParticleState,
        controls: &ControlField,
        params: &SimParams,
        spec: &GridSpec,
        w: &FinalGrad,
    ) -> f64 {
        let (traj, _) = simulate(s0, controls, params, spec, 3).unwrap();
        let last = traj.final_state();
        let mut l = 0.0;
        for p in 0..last.len() {
            l += w.x[p].dot(&last.x[p]) + w.v[p].dot(&last.v[p]);
            l += ddot(&w.c[p], &last.c[p]) + ddot(&w.f[p], &last.f[p]);
        }
        l + w
            .grid_mass
            .iter()
            .zip(&traj.final_grid.mass)
            .map(|(a, b)| a * b)
            .sum::<f64>()
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let spec = GridSpec::new(8, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s0 = cloud(&mut rng, &spec);
        let controls = ControlField::zeros(27, 3, 1);
        let (_, tape) = simulate(&s0, &controls, &SimParams::default(), &spec, 3).unwrap();
        let r = adjoint(&tape, &controls, &FinalGrad::default()).unwrap();
        assert!(r.controls.to_flat().iter().all(|&v| v == 0.0));
        assert!(r.state0.x.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn all_parameter_classes_match_fd() {
        let spec = GridSpec::new(8, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s0 = cloud(&mut rng, &spec);
        let params = SimParams::default();
        let mut controls = ControlField::zeros(27, 3, 1);
        let mut flat = controls.to_flat();
        for v in flat.iter_mut() {
            *v = rng.random_range(-0.02..0.02);
        }
        controls.set_flat(&flat);
        let w = FinalGrad {
            x: (0..27)
                .map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
                .collect(),
            v: (0..27)
                .map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
                .collect(),
            c: (0..27)
                .map(|_| Mat3::from_fn(|_, _| rng.random_range(-0.1..0.1)))
                .collect(),
            f: (0..27)
                .map(|_| Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
                .collect(),
            grid_mass: (0..spec.node_count()).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let (_, tape) = simulate(&s0, &controls, &params, &spec, 3).unwrap();
        let r = adjoint(&tape, &controls, &w).unwrap();
        let h = 1e-5;
        let rel = |a: f64, fd: f64| (a - fd).abs() / fd.abs().max(1e-2);

        let g_flat = r.controls.to_flat();
        for _ in 0..10 {
            let i = rng.random_range(0..flat.len());
            let mut cp = controls.clone();
            let mut fp = flat.clone();
            fp[i] += h;
            cp.set_flat(&fp);
            let lp = objective(&s0, &cp, &params, &spec, &w);
            fp[i] -= 2.0 * h;
            cp.set_flat(&fp);
            let lm = objective(&s0, &cp, &params, &spec, &w);
            let fd = (lp - lm) / (2.0 * h);
            assert!(rel(g_flat[i], fd) < 1e-3, "F~[{i}]: {} vs {fd}", g_flat[i]);
        }
        for _ in 0..6 {
            let p = rng.random_range(0..27);
            let a = rng.random_range(0..3);
            for which in 0..2 {
                let mut sp = s0.clone();
                let mut sm = s0.clone();
                if which == 0 {
                    sp.x[p][a] += h;
                    sm.x[p][a] -= h;
                } else {
                    sp.v[p][a] += h;
                    sm.v[p][a] -= h;
                }
                let fd = (objective(&sp, &controls, &params, &spec, &w)
                    - objective(&sm, &controls, &params, &spec, &w))
                    / (2.0 * h);
                let an = if which == 0 { r.state0.x[p][a] } else { r.state0.v[p][a] };
                assert!(rel(an, fd) < 1e-3, "state class {which} p={p} a={a}: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn mismatched_gradient_length_is_rejected() {
        let spec = GridSpec::new(8, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s0 = cloud(&mut rng, &spec);
        let controls = ControlField::zeros(27, 3, 1);
        let (_, tape) = simulate(&s0, &controls, &SimParams::default(), &spec, 3).unwrap();
        let bad = FinalGrad {
            x: vec![Vec3::zeros(); 5],
            ..Default::default()
        };
        assert!(matches!(adjoint(&tape, &controls, &bad), Err(Error::TapeMismatch(_))));
        let other = ControlField::zeros(27, 3, 3);
        assert!(adjoint(&tape, &other, &FinalGrad::default()).is_err());
    }
}
