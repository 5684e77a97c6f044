use super::step::{g2p, grid_update, p2g, StepFlags};
use super::{ControlField, GridSpec, GridState, ParticleState, SimParams};
use crate::error::{Error, Result};

/// Forward trajectory: `states[0]` is the initial state, `states[T]` the
/// final one; `final_grid` is the P2G deposit of the final state.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub states: Vec<ParticleState>,
    pub final_grid: GridState,
    pub flags: Vec<StepFlags>,
}

impl Trajectory {
    pub fn final_state(&self) -> &ParticleState {
        self.states.last().expect("trajectory holds the initial state")
    }
}

/// Per-step checkpoints for the reverse pass. Grids are rebuilt from the
/// stored particle states, so only `T + 1` states are kept.
#[derive(Clone, Debug)]
pub struct Tape {
    pub(crate) states: Vec<ParticleState>,
    pub(crate) clamped: Vec<Vec<[bool; 3]>>,
    pub(crate) params: SimParams,
    pub(crate) spec: GridSpec,
    pub(crate) stride: usize,
}

impl Tape {
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn states(&self) -> &[ParticleState] {
        &self.states
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    /// Re-runs the forward pass from the recorded initial state.
    pub fn replay(&self, controls: &ControlField) -> Result<Vec<ParticleState>> {
        let (traj, _) = simulate(&self.states[0], controls, &self.params, &self.spec, self.steps())?;
        Ok(traj.states)
    }
}

pub(crate) fn check_controls(controls: &ControlField, n: usize, steps: usize) -> Result<()> {
    if controls.n_particles() != n && !controls.slots.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "control field covers {} particles, state has {n}",
            controls.n_particles()
        )));
    }
    if controls.slots.len() != steps.div_ceil(controls.stride) {
        return Err(Error::InvalidArgument(format!(
            "control field has {} slots, {steps} steps with stride {} need {}",
            controls.slots.len(),
            controls.stride,
            steps.div_ceil(controls.stride)
        )));
    }
    Ok(())
}

/// Runs `steps` chained `p2g -> grid_update -> g2p` steps.
pub fn simulate(
    state0: &ParticleState,
    controls: &ControlField,
    params: &SimParams,
    spec: &GridSpec,
    steps: usize,
) -> Result<(Trajectory, Tape)> {
    if steps == 0 {
        return Err(Error::InvalidArgument("simulation needs at least one step".into()));
    }
    state0.validate()?;
    check_controls(controls, state0.len(), steps)?;

    let mut states = Vec::with_capacity(steps + 1);
    let mut flags = Vec::with_capacity(steps);
    states.push(state0.clone());
    for n in 0..steps {
        let current = states.last().unwrap();
        let mut grid = p2g(current, params, spec)?;
        grid_update(&mut grid, params);
        let control = controls.slot_for_step(n).map(|k| controls.slots[k].as_slice());
        let (next, f) = g2p(&grid, current, control, params);
        if f.degenerate > 0 {
            log::debug!("step {n}: {} particles with collapsed F", f.degenerate);
        }
        states.push(next);
        flags.push(f);
    }
    let final_grid = p2g(states.last().unwrap(), params, spec)?;
    let tape = Tape {
        states: states.clone(),
        clamped: flags.iter().map(|f| f.clamped.clone()).collect(),
        params: params.clone(),
        spec: *spec,
        stride: controls.stride,
    };
    Ok((
        Trajectory {
            states,
            final_grid,
            flags,
        },
        tape,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{Mat3, Vec3};
    use crate::mpm::step::step;

    fn lattice(spec: &GridSpec, n: usize, spacing: f64, origin: Vec3) -> ParticleState {
        let mut x = Vec::new();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    x.push(origin + Vec3::new(i as f64, j as f64, k as f64) * spacing);
                }
            }
        }
        assert!(x.iter().all(|p| spec.inside_margin(p)));
        let m = vec![0.5; x.len()];
        ParticleState::at_rest(x, m)
    }

    #[test]
    fn equilibrium_is_preserved() {
        let spec = GridSpec::new(16, 1.0);
        let s0 = lattice(&spec, 4, 0.5, Vec3::repeat(6.0));
        let params = SimParams::default();
        let controls = ControlField::zeros(s0.len(), 5, 1);
        let (traj, _) = simulate(&s0, &controls, &params, &spec, 5).unwrap();
        let last = traj.final_state();
        for p in 0..s0.len() {
            assert!((last.x[p] - s0.x[p]).norm() < 1e-12);
            assert!((last.f[p] - Mat3::identity()).norm() < 1e-12);
        }
    }

    #[test]
    fn single_step_equals_manual_composition() {
        let spec = GridSpec::new(16, 1.0);
        let mut s0 = lattice(&spec, 3, 0.6, Vec3::repeat(6.5));
        s0.v[4] = Vec3::new(0.3, 0.1, -0.2);
        let mut controls = ControlField::zeros(s0.len(), 1, 1);
        controls.slots[0][2] = 0.05 * Mat3::identity();
        let params = SimParams::default();
        let (traj, _) = simulate(&s0, &controls, &params, &spec, 1).unwrap();
        let (manual, _, _) = step(&s0, Some(&controls.slots[0]), &params, &spec).unwrap();
        assert_eq!(traj.states[1], manual);
    }

    #[test]
    fn drag_decays_rigid_translation_energy() {
        let spec = GridSpec::new(16, 1.0);
        let mut s0 = lattice(&spec, 4, 0.5, Vec3::repeat(6.0));
        for v in s0.v.iter_mut() {
            *v = Vec3::new(0.4, -0.3, 0.2);
        }
        let params = SimParams::default();
        let controls = ControlField::zeros(s0.len(), 10, 1);
        let (traj, _) = simulate(&s0, &controls, &params, &spec, 10).unwrap();
        let energies: Vec<f64> = traj.states.iter().map(|s| s.kinetic_energy()).collect();
        let k = (1.0 - params.drag * params.dt).powi(2);
        for w in energies.windows(2) {
            assert!(w[1] < w[0]);
            assert!((w[1] / w[0] - k).abs() < 1e-9);
        }
    }

    #[test]
    fn tape_replay_is_bit_exact() {
        let spec = GridSpec::new(16, 1.0);
        let s0 = lattice(&spec, 3, 0.7, Vec3::repeat(6.0));
        let mut controls = ControlField::zeros(s0.len(), 4, 2);
        controls.slots[1][5] = Mat3::from_fn(|i, j| 0.01 * (i as f64 - j as f64));
        let (traj, tape) = simulate(&s0, &controls, &SimParams::default(), &spec, 4).unwrap();
        assert_eq!(tape.replay(&controls).unwrap(), traj.states);
    }

    #[test]
    fn rejects_bad_controls_and_zero_steps() {
        let spec = GridSpec::new(16, 1.0);
        let s0 = lattice(&spec, 2, 0.7, Vec3::repeat(6.0));
        let params = SimParams::default();
        assert!(simulate(&s0, &ControlField::zeros(s0.len(), 3, 1), &params, &spec, 0).is_err());
        assert!(simulate(&s0, &ControlField::zeros(s0.len(), 3, 1), &params, &spec, 4).is_err());
        assert!(simulate(&s0, &ControlField::zeros(s0.len() + 1, 3, 1), &params, &spec, 3).is_err());
    }

    #[test]
    fn translation_by_one_cell_is_equivariant() {
        let spec = GridSpec::new(16, 1.0);
        let mut s0 = lattice(&spec, 3, 0.6, Vec3::repeat(6.2));
        for (p, v) in s0.v.iter_mut().enumerate() {
            *v = Vec3::new(0.1 * (p % 3) as f64, -0.05, 0.02 * p as f64);
        }
        let mut controls = ControlField::zeros(s0.len(), 4, 1);
        controls.slots[0][3] = 0.02 * Mat3::identity();
        let mut shifted = s0.clone();
        for x in shifted.x.iter_mut() {
            *x += Vec3::new(1.0, 1.0, 1.0);
        }
        let params = SimParams::default();
        let (a, _) = simulate(&s0, &controls, &params, &spec, 4).unwrap();
        let (b, _) = simulate(&shifted, &controls, &params, &spec, 4).unwrap();
        for p in 0..s0.len() {
            let d = b.final_state().x[p] - a.final_state().x[p] - Vec3::repeat(1.0);
            assert!(d.norm() < 1e-9);
            assert!((b.final_state().f[p] - a.final_state().f[p]).norm() < 1e-9);
        }
    }
}
