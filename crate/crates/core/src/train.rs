//! Multi-pass episode loop.
//!
//! Pass 1 simulates and descends the physics loss alone. Later passes add the
//! render gradient, projected by PCGrad and fused with magnitude
//! normalization. Every episode re-simulates from the same initial state
//! and the controls are decayed by `gamma` between episodes. With
//! `chain_episodes` set, an episode starts from the previous one's end state
//! instead.

use serde::Serialize;

use crate::covariance::anisotropy;
use crate::error::Result;
use crate::fusion::{
    adam_step, chain_to_controls, evaluate_render, freeze_render, fuse, norm, pcgrad, render_final_grad, AdamState,
    FrozenRender, RenderEval,
};
use crate::linalg::Vec3;
use crate::mpm::{simulate, ControlField, FinalGrad, ParticleState};
use crate::physics::physics_loss;
use crate::scene::Scene;

pub const MIN_MULTIPLIER: f64 = 0.05;

/// Optimizer state carried between episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Episodes completed so far.
    pub episode: usize,
    pub start: ParticleState,
    pub controls: ControlField,
    pub adam: AdamState,
    /// Opacity multiplier per anchor.
    pub multipliers: Vec<f64>,
}

impl TrainState {
    pub fn new(scene: &Scene) -> Self {
        let n = scene.initial.len();
        let t = &scene.cfg.training;
        let controls = ControlField::zeros(n, t.steps, t.control_stride);
        TrainState {
            episode: 0,
            start: scene.initial.clone(),
            adam: AdamState::new(controls.len()),
            controls,
            multipliers: vec![1.0; n],
        }
    }
}

/// One CSV row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PassReport {
    pub episode: usize,
    pub pass: usize,
    #[serde(rename = "L_mass")]
    pub l_mass: f64,
    #[serde(rename = "L_min")]
    pub l_min: f64,
    #[serde(rename = "L_alpha")]
    pub l_alpha: f64,
    #[serde(rename = "L_depth")]
    pub l_depth: f64,
    #[serde(rename = "L_edge")]
    pub l_edge: f64,
    #[serde(rename = "L_shrink")]
    pub l_shrink: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub g_phys_norm: f64,
    pub g_render_norm: f64,
    pub conflict: bool,
    /// `<g_render', g_phys> / (|g_render'| |g_phys|)` after PCGrad, 0 when
    /// either is zero.
    pub post_cosine: f64,
    pub alpha_mean: f64,
    pub anisotropy_mean: f64,
    pub anisotropy_max: f64,
    pub n_anchors: usize,
    pub n_render: usize,
}

impl PassReport {
    pub fn l_physics(&self, w_mass: f64, w_min: f64) -> f64 {
        w_mass * self.l_mass + w_min * self.l_min
    }
}

#[derive(Clone, Debug)]
pub struct EpisodeOutcome {
    pub passes: Vec<PassReport>,
    /// Final state simulated with the updated controls.
    pub end: ParticleState,
    /// Physics loss of `end`.
    pub end_physics: f64,
}

/// Seed for the stochastic parts of one pass.
pub fn pass_seed(seed: u64, episode: usize, pass: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((episode as u64) << 8)
        .wrapping_add(pass as u64)
}

pub fn to_world(x: &[Vec3], center: &Vec3) -> Vec<Vec3> {
    x.iter().map(|p| p - center).collect()
}

/// Renders an anchor state with a fresh subdivision plan.
pub fn render_state(
    scene: &Scene,
    state: &ParticleState,
    multipliers: &[f64],
    seed: u64,
) -> Result<(FrozenRender, RenderEval)> {
    let spec = scene.spec();
    let xw = to_world(&state.x, &spec.center());
    let frozen = freeze_render(&xw, &state.f, &scene.setup, multipliers.to_vec(), spec.dx, seed)?;
    let eval = evaluate_render(&xw, &state.f, &frozen, &scene.setup, &scene.target_images)?;
    Ok((frozen, eval))
}

fn render_enabled(scene: &Scene) -> bool {
    let w = &scene.setup.weights;
    !w.image_free() || w.w_shrink > 0.0
}

/// Halves the step `new - old` until the physics loss is at most `l0`.
/// Falls back to `old` when no trial succeeds.
fn backtrack(scene: &Scene, state: &TrainState, old: &[f64], mut new: Vec<f64>, l0: f64) -> Result<Vec<f64>> {
    let cfg = &scene.cfg;
    let mut controls = state.controls.clone();
    for _ in 0..cfg.training.line_search_iters.max(1) {
        controls.set_flat(&new);
        let (traj, _) = simulate(&state.start, &controls, &cfg.sim, scene.spec(), cfg.training.steps)?;
        if physics_loss(&traj.final_grid.mass, &scene.target_mass.mass, &cfg.physics)?.total <= l0 {
            return Ok(new);
        }
        for (n, o) in new.iter_mut().zip(old) {
            *n = o + 0.5 * (*n - o);
        }
    }
    Ok(old.to_vec())
}

pub fn run_episode(scene: &Scene, state: &mut TrainState) -> Result<EpisodeOutcome> {
    let cfg = &scene.cfg;
    let t = &cfg.training;
    let spec = scene.spec();
    let center = spec.center();
    let mut rows = Vec::with_capacity(t.passes);
    let mut frozen: Option<FrozenRender> = None;
    for pass in 1..=t.passes {
        let (traj, tape) = simulate(&state.start, &state.controls, &cfg.sim, spec, t.steps)?;
        let fin = traj.final_state();
        let phys = physics_loss(&traj.final_grid.mass, &scene.target_mass.mass, &cfg.physics)?;
        let g_phys = chain_to_controls(
            &tape,
            &state.controls,
            &FinalGrad {
                grid_mass: phys.grad.clone(),
                ..FinalGrad::default()
            },
        )?;
        let mut row = PassReport {
            episode: state.episode,
            pass,
            l_mass: phys.mass,
            l_min: phys.min,
            l_alpha: 0.0,
            l_depth: 0.0,
            l_edge: 0.0,
            l_shrink: 0.0,
            l_total: phys.total,
            g_phys_norm: norm(&g_phys),
            g_render_norm: 0.0,
            conflict: false,
            post_cosine: 0.0,
            alpha_mean: 0.0,
            anisotropy_mean: 0.0,
            anisotropy_max: 0.0,
            n_anchors: fin.len(),
            n_render: 0,
        };
        let mut g_render = vec![0.0; g_phys.len()];
        if render_enabled(scene) {
            let xw = to_world(&fin.x, &center);
            let seed = pass_seed(cfg.seed, state.episode, pass);
            if t.refresh_per_pass || frozen.is_none() {
                frozen = Some(freeze_render(
                    &xw,
                    &fin.f,
                    &scene.setup,
                    state.multipliers.clone(),
                    spec.dx,
                    seed,
                )?);
            }
            let fr = frozen.as_mut().unwrap();
            fr.multipliers.clone_from(&state.multipliers);
            fr.mask = None;
            let eval = evaluate_render(&xw, &fin.f, fr, &scene.setup, &scene.target_images)?;
            if pass > 1 {
                let fg = render_final_grad(&xw, &fin.f, fr, &scene.setup, &eval)?;
                g_render = chain_to_controls(&tape, &state.controls, &fg)?;
                let gm = eval.multiplier_grad(&fr.plan);
                let n = gm.len() as f64;
                for (m, g) in state.multipliers.iter_mut().zip(&gm) {
                    *m = (*m - t.shrink_lr * n * g).clamp(MIN_MULTIPLIER, 1.0);
                }
            }
            let l = &eval.loss;
            row.l_alpha = l.alpha;
            row.l_depth = l.depth;
            row.l_edge = l.edge;
            row.l_shrink = l.shrink;
            row.l_total += l.total;
            row.alpha_mean = eval.bridge.alpha.iter().sum::<f64>() / eval.bridge.alpha.len().max(1) as f64;
            let an: Vec<f64> = eval.gaussians.iter().map(|g| anisotropy(&g.cov)).collect();
            row.anisotropy_mean = an.iter().sum::<f64>() / an.len().max(1) as f64;
            row.anisotropy_max = an.iter().cloned().fold(0.0, f64::max);
            row.n_render = eval.gaussians.len();
        }
        row.g_render_norm = norm(&g_render);
        let (g_proj, conflict) = pcgrad(&g_phys, &g_render)?;
        row.conflict = conflict;
        let (np, nr) = (norm(&g_phys), norm(&g_proj));
        if np > 0.0 && nr > 0.0 {
            row.post_cosine = g_proj.iter().zip(&g_phys).map(|(a, b)| a * b).sum::<f64>() / (np * nr);
        }
        if pass > 1 || t.pass1_step {
            let g = fuse(&g_phys, &g_proj)?;
            let old = state.controls.to_flat();
            let mut flat = old.clone();
            adam_step(&mut flat, &g, &mut state.adam, &cfg.optimizer)?;
            if t.line_search {
                flat = backtrack(scene, state, &old, flat, phys.total)?;
            }
            state.controls.set_flat(&flat);
        }
        log::info!(
            "episode {} pass {}: L_phys {:.6e} L_render {:.6e}",
            state.episode,
            pass,
            phys.total,
            row.l_total - phys.total
        );
        rows.push(row);
    }
    let (traj, _) = simulate(&state.start, &state.controls, &cfg.sim, spec, t.steps)?;
    let end_physics = physics_loss(&traj.final_grid.mass, &scene.target_mass.mass, &cfg.physics)?.total;
    let end = traj.final_state().clone();
    if t.chain_episodes {
        state.start = end.clone();
    }
    state.controls.scale(t.gamma);
    state.episode += 1;
    Ok(EpisodeOutcome {
        passes: rows,
        end,
        end_physics,
    })
}

/// Runs episodes until `state.episode == episodes`, calling `on_episode`
/// after each one.
pub fn run_training(
    scene: &Scene,
    state: &mut TrainState,
    episodes: usize,
    mut on_episode: impl FnMut(&TrainState, &EpisodeOutcome) -> Result<()>,
) -> Result<Vec<EpisodeOutcome>> {
    let mut out = Vec::new();
    while state.episode < episodes {
        let o = run_episode(scene, state)?;
        on_episode(state, &o)?;
        out.push(o);
    }
    Ok(out)
}
