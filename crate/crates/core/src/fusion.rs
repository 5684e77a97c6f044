//! Gradient assembly: the render chain back to anchor state, PCGrad,
//! magnitude-normalized fusion and Adam.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bridge::{
    bridge_forward, build_footprint, plan_subdivision, scatter_gradients, BridgeOutput, BridgeParams, Footprint,
    SubdivisionPlan,
};
use crate::covariance::{build_covariance, covariance_backward, CovState, GaussianParams, RenderGaussian};
use crate::error::{Error, Result};
use crate::linalg::{Mat3, Vec3};
use crate::mpm::{adjoint, ControlField, FinalGrad, Tape};
use crate::objective::{render_loss, visibility_mask, LossWeights, RenderLoss, TargetImages, VisibilityMask};
use crate::render::{render, render_backward, Camera, RenderOutput};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Projects `g_render` onto the normal plane of `g_phys` when the two
/// conflict. Returns the result and whether a projection happened.
pub fn pcgrad(g_phys: &[f64], g_render: &[f64]) -> Result<(Vec<f64>, bool)> {
    if g_phys.len() != g_render.len() {
        return Err(Error::InvalidArgument("gradient lengths differ".into()));
    }
    let pp = dot(g_phys, g_phys);
    let d = dot(g_render, g_phys);
    if pp == 0.0 || d >= 0.0 {
        return Ok((g_render.to_vec(), false));
    }
    let k = d / pp;
    Ok((g_render.iter().zip(g_phys).map(|(r, p)| r - k * p).collect(), true))
}

/// `g_phys/|g_phys| + g_render/|g_render|`, dropping terms with norm
/// below `1e-12`.
pub fn fuse(g_phys: &[f64], g_render: &[f64]) -> Result<Vec<f64>> {
    if g_phys.len() != g_render.len() {
        return Err(Error::InvalidArgument("gradient lengths differ".into()));
    }
    let unit = |g: &[f64]| {
        let n = norm(g);
        if n < 1e-12 {
            0.0
        } else {
            1.0 / n
        }
    };
    let (sp, sr) = (unit(g_phys), unit(g_render));
    Ok(g_phys.iter().zip(g_render).map(|(p, r)| sp * p + sr * r).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("optimizer.lr", self.lr > 0.0 && self.lr.is_finite()),
            ("optimizer.beta1", (0.0..1.0).contains(&self.beta1)),
            ("optimizer.beta2", (0.0..1.0).contains(&self.beta2)),
            ("optimizer.eps", self.eps > 0.0),
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
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// Bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], g: &[f64], state: &mut AdamState, p: &AdamParams) -> Result<()> {
    if params.len() != g.len() || state.m.len() != g.len() {
        return Err(Error::InvalidArgument(
            "Adam parameter and gradient lengths differ".into(),
        ));
    }
    state.t += 1;
    let c1 = 1.0 - p.beta1.powi(state.t as i32);
    let c2 = 1.0 - p.beta2.powi(state.t as i32);
    params
        .par_iter_mut()
        .zip(state.m.par_iter_mut())
        .zip(state.v.par_iter_mut())
        .zip(g.par_iter())
        .for_each(|(((x, m), v), gi)| {
            *m = p.beta1 * *m + (1.0 - p.beta1) * gi;
            *v = p.beta2 * *v + (1.0 - p.beta2) * gi * gi;
            *x -= p.lr * (*m / c1) / ((*v / c2).sqrt() + p.eps);
        });
    Ok(())
}

/// Everything the render chain needs besides the anchor state.
#[derive(Clone, Debug)]
pub struct RenderSetup {
    pub camera: Camera,
    pub gaussian: GaussianParams,
    pub bridge: BridgeParams,
    pub weights: LossWeights,
}

/// Render-side structure held fixed within a pass.
#[derive(Clone, Debug)]
pub struct FrozenRender {
    pub plan: SubdivisionPlan,
    pub footprint: Footprint,
    /// Opacity multiplier per anchor.
    pub multipliers: Vec<f64>,
    /// Computed from the first evaluation when `None`.
    pub mask: Option<VisibilityMask>,
    pub mask_seed: u64,
}

/// Builds the subdivision plan and footprints from anchors at world
/// positions `x`.
pub fn freeze_render(
    x: &[Vec3],
    f: &[Mat3],
    setup: &RenderSetup,
    multipliers: Vec<f64>,
    dx: f64,
    seed: u64,
) -> Result<FrozenRender> {
    if multipliers.len() != x.len() {
        return Err(Error::InvalidArgument(
            "one opacity multiplier per anchor required".into(),
        ));
    }
    let plan = plan_subdivision(x, f, &setup.bridge, dx, seed)?;
    let footprint = build_footprint(x, &plan.positions(x), setup.bridge.k_coarse, setup.bridge.k_fine);
    Ok(FrozenRender {
        plan,
        footprint,
        multipliers,
        mask: None,
        mask_seed: seed,
    })
}

#[derive(Clone, Debug)]
pub struct RenderEval {
    pub bridge: BridgeOutput,
    pub gaussians: Vec<RenderGaussian>,
    pub cov_states: Vec<CovState>,
    pub output: RenderOutput,
    pub mask: VisibilityMask,
    pub loss: RenderLoss,
}

impl RenderEval {
    /// Shrink gradient summed onto each anchor.
    pub fn multiplier_grad(&self, plan: &SubdivisionPlan) -> Vec<f64> {
        let mut g = vec![0.0; plan.n_anchors];
        for (j, gj) in self.loss.g_multiplier.iter().enumerate() {
            g[plan.parent[j]] += gj;
        }
        g
    }
}

/// Render Gaussians for the frozen plan at anchor state `(x, f)`.
pub fn build_gaussians(
    x: &[Vec3],
    f: &[Mat3],
    frozen: &FrozenRender,
    setup: &RenderSetup,
) -> Result<(BridgeOutput, Vec<RenderGaussian>, Vec<CovState>)> {
    let out = bridge_forward(x, f, &frozen.plan, &frozen.footprint, &setup.bridge);
    let gp = &setup.gaussian;
    let color = Vec3::from(gp.color);
    let built: Vec<Result<(RenderGaussian, CovState)>> = (0..out.positions.len())
        .into_par_iter()
        .map(|j| {
            let scale = if j < frozen.plan.n_anchors {
                gp.sigma0
            } else {
                gp.sigma_iso
            };
            let (cov, st) = build_covariance(&out.f_final[j], scale, gp.sv_min, gp.sv_max)?;
            Ok((
                RenderGaussian {
                    mean: out.positions[j],
                    cov,
                    opacity: gp.opacity * frozen.multipliers[frozen.plan.parent[j]],
                    color,
                },
                st,
            ))
        })
        .collect();
    let mut gaussians = Vec::with_capacity(built.len());
    let mut states = Vec::with_capacity(built.len());
    for b in built {
        let (g, s) = b?;
        gaussians.push(g);
        states.push(s);
    }
    Ok((out, gaussians, states))
}

/// Forward render and losses at world-space anchor state `(x, f)`.
pub fn evaluate_render(
    x: &[Vec3],
    f: &[Mat3],
    frozen: &FrozenRender,
    setup: &RenderSetup,
    target: &TargetImages,
) -> Result<RenderEval> {
    let (bridge, gaussians, cov_states) = build_gaussians(x, f, frozen, setup)?;
    let output = render(&gaussians, &setup.camera);
    let cam = &setup.camera;
    let mask = match &frozen.mask {
        Some(m) => m.clone(),
        None => visibility_mask(
            &[
                (&output.image.alpha, &output.image.depth),
                (&target.alpha, &target.depth),
            ],
            cam.width,
            cam.height,
            cam.far,
            frozen.mask_seed,
        ),
    };
    let mult: Vec<f64> = frozen.plan.parent.iter().map(|&p| frozen.multipliers[p]).collect();
    let loss = render_loss(
        &output.image,
        target,
        &mask,
        &mult,
        &output.visibility,
        cam,
        &setup.weights,
    )?;
    Ok(RenderEval {
        bridge,
        gaussians,
        cov_states,
        output,
        mask,
        loss,
    })
}

/// Render image gradients mapped to anchor `x` and `F` through the
/// renderer, covariance construction and bridge.
pub fn render_final_grad(
    x: &[Vec3],
    f: &[Mat3],
    frozen: &FrozenRender,
    setup: &RenderSetup,
    eval: &RenderEval,
) -> Result<FinalGrad> {
    if setup.weights.image_free() {
        return Ok(FinalGrad::default());
    }
    let rg = render_backward(&eval.gaussians, &setup.camera, &eval.loss.g_alpha, &eval.loss.g_depth)?;
    let g_f: Vec<Mat3> = eval
        .cov_states
        .par_iter()
        .zip(rg.cov.par_iter())
        .map(|(st, g)| covariance_backward(st, g))
        .collect();
    let (gf, gx) = scatter_gradients(
        x,
        f,
        &frozen.plan,
        &frozen.footprint,
        &eval.bridge,
        &g_f,
        &rg.mean,
        &setup.bridge,
    )?;
    Ok(FinalGrad {
        x: gx,
        f: gf,
        ..FinalGrad::default()
    })
}

/// Pulls final-state gradients back to the controls as a flat vector.
pub fn chain_to_controls(tape: &Tape, controls: &ControlField, grad: &FinalGrad) -> Result<Vec<f64>> {
    Ok(adjoint(tape, controls, grad)?.controls.to_flat())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pcgrad_examples() {
        let (r, c) = pcgrad(&[1.0, 0.0, 0.0], &[-1.0, 1.0, 0.0]).unwrap();
        assert_eq!(r, vec![0.0, 1.0, 0.0]);
        assert!(c);
        let (r, c) = pcgrad(&[1.0, 0.0], &[0.0, 3.0]).unwrap();
        assert_eq!(r, vec![0.0, 3.0]);
        assert!(!c);
        let (r, _) = pcgrad(&[0.5, -2.0], &[-0.5, 2.0]).unwrap();
        assert!(norm(&r) < 1e-15);
        let (r, c) = pcgrad(&[0.0, 0.0], &[-1.0, 2.0]).unwrap();
        assert_eq!(r, vec![-1.0, 2.0]);
        assert!(!c);
    }

    #[test]
    fn pcgrad_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let p: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (once, _) = pcgrad(&p, &r).unwrap();
            assert!(dot(&once, &p) >= -1e-12 * norm(&p) * norm(&once));
            let (twice, _) = pcgrad(&p, &once).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
            }
            assert!(norm(&fuse(&p, &once).unwrap()) <= 2.0 + 1e-12);
        }
    }

    #[test]
    fn fuse_examples() {
        assert_eq!(fuse(&[0.0; 3], &[0.0; 3]).unwrap(), vec![0.0; 3]);
        let g = fuse(&[3.0, 4.0], &[3.0, 4.0]).unwrap();
        assert!((g[0] - 1.2).abs() < 1e-15 && (g[1] - 1.6).abs() < 1e-15);
        let g = fuse(&[2.0, 0.0], &[0.0, 5.0]).unwrap();
        assert!((norm(&g) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(fuse(&[2.0, 0.0], &[1e-13, 0.0]).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn adam_examples() {
        let p = AdamParams::default();
        let mut x = vec![1.0, -2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut x, &[0.0, 0.0], &mut st, &p).unwrap();
        assert_eq!(x, vec![1.0, -2.0]);

        let mut x = vec![0.0; 4];
        let mut st = AdamState::new(4);
        adam_step(&mut x, &[0.3; 4], &mut st, &p).unwrap();
        for v in &x {
            assert!((v + p.lr).abs() < 1e-7 * p.lr + 1e-9, "{v}");
        }
        let run = || {
            let mut x = vec![0.5; 8];
            let mut st = AdamState::new(8);
            for k in 0..10 {
                let g: Vec<f64> = x.iter().map(|v| v * (k as f64 + 1.0)).collect();
                adam_step(&mut x, &g, &mut st, &p).unwrap();
            }
            x
        };
        assert_eq!(run(), run());
    }
}
