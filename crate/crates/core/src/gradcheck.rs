//! Finite-difference checks of every analytic gradient path on micro scenes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bridge::BridgeParams;
use crate::covariance::{build_covariance, covariance_backward, GaussianParams, RenderGaussian};
use crate::error::Result;
use crate::fusion::{chain_to_controls, evaluate_render, freeze_render, render_final_grad, FrozenRender, RenderSetup};
use crate::linalg::{ddot, Mat3, Vec3};
use crate::mpm::{simulate, ControlField, FinalGrad, GridSpec, ParticleState, SimParams};
use crate::objective::{target_images_from_points, LossWeights, TargetImages, VisibilityMask};
use crate::physics::mass_loss;
use crate::render::{render, render_backward, Camera};
use crate::train::to_world;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor as a fraction of the largest analytic entry, so that
/// entries far below the gradient's scale are judged by absolute error.
pub const REL_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheck {
    pub name: &'static str,
    pub entries: usize,
    pub max_rel: f64,
    pub tol: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel <= self.tol
    }
}

/// `|a - fd| / max(|fd|, REL_FLOOR * scale)`.
pub fn rel_err(a: f64, fd: f64, scale: f64) -> f64 {
    let d = fd.abs().max(REL_FLOOR * scale);
    if d == 0.0 {
        (a - fd).abs()
    } else {
        (a - fd).abs() / d
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn central(mut f: impl FnMut(f64) -> Result<f64>, h: f64) -> Result<f64> {
    Ok((f(h)? - f(-h)?) / (2.0 * h))
}

fn random_controls(rng: &mut ChaCha8Rng, n: usize, steps: usize, amp: f64) -> ControlField {
    let mut c = ControlField::zeros(n, steps, 1);
    let flat: Vec<f64> = (0..c.len()).map(|_| rng.random_range(-amp..amp)).collect();
    c.set_flat(&flat);
    c
}

/// Lattice block of `side³` particles around the grid centre.
pub fn micro_cloud(rng: &mut ChaCha8Rng, spec: &GridSpec, side: usize, spacing: f64) -> ParticleState {
    let c = spec.center();
    let half = 0.5 * (side as f64 - 1.0) * spacing;
    let mut x = Vec::new();
    for i in 0..side {
        for j in 0..side {
            for k in 0..side {
                let jitter = Vec3::from_fn(|_, _| rng.random_range(-0.1..0.1));
                let o = Vec3::new(i as f64, j as f64, k as f64) * spacing - Vec3::repeat(half);
                x.push(c + o + jitter);
            }
        }
    }
    let n = x.len();
    let mut s = ParticleState::at_rest(x, vec![0.3; n]);
    for v in s.v.iter_mut() {
        *v = Vec3::from_fn(|_, _| rng.random_range(-0.5..0.5));
    }
    s
}

/// Mass loss through the MPM adjoint: 27 particles, 8³ grid, 3 steps,
/// 20 sampled control entries.
pub fn check_mpm_adjoint(sim: &SimParams, seed: u64) -> Result<GradCheck> {
    let spec = GridSpec::new(8, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s0 = micro_cloud(&mut rng, &spec, 3, 0.6);
    let steps = 3;
    let controls = random_controls(&mut rng, s0.len(), steps, 0.02);
    let target: Vec<f64> = (0..spec.node_count()).map(|_| rng.random_range(0.0..0.5)).collect();
    let eps = 1e-6;
    let loss = |c: &ControlField| -> Result<f64> {
        let (traj, _) = simulate(&s0, c, sim, &spec, steps)?;
        Ok(mass_loss(&traj.final_grid.mass, &target, eps)?.0)
    };
    let (traj, tape) = simulate(&s0, &controls, sim, &spec, steps)?;
    let (_, g_mass) = mass_loss(&traj.final_grid.mass, &target, eps)?;
    let grad = chain_to_controls(
        &tape,
        &controls,
        &FinalGrad {
            grid_mass: g_mass,
            ..FinalGrad::default()
        },
    )?;
    let scale = max_abs(&grad);
    let flat = controls.to_flat();
    let mut worst = 0.0f64;
    let entries = 20;
    for _ in 0..entries {
        let i = rng.random_range(0..flat.len());
        let fd = central(
            |h| {
                let mut p = flat.clone();
                p[i] += h;
                let mut c = controls.clone();
                c.set_flat(&p);
                loss(&c)
            },
            FD_STEP,
        )?;
        worst = worst.max(rel_err(grad[i], fd, scale));
    }
    Ok(GradCheck {
        name: "mpm_adjoint",
        entries,
        max_rel: worst,
        tol: 1e-3,
    })
}

pub fn micro_camera(size: usize) -> Camera {
    Camera {
        width: size,
        height: size,
        fx: 2.5 * size as f64,
        fy: 2.5 * size as f64,
        cx: 0.5 * size as f64,
        cy: 0.5 * size as f64,
        near: 0.1,
        far: 20.0,
        eye: [0.0, -6.0, 0.0],
        target: [0.0; 3],
        up: [0.0, 0.0, 1.0],
        ..Camera::default()
    }
}

/// Splat backward on random scenes of up to 8 Gaussians in a 16×16 image.
pub fn check_renderer(seed: u64) -> Result<GradCheck> {
    let cam = micro_camera(16);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut entries = 0;
    for _ in 0..3 {
        let n = rng.random_range(2..=8);
        let scene: Vec<RenderGaussian> = (0..n)
            .map(|_| {
                let a = Mat3::from_fn(|_, _| rng.random_range(-0.15..0.15)) + Mat3::identity() * 0.2;
                RenderGaussian {
                    mean: Vec3::from_fn(|_, _| rng.random_range(-0.5..0.5)),
                    cov: a * a.transpose(),
                    opacity: rng.random_range(0.3..0.9),
                    color: Vec3::repeat(0.5),
                }
            })
            .collect();
        let img = render(&scene, &cam).image;
        let wa: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
        // Depth is only smooth where coverage stays clear of its cutoff.
        let wd: Vec<f64> = img
            .alpha
            .iter()
            .map(|a| if *a > 0.05 { rng.random_range(-0.1..0.1) } else { 0.0 })
            .collect();
        let loss = |s: &[RenderGaussian]| {
            let im = render(s, &cam).image;
            im.alpha.iter().zip(&wa).map(|(a, w)| a * w).sum::<f64>()
                + im.depth.iter().zip(&wd).map(|(d, w)| d * w).sum::<f64>()
        };
        let gr = render_backward(&scene, &cam, &wa, &wd)?;
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for k in 0..n {
            for a in 0..3 {
                analytic.push(gr.mean[k][a]);
                numeric.push(central(
                    |h| {
                        let mut s = scene.clone();
                        s[k].mean[a] += h;
                        Ok(loss(&s))
                    },
                    1e-6,
                )?);
            }
            for (r, c) in [(0, 0), (0, 1), (1, 1), (0, 2), (2, 2), (1, 2)] {
                analytic.push(if r == c {
                    gr.cov[k][(r, c)]
                } else {
                    gr.cov[k][(r, c)] + gr.cov[k][(c, r)]
                });
                numeric.push(central(
                    |h| {
                        let mut s = scene.clone();
                        s[k].cov[(r, c)] += h;
                        s[k].cov[(c, r)] = s[k].cov[(r, c)];
                        Ok(loss(&s))
                    },
                    1e-6,
                )?);
            }
            analytic.push(gr.opacity[k]);
            numeric.push(central(
                |h| {
                    let mut s = scene.clone();
                    s[k].opacity += h;
                    Ok(loss(&s))
                },
                1e-6,
            )?);
        }
        let scale = max_abs(&analytic);
        for (a, fd) in analytic.iter().zip(&numeric) {
            worst = worst.max(rel_err(*a, *fd, scale));
        }
        entries += analytic.len();
    }
    Ok(GradCheck {
        name: "renderer",
        entries,
        max_rel: worst,
        tol: 1e-3,
    })
}

/// Covariance construction backward on random deformation gradients.
pub fn check_covariance(seed: u64) -> Result<GradCheck> {
    let p = GaussianParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut entries = 0;
    for _ in 0..20 {
        let f = Mat3::identity() + Mat3::from_fn(|_, _| rng.random_range(-0.6..0.6));
        if f.determinant() < 0.2 {
            continue;
        }
        let w = Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let (_, st) = build_covariance(&f, p.sigma0, p.sv_min, p.sv_max)?;
        let g = covariance_backward(&st, &w);
        let scale = g.amax();
        for i in 0..9 {
            let (r, c) = (i / 3, i % 3);
            let fd = central(
                |h| {
                    let mut fp = f;
                    fp[(r, c)] += h;
                    Ok(ddot(&w, &build_covariance(&fp, p.sigma0, p.sv_min, p.sv_max)?.0))
                },
                FD_STEP,
            )?;
            worst = worst.max(rel_err(g[(r, c)], fd, scale));
            entries += 1;
        }
    }
    Ok(GradCheck {
        name: "covariance",
        entries,
        max_rel: worst,
        tol: 1e-3,
    })
}

/// The micro scene used by the end-to-end check: 8 anchors, 16 children,
/// a 16×16 image and 2 simulation steps.
pub struct MicroScene {
    pub spec: GridSpec,
    pub sim: SimParams,
    pub steps: usize,
    pub initial: ParticleState,
    pub controls: ControlField,
    pub setup: RenderSetup,
    pub target: TargetImages,
}

impl MicroScene {
    pub fn new(sim: &SimParams, seed: u64) -> MicroScene {
        let spec = GridSpec::new(8, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let initial = micro_cloud(&mut rng, &spec, 2, 0.7);
        let steps = 2;
        let controls = random_controls(&mut rng, initial.len(), steps, 0.05);
        let camera = micro_camera(16);
        let gaussian = GaussianParams {
            sigma0: 0.3,
            sigma_iso: 0.2,
            ..GaussianParams::default()
        };
        let bridge = BridgeParams {
            m_child: 16,
            k_coarse: 4,
            k_fine: 4,
            k_spacing: 3,
            uniform_mix: 1.0,
            ..BridgeParams::default()
        };
        let weights = LossWeights {
            w_shrink: 0.0,
            ..LossWeights::default()
        };
        let target_points: Vec<Vec3> = (0..40)
            .map(|_| Vec3::from_fn(|_, _| rng.random_range(-0.6..0.6)) + Vec3::new(0.15, 0.0, 0.1))
            .collect();
        let target = target_images_from_points(&target_points, &camera, gaussian.sigma0, gaussian.opacity);
        MicroScene {
            spec,
            sim: sim.clone(),
            steps,
            initial,
            controls,
            setup: RenderSetup {
                camera,
                gaussian,
                bridge,
                weights,
            },
            target,
        }
    }

    /// Plan frozen at the current final state with an all-pixel mask.
    pub fn freeze(&self, seed: u64) -> Result<FrozenRender> {
        let (traj, _) = simulate(&self.initial, &self.controls, &self.sim, &self.spec, self.steps)?;
        let fin = traj.final_state();
        let xw = to_world(&fin.x, &self.spec.center());
        let mut fr = freeze_render(&xw, &fin.f, &self.setup, vec![1.0; fin.len()], self.spec.dx, seed)?;
        let cam = &self.setup.camera;
        fr.mask = Some(VisibilityMask::full(cam.width * cam.height));
        Ok(fr)
    }

    pub fn render_loss(&self, controls: &ControlField, frozen: &FrozenRender) -> Result<f64> {
        let (traj, _) = simulate(&self.initial, controls, &self.sim, &self.spec, self.steps)?;
        let fin = traj.final_state();
        let xw = to_world(&fin.x, &self.spec.center());
        Ok(evaluate_render(&xw, &fin.f, frozen, &self.setup, &self.target)?
            .loss
            .total)
    }

    /// Chained gradient of the render loss with respect to the controls.
    pub fn render_grad(&self, frozen: &FrozenRender) -> Result<Vec<f64>> {
        let (traj, tape) = simulate(&self.initial, &self.controls, &self.sim, &self.spec, self.steps)?;
        let fin = traj.final_state();
        let xw = to_world(&fin.x, &self.spec.center());
        let eval = evaluate_render(&xw, &fin.f, frozen, &self.setup, &self.target)?;
        let fg = render_final_grad(&xw, &fin.f, frozen, &self.setup, &eval)?;
        chain_to_controls(&tape, &self.controls, &fg)
    }
}

/// Render loss chained through bridge and adjoint to the controls,
/// 10 sampled entries.
pub fn check_end_to_end(sim: &SimParams, seed: u64) -> Result<GradCheck> {
    let scene = MicroScene::new(sim, seed);
    let frozen = scene.freeze(seed)?;
    let grad = scene.render_grad(&frozen)?;
    let scale = max_abs(&grad);
    let flat = scene.controls.to_flat();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let entries = 10;
    let mut worst = 0.0f64;
    for _ in 0..entries {
        let i = rng.random_range(0..flat.len());
        let fd = central(
            |h| {
                let mut p = flat.clone();
                p[i] += h;
                let mut c = scene.controls.clone();
                c.set_flat(&p);
                scene.render_loss(&c, &frozen)
            },
            FD_STEP,
        )?;
        worst = worst.max(rel_err(grad[i], fd, scale));
    }
    Ok(GradCheck {
        name: "render_to_controls",
        entries,
        max_rel: worst,
        tol: 5e-3,
    })
}

pub fn run_all(sim: &SimParams, seed: u64) -> Result<Vec<GradCheck>> {
    Ok(vec![
        check_mpm_adjoint(sim, seed)?,
        check_renderer(seed)?,
        check_covariance(seed)?,
        check_end_to_end(sim, seed)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        for c in run_all(&SimParams::default(), 0).unwrap() {
            assert!(c.passed(), "{c:?}");
        }
    }

    #[test]
    fn micro_scene_has_expected_sizes() {
        let s = MicroScene::new(&SimParams::default(), 1);
        let fr = s.freeze(1).unwrap();
        assert_eq!(s.initial.len(), 8);
        assert_eq!(fr.plan.n_children(), 16);
        assert!(s.target.alpha.iter().any(|a| *a > 0.5));
    }
}
