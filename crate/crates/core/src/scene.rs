//! Scene assembly from a config: particles, targets and render setup.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fusion::RenderSetup;
use crate::mpm::{GridSpec, ParticleState};
use crate::objective::{make_target_images, TargetImages};
use crate::physics::{rasterize_target, TargetMassGrid};
use crate::shape::Shape;

/// Uniform interior fill in lattice coordinates with
/// `mass = density * volume / count` per particle, at rest.
pub fn init_particles(shape: &Shape, count: usize, density: f64, spec: &GridSpec, seed: u64) -> Result<ParticleState> {
    if count == 0 {
        return Err(Error::InvalidArgument("particle count must be at least 1".into()));
    }
    let center = spec.center();
    shape.check_inside(spec.lower() - center.x, spec.upper() - center.x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = shape
        .sample_interior(count, &mut rng)?
        .into_iter()
        .map(|p| p + center)
        .collect();
    let mass = density * shape.volume() / count as f64;
    Ok(ParticleState::at_rest(x, vec![mass; count]))
}

pub struct Scene {
    pub cfg: ExperimentConfig,
    pub source: Shape,
    pub target: Shape,
    pub initial: ParticleState,
    pub target_mass: TargetMassGrid,
    pub target_images: TargetImages,
    pub setup: RenderSetup,
}

impl Scene {
    pub fn build(cfg: &ExperimentConfig) -> Result<Scene> {
        cfg.validate()?;
        let spec = cfg.grid;
        let res = cfg.targets.mesh_resolution;
        let source = Shape::compile(&cfg.source, res)?;
        let target = Shape::compile(&cfg.target, res)?;
        let initial = init_particles(&source, cfg.anchors, cfg.sim.density, &spec, cfg.seed)?;
        let target_mass = rasterize_target(
            &target,
            &spec,
            initial.total_mass(),
            cfg.targets.mass_samples,
            cfg.seed ^ 0x7461_7267,
        )?;
        let target_images = make_target_images(
            &target,
            &cfg.camera,
            cfg.targets.image_samples,
            cfg.gaussian.sigma_iso,
            cfg.gaussian.opacity,
            cfg.seed ^ 0x696d_6167,
        )?;
        Ok(Scene {
            cfg: cfg.clone(),
            source,
            target,
            initial,
            target_mass,
            target_images,
            setup: RenderSetup {
                camera: cfg.camera.clone(),
                gaussian: cfg.gaussian.clone(),
                bridge: cfg.bridge.clone(),
                weights: cfg.render_weights,
            },
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.cfg.grid
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat3;
    use crate::shape::ShapeSpec;

    #[test]
    fn fill_mass_and_determinism() {
        let spec = GridSpec::new(16, 1.0);
        let shape = Shape::compile(
            &ShapeSpec::Sphere {
                center: [0.0; 3],
                radius: 1.0,
            },
            16,
        )
        .unwrap();
        let a = init_particles(&shape, 5000, 60.0, &spec, 3).unwrap();
        let expect = 60.0 * 4.0 / 3.0 * std::f64::consts::PI;
        assert!((a.total_mass() - expect).abs() < 0.01 * expect);
        assert!(a.f.iter().all(|f| *f == Mat3::identity()));
        assert_eq!(a, init_particles(&shape, 5000, 60.0, &spec, 3).unwrap());
        assert!(init_particles(&shape, 0, 60.0, &spec, 3).is_err());
        let c = spec.center();
        assert!(a.x.iter().all(|p| (p - c).norm() < 1.0));
    }
}
