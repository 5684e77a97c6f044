//! Experiment configuration: one JSON file per run, every key optional.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bridge::BridgeParams;
use crate::covariance::GaussianParams;
use crate::error::{Error, Result};
use crate::fusion::AdamParams;
use crate::mpm::{GridSpec, SimParams};
use crate::objective::LossWeights;
use crate::physics::PhysicsWeights;
use crate::render::Camera;
use crate::shape::ShapeSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub episodes: usize,
    pub passes: usize,
    /// Simulation steps per episode.
    pub steps: usize,
    pub control_stride: usize,
    /// Per-episode control decay.
    pub gamma: f64,
    /// Take an optimizer step on the physics-only gradient in pass 1.
    pub pass1_step: bool,
    /// Start each episode from the previous episode's final state.
    pub chain_episodes: bool,
    /// Rebuild the subdivision plan every pass instead of every episode.
    pub refresh_per_pass: bool,
    /// Step size for the opacity multipliers.
    pub shrink_lr: f64,
    /// Backtrack each update until the physics loss does not increase.
    pub line_search: bool,
    /// Halvings tried before the update is rejected.
    pub line_search_iters: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            episodes: 40,
            passes: 3,
            steps: 10,
            control_stride: 1,
            gamma: 0.955,
            pass1_step: true,
            chain_episodes: false,
            refresh_per_pass: true,
            shrink_lr: 0.2,
            line_search: false,
            line_search_iters: 15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetConfig {
    /// Interior samples rasterized into the target mass grid.
    pub mass_samples: usize,
    /// Surface samples splatted into the target images.
    pub image_samples: usize,
    /// Voxels along the longest axis of mesh SDFs.
    pub mesh_resolution: usize,
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig {
            mass_samples: 200_000,
            image_samples: 50_000,
            mesh_resolution: 48,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Write PPM/PGM frames every this many episodes (0 disables).
    pub frame_every: usize,
    pub snapshots: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("out"),
            frame_every: 1,
            snapshots: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub chamfer_samples: usize,
    pub histogram_bins: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            chamfer_samples: 10_000,
            histogram_bins: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub grid: GridSpec,
    pub sim: SimParams,
    pub source: ShapeSpec,
    pub target: ShapeSpec,
    pub anchors: usize,
    pub training: TrainingConfig,
    pub optimizer: AdamParams,
    pub physics: PhysicsWeights,
    pub render_weights: LossWeights,
    pub bridge: BridgeParams,
    pub gaussian: GaussianParams,
    pub camera: Camera,
    pub targets: TargetConfig,
    pub metrics: MetricsConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        // Equal-volume sphere and cube, centred in the 32-cell domain.
        let radius = 8.0;
        let half = 0.5 * (4.0 / 3.0 * std::f64::consts::PI).cbrt() * radius;
        ExperimentConfig {
            name: "sphere_to_box".into(),
            seed: 0,
            grid: GridSpec::default(),
            sim: SimParams::default(),
            source: ShapeSpec::Sphere {
                center: [0.0; 3],
                radius,
            },
            target: ShapeSpec::Box {
                center: [0.0; 3],
                half_extents: [half; 3],
            },
            anchors: 1000,
            training: TrainingConfig::default(),
            optimizer: AdamParams::default(),
            physics: PhysicsWeights::default(),
            render_weights: LossWeights::default(),
            bridge: BridgeParams::default(),
            gaussian: GaussianParams::default(),
            camera: Camera::default(),
            targets: TargetConfig::default(),
            metrics: MetricsConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    fn parse(text: &str) -> Result<Self> {
        if text.trim().is_empty() {
            return Ok(ExperimentConfig::default());
        }
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            Error::config(key, e.into_inner().to_string())
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg = Self::parse(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config; relative mesh paths resolve against
    /// the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(dir) = path.parent() {
            cfg.source = resolve_mesh_paths(&cfg.source, dir);
            cfg.target = resolve_mesh_paths(&cfg.target, dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the fully resolved config to `<out>/config.json`.
    pub fn echo(&self, out_dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let path = out_dir.join("config.json");
        std::fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.sim.validate()?;
        self.physics.validate()?;
        self.render_weights.validate()?;
        self.bridge.validate()?;
        self.gaussian.validate()?;
        self.camera.validate()?;
        self.optimizer.validate()?;
        let t = &self.training;
        let checks = [
            ("anchors", self.anchors > 0),
            ("training.passes", t.passes >= 1),
            ("training.steps", t.steps >= 1),
            ("training.control_stride", t.control_stride >= 1),
            ("training.gamma", (0.0..=1.0).contains(&t.gamma)),
            ("training.shrink_lr", t.shrink_lr >= 0.0),
            ("targets.mass_samples", self.targets.mass_samples > 0),
            ("targets.image_samples", self.targets.image_samples > 0),
            ("targets.mesh_resolution", self.targets.mesh_resolution >= 4),
            ("metrics.chamfer_samples", self.metrics.chamfer_samples > 0),
            ("metrics.histogram_bins", self.metrics.histogram_bins > 0),
        ];
        for (key, ok) in checks {
            if !ok {
                return Err(Error::config(key, "out of range"));
            }
        }
        for (key, shape) in [("source", &self.source), ("target", &self.target)] {
            check_mesh_paths(shape, key)?;
        }
        Ok(())
    }

    /// Scales the grid resolution, shapes, camera distance and anchor count
    /// by `s`, keeping `dx`.
    pub fn with_resolution_scale(&self, s: f64) -> Result<Self> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::config("resolution_scale", "must be positive"));
        }
        let mut c = self.clone();
        c.grid.resolution = ((self.grid.resolution as f64) * s).round() as usize;
        c.source = self.source.scaled(s);
        c.target = self.target.scaled(s);
        c.anchors = ((self.anchors as f64) * s.powi(3)).round().max(1.0) as usize;
        let target = nalgebra::Vector3::from(self.camera.target);
        let eye = nalgebra::Vector3::from(self.camera.eye);
        c.camera.eye = (target + (eye - target) * s).into();
        c.validate()?;
        Ok(c)
    }
}

fn resolve_mesh_paths(shape: &ShapeSpec, dir: &Path) -> ShapeSpec {
    use ShapeSpec::*;
    match shape {
        Mesh { path, center, scale } if path.is_relative() => Mesh {
            path: dir.join(path),
            center: *center,
            scale: *scale,
        },
        Union { shapes } => Union {
            shapes: shapes.iter().map(|s| resolve_mesh_paths(s, dir)).collect(),
        },
        Intersection { shapes } => Intersection {
            shapes: shapes.iter().map(|s| resolve_mesh_paths(s, dir)).collect(),
        },
        Difference { base, subtract } => Difference {
            base: std::boxed::Box::new(resolve_mesh_paths(base, dir)),
            subtract: std::boxed::Box::new(resolve_mesh_paths(subtract, dir)),
        },
        Rotate {
            axis,
            angle_deg,
            pivot,
            shape,
        } => Rotate {
            axis: *axis,
            angle_deg: *angle_deg,
            pivot: *pivot,
            shape: std::boxed::Box::new(resolve_mesh_paths(shape, dir)),
        },
        other => other.clone(),
    }
}

fn check_mesh_paths(shape: &ShapeSpec, key: &str) -> Result<()> {
    use ShapeSpec::*;
    match shape {
        Mesh { path, .. } if !path.exists() => Err(Error::config(
            format!("{key}.path"),
            format!("mesh file {} not found", path.display()),
        )),
        Union { shapes } | Intersection { shapes } => {
            for (i, s) in shapes.iter().enumerate() {
                check_mesh_paths(s, &format!("{key}.shapes[{i}]"))?;
            }
            Ok(())
        }
        Difference { base, subtract } => {
            check_mesh_paths(base, &format!("{key}.base"))?;
            check_mesh_paths(subtract, &format!("{key}.subtract"))
        }
        Rotate { shape, .. } => check_mesh_paths(shape, &format!("{key}.shape")),
        _ => Ok(()),
    }
}
