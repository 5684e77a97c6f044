//! Grid-mass morphing objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mpm::{p2g_mass, GridSpec};
use crate::par;
use crate::shape::Shape;

pub const DEFAULT_MASS_EPS: f64 = 1e-6;
pub const DEFAULT_MIN_MASS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicsWeights {
    pub w_mass: f64,
    pub w_min: f64,
    pub m_min: f64,
    pub eps: f64,
}

impl Default for PhysicsWeights {
    fn default() -> Self {
        PhysicsWeights {
            w_mass: 1.0,
            w_min: 5.0,
            m_min: DEFAULT_MIN_MASS,
            eps: DEFAULT_MASS_EPS,
        }
    }
}

impl PhysicsWeights {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("physics.w_mass", self.w_mass >= 0.0),
            ("physics.w_min", self.w_min >= 0.0),
            ("physics.m_min", self.m_min >= 0.0),
            ("physics.eps", self.eps > 0.0),
        ];
        for (key, ok) in checks {
            if !ok {
                return Err(Error::config(key, "out of range"));
            }
        }
        Ok(())
    }
}

/// Target node masses on the simulation lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMassGrid {
    pub spec: GridSpec,
    pub mass: Vec<f64>,
}

/// Deposits `n_samples` equal-mass interior samples of `shape` through the
/// simulation's B-spline and rescales to `total_mass`.
pub fn rasterize_target(
    shape: &Shape,
    spec: &GridSpec,
    total_mass: f64,
    n_samples: usize,
    seed: u64,
) -> Result<TargetMassGrid> {
    if n_samples == 0 || !(total_mass > 0.0) {
        return Err(Error::InvalidArgument("target needs samples and positive mass".into()));
    }
    let center = spec.center();
    shape.check_inside(spec.lower() - center.x, spec.upper() - center.x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<_> = shape
        .sample_interior(n_samples, &mut rng)?
        .into_iter()
        .map(|p| p + center)
        .collect();
    let mut mass = p2g_mass(&x, &vec![1.0; n_samples], spec)?;
    let scale = total_mass / par::sum(&mass);
    mass.iter_mut().for_each(|m| *m *= scale);
    Ok(TargetMassGrid { spec: *spec, mass })
}

fn check_len(m: &[f64], target: &[f64]) -> Result<()> {
    if m.len() != target.len() {
        return Err(Error::InvalidArgument(format!(
            "grid has {} nodes, target has {}",
            m.len(),
            target.len()
        )));
    }
    Ok(())
}

/// Sum of squared log-mass differences and its per-node gradient.
pub fn mass_loss(m: &[f64], target: &[f64], eps: f64) -> Result<(f64, Vec<f64>)> {
    check_len(m, target)?;
    let terms: Vec<(f64, f64)> = m
        .par_iter()
        .zip(target)
        .map(|(&mi, &ti)| {
            let d = (mi + 1.0 + eps).ln() - (ti + 1.0 + eps).ln();
            (d * d, 2.0 * d / (mi + 1.0 + eps))
        })
        .collect();
    let values: Vec<f64> = terms.iter().map(|t| t.0).collect();
    Ok((par::sum(&values), terms.into_iter().map(|t| t.1).collect()))
}

/// Quadratic penalty on nodes strictly below `m_min`.
pub fn min_mass_penalty(m: &[f64], m_min: f64) -> (f64, Vec<f64>) {
    let values: Vec<f64> = m
        .iter()
        .map(|&mi| if mi < m_min { (m_min - mi).powi(2) } else { 0.0 })
        .collect();
    let grad = m
        .iter()
        .map(|&mi| if mi < m_min { -2.0 * (m_min - mi) } else { 0.0 })
        .collect();
    (par::sum(&values), grad)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhysicsLoss {
    pub total: f64,
    pub mass: f64,
    pub min: f64,
    pub grad: Vec<f64>,
}

/// `w_mass * L_mass + w_min * L_min`.
pub fn physics_loss(m: &[f64], target: &[f64], w: &PhysicsWeights) -> Result<PhysicsLoss> {
    let (lm, gm) = mass_loss(m, target, w.eps)?;
    let (lmin, gmin) = min_mass_penalty(m, w.m_min);
    let grad = gm.iter().zip(&gmin).map(|(a, b)| w.w_mass * a + w.w_min * b).collect();
    Ok(PhysicsLoss {
        total: w.w_mass * lm + w.w_min * lmin,
        mass: lm,
        min: lmin,
        grad,
    })
}
