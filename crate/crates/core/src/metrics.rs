//! Chamfer evaluation and anisotropy statistics.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bridge::SpatialIndex;
use crate::covariance::{anisotropy, RenderGaussian};
use crate::error::{Error, Result};
use crate::linalg::Vec3;
use crate::mpm::ParticleState;
use crate::render::{render, Camera};
use crate::scene::Scene;
use crate::shape::Shape;
use crate::train::render_state;

/// Visibility above which a particle counts as part of the outer shell.
pub const SHELL_VISIBILITY: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleSource {
    Predicted,
    Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointSample {
    pub points: Vec<Vec3>,
    pub source: SampleSource,
}

pub fn sample_shape_surface(shape: &Shape, n: usize, seed: u64) -> Result<PointSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(PointSample {
        points: shape.sample_surface(n, &mut rng)?,
        source: SampleSource::Target,
    })
}

/// Six axis-aligned views around `cam.target` at the configured eye distance.
pub fn shell_cameras(cam: &Camera) -> Vec<Camera> {
    let target = Vec3::from(cam.target);
    let dist = (Vec3::from(cam.eye) - target).norm();
    let mut out = Vec::with_capacity(6);
    for axis in 0..3 {
        for sign in [1.0, -1.0] {
            let mut dir = Vec3::zeros();
            dir[axis] = sign;
            let up = if axis == 2 { Vec3::y() } else { Vec3::z() };
            let mut c = cam.with_eye(target + dir * dist);
            c.up = up.into();
            out.push(c);
        }
    }
    out
}

/// Per Gaussian, the largest visibility over the shell views.
pub fn shell_visibility(gaussians: &[RenderGaussian], cam: &Camera) -> Vec<f64> {
    let mut vis = vec![0.0f64; gaussians.len()];
    for c in shell_cameras(cam) {
        let out = render(gaussians, &c);
        for (v, o) in vis.iter_mut().zip(&out.visibility) {
            *v = v.max(*o);
        }
    }
    vis
}

/// Uniform samples, by count, from the Gaussians visible in some shell view.
/// Returns every shell point when there are at most `n`.
pub fn sample_particle_shell(gaussians: &[RenderGaussian], cam: &Camera, n: usize, seed: u64) -> Result<PointSample> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let vis = shell_visibility(gaussians, cam);
    let shell: Vec<Vec3> = gaussians
        .iter()
        .zip(&vis)
        .filter(|(_, v)| **v > SHELL_VISIBILITY)
        .map(|(g, _)| g.mean)
        .collect();
    if shell.is_empty() {
        return Err(Error::InvalidArgument("particle cloud has no visible surface".into()));
    }
    let points = if shell.len() <= n {
        shell
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, shell.len(), n).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| shell[i]).collect()
    };
    Ok(PointSample {
        points,
        source: SampleSource::Predicted,
    })
}

fn mean_nearest(from: &[Vec3], to: &[Vec3]) -> f64 {
    let index = SpatialIndex::new(to);
    from.iter().map(|p| index.nearest(p, 1)[0].1).sum::<f64>() / from.len() as f64
}

fn bbox_diagonal(p: &[Vec3], q: &[Vec3]) -> f64 {
    let (lo, hi) = p.iter().chain(q).fold(
        (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
        |(lo, hi), x| (lo.inf(x), hi.sup(x)),
    );
    (hi - lo).norm()
}

/// Symmetric mean squared nearest distance over the joint bounding-box
/// diagonal. Zero when the diagonal is zero.
pub fn chamfer(p: &[Vec3], q: &[Vec3]) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::InvalidArgument("chamfer needs non-empty point sets".into()));
    }
    let diag = bbox_diagonal(p, q);
    if diag == 0.0 {
        return Ok(0.0);
    }
    Ok((mean_nearest(p, q) + mean_nearest(q, p)) / diag)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnisotropyStats {
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    /// Edges of `histogram`, `bins + 1` values from 1 to `max`.
    pub edges: Vec<f64>,
    pub histogram: Vec<usize>,
    pub n_anchors: usize,
    pub n_render: usize,
}

pub fn stats(gaussians: &[RenderGaussian], n_anchors: usize, bins: usize) -> AnisotropyStats {
    let mut a: Vec<f64> = gaussians.iter().map(|g| anisotropy(&g.cov)).collect();
    a.sort_by(f64::total_cmp);
    let n = a.len();
    let bins = bins.max(1);
    let max = a.last().copied().unwrap_or(1.0);
    let (mean, median) = if n == 0 {
        (0.0, 0.0)
    } else {
        let median = if n % 2 == 1 {
            a[n / 2]
        } else {
            0.5 * (a[n / 2 - 1] + a[n / 2])
        };
        (a.iter().sum::<f64>() / n as f64, median)
    };
    let hi = max.max(1.0 + 1e-9);
    let width = (hi - 1.0) / bins as f64;
    let edges = (0..=bins).map(|i| 1.0 + width * i as f64).collect();
    let mut histogram = vec![0; bins];
    for v in &a {
        let b = (((v - 1.0) / width).floor().max(0.0) as usize).min(bins - 1);
        histogram[b] += 1;
    }
    AnisotropyStats {
        mean,
        median,
        max,
        edges,
        histogram,
        n_anchors,
        n_render: n,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub chamfer: f64,
    pub n_predicted: usize,
    pub n_target: usize,
    pub anisotropy: AnisotropyStats,
}

/// Chamfer against the target surface and covariance statistics for an
/// anchor state. Splats are rendered at full opacity so that the shell
/// depends on geometry only, not on learned opacity multipliers.
pub fn evaluate(scene: &Scene, state: &ParticleState) -> Result<Evaluation> {
    let cfg = &scene.cfg;
    let seed = cfg.seed ^ 0x6576_616c;
    let (_, eval) = render_state(scene, state, &vec![1.0; state.len()], seed)?;
    let n = cfg.metrics.chamfer_samples;
    let pred = sample_particle_shell(&eval.gaussians, &cfg.camera, n, seed)?;
    let target = sample_shape_surface(&scene.target, n, seed.wrapping_add(1))?;
    Ok(Evaluation {
        chamfer: chamfer(&pred.points, &target.points)?,
        n_predicted: pred.points.len(),
        n_target: target.points.len(),
        anisotropy: stats(&eval.gaussians, state.len(), cfg.metrics.histogram_bins),
    })
}
