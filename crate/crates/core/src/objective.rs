//! Image-space losses between rendered and target images.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::covariance::RenderGaussian;
use crate::error::{Error, Result};
use crate::linalg::{Mat3, Vec3};
use crate::render::{render, Camera, RenderImage, RenderOutput};
use crate::shape::Shape;

pub const MASK_MIN_RATIO: f64 = 0.05;
pub const MASK_MAX_RATIO: f64 = 0.60;
pub const EDGE_THRESHOLD: f64 = 0.1;
pub const DEPTH_SUPPORT_ALPHA: f64 = 0.5;
const EDGE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_alpha: f64,
    pub w_depth: f64,
    pub w_edge: f64,
    pub w_shrink: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_alpha: 1.5,
            w_depth: 4.0,
            w_edge: 3.0,
            w_shrink: 0.5,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            w_alpha: 0.0,
            w_depth: 0.0,
            w_edge: 0.0,
            w_shrink: 0.0,
        }
    }

    /// True when no image channel contributes a gradient.
    pub fn image_free(&self) -> bool {
        self.w_alpha == 0.0 && self.w_depth == 0.0 && self.w_edge == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        for (key, w) in [
            ("render_weights.w_alpha", self.w_alpha),
            ("render_weights.w_depth", self.w_depth),
            ("render_weights.w_edge", self.w_edge),
            ("render_weights.w_shrink", self.w_shrink),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(key, "weight must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetImages {
    pub width: usize,
    pub height: usize,
    pub alpha: Vec<f64>,
    pub depth: Vec<f64>,
}

/// Splats `points` as isotropic Gaussians of scale `sigma`.
pub fn target_images_from_points(points: &[Vec3], cam: &Camera, sigma: f64, opacity: f64) -> TargetImages {
    let gaussians: Vec<RenderGaussian> = points
        .iter()
        .map(|p| RenderGaussian {
            mean: *p,
            cov: sigma * sigma * Mat3::identity(),
            opacity,
            color: Vec3::repeat(0.5),
        })
        .collect();
    let img = render(&gaussians, cam).image;
    TargetImages {
        width: img.width,
        height: img.height,
        alpha: img.alpha,
        depth: img.depth,
    }
}

/// Target alpha and depth from `n` area-weighted surface samples.
pub fn make_target_images(
    shape: &Shape,
    cam: &Camera,
    n: usize,
    sigma: f64,
    opacity: f64,
    seed: u64,
) -> Result<TargetImages> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = shape.sample_surface(n, &mut rng)?;
    Ok(target_images_from_points(&points, cam, sigma, opacity))
}

fn check_sizes(a: &[f64], b: &[f64], mask: &[bool]) -> Result<()> {
    if a.len() != b.len() || a.len() != mask.len() {
        return Err(Error::InvalidArgument("image sizes differ".into()));
    }
    Ok(())
}

/// Masked mean squared error times the masked fraction, i.e. the masked sum
/// divided by the total pixel count.
pub fn alpha_loss(a: &[f64], target: &[f64], mask: &[bool]) -> Result<(f64, Vec<f64>)> {
    check_sizes(a, target, mask)?;
    let n = a.len() as f64;
    let mut loss = 0.0;
    let grad = a
        .iter()
        .zip(target)
        .zip(mask)
        .map(|((x, t), &m)| {
            if !m {
                return 0.0;
            }
            let d = x - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, grad))
}

/// Depth MSE over `mask` pixels where both alphas exceed 0.5, depths
/// normalized by `far - near`, scaled by the masked fraction.
pub fn depth_loss(
    d: &[f64],
    target: &[f64],
    a: &[f64],
    a_target: &[f64],
    mask: &[bool],
    near: f64,
    far: f64,
) -> Result<(f64, Vec<f64>)> {
    check_sizes(d, target, mask)?;
    check_sizes(a, a_target, mask)?;
    let range = far - near;
    let support: Vec<bool> = (0..d.len())
        .map(|i| mask[i] && a[i] > DEPTH_SUPPORT_ALPHA && a_target[i] > DEPTH_SUPPORT_ALPHA)
        .collect();
    let count = support.iter().filter(|&&s| s).count();
    if count == 0 {
        return Ok((0.0, vec![0.0; d.len()]));
    }
    let ratio = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
    let scale = ratio / count as f64;
    let mut loss = 0.0;
    let grad = (0..d.len())
        .map(|i| {
            if !support[i] {
                return 0.0;
            }
            let e = (d[i] - target[i]) / range;
            loss += e * e;
            2.0 * scale * e / range
        })
        .collect();
    Ok((scale * loss, grad))
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

#[inline]
fn clamped(i: usize, o: usize, n: usize) -> usize {
    (i + o).saturating_sub(1).min(n - 1)
}

/// Replicate-padded 3x3 Sobel responses `(gx, gy)`.
pub fn sobel(img: &[f64], width: usize, height: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; img.len()];
    let mut gy = vec![0.0; img.len()];
    for y in 0..height {
        for x in 0..width {
            let (mut sx, mut sy) = (0.0, 0.0);
            for (oy, (kx, ky)) in SOBEL_X.iter().zip(&SOBEL_Y).enumerate() {
                for ox in 0..3 {
                    let v = img[clamped(y, oy, height) * width + clamped(x, ox, width)];
                    sx += kx[ox] * v;
                    sy += ky[ox] * v;
                }
            }
            gx[y * width + x] = sx;
            gy[y * width + x] = sy;
        }
    }
    (gx, gy)
}

/// Smooth gradient magnitude `sqrt(gx² + gy² + 1e-12)`.
pub fn edge_magnitude(img: &[f64], width: usize, height: usize) -> Vec<f64> {
    let (gx, gy) = sobel(img, width, height);
    gx.iter()
        .zip(&gy)
        .map(|(a, b)| (a * a + b * b + EDGE_EPS).sqrt())
        .collect()
}

/// MSE between Sobel magnitudes of `a` and `target`.
pub fn edge_loss(a: &[f64], target: &[f64], width: usize, height: usize) -> Result<(f64, Vec<f64>)> {
    if a.len() != target.len() || a.len() != width * height {
        return Err(Error::InvalidArgument("image sizes differ".into()));
    }
    let n = a.len() as f64;
    let (gx, gy) = sobel(a, width, height);
    let et = edge_magnitude(target, width, height);
    let mut loss = 0.0;
    let mut ggx = vec![0.0; a.len()];
    let mut ggy = vec![0.0; a.len()];
    for i in 0..a.len() {
        let e = (gx[i] * gx[i] + gy[i] * gy[i] + EDGE_EPS).sqrt();
        let d = e - et[i];
        loss += d * d;
        let ge = 2.0 * d / n;
        ggx[i] = ge * gx[i] / e;
        ggy[i] = ge * gy[i] / e;
    }
    let mut grad = vec![0.0; a.len()];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            for (oy, (kx, ky)) in SOBEL_X.iter().zip(&SOBEL_Y).enumerate() {
                for ox in 0..3 {
                    let src = clamped(y, oy, height) * width + clamped(x, ox, width);
                    grad[src] += kx[ox] * ggx[i] + ky[ox] * ggy[i];
                }
            }
        }
    }
    Ok((loss / n, grad))
}

/// `mean_k m_k (1 - vis_k)` and its gradient in the multipliers.
pub fn shrink_loss(multipliers: &[f64], visibility: &[f64]) -> Result<(f64, Vec<f64>)> {
    if multipliers.len() != visibility.len() {
        return Err(Error::InvalidArgument(
            "multiplier and visibility lengths differ".into(),
        ));
    }
    if multipliers.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = multipliers.len() as f64;
    let loss = multipliers
        .iter()
        .zip(visibility)
        .map(|(m, v)| m * (1.0 - v))
        .sum::<f64>()
        / n;
    Ok((loss, visibility.iter().map(|v| (1.0 - v) / n).collect()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Too few pixels; every pixel counts.
    Disabled,
    Active,
    /// Too many pixels; a seeded random subset is kept.
    Subsampled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisibilityMask {
    pub pixels: Vec<bool>,
    pub mode: MaskMode,
}

impl VisibilityMask {
    pub fn full(n: usize) -> Self {
        VisibilityMask {
            pixels: vec![true; n],
            mode: MaskMode::Disabled,
        }
    }

    pub fn ratio(&self) -> f64 {
        self.pixels.iter().filter(|&&p| p).count() as f64 / self.pixels.len().max(1) as f64
    }
}

/// Dilated Sobel edges of alpha together with depth hits, over every image
/// in `images` (all the same size).
pub fn visibility_mask(
    images: &[(&[f64], &[f64])],
    width: usize,
    height: usize,
    far: f64,
    seed: u64,
) -> VisibilityMask {
    let n = width * height;
    let mut raw = vec![false; n];
    for (alpha, depth) in images {
        let edges = edge_magnitude(alpha, width, height);
        for y in 0..height {
            for x in 0..width {
                let i = y * width + x;
                if depth[i] < far {
                    raw[i] = true;
                }
                if edges[i] > EDGE_THRESHOLD {
                    for oy in 0..3 {
                        for ox in 0..3 {
                            raw[clamped(y, oy, height) * width + clamped(x, ox, width)] = true;
                        }
                    }
                }
            }
        }
    }
    let on: Vec<usize> = (0..n).filter(|&i| raw[i]).collect();
    let ratio = on.len() as f64 / n as f64;
    if ratio < MASK_MIN_RATIO {
        return VisibilityMask::full(n);
    }
    if ratio > MASK_MAX_RATIO {
        let keep = (MASK_MAX_RATIO * n as f64).round() as usize;
        let mut shuffled = on;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut pixels = vec![false; n];
        for &i in &shuffled[..keep] {
            pixels[i] = true;
        }
        return VisibilityMask {
            pixels,
            mode: MaskMode::Subsampled,
        };
    }
    VisibilityMask {
        pixels: raw,
        mode: MaskMode::Active,
    }
}

/// Gaussians whose screen centre lands on a mask pixel and whose composited
/// contribution exceeds `1e-3`.
pub fn visible_gaussians(out: &RenderOutput, mask: &VisibilityMask) -> Vec<bool> {
    let (w, h) = (out.image.width, out.image.height);
    out.mean2d
        .iter()
        .zip(&out.contribution)
        .map(|(m, &c)| {
            let Some(m) = m else { return false };
            let (x, y) = (m.x.round(), m.y.round());
            if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                return false;
            }
            c > 1e-3 && mask.pixels[y as usize * w + x as usize]
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RenderLoss {
    pub alpha: f64,
    pub depth: f64,
    pub edge: f64,
    pub shrink: f64,
    pub total: f64,
    /// Image gradients, zero outside the mask.
    pub g_alpha: Vec<f64>,
    pub g_depth: Vec<f64>,
    /// Gradient in the per-Gaussian opacity multipliers.
    pub g_multiplier: Vec<f64>,
}

/// Weighted sum of the four channels. Image gradients are restricted to the
/// mask pixels.
pub fn render_loss(
    img: &RenderImage,
    target: &TargetImages,
    mask: &VisibilityMask,
    multipliers: &[f64],
    visibility: &[f64],
    cam: &Camera,
    w: &LossWeights,
) -> Result<RenderLoss> {
    if img.width != target.width || img.height != target.height {
        return Err(Error::InvalidArgument("render and target sizes differ".into()));
    }
    let (la, ga) = alpha_loss(&img.alpha, &target.alpha, &mask.pixels)?;
    let (ld, gd) = depth_loss(
        &img.depth,
        &target.depth,
        &img.alpha,
        &target.alpha,
        &mask.pixels,
        cam.near,
        cam.far,
    )?;
    let (le, ge) = edge_loss(&img.alpha, &target.alpha, img.width, img.height)?;
    let (ls, gs) = shrink_loss(multipliers, visibility)?;
    let g_alpha = (0..ga.len())
        .map(|i| {
            if mask.pixels[i] {
                w.w_alpha * ga[i] + w.w_edge * ge[i]
            } else {
                0.0
            }
        })
        .collect();
    let g_depth = gd.iter().map(|g| w.w_depth * g).collect();
    Ok(RenderLoss {
        alpha: la,
        depth: ld,
        edge: le,
        shrink: ls,
        total: w.w_alpha * la + w.w_depth * ld + w.w_edge * le + w.w_shrink * ls,
        g_alpha,
        g_depth,
        g_multiplier: gs.iter().map(|g| w.w_shrink * g).collect(),
    })
}
