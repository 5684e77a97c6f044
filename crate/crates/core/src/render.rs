//! Tile-based differentiable Gaussian splatting.
//!
//! Gaussians are sorted globally by camera depth (ties by index), binned into
//! 16x16 pixel tiles by their 3-sigma box, and composited front to back.
//! Alpha is `1 - T`, depth is the alpha-weighted mean camera depth and color
//! is composited over a white background.

use nalgebra::{Matrix2, Matrix2x3, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::RenderGaussian;
use crate::error::{Error, Result};
use crate::linalg::{Mat3, Vec3};

pub const TILE: usize = 16;
pub const COV2D_FLOOR: f64 = 0.3;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Alpha below which a pixel's depth reports `far`.
pub const DEPTH_ALPHA_MIN: f64 = 1e-6;

/// Pinhole camera with an OpenCV-style frame (x right, y down, z forward).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub near: f64,
    pub far: f64,
    pub eye: [f64; 3],
    pub target: [f64; 3],
    pub up: [f64; 3],
    pub light_dir: [f64; 3],
}

impl Default for Camera {
    fn default() -> Self {
        Camera {
            width: 256,
            height: 256,
            fx: 95.0,
            fy: 95.0,
            cx: 128.0,
            cy: 128.0,
            near: 0.01,
            far: 100.0,
            eye: [20.0, -25.0, 12.5],
            target: [0.0, 0.0, 0.0],
            up: [0.0, 0.0, 1.0],
            light_dir: [0.3, -0.5, 0.8],
        }
    }
}

impl Camera {
    /// Full-resolution camera of the reference setup.
    pub fn reference() -> Camera {
        Camera {
            width: 3840,
            height: 2160,
            fx: 1425.0,
            fy: 1425.0,
            cx: 1920.0,
            cy: 1080.0,
            ..Camera::default()
        }
    }

    /// Rows are the camera's right, down and forward axes in world space.
    pub fn rotation(&self) -> Mat3 {
        let eye = Vec3::from(self.eye);
        let fwd = (Vec3::from(self.target) - eye).normalize();
        let right = fwd.cross(&Vec3::from(self.up)).normalize();
        let down = fwd.cross(&right);
        Mat3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()])
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation() * (p - Vec3::from(self.eye))
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// Same camera looking from `eye`.
    pub fn with_eye(&self, eye: Vec3) -> Camera {
        Camera {
            eye: eye.into(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let eye = Vec3::from(self.eye);
        let fwd = Vec3::from(self.target) - eye;
        let checks = [
            ("camera.width", self.width > 0),
            ("camera.height", self.height > 0),
            ("camera.fx", self.fx > 0.0),
            ("camera.fy", self.fy > 0.0),
            ("camera.near", self.near > 0.0 && self.near < self.far),
            ("camera.far", self.far.is_finite()),
            ("camera.target", fwd.norm() > 0.0),
            ("camera.up", fwd.cross(&Vec3::from(self.up)).norm() > 1e-9 * fwd.norm()),
        ];
        for (key, ok) in checks {
            if !ok {
                return Err(Error::config(key, "invalid camera"));
            }
        }
        Ok(())
    }
}

/// Screen-space footprint of one Gaussian.
#[derive(Clone, Debug)]
pub struct Projected {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub inv2d: Matrix2<f64>,
    pub z: f64,
    pub pcam: Vec3,
    pub jac: Matrix2x3<f64>,
}

impl Projected {
    /// Half-widths of the 3-sigma box.
    pub fn extent(&self) -> (f64, f64) {
        (3.0 * self.cov2d[(0, 0)].sqrt(), 3.0 * self.cov2d[(1, 1)].sqrt())
    }
}

/// Projects a world-space Gaussian; `None` when outside `(near, far)`.
pub fn project(mean: &Vec3, cov: &Mat3, cam: &Camera) -> Option<Projected> {
    let w = cam.rotation();
    let p = w * (mean - Vec3::from(cam.eye));
    if !(p.z > cam.near && p.z < cam.far) {
        return None;
    }
    let iz = 1.0 / p.z;
    let jac = Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * p.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * p.y * iz * iz,
    );
    let m = w * cov * w.transpose();
    let mut cov2d = jac * m * jac.transpose();
    cov2d = 0.5 * (cov2d + cov2d.transpose());
    cov2d[(0, 0)] += COV2D_FLOOR;
    cov2d[(1, 1)] += COV2D_FLOOR;
    let inv2d = cov2d.try_inverse()?;
    Some(Projected {
        mean2d: Vector2::new(cam.fx * p.x * iz + cam.cx, cam.fy * p.y * iz + cam.cy),
        cov2d,
        inv2d,
        z: p.z,
        pcam: p,
        jac,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderImage {
    pub width: usize,
    pub height: usize,
    pub alpha: Vec<f64>,
    pub depth: Vec<f64>,
    /// Depth of the first Gaussian reaching `g > 0.5`; diagnostic only.
    pub first_hit: Vec<f64>,
    pub color: Vec<Vec3>,
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub image: RenderImage,
    /// Per Gaussian: `Σ_pixels T g`.
    pub contribution: Vec<f64>,
    /// Per Gaussian: `contribution / Σ_pixels g`, in `[0, 1]`.
    pub visibility: Vec<f64>,
    pub mean2d: Vec<Option<Vector2<f64>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderGrads {
    pub mean: Vec<Vec3>,
    pub cov: Vec<Mat3>,
    pub opacity: Vec<f64>,
}

struct Binned {
    proj: Vec<Option<Projected>>,
    /// Per tile: Gaussian indices in front-to-back order.
    tiles: Vec<Vec<usize>>,
    tiles_x: usize,
}

fn bin(gaussians: &[RenderGaussian], cam: &Camera) -> Binned {
    let proj: Vec<Option<Projected>> = gaussians.par_iter().map(|g| project(&g.mean, &g.cov, cam)).collect();
    let mut order: Vec<usize> = (0..gaussians.len()).filter(|&i| proj[i].is_some()).collect();
    order.sort_by(|&a, &b| {
        let (za, zb) = (proj[a].as_ref().unwrap().z, proj[b].as_ref().unwrap().z);
        za.total_cmp(&zb).then(a.cmp(&b))
    });
    let tiles_x = cam.width.div_ceil(TILE);
    let tiles_y = cam.height.div_ceil(TILE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for &i in &order {
        if let Some((x0, x1, y0, y1)) = pixel_box(proj[i].as_ref().unwrap(), cam) {
            for ty in y0 / TILE..=y1 / TILE {
                for tx in x0 / TILE..=x1 / TILE {
                    tiles[ty * tiles_x + tx].push(i);
                }
            }
        }
    }
    Binned { proj, tiles, tiles_x }
}

/// Inclusive pixel range of the 3-sigma box, clipped to the image.
fn pixel_box(p: &Projected, cam: &Camera) -> Option<(usize, usize, usize, usize)> {
    let (ex, ey) = p.extent();
    let (u, v) = (p.mean2d.x, p.mean2d.y);
    let x0 = (u - ex).ceil().max(0.0);
    let x1 = (u + ex).floor().min(cam.width as f64 - 1.0);
    let y0 = (v - ey).ceil().max(0.0);
    let y1 = (v + ey).floor().min(cam.height as f64 - 1.0);
    if x0 > x1 || y0 > y1 {
        return None;
    }
    Some((x0 as usize, x1 as usize, y0 as usize, y1 as usize))
}

#[inline]
fn in_box(p: &Projected, px: f64, py: f64) -> bool {
    let (ex, ey) = p.extent();
    (px - p.mean2d.x).abs() <= ex && (py - p.mean2d.y).abs() <= ey
}

#[inline]
fn falloff(p: &Projected, px: f64, py: f64) -> (f64, Vector2<f64>) {
    let d = Vector2::new(px, py) - p.mean2d;
    let q = d.dot(&(p.inv2d * d));
    ((-0.5 * q).exp(), d)
}

fn tile_pixels(tile: usize, tiles_x: usize, cam: &Camera) -> impl Iterator<Item = (usize, usize)> {
    let (tx, ty) = (tile % tiles_x, tile / tiles_x);
    let xs = tx * TILE..((tx + 1) * TILE).min(cam.width);
    let ys = ty * TILE..((ty + 1) * TILE).min(cam.height);
    ys.flat_map(move |y| xs.clone().map(move |x| (x, y)))
}

/// Lambert-shaded flat color; the normal is the covariance's minor axis.
fn shade(g: &RenderGaussian, cam: &Camera) -> Vec3 {
    let light = Vec3::from(cam.light_dir).normalize();
    let eig = nalgebra::SymmetricEigen::new(g.cov);
    let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    if hi <= lo * 1.0001 {
        return g.color;
    }
    let n = eig.eigenvectors.column(eig.eigenvalues.imin()).into_owned();
    let k = 0.35 + 0.65 * n.dot(&light).abs();
    g.color * k
}

pub fn render(gaussians: &[RenderGaussian], cam: &Camera) -> RenderOutput {
    let b = bin(gaussians, cam);
    let n = gaussians.len();
    let colors: Vec<Vec3> = gaussians.par_iter().map(|g| shade(g, cam)).collect();
    struct TileOut {
        pixels: Vec<(usize, f64, f64, f64, Vec3)>,
        contrib: Vec<f64>,
    }
    let per_tile: Vec<TileOut> = (0..b.tiles.len())
        .into_par_iter()
        .map(|t| {
            let list = &b.tiles[t];
            let mut contrib = vec![0.0; list.len()];
            let mut pixels = Vec::with_capacity(TILE * TILE);
            for (x, y) in tile_pixels(t, b.tiles_x, cam) {
                let (px, py) = (x as f64, y as f64);
                let mut trans = 1.0;
                let mut num = 0.0;
                let mut col = Vec3::zeros();
                let mut hit = cam.far;
                for (li, &k) in list.iter().enumerate() {
                    let p = b.proj[k].as_ref().unwrap();
                    if !in_box(p, px, py) {
                        continue;
                    }
                    let g = gaussians[k].opacity * falloff(p, px, py).0;
                    let c = trans * g;
                    num += c * p.z;
                    col += c * colors[k];
                    contrib[li] += c;
                    if g > 0.5 && hit == cam.far {
                        hit = p.z;
                    }
                    trans *= 1.0 - g;
                    if trans < MIN_TRANSMITTANCE {
                        break;
                    }
                }
                let alpha = 1.0 - trans;
                let depth = if alpha < DEPTH_ALPHA_MIN { cam.far } else { num / alpha };
                pixels.push((y * cam.width + x, alpha, depth, hit, col + trans * Vec3::repeat(1.0)));
            }
            TileOut { pixels, contrib }
        })
        .collect();

    let np = cam.pixels();
    let mut image = RenderImage {
        width: cam.width,
        height: cam.height,
        alpha: vec![0.0; np],
        depth: vec![cam.far; np],
        first_hit: vec![cam.far; np],
        color: vec![Vec3::repeat(1.0); np],
    };
    let mut contribution = vec![0.0; n];
    for (t, out) in per_tile.into_iter().enumerate() {
        for (idx, a, d, h, c) in out.pixels {
            image.alpha[idx] = a;
            image.depth[idx] = d;
            image.first_hit[idx] = h;
            image.color[idx] = c;
        }
        for (li, c) in out.contrib.into_iter().enumerate() {
            contribution[b.tiles[t][li]] += c;
        }
    }
    // Unoccluded footprint over the same 3-sigma box.
    let visibility: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|k| {
            let Some(p) = b.proj[k].as_ref() else { return 0.0 };
            let Some((x0, x1, y0, y1)) = pixel_box(p, cam) else {
                return 0.0;
            };
            let mut total = 0.0;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if in_box(p, x as f64, y as f64) {
                        total += gaussians[k].opacity * falloff(p, x as f64, y as f64).0;
                    }
                }
            }
            if total > 0.0 {
                (contribution[k] / total).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect();
    let mean2d = b.proj.iter().map(|p| p.as_ref().map(|p| p.mean2d)).collect();
    RenderOutput {
        image,
        contribution,
        visibility,
        mean2d,
    }
}

#[derive(Clone, Copy, Default)]
struct Acc {
    mean2d: Vector2<f64>,
    inv2d: Matrix2<f64>,
    opacity: f64,
    z: f64,
}

/// Gradients of a scalar with per-pixel sensitivities `g_alpha`, `g_depth`
/// with respect to every Gaussian's mean, covariance and opacity. The
/// forward composite is recomputed exactly.
pub fn render_backward(
    gaussians: &[RenderGaussian],
    cam: &Camera,
    g_alpha: &[f64],
    g_depth: &[f64],
) -> Result<RenderGrads> {
    let np = cam.pixels();
    if g_alpha.len() != np || g_depth.len() != np {
        return Err(Error::InvalidArgument("image gradient size differs from camera".into()));
    }
    let b = bin(gaussians, cam);
    let n = gaussians.len();
    let per_tile: Vec<Vec<Acc>> = (0..b.tiles.len())
        .into_par_iter()
        .map(|t| {
            let list = &b.tiles[t];
            let mut acc = vec![Acc::default(); list.len()];
            let mut stack: Vec<(usize, f64, f64, Vector2<f64>, f64)> = Vec::new();
            for (x, y) in tile_pixels(t, b.tiles_x, cam) {
                let idx = y * cam.width + x;
                let (ga, gd) = (g_alpha[idx], g_depth[idx]);
                if ga == 0.0 && gd == 0.0 {
                    continue;
                }
                let (px, py) = (x as f64, y as f64);
                stack.clear();
                let mut trans = 1.0;
                let mut num = 0.0;
                for (li, &k) in list.iter().enumerate() {
                    let p = b.proj[k].as_ref().unwrap();
                    if !in_box(p, px, py) {
                        continue;
                    }
                    let (e, d) = falloff(p, px, py);
                    let g = gaussians[k].opacity * e;
                    stack.push((li, g, trans, d, e));
                    num += trans * g * p.z;
                    trans *= 1.0 - g;
                    if trans < MIN_TRANSMITTANCE {
                        break;
                    }
                }
                let alpha = 1.0 - trans;
                let (g_num, g_a) = if alpha < DEPTH_ALPHA_MIN {
                    (0.0, ga)
                } else {
                    (gd / alpha, ga - gd * num / (alpha * alpha))
                };
                let mut a_next = 0.0;
                let mut n_next = 0.0;
                for &(li, g, tk, d, e) in stack.iter().rev() {
                    let k = list[li];
                    let z = b.proj[k].as_ref().unwrap().z;
                    let gg = g_a * tk * (1.0 - a_next) + g_num * tk * (z - n_next);
                    let a = &mut acc[li];
                    a.z += g_num * tk * g;
                    a.opacity += gg * e;
                    let gq = -0.5 * g * gg;
                    let inv = &b.proj[k].as_ref().unwrap().inv2d;
                    a.mean2d += -2.0 * gq * (inv * d);
                    a.inv2d += gq * d * d.transpose();
                    a_next = g + (1.0 - g) * a_next;
                    n_next = g * z + (1.0 - g) * n_next;
                }
            }
            acc
        })
        .collect();

    let mut total = vec![Acc::default(); n];
    for (t, acc) in per_tile.into_iter().enumerate() {
        for (li, a) in acc.into_iter().enumerate() {
            let k = b.tiles[t][li];
            let s = &mut total[k];
            s.mean2d += a.mean2d;
            s.inv2d += a.inv2d;
            s.opacity += a.opacity;
            s.z += a.z;
        }
    }

    let w = cam.rotation();
    let per: Vec<(Vec3, Mat3, f64)> = (0..n)
        .into_par_iter()
        .map(|k| {
            let Some(p) = b.proj[k].as_ref() else {
                return (Vec3::zeros(), Mat3::zeros(), 0.0);
            };
            let a = &total[k];
            let g_cov2d = -(p.inv2d * a.inv2d * p.inv2d);
            let g_cov2d = 0.5 * (g_cov2d + g_cov2d.transpose());
            let jw = p.jac * w;
            let g_cov = jw.transpose() * g_cov2d * jw;
            let m = w * gaussians[k].cov * w.transpose();
            let g_jac = 2.0 * g_cov2d * p.jac * m;
            let (x, y, z) = (p.pcam.x, p.pcam.y, p.pcam.z);
            let (fx, fy) = (cam.fx, cam.fy);
            let iz = 1.0 / z;
            let mut gp = Vec3::new(
                a.mean2d.x * fx * iz,
                a.mean2d.y * fy * iz,
                -a.mean2d.x * fx * x * iz * iz - a.mean2d.y * fy * y * iz * iz + a.z,
            );
            gp.x += g_jac[(0, 2)] * (-fx * iz * iz);
            gp.y += g_jac[(1, 2)] * (-fy * iz * iz);
            gp.z += g_jac[(0, 0)] * (-fx * iz * iz)
                + g_jac[(0, 2)] * (2.0 * fx * x * iz * iz * iz)
                + g_jac[(1, 1)] * (-fy * iz * iz)
                + g_jac[(1, 2)] * (2.0 * fy * y * iz * iz * iz);
            (w.transpose() * gp, g_cov, a.opacity)
        })
        .collect();
    let mut grads = RenderGrads {
        mean: Vec::with_capacity(n),
        cov: Vec::with_capacity(n),
        opacity: Vec::with_capacity(n),
    };
    for (m, c, o) in per {
        grads.mean.push(m);
        grads.cov.push(c);
        grads.opacity.push(o);
    }
    Ok(grads)
}
