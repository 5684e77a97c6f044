//! Upsampling bridge from physics anchors to render particles.
//!
//! Children are spawned around anchors in proportion to local volume change,
//! and every render particle (anchors first, then children) receives a
//! deformation gradient interpolated from its nearest anchors at two scales.
//! Neighbor sets are frozen per pass; gradients flow through the continuous
//! inverse-distance weights and the blend factor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cofactor, ddot, Mat3, Vec3};
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BridgeParams {
    /// Child budget per pass.
    pub m_child: usize,
    pub cap: usize,
    pub k_coarse: usize,
    pub k_fine: usize,
    pub tau: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub jitter: f64,
    pub uniform_mix: f64,
    pub k_spacing: usize,
    pub uniform_threshold: f64,
    pub eta: f64,
}

impl Default for BridgeParams {
    fn default() -> Self {
        BridgeParams {
            m_child: 4000,
            cap: 20,
            k_coarse: 64,
            k_fine: 16,
            tau: 0.1,
            alpha_min: 0.2,
            alpha_max: 0.8,
            jitter: 0.1,
            uniform_mix: 0.02,
            k_spacing: 8,
            uniform_threshold: 1e-4,
            eta: 1e-9,
        }
    }
}

impl BridgeParams {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("bridge.k_coarse", self.k_coarse >= 1),
            ("bridge.k_fine", self.k_fine >= 1),
            ("bridge.tau", self.tau > 0.0),
            (
                "bridge.alpha_min",
                (0.0..=1.0).contains(&self.alpha_min) && self.alpha_min <= self.alpha_max,
            ),
            ("bridge.alpha_max", (0.0..=1.0).contains(&self.alpha_max)),
            ("bridge.jitter", self.jitter >= 0.0),
            ("bridge.uniform_mix", (0.0..=1.0).contains(&self.uniform_mix)),
            ("bridge.k_spacing", self.k_spacing >= 1),
            ("bridge.uniform_threshold", self.uniform_threshold >= 0.0),
            ("bridge.eta", self.eta > 0.0),
        ];
        for (key, ok) in checks {
            if !ok {
                return Err(Error::config(key, "out of range"));
            }
        }
        Ok(())
    }
}

/// `|det F - 1|`.
pub fn deformation_magnitude(f: &Mat3) -> f64 {
    (f.determinant() - 1.0).abs()
}

fn uniform_counts(n: usize, budget: usize, cap: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let base = budget / n;
    let extra = budget % n;
    (0..n).map(|i| (base + usize::from(i < extra)).min(cap)).collect()
}

/// Children per anchor in proportion to `d`, capped, with the uniform
/// fallback when the mean magnitude is below `threshold`.
pub fn allocate_children(d: &[f64], m_child: usize, cap: usize, threshold: f64) -> Vec<usize> {
    let n = d.len();
    if n == 0 {
        return Vec::new();
    }
    let total: f64 = d.iter().sum();
    if !(total / n as f64 >= threshold) || !(total > 0.0) {
        return uniform_counts(n, m_child, cap);
    }
    d.iter()
        .map(|&di| ((di / total * m_child as f64).floor() as usize).min(cap))
        .collect()
}

/// Mixes a uniform share of the budget with the adaptive allocation.
pub fn allocate_with_mix(d: &[f64], m_child: usize, p: &BridgeParams) -> Vec<usize> {
    let uniform = (p.uniform_mix * m_child as f64).round() as usize;
    let adaptive = allocate_children(d, m_child - uniform, p.cap, p.uniform_threshold);
    let spread = uniform_counts(d.len(), uniform, p.cap);
    adaptive.iter().zip(&spread).map(|(a, b)| (a + b).min(p.cap)).collect()
}

/// Exact nearest-neighbor index over a uniform grid of buckets.
#[derive(Clone, Debug)]
pub struct SpatialIndex {
    points: Vec<Vec3>,
    lo: Vec3,
    cell: f64,
    dims: [i64; 3],
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl SpatialIndex {
    pub fn new(points: &[Vec3]) -> SpatialIndex {
        let n = points.len().max(1);
        let (lo, hi) = points.iter().fold(
            (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
            |(lo, hi), p| (lo.inf(p), hi.sup(p)),
        );
        let (lo, hi) = if points.is_empty() {
            (Vec3::zeros(), Vec3::zeros())
        } else {
            (lo, hi)
        };
        let ext = hi - lo;
        let vol = ext.iter().map(|e| e.max(ext.max() * 1e-3).max(1e-12)).product::<f64>();
        let cell = (vol / n as f64).cbrt().max(ext.max() / 256.0).max(1e-9);
        let dims = [0, 1, 2].map(|a| ((ext[a] / cell).floor() as i64 + 1).max(1));
        let cell_of = |p: &Vec3| {
            let c = [0, 1, 2].map(|a| (((p[a] - lo[a]) / cell).floor() as i64).clamp(0, dims[a] - 1));
            ((c[0] * dims[1] + c[1]) * dims[2] + c[2]) as usize
        };
        let n_cells = (dims[0] * dims[1] * dims[2]) as usize;
        let mut counts = vec![0usize; n_cells + 1];
        let keys: Vec<usize> = points.iter().map(cell_of).collect();
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for i in 0..n_cells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            order[fill[k]] = i;
            fill[k] += 1;
        }
        SpatialIndex {
            points: points.to_vec(),
            lo,
            cell,
            dims,
            starts: counts,
            order,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The `k` nearest points as `(index, squared distance)`, ordered by
    /// distance then index.
    pub fn nearest(&self, q: &Vec3, k: usize) -> Vec<(usize, f64)> {
        let k = k.min(self.points.len());
        if k == 0 {
            return Vec::new();
        }
        let c = [0, 1, 2].map(|a| ((q[a] - self.lo[a]) / self.cell).floor() as i64);
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        let max_r = (0..3)
            .map(|a| (c[a]).abs().max((self.dims[a] - 1 - c[a]).abs()))
            .max()
            .unwrap();
        let mut r = (0..3)
            .map(|a| (-c[a]).max(c[a] - (self.dims[a] - 1)).max(0))
            .max()
            .unwrap();
        loop {
            let range = |a: usize| (c[a] - r).max(0)..=(c[a] + r).min(self.dims[a] - 1);
            for x in range(0) {
                for y in range(1) {
                    let on_shell_xy = (x - c[0]).abs() == r || (y - c[1]).abs() == r;
                    for z in range(2) {
                        if !on_shell_xy && (z - c[2]).abs() != r {
                            continue;
                        }
                        let cell = ((x * self.dims[1] + y) * self.dims[2] + z) as usize;
                        for &i in &self.order[self.starts[cell]..self.starts[cell + 1]] {
                            let d2 = (self.points[i] - q).norm_squared();
                            if best.len() < k || (d2, i) < *best.last().unwrap() {
                                let pos = best.partition_point(|e| *e < (d2, i));
                                best.insert(pos, (d2, i));
                                best.truncate(k);
                            }
                        }
                    }
                }
            }
            if best.len() == k {
                let reach = r as f64 * self.cell;
                if best[k - 1].0 < reach * reach {
                    break;
                }
            }
            if r >= max_r {
                break;
            }
            r += 1;
        }
        best.into_iter().map(|(d2, i)| (i, d2)).collect()
    }
}

/// Normalized inverse-distance weights `w ∝ 1/(d + eta)`.
pub fn idw_weights(dist: &[f64], eta: f64) -> Vec<f64> {
    let u: Vec<f64> = dist.iter().map(|d| 1.0 / (d + eta)).collect();
    let total: f64 = u.iter().sum();
    u.into_iter().map(|v| v / total).collect()
}

/// Exact k nearest points and their normalized inverse-distance weights.
pub fn knn(points: &[Vec3], queries: &[Vec3], k: usize, eta: f64) -> Result<(Vec<Vec<usize>>, Vec<Vec<f64>>)> {
    if k > points.len() || k == 0 {
        return Err(Error::InvalidArgument(format!("k = {k} with {} points", points.len())));
    }
    let index = SpatialIndex::new(points);
    let res: Vec<(Vec<usize>, Vec<f64>)> = queries
        .par_iter()
        .map(|q| {
            let nn = index.nearest(q, k);
            let d: Vec<f64> = nn.iter().map(|e| e.1.sqrt()).collect();
            (nn.into_iter().map(|e| e.0).collect(), idw_weights(&d, eta))
        })
        .collect();
    Ok(res.into_iter().unzip())
}

/// Mean distance to the `k` nearest other points, floored at `floor`.
pub fn local_spacing(points: &[Vec3], k: usize, floor: f64) -> Result<Vec<f64>> {
    if points.len() <= k {
        return Err(Error::InvalidArgument(format!(
            "local spacing needs more than {k} points, got {}",
            points.len()
        )));
    }
    let index = SpatialIndex::new(points);
    Ok(points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let nn = index.nearest(p, k + 1);
            let others: Vec<f64> = nn.iter().filter(|e| e.0 != i).take(k).map(|e| e.1.sqrt()).collect();
            let h = others.iter().sum::<f64>() / others.len() as f64;
            h.max(floor)
        })
        .collect())
}

/// Render particles for one pass: anchors followed by children.
#[derive(Clone, Debug, PartialEq)]
pub struct SubdivisionPlan {
    pub n_anchors: usize,
    pub counts: Vec<usize>,
    pub spacing: Vec<f64>,
    /// Parent anchor per render particle.
    pub parent: Vec<usize>,
    /// Constant offset from the parent (`eps * h * e`); zero for anchors.
    pub offset: Vec<Vec3>,
}

impl SubdivisionPlan {
    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn n_children(&self) -> usize {
        self.len() - self.n_anchors
    }

    pub fn positions(&self, anchors: &[Vec3]) -> Vec<Vec3> {
        self.parent
            .iter()
            .zip(&self.offset)
            .map(|(&p, o)| anchors[p] + o)
            .collect()
    }
}

/// Allocates and spawns children from the current anchor state.
pub fn plan_subdivision(x: &[Vec3], f: &[Mat3], p: &BridgeParams, dx: f64, seed: u64) -> Result<SubdivisionPlan> {
    let n = x.len();
    let d: Vec<f64> = f.iter().map(deformation_magnitude).collect();
    let counts = allocate_with_mix(&d, p.m_child, p);
    let spacing = if n > p.k_spacing {
        local_spacing(x, p.k_spacing, 1e-6 * dx)?
    } else {
        vec![dx; n]
    };
    spawn_children(&counts, &spacing, p.jitter, seed)
}

/// Children at `x_parent + jitter * h * e` with `e ~ N(0, I)`.
pub fn spawn_children(counts: &[usize], spacing: &[f64], jitter: f64, seed: u64) -> Result<SubdivisionPlan> {
    if counts.len() != spacing.len() {
        return Err(Error::InvalidArgument("counts and spacing differ in length".into()));
    }
    let n = counts.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parent: Vec<usize> = (0..n).collect();
    let mut offset = vec![Vec3::zeros(); n];
    for (i, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            let e = Vec3::from_fn(|_, _| StandardNormal.sample(&mut rng));
            parent.push(i);
            offset.push(jitter * spacing[i] * e);
        }
    }
    Ok(SubdivisionPlan {
        n_anchors: n,
        counts: counts.to_vec(),
        spacing: spacing.to_vec(),
        parent,
        offset,
    })
}

/// Frozen neighbor sets for each render particle.
#[derive(Clone, Debug, PartialEq)]
pub struct Footprint {
    pub k_coarse: usize,
    pub k_fine: usize,
    pub coarse: Vec<usize>,
    pub fine: Vec<usize>,
}

impl Footprint {
    pub fn coarse_of(&self, j: usize) -> &[usize] {
        &self.coarse[j * self.k_coarse..(j + 1) * self.k_coarse]
    }

    pub fn fine_of(&self, j: usize) -> &[usize] {
        &self.fine[j * self.k_fine..(j + 1) * self.k_fine]
    }
}

/// Neighbor sets at both scales; `k` is clamped to the anchor count.
pub fn build_footprint(anchors: &[Vec3], render: &[Vec3], k_coarse: usize, k_fine: usize) -> Footprint {
    let index = SpatialIndex::new(anchors);
    let kc = k_coarse.min(anchors.len());
    let kf = k_fine.min(anchors.len());
    let per: Vec<(Vec<usize>, Vec<usize>)> = render
        .par_iter()
        .map(|q| {
            let nn = index.nearest(q, kc.max(kf));
            let ids: Vec<usize> = nn.iter().map(|e| e.0).collect();
            (ids[..kc].to_vec(), ids[..kf].to_vec())
        })
        .collect();
    let (c, f): (Vec<_>, Vec<_>) = per.into_iter().unzip();
    Footprint {
        k_coarse: kc,
        k_fine: kf,
        coarse: c.concat(),
        fine: f.concat(),
    }
}

/// Weighted sum written as `F_0 + Σ w_i (F_i - F_0)`, which reproduces a
/// constant field exactly.
fn weighted_f(ids: &[usize], w: &[f64], f: &[Mat3]) -> Mat3 {
    let f0 = f[ids[0]];
    let mut acc = Mat3::zeros();
    for (&i, &wi) in ids.iter().zip(w) {
        acc += wi * (f[i] - f0);
    }
    f0 + acc
}

/// Blend factor and the result `F_f + α (F_c - F_f)`.
pub fn blend(fc: &Mat3, ff: &Mat3, p: &BridgeParams) -> (Mat3, f64) {
    let (alpha, _) = blend_alpha(fc, ff, p);
    (ff + alpha * (fc - ff), alpha)
}

/// `α` and `dα/dz` (zero when clamped) for `z = (d_c - d_f) / τ`.
fn blend_alpha(fc: &Mat3, ff: &Mat3, p: &BridgeParams) -> (f64, f64) {
    let z = (deformation_magnitude(fc) - deformation_magnitude(ff)) / p.tau;
    let s = 1.0 / (1.0 + (-z).exp());
    if s < p.alpha_min {
        (p.alpha_min, 0.0)
    } else if s > p.alpha_max {
        (p.alpha_max, 0.0)
    } else {
        (s, s * (1.0 - s))
    }
}

/// Per-render-particle interpolation state.
#[derive(Clone, Debug)]
pub struct BridgeOutput {
    pub positions: Vec<Vec3>,
    pub f_coarse: Vec<Mat3>,
    pub f_fine: Vec<Mat3>,
    pub alpha: Vec<f64>,
    pub f_final: Vec<Mat3>,
    pub w_coarse: Vec<f64>,
    pub w_fine: Vec<f64>,
}

fn distances(q: &Vec3, ids: &[usize], x: &[Vec3]) -> Vec<f64> {
    ids.iter().map(|&i| (q - x[i]).norm()).collect()
}

/// Interpolates and blends anchor deformation gradients onto the plan's
/// render particles.
pub fn bridge_forward(
    x: &[Vec3],
    f: &[Mat3],
    plan: &SubdivisionPlan,
    fp: &Footprint,
    p: &BridgeParams,
) -> BridgeOutput {
    let positions = plan.positions(x);
    let rows: Vec<_> = (0..plan.len())
        .into_par_iter()
        .map(|j| {
            let q = &positions[j];
            let (ic, ifn) = (fp.coarse_of(j), fp.fine_of(j));
            let wc = idw_weights(&distances(q, ic, x), p.eta);
            let wf = idw_weights(&distances(q, ifn, x), p.eta);
            let fc = weighted_f(ic, &wc, f);
            let ff = weighted_f(ifn, &wf, f);
            let (fin, alpha) = blend(&fc, &ff, p);
            (fc, ff, alpha, fin, wc, wf)
        })
        .collect();
    let mut out = BridgeOutput {
        positions,
        f_coarse: Vec::with_capacity(rows.len()),
        f_fine: Vec::with_capacity(rows.len()),
        alpha: Vec::with_capacity(rows.len()),
        f_final: Vec::with_capacity(rows.len()),
        w_coarse: Vec::with_capacity(rows.len() * fp.k_coarse),
        w_fine: Vec::with_capacity(rows.len() * fp.k_fine),
    };
    for (fc, ff, a, fin, wc, wf) in rows {
        out.f_coarse.push(fc);
        out.f_fine.push(ff);
        out.alpha.push(a);
        out.f_final.push(fin);
        out.w_coarse.extend(wc);
        out.w_fine.extend(wf);
    }
    out
}

fn det_magnitude_grad(f: &Mat3) -> Mat3 {
    let s = (f.determinant() - 1.0).signum();
    s * cofactor(f)
}

/// Gradients through `F_final = F_f + α (F_c - F_f)` onto `F_c` and `F_f`.
fn blend_backward(fc: &Mat3, ff: &Mat3, g: &Mat3, p: &BridgeParams) -> (Mat3, Mat3) {
    let (alpha, ds) = blend_alpha(fc, ff, p);
    let mut gc = alpha * g;
    let mut gf = (1.0 - alpha) * g;
    if ds != 0.0 {
        let g_alpha = ddot(g, &(fc - ff));
        let gz = g_alpha * ds / p.tau;
        gc += gz * det_magnitude_grad(fc);
        gf -= gz * det_magnitude_grad(ff);
    }
    (gc, gf)
}

/// Adds one scale's contribution: `g_f[i] += w_i g` and the weight-path
/// gradients with respect to the query and the neighbor positions.
#[allow(clippy::too_many_arguments)]
fn scatter_scale(
    q: &Vec3,
    ids: &[usize],
    x: &[Vec3],
    f: &[Mat3],
    g: &Mat3,
    eta: f64,
    g_f: &mut [Mat3],
    g_x: &mut [Vec3],
) -> Vec3 {
    let d = distances(q, ids, x);
    let u: Vec<f64> = d.iter().map(|di| 1.0 / (di + eta)).collect();
    let total: f64 = u.iter().sum();
    let f0 = f[ids[0]];
    let gw: Vec<f64> = ids.iter().map(|&i| ddot(g, &(f[i] - f0))).collect();
    let mean: f64 = u.iter().zip(&gw).map(|(ui, gi)| ui / total * gi).sum();
    let mut g_q = Vec3::zeros();
    for (k, &i) in ids.iter().enumerate() {
        g_f[i] += (u[k] / total) * g;
        if d[k] < 1e-12 {
            continue;
        }
        let gu = (gw[k] - mean) / total;
        let gd = -u[k] * u[k] * gu;
        let dir = (q - x[i]) / d[k];
        g_q += gd * dir;
        g_x[i] -= gd * dir;
    }
    g_q
}

/// Adjoint of [`bridge_forward`]: maps gradients on the render particles'
/// final deformation gradients and positions to anchor `F` and `x`.
pub fn scatter_gradients(
    x: &[Vec3],
    f: &[Mat3],
    plan: &SubdivisionPlan,
    fp: &Footprint,
    out: &BridgeOutput,
    g_f_final: &[Mat3],
    g_mu: &[Vec3],
    p: &BridgeParams,
) -> Result<(Vec<Mat3>, Vec<Vec3>)> {
    let m = plan.len();
    if g_f_final.len() != m || g_mu.len() != m {
        return Err(Error::InvalidArgument(
            "gradient length differs from render particle count".into(),
        ));
    }
    let n = x.len();
    let (gf, gx) = par::chunked_reduce(
        m,
        || (vec![Mat3::zeros(); n], vec![Vec3::zeros(); n]),
        |(gf, gx), j| {
            let q = &out.positions[j];
            let (gc, gfine) = blend_backward(&out.f_coarse[j], &out.f_fine[j], &g_f_final[j], p);
            let mut g_q = g_mu[j];
            g_q += scatter_scale(q, fp.coarse_of(j), x, f, &gc, p.eta, gf, gx);
            g_q += scatter_scale(q, fp.fine_of(j), x, f, &gfine, p.eta, gf, gx);
            gx[plan.parent[j]] += g_q;
        },
        |(af, ax), (bf, bx)| {
            par::add_assign(af, &bf);
            par::add_assign(ax, &bx);
        },
    );
    Ok((gf, gx))
}

/// Forward-mode derivative of [`bridge_forward`] along anchor directions
/// `(dF, dx)`; returns the induced changes of `F_final` and positions.
#[allow(clippy::too_many_arguments)]
pub fn bridge_jvp(
    x: &[Vec3],
    f: &[Mat3],
    plan: &SubdivisionPlan,
    fp: &Footprint,
    out: &BridgeOutput,
    df: &[Mat3],
    dx: &[Vec3],
    p: &BridgeParams,
) -> (Vec<Mat3>, Vec<Vec3>) {
    let scale = |q: &Vec3, dq: &Vec3, ids: &[usize]| {
        let d = distances(q, ids, x);
        let u: Vec<f64> = d.iter().map(|di| 1.0 / (di + p.eta)).collect();
        let total: f64 = u.iter().sum();
        let du: Vec<f64> = ids
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                if d[k] < 1e-12 {
                    0.0
                } else {
                    -u[k] * u[k] * ((q - x[i]) / d[k]).dot(&(dq - dx[i]))
                }
            })
            .collect();
        let du_sum: f64 = du.iter().sum();
        let f0 = f[ids[0]];
        let mut out = Mat3::zeros();
        for (k, &i) in ids.iter().enumerate() {
            let w = u[k] / total;
            let dw = du[k] / total - w * du_sum / total;
            out += w * df[i] + dw * (f[i] - f0);
        }
        out
    };
    (0..plan.len())
        .into_par_iter()
        .map(|j| {
            let q = &out.positions[j];
            let dq = dx[plan.parent[j]];
            let dfc = scale(q, &dq, fp.coarse_of(j));
            let dff = scale(q, &dq, fp.fine_of(j));
            let (fc, ff) = (&out.f_coarse[j], &out.f_fine[j]);
            let (alpha, ds) = blend_alpha(fc, ff, p);
            let dalpha = ds / p.tau * (ddot(&det_magnitude_grad(fc), &dfc) - ddot(&det_magnitude_grad(ff), &dff));
            (dff + alpha * (dfc - dff) + dalpha * (fc - ff), dq)
        })
        .unzip()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cloud(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vec3::from_fn(|_, _| rng.random_range(0.0..4.0)))
            .collect()
    }

    #[test]
    fn deformation_magnitude_examples() {
        assert_eq!(deformation_magnitude(&Mat3::identity()), 0.0);
        assert_eq!(
            deformation_magnitude(&Mat3::from_diagonal(&Vec3::new(2.0, 1.0, 1.0))),
            1.0
        );
        assert_eq!(
            deformation_magnitude(&Mat3::from_diagonal(&Vec3::new(0.5, 1.0, 1.0))),
            0.5
        );
    }

    #[test]
    fn allocation_examples() {
        assert_eq!(allocate_children(&[1.0, 1.0, 2.0], 8, 20, 1e-4), vec![2, 2, 4]);
        assert_eq!(allocate_children(&[100.0, 1.0], 40, 20, 1e-4), vec![20, 0]);
        let u = allocate_children(&[0.0; 7], 30, 20, 1e-4);
        assert_eq!(u, vec![5, 5, 4, 4, 4, 4, 4]);
        assert!(u.iter().sum::<usize>() <= 30);
    }

    #[test]
    fn local_spacing_examples() {
        let triple = [Vec3::zeros(), Vec3::x(), 2.0 * Vec3::x()];
        assert_eq!(local_spacing(&triple, 2, 1e-6).unwrap()[1], 1.0);
        let line = [Vec3::zeros(), Vec3::x(), -Vec3::x(), 3.0 * Vec3::x()];
        assert_eq!(local_spacing(&line, 2, 1e-6).unwrap()[0], 1.0);

        let a = 0.7;
        let mut lattice = Vec::new();
        for i in 0..5 {
            for j in 0..5 {
                for k in 0..5 {
                    lattice.push(Vec3::new(i as f64, j as f64, k as f64) * a);
                }
            }
        }
        let h = local_spacing(&lattice, 6, 1e-6).unwrap();
        let centre = (2 * 5 + 2) * 5 + 2;
        assert!((h[centre] - a).abs() < 1e-12);

        let same = vec![Vec3::repeat(1.0); 5];
        assert!(local_spacing(&same, 2, 1e-6).unwrap().iter().all(|&h| h == 1e-6));
    }

    #[test]
    fn knn_matches_brute_force() {
        for seed in 0..5 {
            let pts = cloud(200, seed);
            let queries = cloud(50, seed + 100);
            for k in [1, 5, 16, 64, 200] {
                let (ids, w) = knn(&pts, &queries, k, 1e-9).unwrap();
                for (qi, q) in queries.iter().enumerate() {
                    let mut brute: Vec<(f64, usize)> = pts
                        .iter()
                        .enumerate()
                        .map(|(i, p)| ((p - q).norm_squared(), i))
                        .collect();
                    brute.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    let expect: Vec<usize> = brute[..k].iter().map(|e| e.1).collect();
                    assert_eq!(ids[qi], expect);
                    assert!((w[qi].iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
        assert!(knn(&cloud(3, 0), &[Vec3::zeros()], 4, 1e-9).is_err());
    }

    #[test]
    fn knn_ties_prefer_lower_index_and_far_queries_work() {
        let pts = vec![Vec3::x(), -Vec3::x(), Vec3::y(), -Vec3::y()];
        let nn = SpatialIndex::new(&pts).nearest(&Vec3::zeros(), 2);
        assert_eq!(nn.iter().map(|e| e.0).collect::<Vec<_>>(), vec![0, 1]);
        let far = SpatialIndex::new(&pts).nearest(&Vec3::new(100.0, 0.0, 0.0), 1);
        assert_eq!(far[0].0, 0);
    }

    #[test]
    fn exact_hit_dominates() {
        let pts = vec![Vec3::zeros(), Vec3::new(1e-3, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)];
        let (ids, w) = knn(&pts, &[Vec3::zeros()], 3, 1e-9).unwrap();
        assert_eq!(ids[0][0], 0);
        assert!(w[0][0] > 0.999);
    }

    #[test]
    fn spawn_examples() {
        let counts = vec![3, 0, 2];
        let h = vec![1.0, 2.0, 0.5];
        let p = spawn_children(&counts, &h, 0.0, 1).unwrap();
        let anchors = vec![Vec3::zeros(), Vec3::x(), Vec3::y()];
        let pos = p.positions(&anchors);
        assert_eq!(pos.len(), 8);
        assert!(pos[3..6].iter().all(|v| *v == anchors[0]));
        let a = spawn_children(&counts, &h, 0.1, 7).unwrap();
        let b = spawn_children(&counts, &h, 0.1, 7).unwrap();
        assert_eq!(a, b);

        let eps = 0.1;
        let big = spawn_children(&[100_000], &[1.0], eps, 3).unwrap();
        let mean = big.offset[1..].iter().sum::<Vec3>() / 100_000.0;
        assert!(mean.norm() < 3.0 * eps / (100_000f64).sqrt() * 3f64.sqrt());
    }

    #[test]
    fn interpolation_and_blend_examples() {
        let p = BridgeParams::default();
        let x = cloud(40, 1);
        let f0 = Mat3::new(1.1, 0.2, 0.0, 0.0, 0.9, 0.1, 0.3, 0.0, 1.05);
        let f = vec![f0; 40];
        let plan = spawn_children(&vec![2; 40], &vec![0.3; 40], 0.1, 2).unwrap();
        let fp = build_footprint(&x, &plan.positions(&x), 16, 8);
        let out = bridge_forward(&x, &f, &plan, &fp, &p);
        assert!(out.f_final.iter().all(|m| *m == f0));
        assert!(out.alpha.iter().all(|&a| a == 0.5));
        for j in 0..plan.len() {
            let s: f64 = out.w_coarse[j * 16..(j + 1) * 16].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }

        let two = vec![Vec3::new(-1.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)];
        let ids = [0, 1];
        let w = idw_weights(&distances(&Vec3::zeros(), &ids, &two), 1e-9);
        let a = Mat3::identity();
        let b = 3.0 * Mat3::identity();
        let mid = weighted_f(&ids, &w, &[a, b]);
        assert!((mid - 2.0 * Mat3::identity()).norm() < 1e-15);

        let big = Mat3::from_diagonal(&Vec3::new(3.0, 1.0, 1.0));
        let (_, alpha) = blend(&big, &Mat3::identity(), &BridgeParams { tau: 0.01, ..p.clone() });
        assert_eq!(alpha, p.alpha_max);
        let (same, _) = blend(&big, &big, &p);
        assert_eq!(same, big);
    }

    #[test]
    fn single_anchor_single_child_passes_gradient_through() {
        let p = BridgeParams::default();
        let x = vec![Vec3::new(1.0, 2.0, 3.0)];
        let f = vec![Mat3::identity()];
        let plan = spawn_children(&[1], &[1.0], 0.1, 4).unwrap();
        let fp = build_footprint(&x, &plan.positions(&x), 64, 16);
        let out = bridge_forward(&x, &f, &plan, &fp, &p);
        let g = Mat3::from_fn(|r, c| (r * 3 + c) as f64);
        let gmu = Vec3::new(0.5, -1.0, 2.0);
        let (gf, gx) =
            scatter_gradients(&x, &f, &plan, &fp, &out, &[Mat3::zeros(), g], &[Vec3::zeros(), gmu], &p).unwrap();
        assert!((gf[0] - g).norm() < 1e-12);
        assert_eq!(gx[0], gmu);
        let (gf, gx) =
            scatter_gradients(&x, &f, &plan, &fp, &out, &[Mat3::zeros(); 2], &[Vec3::zeros(); 2], &p).unwrap();
        assert_eq!(gf[0], Mat3::zeros());
        assert_eq!(gx[0], Vec3::zeros());
    }

    struct Scene {
        x: Vec<Vec3>,
        f: Vec<Mat3>,
        plan: SubdivisionPlan,
        fp: Footprint,
        p: BridgeParams,
        g_f: Vec<Mat3>,
        g_mu: Vec<Vec3>,
    }

    fn scene(seed: u64) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = cloud(30, seed);
        let f: Vec<Mat3> = (0..30)
            .map(|_| Mat3::identity() + Mat3::from_fn(|_, _| rng.random_range(-0.1..0.1)))
            .collect();
        let p = BridgeParams {
            tau: 0.5,
            alpha_min: 0.05,
            alpha_max: 0.95,
            ..BridgeParams::default()
        };
        let counts: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let plan = spawn_children(&counts, &vec![0.5; 30], 0.2, seed).unwrap();
        let fp = build_footprint(&x, &plan.positions(&x), 12, 4);
        let m = plan.len();
        let g_f = (0..m)
            .map(|_| Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let g_mu = (0..m)
            .map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
            .collect();
        Scene {
            x,
            f,
            plan,
            fp,
            p,
            g_f,
            g_mu,
        }
    }

    fn objective(s: &Scene, x: &[Vec3], f: &[Mat3]) -> f64 {
        let out = bridge_forward(x, f, &s.plan, &s.fp, &s.p);
        out.f_final.iter().zip(&s.g_f).map(|(a, b)| ddot(a, b)).sum::<f64>()
            + out.positions.iter().zip(&s.g_mu).map(|(a, b)| a.dot(b)).sum::<f64>()
    }

    #[test]
    fn scatter_matches_fd() {
        let s = scene(5);
        let out = bridge_forward(&s.x, &s.f, &s.plan, &s.fp, &s.p);
        let (gf, gx) = scatter_gradients(&s.x, &s.f, &s.plan, &s.fp, &out, &s.g_f, &s.g_mu, &s.p).unwrap();
        let h = 1e-6;
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-3);
        for i in 0..30 {
            for (r, c) in [(0, 0), (1, 2), (2, 1)] {
                let mut fp = s.f.clone();
                fp[i][(r, c)] += h;
                let mut fm = s.f.clone();
                fm[i][(r, c)] -= h;
                let fd = (objective(&s, &s.x, &fp) - objective(&s, &s.x, &fm)) / (2.0 * h);
                assert!(
                    rel(gf[i][(r, c)], fd) < 1e-4,
                    "F[{i}]({r},{c}): {} vs {fd}",
                    gf[i][(r, c)]
                );
            }
            for a in 0..3 {
                let mut xp = s.x.clone();
                xp[i][a] += h;
                let mut xm = s.x.clone();
                xm[i][a] -= h;
                let fd = (objective(&s, &xp, &s.f) - objective(&s, &xm, &s.f)) / (2.0 * h);
                assert!(rel(gx[i][a], fd) < 1e-4, "x[{i}][{a}]: {} vs {fd}", gx[i][a]);
            }
        }
    }

    #[test]
    fn scatter_is_adjoint_of_jvp() {
        for seed in [8, 9, 10] {
            let s = scene(seed);
            let out = bridge_forward(&s.x, &s.f, &s.plan, &s.fp, &s.p);
            let (gf, gx) = scatter_gradients(&s.x, &s.f, &s.plan, &s.fp, &out, &s.g_f, &s.g_mu, &s.p).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 99);
            let vf: Vec<Mat3> = (0..30)
                .map(|_| Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
                .collect();
            let vx: Vec<Vec3> = (0..30)
                .map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
                .collect();
            let (df, dmu) = bridge_jvp(&s.x, &s.f, &s.plan, &s.fp, &out, &vf, &vx, &s.p);
            let lhs: f64 = gf.iter().zip(&vf).map(|(a, b)| ddot(a, b)).sum::<f64>()
                + gx.iter().zip(&vx).map(|(a, b)| a.dot(b)).sum::<f64>();
            let rhs: f64 = s.g_f.iter().zip(&df).map(|(a, b)| ddot(a, b)).sum::<f64>()
                + s.g_mu.iter().zip(&dmu).map(|(a, b)| a.dot(b)).sum::<f64>();
            assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }
}
