//! Analytic and mesh shapes described by signed distance functions.
//!
//! Coordinates are world units relative to the grid centre. The compiled
//! [`Shape`] supports SDF queries, uniform interior sampling and
//! area-weighted surface sampling.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{rotation_axis_angle, Mat3, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeSpec {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
    },
    /// Axis along z.
    Cylinder {
        center: [f64; 3],
        radius: f64,
        half_height: f64,
    },
    /// Axis along z.
    Torus {
        center: [f64; 3],
        major_radius: f64,
        minor_radius: f64,
    },
    Capsule {
        a: [f64; 3],
        b: [f64; 3],
        radius: f64,
    },
    /// Triangle mesh from an OBJ file, recentred on its bounding box and
    /// scaled uniformly.
    Mesh {
        path: PathBuf,
        center: [f64; 3],
        scale: f64,
    },
    Union {
        shapes: Vec<ShapeSpec>,
    },
    Intersection {
        shapes: Vec<ShapeSpec>,
    },
    Difference {
        base: Box<ShapeSpec>,
        subtract: Box<ShapeSpec>,
    },
    Rotate {
        axis: [f64; 3],
        angle_deg: f64,
        pivot: [f64; 3],
        shape: Box<ShapeSpec>,
    },
    /// Two spheres over a rotated box, facing -y.
    Heart {
        center: [f64; 3],
        size: f64,
    },
    /// Column with a square base and cap.
    Pillar {
        center: [f64; 3],
        size: f64,
    },
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn mul(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

impl ShapeSpec {
    /// Uniformly scales every length and position about the origin.
    pub fn scaled(&self, f: f64) -> ShapeSpec {
        use ShapeSpec::*;
        match self {
            Sphere { center, radius } => Sphere {
                center: mul(*center, f),
                radius: radius * f,
            },
            Box { center, half_extents } => Box {
                center: mul(*center, f),
                half_extents: mul(*half_extents, f),
            },
            Cylinder {
                center,
                radius,
                half_height,
            } => Cylinder {
                center: mul(*center, f),
                radius: radius * f,
                half_height: half_height * f,
            },
            Torus {
                center,
                major_radius,
                minor_radius,
            } => Torus {
                center: mul(*center, f),
                major_radius: major_radius * f,
                minor_radius: minor_radius * f,
            },
            Capsule { a, b, radius } => Capsule {
                a: mul(*a, f),
                b: mul(*b, f),
                radius: radius * f,
            },
            Mesh { path, center, scale } => Mesh {
                path: path.clone(),
                center: mul(*center, f),
                scale: scale * f,
            },
            Union { shapes } => Union {
                shapes: shapes.iter().map(|s| s.scaled(f)).collect(),
            },
            Intersection { shapes } => Intersection {
                shapes: shapes.iter().map(|s| s.scaled(f)).collect(),
            },
            Difference { base, subtract } => Difference {
                base: std::boxed::Box::new(base.scaled(f)),
                subtract: std::boxed::Box::new(subtract.scaled(f)),
            },
            Rotate {
                axis,
                angle_deg,
                pivot,
                shape,
            } => Rotate {
                axis: *axis,
                angle_deg: *angle_deg,
                pivot: mul(*pivot, f),
                shape: std::boxed::Box::new(shape.scaled(f)),
            },
            Heart { center, size } => Heart {
                center: mul(*center, f),
                size: size * f,
            },
            Pillar { center, size } => Pillar {
                center: mul(*center, f),
                size: size * f,
            },
        }
    }

    /// Replaces presets with their primitive composition.
    fn expand(&self) -> ShapeSpec {
        use ShapeSpec::*;
        match self {
            Heart { center, size } => {
                let a = 0.8 * size;
                let q = a / (2.0 * std::f64::consts::SQRT_2);
                let c = add(*center, [0.0, 0.0, -0.058 * size]);
                Union {
                    shapes: vec![
                        Sphere {
                            center: add(c, [-q, 0.0, q]),
                            radius: 0.5 * a,
                        },
                        Sphere {
                            center: add(c, [q, 0.0, q]),
                            radius: 0.5 * a,
                        },
                        Rotate {
                            axis: [0.0, 1.0, 0.0],
                            angle_deg: 45.0,
                            pivot: c,
                            shape: std::boxed::Box::new(Box {
                                center: c,
                                half_extents: [0.5 * a, 0.3 * size, 0.5 * a],
                            }),
                        },
                    ],
                }
            }
            Pillar { center, size } => Union {
                shapes: vec![
                    Cylinder {
                        center: *center,
                        radius: 0.3 * size,
                        half_height: 0.8 * size,
                    },
                    Box {
                        center: add(*center, [0.0, 0.0, -0.8 * size]),
                        half_extents: [0.5 * size, 0.5 * size, 0.12 * size],
                    },
                    Box {
                        center: add(*center, [0.0, 0.0, 0.8 * size]),
                        half_extents: [0.5 * size, 0.5 * size, 0.12 * size],
                    },
                ],
            },
            Union { shapes } => Union {
                shapes: shapes.iter().map(|s| s.expand()).collect(),
            },
            Intersection { shapes } => Intersection {
                shapes: shapes.iter().map(|s| s.expand()).collect(),
            },
            Difference { base, subtract } => Difference {
                base: std::boxed::Box::new(base.expand()),
                subtract: std::boxed::Box::new(subtract.expand()),
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
                shape: std::boxed::Box::new(shape.expand()),
            },
            other => other.clone(),
        }
    }
}

#[derive(Clone, Debug)]
enum Prim {
    Sphere { c: Vec3, r: f64 },
    Cuboid { c: Vec3, h: Vec3 },
    Cylinder { c: Vec3, r: f64, h: f64 },
    Torus { c: Vec3, big: f64, small: f64 },
    Capsule { a: Vec3, b: Vec3, r: f64 },
    Mesh(std::sync::Arc<MeshSdf>),
}

#[derive(Clone, Debug)]
enum Node {
    Leaf(usize, Prim),
    Union(Vec<Node>),
    Intersection(Vec<Node>),
    Difference(Box<Node>, Box<Node>),
    /// `world = pivot + rot * (local - pivot)`
    Rotate {
        rot: Mat3,
        pivot: Vec3,
        child: Box<Node>,
    },
}

/// A leaf primitive with its accumulated placement.
#[derive(Clone, Debug)]
struct Leaf {
    id: usize,
    prim: Prim,
    rot: Mat3,
    offset: Vec3,
    area: f64,
}

/// Compiled shape.
#[derive(Clone, Debug)]
pub struct Shape {
    root: Node,
    leaves: Vec<Leaf>,
    lo: Vec3,
    hi: Vec3,
}

impl Prim {
    fn sdf(&self, p: &Vec3) -> f64 {
        match self {
            Prim::Sphere { c, r } => (p - c).norm() - r,
            Prim::Cuboid { c, h } => {
                let q = (p - c).abs() - h;
                q.map(|v| v.max(0.0)).norm() + q.max().min(0.0)
            }
            Prim::Cylinder { c, r, h } => {
                let d = p - c;
                let qx = d.xy().norm() - r;
                let qz = d.z.abs() - h;
                let outside = (qx.max(0.0).powi(2) + qz.max(0.0).powi(2)).sqrt();
                outside + qx.max(qz).min(0.0)
            }
            Prim::Torus { c, big, small } => {
                let d = p - c;
                let qx = d.xy().norm() - big;
                (qx * qx + d.z * d.z).sqrt() - small
            }
            Prim::Capsule { a, b, r } => {
                let ab = b - a;
                let t = ((p - a).dot(&ab) / ab.norm_squared().max(1e-300)).clamp(0.0, 1.0);
                (p - (a + t * ab)).norm() - r
            }
            Prim::Mesh(m) => m.sdf(p),
        }
    }

    fn bounds(&self) -> (Vec3, Vec3) {
        match self {
            Prim::Sphere { c, r } => (c.add_scalar(-r), c.add_scalar(*r)),
            Prim::Cuboid { c, h } => (c - h, c + h),
            Prim::Cylinder { c, r, h } => {
                let e = Vec3::new(*r, *r, *h);
                (c - e, c + e)
            }
            Prim::Torus { c, big, small } => {
                let e = Vec3::new(big + small, big + small, *small);
                (c - e, c + e)
            }
            Prim::Capsule { a, b, r } => (a.inf(b).add_scalar(-r), a.sup(b).add_scalar(*r)),
            Prim::Mesh(m) => (m.lo, m.hi),
        }
    }

    fn area(&self) -> f64 {
        use std::f64::consts::PI;
        match self {
            Prim::Sphere { r, .. } => 4.0 * PI * r * r,
            Prim::Cuboid { h, .. } => 8.0 * (h.x * h.y + h.y * h.z + h.x * h.z),
            Prim::Cylinder { r, h, .. } => 4.0 * PI * r * h + 2.0 * PI * r * r,
            Prim::Torus { big, small, .. } => 4.0 * PI * PI * big * small,
            Prim::Capsule { a, b, r } => 2.0 * PI * r * (b - a).norm() + 4.0 * PI * r * r,
            Prim::Mesh(m) => m.area_cdf.last().copied().unwrap_or(0.0),
        }
    }

    fn volume(&self) -> Option<f64> {
        use std::f64::consts::PI;
        match self {
            Prim::Sphere { r, .. } => Some(4.0 / 3.0 * PI * r.powi(3)),
            Prim::Cuboid { h, .. } => Some(8.0 * h.x * h.y * h.z),
            Prim::Cylinder { r, h, .. } => Some(2.0 * PI * r * r * h),
            Prim::Torus { big, small, .. } => Some(2.0 * PI * PI * big * small * small),
            Prim::Capsule { a, b, r } => Some(PI * r * r * (b - a).norm() + 4.0 / 3.0 * PI * r.powi(3)),
            Prim::Mesh(_) => None,
        }
    }

    /// Uniform point on the primitive's own surface.
    fn sample_surface(&self, rng: &mut ChaCha8Rng) -> Vec3 {
        use std::f64::consts::PI;
        match self {
            Prim::Sphere { c, r } => c + *r * unit_vector(rng),
            Prim::Cuboid { c, h } => {
                let areas = [h.y * h.z, h.x * h.z, h.x * h.y];
                let total = areas.iter().sum::<f64>();
                let mut u = rng.random::<f64>() * total;
                let mut axis = 2;
                for (i, a) in areas.iter().enumerate() {
                    if u < *a {
                        axis = i;
                        break;
                    }
                    u -= a;
                }
                let mut q = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0));
                q[axis] = if rng.random::<bool>() { 1.0 } else { -1.0 };
                c + q.component_mul(h)
            }
            Prim::Cylinder { c, r, h } => {
                let side = 4.0 * PI * r * h;
                let caps = 2.0 * PI * r * r;
                let theta = rng.random_range(0.0..2.0 * PI);
                if rng.random::<f64>() * (side + caps) < side {
                    c + Vec3::new(r * theta.cos(), r * theta.sin(), rng.random_range(-h..*h))
                } else {
                    let rr = r * rng.random::<f64>().sqrt();
                    let z = if rng.random::<bool>() { *h } else { -h };
                    c + Vec3::new(rr * theta.cos(), rr * theta.sin(), z)
                }
            }
            Prim::Torus { c, big, small } => loop {
                let theta = rng.random_range(0.0..2.0 * PI);
                let phi = rng.random_range(0.0..2.0 * PI);
                let ring = big + small * phi.cos();
                if rng.random::<f64>() * (big + small) <= ring {
                    break c + Vec3::new(ring * theta.cos(), ring * theta.sin(), small * phi.sin());
                }
            },
            Prim::Capsule { a, b, r } => {
                let axis = b - a;
                let len = axis.norm();
                let side = 2.0 * PI * r * len;
                let n = unit_vector(rng);
                if rng.random::<f64>() * (side + 4.0 * PI * r * r) < side {
                    let dir = axis / len;
                    let radial = (n - dir * n.dot(&dir)).normalize();
                    a + axis * rng.random::<f64>() + *r * radial
                } else if len > 0.0 && n.dot(&axis) > 0.0 {
                    b + *r * n
                } else {
                    a + *r * n
                }
            }
            Prim::Mesh(m) => m.sample_surface(rng),
        }
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::from_fn(|_, _| StandardNormal.sample(rng));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

impl Node {
    /// Signed distance; the leaf `zero` (if any) reports exactly 0.
    fn eval(&self, p: &Vec3, zero: Option<usize>) -> f64 {
        match self {
            Node::Leaf(id, prim) => {
                if Some(*id) == zero {
                    0.0
                } else {
                    prim.sdf(p)
                }
            }
            Node::Union(c) => c.iter().map(|n| n.eval(p, zero)).fold(f64::INFINITY, f64::min),
            Node::Intersection(c) => c.iter().map(|n| n.eval(p, zero)).fold(f64::NEG_INFINITY, f64::max),
            Node::Difference(a, b) => a.eval(p, zero).max(-b.eval(p, zero)),
            Node::Rotate { rot, pivot, child } => {
                let local = pivot + rot.transpose() * (p - pivot);
                child.eval(&local, zero)
            }
        }
    }

    fn bounds(&self) -> (Vec3, Vec3) {
        match self {
            Node::Leaf(_, prim) => prim.bounds(),
            Node::Union(c) => c.iter().map(|n| n.bounds()).fold(
                (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
                |(lo, hi), (l, h)| (lo.inf(&l), hi.sup(&h)),
            ),
            Node::Intersection(c) => c.iter().map(|n| n.bounds()).fold(
                (Vec3::repeat(f64::NEG_INFINITY), Vec3::repeat(f64::INFINITY)),
                |(lo, hi), (l, h)| (lo.sup(&l), hi.inf(&h)),
            ),
            Node::Difference(a, _) => a.bounds(),
            Node::Rotate { rot, pivot, child } => {
                let (l, h) = child.bounds();
                let mut lo = Vec3::repeat(f64::INFINITY);
                let mut hi = Vec3::repeat(f64::NEG_INFINITY);
                for k in 0..8 {
                    let corner = Vec3::new(
                        if k & 1 == 0 { l.x } else { h.x },
                        if k & 2 == 0 { l.y } else { h.y },
                        if k & 4 == 0 { l.z } else { h.z },
                    );
                    let w = pivot + rot * (corner - pivot);
                    lo = lo.inf(&w);
                    hi = hi.sup(&w);
                }
                (lo, hi)
            }
        }
    }

    fn collect_leaves(&self, rot: Mat3, offset: Vec3, out: &mut Vec<Leaf>) {
        match self {
            Node::Leaf(id, prim) => out.push(Leaf {
                id: *id,
                prim: prim.clone(),
                rot,
                offset,
                area: prim.area(),
            }),
            Node::Union(c) | Node::Intersection(c) => c.iter().for_each(|n| n.collect_leaves(rot, offset, out)),
            Node::Difference(a, b) => {
                a.collect_leaves(rot, offset, out);
                b.collect_leaves(rot, offset, out);
            }
            Node::Rotate { rot: r, pivot, child } => {
                // world = rot * (pivot + r (local - pivot)) + offset
                let new_rot = rot * r;
                let new_offset = rot * (pivot - r * pivot) + offset;
                child.collect_leaves(new_rot, new_offset, out);
            }
        }
    }
}

fn compile_node(spec: &ShapeSpec, next_id: &mut usize, mesh_res: usize) -> Result<Node> {
    use ShapeSpec as S;
    let positive = |name: &str, v: f64| {
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(Error::Shape(format!("{name} must be positive, got {v}")))
        }
    };
    let mut leaf = |prim: Prim| {
        let id = *next_id;
        *next_id += 1;
        Node::Leaf(id, prim)
    };
    Ok(match spec {
        S::Sphere { center, radius } => {
            positive("sphere radius", *radius)?;
            leaf(Prim::Sphere {
                c: Vec3::from(*center),
                r: *radius,
            })
        }
        S::Box { center, half_extents } => {
            for h in half_extents {
                positive("box half extent", *h)?;
            }
            leaf(Prim::Cuboid {
                c: Vec3::from(*center),
                h: Vec3::from(*half_extents),
            })
        }
        S::Cylinder {
            center,
            radius,
            half_height,
        } => {
            positive("cylinder radius", *radius)?;
            positive("cylinder half height", *half_height)?;
            leaf(Prim::Cylinder {
                c: Vec3::from(*center),
                r: *radius,
                h: *half_height,
            })
        }
        S::Torus {
            center,
            major_radius,
            minor_radius,
        } => {
            positive("torus minor radius", *minor_radius)?;
            if !(major_radius > minor_radius) {
                return Err(Error::Shape("torus major radius must exceed minor radius".into()));
            }
            leaf(Prim::Torus {
                c: Vec3::from(*center),
                big: *major_radius,
                small: *minor_radius,
            })
        }
        S::Capsule { a, b, radius } => {
            positive("capsule radius", *radius)?;
            leaf(Prim::Capsule {
                a: Vec3::from(*a),
                b: Vec3::from(*b),
                r: *radius,
            })
        }
        S::Mesh { path, center, scale } => {
            positive("mesh scale", *scale)?;
            let mesh = MeshSdf::load(path, Vec3::from(*center), *scale, mesh_res)?;
            leaf(Prim::Mesh(std::sync::Arc::new(mesh)))
        }
        S::Union { shapes } | S::Intersection { shapes } => {
            if shapes.is_empty() {
                return Err(Error::Shape("empty shape list".into()));
            }
            let children = shapes
                .iter()
                .map(|s| compile_node(s, next_id, mesh_res))
                .collect::<Result<Vec<_>>>()?;
            if matches!(spec, S::Union { .. }) {
                Node::Union(children)
            } else {
                Node::Intersection(children)
            }
        }
        S::Difference { base, subtract } => Node::Difference(
            Box::new(compile_node(base, next_id, mesh_res)?),
            Box::new(compile_node(subtract, next_id, mesh_res)?),
        ),
        S::Rotate {
            axis,
            angle_deg,
            pivot,
            shape,
        } => {
            let axis = Vec3::from(*axis);
            if !(axis.norm() > 0.0) {
                return Err(Error::Shape("rotation axis must be non-zero".into()));
            }
            Node::Rotate {
                rot: rotation_axis_angle(&axis, angle_deg.to_radians()),
                pivot: Vec3::from(*pivot),
                child: Box::new(compile_node(shape, next_id, mesh_res)?),
            }
        }
        S::Heart { .. } | S::Pillar { .. } => unreachable!("presets are expanded before compiling"),
    })
}

impl Shape {
    /// Compiles a spec; meshes are voxelized with `mesh_res` cells along
    /// their longest axis.
    pub fn compile(spec: &ShapeSpec, mesh_res: usize) -> Result<Shape> {
        let mut next = 0;
        let root = compile_node(&spec.expand(), &mut next, mesh_res.max(4))?;
        let (lo, hi) = root.bounds();
        if !(lo.iter().zip(hi.iter()).all(|(l, h)| l < h)) {
            return Err(Error::Shape("shape has empty bounds".into()));
        }
        let mut leaves = Vec::new();
        root.collect_leaves(Mat3::identity(), Vec3::zeros(), &mut leaves);
        Ok(Shape { root, leaves, lo, hi })
    }

    pub fn sdf(&self, p: &Vec3) -> f64 {
        self.root.eval(p, None)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        self.sdf(p) < 0.0
    }

    /// Axis-aligned bounds (conservative for CSG).
    pub fn bounds(&self) -> (Vec3, Vec3) {
        (self.lo, self.hi)
    }

    /// Fails unless the bounds lie within `[lo, hi]` on every axis.
    pub fn check_inside(&self, lo: f64, hi: f64) -> Result<()> {
        if self.lo.min() < lo || self.hi.max() > hi {
            return Err(Error::Shape(format!(
                "shape bounds [{:?}, {:?}] exceed the allowed box [{lo}, {hi}]",
                self.lo.as_slice(),
                self.hi.as_slice()
            )));
        }
        Ok(())
    }

    /// Rejection-sampled uniform interior points.
    pub fn sample_interior(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec3>> {
        let mut out = Vec::with_capacity(n);
        let mut misses = 0usize;
        while out.len() < n {
            let p = Vec3::from_fn(|i, _| rng.random_range(self.lo[i]..self.hi[i]));
            if self.contains(&p) {
                out.push(p);
                misses = 0;
            } else {
                misses += 1;
                if misses > 1_000_000 {
                    return Err(Error::Shape("shape interior is empty".into()));
                }
            }
        }
        Ok(out)
    }

    /// Volume: analytic for a single untransformed primitive, otherwise a
    /// seeded Monte-Carlo estimate.
    pub fn volume(&self) -> f64 {
        if let Node::Leaf(_, prim) = &self.root {
            if let Some(v) = prim.volume() {
                return v;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x766f6c);
        const TRIALS: usize = 1_000_000;
        let hits = (0..TRIALS)
            .filter(|_| {
                let p = Vec3::from_fn(|i, _| rng.random_range(self.lo[i]..self.hi[i]));
                self.contains(&p)
            })
            .count();
        let bbox = (self.hi - self.lo).product();
        bbox * hits as f64 / TRIALS as f64
    }

    /// Area-weighted uniform samples on the boundary. Leaf surfaces are
    /// sampled in proportion to their area and kept only where they lie on
    /// the composite boundary.
    pub fn sample_surface(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec3>> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample count must be at least 1".into()));
        }
        let total: f64 = self.leaves.iter().map(|l| l.area).sum();
        if !(total > 0.0) {
            return Err(Error::Shape("shape has no surface".into()));
        }
        let mut out = Vec::with_capacity(n);
        let mut misses = 0usize;
        while out.len() < n {
            let mut u = rng.random::<f64>() * total;
            let leaf = self
                .leaves
                .iter()
                .find(|l| {
                    if u < l.area {
                        true
                    } else {
                        u -= l.area;
                        false
                    }
                })
                .unwrap_or(self.leaves.last().unwrap());
            let local = leaf.prim.sample_surface(rng);
            let p = leaf.rot * local + leaf.offset;
            if self.leaves.len() == 1 || self.root.eval(&p, Some(leaf.id)) == 0.0 {
                out.push(p);
                misses = 0;
            } else {
                misses += 1;
                if misses > 1_000_000 {
                    return Err(Error::Shape("shape has no surface".into()));
                }
            }
        }
        Ok(out)
    }
}

/// Triangle mesh voxelized to a signed distance grid.
#[derive(Debug)]
pub struct MeshSdf {
    vertices: Vec<Vec3>,
    triangles: Vec<[usize; 3]>,
    area_cdf: Vec<f64>,
    lo: Vec3,
    hi: Vec3,
    origin: Vec3,
    h: f64,
    dims: [usize; 3],
    values: Vec<f64>,
}

impl MeshSdf {
    pub fn load(path: &Path, center: Vec3, scale: f64, res: usize) -> Result<MeshSdf> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let (mut vertices, triangles) =
            parse_obj(&text).map_err(|e| Error::Shape(format!("{}: {e}", path.display())))?;
        if triangles.is_empty() {
            return Err(Error::Shape(format!("OBJ {} has no faces", path.display())));
        }
        let (lo, hi) = vertices.iter().fold(
            (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
            |(lo, hi), v| (lo.inf(v), hi.sup(v)),
        );
        let mid = 0.5 * (lo + hi);
        for v in &mut vertices {
            *v = center + scale * (*v - mid);
        }
        if let Some(msg) = watertight_warning(&triangles) {
            log::warn!("{}: {msg}", path.display());
        }
        Ok(MeshSdf::from_triangles(vertices, triangles, res))
    }

    pub fn from_triangles(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>, res: usize) -> MeshSdf {
        let (lo, hi) = vertices.iter().fold(
            (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
            |(lo, hi), v| (lo.inf(v), hi.sup(v)),
        );
        let mut acc = 0.0;
        let area_cdf = triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| vertices[i]);
                acc += 0.5 * (b - a).cross(&(c - a)).norm();
                acc
            })
            .collect();
        let h = (hi - lo).max() / res as f64;
        let origin = lo.add_scalar(-2.0 * h);
        let dims = [0, 1, 2].map(|i| ((hi[i] - lo[i]) / h).ceil() as usize + 5);
        let mut mesh = MeshSdf {
            vertices,
            triangles,
            area_cdf,
            lo,
            hi,
            origin,
            h,
            dims,
            values: Vec::new(),
        };
        use rayon::prelude::*;
        let total = dims[0] * dims[1] * dims[2];
        mesh.values = (0..total)
            .into_par_iter()
            .map(|i| {
                let (x, y, z) = (i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]);
                let p = origin + Vec3::new(x as f64, y as f64, z as f64) * h;
                mesh.exact_sdf(&p)
            })
            .collect();
        mesh
    }

    /// Distance to the nearest triangle, negative where the winding number
    /// exceeds one half.
    fn exact_sdf(&self, p: &Vec3) -> f64 {
        let mut dist = f64::INFINITY;
        let mut winding = 0.0;
        for t in &self.triangles {
            let [a, b, c] = t.map(|i| self.vertices[i]);
            dist = dist.min((closest_on_triangle(p, &a, &b, &c) - p).norm());
            let (ra, rb, rc) = (a - p, b - p, c - p);
            let (la, lb, lc) = (ra.norm(), rb.norm(), rc.norm());
            let num = ra.dot(&rb.cross(&rc));
            let den = la * lb * lc + ra.dot(&rb) * lc + rb.dot(&rc) * la + rc.dot(&ra) * lb;
            winding += 2.0 * num.atan2(den);
        }
        winding /= 4.0 * std::f64::consts::PI;
        if winding.abs() > 0.5 {
            -dist
        } else {
            dist
        }
    }

    fn sdf(&self, p: &Vec3) -> f64 {
        let g = (p - self.origin) / self.h;
        let mut idx = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let last = self.dims[a] - 2;
            let c = g[a].clamp(0.0, (last + 1) as f64);
            idx[a] = (c.floor() as usize).min(last);
            frac[a] = c - idx[a] as f64;
        }
        let at = |x: usize, y: usize, z: usize| self.values[(x * self.dims[1] + y) * self.dims[2] + z];
        let mut v = 0.0;
        for k in 0..8 {
            let (ox, oy, oz) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
            let w = (if ox == 1 { frac[0] } else { 1.0 - frac[0] })
                * (if oy == 1 { frac[1] } else { 1.0 - frac[1] })
                * (if oz == 1 { frac[2] } else { 1.0 - frac[2] });
            v += w * at(idx[0] + ox, idx[1] + oy, idx[2] + oz);
        }
        // Outside the voxel box, add the distance to it.
        let clamped = p.sup(&self.origin).inf(
            &(self.origin
                + Vec3::new(
                    (self.dims[0] - 1) as f64,
                    (self.dims[1] - 1) as f64,
                    (self.dims[2] - 1) as f64,
                ) * self.h),
        );
        v + (p - clamped).norm()
    }

    fn sample_surface(&self, rng: &mut ChaCha8Rng) -> Vec3 {
        let total = *self.area_cdf.last().unwrap();
        let u = rng.random::<f64>() * total;
        let i = self.area_cdf.partition_point(|&c| c <= u).min(self.triangles.len() - 1);
        let [a, b, c] = self.triangles[i].map(|k| self.vertices[k]);
        let (mut r1, mut r2) = (rng.random::<f64>(), rng.random::<f64>());
        if r1 + r2 > 1.0 {
            r1 = 1.0 - r1;
            r2 = 1.0 - r2;
        }
        a + r1 * (b - a) + r2 * (c - a)
    }
}

/// Reads `v` and `f` records of a Wavefront OBJ; polygons are fanned into
/// triangles and other records ignored.
pub fn parse_obj(text: &str) -> std::result::Result<(Vec<Vec3>, Vec<[usize; 3]>), String> {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it
                    .take(3)
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| format!("line {}: {e}", lineno + 1))?;
                if c.len() != 3 {
                    return Err(format!("line {}: vertex needs three coordinates", lineno + 1));
                }
                vertices.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let mut idx = Vec::new();
                for tok in it {
                    let first = tok.split('/').next().unwrap_or("");
                    let i: i64 = first
                        .parse()
                        .map_err(|_| format!("line {}: bad face index `{tok}`", lineno + 1))?;
                    let resolved = if i < 0 { vertices.len() as i64 + i } else { i - 1 };
                    if resolved < 0 || resolved >= vertices.len() as i64 {
                        return Err(format!("line {}: face index {i} out of range", lineno + 1));
                    }
                    idx.push(resolved as usize);
                }
                if idx.len() < 3 {
                    return Err(format!("line {}: face needs at least three vertices", lineno + 1));
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    Ok((vertices, triangles))
}

/// Uniform samples on a triangle soup, weighted by area.
pub fn sample_triangles(
    vertices: &[Vec3],
    triangles: &[[usize; 3]],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec3>> {
    let mut acc = 0.0;
    let area_cdf: Vec<f64> = triangles
        .iter()
        .map(|t| {
            let [a, b, c] = t.map(|i| vertices[i]);
            acc += 0.5 * (b - a).cross(&(c - a)).norm();
            acc
        })
        .collect();
    if !(acc > 0.0) || n == 0 {
        return Err(Error::Shape("empty surface".into()));
    }
    let mesh = MeshSdf {
        vertices: vertices.to_vec(),
        triangles: triangles.to_vec(),
        area_cdf,
        lo: Vec3::zeros(),
        hi: Vec3::zeros(),
        origin: Vec3::zeros(),
        h: 1.0,
        dims: [0; 3],
        values: Vec::new(),
    };
    Ok((0..n).map(|_| mesh.sample_surface(rng)).collect())
}

/// Returns a message when the mesh fails the closed-manifold heuristic: every
/// edge shared by exactly two faces and Euler characteristic even.
pub fn watertight_warning(triangles: &[[usize; 3]]) -> Option<String> {
    use std::collections::HashMap;
    let mut edges: HashMap<(usize, usize), usize> = HashMap::new();
    for t in triangles {
        for k in 0..3 {
            let (a, b) = (t[k], t[(k + 1) % 3]);
            *edges.entry((a.min(b), a.max(b))).or_default() += 1;
        }
    }
    let used: std::collections::HashSet<usize> = triangles.iter().flatten().copied().collect();
    let chi = used.len() as i64 - edges.len() as i64 + triangles.len() as i64;
    let open = edges.values().filter(|&&c| c != 2).count();
    if open > 0 {
        Some(format!(
            "mesh is not watertight: {open} edges not shared by exactly two faces (Euler characteristic {chi})"
        ))
    } else if chi % 2 != 0 {
        Some(format!("mesh has odd Euler characteristic {chi}"))
    } else {
        None
    }
}

fn closest_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}
