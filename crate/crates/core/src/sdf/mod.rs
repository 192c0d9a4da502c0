//! Signed distance field geometry.
//!
//! Fields are negative inside, positive outside. Analytic primitives return
//! exact distances (box/torus use the standard bound-exact formulas); CSG
//! composites combine them with min/max; learned fields wrap any
//! [`DistanceField`] implementation, typically a neural network.

mod mesh;
mod trace;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use mesh::{extract_mesh, TriangleMesh, MAX_RESOLUTION, MIN_RESOLUTION};
pub use trace::{hit_epsilon, inside_trace, sphere_trace, sphere_trace_batch, SurfaceHit, TraceOptions, MAX_STEPS};

use crate::error::GeometryError;
use crate::math::{Aabb, Vec3};

type V = Vec3<f64>;

/// Minimum clearance between the zero-level set and the bounding box.
pub const BOX_MARGIN: f64 = 0.05;

/// Anything that can be sphere traced.
pub trait DistanceField: Send + Sync {
    fn distance(&self, p: V) -> f64;

    /// Unnormalized spatial gradient.
    fn gradient(&self, p: V) -> V;

    fn bounds(&self) -> Aabb<f64>;

    /// Whether `distance` is a true (or lower-bound) Euclidean distance.
    /// Non-metric fields are marched conservatively.
    fn is_metric(&self) -> bool {
        true
    }

    fn distance_batch(&self, points: &[V], out: &mut [f64]) {
        for (p, o) in points.iter().zip(out.iter_mut()) {
            *o = self.distance(*p);
        }
    }

    fn gradient_batch(&self, points: &[V], out: &mut [V]) {
        for (p, o) in points.iter().zip(out.iter_mut()) {
            *o = self.gradient(*p);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsgOp {
    Union,
    Intersection,
    Difference,
}

#[derive(Clone)]
pub enum SdfKind {
    Sphere {
        center: V,
        radius: f64,
    },
    Box {
        center: V,
        half_extents: V,
    },
    /// Ring in the plane `z = center.z`, symmetric about the z axis.
    Torus {
        center: V,
        major: f64,
        minor: f64,
    },
    Composite {
        op: CsgOp,
        a: Box<SdfField>,
        b: Box<SdfField>,
    },
    Learned(Arc<dyn DistanceField>),
}

impl fmt::Debug for SdfKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SdfKind::Sphere { center, radius } => f
                .debug_struct("Sphere")
                .field("center", center)
                .field("radius", radius)
                .finish(),
            SdfKind::Box { center, half_extents } => f
                .debug_struct("Box")
                .field("center", center)
                .field("half_extents", half_extents)
                .finish(),
            SdfKind::Torus { center, major, minor } => f
                .debug_struct("Torus")
                .field("center", center)
                .field("major", major)
                .field("minor", minor)
                .finish(),
            SdfKind::Composite { op, a, b } => f
                .debug_struct("Composite")
                .field("op", op)
                .field("a", a)
                .field("b", b)
                .finish(),
            SdfKind::Learned(_) => f.write_str("Learned(..)"),
        }
    }
}

/// Geometry plus a box guaranteed to contain `{x : f(x) <= 0}`.
#[derive(Clone, Debug)]
pub struct SdfField {
    kind: SdfKind,
    bounds: Aabb<f64>,
}

impl SdfField {
    pub fn sphere(center: V, radius: f64) -> Self {
        let bounds = Aabb::centered(center, V::splat(radius)).expand(BOX_MARGIN);
        Self {
            kind: SdfKind::Sphere { center, radius },
            bounds,
        }
    }

    pub fn unit_sphere() -> Self {
        Self::sphere(V::zero(), 1.0)
    }

    pub fn cuboid(center: V, half_extents: V) -> Self {
        let bounds = Aabb::centered(center, half_extents).expand(BOX_MARGIN);
        Self {
            kind: SdfKind::Box { center, half_extents },
            bounds,
        }
    }

    pub fn torus(center: V, major: f64, minor: f64) -> Self {
        let r = major + minor;
        let bounds = Aabb::centered(center, V::new(r, r, minor)).expand(BOX_MARGIN);
        Self {
            kind: SdfKind::Torus { center, major, minor },
            bounds,
        }
    }

    pub fn composite(op: CsgOp, a: SdfField, b: SdfField) -> Self {
        let bounds = match op {
            CsgOp::Union => a.bounds.union(&b.bounds),
            CsgOp::Intersection => a.bounds.intersection(&b.bounds),
            CsgOp::Difference => a.bounds,
        };
        Self {
            kind: SdfKind::Composite {
                op,
                a: Box::new(a),
                b: Box::new(b),
            },
            bounds,
        }
    }

    /// Wraps an arbitrary field; its own bounds are used.
    pub fn learned(field: Arc<dyn DistanceField>) -> Self {
        let bounds = field.bounds();
        Self {
            kind: SdfKind::Learned(field),
            bounds,
        }
    }

    pub fn kind(&self) -> &SdfKind {
        &self.kind
    }

    pub fn bounding_box(&self) -> Aabb<f64> {
        self.bounds
    }

    pub fn is_learned(&self) -> bool {
        matches!(self.kind, SdfKind::Learned(_))
    }

    /// Signed distance at `x`.
    pub fn query(&self, x: V) -> f64 {
        match &self.kind {
            SdfKind::Sphere { center, radius } => (x - *center).norm() - radius,
            SdfKind::Box { center, half_extents } => {
                let q = (x - *center).abs() - *half_extents;
                q.max(V::zero()).norm() + q.max_element().min(0.0)
            }
            SdfKind::Torus { center, major, minor } => {
                let p = x - *center;
                let ring = (p.x * p.x + p.y * p.y).sqrt() - major;
                (ring * ring + p.z * p.z).sqrt() - minor
            }
            SdfKind::Composite { op, a, b } => {
                let (da, db) = (a.query(x), b.query(x));
                match op {
                    CsgOp::Union => da.min(db),
                    CsgOp::Intersection => da.max(db),
                    CsgOp::Difference => da.max(-db),
                }
            }
            SdfKind::Learned(f) => f.distance(x),
        }
    }

    /// Closed-form (or network-exact) spatial gradient, unnormalized.
    pub fn gradient(&self, x: V) -> V {
        match &self.kind {
            SdfKind::Sphere { center, .. } => {
                let d = x - *center;
                let n = d.norm();
                if n == 0.0 {
                    V::zero()
                } else {
                    d / n
                }
            }
            SdfKind::Box { center, half_extents } => {
                let p = x - *center;
                let q = p.abs() - *half_extents;
                let sign = V::new(p.x.signum(), p.y.signum(), p.z.signum());
                let outside = q.max(V::zero());
                let len = outside.norm();
                if len > 0.0 {
                    (outside / len).mul_elem(sign)
                } else {
                    let axis = if q.x >= q.y && q.x >= q.z {
                        0
                    } else if q.y >= q.z {
                        1
                    } else {
                        2
                    };
                    let mut g = [0.0; 3];
                    g[axis] = sign[axis];
                    V::from_array(g)
                }
            }
            SdfKind::Torus { center, major, .. } => {
                let p = x - *center;
                let rho = (p.x * p.x + p.y * p.y).sqrt();
                let ring = rho - major;
                let len = (ring * ring + p.z * p.z).sqrt();
                if len == 0.0 || rho == 0.0 {
                    return V::zero();
                }
                let radial = ring / len;
                V::new(radial * p.x / rho, radial * p.y / rho, p.z / len)
            }
            SdfKind::Composite { op, a, b } => {
                let (da, db) = (a.query(x), b.query(x));
                match op {
                    CsgOp::Union => {
                        if da <= db {
                            a.gradient(x)
                        } else {
                            b.gradient(x)
                        }
                    }
                    CsgOp::Intersection => {
                        if da >= db {
                            a.gradient(x)
                        } else {
                            b.gradient(x)
                        }
                    }
                    CsgOp::Difference => {
                        if da >= -db {
                            a.gradient(x)
                        } else {
                            -b.gradient(x)
                        }
                    }
                }
            }
            SdfKind::Learned(f) => f.gradient(x),
        }
    }

    /// Unit outward normal `normalize(grad f)`.
    pub fn normal(&self, x: V) -> Result<V, GeometryError> {
        let g = self.gradient(x);
        let len = g.norm();
        if !(len > 1e-8) {
            return Err(GeometryError::DegenerateGradient);
        }
        Ok(g / len)
    }
}

impl DistanceField for SdfField {
    fn distance(&self, p: V) -> f64 {
        self.query(p)
    }

    fn gradient(&self, p: V) -> V {
        SdfField::gradient(self, p)
    }

    fn bounds(&self) -> Aabb<f64> {
        self.bounds
    }

    fn is_metric(&self) -> bool {
        match &self.kind {
            SdfKind::Learned(f) => f.is_metric(),
            SdfKind::Composite { a, b, .. } => a.is_metric() && b.is_metric(),
            _ => true,
        }
    }

    fn distance_batch(&self, points: &[V], out: &mut [f64]) {
        match &self.kind {
            SdfKind::Learned(f) => f.distance_batch(points, out),
            _ => {
                for (p, o) in points.iter().zip(out.iter_mut()) {
                    *o = self.query(*p);
                }
            }
        }
    }

    fn gradient_batch(&self, points: &[V], out: &mut [V]) {
        match &self.kind {
            SdfKind::Learned(f) => f.gradient_batch(points, out),
            _ => {
                for (p, o) in points.iter().zip(out.iter_mut()) {
                    *o = SdfField::gradient(self, *p);
                }
            }
        }
    }
}

/// Serializable description of an analytic shape, used by datasets, the
/// command line (`csg:<file>`) and checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ShapeSpec {
    Sphere {
        #[serde(default)]
        center: [f64; 3],
        radius: f64,
    },
    Box {
        #[serde(default)]
        center: [f64; 3],
        half_extents: [f64; 3],
    },
    Torus {
        #[serde(default)]
        center: [f64; 3],
        major: f64,
        minor: f64,
    },
    Csg {
        op: CsgOp,
        a: Box<ShapeSpec>,
        b: Box<ShapeSpec>,
    },
}

impl ShapeSpec {
    /// Built-in presets: `sphere`, `box`, `torus`.
    pub fn preset(name: &str) -> Option<Self> {
        Some(match name {
            "sphere" => ShapeSpec::Sphere {
                center: [0.0; 3],
                radius: 1.0,
            },
            "box" => ShapeSpec::Box {
                center: [0.0; 3],
                half_extents: [0.7; 3],
            },
            "torus" => ShapeSpec::Torus {
                center: [0.0; 3],
                major: 0.7,
                minor: 0.3,
            },
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: &str| Err(GeometryError::InvalidShape(m.to_string()));
        match self {
            ShapeSpec::Sphere { radius, .. } if !(*radius > 0.0) => bad("sphere radius must be positive"),
            ShapeSpec::Box { half_extents, .. } if half_extents.iter().any(|h| !(*h > 0.0)) => {
                bad("box half extents must be positive")
            }
            ShapeSpec::Torus { major, minor, .. } if !(*minor > 0.0 && *major > *minor) => {
                bad("torus needs major > minor > 0")
            }
            ShapeSpec::Csg { a, b, .. } => {
                a.validate()?;
                b.validate()
            }
            _ => Ok(()),
        }
    }

    pub fn to_field(&self) -> Result<SdfField, GeometryError> {
        self.validate()?;
        Ok(self.build())
    }

    fn build(&self) -> SdfField {
        match self {
            ShapeSpec::Sphere { center, radius } => SdfField::sphere(V::from_array(*center), *radius),
            ShapeSpec::Box { center, half_extents } => {
                SdfField::cuboid(V::from_array(*center), V::from_array(*half_extents))
            }
            ShapeSpec::Torus { center, major, minor } => SdfField::torus(V::from_array(*center), *major, *minor),
            ShapeSpec::Csg { op, a, b } => SdfField::composite(*op, a.build(), b.build()),
        }
    }
}
