//! Point clouds, rigid motions and planes.
//!
//! Everything here is a plain value type. Rotations are stored as 3x3
//! matrices that are checked for orthonormality on construction, so every
//! `RotationMatrix3` handed around the pipeline is a proper rotation.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = nalgebra::Point3<f64>;
pub type Vec3 = Vector3<f64>;

/// Tolerance used to validate orthonormality and determinant of rotations.
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Ground,
    Vegetation,
    Unclassified,
}

impl Label {
    pub fn code(self) -> u8 {
        match self {
            Label::Ground => 2,
            Label::Vegetation => 1,
            Label::Unclassified => 0,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            2 => Some(Label::Ground),
            1 => Some(Label::Vegetation),
            0 => Some(Label::Unclassified),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    labels: Option<Vec<Label>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        Self {
            points,
            labels: None,
        }
    }

    /// Builds a labelled cloud. Fails if the label count differs from the point count.
    pub fn with_labels(points: Vec<Point3>, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != points.len() {
            return Err(Error::DegenerateGeometry(format!(
                "{} labels for {} points",
                labels.len(),
                points.len()
            )));
        }
        Ok(Self {
            points,
            labels: Some(labels),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn labels(&self) -> Option<&[Label]> {
        self.labels.as_deref()
    }

    pub fn label(&self, i: usize) -> Label {
        self.labels
            .as_ref()
            .map_or(Label::Unclassified, |labels| labels[i])
    }

    /// Replaces the label field wholesale.
    pub fn set_labels(&mut self, labels: Vec<Label>) -> Result<()> {
        if labels.len() != self.points.len() {
            return Err(Error::DegenerateGeometry(format!(
                "{} labels for {} points",
                labels.len(),
                self.points.len()
            )));
        }
        self.labels = Some(labels);
        Ok(())
    }

    pub fn clear_labels(&mut self) {
        self.labels = None;
    }

    /// Points carrying the given label.
    pub fn filter_label(&self, label: Label) -> PointCloud {
        let points = match &self.labels {
            Some(labels) => self
                .points
                .iter()
                .zip(labels)
                .filter(|(_, l)| **l == label)
                .map(|(p, _)| *p)
                .collect(),
            None => Vec::new(),
        };
        PointCloud::new(points)
    }

    /// Axis-aligned bounds as (min, max). `None` for an empty cloud.
    pub fn bounds(&self) -> Option<(Point3, Point3)> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(lo, hi), p| {
            (
                Point3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z)),
                Point3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z)),
            )
        }))
    }

    pub fn centroid(&self) -> Option<Point3> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self
            .points
            .iter()
            .fold(Vec3::zeros(), |acc, p| acc + p.coords);
        Some(Point3::from(sum / self.points.len() as f64))
    }

    pub fn is_finite(&self) -> bool {
        self.points
            .iter()
            .all(|p| p.x.is_finite() && p.y.is_finite() && p.z.is_finite())
    }
}

/// A proper rotation (orthonormal, determinant +1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationMatrix3(Matrix3<f64>);

impl RotationMatrix3 {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Validates `m` as a proper rotation within [`ROTATION_TOL`].
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let err = (m.transpose() * m - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if !(err <= ROTATION_TOL) || !((det - 1.0).abs() <= ROTATION_TOL) {
            return Err(Error::DegenerateGeometry(format!(
                "not a proper rotation (orthonormality error {err:e}, det {det})"
            )));
        }
        Ok(Self(m))
    }

    /// Row-major construction.
    pub fn from_row_slice(rows: &[f64; 9]) -> Result<Self> {
        Self::new(Matrix3::from_row_slice(rows))
    }

    /// Counterclockwise rotation by `theta` radians about +z.
    pub fn about_z(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    /// Rotation of `angle` radians about the (normalized) `axis`.
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let k = axis.normalize();
        let kx = skew_matrix(&k);
        Self(Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos()))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn mul(&self, other: &RotationMatrix3) -> Self {
        Self(self.0 * other.0)
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    /// Counterclockwise yaw of the rotated x axis, in radians.
    pub fn yaw(&self) -> f64 {
        self.0[(1, 0)].atan2(self.0[(0, 0)])
    }

    /// Re-projects onto SO(3); used after long chains of products.
    pub(crate) fn orthonormalized(m: &Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut d = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Self(u * d * v_t)
    }
}

/// Skew-symmetric cross-product matrix: `skew_matrix(v) * w == v.cross(w)`.
pub fn skew_matrix(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues rotation taking unit vector `a` onto unit vector `b`.
///
/// Parallel inputs give the identity; antiparallel inputs give a half turn
/// about an axis orthogonal to `a`.
pub fn rotation_between_vectors(a: &Vec3, b: &Vec3) -> RotationMatrix3 {
    let a = a.normalize();
    let b = b.normalize();
    let v = a.cross(&b);
    let s = v.norm();
    let c = a.dot(&b);
    if s < 1e-12 {
        if c > 0.0 {
            return RotationMatrix3::identity();
        }
        let ax = a.cross(&Vec3::x());
        let ay = a.cross(&Vec3::y());
        let k = if ax.norm() >= ay.norm() { ax } else { ay }.normalize();
        return RotationMatrix3(2.0 * k * k.transpose() - Matrix3::identity());
    }
    let vx = skew_matrix(&v);
    // (1 - c) / s^2 == 1 / (1 + c) for unit inputs; the latter is exact for c >= 0.
    let factor = if c >= 0.0 { 1.0 / (1.0 + c) } else { (1.0 - c) / (s * s) };
    RotationMatrix3(Matrix3::identity() + vx + vx * vx * factor)
}

/// Geodesic angle between two rotations, in [0, pi].
pub fn rotation_angle_between(a: &RotationMatrix3, b: &RotationMatrix3) -> f64 {
    let m = a.0.transpose() * b.0;
    let cos = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let w = Vec3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    );
    let sin = (w.norm() / 2.0).min(1.0);
    sin.atan2(cos).clamp(0.0, std::f64::consts::PI)
}

/// `p -> R p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "crate::io::TransformJson", try_from = "crate::io::TransformJson")]
pub struct RigidTransform {
    pub rotation: RotationMatrix3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: RotationMatrix3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(RotationMatrix3::identity(), Vec3::zeros())
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(RotationMatrix3::identity(), t)
    }

    pub fn from_rotation(r: RotationMatrix3) -> Self {
        Self::new(r, Vec3::zeros())
    }

    pub fn transform_point(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation.0 * p.coords + self.translation)
    }

    /// Applies the transform to every point; labels are carried over.
    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        let points = self
            .points_iter(&cloud.points)
            .collect::<Vec<_>>();
        PointCloud {
            points,
            labels: cloud.labels.clone(),
        }
    }

    fn points_iter<'a>(&'a self, pts: &'a [Point3]) -> impl Iterator<Item = Point3> + 'a {
        pts.iter().map(move |p| self.transform_point(p))
    }

    /// `outer ∘ inner`: applies `inner` first.
    pub fn compose(outer: &RigidTransform, inner: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: RotationMatrix3(outer.rotation.0 * inner.rotation.0),
            translation: outer.rotation.0 * inner.translation + outer.translation,
        }
    }

    pub fn then(&self, outer: &RigidTransform) -> RigidTransform {
        RigidTransform::compose(outer, self)
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt.0 * self.translation),
        }
    }
}

/// Plane `a x + b y + c z + d = 0` with unit normal and `c >= 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl Plane {
    /// Normalizes the coefficients and flips the sign so the normal points up.
    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Result<Self> {
        let n = (a * a + b * b + c * c).sqrt();
        if !(n > 1e-15) || !d.is_finite() {
            return Err(Error::DegenerateGeometry("zero plane normal".into()));
        }
        let sign = if c < 0.0 { -1.0 } else { 1.0 };
        let k = sign / n;
        Ok(Self {
            a: a * k,
            b: b * k,
            c: c * k,
            d: d * k,
        })
    }

    pub fn from_point_normal(point: &Point3, normal: &Vec3) -> Result<Self> {
        Self::new(normal.x, normal.y, normal.z, -normal.dot(&point.coords))
    }

    pub fn normal(&self) -> Vec3 {
        Vec3::new(self.a, self.b, self.c)
    }

    pub fn signed_distance(&self, p: &Point3) -> f64 {
        self.a * p.x + self.b * p.y + self.c * p.z + self.d
    }

    /// Height of the plane above (x, y).
    pub fn z_at(&self, x: f64, y: f64) -> f64 {
        -(self.a * x + self.b * y + self.d) / self.c
    }

    /// The plane carried by a rotation about the origin.
    pub fn rotated(&self, r: &RotationMatrix3) -> Plane {
        self.transformed(&RigidTransform::from_rotation(*r))
    }

    /// The plane carried by a rigid transform: `n' = R n`, `d' = d - n'·t`.
    pub fn transformed(&self, t: &RigidTransform) -> Plane {
        let n = t.rotation.rotate(&self.normal());
        let d = self.d - n.dot(&t.translation);
        Plane::new(n.x, n.y, n.z, d).expect("rotated unit normal is non-zero")
    }
}
