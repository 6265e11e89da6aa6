//! Rigid-body transforms, quaternions, dual quaternions and pairwise pose
//! error metrics.
//!
//! Convention: a [`RigidTransform`] `T` registering a pair maps source-frame
//! coordinates into the template frame, so `T.apply(source)` lies on top of
//! the template. With template = scan `t` and source = scan `t + 1` this
//! chains as `P[t+1] = P[t] * T[t]`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::ops::Mul;

use crate::error::{Error, Result};
use crate::tolerance;

/// How the per-point feature channels of a cloud should be interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureKind {
    None,
    Intensity,
    /// Three channels holding unit surface normals.
    Normals,
    Generic,
}

/// An unordered set of XYZ points with an optional fixed-width feature
/// vector per point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
    features: Vec<f64>,
    width: usize,
    kind: FeatureKind,
}

impl PointCloud {
    /// Coordinates only (`c = 0`). Panics on non-finite coordinates.
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        Self::with_features(points, Vec::new(), 0, FeatureKind::None)
            .expect("point coordinates must be finite")
    }

    pub fn with_features(
        points: Vec<Vector3<f64>>,
        features: Vec<f64>,
        width: usize,
        kind: FeatureKind,
    ) -> Result<Self> {
        if features.len() != points.len() * width {
            return Err(Error::InvalidArgument(format!(
                "feature buffer has {} values, expected {} points x {} channels",
                features.len(),
                points.len(),
                width
            )));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidArgument(format!("point {i} has non-finite coordinates")));
        }
        if kind == FeatureKind::Normals && width != 3 {
            return Err(Error::InvalidArgument(format!(
                "normal features need 3 channels, got {width}"
            )));
        }
        let kind = if width == 0 { FeatureKind::None } else { kind };
        Ok(Self {
            points,
            features,
            width,
            kind,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn feature_width(&self) -> usize {
        self.width
    }

    pub fn feature_kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.width..(i + 1) * self.width]
    }

    /// Reorders the cloud so that new point `k` is old point `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let points = order.iter().map(|&i| self.points[i]).collect();
        let features = order.iter().flat_map(|&i| self.feature(i).iter().copied()).collect();
        Self {
            points,
            features,
            width: self.width,
            kind: self.kind,
        }
    }

    /// Returns the subset of points at the given indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        self.permuted(indices)
    }

    /// Same features, new coordinates.
    pub(crate) fn with_points(&self, points: Vec<Vector3<f64>>) -> Self {
        debug_assert_eq!(points.len(), self.points.len());
        Self {
            points,
            features: self.features.clone(),
            width: self.width,
            kind: self.kind,
        }
    }

    pub(crate) fn with_feature_buffer(&self, features: Vec<f64>) -> Self {
        debug_assert_eq!(features.len(), self.features.len());
        Self {
            points: self.points.clone(),
            features,
            width: self.width,
            kind: self.kind,
        }
    }

    pub fn centroid(&self) -> Vector3<f64> {
        if self.points.is_empty() {
            return Vector3::zeros();
        }
        self.points.iter().sum::<Vector3<f64>>() / self.points.len() as f64
    }
}

/// Quaternion `w + xi + yj + zk`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion::new(1.0, 0.0, 0.0, 0.0);
    pub const ZERO: Quaternion = Quaternion::new(0.0, 0.0, 0.0, 0.0);

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    /// Pure quaternion `(0, v)`.
    pub fn pure(v: &Vector3<f64>) -> Self {
        Self::new(0.0, v.x, v.y, v.z)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn dot(&self, other: &Quaternion) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn conjugate(&self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new(self.w * s, self.x * s, self.y * s, self.z * s)
    }

    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if !(n > tolerance::ZERO_NORM) {
            return Err(Error::Degenerate(format!("quaternion norm {n:e} is zero")));
        }
        Ok(self.scale(1.0 / n))
    }

    /// Rotation about a unit `axis` by `angle` radians.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let a = axis.normalize();
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new(c, a.x * s, a.y * s, a.z * s)
    }

    /// Unit quaternion of a rotation matrix (Shepperd's method).
    pub fn from_rotation(r: &Matrix3<f64>) -> Self {
        let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Self::new(
                0.25 * s,
                (r[(2, 1)] - r[(1, 2)]) / s,
                (r[(0, 2)] - r[(2, 0)]) / s,
                (r[(1, 0)] - r[(0, 1)]) / s,
            )
        } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
            let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
            Self::new(
                (r[(2, 1)] - r[(1, 2)]) / s,
                0.25 * s,
                (r[(0, 1)] + r[(1, 0)]) / s,
                (r[(0, 2)] + r[(2, 0)]) / s,
            )
        } else if r[(1, 1)] > r[(2, 2)] {
            let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
            Self::new(
                (r[(0, 2)] - r[(2, 0)]) / s,
                (r[(0, 1)] + r[(1, 0)]) / s,
                0.25 * s,
                (r[(1, 2)] + r[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
            Self::new(
                (r[(1, 0)] - r[(0, 1)]) / s,
                (r[(0, 2)] + r[(2, 0)]) / s,
                (r[(1, 2)] + r[(2, 1)]) / s,
                0.25 * s,
            )
        };
        let n = q.norm();
        q.scale(1.0 / n)
    }

    /// Flips the sign if needed so that `w >= 0`.
    pub fn canonical(&self) -> Self {
        if self.w < 0.0 {
            self.scale(-1.0)
        } else {
            *self
        }
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;

    fn mul(self, b: Quaternion) -> Quaternion {
        let a = self;
        Quaternion::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }
}

/// Rotation matrix of `q / |q|`.
pub fn quat_to_rotation(q: &Quaternion) -> Result<Matrix3<f64>> {
    let Quaternion { w, x, y, z } = q.normalized()?;
    Ok(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// Pose as `real + eps * dual`: `real` is the rotation quaternion, `dual`
/// is `0.5 * (0, t) * real`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualQuaternion {
    pub real: Quaternion,
    pub dual: Quaternion,
}

impl DualQuaternion {
    pub const IDENTITY: DualQuaternion = DualQuaternion {
        real: Quaternion::IDENTITY,
        dual: Quaternion::ZERO,
    };

    pub fn new(real: Quaternion, dual: Quaternion) -> Self {
        Self { real, dual }
    }

    /// `[w, x, y, z]` of the real part followed by the dual part.
    pub fn to_array(&self) -> [f64; 8] {
        let r = self.real.to_array();
        let d = self.dual.to_array();
        [r[0], r[1], r[2], r[3], d[0], d[1], d[2], d[3]]
    }

    pub fn from_array(a: [f64; 8]) -> Self {
        Self::new(
            Quaternion::new(a[0], a[1], a[2], a[3]),
            Quaternion::new(a[4], a[5], a[6], a[7]),
        )
    }

    /// Both unit real part and `real . dual = 0`.
    pub fn is_valid_pose(&self) -> bool {
        (self.real.norm() - 1.0).abs() < tolerance::ALGEBRA
            && self.real.dot(&self.dual).abs() < tolerance::ALGEBRA
    }
}

pub fn dualquat_from_transform(t: &RigidTransform) -> DualQuaternion {
    let real = Quaternion::from_rotation(&t.rotation).canonical();
    let dual = (Quaternion::pure(&t.translation) * real).scale(0.5);
    DualQuaternion { real, dual }
}

/// Normalizes the real part, then reads `t = 2 * dual * conj(real)`.
/// Non-orthogonal dual parts are tolerated: the scalar part of the product
/// is dropped.
pub fn dualquat_to_transform(d: &DualQuaternion) -> Result<RigidTransform> {
    let n = d.real.norm();
    if !(n > tolerance::ZERO_NORM) {
        return Err(Error::Degenerate(format!("dual quaternion real part has norm {n:e}")));
    }
    let real = d.real.scale(1.0 / n);
    let t = (d.dual * real.conjugate()).scale(2.0);
    Ok(RigidTransform {
        rotation: quat_to_rotation(&real)?,
        translation: t.vector(),
    })
}

/// Element of SE(3): `x -> rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let q = Quaternion::from_axis_angle(axis, angle);
        Self::new(quat_to_rotation(&q).expect("unit quaternion"), translation)
    }

    /// Rotation about z by `angle` radians.
    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::z(), angle, Vector3::zeros())
    }

    /// Intrinsic Z-Y-X Euler angles (radians): `Rz(yaw) * Ry(pitch) * Rx(roll)`.
    pub fn from_euler_zyx(roll: f64, pitch: f64, yaw: f64, translation: Vector3<f64>) -> Self {
        let rz = Self::from_axis_angle(&Vector3::z(), yaw, Vector3::zeros()).rotation;
        let ry = Self::from_axis_angle(&Vector3::y(), pitch, Vector3::zeros()).rotation;
        let rx = Self::from_axis_angle(&Vector3::x(), roll, Vector3::zeros()).rotation;
        Self::new(rz * ry * rx, translation)
    }

    /// Inverse of [`RigidTransform::from_euler_zyx`]: `(roll, pitch, yaw)` in radians.
    pub fn euler_zyx(&self) -> [f64; 3] {
        let r = &self.rotation;
        let pitch = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
        let yaw = r[(1, 0)].atan2(r[(0, 0)]);
        let roll = r[(2, 1)].atan2(r[(2, 2)]);
        [roll, pitch, yaw]
    }

    /// Row-major `[R | t]`.
    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    pub fn from_row_major_3x4(v: &[f64; 12]) -> Self {
        Self::new(
            Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]),
            Vector3::new(v[3], v[7], v[11]),
        )
    }

    /// `R^T R = I` and `det R = +1` within [`tolerance::ALGEBRA`].
    pub fn is_valid(&self) -> bool {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        ortho < tolerance::ALGEBRA
            && (r.determinant() - 1.0).abs() < tolerance::ALGEBRA
            && self.translation.iter().all(|v| v.is_finite())
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform::new(rt, -(rt * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Moves the coordinates; feature channels are copied unchanged.
    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        cloud.with_points(cloud.points().iter().map(|p| self.transform_point(p)).collect())
    }

    /// Like [`RigidTransform::apply`], but also rotates normal features.
    pub fn apply_rotating_normals(&self, cloud: &PointCloud) -> PointCloud {
        let moved = self.apply(cloud);
        if cloud.feature_kind() != FeatureKind::Normals {
            return moved;
        }
        let features = cloud
            .features()
            .chunks_exact(3)
            .flat_map(|n| {
                let r = self.rotation * Vector3::new(n[0], n[1], n[2]);
                [r.x, r.y, r.z]
            })
            .collect();
        moved.with_feature_buffer(features)
    }

    /// Rotation angle of `self` in radians, in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        c.acos()
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

pub fn inverse(a: &RigidTransform) -> RigidTransform {
    a.inverse()
}

pub fn apply(a: &RigidTransform, cloud: &PointCloud) -> PointCloud {
    a.apply(cloud)
}

/// Euclidean distance between the translations (meters or units).
pub fn translation_error(pred: &RigidTransform, gt: &RigidTransform) -> f64 {
    (pred.translation - gt.translation).norm()
}

/// Chordal rotation distance `2 asin(|R_pred - R_gt|_F / sqrt 8)`, in degrees.
pub fn rotation_error_chordal(pred: &RigidTransform, gt: &RigidTransform) -> f64 {
    chordal_degrees(&pred.rotation, &gt.rotation)
}

pub(crate) fn chordal_degrees(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let arg = ((a - b).norm() / 8f64.sqrt()).clamp(0.0, 1.0);
    (2.0 * arg.asin()).to_degrees()
}

/// Wraps an angle in degrees into `(-180, 180]`.
pub fn wrap_degrees(a: f64) -> f64 {
    let mut w = a % 360.0;
    if w <= -180.0 {
        w += 360.0;
    } else if w > 180.0 {
        w -= 360.0;
    }
    w
}

/// Root mean square of translation residual components (same unit as the
/// inputs) and of intrinsic Z-Y-X Euler angle residuals (degrees).
pub fn euler_rmse(preds: &[RigidTransform], gts: &[RigidTransform]) -> Result<(f64, f64)> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} ground-truth poses",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut t_sq = 0.0;
    let mut r_sq = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        t_sq += (p.translation - g.translation).norm_squared();
        let (ep, eg) = (p.euler_zyx(), g.euler_zyx());
        for k in 0..3 {
            r_sq += wrap_degrees(ep[k].to_degrees() - eg[k].to_degrees()).powi(2);
        }
    }
    let m = 3.0 * preds.len() as f64;
    Ok(((t_sq / m).sqrt(), (r_sq / m).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_1_SQRT_2, PI};

    fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let angle = rng.random_range(0.0..PI);
        let t = Vector3::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        );
        RigidTransform::from_axis_angle(&axis, angle, t)
    }

    fn max_diff(a: &RigidTransform, b: &RigidTransform) -> f64 {
        (a.rotation - b.rotation)
            .abs()
            .max()
            .max((a.translation - b.translation).abs().max())
    }

    /// Rodrigues' formula, written independently of the quaternion path.
    fn axis_angle_matrix(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
        let k = axis.normalize();
        let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
        Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
    }

    #[test]
    fn quaternion_to_rotation_cases() {
        let r = quat_to_rotation(&Quaternion::IDENTITY).unwrap();
        assert_eq!(r, Matrix3::identity());

        let r = quat_to_rotation(&Quaternion::new(FRAC_1_SQRT_2, 0.0, 0.0, FRAC_1_SQRT_2)).unwrap();
        let oracle = axis_angle_matrix(Vector3::z(), PI / 2.0);
        assert!((r - oracle).abs().max() < 1e-12);
        let mapped = r * Vector3::x();
        assert!((mapped - Vector3::y()).norm() < 1e-12);

        let r = quat_to_rotation(&Quaternion::new(2.0, 0.0, 0.0, 0.0)).unwrap();
        assert!((r - Matrix3::identity()).abs().max() < 1e-15);

        assert!(matches!(
            quat_to_rotation(&Quaternion::ZERO),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn dualquat_closed_form_cases() {
        let d = dualquat_from_transform(&RigidTransform::identity());
        assert_eq!(d, DualQuaternion::IDENTITY);

        // 0.5 * (0,2,0,0) * (1,0,0,0) = (0,1,0,0)
        let d = dualquat_from_transform(&RigidTransform::from_translation(Vector3::new(2.0, 0.0, 0.0)));
        assert_eq!(d.real, Quaternion::IDENTITY);
        assert_eq!(d.dual, Quaternion::new(0.0, 1.0, 0.0, 0.0));

        let d = dualquat_from_transform(&RigidTransform::new(
            axis_angle_matrix(Vector3::z(), PI / 2.0),
            Vector3::zeros(),
        ));
        let expected = [FRAC_1_SQRT_2, 0.0, 0.0, FRAC_1_SQRT_2];
        for (a, b) in d.real.to_array().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(d.dual.norm() < 1e-15);
    }

    #[test]
    fn dualquat_to_transform_cases() {
        let t = dualquat_to_transform(&DualQuaternion::IDENTITY).unwrap();
        assert_eq!(t, RigidTransform::identity());

        let t = dualquat_to_transform(&DualQuaternion::new(
            Quaternion::IDENTITY,
            Quaternion::new(0.0, 1.0, 0.0, 0.0),
        ))
        .unwrap();
        assert_eq!(t.translation, Vector3::new(2.0, 0.0, 0.0));
        assert_eq!(t.rotation, Matrix3::identity());

        let bad = DualQuaternion::new(Quaternion::ZERO, Quaternion::IDENTITY);
        assert!(matches!(dualquat_to_transform(&bad), Err(Error::Degenerate(_))));
    }

    #[test]
    fn dualquat_round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let t = random_transform(&mut rng);
            let d = dualquat_from_transform(&t);
            assert!(d.is_valid_pose());
            assert!(d.real.w >= 0.0);
            let back = dualquat_to_transform(&d).unwrap();
            assert!(max_diff(&t, &back) < 1e-9);
        }
    }

    #[test]
    fn compose_inverse_apply() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_transform(&mut rng);
        let b = random_transform(&mut rng);
        assert_eq!(a.compose(&RigidTransform::identity()), a);
        assert!(max_diff(&a.compose(&a.inverse()), &RigidTransform::identity()) < 1e-9);

        let rz = |deg: f64| RigidTransform::rot_z(deg.to_radians());
        let oracle = axis_angle_matrix(Vector3::z(), 30f64.to_radians())
            * axis_angle_matrix(Vector3::z(), 60f64.to_radians());
        let c = rz(30.0).compose(&rz(60.0));
        assert!((c.rotation - oracle).abs().max() < 1e-12);
        assert!(max_diff(&c, &rz(90.0)) < 1e-12);

        let cloud = PointCloud::with_features(
            vec![Vector3::zeros(), Vector3::new(1.0, 2.0, 3.0)],
            vec![0.5, -0.5],
            1,
            FeatureKind::Intensity,
        )
        .unwrap();
        let moved = RigidTransform::from_translation(Vector3::x()).apply(&cloud);
        assert_eq!(moved.points()[0], Vector3::x());
        assert_eq!(moved.features(), cloud.features());

        let lhs = a.compose(&b).apply(&cloud);
        let rhs = a.apply(&b.apply(&cloud));
        for (p, q) in lhs.points().iter().zip(rhs.points()) {
            assert!((p - q).norm() < 1e-9);
        }
    }

    #[test]
    fn translation_error_cases() {
        let id = RigidTransform::identity();
        assert_eq!(translation_error(&id, &id), 0.0);
        let p = RigidTransform::from_translation(Vector3::new(1.0, 2.0, 2.0));
        assert_eq!(translation_error(&p, &id), 3.0);
        assert_eq!(translation_error(&id, &p), 3.0);
    }

    #[test]
    fn chordal_error_cases() {
        let id = RigidTransform::identity();
        assert_eq!(rotation_error_chordal(&id, &id), 0.0);
        let r10 = RigidTransform::rot_z(10f64.to_radians());
        assert!((rotation_error_chordal(&r10, &id) - 10.0).abs() < 1e-9);
        let r180 = RigidTransform::rot_z(PI);
        assert!((rotation_error_chordal(&r180, &id) - 180.0).abs() < 1e-9);
    }

    #[test]
    fn euler_round_trip_and_rmse() {
        let t = RigidTransform::from_euler_zyx(0.1, -0.2, 0.3, Vector3::zeros());
        let [r, p, y] = t.euler_zyx();
        assert!((r - 0.1).abs() < 1e-12 && (p + 0.2).abs() < 1e-12 && (y - 0.3).abs() < 1e-12);

        let id = RigidTransform::identity();
        assert_eq!(euler_rmse(&[id, id], &[id, id]).unwrap(), (0.0, 0.0));

        let shifted = RigidTransform::from_translation(Vector3::new(1.0, 1.0, 1.0));
        let (t_rmse, r_rmse) = euler_rmse(&[shifted], &[id]).unwrap();
        assert!((t_rmse - 1.0).abs() < 1e-15);
        assert_eq!(r_rmse, 0.0);

        // residual components: (0,0,0) and (0,0,2) degrees -> sqrt(4 / 6)
        let yaw2 = RigidTransform::rot_z(2f64.to_radians());
        let (_, r_rmse) = euler_rmse(&[id, yaw2], &[id, id]).unwrap();
        assert!((r_rmse - (4.0f64 / 6.0).sqrt()).abs() < 1e-12);

        assert!(matches!(euler_rmse(&[], &[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn wrap_range() {
        assert_eq!(wrap_degrees(180.0), 180.0);
        assert_eq!(wrap_degrees(-180.0), 180.0);
        assert_eq!(wrap_degrees(359.0), -1.0);
        assert_eq!(wrap_degrees(-190.0), 170.0);
    }
}
