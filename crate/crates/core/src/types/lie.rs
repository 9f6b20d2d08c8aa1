//! Lie-group primitives: SE(3) poses, planar SE(2)/Sim(2) transforms and
//! their tangent-space twists.
//!
//! Twists are *rates*: `exp(twist, dt)` integrates a constant-speed motion
//! over `dt` seconds, and `log` returns the tangent vector of a finite
//! transform (divide by the elapsed time to get a rate again).

use nalgebra::{Matrix3, Matrix4, UnitComplex, UnitQuaternion, Vector2, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Below this tangent magnitude the closed forms switch to series expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Rotations closer than this to pi have an ambiguous logarithm.
const PI_MARGIN: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LieError {
    #[error("rotation angle {angle} is at or beyond pi; logarithm is degenerate")]
    DegenerateAngle { angle: f64 },
    #[error("transform has scale {scale} but the group is SE(2)")]
    NotRigid { scale: f64 },
    #[error("non-finite group element")]
    NonFinite,
}

#[inline]
pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Rigid body transform in 3D. Maps points from the source frame into the
/// target frame: `p_target = rotation * p_source + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    pub fn from_rotation(rotation: UnitQuaternion<f64>) -> Self {
        Self::new(rotation, Vector3::zeros())
    }

    /// `self * other`: apply `other` first, then `self`.
    ///
    /// The quaternion is renormalized only once its norm has drifted, which
    /// keeps long composition chains on the manifold without paying a
    /// normalization on every product.
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut q = self.rotation.into_inner() * other.rotation.into_inner();
        if (q.norm_squared() - 1.0).abs() > 1e-12 {
            q = q.normalize();
        }
        Pose {
            rotation: UnitQuaternion::new_unchecked(q),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let r_inv = self.rotation.inverse();
        Pose {
            rotation: r_inv,
            translation: -(r_inv * self.translation),
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Rotation angle in radians, in [0, pi].
    pub fn rotation_angle(&self) -> f64 {
        quaternion_angle_axis(&self.rotation).0
    }

    /// `Exp(twist * dt)`.
    pub fn exp(twist: &SpatialTwist, dt: f64) -> Pose {
        let v = twist.v * dt;
        let w = twist.omega * dt;
        let theta = w.norm();
        let wx = hat(&w);
        let wx2 = wx * wx;
        let (rotation, jac) = if theta < SMALL_ANGLE {
            let q = UnitQuaternion::new_normalize(nalgebra::Quaternion::new(
                1.0,
                0.5 * w.x,
                0.5 * w.y,
                0.5 * w.z,
            ));
            (q, Matrix3::identity() + 0.5 * wx + wx2 / 6.0)
        } else {
            let t2 = theta * theta;
            let a = (1.0 - theta.cos()) / t2;
            let b = (theta - theta.sin()) / (t2 * theta);
            (
                UnitQuaternion::from_scaled_axis(w),
                Matrix3::identity() + a * wx + b * wx2,
            )
        };
        Pose {
            rotation,
            translation: jac * v,
        }
    }

    /// Tangent vector of this transform (not a rate).
    pub fn log(&self) -> Result<SpatialTwist, LieError> {
        if !self.translation.iter().all(|c| c.is_finite())
            || !self.rotation.coords.iter().all(|c| c.is_finite())
        {
            return Err(LieError::NonFinite);
        }
        let (theta, axis) = quaternion_angle_axis(&self.rotation);
        if theta > std::f64::consts::PI - PI_MARGIN {
            return Err(LieError::DegenerateAngle { angle: theta });
        }
        let w = axis * theta;
        let wx = hat(&w);
        let wx2 = wx * wx;
        let v_inv = if theta < SMALL_ANGLE {
            Matrix3::identity() - 0.5 * wx + wx2 / 12.0
        } else {
            let half = 0.5 * theta;
            let c = (1.0 - half * half.cos() / half.sin()) / (theta * theta);
            Matrix3::identity() - 0.5 * wx + c * wx2
        };
        Ok(SpatialTwist {
            v: v_inv * self.translation,
            omega: w,
        })
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl std::ops::Mul<&Pose> for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

/// Angle in [0, pi] and unit axis, accurate for small angles.
fn quaternion_angle_axis(q: &UnitQuaternion<f64>) -> (f64, Vector3<f64>) {
    let mut w = q.w;
    let mut v = q.imag();
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let s = v.norm();
    if s < 1e-300 {
        return (0.0, Vector3::x());
    }
    let theta = 2.0 * s.atan2(w);
    (theta, v / s)
}

/// Tangent vector of SE(3): translational rate `v` and angular rate `omega`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialTwist {
    pub v: Vector3<f64>,
    pub omega: Vector3<f64>,
}

impl SpatialTwist {
    pub fn zero() -> Self {
        Self {
            v: Vector3::zeros(),
            omega: Vector3::zeros(),
        }
    }

    pub fn new(v: Vector3<f64>, omega: Vector3<f64>) -> Self {
        Self { v, omega }
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            v: self.v * k,
            omega: self.omega * k,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.v.iter().chain(self.omega.iter()).all(|c| c.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanarGroup {
    Se2,
    Sim2,
}

/// Planar similarity `x' = s R x + t`. SE(2) elements have `scale == 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Similarity2 {
    pub scale: f64,
    pub rotation: UnitComplex<f64>,
    pub translation: Vector2<f64>,
}

impl Default for Similarity2 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Similarity2 {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: UnitComplex::identity(),
            translation: Vector2::zeros(),
        }
    }

    pub fn new(scale: f64, angle: f64, translation: Vector2<f64>) -> Self {
        Self {
            scale,
            rotation: UnitComplex::new(angle),
            translation,
        }
    }

    pub fn angle(&self) -> f64 {
        self.rotation.angle()
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector2<f64>) -> Vector2<f64> {
        self.scale * (self.rotation * p) + self.translation
    }

    pub fn compose(&self, other: &Similarity2) -> Similarity2 {
        Similarity2 {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.scale * (self.rotation * other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Similarity2 {
        let r_inv = self.rotation.inverse();
        let s_inv = 1.0 / self.scale;
        Similarity2 {
            scale: s_inv,
            rotation: r_inv,
            translation: -(s_inv * (r_inv * self.translation)),
        }
    }

    /// `Exp(twist * dt)`. For SE(2) twists the log-scale rate is ignored.
    pub fn exp(twist: &PlanarTwist, dt: f64) -> Similarity2 {
        let lambda = match twist.group {
            PlanarGroup::Se2 => 0.0,
            PlanarGroup::Sim2 => twist.log_scale * dt,
        };
        // The rotation-scale block is the complex number e^z with
        // z = lambda + i*omega, and the left Jacobian acting on the
        // translation rate is (e^z - 1) / z.
        let z = Complex64::new(lambda, twist.omega * dt);
        let ez = z.exp();
        let jac = if z.norm() < SMALL_ANGLE {
            Complex64::new(1.0, 0.0) + z / 2.0 + z * z / 6.0
        } else {
            (ez - 1.0) / z
        };
        let v = Complex64::new(twist.v.x * dt, twist.v.y * dt);
        let t = jac * v;
        Similarity2 {
            scale: ez.norm(),
            rotation: UnitComplex::new(z.im),
            translation: Vector2::new(t.re, t.im),
        }
    }

    /// Tangent vector of this transform in the given group (not a rate).
    pub fn log(&self, group: PlanarGroup) -> Result<PlanarTwist, LieError> {
        if !(self.scale.is_finite() && self.scale > 0.0)
            || !self.translation.iter().all(|c| c.is_finite())
        {
            return Err(LieError::NonFinite);
        }
        let lambda = self.scale.ln();
        if group == PlanarGroup::Se2 && lambda.abs() > 1e-9 {
            return Err(LieError::NotRigid { scale: self.scale });
        }
        let theta = self.rotation.angle();
        let lambda = if group == PlanarGroup::Se2 { 0.0 } else { lambda };
        let z = Complex64::new(lambda, theta);
        let jac = if z.norm() < SMALL_ANGLE {
            Complex64::new(1.0, 0.0) + z / 2.0 + z * z / 6.0
        } else {
            (z.exp() - 1.0) / z
        };
        let v = Complex64::new(self.translation.x, self.translation.y) / jac;
        Ok(PlanarTwist {
            group,
            v: Vector2::new(v.re, v.im),
            omega: theta,
            log_scale: lambda,
        })
    }
}

/// Tangent vector of SE(2) or Sim(2): `(v_x, v_y, omega)` plus a log-scale
/// rate for Sim(2).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanarTwist {
    pub group: PlanarGroup,
    pub v: Vector2<f64>,
    pub omega: f64,
    pub log_scale: f64,
}

impl PlanarTwist {
    pub fn zero(group: PlanarGroup) -> Self {
        Self {
            group,
            v: Vector2::zeros(),
            omega: 0.0,
            log_scale: 0.0,
        }
    }

    pub fn se2(vx: f64, vy: f64, omega: f64) -> Self {
        Self {
            group: PlanarGroup::Se2,
            v: Vector2::new(vx, vy),
            omega,
            log_scale: 0.0,
        }
    }

    pub fn sim2(vx: f64, vy: f64, omega: f64, log_scale: f64) -> Self {
        Self {
            group: PlanarGroup::Sim2,
            v: Vector2::new(vx, vy),
            omega,
            log_scale,
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            group: self.group,
            v: self.v * k,
            omega: self.omega * k,
            log_scale: self.log_scale * k,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.v.x.is_finite()
            && self.v.y.is_finite()
            && self.omega.is_finite()
            && self.log_scale.is_finite()
    }
}

/// A twist tagged with its group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Twist {
    Planar(PlanarTwist),
    Spatial(SpatialTwist),
}

/// An element of one of the supported groups.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum GroupElement {
    Planar(PlanarGroup, Similarity2),
    Spatial(Pose),
}

/// `Exp(twist * dt)` in the twist's group.
pub fn lie_exp(twist: &Twist, dt: f64) -> GroupElement {
    match twist {
        Twist::Planar(p) => GroupElement::Planar(p.group, Similarity2::exp(p, dt)),
        Twist::Spatial(s) => GroupElement::Spatial(Pose::exp(s, dt)),
    }
}

/// Tangent vector of a group element. Divide by the elapsed time to obtain a
/// rate.
pub fn lie_log(element: &GroupElement) -> Result<Twist, LieError> {
    match element {
        GroupElement::Planar(group, sim) => sim.log(*group).map(Twist::Planar),
        GroupElement::Spatial(pose) => pose.log().map(Twist::Spatial),
    }
}
