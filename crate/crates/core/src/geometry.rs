//! Rotations, rigid motions and scaled rigid motions.
//!
//! Rotations are stored as plain 3×3 matrices. A [`Pose`] `g = (R, T)` acts on
//! points as `X ↦ R X + T`, and composition matches the product of the
//! corresponding 4×4 homogeneous matrices.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rotation angles at or beyond `π − LOG_MARGIN` have no unique logarithm.
pub const LOG_MARGIN: f64 = 1e-6;

/// Orthogonality defect above which a rotation is projected back onto SO(3).
pub const REORTHONORMALIZE_TOL: f64 = 1e-9;

const SMALL_ANGLE: f64 = 1e-5;

/// Cross-product matrix: `hat(v) * x == v.cross(&x)`.
#[inline]
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    #[rustfmt::skip]
    let m = Matrix3::new(
        0.0, -v.z, v.y,
        v.z, 0.0, -v.x,
        -v.y, v.x, 0.0,
    );
    m
}

/// Inverse of [`hat`]. Only the skew-symmetric part of `m` is used.
#[inline]
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    0.5 * Vector3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    )
}

/// Largest singular value.
pub fn spectral_norm(m: &Matrix3<f64>) -> f64 {
    // Eigenvalues of the Gram matrix are cheaper and accurate enough here.
    let gram = m.transpose() * m;
    let ev = gram.symmetric_eigenvalues();
    ev.max().max(0.0).sqrt()
}

/// Smallest singular value.
pub fn min_singular_value(m: &Matrix3<f64>) -> f64 {
    m.singular_values().min()
}

/// Nearest rotation matrix in the Frobenius sense (polar projection).
pub fn project_to_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

/// Element of SO(3).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Rotation(Matrix3<f64>);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wraps a matrix that is already orthonormal; no checks are performed.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    /// Wraps `m`, projecting it onto SO(3) when its orthogonality defect
    /// exceeds [`REORTHONORMALIZE_TOL`].
    pub fn from_matrix(m: Matrix3<f64>) -> Self {
        let mut r = Rotation(m);
        r.renormalize();
        r
    }

    /// Rotation by angle `‖v‖` about `v`.
    pub fn exp(v: &Vector3<f64>) -> Self {
        let theta2 = v.norm_squared();
        let theta = theta2.sqrt();
        let k = hat(v);
        let (a, b) = if theta < SMALL_ANGLE {
            (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
        } else {
            (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
        };
        Rotation(Matrix3::identity() + a * k + b * k * k)
    }

    /// Rotation by `angle` about the unit `axis`.
    pub fn about_axis(axis: &Vector3<f64>, angle: f64) -> Self {
        Self::exp(&(axis.normalize() * angle))
    }

    /// Logarithm, defined for rotation angles below `π − LOG_MARGIN`.
    pub fn log(&self) -> Result<Vector3<f64>> {
        let r = &self.0;
        let w = vee(r);
        let s = w.norm();
        let c = 0.5 * (r.trace() - 1.0);
        let theta = s.atan2(c);
        if theta >= std::f64::consts::PI - LOG_MARGIN {
            return Err(Error::AmbiguousLogarithm(theta));
        }
        if theta < SMALL_ANGLE {
            Ok(w * (1.0 + theta * theta / 6.0))
        } else {
            Ok(w * (theta / s))
        }
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        let s = vee(&self.0).norm();
        let c = 0.5 * (self.0.trace() - 1.0);
        s.atan2(c)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn orthogonality_defect(&self) -> f64 {
        spectral_norm(&(self.0 * self.0.transpose() - Matrix3::identity()))
    }

    /// Applies the polar projection when the defect exceeds the policy tolerance.
    pub fn renormalize(&mut self) {
        if self.orthogonality_defect() > REORTHONORMALIZE_TOL {
            self.0 = project_to_rotation(&self.0);
        }
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl std::ops::Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

/// Rigid motion `g = (R, T)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose::new(Rotation::identity(), t)
    }

    pub fn from_rotation(r: Rotation) -> Self {
        Pose::new(r, Vector3::zeros())
    }

    pub fn r(&self) -> &Matrix3<f64> {
        self.rotation.matrix()
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.r() * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.inverse();
        Pose {
            rotation: rt,
            translation: -(rt.matrix() * self.translation),
        }
    }

    pub fn act(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.r() * x + self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut h = Matrix4::identity();
        h.fixed_view_mut::<3, 3>(0, 0).copy_from(self.r());
        h.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        h
    }

    pub fn from_homogeneous(h: &Matrix4<f64>) -> Pose {
        Pose {
            rotation: Rotation::from_matrix(h.fixed_view::<3, 3>(0, 0).into_owned()),
            translation: h.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    /// Translation distance plus rotation angle to `other`, for approximate comparisons.
    pub fn distance(&self, other: &Pose) -> (f64, f64) {
        let dr = self.rotation.inverse() * other.rotation;
        ((self.translation - other.translation).norm(), dr.angle())
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

/// Generalized velocity `V = (ω, v)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist {
    pub angular: Vector3<f64>,
    pub linear: Vector3<f64>,
}

/// A rigid motion together with a positive scale; it maps to the pose
/// `(R, σ T)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaledPose {
    pub pose: Pose,
    pub scale: f64,
}

impl ScaledPose {
    pub fn new(pose: Pose, scale: f64) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::NonPositiveScale(scale));
        }
        Ok(ScaledPose { pose, scale })
    }

    pub fn to_pose(&self) -> Pose {
        Pose::new(self.pose.rotation, self.scale * self.pose.translation)
    }
}

pub fn exp_rot(v: &Vector3<f64>) -> Rotation {
    Rotation::exp(v)
}

pub fn log_rot(r: &Rotation) -> Result<Vector3<f64>> {
    r.log()
}

pub fn compose(g1: &Pose, g2: &Pose) -> Pose {
    g1.compose(g2)
}

pub fn invert(g: &Pose) -> Pose {
    g.inverse()
}

pub fn act(g: &Pose, x: &Vector3<f64>) -> Vector3<f64> {
    g.act(x)
}

/// `σ(g) = (R, σ T)`. Rejects `σ ≤ 0`.
pub fn scale_pose(g: &Pose, sigma: f64) -> Result<Pose> {
    Ok(ScaledPose::new(*g, sigma)?.to_pose())
}

/// Uniformly distributed random rotation.
pub fn random_rotation<R: rand::Rng + ?Sized>(rng: &mut R) -> Rotation {
    // Shoemake's method via a uniform unit quaternion.
    let u1: f64 = rng.gen();
    let u2: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
    let u3: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let q = nalgebra::Quaternion::new(a * u2.sin(), a * u2.cos(), b * u3.sin(), b * u3.cos());
    let uq = nalgebra::UnitQuaternion::from_quaternion(q);
    Rotation(*uq.to_rotation_matrix().matrix())
}
