//! Rigid-body transforms on SO(3) and SE(3), plus the covariance algebra built
//! on top of them.
//!
//! Conventions used everywhere in this crate:
//!
//! * Tangent vectors ([`Twist`]) are ordered `[rotation | translation]`.
//! * Perturbations act on the right: a noisy pose is `T · exp(ε)`, so `ε` is
//!   expressed in the body frame of `T`.
//! * A [`TangentCovariance`] is the covariance of that `ε`.
//!
//! Under these conventions the adjoint of `T = (R, t)` is
//!
//! ```text
//! Ad_T = | R     0 |
//!        | [t]×R R |
//! ```
//!
//! and `T · exp(ε) = exp(Ad_T ε) · T`.

use std::f64::consts::PI;
use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Matrix6, Quaternion, Rotation3, SymmetricEigen, UnitQuaternion, Vector3, Vector6};

/// Angles closer than this to π make the logarithm ambiguous.
pub const LOG_PI_GUARD: f64 = 1e-6;

const SMALL_ANGLE: f64 = 1e-6;
const SERIES_ANGLE: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Se3Error {
    #[error("rotation angle {angle} is within {LOG_PI_GUARD:e} of pi; the logarithm branch is ambiguous")]
    NearPi { angle: f64 },
    #[error("matrix is not a proper rotation (orthonormality error {ortho:e}, det {det})")]
    NotRotation { ortho: f64, det: f64 },
    #[error("quaternion norm {0} deviates from 1 by more than 1e-6")]
    QuaternionNorm(f64),
    #[error("covariance is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),
    #[error("covariance is not positive semi-definite (min eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("covariance is singular (min eigenvalue {0:e})")]
    Singular(f64),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
}

/// Skew-symmetric matrix `[v]×` such that `[v]× w = v × w`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`]; reads the skew part of `m`.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5
}

// ---------------------------------------------------------------------------
// SO(3)
// ---------------------------------------------------------------------------

/// Element of SO(3), stored as an orthonormal 3×3 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Validates orthonormality and `det = +1` to 1e-9.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, Se3Error> {
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Se3Error::NonFinite("rotation"));
        }
        let ortho = (m.transpose() * m - Matrix3::identity()).amax();
        let det = m.determinant();
        if ortho > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(Se3Error::NotRotation { ortho, det });
        }
        Ok(Self(m))
    }

    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        Self::exp(&(axis.normalize() * angle))
    }

    /// Builds a rotation from quaternion components; the quaternion must have
    /// unit norm within 1e-6 and is renormalized.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Result<Self, Se3Error> {
        let norm = (w * w + x * x + y * y + z * z).sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
            return Err(Se3Error::QuaternionNorm(norm));
        }
        let q = UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z));
        Ok(Self(q.to_rotation_matrix().into_inner()))
    }

    /// Unit quaternion with non-negative scalar part.
    pub fn to_quaternion(&self) -> UnitQuaternion<f64> {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.0));
        if q.w < 0.0 {
            UnitQuaternion::new_unchecked(-q.into_inner())
        } else {
            q
        }
    }

    pub fn yaw(angle: f64) -> Self {
        Self::exp(&Vector3::new(0.0, 0.0, angle))
    }

    /// Rodrigues formula.
    pub fn exp(omega: &Vector3<f64>) -> Self {
        let theta2 = omega.norm_squared();
        let theta = theta2.sqrt();
        let w = hat(omega);
        let (a, b) = if theta < SMALL_ANGLE {
            (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
        } else {
            (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
        };
        Self(Matrix3::identity() + w * a + w * w * b)
    }

    /// Principal-branch logarithm. Fails when the angle is within
    /// [`LOG_PI_GUARD`] of π.
    pub fn log(&self) -> Result<Vector3<f64>, Se3Error> {
        let r = &self.0;
        let w = vee(r);
        let sin = w.norm();
        let cos = 0.5 * (r.trace() - 1.0);
        let theta = sin.atan2(cos);
        if PI - theta < LOG_PI_GUARD {
            return Err(Se3Error::NearPi { angle: theta });
        }
        if theta < SMALL_ANGLE {
            return Ok(w * (1.0 + theta * theta / 6.0));
        }
        if theta < PI - 1e-3 {
            return Ok(w * (theta / sin));
        }
        // Near π the skew part vanishes; recover the axis from the symmetric part.
        let s = (r + r.transpose() - Matrix3::identity() * (2.0 * cos)) / (2.0 * (1.0 - cos));
        let k = (0..3).max_by(|&i, &j| s[(i, i)].total_cmp(&s[(j, j)])).unwrap_or(0);
        let mut axis: Vector3<f64> = s.column(k).into_owned() / s[(k, k)].sqrt();
        axis.normalize_mut();
        if axis.dot(&w) < 0.0 {
            axis = -axis;
        }
        Ok(axis * theta)
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        vee(&self.0).norm().atan2(0.5 * (self.0.trace() - 1.0))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Self(self.0.transpose())
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

/// Left Jacobian of SO(3) (also the `V` matrix of the SE(3) exponential).
fn so3_left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let w = hat(omega);
    let (b, c) = if theta < SERIES_ANGLE {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        ((1.0 - theta.cos()) / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    Matrix3::identity() + w * b + w * w * c
}

fn so3_left_jacobian_inv(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let w = hat(omega);
    let d = if theta < SERIES_ANGLE {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / theta2;
        (1.0 - a / (2.0 * b)) / theta2
    };
    Matrix3::identity() - w * 0.5 + w * w * d
}

/// Coupling block of the SE(3) left Jacobian.
fn se3_q_block(omega: &Vector3<f64>, v: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let p = hat(omega);
    let r = hat(v);
    let (c1, c2, c3) = if theta < SERIES_ANGLE {
        (1.0 / 6.0 - theta2 / 120.0, 1.0 / 24.0 - theta2 / 720.0, 1.0 / 120.0 - theta2 / 2520.0)
    } else {
        let (s, c) = theta.sin_cos();
        let t3 = theta2 * theta;
        let t4 = theta2 * theta2;
        let t5 = t4 * theta;
        (
            (theta - s) / t3,
            (theta2 / 2.0 + c - 1.0) / t4,
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t5),
        )
    };
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    r * 0.5 + (pr + rp + prp) * c1 + (p * pr + rp * p - prp * 3.0) * c2 + (prp * p + p * prp) * c3
}

// ---------------------------------------------------------------------------
// se(3) tangent vectors
// ---------------------------------------------------------------------------

/// Element of se(3) as a 6-vector `[rotation (rad) | translation (m)]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn zero() -> Self {
        Self(Vector6::zeros())
    }

    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self(Vector6::new(rotation.x, rotation.y, rotation.z, translation.x, translation.y, translation.z))
    }

    pub fn from_slice(v: &[f64; 6]) -> Self {
        Self(Vector6::from_column_slice(v))
    }

    pub fn rotation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn vector(&self) -> &Vector6<f64> {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    /// Matrix of the Lie bracket `ad(ξ)`, so that `[ξ, η] = ad(ξ) η`.
    pub fn ad(&self) -> Matrix6<f64> {
        let mut m = Matrix6::zeros();
        let w = hat(&self.rotation());
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&w);
        m.fixed_view_mut::<3, 3>(3, 3).copy_from(&w);
        m.fixed_view_mut::<3, 3>(3, 0).copy_from(&hat(&self.translation()));
        m
    }

    /// Left Jacobian of SE(3).
    pub fn left_jacobian(&self) -> Matrix6<f64> {
        let omega = self.rotation();
        let j = so3_left_jacobian(&omega);
        let q = se3_q_block(&omega, &self.translation());
        let mut m = Matrix6::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
        m.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
        m.fixed_view_mut::<3, 3>(3, 0).copy_from(&q);
        m
    }

    pub fn left_jacobian_inv(&self) -> Matrix6<f64> {
        let omega = self.rotation();
        let ji = so3_left_jacobian_inv(&omega);
        let q = se3_q_block(&omega, &self.translation());
        let mut m = Matrix6::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&ji);
        m.fixed_view_mut::<3, 3>(3, 3).copy_from(&ji);
        m.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-ji * q * ji));
        m
    }

    /// Right Jacobian: `exp(ξ + δ) ≈ exp(ξ) · exp(J_r(ξ) δ)`.
    pub fn right_jacobian(&self) -> Matrix6<f64> {
        Twist(-self.0).left_jacobian()
    }

    /// `log(exp(ξ) · exp(δ)) ≈ ξ + J_r⁻¹(ξ) δ`.
    pub fn right_jacobian_inv(&self) -> Matrix6<f64> {
        Twist(-self.0).left_jacobian_inv()
    }
}

// ---------------------------------------------------------------------------
// SE(3)
// ---------------------------------------------------------------------------

/// Element of SE(3): body-to-world rotation plus translation in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.rotation.to_quaternion();
        write!(
            f,
            "t=[{:.4}, {:.4}, {:.4}] q=[{:.4}, {:.4}, {:.4}, {:.4}]",
            self.translation.x, self.translation.y, self.translation.z, q.w, q.i, q.j, q.k
        )
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Rotation::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self { rotation: Rotation::identity(), translation }
    }

    /// Pose from translation and quaternion `(w, x, y, z)`.
    pub fn from_translation_quaternion(t: Vector3<f64>, q: [f64; 4]) -> Result<Self, Se3Error> {
        Ok(Self { rotation: Rotation::from_quaternion(q[0], q[1], q[2], q[3])?, translation: t })
    }

    pub fn exp(xi: &Twist) -> Self {
        let omega = xi.rotation();
        Self {
            rotation: Rotation::exp(&omega),
            translation: so3_left_jacobian(&omega) * xi.translation(),
        }
    }

    pub fn log(&self) -> Result<Twist, Se3Error> {
        let omega = self.rotation.log()?;
        Ok(Twist::new(omega, so3_left_jacobian_inv(&omega) * self.translation))
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.inverse();
        Self { rotation: rt, translation: -(rt.0 * self.translation) }
    }

    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation.0 * other.translation + self.translation,
        }
    }

    /// `a⁻¹ · b`: the pose of `b` expressed in the frame of `a`.
    pub fn between(a: &Pose, b: &Pose) -> Self {
        a.inverse().compose(b)
    }

    /// Right retraction `self · exp(δ)`.
    pub fn retract(&self, delta: &Twist) -> Self {
        self.compose(&Pose::exp(delta))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.0 * p + self.translation
    }

    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation.0;
        let mut m = Matrix6::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        m.fixed_view_mut::<3, 3>(3, 0).copy_from(&(hat(&self.translation) * r));
        m
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation.0);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Translation distance and rotation angle between two poses.
    pub fn distance(a: &Pose, b: &Pose) -> (f64, f64) {
        let d = Pose::between(a, b);
        (d.translation.norm(), d.rotation.angle())
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

// ---------------------------------------------------------------------------
// Covariances
// ---------------------------------------------------------------------------

/// 6×6 covariance of a right perturbation, ordered like [`Twist`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TangentCovariance(Matrix6<f64>);

impl TangentCovariance {
    /// Validates symmetry (1e-9, relative to the largest entry when that
    /// exceeds one) and PSD-ness (eigenvalues ≥ -1e-10), then symmetrizes.
    pub fn new(m: Matrix6<f64>) -> Result<Self, Se3Error> {
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Se3Error::NonFinite("covariance"));
        }
        let scale = m.amax().max(1.0);
        let asym = (m - m.transpose()).amax();
        if asym > 1e-9 * scale {
            return Err(Se3Error::Asymmetric(asym));
        }
        let cov = Self::symmetrized(m);
        let min = cov.min_eigenvalue();
        if min < -1e-10 * scale {
            return Err(Se3Error::NotPsd(min));
        }
        Ok(cov)
    }

    /// `(m + mᵀ) / 2`, no further checks.
    pub fn symmetrized(m: Matrix6<f64>) -> Self {
        Self((m + m.transpose()) * 0.5)
    }

    pub fn zero() -> Self {
        Self(Matrix6::zeros())
    }

    pub fn isotropic(variance: f64) -> Self {
        Self(Matrix6::identity() * variance)
    }

    /// Diagonal covariance from rotation and translation variances.
    pub fn diagonal(rot_var: f64, trans_var: f64) -> Self {
        Self(Matrix6::from_diagonal(&Vector6::new(rot_var, rot_var, rot_var, trans_var, trans_var, trans_var)))
    }

    pub fn matrix(&self) -> &Matrix6<f64> {
        &self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.0).eigenvalues.min()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self(self.0 * s)
    }

    /// Inverse, requiring the smallest eigenvalue to exceed 1e-12.
    pub fn information(&self) -> Result<Matrix6<f64>, Se3Error> {
        let min = self.min_eigenvalue();
        if min <= 1e-12 {
            return Err(Se3Error::Singular(min));
        }
        let inv = self.0.cholesky().ok_or(Se3Error::Singular(min))?.inverse();
        Ok((inv + inv.transpose()) * 0.5)
    }

    /// Builds a covariance by inverting an information matrix.
    pub fn from_information(info: &Matrix6<f64>) -> Result<Self, Se3Error> {
        let info = Self::new(*info)?;
        Ok(Self(info.information()?))
    }

    /// Row-major upper triangle (21 entries).
    pub fn upper_triangle(&self) -> [f64; 21] {
        upper_triangle(&self.0)
    }

    pub fn from_upper_triangle(v: &[f64; 21]) -> Result<Self, Se3Error> {
        Self::new(from_upper_triangle(v))
    }
}

/// Row-major upper triangle, 21 entries.
pub fn upper_triangle(m: &Matrix6<f64>) -> [f64; 21] {
    let mut out = [0.0; 21];
    let mut k = 0;
    for i in 0..6 {
        for j in i..6 {
            out[k] = m[(i, j)];
            k += 1;
        }
    }
    out
}

/// Symmetric matrix from a row-major upper triangle.
pub fn from_upper_triangle(v: &[f64; 21]) -> Matrix6<f64> {
    let mut m = Matrix6::zeros();
    let mut k = 0;
    for i in 0..6 {
        for j in i..6 {
            m[(i, j)] = v[k];
            m[(j, i)] = v[k];
            k += 1;
        }
    }
    m
}

/// `Ad_T Σ Ad_Tᵀ`: moves a covariance through the adjoint of `pose`.
pub fn transform_covariance(cov: &TangentCovariance, pose: &Pose) -> TangentCovariance {
    let ad = pose.adjoint();
    TangentCovariance::symmetrized(ad * cov.0 * ad.transpose())
}

/// First-order covariance of `between(pose_i, pose_j)`, treating the two
/// poses as independent:
///
/// `Σ_ij ≈ A Σ_i Aᵀ + Σ_j` with `A = Ad_{T_j⁻¹} Ad_{T_i}`.
///
/// The result lives in the right tangent space of the relative pose.
pub fn relative_pose_covariance(
    pose_i: &Pose,
    cov_i: &TangentCovariance,
    pose_j: &Pose,
    cov_j: &TangentCovariance,
) -> TangentCovariance {
    let a = pose_j.inverse().adjoint() * pose_i.adjoint();
    TangentCovariance::symmetrized(a * cov_i.0 * a.transpose() + cov_j.0)
}
