//! Rigid-body geometry kernel: SE(3)/SO(3) composition, inversion,
//! exponential/logarithm maps and pose-error decomposition.
//!
//! Twists and 6x6 covariances are ordered (rotation, translation) throughout
//! the crate; mixing conventions silently transposes Mahalanobis blocks, so
//! the ordering is fixed here once.

use nalgebra::{Matrix3, Matrix4, Matrix6, Quaternion, UnitQuaternion, Vector3, Vector6};
use thiserror::Error;

/// Rotation angles closer to pi than this margin are rejected by [`Pose::log`].
pub const NEAR_PI_MARGIN: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum Se3Error {
    /// The rotation angle is within [`NEAR_PI_MARGIN`] of pi, where the
    /// logarithm's axis is ill-conditioned. Callers must perturb or reject.
    #[error("rotation angle {0} rad is within {NEAR_PI_MARGIN} of pi; log map undefined")]
    RotationNearPi(f64),
    /// A 6x6 covariance failed the symmetric positive-definite check.
    #[error("covariance is not symmetric positive-definite: {0}")]
    InvalidCovariance(String),
}

/// Rigid transform on SE(3): unit quaternion rotation plus translation in
/// meters. The quaternion is re-normalized after every composition so long
/// odometry chains do not drift off the manifold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        let mut p = Pose {
            rotation,
            translation,
        };
        p.renormalize();
        p
    }

    /// Builds a pose from raw quaternion components `(w, x, y, z)` and a
    /// translation. The quaternion is normalized; a zero quaternion yields
    /// the identity rotation.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64, t: Vector3<f64>) -> Self {
        let q = Quaternion::new(w, x, y, z);
        let rotation = UnitQuaternion::try_new(q, 1e-30).unwrap_or_else(UnitQuaternion::identity);
        Pose::new(rotation, t)
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose::new(UnitQuaternion::identity(), t)
    }

    /// Yaw rotation about +z followed by a translation, handy for planar
    /// trajectories.
    pub fn from_yaw_xy(yaw_rad: f64, x: f64, y: f64) -> Self {
        Pose::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw_rad),
            Vector3::new(x, y, 0.0),
        )
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// The 4x4 homogeneous matrix form.
    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Serializes as the 7-tuple `(qw, qx, qy, qz, tx, ty, tz)` used by every
    /// file format in the crate.
    pub fn to_tuple(&self) -> [f64; 7] {
        let q = self.rotation.quaternion();
        let t = self.translation;
        [q.w, q.i, q.j, q.k, t.x, t.y, t.z]
    }

    pub fn from_tuple(v: &[f64]) -> Self {
        debug_assert!(v.len() >= 7);
        Pose::from_wxyz(v[0], v[1], v[2], v[3], Vector3::new(v[4], v[5], v[6]))
    }

    fn renormalize(&mut self) {
        self.rotation = UnitQuaternion::new_normalize(*self.rotation.quaternion());
    }

    /// Group composition `self * other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.translation + self.rotation * other.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let inv_rot = self.rotation.inverse();
        Pose::new(inv_rot, -(inv_rot * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        self.rotation.angle()
    }

    /// Logarithm map onto the tangent space.
    ///
    /// Fails with [`Se3Error::RotationNearPi`] when the rotation angle is
    /// within [`NEAR_PI_MARGIN`] of pi: the axis is arbitrary there and a
    /// deterministic error beats a silently arbitrary answer.
    pub fn log(&self) -> Result<Twist, Se3Error> {
        let angle = self.rotation.angle();
        if angle >= std::f64::consts::PI - NEAR_PI_MARGIN {
            return Err(Se3Error::RotationNearPi(angle));
        }
        let omega = self.rotation.scaled_axis();
        let jl_inv = so3_left_jacobian_inv(&omega);
        Ok(Twist {
            rotation: omega,
            translation: jl_inv * self.translation,
        })
    }

    /// Right-multiplicative retraction `self * exp(delta)`, the update
    /// convention shared by the pose-graph and alignment solvers.
    pub fn retract(&self, delta: &Vector6<f64>) -> Pose {
        self.compose(&Twist::from_vector(delta).exp())
    }

    /// Adjoint matrix mapping twists between frames:
    /// `exp(adjoint(T) * xi) = T * exp(xi) * T^-1`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation_matrix();
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(skew(&self.translation) * r));
        ad
    }
}

/// Tangent-space element of SE(3): rotational part in radians, translational
/// part in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl Twist {
    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Twist {
            rotation,
            translation,
        }
    }

    pub fn zero() -> Self {
        Twist::default()
    }

    /// Stacks as `[rotation; translation]`, matching [`Covariance6`] ordering.
    pub fn as_vector(&self) -> Vector6<f64> {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.rotation);
        v.fixed_rows_mut::<3>(3).copy_from(&self.translation);
        v
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Twist {
            rotation: v.fixed_rows::<3>(0).into_owned(),
            translation: v.fixed_rows::<3>(3).into_owned(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.as_vector().norm()
    }

    /// Exponential map back onto the group.
    pub fn exp(&self) -> Pose {
        let rotation = UnitQuaternion::from_scaled_axis(self.rotation);
        let jl = so3_left_jacobian(&self.rotation);
        Pose::new(rotation, jl * self.translation)
    }
}

/// 6x6 symmetric positive-definite covariance ordered (rotation, translation),
/// units (rad^2 | rad*m | m^2).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance6 {
    matrix: Matrix6<f64>,
}

impl Covariance6 {
    /// Validates symmetry (to 1e-12 relative) and positive-definiteness.
    pub fn from_matrix(m: Matrix6<f64>) -> Result<Self, Se3Error> {
        let scale = m.amax().max(1.0);
        for i in 0..6 {
            for j in (i + 1)..6 {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Se3Error::InvalidCovariance(format!(
                        "asymmetric at ({i},{j}): {} vs {}",
                        m[(i, j)],
                        m[(j, i)]
                    )));
                }
            }
        }
        let sym = (m + m.transpose()) * 0.5;
        if sym.cholesky().is_none() {
            return Err(Se3Error::InvalidCovariance(
                "not positive-definite".to_string(),
            ));
        }
        Ok(Covariance6 { matrix: sym })
    }

    /// Isotropic diagonal covariance from per-axis variances.
    pub fn diagonal(rot_var: f64, trans_var: f64) -> Self {
        let mut m = Matrix6::zeros();
        for i in 0..3 {
            m[(i, i)] = rot_var;
            m[(i + 3, i + 3)] = trans_var;
        }
        Covariance6 { matrix: m }
    }

    pub fn isotropic(var: f64) -> Self {
        Covariance6::diagonal(var, var)
    }

    pub fn matrix(&self) -> &Matrix6<f64> {
        &self.matrix
    }

    /// Information matrix (inverse covariance).
    pub fn information(&self) -> Matrix6<f64> {
        self.matrix
            .cholesky()
            .expect("covariance validated positive-definite")
            .inverse()
    }

    /// Transports the covariance of a right-multiplied twist through a
    /// rigid transform: `cov' = Ad(t)^-1-free form`, used when composing
    /// odometry factors end to end.
    pub fn transported_by(&self, adj: &Matrix6<f64>) -> Covariance6 {
        let m = adj * self.matrix * adj.transpose();
        Covariance6 {
            matrix: (m + m.transpose()) * 0.5,
        }
    }

    pub fn add(&self, other: &Covariance6) -> Covariance6 {
        Covariance6 {
            matrix: self.matrix + other.matrix,
        }
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }
}

/// Translation error (meters) and geodesic rotation error (degrees, in
/// `[0, 180]`) between two poses.
pub fn pose_error(a: &Pose, b: &Pose) -> (f64, f64) {
    let trans = (a.translation - b.translation).norm();
    let rel = a.rotation.inverse() * b.rotation;
    (trans, rel.angle().to_degrees())
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// SO(3) left Jacobian J_l(omega).
pub fn so3_left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let k = skew(omega);
    if theta < 1e-6 {
        // Second-order Taylor expansion; coefficients (1/2, 1/6).
        Matrix3::identity() + k * 0.5 + k * k / 6.0
    } else {
        let t2 = theta * theta;
        Matrix3::identity() + k * ((1.0 - theta.cos()) / t2) + k * k * ((theta - theta.sin()) / (t2 * theta))
    }
}

/// Inverse of the SO(3) left Jacobian.
pub fn so3_left_jacobian_inv(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let k = skew(omega);
    if theta < 1e-6 {
        Matrix3::identity() - k * 0.5 + k * k / 12.0
    } else {
        let cot_coeff = 1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
        Matrix3::identity() - k * 0.5 + k * k * cot_coeff
    }
}

/// The coupling block Q of the SE(3) left Jacobian (Barfoot's closed form),
/// with twist `(omega, u)`.
fn se3_q_block(omega: &Vector3<f64>, u: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let p = skew(u);
    let w = skew(omega);
    let (c1, c2, c3);
    if theta < 1e-4 {
        let t2 = theta * theta;
        c1 = 1.0 / 6.0 - t2 / 120.0;
        c2 = 1.0 / 24.0 - t2 / 720.0;
        c3 = -1.0 / 120.0 + t2 / 5040.0;
    } else {
        let t2 = theta * theta;
        let t3 = t2 * theta;
        let t4 = t3 * theta;
        let t5 = t4 * theta;
        c1 = (theta - theta.sin()) / t3;
        c2 = (1.0 - t2 / 2.0 - theta.cos()) / t4;
        c3 = (theta - theta.sin() - t3 / 6.0) / t5;
    }
    let wp = w * p;
    let pw = p * w;
    let wpw = wp * w;
    p * 0.5
        + (wp + pw + wpw) * c1
        - (w * wp + pw * w - wpw * 3.0) * c2
        - ((wpw * w + w * wpw) * 0.5) * (c2 - 3.0 * c3)
}

/// Inverse of the SE(3) left Jacobian for twist ordering (rotation,
/// translation).
pub fn se3_left_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    let jl_inv = so3_left_jacobian_inv(&xi.rotation);
    let q = se3_q_block(&xi.rotation, &xi.translation);
    let mut j = Matrix6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&jl_inv);
    j.fixed_view_mut::<3, 3>(3, 3).copy_from(&jl_inv);
    j.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(-jl_inv * q * jl_inv));
    j
}

/// Inverse of the SE(3) right Jacobian: `Jr^-1(xi) = Jl^-1(-xi)`.
pub fn se3_right_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    se3_left_jacobian_inv(&Twist::new(-xi.rotation, -xi.translation))
}
