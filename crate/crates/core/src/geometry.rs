//! SO(3) and quaternion kernel shared by the estimators.
//!
//! Conventions: quaternions are Hamilton, stored scalar-last, and
//! `quat_to_rot(q)` is the body-to-world rotation `R_wb`.

use std::ops::Mul;

use nalgebra::{Matrix3, Vector3};

/// Below this angle `exp_so3` switches to its second-order Taylor expansion.
pub const EXP_TAYLOR_CUTOFF: f64 = 1e-8;
/// `log_so3` uses the small-angle series when `|trace(R) - 3|` is below this.
pub const LOG_TRACE_CUTOFF: f64 = 1e-10;
/// `log_so3` extracts the axis from `R + Rᵀ` when `trace(R) + 1` is below this.
const LOG_PI_CUTOFF: f64 = 1e-6;

/// Unit quaternion, Hamilton convention, scalar-last storage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quat {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
}

impl Default for Quat {
    fn default() -> Self {
        Self::identity()
    }
}

impl Quat {
    pub const fn identity() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            z: 0.0,
            w: 1.0,
        }
    }

    /// Builds a quaternion from raw components and renormalizes it.
    pub fn new(x: f64, y: f64, z: f64, w: f64) -> Self {
        Self { x, y, z, w }.normalized()
    }

    /// Builds from a w-first tuple, as stored on disk by EuRoC.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self::new(x, y, z, w)
    }

    pub fn vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z + self.w * self.w).sqrt()
    }

    pub fn normalized(self) -> Self {
        let n = self.norm();
        Self {
            x: self.x / n,
            y: self.y / n,
            z: self.z / n,
            w: self.w / n,
        }
    }

    pub fn conj(&self) -> Self {
        Self {
            x: -self.x,
            y: -self.y,
            z: -self.z,
            w: self.w,
        }
    }

    /// Representative of the same rotation with `w >= 0`.
    pub fn canonical(self) -> Self {
        if self.w < 0.0 {
            Self {
                x: -self.x,
                y: -self.y,
                z: -self.z,
                w: -self.w,
            }
        } else {
            self
        }
    }

    /// Exact exponential of a rotation vector.
    pub fn from_rotation_vector(theta: &Vector3<f64>) -> Self {
        let angle = theta.norm();
        if angle < EXP_TAYLOR_CUTOFF {
            return Self::new(0.5 * theta.x, 0.5 * theta.y, 0.5 * theta.z, 1.0);
        }
        let s = (0.5 * angle).sin() / angle;
        Self::new(s * theta.x, s * theta.y, s * theta.z, (0.5 * angle).cos())
    }

    pub fn to_rot(&self) -> Matrix3<f64> {
        quat_to_rot(self)
    }

    /// Rotates `v` by this quaternion (body to world).
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        let qv = self.vector();
        let t = 2.0 * qv.cross(v);
        v + self.w * t + qv.cross(&t)
    }

    /// Component-wise distance, useful in tests against `±q` ambiguity.
    pub fn distance(&self, other: &Quat) -> f64 {
        let a = self.canonical();
        let b = other.canonical();
        ((a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2) + (a.w - b.w).powi(2))
            .sqrt()
    }
}

impl Mul for Quat {
    type Output = Quat;

    fn mul(self, rhs: Quat) -> Quat {
        quat_mul(&self, &rhs)
    }
}

/// `[ω×]` such that `skew(a) * b == a × b`.
pub fn skew(omega: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -omega.z, omega.y, //
        omega.z, 0.0, -omega.x, //
        -omega.y, omega.x, 0.0,
    )
}

/// Inverse of [`skew`]; reads the antisymmetric part only.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Rodrigues' formula.
pub fn exp_so3(theta: &Vector3<f64>) -> Matrix3<f64> {
    let angle2 = theta.norm_squared();
    let k = skew(theta);
    if angle2.sqrt() < EXP_TAYLOR_CUTOFF {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let angle = angle2.sqrt();
    Matrix3::identity() + (angle.sin() / angle) * k + ((1.0 - angle.cos()) / angle2) * k * k
}

/// Rotation vector of `r`, with `‖θ‖ ∈ [0, π]`.
pub fn log_so3(r: &Matrix3<f64>) -> Vector3<f64> {
    let tr = r.trace();
    let axis_sin = vee(r); // sin(θ)·a
    if (tr - 3.0).abs() < LOG_TRACE_CUTOFF {
        // θ/(2 sin θ)·(R − Rᵀ) with θ² ≈ 3 − tr
        return axis_sin * (1.0 + (3.0 - tr) / 6.0);
    }
    let cos = ((tr - 1.0) * 0.5).clamp(-1.0, 1.0);
    let sin = axis_sin.norm();
    let angle = sin.atan2(cos);
    if tr + 1.0 < LOG_PI_CUTOFF {
        // a·aᵀ = (sym(R) − cos θ·I) / (1 − cos θ)
        let aat = (0.5 * (r + r.transpose()) - cos * Matrix3::identity()) / (1.0 - cos);
        let diag = aat.diagonal();
        let i = diag.imax();
        let mut axis = aat.column(i) / diag[i].max(0.0).sqrt();
        axis.normalize_mut();
        if axis.dot(&axis_sin) < 0.0 {
            axis = -axis;
        }
        return axis * angle;
    }
    axis_sin * (angle / sin)
}

/// Right Jacobian of SO(3): `Exp(θ + δ) ≈ Exp(θ)·Exp(Jr(θ)·δ)`.
pub fn right_jacobian(theta: &Vector3<f64>) -> Matrix3<f64> {
    let angle2 = theta.norm_squared();
    let k = skew(theta);
    if angle2 < 1e-10 {
        return Matrix3::identity() - 0.5 * k + k * k / 6.0;
    }
    let angle = angle2.sqrt();
    Matrix3::identity() - ((1.0 - angle.cos()) / angle2) * k
        + ((angle - angle.sin()) / (angle2 * angle)) * k * k
}

/// Inverse of [`right_jacobian`] in closed form.
pub fn right_jacobian_inv(theta: &Vector3<f64>) -> Matrix3<f64> {
    let angle2 = theta.norm_squared();
    let k = skew(theta);
    if angle2 < 1e-10 {
        return Matrix3::identity() + 0.5 * k + k * k / 12.0;
    }
    let angle = angle2.sqrt();
    let coeff = 1.0 / angle2 - (1.0 + angle.cos()) / (2.0 * angle * angle.sin());
    Matrix3::identity() + 0.5 * k + coeff * k * k
}

/// Hamilton product `a ⊗ b`, renormalized.
pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    Quat::new(
        a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
        a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
        a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
    )
}

/// First-order error quaternion `(½θ, 1)`, renormalized.
pub fn quat_from_small_angle(theta: &Vector3<f64>) -> Quat {
    Quat::new(0.5 * theta.x, 0.5 * theta.y, 0.5 * theta.z, 1.0)
}

pub fn quat_to_rot(q: &Quat) -> Matrix3<f64> {
    let (x, y, z, w) = (q.x, q.y, q.z, q.w);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Shepperd's method; returns the representative with `w >= 0`.
pub fn rot_to_quat(r: &Matrix3<f64>) -> Quat {
    let tr = r.trace();
    let q = if tr > 0.0 {
        let s = 2.0 * (tr + 1.0).sqrt();
        Quat {
            w: 0.25 * s,
            x: (r[(2, 1)] - r[(1, 2)]) / s,
            y: (r[(0, 2)] - r[(2, 0)]) / s,
            z: (r[(1, 0)] - r[(0, 1)]) / s,
        }
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = 2.0 * (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt();
        Quat {
            w: (r[(2, 1)] - r[(1, 2)]) / s,
            x: 0.25 * s,
            y: (r[(0, 1)] + r[(1, 0)]) / s,
            z: (r[(0, 2)] + r[(2, 0)]) / s,
        }
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = 2.0 * (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt();
        Quat {
            w: (r[(0, 2)] - r[(2, 0)]) / s,
            x: (r[(0, 1)] + r[(1, 0)]) / s,
            y: 0.25 * s,
            z: (r[(1, 2)] + r[(2, 1)]) / s,
        }
    } else {
        let s = 2.0 * (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt();
        Quat {
            w: (r[(1, 0)] - r[(0, 1)]) / s,
            x: (r[(0, 2)] + r[(2, 0)]) / s,
            y: (r[(1, 2)] + r[(2, 1)]) / s,
            z: 0.25 * s,
        }
    };
    q.normalized().canonical()
}

/// Checks orthonormality and unit determinant within `tol` per entry.
pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    let err = r * r.transpose() - Matrix3::identity();
    err.iter().all(|e| e.abs() < tol) && (r.determinant() - 1.0).abs() < tol
}

/// Projects a nearly-orthonormal matrix back onto SO(3).
pub fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    quat_to_rot(&rot_to_quat(r))
}

/// Rigid transform `x_world = rot * x_body + trans`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rot: Matrix3<f64>,
    pub trans: Vector3<f64>,
}

impl Pose {
    pub fn new(rot: Matrix3<f64>, trans: Vector3<f64>) -> Self {
        Self { rot, trans }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rot.transpose();
        Self::new(rt, -(rt * self.trans))
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        Pose::new(self.rot * rhs.rot, self.rot * rhs.trans + self.trans)
    }
}
