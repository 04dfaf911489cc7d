//! SO(3) and SE(3) group operations.
//!
//! Twists are ordered rotation first: `(omega, v)`. Perturbations act on the
//! right, `p * exp(eps)`, so noise lives in the body frame of the pose.

use nalgebra::{Matrix3, Matrix4, Matrix6, Quaternion, UnitQuaternion, Vector3, Vector6};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::ops::Mul;

/// Below this rotation angle the closed forms switch to series expansions.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Trace margin at which the log map refuses to pick a branch.
pub const NEAR_PI_TRACE_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum LieError {
    #[error("rotation angle too close to pi for a principal logarithm (trace {trace})")]
    AngleNearPi { trace: f64 },
    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(&'static str),
}

#[inline]
pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

#[inline]
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// A proper rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wraps a matrix without checking orthonormality.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    /// Projects an arbitrary matrix onto SO(3) via SVD.
    pub fn from_matrix_projected(m: &Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd u");
        let vt = svd.v_t.expect("svd v_t");
        let mut d = Matrix3::identity();
        if (u * vt).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Rotation(u * d * vt)
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        so3_exp(&(axis * (angle / n)))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    pub fn angle(&self) -> f64 {
        let c = ((self.0.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let s = vee(&(self.0 - self.0.transpose())).norm() * 0.5;
        s.atan2(c)
    }

    /// Largest deviation of RᵀR from identity.
    pub fn orthonormality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).abs().max()
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.orthonormality_error() <= tol && (self.0.determinant() - 1.0).abs() <= tol
    }

    pub fn orthonormalized(&self) -> Self {
        Self::from_matrix_projected(&self.0)
    }

    /// Unit quaternion as `[w, x, y, z]` with `w >= 0`.
    pub fn to_quaternion_wxyz(&self) -> [f64; 4] {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(self.0);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let q = q.quaternion();
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.w, s * q.i, s * q.j, s * q.k]
    }

    pub fn from_quaternion_wxyz(q: [f64; 4]) -> Self {
        let uq = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
        Rotation(*uq.to_rotation_matrix().matrix())
    }

    pub fn rotx(a: f64) -> Self {
        so3_exp(&Vector3::new(a, 0.0, 0.0))
    }

    pub fn roty(a: f64) -> Self {
        so3_exp(&Vector3::new(0.0, a, 0.0))
    }

    pub fn rotz(a: f64) -> Self {
        so3_exp(&Vector3::new(0.0, 0.0, a))
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

/// A rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose { rotation: Rotation::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Pose { rotation, translation }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose { rotation: Rotation::identity(), translation: t }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt.0 * self.translation) }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.0 * p + self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation.0);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_homogeneous(m: &Matrix4<f64>) -> Self {
        Pose {
            rotation: Rotation(m.fixed_view::<3, 3>(0, 0).into_owned()),
            translation: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    /// Serialized form: quaternion `wxyz` followed by translation `xyz`.
    pub fn to_array7(&self) -> [f64; 7] {
        let q = self.rotation.to_quaternion_wxyz();
        let t = self.translation;
        [q[0], q[1], q[2], q[3], t.x, t.y, t.z]
    }

    pub fn from_array7(a: &[f64; 7]) -> Self {
        Pose {
            rotation: Rotation::from_quaternion_wxyz([a[0], a[1], a[2], a[3]]),
            translation: Vector3::new(a[4], a[5], a[6]),
        }
    }

    /// Adjoint acting on `(omega, v)` twists.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation.0;
        let mut a = Matrix6::zeros();
        a.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        a.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        a.fixed_view_mut::<3, 3>(3, 0).copy_from(&(hat(&self.translation) * r));
        a
    }

    pub fn orthonormalized(&self) -> Self {
        Pose { rotation: self.rotation.orthonormalized(), translation: self.translation }
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        Pose {
            rotation: Rotation(self.rotation.0 * rhs.rotation.0),
            translation: self.rotation.0 * rhs.translation + self.translation,
        }
    }
}

/// Tangent vector of SE(3).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Twist {
    pub omega: Vector3<f64>,
    pub v: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Twist { omega: Vector3::zeros(), v: Vector3::zeros() }
    }

    pub fn new(omega: Vector3<f64>, v: Vector3<f64>) -> Self {
        Twist { omega, v }
    }

    pub fn to_vector6(&self) -> Vector6<f64> {
        Vector6::new(self.omega.x, self.omega.y, self.omega.z, self.v.x, self.v.y, self.v.z)
    }

    pub fn from_vector6(x: &Vector6<f64>) -> Self {
        Twist { omega: Vector3::new(x[0], x[1], x[2]), v: Vector3::new(x[3], x[4], x[5]) }
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Twist { omega: Vector3::new(x[0], x[1], x[2]), v: Vector3::new(x[3], x[4], x[5]) }
    }

    pub fn is_finite(&self) -> bool {
        self.omega.iter().chain(self.v.iter()).all(|x| x.is_finite())
    }

    pub fn scale(&self, s: f64) -> Self {
        Twist { omega: self.omega * s, v: self.v * s }
    }

    pub fn norm(&self) -> f64 {
        self.to_vector6().norm()
    }
}

pub fn so3_exp(w: &Vector3<f64>) -> Rotation {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(w);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Rotation(Matrix3::identity() + k * a + k * k * b)
}

pub fn so3_log(r: &Rotation) -> Result<Vector3<f64>, LieError> {
    let m = r.0;
    let tr = m.trace();
    if tr <= -1.0 + NEAR_PI_TRACE_MARGIN {
        return Err(LieError::AngleNearPi { trace: tr });
    }
    let axis2 = vee(&(m - m.transpose()));
    let s = axis2.norm() * 0.5;
    let c = (tr - 1.0) * 0.5;
    let theta = s.atan2(c);
    let factor = if theta < SMALL_ANGLE {
        0.5 * (1.0 + theta * theta / 6.0)
    } else {
        theta / (2.0 * s)
    };
    Ok(axis2 * factor)
}

/// Rotation applied by the clamped logarithms to pull an angle off π.
pub const NEAR_PI_NUDGE: f64 = 2e-3;

/// Rotation axis of a rotation whose angle is close to π (sign is arbitrary).
fn axis_near_pi(m: &Matrix3<f64>) -> Vector3<f64> {
    let b = (m + Matrix3::identity()) * 0.5;
    let i = (0..3).max_by(|&x, &y| b[(x, x)].total_cmp(&b[(y, y)])).unwrap();
    let col: Vector3<f64> = b.column(i).into();
    let n = col.norm();
    if n > 0.0 {
        col / n
    } else {
        Vector3::x()
    }
}

/// Like [`so3_log`], but rotations within the near-π margin are first turned
/// back by [`NEAR_PI_NUDGE`] about their own axis. Total over SO(3).
pub fn so3_log_clamped(r: &Rotation) -> Vector3<f64> {
    match so3_log(r) {
        Ok(w) => w,
        Err(_) => {
            let a = axis_near_pi(&r.0);
            let back = *r * so3_exp(&(a * -NEAR_PI_NUDGE));
            so3_log(&back).unwrap_or(a * (std::f64::consts::PI - NEAR_PI_NUDGE))
        }
    }
}

/// [`logmap`] built on [`so3_log_clamped`].
pub fn logmap_clamped(p: &Pose) -> Twist {
    let w = so3_log_clamped(&p.rotation);
    Twist { omega: w, v: so3_left_jacobian_inv(&w) * p.translation }
}

/// Left Jacobian of SO(3); also the translation map V of the SE(3) exponential.
pub fn so3_left_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(w);
    let b = if theta < SMALL_ANGLE {
        0.5 - theta2 / 24.0
    } else {
        let h = (0.5 * theta).sin();
        2.0 * h * h / theta2
    };
    // (theta - sin theta) / theta^3 cancels badly well above SMALL_ANGLE.
    let c = if theta < 1e-3 {
        1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0
    } else {
        (theta - theta.sin()) / (theta2 * theta)
    };
    Matrix3::identity() + k * b + k * k * c
}

pub fn so3_left_jacobian_inv(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(w);
    let c = if theta < 1e-3 {
        1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half / half.tan()) / theta2
    };
    Matrix3::identity() - k * 0.5 + k * k * c
}

/// Right Jacobian of SO(3): `exp(w + d) ≈ exp(w) exp(Jr(w) d)`.
pub fn so3_right_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    so3_left_jacobian(&-w)
}

pub fn so3_right_jacobian_inv(w: &Vector3<f64>) -> Matrix3<f64> {
    so3_left_jacobian_inv(&-w)
}

pub fn expmap(t: &Twist) -> Pose {
    let r = so3_exp(&t.omega);
    let v = so3_left_jacobian(&t.omega);
    Pose { rotation: r, translation: v * t.v }
}

pub fn logmap(p: &Pose) -> Result<Twist, LieError> {
    let w = so3_log(&p.rotation)?;
    let vinv = so3_left_jacobian_inv(&w);
    Ok(Twist { omega: w, v: vinv * p.translation })
}

/// Coupling block of the SE(3) left Jacobian for `(omega, v)` ordering.
fn se3_q_block(w: &Vector3<f64>, v: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let p = hat(w);
    let r = hat(v);
    let (c1, c2, c3) = if theta < 1e-3 {
        (1.0 / 6.0 - theta2 / 120.0, 1.0 / 24.0 - theta2 / 720.0, 1.0 / 120.0 - theta2 / 2520.0)
    } else {
        let (s, c) = theta.sin_cos();
        (
            (theta - s) / (theta2 * theta),
            (theta2 + 2.0 * c - 2.0) / (2.0 * theta2 * theta2),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * theta2 * theta2 * theta),
        )
    };
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    r * 0.5 + (pr + rp + prp) * c1 + (p * pr + rp * p - prp * 3.0) * c2 + (prp * p + p * prp) * c3
}

pub fn se3_left_jacobian(t: &Twist) -> Matrix6<f64> {
    let j = so3_left_jacobian(&t.omega);
    let q = se3_q_block(&t.omega, &t.v);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    m.fixed_view_mut::<3, 3>(3, 0).copy_from(&q);
    m
}

/// Right Jacobian of SE(3): `exp(x + d) ≈ exp(x) exp(Jr(x) d)`.
pub fn se3_right_jacobian(t: &Twist) -> Matrix6<f64> {
    se3_left_jacobian(&t.scale(-1.0))
}

pub fn se3_right_jacobian_inv(t: &Twist) -> Matrix6<f64> {
    let neg = t.scale(-1.0);
    let jinv = so3_left_jacobian_inv(&neg.omega);
    let q = se3_q_block(&neg.omega, &neg.v);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&jinv);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&jinv);
    m.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-jinv * q * jinv));
    m
}

/// Draws a body-frame Gaussian twist with per-component scale `sigma`.
pub fn sample_twist<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> Twist {
    let mut x = Vector6::zeros();
    for i in 0..6 {
        let z: f64 = rng.sample(StandardNormal);
        x[i] = sigma * z;
    }
    Twist::from_vector6(&x)
}

pub fn perturb<R: Rng + ?Sized>(p: &Pose, sigma: f64, rng: &mut R) -> Pose {
    *p * expmap(&sample_twist(sigma, rng))
}

/// Tangent-space score of the isotropic Gaussian centred at `h`, evaluated at `h_hat`.
pub fn gaussian_score(h_hat: &Pose, h: &Pose, sigma: f64) -> Result<Twist, LieError> {
    let d = logmap(&(h.inverse() * *h_hat))?;
    Ok(d.scale(-1.0 / (sigma * sigma)))
}

/// Unnormalized log density matching [`gaussian_score`].
pub fn gaussian_log_density(h_hat: &Pose, h: &Pose, sigma: f64) -> Result<f64, LieError> {
    let d = logmap(&(h.inverse() * *h_hat))?;
    Ok(-0.5 * d.to_vector6().norm_squared() / (sigma * sigma))
}

/// Geometric noise levels, `sigmas[0]` smallest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn geometric(sigma_min: f64, sigma_max: f64, levels: usize) -> Result<Self, LieError> {
        if levels < 2 {
            return Err(LieError::InvalidSchedule("at least two levels required"));
        }
        if !(sigma_min > 0.0 && sigma_max > sigma_min && sigma_max.is_finite()) {
            return Err(LieError::InvalidSchedule("need 0 < sigma_min < sigma_max"));
        }
        let ratio = (sigma_max / sigma_min).ln();
        let sigmas = (0..levels)
            .map(|i| sigma_min * (ratio * i as f64 / (levels - 1) as f64).exp())
            .collect();
        Ok(NoiseSchedule { sigmas })
    }

    pub fn from_sigmas(sigmas: Vec<f64>) -> Result<Self, LieError> {
        if sigmas.is_empty() || sigmas[0] <= 0.0 {
            return Err(LieError::InvalidSchedule("sigmas must be positive"));
        }
        if sigmas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(LieError::InvalidSchedule("sigmas must be strictly increasing"));
        }
        Ok(NoiseSchedule { sigmas })
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }

    /// Noise scale at level `k` in `1..=L`.
    pub fn sigma(&self, k: usize) -> f64 {
        self.sigmas[k - 1]
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigmas[0]
    }

    pub fn sigma_max(&self) -> f64 {
        *self.sigmas.last().unwrap()
    }

    /// Continuous level coordinate in `[0, 1]` for an arbitrary sigma.
    pub fn level_fraction(&self, sigma: f64) -> f64 {
        let lo = self.sigma_min().ln();
        let hi = self.sigma_max().ln();
        ((sigma.ln() - lo) / (hi - lo)).clamp(0.0, 1.0)
    }
}
