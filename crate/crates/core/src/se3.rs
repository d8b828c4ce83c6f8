//! SE(3) group and se(3) algebra operations.
//!
//! Twists are stacked translation first, `xi = (rho, phi)`. A transform
//! `T_ab` maps coordinates expressed in frame `b` into frame `a`:
//! `p_a = C_ab p_b + r`, where `r` is the position of `b`'s origin in `a`.
//! Perturbations are applied on the left, `T <- exp(dxi^) T`.

use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Matrix4x6, Matrix6, Vector3, Vector4, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{MvoError, Result};
use crate::scalar::{lit, to_f64, Real};

/// Below this rotation angle the closed forms switch to Taylor expansions.
const SMALL_ANGLE: f64 = 1e-3;

/// Above this rotation angle `log` recovers the axis from the symmetric part.
const NEAR_PI_ANGLE: f64 = 2.5;

/// Which inverse left Jacobian of SE(3) to use inside the motion-prior
/// Jacobians.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InvJacobian {
    /// `I - 1/2 xi^curlywedge`
    #[default]
    FirstOrder,
    /// Closed-form inverse of the full left Jacobian.
    Exact,
}

pub fn skew<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    let z = T::zero();
    Matrix3::new(z, -v.z, v.y, v.z, z, -v.x, -v.y, v.x, z)
}

pub fn unskew<T: Real>(m: &Matrix3<T>) -> Vector3<T> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

#[inline]
pub fn rho<T: Real>(xi: &Vector6<T>) -> Vector3<T> {
    xi.fixed_rows::<3>(0).into_owned()
}

#[inline]
pub fn phi<T: Real>(xi: &Vector6<T>) -> Vector3<T> {
    xi.fixed_rows::<3>(3).into_owned()
}

pub fn twist<T: Real>(rho: &Vector3<T>, phi: &Vector3<T>) -> Vector6<T> {
    let mut xi = Vector6::zeros();
    xi.fixed_rows_mut::<3>(0).copy_from(rho);
    xi.fixed_rows_mut::<3>(3).copy_from(phi);
    xi
}

/// Lift a twist into the 4x4 algebra matrix `[phi^, rho; 0^T, 0]`.
pub fn wedge<T: Real>(xi: &Vector6<T>) -> Matrix4<T> {
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&phi(xi)));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&rho(xi));
    m
}

/// Inverse of [`wedge`]; ignores the bottom row.
pub fn vee<T: Real>(m: &Matrix4<T>) -> Vector6<T> {
    let rot = m.fixed_view::<3, 3>(0, 0).into_owned();
    let trans = m.fixed_view::<3, 1>(0, 3).into_owned();
    twist(&trans, &unskew(&rot))
}

/// The 6x6 adjoint-algebra operator `[phi^, rho^; 0, phi^]`.
pub fn curlywedge<T: Real>(xi: &Vector6<T>) -> Matrix6<T> {
    let p = skew(&phi(xi));
    let r = skew(&rho(xi));
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&p);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&r);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&p);
    m
}

/// Homogeneous point operator: `h^odot xi == xi^wedge h` for `h = (v, k)`.
pub fn odot<T: Real>(h: &Vector4<T>) -> Matrix4x6<T> {
    let v = Vector3::new(h.x, h.y, h.z);
    let mut m = Matrix4x6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(Matrix3::identity() * h.w));
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&v)));
    m
}

/// Rodrigues coefficients `(sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3)`.
fn rodrigues_coeffs<T: Real>(theta: T) -> (T, T, T) {
    let t2 = theta * theta;
    if theta < lit(SMALL_ANGLE) {
        let t4 = t2 * t2;
        (
            T::one() - t2 / lit(6.0) + t4 / lit(120.0),
            lit::<T>(0.5) - t2 / lit(24.0) + t4 / lit(720.0),
            lit::<T>(1.0 / 6.0) - t2 / lit(120.0) + t4 / lit(5040.0),
        )
    } else {
        let (s, c) = theta.sin_cos();
        (s / theta, (T::one() - c) / t2, (theta - s) / (t2 * theta))
    }
}

pub fn so3_exp<T: Real>(phi: &Vector3<T>) -> Matrix3<T> {
    let theta = phi.norm();
    let (a, b, _) = rodrigues_coeffs(theta);
    let k = skew(phi);
    Matrix3::identity() + k * a + k * k * b
}

pub fn so3_left_jacobian<T: Real>(phi: &Vector3<T>) -> Matrix3<T> {
    let theta = phi.norm();
    let (_, b, c) = rodrigues_coeffs(theta);
    let k = skew(phi);
    Matrix3::identity() + k * b + k * k * c
}

pub fn so3_inv_left_jacobian<T: Real>(phi: &Vector3<T>) -> Matrix3<T> {
    let theta = phi.norm();
    let k = skew(phi);
    let coeff = if theta < lit(SMALL_ANGLE) {
        let t2 = theta * theta;
        lit::<T>(1.0 / 12.0) + t2 / lit(720.0) + t2 * t2 / lit(30240.0)
    } else {
        let (s, c) = theta.sin_cos();
        T::one() / (theta * theta) - (T::one() + c) / (lit::<T>(2.0) * theta * s)
    };
    Matrix3::identity() - k * lit::<T>(0.5) + k * k * coeff
}

/// Rotation angle and vector of a rotation matrix.
pub fn so3_log<T: Real>(c: &Matrix3<T>) -> Result<Vector3<T>> {
    let skew_part = unskew(&(c - c.transpose())) * lit::<T>(0.5);
    let sin_theta = skew_part.norm();
    let cos_theta = (c.trace() - T::one()) * lit::<T>(0.5);
    let theta = sin_theta.atan2(cos_theta);
    if T::pi() - theta < T::default_epsilon().sqrt() {
        return Err(MvoError::LogBranch {
            angle: to_f64(theta),
        });
    }
    if theta < lit(SMALL_ANGLE) {
        let t2 = theta * theta;
        // theta / sin(theta)
        let scale = T::one() + t2 / lit(6.0) + t2 * t2 * lit::<T>(7.0 / 360.0);
        return Ok(skew_part * scale);
    }
    if theta < lit(NEAR_PI_ANGLE) {
        return Ok(skew_part * (theta / sin_theta));
    }
    // (C + C^T)/2 - cos(theta) I = (1 - cos(theta)) a a^T
    let sym = (c + c.transpose()) * lit::<T>(0.5) - Matrix3::identity() * cos_theta;
    let one_minus_cos = T::one() - cos_theta;
    let mut best = 0;
    for i in 1..3 {
        if sym[(i, i)] > sym[(best, best)] {
            best = i;
        }
    }
    let mut axis: Vector3<T> = sym.column(best).into_owned() / (sym[(best, best)] * one_minus_cos).sqrt();
    axis /= axis.norm();
    if axis.dot(&skew_part) < T::zero() {
        axis = -axis;
    }
    Ok(axis * theta)
}

/// Translational coupling block of the SE(3) left Jacobian.
pub fn se3_q_matrix<T: Real>(xi: &Vector6<T>) -> Matrix3<T> {
    let r = skew(&rho(xi));
    let p = skew(&phi(xi));
    let theta = phi(xi).norm();
    let t2 = theta * theta;
    let (c1, c2, c3) = if theta < lit(SMALL_ANGLE) {
        (
            lit::<T>(1.0 / 6.0) - t2 / lit(120.0),
            lit::<T>(1.0 / 24.0) - t2 / lit(720.0),
            lit::<T>(1.0 / 120.0) - t2 / lit(2520.0),
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t3 = t2 * theta;
        let t4 = t2 * t2;
        let t5 = t4 * theta;
        (
            (theta - s) / t3,
            (t2 + lit::<T>(2.0) * c - lit(2.0)) / (lit::<T>(2.0) * t4),
            (lit::<T>(2.0) * theta - lit::<T>(3.0) * s + theta * c) / (lit::<T>(2.0) * t5),
        )
    };
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    let ppr = p * pr;
    let rpp = rp * p;
    r * lit::<T>(0.5)
        + (pr + rp + prp) * c1
        + (ppr + rpp - prp * lit::<T>(3.0)) * c2
        + (prp * p + p * prp) * c3
}

/// Full left Jacobian of SE(3).
pub fn left_jacobian<T: Real>(xi: &Vector6<T>) -> Matrix6<T> {
    let j = so3_left_jacobian(&phi(xi));
    let q = se3_q_matrix(xi);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&q);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    m
}

/// Inverse left Jacobian of SE(3), either the first-order approximation
/// `I - 1/2 xi^curlywedge` or the closed-form inverse.
pub fn inv_left_jacobian<T: Real>(xi: &Vector6<T>, mode: InvJacobian) -> Matrix6<T> {
    match mode {
        InvJacobian::FirstOrder => Matrix6::identity() - curlywedge(xi) * lit::<T>(0.5),
        InvJacobian::Exact => {
            let j_inv = so3_inv_left_jacobian(&phi(xi));
            let q = se3_q_matrix(xi);
            let mut m = Matrix6::zeros();
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(&j_inv);
            m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-(j_inv * q * j_inv)));
            m.fixed_view_mut::<3, 3>(3, 3).copy_from(&j_inv);
            m
        }
    }
}

/// Derivative of the exact inverse left Jacobian at `xi` in direction `eta`,
/// from its Bernoulli series `sum B_n/n! (xi^curlywedge)^n`. The series
/// converges for rotation angles below `2 pi`.
pub fn inv_left_jacobian_derivative(xi: &Vector6<f64>, eta: &Vector6<f64>) -> Matrix6<f64> {
    const TERMS: usize = 60;
    // c_n = B_n / n!, from sum_{k<=n} c_k / (n + 1 - k)! = 0
    let mut inv_fact = [1.0f64; TERMS + 2];
    for n in 1..TERMS + 2 {
        inv_fact[n] = inv_fact[n - 1] / n as f64;
    }
    let mut c = [0.0f64; TERMS];
    c[0] = 1.0;
    for n in 1..TERMS {
        c[n] = -(0..n).map(|k| c[k] * inv_fact[n + 1 - k]).sum::<f64>();
    }
    let a = curlywedge(xi);
    let e = curlywedge(eta);
    // power = A^n, slope = d/d eta of A^n
    let mut power = Matrix6::identity();
    let mut slope = Matrix6::zeros();
    let mut out = Matrix6::zeros();
    for cn in c.iter().skip(1) {
        slope = a * slope + e * power;
        power = a * power;
        out += slope * *cn;
    }
    out
}

/// Element of SE(3) stored as rotation block and translation column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct SE3<T: Real> {
    rotation: Matrix3<T>,
    translation: Vector3<T>,
}

impl<T: Real> Default for SE3<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> SE3<T> {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform without checking orthonormality of `rotation`.
    pub fn from_parts(rotation: Matrix3<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<T>) -> Self {
        Self::from_parts(Matrix3::identity(), translation)
    }

    /// Validating constructor from a homogeneous matrix.
    pub fn from_matrix(m: &Matrix4<T>) -> Result<Self> {
        let bottom = Vector4::new(m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]);
        let tol = T::structural_tolerance();
        if (bottom - Vector4::new(T::zero(), T::zero(), T::zero(), T::one())).amax() > tol {
            return Err(MvoError::InvalidPose("bottom row is not (0, 0, 0, 1)".into()));
        }
        let pose = Self::from_parts(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        );
        let err = pose.orthonormality_error();
        if err > tol || pose.rotation.determinant() < T::zero() {
            return Err(MvoError::InvalidPose(format!(
                "rotation block is not in SO(3) (|C^T C - I| = {:e})",
                to_f64(err)
            )));
        }
        Ok(pose)
    }

    pub fn to_matrix(&self) -> Matrix4<T> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn rotation(&self) -> &Matrix3<T> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<T> {
        &self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::from_parts(rt, -(rt * self.translation))
    }

    /// Position of this transform's origin frame expressed in its target
    /// frame's counterpart, i.e. the translation of the inverse.
    pub fn inverse_translation(&self) -> Vector3<T> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn transform_point(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p + self.translation
    }

    pub fn transform_homogeneous(&self, h: &Vector4<T>) -> Vector4<T> {
        let v = Vector3::new(h.x, h.y, h.z);
        let out = self.rotation * v + self.translation * h.w;
        Vector4::new(out.x, out.y, out.z, h.w)
    }

    /// `[C, r^ C; 0, C]`
    pub fn adjoint(&self) -> Matrix6<T> {
        let mut m = Matrix6::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(skew(&self.translation) * self.rotation));
        m.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.rotation);
        m
    }

    /// `|C^T C - I|_max`
    pub fn orthonormality_error(&self) -> T {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax()
    }

    /// Projects the rotation block back onto SO(3) via SVD.
    pub fn renormalized(&self) -> Self {
        let svd = self.rotation.svd(true, true);
        let u = svd.u.expect("svd u");
        let v_t = svd.v_t.expect("svd v_t");
        let mut d = Matrix3::identity();
        if (u * v_t).determinant() < T::zero() {
            d[(2, 2)] = -T::one();
        }
        Self::from_parts(u * d * v_t, self.translation)
    }

    pub fn cast<U: Real>(&self) -> SE3<U> {
        SE3 {
            rotation: self.rotation.map(|x| lit::<U>(to_f64(x))),
            translation: self.translation.map(|x| lit::<U>(to_f64(x))),
        }
    }
}

impl<T: Real> Mul for SE3<T> {
    type Output = SE3<T>;

    fn mul(self, rhs: SE3<T>) -> SE3<T> {
        SE3::from_parts(
            self.rotation * rhs.rotation,
            self.rotation * rhs.translation + self.translation,
        )
    }
}

impl<'a, T: Real> Mul<&'a SE3<T>> for &'a SE3<T> {
    type Output = SE3<T>;

    fn mul(self, rhs: &'a SE3<T>) -> SE3<T> {
        *self * *rhs
    }
}

pub fn exp_map<T: Real>(xi: &Vector6<T>) -> SE3<T> {
    let p = phi(xi);
    SE3::from_parts(so3_exp(&p), so3_left_jacobian(&p) * rho(xi))
}

pub fn log_map<T: Real>(pose: &SE3<T>) -> Result<Vector6<T>> {
    let p = so3_log(pose.rotation())?;
    let r = so3_inv_left_jacobian(&p) * pose.translation();
    Ok(twist(&r, &p))
}

/// Composes a chain `T_n ... T_2 T_1`, renormalizing the rotation every
/// `renormalize_every` products (`0` disables it).
pub fn compose_chain<T: Real>(steps: &[SE3<T>], renormalize_every: usize) -> SE3<T> {
    let mut acc = SE3::identity();
    for (i, step) in steps.iter().enumerate() {
        acc = *step * acc;
        if renormalize_every > 0 && (i + 1) % renormalize_every == 0 {
            acc = acc.renormalized();
        }
    }
    acc
}

/// Chain length after which rotation blocks are re-projected onto SO(3).
pub const RENORMALIZE_EVERY: usize = 100;
