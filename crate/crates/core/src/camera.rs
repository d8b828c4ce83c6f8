//! Rectified stereo camera model.

use nalgebra::{Matrix3x4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{MvoError, Result};
use crate::scalar::{lit, to_f64, Real};

/// How the principal point enters the projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrincipalPointSign {
    /// `u = f_u x / z - u0`
    #[default]
    Subtract,
    /// `u = f_u x / z + u0`
    Add,
}

impl PrincipalPointSign {
    fn factor<T: Real>(self) -> T {
        match self {
            PrincipalPointSign::Subtract => -T::one(),
            PrincipalPointSign::Add => T::one(),
        }
    }
}

/// Default depth cutoff in meters.
pub const DEFAULT_Z_MIN: f64 = 0.1;

fn default_z_min<T: Real>() -> T {
    lit(DEFAULT_Z_MIN)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct StereoCalibration<T: Real> {
    pub f_u: T,
    pub f_v: T,
    pub u0: T,
    pub v0: T,
    /// Baseline in meters.
    pub b: T,
    #[serde(default)]
    pub principal_point_sign: PrincipalPointSign,
    #[serde(default = "default_z_min")]
    pub z_min: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct StereoObservation<T: Real> {
    pub u: T,
    pub v: T,
    /// Horizontal disparity in pixels.
    pub d: T,
}

impl<T: Real> StereoObservation<T> {
    pub fn new(u: T, v: T, d: T) -> Self {
        Self { u, v, d }
    }

    pub fn to_vector(&self) -> Vector3<T> {
        Vector3::new(self.u, self.v, self.d)
    }

    pub fn from_vector(v: &Vector3<T>) -> Self {
        Self::new(v.x, v.y, v.z)
    }
}

impl<T: Real> StereoCalibration<T> {
    pub fn new(f_u: T, f_v: T, u0: T, v0: T, b: T) -> Result<Self> {
        let calib = Self {
            f_u,
            f_v,
            u0,
            v0,
            b,
            principal_point_sign: PrincipalPointSign::default(),
            z_min: default_z_min(),
        };
        calib.validate()?;
        Ok(calib)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |x: T| x > T::zero() && to_f64(x).is_finite();
        if !positive(self.f_u) || !positive(self.f_v) {
            return Err(MvoError::InvalidCalibration("focal lengths must be positive".into()));
        }
        if !positive(self.b) {
            return Err(MvoError::InvalidCalibration("baseline must be positive".into()));
        }
        if !(self.z_min >= T::zero()) {
            return Err(MvoError::InvalidCalibration("z_min must be non-negative".into()));
        }
        Ok(())
    }

    fn check_depth(&self, z: T) -> Result<()> {
        if z > self.z_min {
            Ok(())
        } else {
            Err(MvoError::BehindCamera {
                z: to_f64(z),
                z_min: to_f64(self.z_min),
            })
        }
    }

    pub fn project(&self, p: &Vector3<T>) -> Result<StereoObservation<T>> {
        self.check_depth(p.z)?;
        let s = self.principal_point_sign.factor::<T>();
        Ok(StereoObservation::new(
            self.f_u * p.x / p.z + s * self.u0,
            self.f_v * p.y / p.z + s * self.v0,
            self.f_u * self.b / p.z,
        ))
    }

    /// Projects a homogeneous point `(x, y, z, w)`; the model only reads the
    /// Euclidean part, so `w` is expected to be 1.
    pub fn project_homogeneous(&self, h: &Vector4<T>) -> Result<StereoObservation<T>> {
        self.project(&Vector3::new(h.x, h.y, h.z))
    }

    pub fn unproject(&self, o: &StereoObservation<T>) -> Result<Vector3<T>> {
        if !(o.d > T::zero()) || !to_f64(o.d).is_finite() {
            return Err(MvoError::InvalidDisparity { d: to_f64(o.d) });
        }
        let s = self.principal_point_sign.factor::<T>();
        let z = self.f_u * self.b / o.d;
        Ok(Vector3::new(
            (o.u - s * self.u0) * z / self.f_u,
            (o.v - s * self.v0) * z / self.f_v,
            z,
        ))
    }

    /// Jacobian of the projection with respect to the homogeneous point.
    ///
    /// The last column only multiplies the homogeneous component of a
    /// perturbation, which is always zero for `h^odot` style perturbations.
    pub fn projection_jacobian(&self, h: &Vector4<T>) -> Result<Matrix3x4<T>> {
        let (x, y, z) = (h.x, h.y, h.z);
        self.check_depth(z)?;
        let z2 = z * z;
        let z0 = T::zero();
        Ok(Matrix3x4::new(
            self.f_u / z,
            z0,
            -self.f_u * x / z2,
            z0,
            z0,
            self.f_v / z,
            -self.f_v * y / z2,
            z0,
            z0,
            z0,
            -self.f_u * self.b / z2,
            -self.f_u * self.b / z,
        ))
    }
}
