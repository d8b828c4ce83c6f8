//! Egocentric and geocentric measurement models.

use nalgebra::{Matrix3, Matrix3x6, Matrix4, Matrix4x3, Matrix4x6, Vector3, Vector4};

use crate::error::Result;
use crate::se3::odot;
use crate::{Pose, StereoCalib};

/// Dilation `D` from a 3-vector perturbation into homogeneous coordinates.
fn dilation() -> Matrix4x3<f64> {
    Matrix4x3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0)
}

fn homogeneous(p: &Vector3<f64>) -> Vector4<f64> {
    p.push(1.0)
}

/// Maps a landmark and the pose at window frame `k` to a homogeneous point
/// in the camera frame at `k`, with Jacobians for left pose perturbations and
/// additive landmark perturbations.
pub trait MeasurementModel: Sync {
    fn camera_point(
        &self,
        k: usize,
        pose: &Pose,
        landmark: &Vector3<f64>,
    ) -> (Vector4<f64>, Matrix4x6<f64>, Matrix4x3<f64>);

    /// Landmark position that reproduces camera-frame point `point` at `k`.
    fn initial_landmark(&self, k: usize, pose: &Pose, point: &Vector3<f64>) -> Vector3<f64>;
}

/// `z = T_k p`, with `T_k` the egomotion hypothesis of the label.
#[derive(Debug, Clone, Copy, Default)]
pub struct EgoModel;

impl MeasurementModel for EgoModel {
    fn camera_point(
        &self,
        _k: usize,
        pose: &Pose,
        landmark: &Vector3<f64>,
    ) -> (Vector4<f64>, Matrix4x6<f64>, Matrix4x3<f64>) {
        let h = pose.transform_homogeneous(&homogeneous(landmark));
        let mut zl = Matrix4x3::zeros();
        zl.fixed_view_mut::<3, 3>(0, 0).copy_from(pose.rotation());
        (h, odot(&h), zl)
    }

    fn initial_landmark(&self, _k: usize, pose: &Pose, point: &Vector3<f64>) -> Vector3<f64> {
        pose.inverse().transform_point(point)
    }
}

/// `z = T_{C_k C_1} A^-1 T_k^-1 A p`, with `T_k = T_{l_k l_1}` the motion of
/// the object frame and `A = T_{l_1 C_1}` its anchor.
#[derive(Debug, Clone)]
pub struct GeoModel {
    anchor: Pose,
    /// `T_{C_k C_1} A^-1` per window frame.
    pre: Vec<Matrix4<f64>>,
    pre_inv: Vec<Pose>,
}

impl GeoModel {
    pub fn new(camera: &[Pose], anchor: Pose) -> Self {
        let a_inv = anchor.inverse();
        let pre_poses: Vec<Pose> = camera.iter().map(|c| *c * a_inv).collect();
        Self {
            anchor,
            pre: pre_poses.iter().map(Pose::to_matrix).collect(),
            pre_inv: pre_poses.iter().map(Pose::inverse).collect(),
        }
    }

    pub fn anchor(&self) -> &Pose {
        &self.anchor
    }
}

impl MeasurementModel for GeoModel {
    fn camera_point(
        &self,
        k: usize,
        pose: &Pose,
        landmark: &Vector3<f64>,
    ) -> (Vector4<f64>, Matrix4x6<f64>, Matrix4x3<f64>) {
        let ap = self.anchor.transform_homogeneous(&homogeneous(landmark));
        let m_tinv = self.pre[k] * pose.inverse().to_matrix();
        let h = m_tinv * ap;
        let z1 = -(m_tinv * odot(&ap));
        let z3 = m_tinv * self.anchor.to_matrix() * dilation();
        (h, z1, z3)
    }

    fn initial_landmark(&self, k: usize, pose: &Pose, point: &Vector3<f64>) -> Vector3<f64> {
        (self.anchor.inverse() * *pose * self.pre_inv[k]).transform_point(point)
    }
}

/// Stereo residual `y - s(z)` and its Jacobian blocks `S Z` for the pose and
/// the landmark.
pub fn linearize(
    model: &dyn MeasurementModel,
    calib: &StereoCalib,
    k: usize,
    pose: &Pose,
    landmark: &Vector3<f64>,
    y: &Vector3<f64>,
) -> Result<(Vector3<f64>, Matrix3x6<f64>, Matrix3<f64>)> {
    let (h, zp, zl) = model.camera_point(k, pose, landmark);
    let s = calib.projection_jacobian(&h)?;
    let pred = calib.project_homogeneous(&h)?.to_vector();
    Ok((y - pred, s * zp, s * zl))
}

/// Stereo residual only.
pub fn residual(
    model: &dyn MeasurementModel,
    calib: &StereoCalib,
    k: usize,
    pose: &Pose,
    landmark: &Vector3<f64>,
    y: &Vector3<f64>,
) -> Result<Vector3<f64>> {
    let (h, _, _) = model.camera_point(k, pose, landmark);
    Ok(y - calib.project_homogeneous(&h)?.to_vector())
}
