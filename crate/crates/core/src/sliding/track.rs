//! Persistent motion tracks and the state propagation used between windows.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use nalgebra::{DVector, Vector3};
use serde::Serialize;

use crate::error::{MvoError, Result};
use crate::estimation::prior::{covariance, local_state_exact, transition};
use crate::estimation::{Flavor, KnotState};
use crate::se3::{exp_map, log_map};
use crate::segmentation::{LabelId, Segmentation};
use crate::tracklet::TrackId;
use crate::{Pose, Twist};

/// Persistent identifier of a motion across windows.
pub type MotionId = LabelId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrackStatus {
    Direct,
    Extrapolated,
    Interpolated,
    /// Directly estimated frame at which an occluded track was reacquired.
    Closed,
}

impl TrackStatus {
    pub fn name(self) -> &'static str {
        match self {
            TrackStatus::Direct => "direct",
            TrackStatus::Extrapolated => "extrapolated",
            TrackStatus::Interpolated => "interpolated",
            TrackStatus::Closed => "closed",
        }
    }

    /// Estimated from measurements in that frame.
    pub fn is_observed(self) -> bool {
        matches!(self, TrackStatus::Direct | TrackStatus::Closed)
    }
}

impl fmt::Display for TrackStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrackStatus {
    type Err = MvoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(TrackStatus::Direct),
            "extrapolated" => Ok(TrackStatus::Extrapolated),
            "interpolated" => Ok(TrackStatus::Interpolated),
            "closed" => Ok(TrackStatus::Closed),
            other => Err(MvoError::InvalidInput(format!("unknown track status {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackSample {
    pub state: KnotState,
    pub status: TrackStatus,
}

/// Full-history trajectory of one motion.
///
/// Poses are `T_{l_k C_1}` with `C_1` the camera at the first processed
/// frame. The egomotion track instead holds the camera poses `T_{C_k C_1}`.
/// Velocities and accelerations are body-centric, zero where the flavor
/// does not estimate them.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionTrack {
    pub id: MotionId,
    pub ego: bool,
    pub first_frame: usize,
    pub samples: Vec<TrackSample>,
    /// Sensor-to-object transform `T_{l C}` at the first frame.
    pub anchor: Pose,
    /// Tracklets of the most recent window that carried this motion.
    pub support: BTreeSet<TrackId>,
    pub dropped: bool,
}

impl MotionTrack {
    pub fn new(id: MotionId, ego: bool, first_frame: usize, anchor: Pose) -> Self {
        Self {
            id,
            ego,
            first_frame,
            samples: Vec::new(),
            anchor,
            support: BTreeSet::new(),
            dropped: false,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Last frame with a state, if any.
    pub fn last_frame(&self) -> Option<usize> {
        (!self.samples.is_empty()).then(|| self.first_frame + self.samples.len() - 1)
    }

    pub fn get(&self, frame: usize) -> Option<&TrackSample> {
        frame.checked_sub(self.first_frame).and_then(|i| self.samples.get(i))
    }

    pub fn pose(&self, frame: usize) -> Option<&Pose> {
        self.get(frame).map(|s| &s.state.pose)
    }

    /// Stores `sample` at `frame`, which may overwrite or extend by one.
    pub fn set(&mut self, frame: usize, sample: TrackSample) -> Result<()> {
        if self.samples.is_empty() {
            self.first_frame = frame;
        }
        let i = frame.checked_sub(self.first_frame).ok_or_else(|| {
            MvoError::FrameRangeMismatch(format!("frame {frame} precedes track {} start", self.id))
        })?;
        match i.cmp(&self.samples.len()) {
            std::cmp::Ordering::Less => self.samples[i] = sample,
            std::cmp::Ordering::Equal => self.samples.push(sample),
            std::cmp::Ordering::Greater => {
                return Err(MvoError::FrameRangeMismatch(format!(
                    "frame {frame} would leave a gap in track {}",
                    self.id
                )))
            }
        }
        Ok(())
    }

    /// Latest frame estimated from measurements.
    pub fn last_observed(&self) -> Option<usize> {
        self.samples
            .iter()
            .rposition(|s| s.status.is_observed())
            .map(|i| self.first_frame + i)
    }

    /// State at `frame` propagated from the last observed frame at or before
    /// it, or the stored state when `frame` itself is observed.
    pub fn extrapolate_to(&self, frame: usize, flavor: Flavor, dt: f64) -> Result<KnotState> {
        let from = self
            .samples
            .iter()
            .enumerate()
            .filter(|(i, s)| s.status.is_observed() && self.first_frame + i <= frame)
            .map(|(i, _)| self.first_frame + i)
            .next_back()
            .ok_or_else(|| MvoError::InvalidInput(format!("track {} has no observed state", self.id)))?;
        self.extrapolate_from(from, frame, flavor, dt)
    }

    /// State at `frame` propagated from the stored state at `from`.
    pub fn extrapolate_from(&self, from: usize, frame: usize, flavor: Flavor, dt: f64) -> Result<KnotState> {
        let sample = self
            .get(from)
            .ok_or_else(|| MvoError::FrameRangeMismatch(format!("track {} lacks frame {from}", self.id)))?;
        let mut state = sample.state;
        if flavor == Flavor::PoseOnly {
            state.velocity = match from.checked_sub(1).and_then(|p| self.pose(p)) {
                Some(prev) => discrete_velocity(prev, &state.pose, dt)?,
                None => Twist::zeros(),
            };
        }
        extrapolate(flavor, &state, (frame as f64 - from as f64) * dt)
    }
}

/// `ln(T_k T_{k-1}^-1) / dt`.
pub fn discrete_velocity(prev: &Pose, curr: &Pose, dt: f64) -> Result<Twist> {
    Ok(log_map(&(*curr * prev.inverse()))? / dt)
}

fn block(v: &DVector<f64>, i: usize) -> Twist {
    if v.len() >= 6 * (i + 1) {
        Twist::from_iterator(v.rows(6 * i, 6).iter().copied())
    } else {
        Twist::zeros()
    }
}

fn lift(local: &DVector<f64>, base: &Pose) -> KnotState {
    KnotState::new(exp_map(&block(local, 0)) * *base, block(local, 1), block(local, 2))
}

/// Constant-velocity (or constant-acceleration, for the jerk prior) motion
/// from `state` over `tau` seconds. Pose-only states use their velocity as
/// given and behave like the acceleration prior.
pub fn extrapolate(flavor: Flavor, state: &KnotState, tau: f64) -> Result<KnotState> {
    let model = if flavor == Flavor::PoseOnly { Flavor::Wnoa } else { flavor };
    let n = model.order() + 1;
    let mut local = DVector::zeros(6 * n);
    local.rows_mut(6, 6).copy_from(&state.velocity);
    if n > 2 {
        local.rows_mut(12, 6).copy_from(&state.acceleration);
    }
    let out = lift(&(transition(model, tau) * local), &state.pose);
    Ok(if flavor == Flavor::PoseOnly {
        KnotState::new(out.pose, state.velocity, Twist::zeros())
    } else {
        out
    })
}

/// State at `tau` seconds after `a`, where `b` lies `span` seconds after `a`.
///
/// Pose-only states are interpolated linearly in the algebra. The others use
/// the Gaussian-process interpolation of the flavor's prior. The endpoints
/// are returned unchanged.
pub fn interpolate(flavor: Flavor, a: &KnotState, b: &KnotState, span: f64, tau: f64) -> Result<KnotState> {
    if !(span > 0.0) || !(0.0..=span).contains(&tau) {
        return Err(MvoError::InvalidInput(format!(
            "interpolation time {tau} outside [0, {span}]"
        )));
    }
    if tau == 0.0 {
        return Ok(*a);
    }
    if tau == span {
        return Ok(*b);
    }
    if flavor == Flavor::PoseOnly {
        let xi = log_map(&(b.pose * a.pose.inverse()))? * (tau / span);
        return Ok(KnotState::new(exp_map(&xi) * a.pose, Twist::zeros(), Twist::zeros()));
    }
    // the power spectral density cancels in Omega
    let unit = nalgebra::Matrix6::identity();
    let q_tau = covariance(flavor, tau, &unit);
    let q_span = covariance(flavor, span, &unit);
    let q_span_inv = q_span
        .cholesky()
        .ok_or_else(|| MvoError::InvalidInput("singular interpolation covariance".into()))?
        .inverse();
    let omega = q_tau * transition(flavor, span - tau).transpose() * q_span_inv;
    let lambda = transition(flavor, tau) - &omega * transition(flavor, span);
    let n = flavor.order() + 1;
    let mut gamma_a = DVector::zeros(6 * n);
    gamma_a.rows_mut(6, 6).copy_from(&a.velocity);
    if n > 2 {
        gamma_a.rows_mut(12, 6).copy_from(&a.acceleration);
    }
    let gamma_b = local_state_exact(flavor, a, b)?;
    Ok(lift(&(lambda * gamma_a + omega * gamma_b), &a.pose))
}

/// Maps each current label to the previous motion sharing the most
/// tracklets. Pairs sharing less than `min_fraction` of the current support
/// are not matched; the mapping is made injective greedily from the largest
/// overlap down.
pub fn associate_labels(
    current: &Segmentation,
    previous: &BTreeMap<MotionId, BTreeSet<TrackId>>,
    min_fraction: f64,
) -> BTreeMap<LabelId, Option<MotionId>> {
    let mut pairs = Vec::new();
    for label in current.labels.values() {
        for (motion, support) in previous {
            let overlap = label.support.intersection(support).count();
            if overlap > 0 && overlap as f64 >= min_fraction * label.support.len() as f64 {
                pairs.push((overlap, label.id, *motion));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out: BTreeMap<LabelId, Option<MotionId>> = current.labels.keys().map(|l| (*l, None)).collect();
    let mut taken = BTreeSet::new();
    for (_, label, motion) in pairs {
        if out[&label].is_none() && !taken.contains(&motion) {
            out.insert(label, Some(motion));
            taken.insert(motion);
        }
    }
    out
}

/// Closure metric between an extrapolated motion and a new one at the same
/// frame.
///
/// `extrapolated` and `new` are the sensor-to-object transforms `T_{l C_k}`
/// with their body-centric velocities. The new object frame sits at the
/// centroid of its points, so its position is that centroid. Without
/// velocities only the position term counts.
pub fn closure_metric(
    extrapolated: &Pose,
    extrapolated_velocity: Option<&Twist>,
    new: &Pose,
    new_velocity: Option<&Twist>,
    lambda: f64,
) -> f64 {
    let position = (extrapolated.inverse_translation() - new.inverse_translation()).norm();
    match (extrapolated_velocity, new_velocity) {
        (Some(ve), Some(vn)) => {
            let transport = (*extrapolated * new.inverse()).adjoint();
            lambda * position + (1.0 - lambda) * (ve - transport * vn).norm()
        }
        _ => lambda * position,
    }
}

/// Correction `T_{l l_check}` moving the extrapolated object frame onto the
/// new one's position, with identity rotation.
pub fn closure_correction(extrapolated: &Pose, new: &Pose) -> Pose {
    let shift: Vector3<f64> = extrapolated.rotation() * (extrapolated.inverse_translation() - new.inverse_translation());
    Pose::from_translation(shift)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::MotionLabel;
    use approx::assert_relative_eq;

    fn twist(v: [f64; 6]) -> Twist {
        Twist::from_row_slice(&v)
    }

    fn start() -> Pose {
        exp_map(&twist([0.4, -1.0, 5.0, 0.2, -0.1, 0.3]))
    }

    fn max_diff(a: &Pose, b: &Pose) -> f64 {
        (a.to_matrix() - b.to_matrix()).amax()
    }

    #[test]
    fn zero_velocity_stays_put() {
        let s = KnotState::new(start(), Twist::zeros(), Twist::zeros());
        for flavor in [Flavor::PoseOnly, Flavor::Wnoa, Flavor::Wnoj] {
            let out = extrapolate(flavor, &s, 3.7).unwrap();
            assert!(max_diff(&out.pose, &s.pose) < 1e-15);
        }
    }

    #[test]
    fn constant_velocity_extrapolates_exactly() {
        let v = twist([0.5, -0.2, 0.1, 0.3, 0.2, -0.4]);
        let dt = 0.1;
        let s = KnotState::new(start(), v, Twist::zeros());
        for flavor in [Flavor::Wnoa, Flavor::Wnoj] {
            for k in 1..=10 {
                let tau = k as f64 * dt;
                let truth = exp_map(&(v * tau)) * start();
                let out = extrapolate(flavor, &s, tau).unwrap();
                assert!(max_diff(&out.pose, &truth) < 1e-12);
                assert_relative_eq!(out.velocity, v, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn constant_acceleration_needs_the_jerk_prior() {
        let v = twist([0.5, -0.2, 0.1, 0.3, 0.2, -0.4]);
        let a = v * 0.8;
        let s = KnotState::new(start(), v, a);
        let tau = 1.0;
        let truth = exp_map(&(v * tau + a * (0.5 * tau * tau))) * start();
        let wnoj = extrapolate(Flavor::Wnoj, &s, tau).unwrap();
        let wnoa = extrapolate(Flavor::Wnoa, &s, tau).unwrap();
        assert!(max_diff(&wnoj.pose, &truth) < 1e-12);
        assert!(max_diff(&wnoa.pose, &truth) > 1e-2);
    }

    #[test]
    fn interpolation_endpoints_are_exact() {
        let a = KnotState::new(start(), twist([0.1; 6]), twist([0.01; 6]));
        let b = KnotState::new(exp_map(&twist([0.2; 6])) * start(), twist([0.12; 6]), twist([0.0; 6]));
        for flavor in [Flavor::PoseOnly, Flavor::Wnoa, Flavor::Wnoj] {
            assert_eq!(interpolate(flavor, &a, &b, 1.5, 0.0).unwrap(), a);
            assert_eq!(interpolate(flavor, &a, &b, 1.5, 1.5).unwrap(), b);
        }
        assert!(interpolate(Flavor::Wnoa, &a, &b, 1.5, 1.6).is_err());
    }

    #[test]
    fn constant_velocity_midpoint_is_exact() {
        let v = twist([0.5, -0.2, 0.1, 0.3, 0.2, -0.4]);
        let span = 1.5;
        let a = KnotState::new(start(), v, Twist::zeros());
        let b = KnotState::new(exp_map(&(v * span)) * start(), v, Twist::zeros());
        let truth = exp_map(&(v * 0.6)) * start();
        for flavor in [Flavor::PoseOnly, Flavor::Wnoa, Flavor::Wnoj] {
            let mid = interpolate(flavor, &a, &b, span, 0.6).unwrap();
            assert!(max_diff(&mid.pose, &truth) < 1e-12, "{flavor:?}");
        }
    }

    #[test]
    fn association_prefers_overlap_and_stays_injective() {
        let label = |id, s: &[u64]| MotionLabel {
            id,
            start: 0,
            poses: vec![Pose::identity(); 2],
            support: s.iter().copied().collect(),
        };
        let seg = Segmentation {
            labels: [(0, label(0, &[1, 2, 3, 4])), (1, label(1, &[5, 6, 7])), (2, label(2, &[8, 9]))].into(),
            outliers: BTreeSet::new(),
            energy: 0.0,
            next_label_id: 3,
        };
        let prev: BTreeMap<MotionId, BTreeSet<TrackId>> = [
            (10, [1u64, 2, 3, 5].into()),
            (11, [6u64, 7, 4].into()),
        ]
        .into();
        let map = associate_labels(&seg, &prev, 0.3);
        assert_eq!(map[&0], Some(10));
        assert_eq!(map[&1], Some(11));
        assert_eq!(map[&2], None);
    }

    #[test]
    fn closure_metric_and_correction() {
        let ext = exp_map(&twist([0.3, 0.1, -4.0, 0.1, 0.2, 0.3]));
        let v = twist([0.1, 0.0, 0.2, 0.0, 0.1, 0.0]);
        assert!(closure_metric(&ext, Some(&v), &ext, Some(&v), 0.25).abs() < 1e-15);
        let new = Pose::from_translation(-Vector3::new(1.0, 2.0, 6.0));
        let corr = closure_correction(&ext, &new);
        let fixed = corr * ext;
        assert_relative_eq!(fixed.inverse_translation(), new.inverse_translation(), epsilon = 1e-12);
        assert_eq!(corr.rotation(), &nalgebra::Matrix3::identity());
        // position gap just past the threshold with matched velocity
        let gap = Pose::from_translation(ext.translation() - ext.rotation() * Vector3::new(12.0 + 1e-6, 0.0, 0.0));
        let gap = Pose::from_parts(*ext.rotation(), *gap.translation());
        let vn = (gap * ext.inverse()).adjoint() * v;
        let m = closure_metric(&ext, Some(&v), &gap, Some(&vn), 0.25);
        assert!(m > 3.0 && m < 3.0 + 1e-5, "{m}");
    }
}
