//! Batch trajectory estimation for one motion label.

pub mod jacobian_check;
pub mod models;
pub mod prior;
pub mod solver;

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{MvoError, Result};
use crate::se3::log_map;
use crate::segmentation::{LabelId, Segmentation};
use crate::tracklet::{TrackId, TrackletSet};
use crate::{Pose, StereoCalib, Twist};

use models::{EgoModel, GeoModel, MeasurementModel};
pub use prior::{Flavor, KnotState, PriorConfig};
use solver::{LandmarkTrack, Problem};
pub use solver::SolverConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub flavor: Flavor,
    /// Frame period in seconds.
    pub dt: f64,
    pub prior: PriorConfig,
    pub solver: SolverConfig,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            flavor: Flavor::Wnoa,
            dt: 0.1,
            prior: PriorConfig::default(),
            solver: SolverConfig::default(),
        }
    }
}

impl EstimatorConfig {
    pub fn with_flavor(&self, flavor: Flavor) -> Self {
        Self {
            flavor,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(MvoError::InvalidInput("dt must be positive".into()));
        }
        self.prior.validate()
    }
}

/// Estimated trajectory over consecutive frames `start..=end()`.
///
/// `velocities` is empty for pose-only estimates and `accelerations` is empty
/// unless the flavor carries them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryState {
    pub flavor: Flavor,
    pub start: usize,
    pub dt: f64,
    pub poses: Vec<Pose>,
    pub velocities: Vec<Twist>,
    pub accelerations: Vec<Twist>,
    pub landmarks: BTreeMap<TrackId, Vector3<f64>>,
    pub converged: bool,
    pub iterations: usize,
    pub cost: f64,
}

impl TrajectoryState {
    /// Builds an initial state from poses, differencing them for the
    /// velocities. Accelerations start at zero.
    pub fn from_poses(flavor: Flavor, start: usize, dt: f64, poses: Vec<Pose>) -> Result<Self> {
        let n = poses.len();
        let mut velocities = Vec::new();
        let mut accelerations = Vec::new();
        if flavor.order() >= 1 {
            for k in 0..n {
                let v = if n < 2 {
                    Twist::zeros()
                } else {
                    let (a, b) = if k + 1 < n { (k, k + 1) } else { (k - 1, k) };
                    log_map(&(poses[b] * poses[a].inverse()))? / dt
                };
                velocities.push(v);
            }
        }
        if flavor.order() >= 2 {
            accelerations = vec![Twist::zeros(); n];
        }
        Ok(Self {
            flavor,
            start,
            dt,
            poses,
            velocities,
            accelerations,
            landmarks: BTreeMap::new(),
            converged: false,
            iterations: 0,
            cost: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn end(&self) -> usize {
        self.start + self.poses.len().saturating_sub(1)
    }

    pub fn covers(&self, frame: usize) -> bool {
        !self.poses.is_empty() && frame >= self.start && frame <= self.end()
    }

    pub fn pose(&self, frame: usize) -> Option<&Pose> {
        frame.checked_sub(self.start).and_then(|i| self.poses.get(i))
    }

    pub fn time(&self, frame: usize) -> f64 {
        frame as f64 * self.dt
    }

    /// Knot at index `i`, with zero for derivatives the flavor lacks.
    pub fn knot(&self, i: usize) -> KnotState {
        KnotState::new(
            self.poses[i],
            self.velocities.get(i).copied().unwrap_or_else(Twist::zeros),
            self.accelerations.get(i).copied().unwrap_or_else(Twist::zeros),
        )
    }

    fn knots(&self) -> Vec<KnotState> {
        (0..self.len()).map(|i| self.knot(i)).collect()
    }

    /// Converts to another flavor, dropping or zero-filling derivatives.
    pub fn with_flavor(&self, flavor: Flavor) -> Result<Self> {
        let mut out = Self::from_poses(flavor, self.start, self.dt, self.poses.clone())?;
        if flavor.order() >= 1 && self.flavor.order() >= 1 {
            out.velocities = self.velocities.clone();
        }
        if flavor.order() >= 2 && self.flavor.order() >= 2 {
            out.accelerations = self.accelerations.clone();
        }
        out.landmarks = self.landmarks.clone();
        Ok(out)
    }
}

fn collect_tracks(
    set: &TrackletSet,
    state: &TrajectoryState,
    model: &dyn MeasurementModel,
) -> (Vec<TrackId>, Vec<LandmarkTrack>, Vec<Vector3<f64>>) {
    let mut ids = Vec::new();
    let mut tracks = Vec::new();
    let mut landmarks = Vec::new();
    for track in set.iter() {
        let observations: Vec<(usize, Vector3<f64>)> = track
            .observations()
            .filter(|(f, _)| state.covers(*f))
            .map(|(f, o)| (f - state.start, o.pixel.to_vector()))
            .collect();
        let Some((k0, _)) = observations.first() else {
            continue;
        };
        let init = state.landmarks.get(&track.id).copied().unwrap_or_else(|| {
            let point = track.point(k0 + state.start).expect("observed frame");
            model.initial_landmark(*k0, &state.poses[*k0], point)
        });
        ids.push(track.id);
        tracks.push(LandmarkTrack { observations });
        landmarks.push(init);
    }
    (ids, tracks, landmarks)
}

fn refine(
    set: &TrackletSet,
    init: TrajectoryState,
    model: &dyn MeasurementModel,
    calib: &StereoCalib,
    cfg: &EstimatorConfig,
) -> Result<TrajectoryState> {
    cfg.validate()?;
    if init.is_empty() {
        return Err(MvoError::InvalidInput("empty initial trajectory".into()));
    }
    let init = if init.flavor == cfg.flavor {
        init
    } else {
        init.with_flavor(cfg.flavor)?
    };
    let (ids, tracks, landmarks) = collect_tracks(set, &init, model);
    let problem = Problem {
        model,
        calib,
        flavor: cfg.flavor,
        prior: &cfg.prior,
        dt: cfg.dt,
        tracks: &tracks,
    };
    let sol = problem.solve(init.knots(), landmarks, &cfg.solver)?;
    let order = cfg.flavor.order();
    Ok(TrajectoryState {
        flavor: cfg.flavor,
        start: init.start,
        dt: cfg.dt,
        poses: sol.knots.iter().map(|k| k.pose).collect(),
        velocities: if order >= 1 {
            sol.knots.iter().map(|k| k.velocity).collect()
        } else {
            Vec::new()
        },
        accelerations: if order >= 2 {
            sol.knots.iter().map(|k| k.acceleration).collect()
        } else {
            Vec::new()
        },
        landmarks: ids.into_iter().zip(sol.landmarks).collect(),
        converged: sol.converged,
        iterations: sol.iterations,
        cost: sol.cost,
    })
}

/// Refines an egocentric trajectory `T_{C_k C_start}` of one label from the
/// stereo observations of its support tracklets.
pub fn refine_ego(
    support: &TrackletSet,
    init: TrajectoryState,
    calib: &StereoCalib,
    cfg: &EstimatorConfig,
) -> Result<TrajectoryState> {
    refine(support, init, &EgoModel, calib, cfg)
}

/// Egocentric estimate seeded from pose hypotheses starting at `start`.
pub fn estimate_ego(
    support: &TrackletSet,
    poses: &[Pose],
    start: usize,
    calib: &StereoCalib,
    cfg: &EstimatorConfig,
) -> Result<TrajectoryState> {
    let init = TrajectoryState::from_poses(cfg.flavor, start, cfg.dt, poses.to_vec())?;
    refine_ego(support, init, calib, cfg)
}

pub fn estimate_ego_pose_only(
    support: &TrackletSet,
    poses: &[Pose],
    start: usize,
    calib: &StereoCalib,
    cfg: &EstimatorConfig,
) -> Result<TrajectoryState> {
    estimate_ego(support, poses, start, calib, &cfg.with_flavor(Flavor::PoseOnly))
}

pub fn estimate_ego_wnoa(
    support: &TrackletSet,
    poses: &[Pose],
    start: usize,
    calib: &StereoCalib,
    cfg: &EstimatorConfig,
) -> Result<TrajectoryState> {
    estimate_ego(support, poses, start, calib, &cfg.with_flavor(Flavor::Wnoa))
}

pub fn estimate_ego_wnoj(
    support: &TrackletSet,
    poses: &[Pose],
    start: usize,
    calib: &StereoCalib,
    cfg: &EstimatorConfig,
) -> Result<TrajectoryState> {
    estimate_ego(support, poses, start, calib, &cfg.with_flavor(Flavor::Wnoj))
}

/// Refines a geocentric trajectory `T_{l_k l_start}` given the camera
/// egomotion `T_{C_k C_start}` over the same frames and the anchor
/// `A = T_{l_start C_start}`.
pub fn refine_geo(
    support: &TrackletSet,
    camera: &[Pose],
    anchor: &Pose,
    init: TrajectoryState,
    calib: &StereoCalib,
    cfg: &EstimatorConfig,
) -> Result<TrajectoryState> {
    if camera.len() != init.len() {
        return Err(MvoError::FrameRangeMismatch(format!(
            "{} camera poses for {} object poses",
            camera.len(),
            init.len()
        )));
    }
    let model = GeoModel::new(camera, *anchor);
    refine(support, init, &model, calib, cfg)
}

/// Geocentric estimate seeded from an egocentric label trajectory.
pub fn estimate_geo(
    support: &TrackletSet,
    ego_label: &[Pose],
    camera: &[Pose],
    anchor: &Pose,
    start: usize,
    calib: &StereoCalib,
    cfg: &EstimatorConfig,
) -> Result<TrajectoryState> {
    let poses = to_geocentric(ego_label, camera, anchor)?;
    let init = TrajectoryState::from_poses(cfg.flavor, start, cfg.dt, poses)?;
    refine_geo(support, camera, anchor, init, calib, cfg)
}

pub fn estimate_geo_wnoa(
    support: &TrackletSet,
    ego_label: &[Pose],
    camera: &[Pose],
    anchor: &Pose,
    start: usize,
    calib: &StereoCalib,
    cfg: &EstimatorConfig,
) -> Result<TrajectoryState> {
    estimate_geo(support, ego_label, camera, anchor, start, calib, &cfg.with_flavor(Flavor::Wnoa))
}

pub fn estimate_geo_wnoj(
    support: &TrackletSet,
    ego_label: &[Pose],
    camera: &[Pose],
    anchor: &Pose,
    start: usize,
    calib: &StereoCalib,
    cfg: &EstimatorConfig,
) -> Result<TrajectoryState> {
    estimate_geo(support, ego_label, camera, anchor, start, calib, &cfg.with_flavor(Flavor::Wnoj))
}

/// `T_{l_k l_1} = A eT_k^-1 T_{C_k C_1} A^-1`.
pub fn to_geocentric(ego_label: &[Pose], camera: &[Pose], anchor: &Pose) -> Result<Vec<Pose>> {
    if ego_label.len() != camera.len() {
        return Err(MvoError::FrameRangeMismatch(format!(
            "{} label poses for {} camera poses",
            ego_label.len(),
            camera.len()
        )));
    }
    let a_inv = anchor.inverse();
    Ok(ego_label
        .iter()
        .zip(camera)
        .map(|(e, c)| *anchor * e.inverse() * *c * a_inv)
        .collect())
}

/// Geocentric pose-only trajectory from an egocentric pose-only estimate.
pub fn to_geocentric_pose_only(
    ego_label: &TrajectoryState,
    camera: &[Pose],
    anchor: &Pose,
) -> Result<TrajectoryState> {
    let poses = to_geocentric(&ego_label.poses, camera, anchor)?;
    let mut out = TrajectoryState::from_poses(Flavor::PoseOnly, ego_label.start, ego_label.dt, poses)?;
    out.landmarks = ego_label.landmarks.clone();
    out.converged = ego_label.converged;
    out.iterations = ego_label.iterations;
    out.cost = ego_label.cost;
    Ok(out)
}

/// `eT_k = T_{C_k C_1} A^-1 T_{l_k l_1}^-1 A`, the inverse of [`to_geocentric`].
pub fn to_egocentric(geo: &[Pose], camera: &[Pose], anchor: &Pose) -> Result<Vec<Pose>> {
    if geo.len() != camera.len() {
        return Err(MvoError::FrameRangeMismatch(format!(
            "{} object poses for {} camera poses",
            geo.len(),
            camera.len()
        )));
    }
    let a_inv = anchor.inverse();
    Ok(geo
        .iter()
        .zip(camera)
        .map(|(g, c)| *c * a_inv * g.inverse() * *anchor)
        .collect())
}

/// Anchor `A = T_{l_1 C_1}` at the centroid of the support points carried
/// back to the first frame of the label, with no rotation.
pub fn geocentric_anchor(support: &TrackletSet, ego_label: &[Pose], start: usize) -> Result<Pose> {
    let mut sum = Vector3::zeros();
    let mut count = 0usize;
    for track in support.iter() {
        let first = track
            .observations()
            .find(|(f, _)| *f >= start && f - start < ego_label.len());
        if let Some((f, obs)) = first {
            sum += ego_label[f - start].inverse().transform_point(&obs.point);
            count += 1;
        }
    }
    if count == 0 {
        return Err(MvoError::NoOverlap);
    }
    Ok(Pose::from_translation(-sum / count as f64))
}

/// Label with the largest support, ties going to the lower id.
pub fn select_egomotion(seg: &Segmentation) -> Option<LabelId> {
    seg.labels
        .values()
        .max_by(|a, b| a.support.len().cmp(&b.support.len()).then(b.id.cmp(&a.id)))
        .map(|l| l.id)
}
