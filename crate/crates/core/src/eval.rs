//! Calibration of estimated trajectories against ground truth and the
//! global and relative error metrics.
//!
//! Estimated poses are `T_{l_k C_1}`, object frame at `k` relative to the
//! camera at the first frame. Truth poses are `T_{B_k W}`. Both are keyed by
//! frame index.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{Rotation3, Vector3};
use serde::Serialize;

use crate::error::{MvoError, Result};
use crate::scene::{BodyId, SceneTruth, CAMERA_BODY};
use crate::se3::{log_map, phi, so3_log};
use crate::tracklet::TrackId;
use crate::{Pose, Twist};

pub type Trajectory = BTreeMap<usize, Pose>;

/// Constant calibration `T_{l^GT l}` fixed at `reference`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub reference: usize,
    pub transform: Pose,
}

fn common_frames(est: &Trajectory, truth: &Trajectory) -> Vec<usize> {
    est.keys().copied().filter(|k| truth.contains_key(k)).collect()
}

/// Calibrates at the first frame both trajectories cover.
///
/// `sensor_ref` is the truth pose `T_{A W}` of the sensor apparatus at the
/// estimate's reference camera frame and `t_ac` the apparatus-to-camera
/// transform `T_{A C}`. Propagating the calibration forward with the truth
/// motion expressed in the estimated frame gives back the same transform at
/// every later frame, so it is stored once.
pub fn calibrate(est: &Trajectory, truth: &Trajectory, sensor_ref: &Pose, t_ac: &Pose) -> Result<Calibration> {
    let reference = *common_frames(est, truth).first().ok_or(MvoError::NoOverlap)?;
    let transform = truth[&reference] * sensor_ref.inverse() * *t_ac * est[&reference].inverse();
    Ok(Calibration { reference, transform })
}

/// `err(t_j, t_k)`: calibrated estimated motion from `j` to `k` against the
/// true motion.
pub fn pose_error(est: &Trajectory, truth: &Trajectory, cal: &Calibration, j: usize, k: usize) -> Result<Pose> {
    let get = |m: &Trajectory, f: usize| m.get(&f).copied().ok_or(MvoError::NoOverlap);
    let est_kj = get(est, k)? * get(est, j)?.inverse();
    let truth_kj = get(truth, k)? * get(truth, j)?.inverse();
    Ok(cal.transform * est_kj * cal.transform.inverse() * truth_kj.inverse())
}

/// `ln(err(t_1, t_k))` for every common frame `k`.
pub fn global_error(est: &Trajectory, truth: &Trajectory, cal: &Calibration) -> Result<Vec<(usize, Twist)>> {
    common_frames(est, truth)
        .into_iter()
        .map(|k| Ok((k, log_map(&pose_error(est, truth, cal, cal.reference, k)?)?)))
        .collect()
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

fn consecutive(frames: &[usize]) -> impl Iterator<Item = (usize, usize)> + '_ {
    frames.windows(2).filter(|w| w[1] == w[0] + 1).map(|w| (w[0], w[1]))
}

/// Translational (m) and rotational (deg) root-mean-square frame-to-frame
/// error over consecutive common frames.
pub fn rmsre(est: &Trajectory, truth: &Trajectory, cal: &Calibration) -> Result<(f64, f64)> {
    let frames = common_frames(est, truth);
    let mut xyz = Vec::new();
    let mut angle = Vec::new();
    for (j, k) in consecutive(&frames) {
        let err = pose_error(est, truth, cal, j, k)?;
        // xyz of the algebra element is the translation of the transform
        xyz.push(err.translation().norm());
        angle.push(so3_log(err.rotation())?.norm().to_degrees());
    }
    Ok((rms(xyz.into_iter()), rms(angle.into_iter())))
}

/// Root-mean-square true frame-to-frame motion over the same frame pairs
/// [`rmsre`] uses, in m and deg.
pub fn rms_relative_motion(truth: &Trajectory, frames: &[usize]) -> Result<(f64, f64)> {
    let mut xyz = Vec::new();
    let mut angle = Vec::new();
    for (j, k) in consecutive(frames) {
        let (Some(a), Some(b)) = (truth.get(&j), truth.get(&k)) else { continue };
        let rel = *b * a.inverse();
        xyz.push(rel.translation().norm());
        angle.push(so3_log(rel.rotation())?.norm().to_degrees());
    }
    Ok((rms(xyz.into_iter()), rms(angle.into_iter())))
}

/// Intrinsic z-y-x angles (roll, pitch, yaw) in degrees.
pub fn roll_pitch_yaw(pose: &Pose) -> Vector3<f64> {
    let r = Rotation3::from_matrix_unchecked(*pose.rotation());
    let (roll, pitch, yaw) = r.euler_angles();
    Vector3::new(roll, pitch, yaw).map(f64::to_degrees)
}

/// Shifts each angle by whole turns to the value nearest its predecessor.
pub fn unwrap_degrees(angles: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let mut out: Vec<Vector3<f64>> = Vec::with_capacity(angles.len());
    for a in angles {
        let next = match out.last() {
            None => *a,
            Some(prev) => a.zip_map(prev, |v, p| v + 360.0 * ((p - v) / 360.0).round()),
        };
        out.push(next);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathStats {
    /// Summed position increments, m.
    pub length: f64,
    /// Summed rotation increments, deg.
    pub rotation: f64,
    /// Largest absolute displacement from the first frame per axis, m.
    pub max_displacement_xyz: [f64; 3],
    /// Largest absolute unwrapped roll, pitch and yaw from the first frame, deg.
    pub max_displacement_rpy: [f64; 3],
}

/// Path statistics of a truth trajectory `T_{B_k W}`.
pub fn path_stats(truth: &Trajectory) -> Result<PathStats> {
    let poses: Vec<&Pose> = truth.values().collect();
    let Some(first) = poses.first() else {
        return Ok(PathStats {
            length: 0.0,
            rotation: 0.0,
            max_displacement_xyz: [0.0; 3],
            max_displacement_rpy: [0.0; 3],
        });
    };
    let position = |p: &Pose| p.inverse_translation();
    let origin = position(first);
    let mut stats = PathStats {
        length: 0.0,
        rotation: 0.0,
        max_displacement_xyz: [0.0; 3],
        max_displacement_rpy: [0.0; 3],
    };
    for w in poses.windows(2) {
        stats.length += (position(w[1]) - position(w[0])).norm();
        stats.rotation += so3_log(&(w[1].rotation() * w[0].rotation().transpose()))?.norm().to_degrees();
    }
    let rpy: Vec<Vector3<f64>> = poses.iter().map(|p| roll_pitch_yaw(&(**p * first.inverse()))).collect();
    for (p, a) in poses.iter().zip(unwrap_degrees(&rpy)) {
        let d = position(p) - origin;
        for i in 0..3 {
            stats.max_displacement_xyz[i] = stats.max_displacement_xyz[i].max(d[i].abs());
            stats.max_displacement_rpy[i] = stats.max_displacement_rpy[i].max(a[i].abs());
        }
    }
    Ok(stats)
}

/// Per-frame global error in plotting form.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSample {
    pub frame: usize,
    pub xyz: Vector3<f64>,
    pub rpy: Vector3<f64>,
    pub twist: Twist,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorReport {
    pub label: i64,
    pub body: i64,
    pub frames: usize,
    /// Largest absolute global error per axis, m.
    pub ge_xyz: [f64; 3],
    /// Largest absolute unwrapped global rotation error, deg.
    pub ge_rpy: [f64; 3],
    /// Largest global translation error norm, m.
    pub ge_translation: f64,
    /// Largest global rotation error angle, deg.
    pub ge_angle: f64,
    pub rmsre_xyz: f64,
    pub rmsre_angle: f64,
    pub truth_rms_xyz: f64,
    pub truth_rms_angle: f64,
    pub path: PathStats,
}

/// Full comparison of one estimated trajectory with its truth.
pub fn evaluate(
    label: i64,
    body: i64,
    est: &Trajectory,
    truth: &Trajectory,
    sensor_ref: &Pose,
    t_ac: &Pose,
) -> Result<(ErrorReport, Vec<ErrorSample>)> {
    let cal = calibrate(est, truth, sensor_ref, t_ac)?;
    let frames = common_frames(est, truth);
    let mut samples = Vec::with_capacity(frames.len());
    let mut rpy = Vec::with_capacity(frames.len());
    for &k in &frames {
        let err = pose_error(est, truth, &cal, cal.reference, k)?;
        rpy.push(roll_pitch_yaw(&err));
        samples.push(ErrorSample {
            frame: k,
            xyz: *err.translation(),
            rpy: Vector3::zeros(),
            twist: log_map(&err)?,
        });
    }
    for (s, a) in samples.iter_mut().zip(unwrap_degrees(&rpy)) {
        s.rpy = a;
    }
    let mut report = ErrorReport {
        label,
        body,
        frames: frames.len(),
        ge_xyz: [0.0; 3],
        ge_rpy: [0.0; 3],
        ge_translation: 0.0,
        ge_angle: 0.0,
        rmsre_xyz: 0.0,
        rmsre_angle: 0.0,
        truth_rms_xyz: 0.0,
        truth_rms_angle: 0.0,
        path: path_stats(&frames.iter().map(|k| (*k, truth[k])).collect())?,
    };
    for s in &samples {
        for i in 0..3 {
            report.ge_xyz[i] = report.ge_xyz[i].max(s.xyz[i].abs());
            report.ge_rpy[i] = report.ge_rpy[i].max(s.rpy[i].abs());
        }
        report.ge_translation = report.ge_translation.max(s.xyz.norm());
        report.ge_angle = report.ge_angle.max(phi(&s.twist).norm().to_degrees());
    }
    (report.rmsre_xyz, report.rmsre_angle) = rmsre(est, truth, &cal)?;
    (report.truth_rms_xyz, report.truth_rms_angle) = rms_relative_motion(truth, &frames)?;
    Ok((report, samples))
}

pub fn write_reports<W: Write>(reports: &[ErrorReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "label",
        "body",
        "frames",
        "ge_x",
        "ge_y",
        "ge_z",
        "ge_roll",
        "ge_pitch",
        "ge_yaw",
        "ge_translation",
        "ge_angle",
        "rmsre_xyz",
        "rmsre_angle",
        "truth_rms_xyz",
        "truth_rms_angle",
        "path_length",
        "path_rotation",
        "max_disp_x",
        "max_disp_y",
        "max_disp_z",
        "max_disp_roll",
        "max_disp_pitch",
        "max_disp_yaw",
    ])?;
    for r in reports {
        let mut row = vec![r.label.to_string(), r.body.to_string(), r.frames.to_string()];
        let values = r
            .ge_xyz
            .iter()
            .chain(&r.ge_rpy)
            .chain([
                &r.ge_translation,
                &r.ge_angle,
                &r.rmsre_xyz,
                &r.rmsre_angle,
                &r.truth_rms_xyz,
                &r.truth_rms_angle,
                &r.path.length,
                &r.path.rotation,
            ])
            .chain(&r.path.max_displacement_xyz)
            .chain(&r.path.max_displacement_rpy);
        row.extend(values.map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `frame,label,ex,ey,ez,eroll,epitch,eyaw` rows.
pub fn write_plot_data<W: Write>(series: &[(i64, Vec<ErrorSample>)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["frame", "label", "ex", "ey", "ez", "eroll", "epitch", "eyaw"])?;
    for (label, samples) in series {
        for s in samples {
            let mut row = vec![s.frame.to_string(), label.to_string()];
            row.extend(s.xyz.iter().chain(s.rpy.iter()).map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Truth body owning most tracklets of `support`; ties go to the lower id.
pub fn majority_body<'a>(
    support: impl IntoIterator<Item = &'a TrackId>,
    track_body: &BTreeMap<TrackId, BodyId>,
) -> Option<BodyId> {
    let mut votes: BTreeMap<BodyId, usize> = BTreeMap::new();
    for t in support {
        if let Some(b) = track_body.get(t) {
            *votes.entry(*b).or_default() += 1;
        }
    }
    votes.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|(b, _)| b)
}

/// Scores every estimated label of a run. `labeling` maps tracklets to
/// labels and picks the truth body of each label by majority; the `ego`
/// label is compared with the camera. Labels without a body are skipped.
pub fn evaluate_run(
    trajectories: &BTreeMap<i64, Trajectory>,
    labeling: &BTreeMap<TrackId, i64>,
    ego: Option<i64>,
    truth: &SceneTruth,
) -> Result<Vec<(ErrorReport, Vec<ErrorSample>)>> {
    let as_map = |poses: &[Pose]| -> Trajectory { poses.iter().copied().enumerate().collect() };
    // estimates are relative to the camera at the first estimated frame
    let first = ego
        .and_then(|e| trajectories.get(&e))
        .or_else(|| trajectories.values().next())
        .and_then(|t| t.keys().next().copied())
        .ok_or(MvoError::NoOverlap)?;
    let sensor_ref = *truth.camera.get(first).ok_or(MvoError::NoOverlap)?;
    let mut out = Vec::new();
    for (label, est) in trajectories {
        let body = if Some(*label) == ego {
            Some(CAMERA_BODY)
        } else {
            let support: Vec<TrackId> =
                labeling.iter().filter(|(_, l)| **l == *label).map(|(t, _)| *t).collect();
            majority_body(&support, &truth.track_body)
        };
        let Some(body) = body else {
            log::warn!("label {label} has no truth body");
            continue;
        };
        let body_truth = if body == CAMERA_BODY {
            as_map(&truth.camera)
        } else {
            match truth.bodies.get(&body) {
                Some(p) => as_map(p),
                None => continue,
            }
        };
        out.push(evaluate(*label, body, est, &body_truth, &sensor_ref, &Pose::identity())?);
    }
    Ok(out)
}
