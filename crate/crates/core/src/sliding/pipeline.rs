//! Window-by-window driver: segmentation, estimation, association,
//! occlusion handling and motion closure.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{MvoError, Result};
use crate::estimation::{
    estimate_ego, estimate_geo, geocentric_anchor, select_egomotion, to_geocentric_pose_only, EstimatorConfig, Flavor,
    KnotState, TrajectoryState,
};
use crate::segmentation::{segment_window, stream_seed, EnergyConfig, LabelId, MotionLabel, Segmentation};
use crate::tracklet::{RigidityGraph, TrackId, TrackletSet};
use crate::{Pose, StereoCalib, Twist};

use super::track::{
    associate_labels, closure_correction, closure_metric, interpolate, MotionId, MotionTrack, TrackSample,
    TrackStatus,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub energy: EnergyConfig,
    pub estimator: EstimatorConfig,
    /// Frames a lost motion is extrapolated before it is dropped.
    pub max_occlusion_frames: usize,
    /// Smallest shared fraction of a label's support that links it to a
    /// previous motion.
    pub association_overlap: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            energy: EnergyConfig::default(),
            estimator: EstimatorConfig::default(),
            max_occlusion_frames: 25,
            association_overlap: 0.3,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.energy.validate()?;
        self.estimator.validate()?;
        if !(self.association_overlap > 0.0 && self.association_overlap <= 1.0) {
            return Err(MvoError::InvalidInput("association_overlap must be in (0, 1]".into()));
        }
        Ok(())
    }

    fn flavor(&self) -> Flavor {
        self.estimator.flavor
    }
}

/// One reacquired motion.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosureEvent {
    pub motion: MotionId,
    /// Label of the window in which the motion reappeared.
    pub label: LabelId,
    /// First frame of the new label, where the metric was evaluated.
    pub frame: usize,
    pub metric: f64,
    pub correction: Pose,
    /// Frames strictly between the last observation and `frame`.
    pub occluded: Vec<usize>,
    pub extrapolated: Vec<Pose>,
    pub interpolated: Vec<Pose>,
}

/// Result of one window, labels renamed to motion ids.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowResult {
    pub start: usize,
    pub end: usize,
    pub segmentation: Segmentation,
    pub egomotion: Option<MotionId>,
    /// Every live motion over the window as known after it was processed.
    pub trajectories: BTreeMap<MotionId, Vec<(usize, TrackSample)>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunOutput {
    pub tracks: BTreeMap<MotionId, MotionTrack>,
    pub windows: Vec<WindowResult>,
    pub closures: Vec<ClosureEvent>,
    pub warnings: Vec<String>,
    pub egomotion: Option<MotionId>,
    pub flavor: Flavor,
    pub dt: f64,
}

impl RunOutput {
    /// Motion of every tracklet in the last window that labeled it, or
    /// `None` for tracklets never labeled.
    pub fn final_labeling(&self) -> BTreeMap<TrackId, Option<MotionId>> {
        let mut out = BTreeMap::new();
        for w in &self.windows {
            for (t, l) in w.segmentation.labeling() {
                match (l, out.get(&t)) {
                    (Some(l), _) => {
                        out.insert(t, Some(l));
                    }
                    (None, None) => {
                        out.insert(t, None);
                    }
                    _ => {}
                }
            }
        }
        out
    }

    pub fn camera(&self) -> Option<&MotionTrack> {
        self.egomotion.and_then(|id| self.tracks.get(&id))
    }
}

struct Pipeline<'a> {
    set: &'a TrackletSet,
    calib: &'a StereoCalib,
    cfg: &'a PipelineConfig,
    out: RunOutput,
    next_id: MotionId,
}

/// `label` restricted to frames from `from` on, poses re-based there.
fn clip_label(label: &MotionLabel, from: usize) -> MotionLabel {
    if from <= label.start {
        return label.clone();
    }
    let base = label.pose(from).map_or_else(Pose::identity, |p| p.inverse());
    MotionLabel {
        id: label.id,
        start: from,
        poses: label.poses[from - label.start..].iter().map(|p| *p * base).collect(),
        support: label.support.clone(),
    }
}

fn warn(out: &mut RunOutput, msg: String) {
    log::warn!("{msg}");
    out.warnings.push(msg);
}

/// Whole input as one window.
pub fn run_full_batch(set: &TrackletSet, calib: &StereoCalib, cfg: &PipelineConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let (first, last) = set.frame_range().ok_or(MvoError::NoOverlap)?;
    let mut p = Pipeline::new(set, calib, cfg);
    p.process_window(first, last)?;
    Ok(p.out)
}

/// Slides a window of `cfg.energy.window` frames over the input, one frame
/// at a time. Inputs shorter than a window give the full-batch result.
pub fn run_sliding(set: &TrackletSet, calib: &StereoCalib, cfg: &PipelineConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let (first, last) = set.frame_range().ok_or(MvoError::NoOverlap)?;
    let k = cfg.energy.window;
    let mut p = Pipeline::new(set, calib, cfg);
    let mut f = (first + k - 1).min(last);
    loop {
        let start = (f + 1).saturating_sub(k).max(first);
        if let Err(e) = p.process_window(start, f) {
            warn(&mut p.out, format!("window [{start}, {f}] failed: {e}"));
        }
        if f == last {
            break;
        }
        f += 1;
    }
    Ok(p.out)
}

impl<'a> Pipeline<'a> {
    fn new(set: &'a TrackletSet, calib: &'a StereoCalib, cfg: &'a PipelineConfig) -> Self {
        Self {
            set,
            calib,
            cfg,
            out: RunOutput {
                flavor: cfg.flavor(),
                dt: cfg.estimator.dt,
                ..RunOutput::default()
            },
            next_id: 0,
        }
    }

    fn dt(&self) -> f64 {
        self.cfg.estimator.dt
    }

    fn camera(&self) -> Option<&MotionTrack> {
        self.out.camera()
    }

    /// Camera pose `T_{C_k C_1}`.
    fn camera_pose(&self, frame: usize) -> Result<Pose> {
        self.camera()
            .and_then(|c| c.pose(frame))
            .copied()
            .ok_or_else(|| MvoError::FrameRangeMismatch(format!("no camera pose at frame {frame}")))
    }

    fn camera_relative(&self, from: usize, to: usize) -> Result<Vec<Pose>> {
        let base = self.camera_pose(from)?.inverse();
        (from..=to).map(|k| Ok(self.camera_pose(k)? * base)).collect()
    }

    /// Extends `track` to `frame` by extrapolation from its last state.
    fn extend_to(track: &mut MotionTrack, frame: usize, flavor: Flavor, dt: f64) -> Result<()> {
        let Some(last) = track.last_frame() else { return Ok(()) };
        for k in last + 1..=frame {
            let state = track.extrapolate_from(last, k, flavor, dt)?;
            track.set(k, TrackSample { state, status: TrackStatus::Extrapolated })?;
        }
        Ok(())
    }

    /// Egomotion hypotheses over `[w0, f]` for every live motion with support
    /// in the window: extrapolated one frame, then rearranged against the
    /// camera.
    fn seed(&self, window: &TrackletSet, w0: usize, f: usize) -> Segmentation {
        let ids: BTreeSet<TrackId> = window.ids().collect();
        let mut seg = Segmentation::all_outliers(window);
        seg.next_label_id = self.next_id;
        let Some(camera) = self.camera() else { return seg };
        let (flavor, dt) = (self.cfg.flavor(), self.dt());
        let mut camera = camera.clone();
        if Self::extend_to(&mut camera, f, flavor, dt).is_err() {
            return seg;
        }
        let mut claimed = BTreeSet::new();
        for track in self.out.tracks.values() {
            if track.dropped {
                continue;
            }
            let support: BTreeSet<TrackId> =
                track.support.intersection(&ids).filter(|t| !claimed.contains(*t)).copied().collect();
            if support.is_empty() {
                continue;
            }
            let s = w0.max(track.first_frame);
            let mut t = track.clone();
            if Self::extend_to(&mut t, f, flavor, dt).is_err() {
                continue;
            }
            let poses: Option<Vec<Pose>> = (s..=f)
                .map(|k| {
                    let (c, c0) = (camera.pose(k)?, camera.pose(s)?);
                    if track.ego {
                        return Some(*c * c0.inverse());
                    }
                    let (p, p0) = (t.pose(k)?, t.pose(s)?);
                    Some(*c * p.inverse() * *p0 * c0.inverse())
                })
                .collect();
            let Some(poses) = poses else { continue };
            claimed.extend(support.iter().copied());
            seg.labels.insert(
                track.id,
                MotionLabel {
                    id: track.id,
                    start: s,
                    poses,
                    support,
                },
            );
        }
        seg.outliers = ids.difference(&claimed).copied().collect();
        seg
    }

    fn process_window(&mut self, w0: usize, f: usize) -> Result<()> {
        let cfg = self.cfg;
        let window = self.set.window(w0, f, 2);
        let graph = RigidityGraph::build(&window, cfg.energy.k, cfg.energy.overlap_min);
        let init = self.seed(&window, w0, f);
        let seg = segment_window(
            &window,
            &graph,
            &init,
            self.calib,
            &cfg.energy,
            stream_seed(cfg.seed, &[f as u64]),
        );
        self.next_id = self.next_id.max(seg.next_label_id);

        let previous: BTreeMap<MotionId, BTreeSet<TrackId>> = self
            .out
            .tracks
            .values()
            .filter(|t| !t.dropped)
            .map(|t| (t.id, t.support.clone()))
            .collect();
        let mut mapping = associate_labels(&seg, &previous, cfg.association_overlap);

        let ego_label = self
            .out
            .egomotion
            .and_then(|ego| mapping.iter().find(|(_, m)| **m == Some(ego)).map(|(l, _)| *l))
            .or_else(|| select_egomotion(&seg));
        let mut renamed: BTreeMap<LabelId, MotionId> = BTreeMap::new();
        let mut seen = BTreeSet::new();

        match ego_label {
            Some(l) => {
                let label = &seg.labels[&l];
                let id = self.update_camera(&window, label, mapping.get(&l).copied().flatten(), f)?;
                renamed.insert(l, id);
                seen.insert(id);
                mapping.remove(&l);
            }
            None => warn(&mut self.out, format!("window [{w0}, {f}]: no motion labels")),
        }
        if self.camera().is_none() {
            return Err(MvoError::InvalidInput("no egomotion estimate yet".into()));
        }
        let ego = self.out.egomotion.expect("camera exists");
        {
            let (flavor, dt) = (cfg.flavor(), self.dt());
            let camera = self.out.tracks.get_mut(&ego).expect("camera track");
            Self::extend_to(camera, f, flavor, dt)?;
        }

        // known motions first so that closure sees which ones stayed hidden
        let mut order: Vec<(LabelId, Option<MotionId>)> = mapping.into_iter().collect();
        order.sort_by_key(|(l, m)| (m.is_none(), *l));
        let mut unmatched = Vec::new();
        for (l, motion) in order {
            let label = &seg.labels[&l];
            match motion {
                Some(m) => match self.update_known(&window, label, m) {
                    Ok(()) => {
                        renamed.insert(l, m);
                        seen.insert(m);
                    }
                    Err(e) => warn(
                        &mut self.out,
                        format!(
                            "frame {f}: motion {m} not updated from label frames [{}, {}] with {} tracklets: {e}",
                            label.start,
                            label.end(),
                            label.support.len()
                        ),
                    ),
                },
                None => unmatched.push(l),
            }
        }
        for l in unmatched {
            let label = &seg.labels[&l];
            match self.add_or_close(&window, label, &seen) {
                Ok(id) => {
                    renamed.insert(l, id);
                    seen.insert(id);
                }
                Err(e) => warn(&mut self.out, format!("frame {f}: label {l} not estimated: {e}")),
            }
        }

        self.propagate_unseen(&seen, f)?;

        let mut labels = BTreeMap::new();
        let mut outliers = seg.outliers.clone();
        for (l, label) in &seg.labels {
            match renamed.get(l) {
                Some(id) => {
                    let mut label = label.clone();
                    label.id = *id;
                    labels.insert(*id, label);
                }
                None => outliers.extend(label.support.iter().copied()),
            }
        }
        let trajectories = self
            .out
            .tracks
            .values()
            .filter(|t| !t.dropped)
            .map(|t| (t.id, (w0..=f).filter_map(|k| t.get(k).map(|s| (k, *s))).collect::<Vec<_>>()))
            .filter(|(_, v)| !v.is_empty())
            .collect();
        self.out.windows.push(WindowResult {
            start: w0,
            end: f,
            trajectories,
            segmentation: Segmentation {
                labels,
                outliers,
                energy: seg.energy,
                next_label_id: self.next_id,
            },
            egomotion: self.out.egomotion,
        });
        Ok(())
    }

    fn fresh_id(&mut self, preferred: LabelId) -> MotionId {
        let id = if self.out.tracks.contains_key(&preferred) {
            (self.next_id..).find(|i| !self.out.tracks.contains_key(i)).expect("free id")
        } else {
            preferred
        };
        self.next_id = self.next_id.max(id + 1);
        id
    }

    fn store(track: &mut MotionTrack, first: usize, state: &TrajectoryState, to_abs: &Pose, first_status: TrackStatus) -> Result<()> {
        for i in 0..state.len() {
            let knot = state.knot(i);
            let sample = TrackSample {
                // chained products drift off SO(3) over many windows
                state: KnotState::new((knot.pose * *to_abs).renormalized(), knot.velocity, knot.acceleration),
                status: if i == 0 { first_status } else { TrackStatus::Direct },
            };
            track.set(first + i, sample)?;
        }
        Ok(())
    }

    /// Estimates the camera from the egomotion label and returns its motion id.
    fn update_camera(&mut self, window: &TrackletSet, label: &MotionLabel, motion: Option<MotionId>, f: usize) -> Result<MotionId> {
        let label = &match self.camera() {
            Some(c) if !c.is_empty() => clip_label(label, c.first_frame),
            _ => label.clone(),
        };
        let support = window.subset(&label.support);
        let state = estimate_ego(&support, &label.poses, label.start, self.calib, &self.cfg.estimator)?;
        if !state.converged {
            warn(&mut self.out, format!("frame {f}: egomotion estimate did not converge"));
        }
        let id = match self.out.egomotion.or(motion) {
            Some(id) if self.out.tracks.get(&id).is_some_and(|t| t.ego) => id,
            _ => {
                let id = self.fresh_id(label.id);
                self.out.tracks.insert(id, MotionTrack::new(id, true, label.start, Pose::identity()));
                self.out.egomotion = Some(id);
                id
            }
        };
        let track = self.out.tracks.get_mut(&id).expect("camera track");
        let base = match track.pose(label.start) {
            Some(p) => *p,
            None if track.is_empty() => Pose::identity(),
            None => {
                return Err(MvoError::FrameRangeMismatch(format!(
                    "egomotion label starts at {} after the camera track ends",
                    label.start
                )))
            }
        };
        let status = track.get(label.start).map_or(TrackStatus::Direct, |s| s.status);
        Self::store(track, label.start, &state, &base, status)?;
        track.support = label.support.clone();
        Ok(id)
    }

    /// Geocentric estimate of `label` from its first frame `b`, with the
    /// sensor-to-object anchor `T_{l_b C_b}` when known, the support
    /// centroid otherwise. Returns the anchor used and the trajectory
    /// `T_{l_k l_b}`.
    fn estimate_label(&self, window: &TrackletSet, label: &MotionLabel, anchor: Option<Pose>) -> Result<(Pose, TrajectoryState)> {
        let support = window.subset(&label.support);
        let b = label.start;
        let camera = self.camera_relative(b, label.end())?;
        let anchor = match anchor {
            Some(a) => a.renormalized(),
            None => geocentric_anchor(&support, &label.poses, b)?,
        };
        let est = &self.cfg.estimator;
        let state = if est.flavor == Flavor::PoseOnly {
            let ego = estimate_ego(&support, &label.poses, b, self.calib, est)?;
            to_geocentric_pose_only(&ego, &camera, &anchor)?
        } else {
            estimate_geo(&support, &label.poses, &camera, &anchor, b, self.calib, est)?
        };
        Ok((anchor, state))
    }

    fn update_known(&mut self, window: &TrackletSet, label: &MotionLabel, motion: MotionId) -> Result<()> {
        let track = &self.out.tracks[&motion];
        if track.ego {
            return Err(MvoError::InvalidInput("second label matched the egomotion".into()));
        }
        let label = &clip_label(label, track.first_frame);
        if label.lifetime() < 2 {
            return Err(MvoError::FrameRangeMismatch("label ends before the motion starts".into()));
        }
        let b = label.start;
        let cam_b = self.camera_pose(b)?;
        let known = track.pose(b).map(|p| *p * cam_b.inverse());
        let status = track.get(b).map(|s| s.status);
        let (anchor, state) = self.estimate_label(window, label, known)?;
        let track = self.out.tracks.get_mut(&motion).expect("known motion");
        // a frame reached only by extrapolation is now observed
        let first_status = match status {
            Some(TrackStatus::Interpolated) | Some(TrackStatus::Closed) => status.unwrap(),
            _ => TrackStatus::Direct,
        };
        Self::store(track, b, &state, &(anchor * cam_b), first_status)?;
        track.support = label.support.clone();
        Ok(())
    }

    /// Either reacquires an occluded motion or starts a new one.
    fn add_or_close(&mut self, window: &TrackletSet, label: &MotionLabel, seen: &BTreeSet<MotionId>) -> Result<MotionId> {
        let b = label.start;
        let cam_b = self.camera_pose(b)?;
        let (anchor, state) = self.estimate_label(window, label, None)?;
        let (flavor, dt) = (self.cfg.flavor(), self.dt());
        let with_velocity = flavor != Flavor::PoseOnly;

        let mut best: Option<(f64, MotionId, KnotState, usize)> = None;
        for track in self.out.tracks.values() {
            if track.ego || track.dropped || seen.contains(&track.id) {
                continue;
            }
            let Some(j) = track.last_observed() else { continue };
            if j >= b {
                continue;
            }
            let check = track.extrapolate_from(j, b, flavor, dt)?;
            let ext_lc = check.pose * cam_b.inverse();
            let m = closure_metric(
                &ext_lc,
                with_velocity.then_some(&check.velocity),
                &anchor,
                with_velocity.then(|| state.velocities[0]).as_ref(),
                self.cfg.energy.lambda_mc,
            );
            if m < self.cfg.energy.eps_mc && best.as_ref().is_none_or(|x| m < x.0) {
                best = Some((m, track.id, check, j));
            }
        }

        let Some((metric, motion, check, j)) = best else {
            let id = self.fresh_id(label.id);
            let mut track = MotionTrack::new(id, false, b, anchor);
            Self::store(&mut track, b, &state, &(anchor * cam_b), TrackStatus::Direct)?;
            track.support = label.support.clone();
            self.out.tracks.insert(id, track);
            return Ok(id);
        };

        let ext_lc = check.pose * cam_b.inverse();
        let correction = closure_correction(&ext_lc, &anchor);
        let corrected = correction * check.pose;
        let (new_anchor, state) = self.estimate_label(window, label, Some(corrected * cam_b.inverse()))?;
        let track = self.out.tracks.get_mut(&motion).expect("candidate");
        let occluded: Vec<usize> = (j + 1..b).collect();
        let extrapolated: Vec<Pose> = occluded
            .iter()
            .map(|k| track.extrapolate_from(j, *k, flavor, dt).map(|s| s.pose))
            .collect::<Result<_>>()?;
        Self::extend_to(track, b, flavor, dt)?;
        Self::store(track, b, &state, &(new_anchor * cam_b), TrackStatus::Closed)?;
        let from = track.get(j).expect("observed").state;
        let mut from_state = from;
        if flavor == Flavor::PoseOnly {
            from_state.velocity = Twist::zeros();
        }
        let to = track.get(b).expect("just stored").state;
        let span = (b - j) as f64 * dt;
        let mut interpolated = Vec::with_capacity(occluded.len());
        for k in &occluded {
            let s = interpolate(flavor, &from_state, &to, span, (k - j) as f64 * dt)?;
            interpolated.push(s.pose);
            track.set(*k, TrackSample { state: s, status: TrackStatus::Interpolated })?;
        }
        track.support = label.support.clone();
        log::info!("motion {motion} reacquired at frame {b} (metric {metric:.3})");
        self.out.closures.push(ClosureEvent {
            motion,
            label: label.id,
            frame: b,
            metric,
            correction,
            occluded,
            extrapolated,
            interpolated,
        });
        Ok(motion)
    }

    /// Extrapolates motions without a label up to `f`, dropping those lost
    /// for too long.
    fn propagate_unseen(&mut self, seen: &BTreeSet<MotionId>, f: usize) -> Result<()> {
        let (flavor, dt) = (self.cfg.flavor(), self.dt());
        let max_gap = self.cfg.max_occlusion_frames;
        for track in self.out.tracks.values_mut() {
            if track.dropped {
                continue;
            }
            Self::extend_to(track, f, flavor, dt)?;
            if !seen.contains(&track.id) {
                track.support.clear();
            }
            if let Some(j) = track.last_observed() {
                if f - j > max_gap {
                    track.dropped = true;
                    log::info!("motion {} dropped after {} unobserved frames", track.id, f - j);
                }
            }
        }
        Ok(())
    }
}
