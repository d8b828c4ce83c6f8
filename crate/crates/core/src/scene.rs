//! Scripted rigid-body scenes with ground truth, for testing and benchmarks.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MvoError, Result};
use crate::se3::{exp_map, so3_exp};
use crate::segmentation::stream_seed;
use crate::tracklet::{InputFormat, TrackId, TrackletSet};
use crate::{Pose, StereoCalib, StereoObs, Twist};

pub type BodyId = i64;

/// Body id used for the camera in truth pose files.
pub const CAMERA_BODY: BodyId = -1;

fn twist(v: &[f64; 6]) -> Twist {
    Twist::from_row_slice(v)
}

/// A trajectory program giving `T_{B W}` (or `T_{C W}` for the camera) at
/// time `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MotionProgram {
    ConstantPose {
        pose: [f64; 6],
    },
    /// `exp(t v) T_0` with a body-centric velocity.
    ConstantVelocity {
        pose: [f64; 6],
        velocity: [f64; 6],
    },
    /// `exp((v t + a t^2 / 2)) T_0`. Velocity and acceleration should be
    /// parallel for the body-centric acceleration to be constant.
    ConstantAcceleration {
        pose: [f64; 6],
        velocity: [f64; 6],
        acceleration: [f64; 6],
    },
    /// `T_{W B}(t) = T_{W H} Rot(axis, amplitude sin(2 pi t / period + phase)) Trans(lever)`.
    Pendular {
        /// Hinge pose `T_{W H}` as a twist.
        hinge: [f64; 6],
        axis: [f64; 3],
        amplitude: f64,
        period: f64,
        #[serde(default)]
        phase: f64,
        lever: [f64; 3],
    },
}

impl MotionProgram {
    pub fn pose_at(&self, t: f64) -> Pose {
        match self {
            MotionProgram::ConstantPose { pose } => exp_map(&twist(pose)),
            MotionProgram::ConstantVelocity { pose, velocity } => {
                exp_map(&(twist(velocity) * t)) * exp_map(&twist(pose))
            }
            MotionProgram::ConstantAcceleration {
                pose,
                velocity,
                acceleration,
            } => exp_map(&(twist(velocity) * t + twist(acceleration) * (0.5 * t * t))) * exp_map(&twist(pose)),
            MotionProgram::Pendular {
                hinge,
                axis,
                amplitude,
                period,
                phase,
                lever,
            } => {
                let angle = amplitude * (2.0 * std::f64::consts::PI * t / period + phase).sin();
                let axis = Vector3::from_row_slice(axis).normalize();
                let swing = Pose::from_parts(so3_exp(&(axis * angle)), Vector3::zeros());
                let arm = Pose::from_translation(Vector3::from_row_slice(lever));
                (exp_map(&twist(hinge)) * swing * arm).inverse()
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            MotionProgram::Pendular { axis, period, .. } => {
                if !(*period > 0.0) || Vector3::from_row_slice(axis).norm() < 1e-12 {
                    return Err(MvoError::InvalidInput(
                        "pendular program needs a positive period and a nonzero axis".into(),
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Points drawn uniformly from an axis-aligned box in the body frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxCloud {
    pub count: usize,
    #[serde(default)]
    pub center: [f64; 3],
    pub half_extent: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodyScript {
    /// Explicit points in the body frame, meters.
    #[serde(default)]
    pub points: Vec<[f64; 3]>,
    /// Extra random points appended after the explicit ones.
    #[serde(default)]
    pub random_points: Option<BoxCloud>,
    pub program: MotionProgram,
    /// Inclusive frame ranges in which the body is hidden.
    #[serde(default)]
    pub occlusions: Vec<[usize; 2]>,
}

impl BodyScript {
    fn occluded(&self, frame: usize) -> bool {
        self.occlusions.iter().any(|[a, b]| frame >= *a && frame <= *b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneScript {
    pub frames: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub seed: u64,
    /// Pixel noise standard deviation on `u`, `v` and `d`.
    #[serde(default)]
    pub noise_sigma: f64,
    pub calib: StereoCalib,
    #[serde(default = "default_width")]
    pub image_width: f64,
    #[serde(default = "default_height")]
    pub image_height: f64,
    pub camera: MotionProgram,
    pub bodies: Vec<BodyScript>,
}

fn default_dt() -> f64 {
    0.1
}

fn default_width() -> f64 {
    640.0
}

fn default_height() -> f64 {
    480.0
}

impl SceneScript {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(MvoError::InvalidInput("a scene needs at least 2 frames".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.dt > 0.0) {
            return Err(MvoError::InvalidInput("noise must be >= 0 and dt > 0".into()));
        }
        self.calib.validate()?;
        self.camera.validate()?;
        for b in &self.bodies {
            b.program.validate()?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let script: SceneScript = serde_json::from_str(text)?;
        script.validate()?;
        Ok(script)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Body-frame points of every body, random clouds drawn from the seed.
    pub fn body_points(&self) -> Vec<Vec<Vector3<f64>>> {
        self.bodies
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let mut pts: Vec<Vector3<f64>> = b.points.iter().map(|p| Vector3::from_row_slice(p)).collect();
                if let Some(cloud) = &b.random_points {
                    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, &[0, i as u64]));
                    let c = Vector3::from_row_slice(&cloud.center);
                    let h = Vector3::from_row_slice(&cloud.half_extent);
                    for _ in 0..cloud.count {
                        let r = Vector3::from_fn(|k, _| {
                            if h[k] > 0.0 {
                                rng.random_range(-h[k]..h[k])
                            } else {
                                0.0
                            }
                        });
                        pts.push(c + r);
                    }
                }
                pts
            })
            .collect()
    }

    fn in_frustum(&self, p: &Vector3<f64>) -> bool {
        p.z > self.calib.z_min
            && (p.x / p.z).abs() * self.calib.f_u <= 0.5 * self.image_width
            && (p.y / p.z).abs() * self.calib.f_v <= 0.5 * self.image_height
    }
}

/// Ground truth of a generated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTruth {
    pub dt: f64,
    /// Camera poses `T_{C_k W}`.
    pub camera: Vec<Pose>,
    /// Body poses `T_{B_k W}` per body.
    pub bodies: BTreeMap<BodyId, Vec<Pose>>,
    pub track_body: BTreeMap<TrackId, BodyId>,
    /// `visible[body][point][frame]`.
    pub visible: Vec<Vec<Vec<bool>>>,
}

impl SceneTruth {
    /// Camera motion `T_{C_k C_0}`.
    pub fn camera_relative(&self) -> Vec<Pose> {
        let first_inv = self.camera[0].inverse();
        self.camera.iter().map(|c| *c * first_inv).collect()
    }

    pub fn write_track_bodies<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["track_id", "body_id"])?;
        for (t, b) in &self.track_body {
            w.write_record([t.to_string(), b.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `body_id,frame,T00..T33`, the camera under [`CAMERA_BODY`].
    pub fn write_poses<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["body_id".to_string(), "frame".to_string()];
        header.extend(crate::io::matrix_header());
        w.write_record(&header)?;
        let all = std::iter::once((CAMERA_BODY, &self.camera)).chain(self.bodies.iter().map(|(b, p)| (*b, p)));
        for (body, poses) in all {
            for (k, pose) in poses.iter().enumerate() {
                let mut rec = vec![body.to_string(), k.to_string()];
                rec.extend(crate::io::matrix_fields(pose));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(track_bodies: &Path, poses: &Path, dt: f64) -> Result<Self> {
        let mut track_body = BTreeMap::new();
        let mut r = csv::Reader::from_path(track_bodies)?;
        for rec in r.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<i64> {
                rec.get(i)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| MvoError::InvalidInput(format!("bad track_body row {rec:?}")))
            };
            track_body.insert(parse(0)? as TrackId, parse(1)?);
        }
        let mut series: BTreeMap<BodyId, BTreeMap<usize, Pose>> = BTreeMap::new();
        let mut r = csv::Reader::from_path(poses)?;
        for rec in r.records() {
            let rec = rec?;
            let (body, frame, pose) = crate::io::parse_pose_row(&rec)?;
            series.entry(body).or_default().insert(frame, pose);
        }
        let mut camera = Vec::new();
        let mut bodies = BTreeMap::new();
        for (body, frames) in series {
            let poses: Vec<Pose> = frames.into_values().collect();
            if body == CAMERA_BODY {
                camera = poses;
            } else {
                bodies.insert(body, poses);
            }
        }
        if camera.is_empty() {
            return Err(MvoError::InvalidInput("truth poses lack the camera".into()));
        }
        Ok(Self {
            dt,
            camera,
            bodies,
            track_body,
            visible: Vec::new(),
        })
    }
}

/// Renders a scene into stereo tracklets. Tracklet ids are allocated in order
/// of first appearance; a point that leaves view and comes back gets a new id.
pub fn generate(script: &SceneScript) -> Result<(TrackletSet, SceneTruth)> {
    script.validate()?;
    let points = script.body_points();
    let camera: Vec<Pose> = (0..script.frames).map(|k| script.camera.pose_at(k as f64 * script.dt)).collect();
    let body_poses: Vec<Vec<Pose>> = script
        .bodies
        .iter()
        .map(|b| (0..script.frames).map(|k| b.program.pose_at(k as f64 * script.dt)).collect())
        .collect();
    let noise = if script.noise_sigma > 0.0 {
        Some(Normal::new(0.0, script.noise_sigma).map_err(|e| MvoError::InvalidInput(e.to_string()))?)
    } else {
        None
    };
    // per frame: per body, per point, the noisy observation if visible
    let observed: Vec<Vec<Vec<Option<StereoObs>>>> = (0..script.frames)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(script.seed, &[1, k as u64]));
            script
                .bodies
                .iter()
                .enumerate()
                .map(|(bi, body)| {
                    let to_cam = camera[k] * body_poses[bi][k].inverse();
                    points[bi]
                        .iter()
                        .map(|p| {
                            let c = to_cam.transform_point(p);
                            // draw noise unconditionally so streams do not shift
                            let n = noise.map(|d| Vector3::from_fn(|_, _| d.sample(&mut rng)));
                            if body.occluded(k) || !script.in_frustum(&c) {
                                return None;
                            }
                            let clean = script.calib.project(&c).ok()?;
                            let obs = match n {
                                Some(n) => StereoObs::new(clean.u + n.x, clean.v + n.y, clean.d + n.z),
                                None => clean,
                            };
                            (obs.d > 0.0).then_some(obs)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut rows = Vec::new();
    let mut track_body = BTreeMap::new();
    let mut visible: Vec<Vec<Vec<bool>>> = points
        .iter()
        .map(|pts| vec![vec![false; script.frames]; pts.len()])
        .collect();
    let mut current: Vec<Vec<Option<TrackId>>> = points.iter().map(|pts| vec![None; pts.len()]).collect();
    let mut next_id: TrackId = 0;
    for (k, frame) in observed.iter().enumerate() {
        let mut any = false;
        for (bi, body) in frame.iter().enumerate() {
            for (pi, obs) in body.iter().enumerate() {
                match obs {
                    Some(o) => {
                        any = true;
                        visible[bi][pi][k] = true;
                        let id = *current[bi][pi].get_or_insert_with(|| {
                            let id = next_id;
                            next_id += 1;
                            track_body.insert(id, bi as BodyId);
                            id
                        });
                        rows.push((k, id, [o.u, o.v, o.d]));
                    }
                    None => current[bi][pi] = None,
                }
            }
        }
        if !any {
            log::warn!("scene frame {k} has no visible points");
        }
    }
    let set = TrackletSet::from_rows(rows, InputFormat::Pixel, &script.calib)?;
    let truth = SceneTruth {
        dt: script.dt,
        camera,
        bodies: body_poses
            .into_iter()
            .enumerate()
            .map(|(i, p)| (i as BodyId, p))
            .collect(),
        track_body,
        visible,
    };
    Ok((set, truth))
}

/// Fraction of tracklets whose label maps to their generating body under the
/// best one-to-one matching of labels to bodies. Outliers never count as
/// correct.
pub fn oracle_segmentation_score(
    labeling: &BTreeMap<TrackId, Option<u32>>,
    track_body: &BTreeMap<TrackId, BodyId>,
) -> f64 {
    if labeling.is_empty() {
        return 0.0;
    }
    let bodies: Vec<BodyId> = {
        let mut b: Vec<BodyId> = track_body.values().copied().collect();
        b.sort_unstable();
        b.dedup();
        b
    };
    let labels: Vec<u32> = {
        let mut l: Vec<u32> = labeling.values().flatten().copied().collect();
        l.sort_unstable();
        l.dedup();
        l
    };
    // counts[label][body]
    let mut counts = vec![vec![0usize; bodies.len()]; labels.len()];
    for (track, label) in labeling {
        let (Some(label), Some(body)) = (label, track_body.get(track)) else {
            continue;
        };
        let li = labels.binary_search(label).expect("collected label");
        let bi = bodies.binary_search(body).expect("collected body");
        counts[li][bi] += 1;
    }
    let nb = bodies.len();
    assert!(nb <= 20, "too many bodies for exhaustive matching");
    // best[mask] over labels processed so far
    let mut best = vec![None::<usize>; 1 << nb];
    best[0] = Some(0);
    for row in &counts {
        let mut next = best.clone();
        for mask in 0..(1usize << nb) {
            let Some(score) = best[mask] else { continue };
            for (bi, c) in row.iter().enumerate() {
                if mask & (1 << bi) == 0 {
                    let m = mask | (1 << bi);
                    let s = score + c;
                    if next[m].is_none_or(|v| v < s) {
                        next[m] = Some(s);
                    }
                }
            }
        }
        best = next;
    }
    let correct = best.into_iter().flatten().max().unwrap_or(0);
    correct as f64 / labeling.len() as f64
}

/// Ready-made scenes used by the tests and the command line examples.
///
/// Motions are sized so that every body moves well over 20 px per frame
/// relative to the background at its fastest. Below that, merging a 60
/// tracklet body into the background costs less than one label and the
/// default energy prefers a single label.
pub mod presets {
    use super::*;

    pub const IMAGE_WIDTH: f64 = 1600.0;
    pub const IMAGE_HEIGHT: f64 = 960.0;

    pub fn calib() -> StereoCalib {
        StereoCalib::new(800.0, 800.0, 800.0, 480.0, 0.5).expect("valid preset calibration")
    }

    fn background(count: usize) -> BodyScript {
        BodyScript {
            points: Vec::new(),
            random_points: Some(BoxCloud {
                count,
                center: [0.0, 0.0, 11.0],
                half_extent: [7.0, 4.0, 2.0],
            }),
            program: MotionProgram::ConstantPose { pose: [0.0; 6] },
            occlusions: Vec::new(),
        }
    }

    fn block(count: usize) -> Option<BoxCloud> {
        Some(BoxCloud {
            count,
            center: [0.0; 3],
            half_extent: [0.3, 0.3, 0.15],
        })
    }

    fn scene(frames: usize, noise_sigma: f64, seed: u64, camera: MotionProgram, bodies: Vec<BodyScript>) -> SceneScript {
        SceneScript {
            frames,
            dt: 0.1,
            seed,
            noise_sigma,
            calib: calib(),
            image_width: IMAGE_WIDTH,
            image_height: IMAGE_HEIGHT,
            camera,
            bodies,
        }
    }

    /// Slowly panning camera in front of four blocks swinging in the image
    /// plane, hung in a 2x2 grid. Body 0 is the static background.
    pub fn swinging(points_per_body: usize, frames: usize, noise_sigma: f64, seed: u64) -> SceneScript {
        let grid = [(-1.3, -0.7), (1.3, -0.7), (-1.3, 0.7), (1.3, 0.7)];
        let axes = [[0.0, 0.0, 1.0], [0.2, 0.0, 1.0], [-0.2, 0.0, 1.0], [0.0, 0.2, 1.0]];
        let periods = [2.0, 2.3, 2.6, 2.9];
        let bodies = std::iter::once(background(2 * points_per_body))
            .chain((0..4).map(|i| {
                let (x, y) = grid[i];
                BodyScript {
                    points: Vec::new(),
                    random_points: block(points_per_body),
                    program: MotionProgram::Pendular {
                        hinge: [x, y - 1.0, 4.0, 0.0, 0.0, 0.0],
                        axis: axes[i],
                        amplitude: 0.7,
                        period: periods[i],
                        phase: i as f64 * 1.3,
                        lever: [0.0, 1.0, 0.0],
                    },
                    occlusions: Vec::new(),
                }
            }))
            .collect();
        let camera = MotionProgram::ConstantVelocity {
            pose: [0.0; 6],
            velocity: [-0.05, 0.0, 0.0, 0.0, 0.01, 0.0],
        };
        scene(frames, noise_sigma, seed, camera, bodies)
    }

    /// Two blocks on constant screw motions that trace small circles in view.
    /// Body 1 is hidden for `occluded` frames from `occlusion_start`. It turns
    /// 0.12 rad per frame so that a 15 frame gap stays well below half a turn,
    /// which interpolation through the log map needs.
    pub fn occlusion(frames: usize, occlusion_start: usize, occluded: usize, noise_sigma: f64, seed: u64) -> SceneScript {
        let hidden = BodyScript {
            points: Vec::new(),
            random_points: block(60),
            program: MotionProgram::ConstantVelocity {
                pose: [2.8, -0.5, -4.5, 0.0, 0.0, 0.0],
                velocity: [-1.0, 0.0, 0.0, 0.0, 0.0, 1.2],
            },
            occlusions: vec![[occlusion_start, occlusion_start + occluded - 1]],
        };
        let other = BodyScript {
            points: Vec::new(),
            random_points: block(60),
            program: MotionProgram::ConstantVelocity {
                pose: [-1.8, -0.6, -3.5, 0.0, 0.0, 0.0],
                velocity: [0.8, 0.0, 0.0, 0.0, 2.5, 0.0],
            },
            occlusions: Vec::new(),
        };
        let camera = MotionProgram::ConstantVelocity {
            pose: [0.0; 6],
            velocity: [0.0, 0.0, -0.1, 0.0, 0.0, 0.0],
        };
        scene(frames, noise_sigma, seed, camera, vec![background(150), hidden, other])
    }
}
