use std::collections::BTreeMap;

use mvo::eval::{evaluate, Trajectory};
use mvo::scene::{generate, presets, SceneTruth};
use mvo::sliding::{run_full_batch, run_sliding, PipelineConfig, TrackStatus};
use mvo::Pose;

fn body_of(support: &std::collections::BTreeSet<u64>, truth: &SceneTruth) -> Option<i64> {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for t in support {
        *counts.entry(truth.track_body[t]).or_default() += 1;
    }
    counts.into_iter().max_by_key(|(b, n)| (*n, -b)).map(|(b, _)| b)
}

#[test]
fn single_window_sliding_equals_full_batch() {
    let cfg = PipelineConfig::default();
    let script = presets::swinging(25, cfg.energy.window, 0.5, 3);
    let (set, _) = generate(&script).unwrap();
    let sliding = run_sliding(&set, &script.calib, &cfg).unwrap();
    let batch = run_full_batch(&set, &script.calib, &cfg).unwrap();
    assert_eq!(sliding.windows.len(), 1);
    assert_eq!(sliding, batch);
}

#[test]
fn static_scene_yields_only_egomotion() {
    let mut script = presets::swinging(40, 20, 0.0, 5);
    script.bodies.truncate(1);
    let (set, truth) = generate(&script).unwrap();
    let out = run_sliding(&set, &script.calib, &PipelineConfig::default()).unwrap();
    assert_eq!(out.tracks.len(), 1);
    let ego = &out.tracks[&out.egomotion.unwrap()];
    assert!(ego.ego && !ego.dropped);
    assert!(out.closures.is_empty());

    let est: Trajectory = (ego.first_frame..ego.first_frame + ego.samples.len())
        .map(|k| (k, *ego.pose(k).unwrap()))
        .collect();
    let cam: Trajectory = truth.camera.iter().copied().enumerate().collect();
    let (r, _) = evaluate(0, -1, &est, &cam, &truth.camera[0], &Pose::identity()).unwrap();
    assert!(r.ge_translation < 1e-6, "{}", r.ge_translation);
}

#[test]
fn occluded_motion_keeps_its_track() {
    let script = presets::occlusion(45, 12, 12, 0.5, 4);
    let (set, truth) = generate(&script).unwrap();
    let cfg = PipelineConfig { seed: 3, ..PipelineConfig::default() };
    let out = run_sliding(&set, &script.calib, &cfg).unwrap();

    let hidden: Vec<_> = out.tracks.values().filter(|t| !t.ego && body_of(&t.support, &truth) == Some(1)).collect();
    assert_eq!(hidden.len(), 1);
    let track = hidden[0];
    assert_eq!(out.closures.len(), 1);
    let c = &out.closures[0];
    assert_eq!(c.motion, track.id);
    assert_eq!(c.occluded.len(), c.interpolated.len());
    for k in &c.occluded {
        assert_eq!(track.get(*k).unwrap().status, TrackStatus::Interpolated);
    }
    assert_eq!(track.get(c.frame).unwrap().status, TrackStatus::Closed);

    // the other block is seen throughout and never needs a closure
    let other: Vec<_> = out.tracks.values().filter(|t| !t.ego && body_of(&t.support, &truth) == Some(2)).collect();
    assert_eq!(other.len(), 1);
    assert!(other[0].samples.iter().all(|s| s.status == TrackStatus::Direct));
}

#[test]
fn motions_unseen_for_too_long_are_dropped() {
    let script = presets::occlusion(40, 8, 25, 0.0, 6);
    let (set, truth) = generate(&script).unwrap();
    let cfg = PipelineConfig { max_occlusion_frames: 6, ..PipelineConfig::default() };
    let out = run_sliding(&set, &script.calib, &cfg).unwrap();
    // the hidden block is lost at frame 8 and gone long before it returns
    let dropped: Vec<_> = out.tracks.values().filter(|t| t.dropped).collect();
    assert_eq!(dropped.len(), 1);
    assert!(!dropped[0].ego && dropped[0].first_frame == 0);
    assert!(dropped[0].last_frame().unwrap() < 8 + 6 + 1);
    assert!(out.closures.is_empty());
    let returned = out.tracks.values().filter(|t| !t.dropped && body_of(&t.support, &truth) == Some(1)).count();
    assert_eq!(returned, 1);
}
