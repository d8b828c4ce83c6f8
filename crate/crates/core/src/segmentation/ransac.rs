//! Frame-to-frame rigid transform hypotheses.

use std::collections::BTreeSet;

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use rand::seq::index::sample;
use rand::Rng;

use crate::error::{MvoError, Result};
use crate::se3::{exp_map, odot};
use crate::tracklet::{TrackId, Tracklet};
use crate::{Pose, StereoCalib};

use super::RESIDUAL_CAP;

/// Least-squares rotation and translation with `curr ~ T prev`.
///
/// Needs at least three non-collinear correspondences.
pub fn wahba_svd(prev: &[Vector3<f64>], curr: &[Vector3<f64>]) -> Result<Pose> {
    if prev.len() != curr.len() || prev.len() < 3 {
        return Err(MvoError::DegenerateSample);
    }
    let n = prev.len() as f64;
    let mean_prev = prev.iter().sum::<Vector3<f64>>() / n;
    let mean_curr = curr.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (p, c) in prev.iter().zip(curr) {
        h += (c - mean_curr) * (p - mean_prev).transpose();
    }
    let svd = h.svd(true, true);
    let mut sigma: Vec<f64> = svd.singular_values.iter().copied().collect();
    sigma.sort_by(|a, b| b.total_cmp(a));
    if !(sigma[0] > 0.0) || sigma[1] < 1e-9 * sigma[0] {
        return Err(MvoError::DegenerateSample);
    }
    let u = svd.u.ok_or(MvoError::DegenerateSample)?;
    let v_t = svd.v_t.ok_or(MvoError::DegenerateSample)?;
    let mut d = Matrix3::identity();
    d[(2, 2)] = (u.determinant() * v_t.determinant()).signum();
    // nalgebra does not order singular values, so the sign flip has to land
    // on the smallest one
    let smallest = (0..3)
        .min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]))
        .unwrap_or(2);
    if smallest != 2 {
        d[(2, 2)] = 1.0;
        d[(smallest, smallest)] = (u.determinant() * v_t.determinant()).signum();
    }
    let rotation = u * d * v_t;
    Ok(Pose::from_parts(rotation, mean_curr - rotation * mean_prev))
}

/// Stereo reprojection residual of `track` between frames `k - 1` and `k`
/// under the frame-to-frame transform `t_k_prev`, in pixels.
pub fn reprojection_residual(
    track: &Tracklet,
    t_k_prev: &Pose,
    k: usize,
    calib: &StereoCalib,
) -> f64 {
    let (Some(prev), Some(curr)) = (k.checked_sub(1).and_then(|kp| track.get(kp)), track.get(k))
    else {
        return f64::INFINITY;
    };
    match calib.project(&t_k_prev.transform_point(&prev.point)) {
        Ok(pred) => (curr.pixel.to_vector() - pred.to_vector()).norm(),
        Err(_) => f64::INFINITY,
    }
}

pub(crate) fn capped(r: f64) -> f64 {
    if r.is_finite() {
        r.min(RESIDUAL_CAP)
    } else {
        RESIDUAL_CAP
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub transform: Pose,
    pub inliers: BTreeSet<TrackId>,
}

/// Best-of-`iterations` three-point hypothesis for frames `k - 1 -> k`,
/// followed by a least-squares refit on the winning inlier set.
pub fn ransac_frame_pair<R: Rng>(
    tracks: &[&Tracklet],
    k: usize,
    calib: &StereoCalib,
    e_th: f64,
    iterations: usize,
    rng: &mut R,
) -> Result<RansacResult> {
    if k == 0 {
        return Err(MvoError::ProposalFailure("frame pair needs k >= 1".into()));
    }
    let common: Vec<&Tracklet> = tracks
        .iter()
        .copied()
        .filter(|t| t.get(k - 1).is_some() && t.get(k).is_some())
        .collect();
    if common.len() < 3 {
        return Err(MvoError::ProposalFailure(format!(
            "{} tracklets common to frames {} and {k}",
            common.len(),
            k - 1
        )));
    }
    let prev: Vec<Vector3<f64>> = common.iter().map(|t| t.get(k - 1).unwrap().point).collect();
    let curr: Vec<Vector3<f64>> = common.iter().map(|t| t.get(k).unwrap().point).collect();
    let inlier_mask = |t: &Pose| -> Vec<bool> {
        common
            .iter()
            .map(|tr| reprojection_residual(tr, t, k, calib) < e_th)
            .collect()
    };

    let mut best: Option<(Pose, Vec<bool>, usize)> = None;
    for _ in 0..iterations.max(1) {
        let idx = sample(rng, common.len(), 3);
        let sp: Vec<_> = idx.iter().map(|i| prev[i]).collect();
        let sc: Vec<_> = idx.iter().map(|i| curr[i]).collect();
        let Ok(t) = wahba_svd(&sp, &sc) else { continue };
        let mask = inlier_mask(&t);
        let count = mask.iter().filter(|m| **m).count();
        if best.as_ref().is_none_or(|b| count > b.2) {
            best = Some((t, mask, count));
        }
    }
    let (mut transform, mut mask, count) = best.ok_or(MvoError::DegenerateSample)?;
    if count >= 3 {
        let sp: Vec<_> = (0..common.len()).filter(|i| mask[*i]).map(|i| prev[i]).collect();
        let sc: Vec<_> = (0..common.len()).filter(|i| mask[*i]).map(|i| curr[i]).collect();
        if let Ok(refit) = wahba_svd(&sp, &sc) {
            let refit_mask = inlier_mask(&refit);
            if refit_mask.iter().filter(|m| **m).count() >= count {
                transform = refit;
                mask = refit_mask;
            }
        }
    }
    let inliers: Vec<usize> = (0..common.len()).filter(|i| mask[*i]).collect();
    let refined = refine_in_pixels(&transform, &inliers, &prev, &common, k, calib);
    let refined_mask = inlier_mask(&refined);
    if refined_mask.iter().filter(|m| **m).count() >= mask.iter().filter(|m| **m).count() {
        transform = refined;
        mask = refined_mask;
    }
    Ok(RansacResult {
        transform,
        inliers: common
            .iter()
            .zip(&mask)
            .filter(|(_, m)| **m)
            .map(|(t, _)| t.id)
            .collect(),
    })
}

const PIXEL_REFINE_ITERATIONS: usize = 5;

/// Gauss-Newton on the summed squared stereo residuals of `inliers`.
///
/// The point-to-point refit weighs depth noise of distant points as heavily
/// as their well-measured image coordinates; this pulls the transform back
/// towards what the pixel residual sees. Steps that raise the cost stop it.
fn refine_in_pixels(
    start: &Pose,
    inliers: &[usize],
    prev: &[Vector3<f64>],
    tracks: &[&Tracklet],
    k: usize,
    calib: &StereoCalib,
) -> Pose {
    let cost = |t: &Pose| -> f64 {
        inliers
            .iter()
            .map(|&i| {
                let r = reprojection_residual(tracks[i], t, k, calib);
                r * r
            })
            .sum()
    };
    let mut best = *start;
    let mut best_cost = cost(&best);
    if inliers.len() < 3 {
        return best;
    }
    for _ in 0..PIXEL_REFINE_ITERATIONS {
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for &i in inliers {
            let q = best.transform_point(&prev[i]).push(1.0);
            let (Ok(pred), Ok(s)) = (calib.project_homogeneous(&q), calib.projection_jacobian(&q)) else {
                continue;
            };
            let e = tracks[i].get(k).unwrap().pixel.to_vector() - pred.to_vector();
            let j = s * odot(&q);
            h += j.transpose() * j;
            g += j.transpose() * e;
        }
        let Some(step) = h.cholesky().map(|c| c.solve(&g)) else { break };
        let next = exp_map(&step) * best;
        let next_cost = cost(&next);
        if !(next_cost < best_cost) {
            break;
        }
        best = next;
        best_cost = next_cost;
    }
    best
}
