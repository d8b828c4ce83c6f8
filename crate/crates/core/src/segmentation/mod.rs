//! Energy-based multilabel motion segmentation of tracklets.

mod energy;
mod ransac;

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MvoError, Result};
use crate::tracklet::{RigidityGraph, TrackId, Tracklet, TrackletSet, DEFAULT_OVERLAP_MIN};
use crate::{Pose, StereoCalib};

pub use energy::{
    assign_labels, label_residual, merge_labels, outlier_residual, sanitize, smoothness_cost,
    total_energy, ResidualTable,
};
pub use ransac::{ransac_frame_pair, reprojection_residual, wahba_svd, RansacResult};

pub type LabelId = u32;

/// Finite stand-in for an infinite residual inside energy sums, in pixels.
pub const RESIDUAL_CAP: f64 = 1e12;

/// Tuning parameters of segmentation and motion closure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyConfig {
    /// Smoothness weight.
    pub lambda_sm: f64,
    /// Cost of every non-empty label.
    pub mu: f64,
    /// Outlier cost scale.
    pub alpha: f64,
    /// Outlier cost decay, pixels.
    pub beta: f64,
    /// Inlier threshold, pixels.
    pub e_th: f64,
    pub n_ransac: usize,
    /// Minimum support size.
    pub n_th: usize,
    /// Minimum trajectory length, frames.
    pub k_th: usize,
    /// Maximum propose/assign/merge iterations.
    pub n_conv: usize,
    /// Graph neighbours per tracklet.
    pub k: usize,
    /// Sliding window length, frames.
    pub window: usize,
    /// Motion closure threshold.
    pub eps_mc: f64,
    /// Motion closure position weight.
    pub lambda_mc: f64,
    pub overlap_min: usize,
    /// Temperature of the soft label scores.
    pub tau: f64,
    pub max_sweeps: usize,
    pub sweep_tol: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            lambda_sm: 0.5,
            mu: 1000.0,
            alpha: 100.0,
            beta: 5.0,
            e_th: 4.0,
            n_ransac: 100,
            n_th: 20,
            k_th: 3,
            n_conv: 3,
            k: 4,
            window: 8,
            eps_mc: 3.0,
            lambda_mc: 0.25,
            overlap_min: DEFAULT_OVERLAP_MIN,
            tau: 1.0,
            max_sweeps: 20,
            sweep_tol: 1e-4,
        }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lambda_sm", self.lambda_sm),
            ("mu", self.mu),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("e_th", self.e_th),
            ("eps_mc", self.eps_mc),
            ("lambda_mc", self.lambda_mc),
            ("tau", self.tau),
            ("sweep_tol", self.sweep_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(MvoError::InvalidInput(format!("{name} must be positive")));
            }
        }
        if self.lambda_mc > 1.0 {
            return Err(MvoError::InvalidInput("lambda_mc must be at most 1".into()));
        }
        let counts = [
            ("n_ransac", self.n_ransac),
            ("n_conv", self.n_conv),
            ("k", self.k),
            ("window", self.window),
            ("overlap_min", self.overlap_min),
            ("max_sweeps", self.max_sweeps),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(MvoError::InvalidInput(format!("{name} must be positive")));
            }
        }
        if self.n_th < 3 {
            return Err(MvoError::InvalidInput("n_th must be at least 3".into()));
        }
        if self.k_th < 2 {
            return Err(MvoError::InvalidInput("k_th must be at least 2".into()));
        }
        if self.window < 2 {
            return Err(MvoError::InvalidInput("window must span at least 2 frames".into()));
        }
        Ok(())
    }
}

/// A trajectory hypothesis and the tracklets it explains.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionLabel {
    pub id: LabelId,
    /// Frame of `poses[0]`.
    pub start: usize,
    /// Egomotion hypothesis `T_{C_k C_start}` for consecutive frames.
    pub poses: Vec<Pose>,
    pub support: BTreeSet<TrackId>,
}

impl MotionLabel {
    pub fn end(&self) -> usize {
        self.start + self.poses.len().saturating_sub(1)
    }

    pub fn lifetime(&self) -> usize {
        self.poses.len()
    }

    pub fn covers(&self, frame: usize) -> bool {
        frame >= self.start && frame <= self.end() && !self.poses.is_empty()
    }

    pub fn pose(&self, frame: usize) -> Option<&Pose> {
        frame.checked_sub(self.start).and_then(|i| self.poses.get(i))
    }

    /// Transform `T_{C_k C_{k-1}}` between consecutive frames.
    pub fn relative(&self, k: usize) -> Option<Pose> {
        let prev = self.pose(k.checked_sub(1)?)?;
        let curr = self.pose(k)?;
        Some(*curr * prev.inverse())
    }

    /// Builds a label from frame-to-frame transforms starting at `start`.
    pub fn from_relative(
        id: LabelId,
        start: usize,
        relative: &[Pose],
        support: BTreeSet<TrackId>,
    ) -> Self {
        let mut poses = Vec::with_capacity(relative.len() + 1);
        poses.push(Pose::identity());
        for (i, step) in relative.iter().enumerate() {
            let mut next = *step * poses[i];
            if (i + 1) % crate::se3::RENORMALIZE_EVERY == 0 {
                next = next.renormalized();
            }
            poses.push(next);
        }
        Self {
            id,
            start,
            poses,
            support,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Segmentation {
    pub labels: BTreeMap<LabelId, MotionLabel>,
    pub outliers: BTreeSet<TrackId>,
    pub energy: f64,
    /// Next unused label id.
    pub next_label_id: LabelId,
}

impl Segmentation {
    /// Every tracklet of `set` starts out as an outlier.
    pub fn all_outliers(set: &TrackletSet) -> Self {
        Self {
            outliers: set.ids().collect(),
            ..Self::default()
        }
    }

    pub fn allocate_id(&mut self) -> LabelId {
        let id = self.next_label_id;
        self.next_label_id += 1;
        id
    }

    pub fn label_of(&self, track: TrackId) -> Option<LabelId> {
        self.labels
            .values()
            .find(|l| l.support.contains(&track))
            .map(|l| l.id)
    }

    /// Label per tracklet, `None` for outliers.
    pub fn labeling(&self) -> BTreeMap<TrackId, Option<LabelId>> {
        let mut out: BTreeMap<TrackId, Option<LabelId>> =
            self.outliers.iter().map(|t| (*t, None)).collect();
        for l in self.labels.values() {
            for t in &l.support {
                out.insert(*t, Some(l.id));
            }
        }
        out
    }

    /// Checks that supports and outliers partition exactly `ids`.
    pub fn check_partition(&self, ids: &BTreeSet<TrackId>) -> Result<()> {
        let mut seen = BTreeSet::new();
        for t in self.labels.values().flat_map(|l| l.support.iter()).chain(&self.outliers) {
            if !seen.insert(*t) {
                return Err(MvoError::InvalidInput(format!("track {t} assigned twice")));
            }
        }
        if &seen != ids {
            return Err(MvoError::InvalidInput("segmentation does not cover the window".into()));
        }
        Ok(())
    }

    /// Restricts to the tracklets of `set`; unseen tracklets become outliers.
    pub fn restricted_to(&self, set: &TrackletSet) -> Segmentation {
        let ids: BTreeSet<TrackId> = set.ids().collect();
        let mut seg = self.clone();
        for l in seg.labels.values_mut() {
            l.support.retain(|t| ids.contains(t));
        }
        let assigned: BTreeSet<TrackId> = seg
            .labels
            .values()
            .flat_map(|l| l.support.iter().copied())
            .collect();
        seg.outliers = ids.difference(&assigned).copied().collect();
        seg
    }

    /// Writes `track_id,label_id` rows; outliers get label `-1`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["track_id", "label_id"])?;
        for (t, l) in self.labeling() {
            let label = l.map_or(-1, i64::from);
            wtr.write_record(&[t.to_string(), label.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Derives an independent seed for a sub-stream.
pub fn stream_seed(base: u64, parts: &[u64]) -> u64 {
    // splitmix64 folding
    let mut z = base ^ 0x9E37_79B9_7F4A_7C15;
    for p in parts {
        z = z.wrapping_add(p.wrapping_mul(0xBF58_476D_1CE4_E5B9)).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// A label hypothesis estimated from one connected group of tracklets.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub start: usize,
    pub relative: Vec<Pose>,
    pub inliers: BTreeSet<TrackId>,
    pub outliers: BTreeSet<TrackId>,
}

/// Chains per-frame-pair RANSAC over `members` across `[first, last]`.
///
/// The trajectory covers the longest run of consecutive frame pairs where
/// RANSAC succeeded; members rejected in any of those pairs, or never seen in
/// two consecutive frames of the run, are outliers.
pub fn propose_from_members(
    set: &TrackletSet,
    members: &[TrackId],
    (first, last): (usize, usize),
    calib: &StereoCalib,
    cfg: &EnergyConfig,
    seed: u64,
) -> Option<Proposal> {
    if members.len() < 3 || last <= first {
        return None;
    }
    let tracks: Vec<&Tracklet> = members.iter().filter_map(|id| set.get(*id)).collect();
    let pairs: Vec<Option<RansacResult>> = (first + 1..=last)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, &[k as u64]));
            ransac_frame_pair(&tracks, k, calib, cfg.e_th, cfg.n_ransac, &mut rng).ok()
        })
        .collect();

    // longest run of successful pairs, earliest on ties
    let (mut best_start, mut best_len, mut run_start) = (0, 0, 0);
    for (i, p) in pairs.iter().enumerate() {
        if p.is_none() {
            run_start = i + 1;
            continue;
        }
        let len = i + 1 - run_start;
        if len > best_len {
            best_len = len;
            best_start = run_start;
        }
    }
    if best_len == 0 {
        return None;
    }
    let run = &pairs[best_start..best_start + best_len];
    let start = first + best_start;
    let mut inliers = BTreeSet::new();
    let mut outliers = BTreeSet::new();
    for t in &tracks {
        let mut evaluated = false;
        let mut ok = true;
        for (i, res) in run.iter().enumerate() {
            let k = start + i + 1;
            if t.get(k - 1).is_some() && t.get(k).is_some() {
                evaluated = true;
                if !res.as_ref().is_some_and(|r| r.inliers.contains(&t.id)) {
                    ok = false;
                    break;
                }
            }
        }
        if evaluated && ok {
            inliers.insert(t.id);
        } else {
            outliers.insert(t.id);
        }
    }
    Some(Proposal {
        start,
        relative: run.iter().map(|r| r.as_ref().unwrap().transform).collect(),
        inliers,
        outliers,
    })
}

/// Maximum number of rounds spent carving new labels out of the outliers.
const OUTLIER_PROPOSAL_ROUNDS: usize = 16;

/// Re-estimates every label per connected component of its support and
/// proposes new labels from the outlier set.
pub fn propose_labels(
    seg: &Segmentation,
    set: &TrackletSet,
    graph: &RigidityGraph,
    calib: &StereoCalib,
    cfg: &EnergyConfig,
    seed: u64,
) -> Segmentation {
    let Some(range) = set.frame_range() else {
        return seg.clone();
    };
    let mut out = Segmentation {
        labels: BTreeMap::new(),
        outliers: seg.outliers.clone(),
        energy: seg.energy,
        next_label_id: seg.next_label_id,
    };

    // split and re-estimate existing labels
    let jobs: Vec<(LabelId, Vec<Vec<TrackId>>)> = seg
        .labels
        .values()
        .map(|l| {
            let mut comps = graph.components(&l.support);
            comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
            (l.id, comps)
        })
        .collect();
    let proposals: Vec<Vec<(Vec<TrackId>, Option<Proposal>)>> = jobs
        .par_iter()
        .map(|(_, comps)| {
            comps
                .iter()
                .map(|c| {
                    let p = propose_from_members(set, c, range, calib, cfg, stream_seed(seed, &[0, c[0]]));
                    (c.clone(), p)
                })
                .collect()
        })
        .collect();
    for ((label_id, _), comps) in jobs.iter().zip(proposals) {
        let mut kept_original = false;
        for (members, proposal) in comps {
            match proposal {
                Some(p) if !p.inliers.is_empty() => {
                    let id = if kept_original {
                        out.allocate_id()
                    } else {
                        kept_original = true;
                        *label_id
                    };
                    out.outliers.extend(p.outliers.iter().copied());
                    out.labels
                        .insert(id, MotionLabel::from_relative(id, p.start, &p.relative, p.inliers));
                }
                _ => out.outliers.extend(members),
            }
        }
    }

    // carve new labels out of outliers not explained by any existing label
    let explained: BTreeSet<TrackId> = if out.labels.is_empty() {
        BTreeSet::new()
    } else {
        out.outliers
            .par_iter()
            .filter(|t| {
                let track = set.get(**t).unwrap();
                out.labels
                    .values()
                    .any(|l| label_residual(track, l, calib) <= cfg.e_th)
            })
            .copied()
            .collect()
    };
    let mut pool: BTreeSet<TrackId> = out.outliers.difference(&explained).copied().collect();
    for round in 0..OUTLIER_PROPOSAL_ROUNDS {
        let comps: Vec<Vec<TrackId>> = graph
            .components(&pool)
            .into_iter()
            .filter(|c| c.len() >= 3)
            .collect();
        if comps.is_empty() {
            break;
        }
        let found: Vec<(Vec<TrackId>, Option<Proposal>)> = comps
            .par_iter()
            .map(|c| {
                let s = stream_seed(seed, &[1 + round as u64, c[0]]);
                (c.clone(), propose_from_members(set, c, range, calib, cfg, s))
            })
            .collect();
        let mut progress = false;
        for (members, proposal) in found {
            match proposal {
                Some(p) if p.inliers.len() >= 3 => {
                    progress = true;
                    let id = out.allocate_id();
                    for t in &p.inliers {
                        out.outliers.remove(t);
                        pool.remove(t);
                    }
                    out.labels
                        .insert(id, MotionLabel::from_relative(id, p.start, &p.relative, p.inliers));
                }
                _ => {
                    // nothing usable in this component
                    for t in members {
                        pool.remove(&t);
                    }
                }
            }
        }
        if !progress {
            break;
        }
    }
    out
}

/// Propose, assign and merge until the labeling stops changing or `n_conv`
/// iterations have run, then sanitize.
pub fn segment_window(
    set: &TrackletSet,
    graph: &RigidityGraph,
    prior: &Segmentation,
    calib: &StereoCalib,
    cfg: &EnergyConfig,
    seed: u64,
) -> Segmentation {
    let ids: BTreeSet<TrackId> = set.ids().collect();
    let mut seg = prior.restricted_to(set);
    for iteration in 0..cfg.n_conv {
        let before = seg.labeling();
        let proposed = propose_labels(&seg, set, graph, calib, cfg, stream_seed(seed, &[iteration as u64]));
        debug_assert!(proposed.check_partition(&ids).is_ok());
        let table = ResidualTable::compute(set, &proposed, calib);
        let assigned = assign_labels(&proposed, &table, graph, cfg);
        seg = merge_labels(&assigned, &table, graph, cfg);
        debug_assert!(seg.check_partition(&ids).is_ok());
        log::debug!(
            "segmentation iteration {iteration}: {} labels, {} outliers, energy {:.3}",
            seg.labels.len(),
            seg.outliers.len(),
            seg.energy
        );
        if seg.labeling() == before {
            break;
        }
    }
    let table = ResidualTable::compute(set, &seg, calib);
    let mut seg = sanitize(&seg, &table, cfg);
    seg.energy = total_energy(&seg, &table, graph, cfg);
    seg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_table() {
        let c = EnergyConfig::default();
        assert_eq!(
            (c.window, c.k, c.e_th, c.n_ransac, c.alpha, c.beta),
            (8, 4, 4.0, 100, 100.0, 5.0)
        );
        assert_eq!((c.lambda_sm, c.mu, c.n_th, c.k_th, c.n_conv), (0.5, 1000.0, 20, 3, 3));
        assert_eq!((c.eps_mc, c.lambda_mc), (3.0, 0.25));
        c.validate().unwrap();
    }

    #[test]
    fn config_validation() {
        let c = EnergyConfig { n_th: 2, ..Default::default() };
        assert!(c.validate().is_err());
        let c = EnergyConfig { k_th: 1, ..Default::default() };
        assert!(c.validate().is_err());
        let c = EnergyConfig { alpha: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn stream_seeds_differ() {
        assert_ne!(stream_seed(1, &[2, 3]), stream_seed(1, &[3, 2]));
        assert_eq!(stream_seed(1, &[2, 3]), stream_seed(1, &[2, 3]));
    }
}
