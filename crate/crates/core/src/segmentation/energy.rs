//! Residual, smoothness and complexity terms and the moves that lower them.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::tracklet::{RigidityGraph, TrackId, Tracklet, TrackletSet};
use crate::StereoCalib;

use super::ransac::{capped, reprojection_residual};
use super::{EnergyConfig, LabelId, MotionLabel, Segmentation, RESIDUAL_CAP};

/// Worst frame-to-frame reprojection residual of `track` under `label`,
/// over the frame pairs both cover. [`RESIDUAL_CAP`] without overlap.
pub fn label_residual(track: &Tracklet, label: &MotionLabel, calib: &StereoCalib) -> f64 {
    let mut worst: Option<f64> = None;
    for k in track.frames() {
        if k == 0 || track.get(k - 1).is_none() {
            continue;
        }
        let Some(rel) = label.relative(k) else { continue };
        let r = capped(reprojection_residual(track, &rel, k, calib));
        worst = Some(worst.map_or(r, |w: f64| w.max(r)));
    }
    worst.unwrap_or(RESIDUAL_CAP)
}

/// Cost of calling a tracklet an outlier given its best label residual.
pub fn outlier_residual(rho_min: f64, cfg: &EnergyConfig) -> f64 {
    cfg.alpha * (-rho_min / cfg.beta).exp()
}

/// Residual of every tracklet of a window under every label.
#[derive(Debug, Clone, Default)]
pub struct ResidualTable {
    tracks: Vec<TrackId>,
    index: BTreeMap<TrackId, usize>,
    rho: BTreeMap<LabelId, Vec<f64>>,
}

impl ResidualTable {
    pub fn compute(set: &TrackletSet, seg: &Segmentation, calib: &StereoCalib) -> Self {
        let tracks: Vec<&Tracklet> = set.iter().collect();
        let labels: Vec<&MotionLabel> = seg.labels.values().collect();
        let rows: Vec<Vec<f64>> = labels
            .par_iter()
            .map(|l| tracks.iter().map(|t| label_residual(t, l, calib)).collect())
            .collect();
        Self {
            tracks: tracks.iter().map(|t| t.id).collect(),
            index: tracks.iter().enumerate().map(|(i, t)| (t.id, i)).collect(),
            rho: labels.iter().map(|l| l.id).zip(rows).collect(),
        }
    }

    pub fn tracks(&self) -> &[TrackId] {
        &self.tracks
    }

    pub fn residual(&self, track: TrackId, label: LabelId) -> f64 {
        match (self.index.get(&track), self.rho.get(&label)) {
            (Some(i), Some(row)) => row[*i],
            _ => RESIDUAL_CAP,
        }
    }

    /// Best residual over `labels`, or infinity if there are none.
    pub fn best_residual(&self, track: TrackId, labels: impl IntoIterator<Item = LabelId>) -> f64 {
        labels
            .into_iter()
            .map(|l| self.residual(track, l))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Potts smoothness `sum exp(-omega_ij) [l_i != l_j]` over graph edges, with
/// the outlier set counted as a label of its own.
pub fn smoothness_cost(seg: &Segmentation, graph: &RigidityGraph) -> f64 {
    let labeling = seg.labeling();
    graph
        .edges()
        .iter()
        .filter_map(|e| {
            let (a, b) = (labeling.get(&e.a)?, labeling.get(&e.b)?);
            (a != b).then(|| (-e.omega).exp())
        })
        .sum()
}

/// Index-based view used by assignment and merging.
struct Problem {
    n: usize,
    /// Label ids by slot.
    labels: Vec<LabelId>,
    /// `rho[slot][track]`
    rho: Vec<Vec<f64>>,
    edges: Vec<(usize, usize, f64)>,
    neighbors: Vec<Vec<(usize, f64)>>,
}

impl Problem {
    fn new(table: &ResidualTable, labels: Vec<LabelId>, graph: &RigidityGraph) -> Self {
        let n = table.tracks.len();
        let rho = labels
            .iter()
            .map(|l| {
                table
                    .rho
                    .get(l)
                    .cloned()
                    .unwrap_or_else(|| vec![RESIDUAL_CAP; n])
            })
            .collect();
        let edges: Vec<(usize, usize, f64)> = graph
            .edges()
            .iter()
            .filter_map(|e| {
                Some((*table.index.get(&e.a)?, *table.index.get(&e.b)?, (-e.omega).exp()))
            })
            .collect();
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b, w) in &edges {
            neighbors[a].push((b, w));
            neighbors[b].push((a, w));
        }
        Self {
            n,
            labels,
            rho,
            edges,
            neighbors,
        }
    }

    fn best_rho(&self, i: usize, active: &[bool]) -> f64 {
        (0..self.labels.len())
            .filter(|s| active[*s])
            .map(|s| self.rho[s][i])
            .fold(f64::INFINITY, f64::min)
    }

    /// Energy of an assignment (`None` = outlier) with `active` label slots.
    fn energy(&self, assign: &[Option<usize>], active: &[bool], cfg: &EnergyConfig) -> f64 {
        let mut residual = 0.0;
        let mut used = vec![false; self.labels.len()];
        for (i, a) in assign.iter().enumerate() {
            match a {
                Some(s) => {
                    residual += self.rho[*s][i];
                    used[*s] = true;
                }
                None => residual += outlier_residual(self.best_rho(i, active), cfg),
            }
        }
        let smooth: f64 = self
            .edges
            .iter()
            .filter(|(a, b, _)| assign[*a] != assign[*b])
            .map(|(_, _, w)| w)
            .sum();
        let complexity = cfg.mu * used.iter().filter(|u| **u).count() as f64;
        residual + cfg.lambda_sm * smooth + complexity
    }
}

fn indexed_assignment(seg: &Segmentation, table: &ResidualTable, slots: &[LabelId]) -> Vec<Option<usize>> {
    let slot_of: BTreeMap<LabelId, usize> = slots.iter().enumerate().map(|(i, l)| (*l, i)).collect();
    let mut assign = vec![None; table.tracks.len()];
    for l in seg.labels.values() {
        for t in &l.support {
            if let Some(i) = table.index.get(t) {
                assign[*i] = slot_of.get(&l.id).copied();
            }
        }
    }
    assign
}

fn rebuild(
    seg: &Segmentation,
    table: &ResidualTable,
    slots: &[LabelId],
    assign: &[Option<usize>],
) -> Segmentation {
    let mut out = seg.clone();
    for l in out.labels.values_mut() {
        l.support.clear();
    }
    out.outliers.clear();
    for (i, a) in assign.iter().enumerate() {
        let t = table.tracks[i];
        match a {
            Some(s) => {
                out.labels.get_mut(&slots[*s]).unwrap().support.insert(t);
            }
            None => {
                out.outliers.insert(t);
            }
        }
    }
    out.labels.retain(|_, l| !l.support.is_empty());
    out
}

pub fn total_energy(
    seg: &Segmentation,
    table: &ResidualTable,
    graph: &RigidityGraph,
    cfg: &EnergyConfig,
) -> f64 {
    let slots: Vec<LabelId> = seg.labels.keys().copied().collect();
    let p = Problem::new(table, slots.clone(), graph);
    let assign = indexed_assignment(seg, table, &slots);
    p.energy(&assign, &vec![true; slots.len()], cfg)
}

fn softmax(costs: &[f64], tau: f64, out: &mut [f64]) {
    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for (o, c) in out.iter_mut().zip(costs) {
        *o = (-(c - min) / tau).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Relaxed label assignment by synchronous block-coordinate sweeps over soft
/// scores, followed by discretization. A tracklet whose strongest score does
/// not exceed 0.5 becomes an outlier.
pub fn assign_labels(
    seg: &Segmentation,
    table: &ResidualTable,
    graph: &RigidityGraph,
    cfg: &EnergyConfig,
) -> Segmentation {
    let slots: Vec<LabelId> = seg.labels.keys().copied().collect();
    let p = Problem::new(table, slots.clone(), graph);
    let m = slots.len() + 1;
    let outlier_slot = slots.len();
    let active = vec![true; slots.len()];
    let data: Vec<Vec<f64>> = (0..p.n)
        .map(|i| {
            let mut c: Vec<f64> = (0..slots.len()).map(|s| p.rho[s][i]).collect();
            c.push(outlier_residual(p.best_rho(i, &active), cfg));
            c
        })
        .collect();
    let mut scores: Vec<Vec<f64>> = data
        .iter()
        .map(|c| {
            let mut s = vec![0.0; m];
            softmax(c, cfg.tau, &mut s);
            s
        })
        .collect();
    for sweep in 0..cfg.max_sweeps {
        let next: Vec<Vec<f64>> = (0..p.n)
            .into_par_iter()
            .map(|i| {
                let mut c = data[i].clone();
                for &(j, w) in &p.neighbors[i] {
                    for (l, cl) in c.iter_mut().enumerate() {
                        *cl += cfg.lambda_sm * w * (1.0 - scores[j][l]);
                    }
                }
                let mut s = vec![0.0; m];
                softmax(&c, cfg.tau, &mut s);
                s
            })
            .collect();
        let change = next
            .iter()
            .zip(&scores)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        scores = next;
        if change < cfg.sweep_tol {
            log::trace!("assignment converged after {} sweeps", sweep + 1);
            break;
        }
    }
    let assign: Vec<Option<usize>> = scores
        .iter()
        .map(|s| {
            let mut best = 0;
            for l in 1..m {
                if s[l] > s[best] {
                    best = l;
                }
            }
            (best != outlier_slot && s[best] > 0.5).then_some(best)
        })
        .collect();
    let mut out = rebuild(seg, table, &slots, &assign);
    out.energy = total_energy(&out, table, graph, cfg);
    out
}

/// Greedily merges the label pair whose relabeling lowers the energy most,
/// until no merge lowers it. The outlier set never takes part.
pub fn merge_labels(
    seg: &Segmentation,
    table: &ResidualTable,
    graph: &RigidityGraph,
    cfg: &EnergyConfig,
) -> Segmentation {
    let slots: Vec<LabelId> = seg.labels.keys().copied().collect();
    let p = Problem::new(table, slots.clone(), graph);
    let mut assign = indexed_assignment(seg, table, &slots);
    let mut active = vec![true; slots.len()];
    let mut energy = p.energy(&assign, &active, cfg);
    loop {
        let pairs: Vec<(usize, usize)> = (0..slots.len())
            .filter(|a| active[*a])
            .flat_map(|a| {
                (0..slots.len())
                    .filter(move |b| *b != a)
                    .map(move |b| (a, b))
            })
            .filter(|(_, b)| active[*b])
            .collect();
        let best = pairs
            .par_iter()
            .map(|&(from, into)| {
                let trial: Vec<Option<usize>> = assign
                    .iter()
                    .map(|a| if *a == Some(from) { Some(into) } else { *a })
                    .collect();
                let mut act = active.clone();
                act[from] = false;
                (p.energy(&trial, &act, cfg), from, into)
            })
            .min_by(|x, y| x.0.total_cmp(&y.0).then((x.1, x.2).cmp(&(y.1, y.2))));
        match best {
            Some((e, from, into)) if e < energy => {
                log::trace!("merging label {} into {} ({energy:.3} -> {e:.3})", slots[from], slots[into]);
                for a in assign.iter_mut() {
                    if *a == Some(from) {
                        *a = Some(into);
                    }
                }
                active[from] = false;
                energy = e;
            }
            _ => break,
        }
    }
    let mut out = rebuild(seg, table, &slots, &assign);
    out.energy = energy;
    out
}

/// Moves poorly fitting tracklets to the outlier set and dissolves labels
/// that are too small or too short-lived.
pub fn sanitize(seg: &Segmentation, table: &ResidualTable, cfg: &EnergyConfig) -> Segmentation {
    let mut out = seg.clone();
    for l in out.labels.values_mut() {
        let bad: BTreeSet<TrackId> = l
            .support
            .iter()
            .filter(|t| table.residual(**t, l.id) > cfg.e_th)
            .copied()
            .collect();
        for t in bad {
            l.support.remove(&t);
            out.outliers.insert(t);
        }
    }
    let dissolved: Vec<LabelId> = out
        .labels
        .values()
        .filter(|l| l.support.len() < cfg.n_th || l.lifetime() < cfg.k_th)
        .map(|l| l.id)
        .collect();
    for id in dissolved {
        let l = out.labels.remove(&id).unwrap();
        out.outliers.extend(l.support);
    }
    out.labels.retain(|_, l| !l.support.is_empty());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::exp_map;
    use crate::tracklet::{Edge, Observation};
    use crate::Pose;
    use nalgebra::{Vector3, Vector6};

    fn calib() -> StereoCalib {
        StereoCalib::new(400.0, 400.0, 0.0, 0.0, 0.1).unwrap()
    }

    fn track_on(id: TrackId, p: Vector3<f64>, poses: &[Pose]) -> Tracklet {
        let mut t = Tracklet::new(id);
        for (k, pose) in poses.iter().enumerate() {
            let q = pose.transform_point(&p);
            t.insert(k, Observation { pixel: calib().project(&q).unwrap(), point: q }).unwrap();
        }
        t
    }

    fn chain(step: Vector6<f64>, n: usize) -> Vec<Pose> {
        (0..n).map(|k| exp_map(&(step * k as f64))).collect()
    }

    fn label(id: LabelId, poses: Vec<Pose>, support: impl IntoIterator<Item = TrackId>) -> MotionLabel {
        MotionLabel { id, start: 0, poses, support: support.into_iter().collect() }
    }

    #[test]
    fn residual_is_zero_for_generating_label() {
        let poses = chain(Vector6::new(0.05, 0.0, 0.02, 0.0, 0.01, 0.0), 8);
        let t = track_on(1, Vector3::new(0.2, -0.3, 5.0), &poses);
        assert!(label_residual(&t, &label(0, poses, []), &calib()) < 1e-9);
    }

    #[test]
    fn residual_is_the_worst_frame() {
        let poses = chain(Vector6::new(0.05, 0.0, 0.02, 0.0, 0.01, 0.0), 8);
        let mut t = Tracklet::new(1);
        for (k, pose) in poses.iter().enumerate() {
            let mut q = pose.transform_point(&Vector3::new(0.2, -0.3, 5.0));
            if k == 7 {
                q.x += 0.05;
            }
            t.insert(k, Observation { pixel: calib().project(&q).unwrap(), point: q }).unwrap();
        }
        let l = label(0, poses.clone(), []);
        let rel = l.relative(7).unwrap();
        let single = reprojection_residual(&t, &rel, 7, &calib());
        assert!(single > 1.0);
        assert_eq!(label_residual(&t, &l, &calib()), single);
    }

    #[test]
    fn residual_without_overlap_is_capped() {
        let poses = chain(Vector6::zeros(), 3);
        let t = track_on(1, Vector3::new(0.0, 0.0, 5.0), &poses);
        let l = MotionLabel { id: 0, start: 10, poses: poses.clone(), support: BTreeSet::new() };
        assert_eq!(label_residual(&t, &l, &calib()), RESIDUAL_CAP);
    }

    #[test]
    fn outlier_residual_values() {
        let cfg = EnergyConfig::default();
        assert_eq!(outlier_residual(0.0, &cfg), 100.0);
        assert!((outlier_residual(cfg.beta, &cfg) - 100.0 / std::f64::consts::E).abs() < 1e-12);
        assert_eq!(outlier_residual(f64::INFINITY, &cfg), 0.0);
    }

    fn two_labels() -> (Segmentation, RigidityGraph) {
        let mut seg = Segmentation::default();
        seg.labels.insert(0, label(0, vec![Pose::identity(); 3], [1, 2]));
        seg.labels.insert(1, label(1, vec![Pose::identity(); 3], [3]));
        let g = RigidityGraph::from_edges(
            [1, 2, 3],
            [Edge { a: 1, b: 2, omega: 0.0 }, Edge { a: 2, b: 3, omega: 0.0 }],
        );
        (seg, g)
    }

    #[test]
    fn smoothness_counts_disagreeing_edges() {
        let (mut seg, g) = two_labels();
        assert_eq!(smoothness_cost(&seg, &g), 1.0);
        let l1 = seg.labels.remove(&1).unwrap();
        seg.labels.get_mut(&0).unwrap().support.extend(l1.support);
        assert_eq!(smoothness_cost(&seg, &g), 0.0);
        let g2 = RigidityGraph::from_edges([1, 2, 3], [Edge { a: 2, b: 3, omega: 1.0 }]);
        let (seg, _) = two_labels();
        let small = smoothness_cost(&seg, &g2);
        assert!(small < 1.0 && (small - (-1.0f64).exp()).abs() < 1e-15);
    }

    /// Tracklets 0..25 follow `a`, tracklets 100..125 follow `b`.
    fn two_motion_set() -> (TrackletSet, Vec<Pose>, Vec<Pose>) {
        let a = chain(Vector6::new(0.05, 0.0, 0.0, 0.0, 0.0, 0.0), 6);
        let b = chain(Vector6::new(-0.3, 0.1, 0.0, -0.1, 0.0, 0.0), 6);
        let mut set = TrackletSet::new();
        for i in 0..25 {
            let p = Vector3::new(-1.0 + 0.08 * i as f64, 0.2 * (i % 3) as f64, 5.0 + 0.1 * i as f64);
            set.insert(track_on(i, p, &a));
            set.insert(track_on(100 + i, p + Vector3::new(0.1, 0.5, 1.0), &b));
        }
        (set, a, b)
    }

    #[test]
    fn assignment_recovers_generating_labels() {
        let (set, a, b) = two_motion_set();
        let mut seg = Segmentation::all_outliers(&set);
        seg.labels.insert(0, label(0, a, []));
        seg.labels.insert(1, label(1, b, []));
        let cfg = EnergyConfig::default();
        let table = ResidualTable::compute(&set, &seg, &calib());
        let g = RigidityGraph::from_edges(set.ids(), []);
        let out = assign_labels(&seg, &table, &g, &cfg);
        assert_eq!(out.labels[&0].support, (0..25).collect());
        assert_eq!(out.labels[&1].support, (100..125).collect());
        assert!(out.outliers.is_empty());
    }

    #[test]
    fn equal_residuals_without_neighbours_become_outliers() {
        let poses = chain(Vector6::zeros(), 3);
        let mut set = TrackletSet::new();
        set.insert(track_on(1, Vector3::new(0.0, 0.0, 5.0), &poses));
        let mut seg = Segmentation::all_outliers(&set);
        seg.labels.insert(0, label(0, poses.clone(), []));
        seg.labels.insert(1, label(1, poses, []));
        let table = ResidualTable::compute(&set, &seg, &calib());
        let out = assign_labels(&seg, &table, &RigidityGraph::from_edges([1], []), &EnergyConfig::default());
        assert!(out.outliers.contains(&1));
        assert!(out.labels.is_empty());
    }

    #[test]
    fn merging_removes_duplicates() {
        let (set, a, _) = two_motion_set();
        let ids: BTreeSet<TrackId> = (0..25).collect();
        let set = set.subset(&ids);
        let mut seg = Segmentation::default();
        seg.labels.insert(0, label(0, a.clone(), 0..12));
        seg.labels.insert(1, label(1, a, 12..25));
        let table = ResidualTable::compute(&set, &seg, &calib());
        let g = RigidityGraph::from_edges(set.ids(), []);
        let cfg = EnergyConfig::default();
        let before = total_energy(&seg, &table, &g, &cfg);
        let out = merge_labels(&seg, &table, &g, &cfg);
        assert_eq!(out.labels.len(), 1);
        assert!(out.energy <= before - cfg.mu + 1e-6);
    }

    #[test]
    fn distinct_motions_do_not_merge() {
        let (set, a, b) = two_motion_set();
        let mut seg = Segmentation::default();
        seg.labels.insert(0, label(0, a, 0..25));
        seg.labels.insert(1, label(1, b, 100..125));
        let table = ResidualTable::compute(&set, &seg, &calib());
        let g = RigidityGraph::from_edges(set.ids(), []);
        let cfg = EnergyConfig::default();
        // relabeling either support costs more residual than one label saves
        let cross_a: f64 = (0..25).map(|t| table.residual(t, 1)).sum();
        let cross_b: f64 = (100..125).map(|t| table.residual(t, 0)).sum();
        assert!(cross_a.min(cross_b) > cfg.mu);
        let out = merge_labels(&seg, &table, &g, &cfg);
        assert_eq!(out.labels.len(), 2);
        // a single label stays untouched
        let mut one = Segmentation::default();
        one.labels.insert(0, seg.labels[&0].clone());
        let table = ResidualTable::compute(&set.subset(&(0..25).collect::<Vec<TrackId>>()), &one, &calib());
        assert_eq!(merge_labels(&one, &table, &g, &cfg).labels, one.labels);
    }

    #[test]
    fn sanitize_thresholds() {
        let poses = chain(Vector6::zeros(), 3);
        let mut set = TrackletSet::new();
        for i in 0..20 {
            set.insert(track_on(i, Vector3::new(0.1 * i as f64, 0.0, 5.0), &poses));
        }
        let cfg = EnergyConfig::default();
        let mut seg = Segmentation::default();
        seg.labels.insert(0, label(0, poses.clone(), 0..19));
        seg.outliers.insert(19);
        let table = ResidualTable::compute(&set, &seg, &calib());
        let out = sanitize(&seg, &table, &cfg);
        assert!(out.labels.is_empty());
        assert_eq!(out.outliers.len(), 20);

        let mut seg = Segmentation::default();
        seg.labels.insert(0, label(0, poses[..2].to_vec(), 0..20));
        let table = ResidualTable::compute(&set, &seg, &calib());
        assert!(sanitize(&seg, &table, &cfg).labels.is_empty());

        let mut seg = Segmentation::default();
        seg.labels.insert(0, label(0, poses, 0..20));
        let table = ResidualTable::compute(&set, &seg, &calib());
        assert_eq!(sanitize(&seg, &table, &cfg), seg);
    }
}
