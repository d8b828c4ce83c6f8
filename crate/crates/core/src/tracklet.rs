//! Tracklet storage, windowed views and the rigidity graph.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MvoError, Result};
use crate::{StereoCalib, StereoObs};

pub type TrackId = u64;

/// Minimum number of co-observed frames before two tracklets get an edge.
pub const DEFAULT_OVERLAP_MIN: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub pixel: StereoObs,
    /// The observed point in the camera frame of the same time step.
    pub point: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub id: TrackId,
    observations: BTreeMap<usize, Observation>,
}

impl Tracklet {
    pub fn new(id: TrackId) -> Self {
        Self {
            id,
            observations: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, frame: usize, obs: Observation) -> Result<()> {
        if !obs.point.iter().all(|x| x.is_finite()) {
            return Err(MvoError::InvalidInput(format!(
                "track {} frame {frame}: non-finite point",
                self.id
            )));
        }
        if self.observations.insert(frame, obs).is_some() {
            return Err(MvoError::InvalidInput(format!(
                "track {} observed twice in frame {frame}",
                self.id
            )));
        }
        Ok(())
    }

    pub fn get(&self, frame: usize) -> Option<&Observation> {
        self.observations.get(&frame)
    }

    pub fn point(&self, frame: usize) -> Option<&Vector3<f64>> {
        self.observations.get(&frame).map(|o| &o.point)
    }

    pub fn observations(&self) -> impl Iterator<Item = (usize, &Observation)> + '_ {
        self.observations.iter().map(|(k, o)| (*k, o))
    }

    pub fn frames(&self) -> impl Iterator<Item = usize> + '_ {
        self.observations.keys().copied()
    }

    pub fn first_frame(&self) -> Option<usize> {
        self.observations.keys().next().copied()
    }

    pub fn last_frame(&self) -> Option<usize> {
        self.observations.keys().next_back().copied()
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Copy restricted to frames in `[start, end]`.
    pub fn window(&self, start: usize, end: usize) -> Tracklet {
        Tracklet {
            id: self.id,
            observations: self
                .observations
                .range(start..=end)
                .map(|(k, o)| (*k, *o))
                .collect(),
        }
    }
}

/// How the coordinate columns of a tracklet file are interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputFormat {
    /// `frame,track_id,u,v,d`
    #[default]
    Pixel,
    /// `frame,track_id,x,y,z`
    Xyz,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackletSet {
    tracks: BTreeMap<TrackId, Tracklet>,
}

impl TrackletSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, track: Tracklet) {
        self.tracks.insert(track.id, track);
    }

    pub fn get(&self, id: TrackId) -> Option<&Tracklet> {
        self.tracks.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tracklet> + '_ {
        self.tracks.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = TrackId> + '_ {
        self.tracks.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    /// Inclusive frame range covered by any observation.
    pub fn frame_range(&self) -> Option<(usize, usize)> {
        let first = self.tracks.values().filter_map(|t| t.first_frame()).min()?;
        let last = self.tracks.values().filter_map(|t| t.last_frame()).max()?;
        Some((first, last))
    }

    /// Tracklets restricted to `[start, end]`, keeping only those with at
    /// least `min_len` observations inside the window.
    pub fn window(&self, start: usize, end: usize, min_len: usize) -> TrackletSet {
        TrackletSet {
            tracks: self
                .tracks
                .values()
                .map(|t| t.window(start, end))
                .filter(|t| t.len() >= min_len.max(1))
                .map(|t| (t.id, t))
                .collect(),
        }
    }

    /// Subset with the given ids.
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a TrackId>) -> TrackletSet {
        TrackletSet {
            tracks: ids
                .into_iter()
                .filter_map(|id| self.tracks.get(id).map(|t| (*id, t.clone())))
                .collect(),
        }
    }

    /// Builds a set from `(frame, track_id, a, b, c)` rows.
    pub fn from_rows(
        rows: impl IntoIterator<Item = (usize, TrackId, [f64; 3])>,
        format: InputFormat,
        calib: &StereoCalib,
    ) -> Result<Self> {
        let mut set = TrackletSet::new();
        for (frame, id, values) in rows {
            let [a, b, c] = values;
            let obs = match format {
                InputFormat::Pixel => {
                    let pixel = StereoObs::new(a, b, c);
                    Observation {
                        pixel,
                        point: calib.unproject(&pixel)?,
                    }
                }
                InputFormat::Xyz => {
                    let point = Vector3::new(a, b, c);
                    Observation {
                        pixel: calib.project(&point)?,
                        point,
                    }
                }
            };
            set.tracks
                .entry(id)
                .or_insert_with(|| Tracklet::new(id))
                .insert(frame, obs)?;
        }
        Ok(set)
    }

    pub fn read_csv<R: Read>(reader: R, format: InputFormat, calib: &StereoCalib) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut rows = Vec::new();
        for record in rdr.records() {
            let record = record?;
            if record.len() != 5 {
                return Err(MvoError::InvalidInput(format!(
                    "expected 5 columns, found {} at line {}",
                    record.len(),
                    record.position().map_or(0, |p| p.line())
                )));
            }
            let parse_err = |what: &str| {
                MvoError::InvalidInput(format!(
                    "bad {what} at line {}",
                    record.position().map_or(0, |p| p.line())
                ))
            };
            let frame: usize = record[0].parse().map_err(|_| parse_err("frame"))?;
            let id: TrackId = record[1].parse().map_err(|_| parse_err("track_id"))?;
            let mut values = [0.0; 3];
            for (i, v) in values.iter_mut().enumerate() {
                *v = record[i + 2].parse().map_err(|_| parse_err("coordinate"))?;
            }
            rows.push((frame, id, values));
        }
        Self::from_rows(rows, format, calib)
    }

    pub fn read_csv_path(path: &Path, format: InputFormat, calib: &StereoCalib) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?, format, calib)
    }

    /// Writes `frame,track_id,u,v,d` rows ordered by frame then track.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut rows: Vec<(usize, TrackId, &Observation)> = self
            .tracks
            .values()
            .flat_map(|t| t.observations().map(move |(k, o)| (k, t.id, o)))
            .collect();
        rows.sort_by_key(|(k, id, _)| (*k, *id));
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["frame", "track_id", "u", "v", "d"])?;
        for (k, id, o) in rows {
            wtr.write_record(&[
                k.to_string(),
                id.to_string(),
                o.pixel.u.to_string(),
                o.pixel.v.to_string(),
                o.pixel.d.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Population variance of the inter-point distance over co-observed frames,
/// or `None` with fewer than `overlap_min` shared frames.
pub fn edge_cost(ti: &Tracklet, tj: &Tracklet, overlap_min: usize) -> Option<f64> {
    // iterate the shorter tracklet so that the cost is symmetric bit for bit
    let (a, b) = if (ti.len(), ti.id) <= (tj.len(), tj.id) {
        (ti, tj)
    } else {
        (tj, ti)
    };
    let distances: Vec<f64> = a
        .observations()
        .filter_map(|(k, oa)| b.point(k).map(|pb| (oa.point - pb).norm()))
        .collect();
    if distances.len() < overlap_min.max(1) {
        return None;
    }
    let n = distances.len() as f64;
    let mean = distances.iter().sum::<f64>() / n;
    Some(distances.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub a: TrackId,
    pub b: TrackId,
    pub omega: f64,
}

/// Undirected k-nearest-neighbour graph over tracklets weighted by distance
/// variance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RigidityGraph {
    vertices: Vec<TrackId>,
    /// Edges with `a < b`, sorted.
    edges: Vec<Edge>,
    adjacency: BTreeMap<TrackId, Vec<(TrackId, f64)>>,
}

impl RigidityGraph {
    pub fn build(set: &TrackletSet, k: usize, overlap_min: usize) -> Self {
        let tracks: Vec<&Tracklet> = set.iter().collect();
        let selected: Vec<Vec<(TrackId, f64)>> = tracks
            .par_iter()
            .map(|ti| {
                let mut candidates: Vec<(f64, TrackId)> = tracks
                    .iter()
                    .filter(|tj| tj.id != ti.id)
                    .filter_map(|tj| edge_cost(ti, tj, overlap_min).map(|w| (w, tj.id)))
                    .collect();
                candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
                candidates.truncate(k);
                candidates.into_iter().map(|(w, id)| (id, w)).collect()
            })
            .collect();
        let mut unique: BTreeMap<(TrackId, TrackId), f64> = BTreeMap::new();
        for (ti, picks) in tracks.iter().zip(&selected) {
            for &(tj, w) in picks {
                unique.insert((ti.id.min(tj), ti.id.max(tj)), w);
            }
        }
        Self::from_edges(
            tracks.iter().map(|t| t.id),
            unique.into_iter().map(|((a, b), omega)| Edge { a, b, omega }),
        )
    }

    pub fn from_edges(
        vertices: impl IntoIterator<Item = TrackId>,
        edges: impl IntoIterator<Item = Edge>,
    ) -> Self {
        let vertices: BTreeSet<TrackId> = vertices.into_iter().collect();
        let mut adjacency: BTreeMap<TrackId, Vec<(TrackId, f64)>> =
            vertices.iter().map(|v| (*v, Vec::new())).collect();
        let mut unique: BTreeMap<(TrackId, TrackId), f64> = BTreeMap::new();
        for e in edges {
            if e.a != e.b {
                unique.insert((e.a.min(e.b), e.a.max(e.b)), e.omega);
            }
        }
        let edges: Vec<Edge> = unique
            .into_iter()
            .map(|((a, b), omega)| Edge { a, b, omega })
            .collect();
        for e in &edges {
            adjacency.entry(e.a).or_default().push((e.b, e.omega));
            adjacency.entry(e.b).or_default().push((e.a, e.omega));
        }
        Self {
            vertices: adjacency.keys().copied().collect(),
            edges,
            adjacency,
        }
    }

    pub fn vertices(&self) -> &[TrackId] {
        &self.vertices
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn neighbors(&self, id: TrackId) -> &[(TrackId, f64)] {
        self.adjacency.get(&id).map_or(&[], |v| v.as_slice())
    }

    pub fn degree(&self, id: TrackId) -> usize {
        self.neighbors(id).len()
    }

    /// Connected components of the subgraph induced by `members`, each sorted,
    /// ordered by their smallest id.
    pub fn components(&self, members: &BTreeSet<TrackId>) -> Vec<Vec<TrackId>> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for &start in members {
            if !seen.insert(start) {
                continue;
            }
            let mut component = vec![start];
            let mut stack = vec![start];
            while let Some(v) = stack.pop() {
                for &(n, _) in self.neighbors(v) {
                    if members.contains(&n) && seen.insert(n) {
                        component.push(n);
                        stack.push(n);
                    }
                }
            }
            component.sort_unstable();
            out.push(component);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::exp_map;
    use crate::Pose;
    use nalgebra::Vector6;
    use proptest::prelude::*;

    fn calib() -> StereoCalib {
        StereoCalib::new(400.0, 400.0, 0.0, 0.0, 0.1).unwrap()
    }

    fn track_from_points(id: TrackId, points: &[Vector3<f64>]) -> Tracklet {
        let mut t = Tracklet::new(id);
        for (k, p) in points.iter().enumerate() {
            t.insert(
                k,
                Observation {
                    pixel: calib().project(p).unwrap(),
                    point: *p,
                },
            )
            .unwrap();
        }
        t
    }

    fn rigid_track(id: TrackId, p: Vector3<f64>, poses: &[Pose]) -> Tracklet {
        let pts: Vec<_> = poses.iter().map(|t| t.transform_point(&p)).collect();
        track_from_points(id, &pts)
    }

    fn some_poses(n: usize) -> Vec<Pose> {
        (0..n)
            .map(|k| exp_map(&(Vector6::new(0.1, -0.05, 0.2, 0.02, 0.03, -0.01) * k as f64)))
            .collect()
    }

    #[test]
    fn static_points_have_zero_cost() {
        let a = track_from_points(1, &[Vector3::new(0.0, 0.0, 5.0); 4]);
        let b = track_from_points(2, &[Vector3::new(1.0, 0.0, 5.0); 4]);
        assert_eq!(edge_cost(&a, &b, 3), Some(0.0));
    }

    #[test]
    fn rigid_motion_has_zero_cost() {
        let poses = some_poses(10);
        let a = rigid_track(1, Vector3::new(0.3, 0.1, 4.0), &poses);
        let b = rigid_track(2, Vector3::new(-1.0, 0.5, 6.0), &poses);
        assert!(edge_cost(&a, &b, 3).unwrap() < 1e-24);
    }

    #[test]
    fn cost_is_distance_variance() {
        let a = track_from_points(1, &[Vector3::new(0.0, 0.0, 5.0); 3]);
        let b = track_from_points(
            2,
            &[
                Vector3::new(1.0, 0.0, 5.0),
                Vector3::new(2.0, 0.0, 5.0),
                Vector3::new(3.0, 0.0, 5.0),
            ],
        );
        let w = edge_cost(&a, &b, 3).unwrap();
        assert!((w - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(edge_cost(&a, &b, 4), None);
    }

    #[test]
    fn knn_separates_rigid_clusters() {
        let poses_a = some_poses(6);
        let poses_b: Vec<Pose> = (0..6)
            .map(|k| exp_map(&(Vector6::new(-0.3, 0.0, 0.1, 0.0, -0.1, 0.05) * k as f64)))
            .collect();
        let mut set = TrackletSet::new();
        for i in 0..5 {
            let p = Vector3::new(0.2 * i as f64, 0.1, 5.0);
            set.insert(rigid_track(i, p, &poses_a));
            set.insert(rigid_track(100 + i, p + Vector3::new(0.0, 1.0, 0.0), &poses_b));
        }
        let g = RigidityGraph::build(&set, 1, 3);
        for e in g.edges() {
            assert_eq!(e.a < 100, e.b < 100, "cross-cluster edge {e:?}");
        }
        let comps = g.components(&set.ids().collect());
        assert!(comps.iter().all(|c| c.iter().all(|id| (*id < 100) == (c[0] < 100))));
    }

    #[test]
    fn saturated_k_gives_complete_graph() {
        let poses = some_poses(4);
        let mut set = TrackletSet::new();
        for i in 0..6 {
            set.insert(rigid_track(i, Vector3::new(i as f64, 0.0, 8.0), &poses));
        }
        let g = RigidityGraph::build(&set, 5, 3);
        assert_eq!(g.edges().len(), 15);
        let g = RigidityGraph::build(&set, 100, 3);
        assert_eq!(g.edges().len(), 15);
    }

    #[test]
    fn knn_ties_prefer_lower_ids() {
        let mut set = TrackletSet::new();
        for i in 0..5 {
            set.insert(track_from_points(i, &[Vector3::new(i as f64, 0.0, 5.0); 3]));
        }
        // every cost is zero, so vertex 4 with k=1 picks vertex 0
        let g = RigidityGraph::build(&set, 1, 3);
        assert!(g.neighbors(4).iter().any(|(n, _)| *n == 0));
        assert!(g.edges().iter().all(|e| e.a == 0));
    }

    #[test]
    fn csv_round_trip() {
        let poses = some_poses(3);
        let mut set = TrackletSet::new();
        set.insert(rigid_track(7, Vector3::new(0.5, 0.2, 3.0), &poses));
        set.insert(rigid_track(3, Vector3::new(-0.5, 0.2, 4.0), &poses));
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        let back = TrackletSet::read_csv(buf.as_slice(), InputFormat::Pixel, &calib()).unwrap();
        assert_eq!(back.len(), 2);
        for t in set.iter() {
            let b = back.get(t.id).unwrap();
            for (k, o) in t.observations() {
                assert!((b.point(k).unwrap() - o.point).amax() < 1e-9);
            }
        }
        let xyz = "frame,track_id,x,y,z\n0,1,0,0,2\n1,1,0,0,2.5\n";
        let set = TrackletSet::read_csv(xyz.as_bytes(), InputFormat::Xyz, &calib()).unwrap();
        assert_eq!(set.get(1).unwrap().get(0).unwrap().pixel.d, 20.0);
        assert!(TrackletSet::read_csv("frame,track_id,u\n0,1,2\n".as_bytes(), InputFormat::Pixel, &calib()).is_err());
    }

    #[test]
    fn window_restricts_frames() {
        let poses = some_poses(8);
        let mut set = TrackletSet::new();
        set.insert(rigid_track(1, Vector3::new(0.5, 0.2, 3.0), &poses));
        set.insert(rigid_track(2, Vector3::new(0.5, 0.2, 3.0), &poses[..2]));
        let w = set.window(3, 5, 2);
        assert_eq!(w.len(), 1);
        assert_eq!(w.get(1).unwrap().frames().collect::<Vec<_>>(), vec![3, 4, 5]);
        assert_eq!(set.frame_range(), Some((0, 7)));
    }

    proptest! {
        #[test]
        fn edge_cost_is_symmetric_and_rigid_invariant(
            seed in 0u64..1000,
            xi in proptest::array::uniform6(-1.0f64..1.0),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut pts = |n: usize| -> Vec<Vector3<f64>> {
                (0..n).map(|_| Vector3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(3.0..10.0),
                )).collect()
            };
            let a = track_from_points(1, &pts(6));
            let b = track_from_points(2, &pts(6));
            let w = edge_cost(&a, &b, 3).unwrap();
            prop_assert_eq!(w, edge_cost(&b, &a, 3).unwrap());
            let g = exp_map(&Vector6::from_row_slice(&xi));
            let moved = |t: &Tracklet| {
                let mut out = Tracklet::new(t.id);
                for (k, o) in t.observations() {
                    out.insert(k, Observation { pixel: o.pixel, point: g.transform_point(&o.point) }).unwrap();
                }
                out
            };
            let w2 = edge_cost(&moved(&a), &moved(&b), 3).unwrap();
            prop_assert!((w - w2).abs() < 1e-9);
        }
    }
}
