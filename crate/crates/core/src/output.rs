//! Result files of a pipeline run.
//!
//! Trajectories are written as `label_id,frame,t,T00..T33`, followed by
//! `vx,vy,vz,wx,wy,wz` for flavors carrying a velocity and
//! `dvx,dvy,dvz,dwx,dwy,dwz` for those carrying an acceleration. Motion poses
//! are `T_{l_k C_1}` with `C_1` the first camera frame of the run; the
//! egomotion rows hold the camera poses `T_{C_k C_1}`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{MvoError, Result};
use crate::estimation::Flavor;
use crate::eval::Trajectory;
use crate::io::{matrix_fields, matrix_header, parse_i64, parse_pose_row};
use crate::sliding::{MotionId, RunOutput, TrackSample, WindowResult};
use crate::tracklet::TrackId;
use crate::Twist;

const VELOCITY_COLUMNS: [&str; 6] = ["vx", "vy", "vz", "wx", "wy", "wz"];
const ACCELERATION_COLUMNS: [&str; 6] = ["dvx", "dvy", "dvz", "dwx", "dwy", "dwz"];

fn twist_fields(t: &Twist) -> impl Iterator<Item = String> + '_ {
    t.iter().map(|x| x.to_string())
}

fn trajectory_header(flavor: Flavor) -> Vec<String> {
    let mut h: Vec<String> = ["label_id", "frame", "t"].iter().map(|s| s.to_string()).collect();
    h.extend(matrix_header());
    if flavor.order() >= 1 {
        h.extend(VELOCITY_COLUMNS.iter().map(|s| s.to_string()));
    }
    if flavor.order() >= 2 {
        h.extend(ACCELERATION_COLUMNS.iter().map(|s| s.to_string()));
    }
    h
}

fn write_samples<'a, W: Write>(
    rows: impl Iterator<Item = (MotionId, usize, &'a TrackSample)>,
    flavor: Flavor,
    dt: f64,
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(trajectory_header(flavor))?;
    for (id, frame, s) in rows {
        let mut rec = vec![id.to_string(), frame.to_string(), (frame as f64 * dt).to_string()];
        rec.extend(matrix_fields(&s.state.pose));
        if flavor.order() >= 1 {
            rec.extend(twist_fields(&s.state.velocity));
        }
        if flavor.order() >= 2 {
            rec.extend(twist_fields(&s.state.acceleration));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Final trajectory of every motion, dropped ones included.
pub fn write_trajectories<W: Write>(out: &RunOutput, writer: W) -> Result<()> {
    let rows = out.tracks.values().flat_map(|t| {
        t.samples
            .iter()
            .enumerate()
            .map(move |(i, s)| (t.id, t.first_frame + i, s))
    });
    write_samples(rows, out.flavor, out.dt, writer)
}

/// Trajectories as they stood right after `window` was processed.
pub fn write_window_trajectories<W: Write>(out: &RunOutput, window: &WindowResult, writer: W) -> Result<()> {
    let rows = window
        .trajectories
        .iter()
        .flat_map(|(id, samples)| samples.iter().map(move |(k, s)| (*id, *k, s)));
    write_samples(rows, out.flavor, out.dt, writer)
}

/// `track_id,frame,status`, where `track_id` is the motion id.
pub fn write_track_status<W: Write>(out: &RunOutput, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["track_id", "frame", "status"])?;
    for t in out.tracks.values() {
        for (i, s) in t.samples.iter().enumerate() {
            w.write_record([t.id.to_string(), (t.first_frame + i).to_string(), s.status.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `track_id,label_id` from the last window that saw each tracklet.
pub fn write_final_segmentation<W: Write>(out: &RunOutput, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["track_id", "label_id"])?;
    for (t, l) in out.final_labeling() {
        w.write_record([t.to_string(), l.map_or(-1, i64::from).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per motion closure.
pub fn write_closures<W: Write>(out: &RunOutput, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ["motion_id", "label_id", "frame", "metric", "occluded_from", "occluded_to"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(["cx", "cy", "cz"].iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for c in &out.closures {
        let span = |f: Option<&usize>| f.map_or(String::new(), |k| k.to_string());
        let mut rec = vec![
            c.motion.to_string(),
            c.label.to_string(),
            c.frame.to_string(),
            c.metric.to_string(),
            span(c.occluded.first()),
            span(c.occluded.last()),
        ];
        rec.extend(c.correction.translation().iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a trajectories file back into one trajectory per label. Velocity
/// and acceleration columns are ignored.
pub fn read_trajectories<R: Read>(reader: R) -> Result<BTreeMap<i64, Trajectory>> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.clone();
    if header.get(2) != Some("t") {
        return Err(MvoError::InvalidInput("trajectory file must start with label_id,frame,t".into()));
    }
    let mut out: BTreeMap<i64, Trajectory> = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        // drop the time column so the row reads as id,frame,T00..T33
        let trimmed: csv::StringRecord = rec.iter().enumerate().filter(|(i, _)| *i != 2).map(|(_, f)| f).collect();
        let (id, frame, pose) = parse_pose_row(&trimmed)?;
        out.entry(id).or_default().insert(frame, pose);
    }
    Ok(out)
}

/// Reads `track_id,label_id` rows; `-1` marks an outlier.
pub fn read_labeling<R: Read>(reader: R) -> Result<BTreeMap<TrackId, i64>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut out = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let t = parse_i64(&rec, 0)?;
        let t = TrackId::try_from(t).map_err(|_| MvoError::InvalidInput(format!("bad track id {t}")))?;
        out.insert(t, parse_i64(&rec, 1)?);
    }
    Ok(out)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Writes every result file under `dir` and returns their paths relative to
/// it, in a fixed order.
pub fn write_all(out: &RunOutput, dir: &Path, per_window: bool) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let mut emit = |name: PathBuf, f: &dyn Fn(&mut BufWriter<File>) -> Result<()>| -> Result<()> {
        let mut w = create(&dir.join(&name))?;
        f(&mut w)?;
        w.flush()?;
        files.push(name);
        Ok(())
    };
    emit("trajectories.csv".into(), &|w| write_trajectories(out, w))?;
    emit("segmentation.csv".into(), &|w| write_final_segmentation(out, w))?;
    emit("track_status.csv".into(), &|w| write_track_status(out, w))?;
    emit("closures.csv".into(), &|w| write_closures(out, w))?;
    if per_window {
        for win in &out.windows {
            let stem = format!("windows/{:06}", win.end);
            emit(format!("{stem}_trajectories.csv").into(), &|w| write_window_trajectories(out, win, w))?;
            emit(format!("{stem}_segmentation.csv").into(), &|w| win.segmentation.write_csv(w))?;
        }
    }
    Ok(files)
}
