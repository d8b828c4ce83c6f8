//! CSV helpers shared by the output writers.

use csv::StringRecord;
use nalgebra::Matrix4;

use crate::error::{MvoError, Result};
use crate::Pose;

/// `T00..T33`, row-major.
pub fn matrix_header() -> Vec<String> {
    (0..4)
        .flat_map(|r| (0..4).map(move |c| format!("T{r}{c}")))
        .collect()
}

/// Row-major matrix entries. `{}` prints the shortest string that reads back
/// to the same `f64`, so files round-trip exactly.
pub fn matrix_fields(pose: &Pose) -> Vec<String> {
    let m = pose.to_matrix();
    (0..4)
        .flat_map(|r| (0..4).map(move |c| (r, c)))
        .map(|(r, c)| m[(r, c)].to_string())
        .collect()
}

pub fn parse_f64(rec: &StringRecord, i: usize) -> Result<f64> {
    rec.get(i)
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| MvoError::InvalidInput(format!("bad number in column {i} of {:?}", rec)))
}

pub fn parse_i64(rec: &StringRecord, i: usize) -> Result<i64> {
    rec.get(i)
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| MvoError::InvalidInput(format!("bad integer in column {i} of {:?}", rec)))
}

/// Reads `id,frame,T00..T33` starting at `offset` for the matrix.
pub fn parse_pose_at(rec: &StringRecord, offset: usize) -> Result<Pose> {
    let mut m = Matrix4::zeros();
    for i in 0..16 {
        m[(i / 4, i % 4)] = parse_f64(rec, offset + i)?;
    }
    Pose::from_matrix(&m)
}

/// `(id, frame, pose)` from an `id,frame,T00..T33` row.
pub fn parse_pose_row(rec: &StringRecord) -> Result<(i64, usize, Pose)> {
    let id = parse_i64(rec, 0)?;
    let frame = parse_i64(rec, 1)?;
    if frame < 0 {
        return Err(MvoError::InvalidInput(format!("negative frame in {rec:?}")));
    }
    Ok((id, frame as usize, parse_pose_at(rec, 2)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::exp_map;
    use crate::Twist;

    #[test]
    fn pose_fields_round_trip_exactly() {
        let pose = exp_map(&Twist::new(0.1, -2.0, 3.3, 0.4, -0.5, 0.6));
        let mut fields = vec!["3".to_string(), "7".to_string()];
        fields.extend(matrix_fields(&pose));
        let rec = StringRecord::from(fields);
        let (id, frame, back) = parse_pose_row(&rec).unwrap();
        assert_eq!((id, frame), (3, 7));
        assert_eq!(back.to_matrix(), pose.to_matrix());
        assert_eq!(matrix_header().len(), 16);
    }
}
