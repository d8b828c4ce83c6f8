use thiserror::Error;

#[derive(Debug, Error)]
pub enum MvoError {
    #[error("logarithm undefined on the principal branch (rotation angle {angle} rad)")]
    LogBranch { angle: f64 },

    #[error("matrix is not a valid SE(3) transform: {0}")]
    InvalidPose(String),

    #[error("point at depth {z} m is behind the camera cutoff {z_min} m")]
    BehindCamera { z: f64, z_min: f64 },

    #[error("invalid disparity {d} px")]
    InvalidDisparity { d: f64 },

    #[error("invalid stereo calibration: {0}")]
    InvalidCalibration(String),

    #[error("label proposal failed: {0}")]
    ProposalFailure(String),

    #[error("degenerate point sample")]
    DegenerateSample,

    #[error("normal equations are rank deficient")]
    RankDeficient,

    #[error("segmentation has no labels")]
    EmptyLabelSet,

    #[error("frame range mismatch: {0}")]
    FrameRangeMismatch(String),

    #[error("trajectories do not overlap")]
    NoOverlap,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = MvoError> = std::result::Result<T, E>;
