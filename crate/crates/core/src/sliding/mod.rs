//! Online operation over short windows: keeping motions consistent from
//! window to window, bridging occlusions and reacquiring lost motions.

mod pipeline;
mod track;

pub use pipeline::{run_full_batch, run_sliding, ClosureEvent, PipelineConfig, RunOutput, WindowResult};
pub use track::{
    associate_labels, closure_correction, closure_metric, discrete_velocity, extrapolate, interpolate, MotionId,
    MotionTrack, TrackSample, TrackStatus,
};
