//! Edit-propagate generation: edit the first frame, propagate it along
//! the input video's flows in autoregressive batches, calibrate colours
//! and fill in non-key frames.

mod calibrate;
mod edit;
mod generate;
mod interpolate;
mod metrics;
mod pipeline;
mod plan;

pub use calibrate::{color_calibrate, mean_luminance, Calibrated, CalibrationMode, RefStats};
pub use edit::{EditSpec, Editor};
pub use generate::{
    drift_trend, propagate_batch, run_autoregressive, AutoregressiveOutput, BatchOutput, BatchReport, BatchRequest,
    CodecPropagator, DiffusionGenerator, DiffusionModel, GenerationOptions, KeyframeGenerator, NoiseStart,
};
pub use interpolate::{interpolate_nonkeys, Interpolated};
pub use metrics::{temporal_consistency, ConsistencyScore};
pub use pipeline::{edit_video, EditedVideo};
pub use plan::{BatchPlan, PlanLayout};

#[cfg(test)]
mod tests;
