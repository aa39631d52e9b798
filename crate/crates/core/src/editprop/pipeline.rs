use super::calibrate::CalibrationMode;
use super::edit::EditSpec;
use super::generate::{run_autoregressive, AutoregressiveOutput, KeyframeGenerator};
use super::interpolate::interpolate_nonkeys;
use super::metrics::{temporal_consistency, ConsistencyScore};
use super::plan::BatchPlan;
use crate::error::Result;
use crate::flow::{AdjacentFlows, ConsistencyParams, FlowParams};
use crate::media::{Frame, VideoClip};
use crate::spatialcond::ConditionImage;
use crate::timing::{Stage, StageTimes};

#[derive(Debug, Clone)]
pub struct EditedVideo {
    pub run: AutoregressiveOutput,
    /// Keys with the frames between them filled in.
    pub frames: Vec<Frame>,
    pub crossfade: bool,
    /// Warping error of the keys under the input's key-to-key flows.
    /// `None` when every pair was occluded.
    pub consistency: Option<ConsistencyScore>,
    /// Generator stages plus the interpolation flows and blending.
    pub times: StageTimes,
}

/// Edits the first frame, propagates it over the key frames and fills the
/// gaps between keys along flows of the input.
#[allow(clippy::too_many_arguments)]
pub fn edit_video(
    input: &VideoClip,
    conditions: &[ConditionImage],
    edit: &EditSpec,
    plan: &BatchPlan,
    calibration: Option<CalibrationMode>,
    generator: &mut dyn KeyframeGenerator,
    flow: &FlowParams,
    consistency: &ConsistencyParams,
) -> Result<EditedVideo> {
    let before = generator.times().cloned().unwrap_or_default();
    let run = run_autoregressive(input, conditions, edit, plan, calibration, generator)?;
    let mut times = StageTimes::default();
    if let Some(after) = generator.times() {
        times.merge(&after.since(&before));
    }
    let interval = run.layout.plan.keyframe_interval;
    let key_clip = input.select(&run.layout.key_indices, interval as u32)?;
    let flows = times.time(Stage::Flow, || AdjacentFlows::estimate(&key_clip, flow, consistency))?;
    let interp = times.time(Stage::Interpolation, || interpolate_nonkeys(&run.keys, interval, Some(&flows)))?;
    let consistency = match temporal_consistency(&run.keys, &flows) {
        Ok(s) => Some(s),
        Err(e) => {
            log::warn!("no consistency score: {e}");
            None
        }
    };
    Ok(EditedVideo {
        run,
        frames: interp.frames,
        crossfade: interp.crossfade,
        consistency,
        times,
    })
}
