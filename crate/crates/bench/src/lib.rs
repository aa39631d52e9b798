//! Shared inputs for the stage benchmarks.

use flowvid_core::denoiser::{ConditionBundle, DenoiserParams, ModelConfig};
use flowvid_core::editprop::DiffusionModel;
use flowvid_core::flow::FirstFrameFlows;
use flowvid_core::media::VideoClip;
use flowvid_core::spatialcond::{clip_conditions, CannyParams, ConditionImage, ConditionKind};
use flowvid_core::synth::{generate, SceneKind, SceneSpec};
use flowvid_core::Result;

/// A small untrained model. Timings depend on shapes, not on weights.
pub fn small_model() -> DiffusionModel {
    let cfg = ModelConfig {
        width: 16,
        groups: 4,
        d_txt: 16,
        temb_dim: 32,
        ..ModelConfig::default()
    };
    let params = DenoiserParams::init(&cfg);
    DiffusionModel::new(cfg, params)
}

pub struct Fixture {
    pub clip: VideoClip,
    pub conditions: Vec<ConditionImage>,
    pub prompt: String,
}

/// A 64x64 panning clip with edge conditions.
pub fn fixture(frames: usize) -> Result<Fixture> {
    let s = generate(&SceneSpec::new(SceneKind::Panning, frames, 0))?;
    let conditions = clip_conditions(&s.clip, ConditionKind::Edge, &CannyParams::default(), None)?;
    Ok(Fixture {
        clip: s.clip,
        conditions,
        prompt: s.prompt,
    })
}

/// Flows and the condition bundle for one batch of `fx`.
pub fn batch_bundle(model: &DiffusionModel, fx: &Fixture) -> Result<(FirstFrameFlows, ConditionBundle)> {
    let cond = &model.conditioner;
    let flows = cond.first_frame_flows(&fx.clip.frames)?;
    let n = fx.clip.len();
    let bundle = cond.bundle(&fx.clip.frames[0], &flows, &fx.conditions, &fx.prompt, (0..n).collect())?;
    Ok((flows, bundle))
}
