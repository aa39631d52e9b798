use super::*;
use crate::codec::CodecParams;
use crate::denoiser::{Conditioner, DenoiserParams, ModelConfig};
use crate::diffusion::{GuidanceConfig, NoiseSchedule};
use crate::error::Result;
use crate::media::{Frame, VideoClip};
use crate::spatialcond::{clip_conditions, CannyParams, ConditionKind, ConditionImage};
use crate::synth::{generate as synth, SceneKind, SceneSpec};
use crate::timing::StageTimes;

fn scene(kind: SceneKind, frames: usize, size: usize) -> (VideoClip, Vec<ConditionImage>) {
    let mut spec = SceneSpec::new(kind, frames, 5);
    spec.width = size;
    spec.height = size;
    let s = synth(&spec).unwrap();
    let conds = clip_conditions(&s.clip, ConditionKind::Edge, &CannyParams::default(), None).unwrap();
    (s.clip, conds)
}

/// Darkens the edited first frame a little more for every frame, and
/// records what it was handed.
struct Dimmer {
    seen_first: Vec<Frame>,
    seen_sources: Vec<Vec<usize>>,
}

impl KeyframeGenerator for Dimmer {
    fn generate(&mut self, req: &BatchRequest<'_>) -> Result<BatchOutput> {
        self.seen_first.push(req.edited_first.clone());
        self.seen_sources.push(req.source_frames.to_vec());
        let frames = (0..req.input.len())
            .map(|i| req.edited_first.map(|v| v * (1.0 - 0.02 * i as f32)))
            .collect();
        Ok(BatchOutput {
            frames,
            report: BatchReport {
                batch: req.batch,
                source_frames: req.source_frames.to_vec(),
                ..BatchReport::default()
            },
        })
    }
}

#[test]
fn chaining_shares_boundary_frames() {
    let (clip, conds) = scene(SceneKind::TranslatingSquare, 20, 32);
    let plan = BatchPlan::new(2, 4, 3).unwrap();
    let mut gen = Dimmer {
        seen_first: Vec::new(),
        seen_sources: Vec::new(),
    };
    let edit = EditSpec::new(Editor::ColorMap, "blue square");
    let out = run_autoregressive(&clip, &conds, &edit, &plan, None, &mut gen).unwrap();
    assert_eq!(out.keys.len(), plan.total_keys());
    assert_eq!(gen.seen_first[0], out.edited_first);
    for b in 1..3 {
        // The last key of batch b−1 is exactly what batch b consumed.
        assert_eq!(out.keys[b * 3], gen.seen_first[b]);
    }
    // Conditions only ever come from input frames.
    let all: Vec<usize> = gen.seen_sources.concat();
    assert!(all.iter().all(|&i| i < clip.len() && i % 2 == 0));
    assert!(out.keys.iter().all(|k| k.dims() == clip.dims()));
}

#[test]
fn calibration_pins_luminance() {
    let (clip, conds) = scene(SceneKind::TranslatingSquare, 20, 32);
    let plan = BatchPlan::new(1, 4, 6).unwrap();
    let edit = EditSpec::identity("red square");
    let mut gen = Dimmer {
        seen_first: Vec::new(),
        seen_sources: Vec::new(),
    };
    let raw = run_autoregressive(&clip, &conds, &edit, &plan, None, &mut gen).unwrap();
    let cal = run_autoregressive(&clip, &conds, &edit, &plan, Some(CalibrationMode::PerChannel), &mut gen).unwrap();
    let (drift_raw, trend) = drift_trend(&raw.key_luma);
    let (drift_cal, _) = drift_trend(&cal.key_luma);
    assert!(drift_raw < -0.02 && trend == 1.0, "{drift_raw} {trend}");
    assert!(drift_cal.abs() < 1e-6, "{drift_cal}");
    let target = mean_luminance(&cal.edited_first);
    assert!(cal.key_luma.iter().all(|l| (l - target).abs() < 1e-5));
}

#[test]
fn codec_propagation_grays_panning_scene() {
    let (clip, conds) = scene(SceneKind::Panning, 28, 64);
    let plan = BatchPlan::new(1, 4, 9).unwrap();
    let edit = EditSpec::identity("panning");
    let mut gen = CodecPropagator::new(CodecParams::default());
    let raw = run_autoregressive(&clip, &conds, &edit, &plan, None, &mut gen).unwrap();
    let cal = run_autoregressive(&clip, &conds, &edit, &plan, Some(CalibrationMode::PerChannel), &mut gen).unwrap();
    let (d_raw, _) = drift_trend(&raw.key_luma);
    let (d_cal, _) = drift_trend(&cal.key_luma);
    assert!(d_raw.abs() > d_cal.abs(), "{d_raw} vs {d_cal}");
}

fn tiny_model(use_all: bool) -> DiffusionModel {
    let base = ModelConfig {
        width: 16,
        groups: 4,
        d_txt: 16,
        temb_dim: 32,
        ..ModelConfig::default()
    };
    let cfg = if use_all { base } else { ModelConfig { ..ModelConfig::spatial_only(0) } };
    let cfg = ModelConfig { width: 16, groups: 4, d_txt: 16, temb_dim: 32, ..cfg };
    DiffusionModel {
        conditioner: Conditioner::new(CodecParams::default(), cfg.d_txt, 0),
        params: DenoiserParams::init(&cfg),
        cfg,
        schedule: NoiseSchedule::default(),
    }
}

#[test]
fn single_batch_equals_calibrated_propagation() {
    let (clip, conds) = scene(SceneKind::TranslatingSquare, 8, 32);
    let plan = BatchPlan::new(2, 3, 1).unwrap();
    let model = tiny_model(true);
    let opts = GenerationOptions {
        steps: 3,
        guidance: GuidanceConfig::new(2.0).unwrap(),
        seed: 7,
        ..GenerationOptions::default()
    };
    let edit = EditSpec::new(Editor::ColorMap, "green square");
    let mut gen = DiffusionGenerator::new(model.clone(), opts);
    let out = run_autoregressive(&clip, &conds, &edit, &plan, Some(CalibrationMode::PerChannel), &mut gen).unwrap();
    assert!(out.batches[0].injected && !out.batches[0].injection_missing);
    assert_eq!(out.batches[0].source_frames, vec![0, 2, 4]);

    let idx = [0usize, 2, 4];
    let frames: Vec<Frame> = idx.iter().map(|&i| clip.frames[i].clone()).collect();
    let cs: Vec<ConditionImage> = idx.iter().map(|&i| conds[i].clone()).collect();
    let edited = edit.apply(&clip.frames[0]).unwrap();
    let req = BatchRequest {
        batch: 0,
        input: &frames,
        conditions: &cs,
        source_frames: &idx,
        edited_first: &edited,
        prompt: "green square",
    };
    let direct = propagate_batch(&req, &model, &opts, &mut StageTimes::default()).unwrap();
    let r = RefStats::of(&edited);
    for (k, f) in out.keys.iter().zip(&direct.frames) {
        assert_eq!(k, &color_calibrate(f, &r, CalibrationMode::PerChannel).unwrap().frame);
    }
    let times = gen.times().unwrap();
    assert!(times.get(crate::timing::Stage::Sampling) > std::time::Duration::ZERO);
}

#[test]
fn batch_rejects_mismatched_edit() {
    let (clip, conds) = scene(SceneKind::Static, 4, 32);
    let model = tiny_model(false);
    let small = Frame::filled(16, 16, 0.5).unwrap();
    let req = BatchRequest {
        batch: 0,
        input: &clip.frames,
        conditions: &conds,
        source_frames: &[0, 1, 2, 3],
        edited_first: &small,
        prompt: "",
    };
    let err = propagate_batch(&req, &model, &GenerationOptions::default(), &mut StageTimes::default());
    assert!(matches!(err, Err(crate::error::Error::Dimension(_))));
}

#[test]
fn seeded_generation_is_reproducible() {
    let (clip, conds) = scene(SceneKind::Panning, 4, 32);
    let model = tiny_model(true);
    let opts = GenerationOptions {
        steps: 2,
        injection: false,
        seed: 3,
        ..GenerationOptions::default()
    };
    let edited = clip.frames[0].clone();
    let req = BatchRequest {
        batch: 0,
        input: &clip.frames,
        conditions: &conds,
        source_frames: &[0, 1, 2, 3],
        edited_first: &edited,
        prompt: "panning",
    };
    let a = propagate_batch(&req, &model, &opts, &mut StageTimes::default()).unwrap();
    let b = propagate_batch(&req, &model, &opts, &mut StageTimes::default()).unwrap();
    assert_eq!(a, b);
    assert!(!a.report.injected && !a.report.injection_missing);
}
