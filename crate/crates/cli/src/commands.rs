use std::fs;
use std::path::Path;
use std::time::Instant;

use flowvid_core::denoiser::{
    Conditioner, Denoiser, DenoiserParams, TrainClip, TrainConfig, Trainer,
};
use flowvid_core::diffusion::{ddim_invert, GuidanceConfig};
use flowvid_core::editprop::{
    edit_video, temporal_consistency, BatchPlan, DiffusionGenerator, DiffusionModel, EditSpec, EditedVideo,
    GenerationOptions, NoiseStart,
};
use flowvid_core::flow::{warp_clip, AdjacentFlows, ConsistencyParams, FirstFrameFlows, FlowField, FlowParams};
use flowvid_core::manifest::KeyValues;
use flowvid_core::media::{self, load_clip, save_clip, RawTensor, VideoClip};
use flowvid_core::spatialcond::{clip_conditions, CannyParams, ConditionImage, ConditionKind};
use flowvid_core::synth::{generate as synth_scene, save_synth, SceneSpec};
use flowvid_core::timing::{Stage, StageTimes};
use flowvid_core::{Error, Result};

use crate::config::RunConfig;

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// `config.txt` next to every output.
fn write_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    cfg.to_kv().save(out.join("config.txt"))
}

fn join<T: ToString>(xs: impl IntoIterator<Item = T>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn flow_params(cfg: &RunConfig) -> (FlowParams, ConsistencyParams) {
    (
        FlowParams::default(),
        ConsistencyParams {
            a: cfg.fb_a,
            b: cfg.fb_b,
        },
    )
}

fn canny(cfg: &RunConfig) -> CannyParams {
    CannyParams {
        low: cfg.canny_low,
        high: cfg.canny_high,
        sigma: cfg.canny_sigma,
    }
}

/// Clip in `dir` plus the prompt from `scene.txt`, if there is one.
fn load_input(dir: &Path) -> Result<(VideoClip, Option<String>)> {
    let clip = load_clip(dir)?;
    let scene = dir.join("scene.txt");
    let prompt = if scene.exists() {
        KeyValues::load(&scene)?.get("prompt").map(str::to_string)
    } else {
        None
    };
    Ok((clip, prompt))
}

fn conditions(cfg: &RunConfig, clip: &VideoClip, dir: &Path) -> Result<Vec<ConditionImage>> {
    let depth = dir.join("depth");
    let depth_dir = (cfg.control == ConditionKind::Depth).then_some(depth.as_path());
    clip_conditions(clip, cfg.control, &canny(cfg), depth_dir)
}

fn prompt_for(cfg: &RunConfig, scene: Option<String>) -> String {
    cfg.prompt.clone().or(scene).unwrap_or_default()
}

fn plan(cfg: &RunConfig) -> Result<BatchPlan> {
    BatchPlan::new(cfg.interval, cfg.batch_frames, cfg.batches)
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let out = cfg.output()?;
    let mut spec = SceneSpec::new(cfg.scene, cfg.frames, cfg.seed);
    spec.width = cfg.width;
    spec.height = cfg.height;
    let s = synth_scene(&spec)?;
    save_synth(&s, out)?;
    write_config(cfg, out)?;
    let mut m = KeyValues::default();
    m.set("scene", cfg.scene);
    m.set("frames", s.clip.len());
    m.set("width", cfg.width);
    m.set("height", cfg.height);
    m.set("prompt", &s.prompt);
    m.save(out.join("manifest.txt"))?;
    println!("wrote {} frames of {} to {}", s.clip.len(), cfg.scene, out.display());
    Ok(())
}

/// First-frame flows and occlusion masks, named like the synthetic
/// ground truth. Reports endpoint error when `gt/` is present.
pub fn flow(cfg: &RunConfig) -> Result<()> {
    let (input, out) = (cfg.input()?, cfg.output()?);
    let (clip, _) = load_input(input)?;
    let (fp, cp) = flow_params(cfg);
    let flows = FirstFrameFlows::estimate(&clip, &fp, &cp)?;
    write_config(cfg, out)?;
    let mut epe = Vec::new();
    for i in 0..flows.len() {
        let tag = format!("{:04}", i + 1);
        flows.fwd[i].save(out.join(format!("flow_fwd_{tag}.flo")))?;
        flows.bwd[i].save(out.join(format!("flow_bwd_{tag}.flo")))?;
        flows.fwd_occ[i].save(out.join(format!("occ_fwd_{tag}.pgm")))?;
        flows.bwd_occ[i].save(out.join(format!("occ_bwd_{tag}.pgm")))?;
        let gt = input.join("gt").join(format!("flow_bwd_{tag}.flo"));
        if i > 0 && gt.exists() {
            epe.push(flows.bwd[i].mean_epe(&FlowField::load(&gt)?, Some(&flows.bwd_occ[i]))?);
        }
    }
    let mut m = KeyValues::default();
    m.set("frames", flows.len());
    m.set("occluded_bwd", join(flows.bwd_occ.iter().map(|o| format!("{:.4}", o.fraction()))));
    if !epe.is_empty() {
        let mean = epe.iter().sum::<f64>() / epe.len() as f64;
        m.set("epe_bwd", join(epe.iter().map(|e| format!("{e:.4}"))));
        m.set("epe_bwd_mean", format!("{mean:.4}"));
        println!("mean endpoint error against ground truth: {mean:.4} px");
    }
    m.save(out.join("manifest.txt"))
}

/// The edited first frame warped onto every frame.
pub fn warp(cfg: &RunConfig) -> Result<()> {
    let (input, out) = (cfg.input()?, cfg.output()?);
    let (clip, scene_prompt) = load_input(input)?;
    let edit = EditSpec::new(cfg.editor.clone(), prompt_for(cfg, scene_prompt));
    let first = edit.apply(&clip.frames[0])?;
    let (fp, cp) = flow_params(cfg);
    let flows = FirstFrameFlows::estimate(&clip, &fp, &cp)?;
    let warped = warp_clip(&first, &flows.bwd, &flows.bwd_occ, 0.5, clip.fps, clip.frame_interval)?;
    save_clip(&warped, out)?;
    write_config(cfg, out)?;
    let mut m = KeyValues::default();
    m.set("frames", warped.len());
    m.set("editor", &cfg.editor);
    m.set("fill", 0.5);
    m.set("occluded", join(flows.bwd_occ.iter().map(|o| format!("{:.4}", o.fraction()))));
    m.save(out.join("manifest.txt"))
}

/// Condition images as a clip.
pub fn conditions_cmd(cfg: &RunConfig) -> Result<()> {
    let (input, out) = (cfg.input()?, cfg.output()?);
    let (clip, _) = load_input(input)?;
    let conds = conditions(cfg, &clip, input)?;
    let frames = conds.iter().map(|c| c.frame.clone()).collect();
    save_clip(&VideoClip::new(frames, clip.fps, clip.frame_interval)?, out)?;
    write_config(cfg, out)?;
    let degenerate: Vec<usize> = conds.iter().enumerate().filter(|(_, c)| c.degenerate).map(|(i, _)| i).collect();
    let mut m = KeyValues::default();
    m.set("control", cfg.control);
    m.set("frames", conds.len());
    m.set("degenerate", join(degenerate));
    m.save(out.join("manifest.txt"))
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let out = cfg.output()?;
    if cfg.inputs.is_empty() {
        return Err(Error::Config("train needs at least one --input".into()));
    }
    let mut clips = Vec::new();
    for dir in &cfg.inputs {
        let (clip, scene_prompt) = load_input(dir)?;
        let conditions = conditions(cfg, &clip, dir)?;
        clips.push(TrainClip {
            frames: clip.frames,
            conditions,
            prompt: prompt_for(cfg, scene_prompt),
        });
    }
    let tc = TrainConfig {
        steps: cfg.steps,
        lr: cfg.learning_rate,
        frames: cfg.train_frames,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    let conditioner = Conditioner::new(Default::default(), cfg.model.d_txt, 0);
    let mut trainer = Trainer::new(tc, cfg.model.clone(), conditioner)?;
    trainer.train(&clips, cfg.steps)?;
    let n = trainer.step_count();
    let window = (n / 10).clamp(1, 100);
    let (first, last) = (trainer.mean_loss(0..window), trainer.mean_loss(n - window..n));
    if !(last.is_finite()) {
        return Err(Error::Numeric(format!("training diverged, final loss {last}")));
    }
    let mut extra = KeyValues::default();
    extra.set("train_steps", n);
    trainer.save_checkpoint(out, &extra)?;
    write_text(&out.join("loss.csv"), &trainer.loss_csv())?;
    write_config(cfg, out)?;
    let mut m = KeyValues::default();
    m.set("clips", clips.len());
    m.set("steps", n);
    m.set("parameters", trainer.params.numel());
    m.set("loss_first", format!("{first:.6}"));
    m.set("loss_last", format!("{last:.6}"));
    m.set("skipped_samples", trainer.report.skipped);
    m.save(out.join("manifest.txt"))?;
    println!("trained {n} steps; loss {first:.4} -> {last:.4}");
    Ok(())
}

fn load_model(cfg: &RunConfig) -> Result<DiffusionModel> {
    DiffusionModel::load(cfg.model_dir()?)
}

/// Inverts the first batch of key frames and stores the latents and
/// attention maps.
pub fn invert(cfg: &RunConfig) -> Result<()> {
    let (input, out) = (cfg.input()?, cfg.output()?);
    let model = load_model(cfg)?;
    let (clip, scene_prompt) = load_input(input)?;
    let conds = conditions(cfg, &clip, input)?;
    let layout = plan(cfg)?.layout(clip.len())?;
    let idx = layout.batch_keys(0).to_vec();
    let frames: Vec<_> = idx.iter().map(|&i| clip.frames[i].clone()).collect();
    let cs: Vec<_> = idx.iter().map(|&i| conds[i].clone()).collect();
    let c = &model.conditioner;
    let flows = c.first_frame_flows(&frames)?;
    let bundle = c.bundle(&frames[0], &flows, &cs, &prompt_for(cfg, scene_prompt), idx.clone())?;
    let z0 = c.encode_all(&frames)?;
    let mut net = Denoiser::new(&model.params, &model.cfg, &bundle);
    let (z_t, store) = ddim_invert(&model.schedule, &mut net, &z0, cfg.steps)?;

    let latents = out.join("latents");
    create_dir(&latents)?;
    for (i, z) in z_t.iter().enumerate() {
        let raw = RawTensor::new(vec![z.h, z.w, z.c], z.data.iter().map(|&v| v as f32).collect())?;
        media::save_fvt1(&raw, latents.join(format!("latent_{:04}.fvt", i + 1)))?;
    }
    store.save(out.join("attention"))?;
    write_config(cfg, out)?;
    let mut m = KeyValues::default();
    m.set("key_frames", join(&idx));
    m.set("steps", cfg.steps);
    m.set("attention_pairs", store.pairs());
    m.save(out.join("manifest.txt"))
}

/// Everything a generation run produced, before anything is written.
pub struct Generated {
    pub video: EditedVideo,
    pub input_len: usize,
}

pub fn run_generation(cfg: &RunConfig, model: DiffusionModel) -> Result<Generated> {
    let input = cfg.input()?;
    let (clip, scene_prompt) = load_input(input)?;
    let conds = conditions(cfg, &clip, input)?;
    let edit = EditSpec::new(cfg.editor.clone(), prompt_for(cfg, scene_prompt));
    let opts = GenerationOptions {
        steps: cfg.steps,
        guidance: GuidanceConfig::new(cfg.cfg_scale)?,
        injection: cfg.injection,
        start: NoiseStart::Gaussian,
        seed: cfg.seed,
    };
    let mut gen = DiffusionGenerator::new(model, opts);
    let (fp, cp) = flow_params(cfg);
    let calibration = cfg.calibration.then_some(cfg.calibration_mode);
    let video = edit_video(&clip, &conds, &edit, &plan(cfg)?, calibration, &mut gen, &fp, &cp)?;
    Ok(Generated {
        video,
        input_len: clip.len(),
    })
}

pub fn generate(cfg: &RunConfig) -> Result<()> {
    let out = cfg.output()?;
    let g = run_generation(cfg, load_model(cfg)?)?;
    let v = &g.video;
    let layout = &v.run.layout;
    let fps = 30;
    save_clip(&VideoClip::new(v.frames.clone(), fps, 1)?, out)?;
    save_clip(
        &VideoClip::new(v.run.keys.clone(), fps, layout.plan.keyframe_interval as u32)?,
        out.join("keys"),
    )?;
    media::save_frame(&v.run.edited_first, out.join("edited_first.ppm"))?;
    write_config(cfg, out)?;

    let mut m = KeyValues::default();
    m.set("input_frames", g.input_len);
    m.set("keyframe_interval", layout.plan.keyframe_interval);
    m.set("frames_per_batch", layout.plan.frames_per_batch);
    m.set("batches", layout.plan.num_batches);
    m.set("key_frames", v.run.keys.len());
    m.set("output_frames", v.frames.len());
    m.set("key_indices", join(&layout.key_indices));
    for (i, note) in layout.notes().iter().enumerate() {
        m.set(&format!("note_{i}"), note);
    }
    m.set("injected", join(v.run.batches.iter().map(|b| b.injected)));
    m.set("injection_missing", join(v.run.batches.iter().map(|b| b.injection_missing)));
    m.set("flat_channel_keys", join(&v.run.flat_channel_keys));
    m.set("key_luma", join(v.run.key_luma.iter().map(|l| format!("{l:.6}"))));
    m.set("crossfade", v.crossfade);
    if let Some(s) = &v.consistency {
        m.set("temporal_consistency", format!("{:.6e}", s.score));
    }
    m.save(out.join("manifest.txt"))?;
    println!(
        "wrote {} frames ({} keys) to {}",
        v.frames.len(),
        v.run.keys.len(),
        out.display()
    );
    Ok(())
}

/// Temporal consistency and fidelity of a generated clip against the
/// input it was generated from.
pub fn metrics(cfg: &RunConfig) -> Result<()> {
    let input = cfg.input()?;
    let reference = cfg
        .reference
        .as_deref()
        .ok_or_else(|| Error::Config("metrics needs --reference".into()))?;
    let generated = load_clip(input)?;
    let source = load_clip(reference)?;
    let n = generated.len().min(source.len());
    if n < 2 {
        return Err(Error::Contract("metrics need at least two frames in both clips".into()));
    }
    let idx: Vec<usize> = (0..n).collect();
    let source = source.select(&idx, 1)?;
    let (fp, cp) = flow_params(cfg);
    let flows = AdjacentFlows::estimate(&source, &fp, &cp)?;
    let tc = temporal_consistency(&generated.frames[..n], &flows)?;
    let tc_ref = temporal_consistency(&source.frames, &flows)?;
    let (mut mse, mut psnr) = (0.0, 0.0);
    for (a, b) in generated.frames.iter().zip(&source.frames) {
        mse += media::mse(a, b)?;
        psnr += media::psnr(a, b)?;
    }
    let mut m = KeyValues::default();
    m.set("frames", n);
    m.set("temporal_consistency", format!("{:.6e}", tc.score));
    m.set("temporal_consistency_reference", format!("{:.6e}", tc_ref.score));
    m.set("mse", format!("{:.6e}", mse / n as f64));
    m.set("psnr", format!("{:.3}", psnr / n as f64));
    print!("{m}");
    if let Some(out) = &cfg.output {
        write_config(cfg, out)?;
        m.save(out.join("metrics.txt"))?;
    }
    Ok(())
}

/// Timed generation run. Without `--model`, an untrained model of the
/// configured size is used.
pub fn bench(cfg: &RunConfig) -> Result<()> {
    let out = cfg.output()?;
    let model = match &cfg.model_dir {
        Some(_) => load_model(cfg)?,
        None => DiffusionModel::new(cfg.model.clone(), DenoiserParams::init(&cfg.model)),
    };
    let start = Instant::now();
    let g = run_generation(cfg, model)?;
    let total = start.elapsed().as_secs_f64();
    let csv = bench_csv(&g.video.times, total);
    write_config(cfg, out)?;
    write_text(&out.join("bench.csv"), &csv)?;
    print!("{csv}");
    let staged = g.video.times.total().as_secs_f64();
    if (total - staged).abs() > 0.1 * total {
        log::warn!("stages cover {staged:.3}s of {total:.3}s");
    }
    Ok(())
}

/// Per-stage seconds followed by the wall-clock total.
pub fn bench_csv(times: &StageTimes, total: f64) -> String {
    let mut csv = times.to_csv();
    csv.push_str(&format!("total,{total:.6}\n"));
    debug_assert_eq!(Stage::ALL.len() + 2, csv.lines().count());
    csv
}
