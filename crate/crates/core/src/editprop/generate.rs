use super::calibrate::{color_calibrate, mean_luminance, CalibrationMode, RefStats};
use super::edit::EditSpec;
use super::plan::{BatchPlan, PlanLayout};
use crate::codec::{CodecParams, LatentGrid};
use crate::denoiser::{load_checkpoint, Conditioner, Denoiser, DenoiserParams, ModelConfig};
use crate::diffusion::{ddim_invert, ddim_sample, AttentionStore, GuidanceConfig, NoiseSchedule, VPredictor};
use crate::error::{Error, Result};
use crate::flow::{warp_first_frame, ConsistencyParams, FirstFrameFlows, FlowParams};
use crate::media::{Frame, VideoClip};
use crate::rng::SeededRng;
use crate::spatialcond::ConditionImage;
use crate::timing::{Stage, StageTimes};

/// Inputs for one batch of key frames.
#[derive(Debug, Clone, Copy)]
pub struct BatchRequest<'a> {
    pub batch: usize,
    /// Input-video key frames covered by the batch.
    pub input: &'a [Frame],
    /// Spatial conditions of those input frames.
    pub conditions: &'a [ConditionImage],
    /// Input-clip indices of `input`.
    pub source_frames: &'a [usize],
    /// Edited first frame of this batch.
    pub edited_first: &'a Frame,
    pub prompt: &'a str,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchReport {
    pub batch: usize,
    pub source_frames: Vec<usize>,
    pub injected: bool,
    /// Injection was requested but the maps were incomplete.
    pub injection_missing: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutput {
    pub frames: Vec<Frame>,
    pub report: BatchReport,
}

/// Produces the key frames of one batch.
pub trait KeyframeGenerator {
    fn generate(&mut self, req: &BatchRequest<'_>) -> Result<BatchOutput>;

    /// Time spent per stage so far, if tracked.
    fn times(&self) -> Option<&StageTimes> {
        None
    }
}

/// Where sampling starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseStart {
    /// Fresh Gaussian latents, seeded per batch.
    #[default]
    Gaussian,
    /// The inverted latents of the input key frames.
    Inverted,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationOptions {
    pub steps: usize,
    pub guidance: GuidanceConfig,
    pub injection: bool,
    pub start: NoiseStart,
    pub seed: u64,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        Self {
            steps: crate::diffusion::DEFAULT_STEPS,
            guidance: GuidanceConfig::default(),
            injection: true,
            start: NoiseStart::Gaussian,
            seed: 0,
        }
    }
}

/// A trained denoiser and everything needed to run it on frames.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    pub conditioner: Conditioner,
    pub params: DenoiserParams,
    pub cfg: ModelConfig,
    pub schedule: NoiseSchedule,
}

impl DiffusionModel {
    /// Default codec, schedule and prompt table around `params`, matching
    /// what training uses.
    pub fn new(cfg: ModelConfig, params: DenoiserParams) -> Self {
        Self {
            conditioner: Conditioner::new(CodecParams::default(), cfg.d_txt, 0),
            params,
            cfg,
            schedule: NoiseSchedule::default(),
        }
    }

    pub fn load(dir: impl AsRef<std::path::Path>) -> Result<Self> {
        let (params, cfg, _) = load_checkpoint(dir)?;
        Ok(Self::new(cfg, params))
    }
}

fn check_request(req: &BatchRequest<'_>) -> Result<()> {
    let n = req.input.len();
    if n == 0 || req.conditions.len() != n || req.source_frames.len() != n {
        return Err(Error::Shape(format!(
            "batch {} has {n} frames, {} conditions, {} source indices",
            req.batch,
            req.conditions.len(),
            req.source_frames.len()
        )));
    }
    if req.edited_first.dims() != req.input[0].dims() {
        return Err(Error::Dimension(format!(
            "edited first frame is {:?}, input is {:?}",
            req.edited_first.dims(),
            req.input[0].dims()
        )));
    }
    Ok(())
}

fn complete(store: &AttentionStore, layers: usize, steps: usize) -> bool {
    layers > 0 && store.pairs() == layers * steps
}

/// Generates one batch: flows come from the input key frames, the edited
/// first frame is warped along them, and all frames are sampled jointly
/// with guidance and, optionally, keys and values from the inversion of
/// the input.
pub fn propagate_batch(
    req: &BatchRequest<'_>,
    model: &DiffusionModel,
    opts: &GenerationOptions,
    times: &mut StageTimes,
) -> Result<BatchOutput> {
    check_request(req)?;
    let cond = &model.conditioner;
    let flows = times.time(Stage::Flow, || cond.first_frame_flows(req.input))?;
    let source = req.source_frames.to_vec();
    let bundle = times.time(Stage::Warping, || {
        cond.bundle(req.edited_first, &flows, req.conditions, req.prompt, source.clone())
    })?;

    let mut report = BatchReport {
        batch: req.batch,
        source_frames: source.clone(),
        ..BatchReport::default()
    };
    let need_inversion = opts.injection || opts.start == NoiseStart::Inverted;
    let mut inverted = None;
    if need_inversion {
        let (z_t, store) = times.time(Stage::Inversion, || -> Result<_> {
            let z0 = cond.encode_all(req.input)?;
            let inv_bundle = cond.bundle(&req.input[0], &flows, req.conditions, req.prompt, source.clone())?;
            let mut net = Denoiser::new(&model.params, &model.cfg, &inv_bundle);
            ddim_invert(&model.schedule, &mut net, &z0, opts.steps)
        })?;
        inverted = Some((z_t, store));
    }

    let frames = times.time(Stage::Sampling, || -> Result<Vec<Frame>> {
        let mut net = Denoiser::new(&model.params, &model.cfg, &bundle);
        let z_start = match (&inverted, opts.start) {
            (Some((z, _)), NoiseStart::Inverted) => z.clone(),
            _ => {
                let mut rng = SeededRng::derive(opts.seed, &format!("batch{}", req.batch));
                let (h, w, c) = bundle.flow[0].dims();
                (0..req.input.len()).map(|_| LatentGrid::gaussian(h, w, c, &mut rng)).collect()
            }
        };
        let inject = if opts.injection {
            let store = inverted.as_ref().map(|(_, s)| s);
            match store {
                Some(s) if complete(s, net.attention_layers(), opts.steps) => {
                    report.injected = true;
                    Some(s)
                }
                _ => {
                    report.injection_missing = true;
                    None
                }
            }
        } else {
            None
        };
        let z0 = ddim_sample(&model.schedule, &mut net, &z_start, opts.steps, opts.guidance, inject)?;
        z0.iter().map(|z| cond.decode(z)).collect()
    })?;
    if report.injection_missing {
        log::warn!("batch {}: attention maps incomplete, sampling without injection", req.batch);
    }
    Ok(BatchOutput { frames, report })
}

/// Key frames from the toy diffusion model.
#[derive(Debug, Clone)]
pub struct DiffusionGenerator {
    pub model: DiffusionModel,
    pub opts: GenerationOptions,
    pub times: StageTimes,
}

impl DiffusionGenerator {
    pub fn new(model: DiffusionModel, opts: GenerationOptions) -> Self {
        Self {
            model,
            opts,
            times: StageTimes::default(),
        }
    }
}

impl KeyframeGenerator for DiffusionGenerator {
    fn generate(&mut self, req: &BatchRequest<'_>) -> Result<BatchOutput> {
        propagate_batch(req, &self.model, &self.opts, &mut self.times)
    }

    fn times(&self) -> Option<&StageTimes> {
        Some(&self.times)
    }
}

/// Propagation without a denoiser: the edited first frame is warped along
/// the input flows and passed through the codec. Useful to isolate the
/// colour drift the codec round trip causes across batches.
#[derive(Debug, Clone)]
pub struct CodecPropagator {
    pub codec: CodecParams,
    pub flow: FlowParams,
    pub consistency: ConsistencyParams,
    pub fill: f32,
    pub times: StageTimes,
}

impl CodecPropagator {
    pub fn new(codec: CodecParams) -> Self {
        Self {
            codec,
            flow: FlowParams::default(),
            consistency: ConsistencyParams::default(),
            fill: 0.5,
            times: StageTimes::default(),
        }
    }
}

impl KeyframeGenerator for CodecPropagator {
    fn generate(&mut self, req: &BatchRequest<'_>) -> Result<BatchOutput> {
        check_request(req)?;
        let clip = VideoClip::new(req.input.to_vec(), 30, 1)?;
        let (flow, consistency) = (&self.flow, &self.consistency);
        let flows = self
            .times
            .time(Stage::Flow, || FirstFrameFlows::estimate(&clip, flow, consistency))?;
        let frames = self.times.time(Stage::Warping, || {
            (0..flows.len())
                .map(|i| {
                    let w = warp_first_frame(req.edited_first, &flows.bwd[i], &flows.bwd_occ[i], self.fill)?;
                    self.codec.decode(&self.codec.encode(&w.frame)?)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(BatchOutput {
            frames,
            report: BatchReport {
                batch: req.batch,
                source_frames: req.source_frames.to_vec(),
                ..BatchReport::default()
            },
        })
    }

    fn times(&self) -> Option<&StageTimes> {
        Some(&self.times)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoregressiveOutput {
    pub layout: PlanLayout,
    pub edited_first: Frame,
    /// Assembled key frames, `M(N−1)+1` of them.
    pub keys: Vec<Frame>,
    /// Mean luminance of each key before clamping.
    pub key_luma: Vec<f64>,
    pub batches: Vec<BatchReport>,
    /// Keys whose calibration met a flat channel.
    pub flat_channel_keys: Vec<usize>,
}

/// Runs the batches in order. Batch 1 edits the first input frame; each
/// later batch takes the previous batch's final key as its edited first
/// frame. With `calibration`, every key is mapped to the moments of the
/// first edited frame before the next batch consumes it.
pub fn run_autoregressive(
    input: &VideoClip,
    conditions: &[ConditionImage],
    edit: &EditSpec,
    plan: &BatchPlan,
    calibration: Option<CalibrationMode>,
    generator: &mut dyn KeyframeGenerator,
) -> Result<AutoregressiveOutput> {
    if conditions.len() != input.len() {
        return Err(Error::Shape(format!(
            "{} conditions for {} input frames",
            conditions.len(),
            input.len()
        )));
    }
    let layout = plan.layout(input.len())?;
    for note in layout.notes() {
        log::warn!("{note}");
    }
    let edited_first = edit.apply(&input.frames[layout.key_indices[0]])?;
    let reference = RefStats::of(&edited_first);
    let mut out = AutoregressiveOutput {
        layout: layout.clone(),
        edited_first: edited_first.clone(),
        keys: Vec::with_capacity(layout.key_indices.len()),
        key_luma: Vec::with_capacity(layout.key_indices.len()),
        batches: Vec::new(),
        flat_channel_keys: Vec::new(),
    };
    let mut first = edited_first;
    for b in 0..layout.plan.num_batches {
        let idx = layout.batch_keys(b);
        let frames: Vec<Frame> = idx.iter().map(|&i| input.frames[i].clone()).collect();
        let conds: Vec<ConditionImage> = idx.iter().map(|&i| conditions[i].clone()).collect();
        let req = BatchRequest {
            batch: b,
            input: &frames,
            conditions: &conds,
            source_frames: idx,
            edited_first: &first,
            prompt: &edit.target_prompt,
        };
        let gen = generator.generate(&req)?;
        if gen.frames.len() != idx.len() {
            return Err(Error::Contract(format!(
                "generator returned {} frames for a batch of {}",
                gen.frames.len(),
                idx.len()
            )));
        }
        // The shared key already came from the previous batch.
        let skip = usize::from(b > 0);
        for f in gen.frames.into_iter().skip(skip) {
            let (frame, luma) = match calibration {
                Some(mode) => {
                    let c = color_calibrate(&f, &reference, mode)?;
                    if !c.zero_std.is_empty() {
                        out.flat_channel_keys.push(out.keys.len());
                    }
                    (c.frame, mean_luminance(&c.unclamped))
                }
                None => {
                    let l = mean_luminance(&f);
                    (f, l)
                }
            };
            out.keys.push(frame);
            out.key_luma.push(luma);
        }
        first = out.keys.last().unwrap().clone();
        out.batches.push(gen.report);
    }
    Ok(out)
}

/// Total drift of a luminance series and the fraction of steps moving in
/// the same direction as the total.
pub fn drift_trend(series: &[f64]) -> (f64, f64) {
    if series.len() < 2 {
        return (0.0, 1.0);
    }
    let total = series[series.len() - 1] - series[0];
    let steps: Vec<f64> = series.windows(2).map(|w| w[1] - w[0]).collect();
    let moving: Vec<&f64> = steps.iter().filter(|d| d.abs() > 1e-12).collect();
    if moving.is_empty() {
        return (total, 1.0);
    }
    let agree = moving.iter().filter(|d| d.signum() == total.signum()).count();
    (total, agree as f64 / moving.len() as f64)
}
