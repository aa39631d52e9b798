use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::bundle::{grids_to_tensor, ConditionBundle, Conditioner};
use super::model::{forward, ForwardOptions};
use super::params::DenoiserParams;
use super::prompt::PromptEmbedding;
use super::ModelConfig;
use crate::codec::LatentGrid;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::manifest::KeyValues;
use crate::media::Frame;
use crate::rng::SeededRng;
use crate::spatialcond::ConditionImage;
use crate::tensorad::{Tape, Tensor, Var};

/// A training clip with its precomputed per-frame condition images.
#[derive(Debug, Clone)]
pub struct TrainClip {
    pub frames: Vec<Frame>,
    pub conditions: Vec<ConditionImage>,
    pub prompt: String,
}

impl TrainClip {
    /// Canny conditions computed from the clip itself.
    pub fn with_edges(frames: Vec<Frame>, prompt: impl Into<String>) -> Result<Self> {
        let canny = crate::spatialcond::CannyParams::default();
        let conditions = frames
            .iter()
            .map(|f| crate::spatialcond::canny_edges(f, &canny))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            frames,
            conditions,
            prompt: prompt.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Frames per training sample.
    pub frames: usize,
    pub intervals: Vec<usize>,
    /// Probability of replacing the prompt with the empty one.
    pub prompt_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            frames: 4,
            intervals: vec![1, 2],
            prompt_dropout: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Sampling as in the full-scale setup: 16 frames at interval 2, 4 or 8.
    pub fn full_scale() -> Self {
        Self {
            frames: 16,
            intervals: vec![2, 4, 8],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.intervals.is_empty() || self.intervals.contains(&0) {
            return Err(Error::Config("frames and intervals must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.prompt_dropout) {
            return Err(Error::Config("prompt dropout must be in [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SampleSpec {
    pub clip: usize,
    pub start: usize,
    pub interval: usize,
    pub frames: usize,
}

impl SampleSpec {
    pub fn indices(&self) -> Vec<usize> {
        (0..self.frames).map(|k| self.start + k * self.interval).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleReport {
    pub skipped: usize,
    pub reasons: Vec<String>,
}

/// Picks a clip and an interval, then a start so that `frames` frames at
/// that interval fit. Draws whose clip is too short are skipped and
/// reported.
pub fn sample_clip(
    clip_lens: &[usize],
    frames: usize,
    intervals: &[usize],
    rng: &mut SeededRng,
    report: &mut SampleReport,
) -> Result<SampleSpec> {
    let span = |iv: usize| (frames - 1) * iv + 1;
    if frames == 0 || intervals.is_empty() {
        return Err(Error::Config("need frames >= 1 and an interval".into()));
    }
    if !clip_lens.iter().any(|&l| intervals.iter().any(|&iv| l >= span(iv))) {
        return Err(Error::Config(format!(
            "no clip has {} frames for intervals {intervals:?}",
            span(*intervals.iter().min().unwrap())
        )));
    }
    loop {
        let clip = rng.below(clip_lens.len());
        let interval = intervals[rng.below(intervals.len())];
        let len = clip_lens[clip];
        if len < span(interval) {
            report.skipped += 1;
            if report.reasons.len() < 16 {
                report.reasons.push(format!(
                    "clip {clip} has {len} frames, interval {interval} needs {}",
                    span(interval)
                ));
            }
            continue;
        }
        let start = rng.below(len - span(interval) + 1);
        return Ok(SampleSpec {
            clip,
            start,
            interval,
            frames,
        });
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, params: &DenoiserParams) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut DenoiserParams, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Contract(format!("{} grads for {} params", grads.len(), params.len())));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                *w -= self.lr * (update + self.weight_decay * *w);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainStepOutput {
    pub step: usize,
    pub loss: f64,
    pub t: usize,
    pub sample: SampleSpec,
}

/// Mean squared error between predicted and target `v`.
pub fn v_loss(tape: &mut Tape, pred: Var, target: &[LatentGrid]) -> Result<Var> {
    let tgt = tape.constant(grids_to_tensor(target)?);
    tape.mse(pred, tgt)
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: ModelConfig,
    pub params: DenoiserParams,
    pub opt: AdamW,
    pub schedule: NoiseSchedule,
    pub conditioner: Conditioner,
    pub losses: Vec<(usize, f64)>,
    pub report: SampleReport,
    rng: SeededRng,
    cache: HashMap<SampleSpec, (Vec<LatentGrid>, ConditionBundle)>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: ModelConfig, conditioner: Conditioner) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        let params = DenoiserParams::init(&model);
        let opt = AdamW::new(&cfg, &params);
        Ok(Self {
            rng: SeededRng::derive(cfg.seed, "train"),
            cfg,
            model,
            params,
            opt,
            schedule: NoiseSchedule::default(),
            conditioner,
            losses: Vec::new(),
            report: SampleReport::default(),
            cache: HashMap::new(),
        })
    }

    pub fn step_count(&self) -> usize {
        self.losses.len()
    }

    /// Latents and conditions of one sample; flows are computed among the
    /// sampled frames with the first sampled frame as reference.
    pub fn prepare(
        &mut self,
        clips: &[TrainClip],
        spec: SampleSpec,
    ) -> Result<(Vec<LatentGrid>, ConditionBundle)> {
        if let Some(hit) = self.cache.get(&spec) {
            return Ok(hit.clone());
        }
        let clip = &clips[spec.clip];
        let idx = spec.indices();
        let frames: Vec<Frame> = idx.iter().map(|&i| clip.frames[i].clone()).collect();
        let conds: Vec<ConditionImage> = idx.iter().map(|&i| clip.conditions[i].clone()).collect();
        let flows = self.conditioner.first_frame_flows(&frames)?;
        let z0 = self.conditioner.encode_all(&frames)?;
        let bundle = self
            .conditioner
            .bundle(&frames[0], &flows, &conds, &clip.prompt, idx)?;
        self.cache.insert(spec, (z0.clone(), bundle.clone()));
        Ok((z0, bundle))
    }

    /// Loss and parameter gradients for a given noise draw.
    pub fn gradients(
        &self,
        z0: &[LatentGrid],
        eps: &[LatentGrid],
        t: usize,
        bundle: &ConditionBundle,
        prompt: &PromptEmbedding,
    ) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self
            .params
            .tensors()
            .iter()
            .map(|p| tape.leaf(p.clone().with_grad()))
            .collect();
        let z_t = z0
            .iter()
            .zip(eps)
            .map(|(z, e)| self.schedule.add_noise(z, e, t))
            .collect::<Result<Vec<_>>>()?;
        let target = z0
            .iter()
            .zip(eps)
            .map(|(z, e)| self.schedule.v_target(z, e, t))
            .collect::<Result<Vec<_>>>()?;
        let pred = forward(
            &mut tape,
            &vars,
            &self.params,
            &self.model,
            &z_t,
            t,
            bundle,
            prompt,
            &mut ForwardOptions::default(),
        )?;
        let loss = v_loss(&mut tape, pred, &target)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "loss is {value} at t={t} after {} steps",
                self.losses.len()
            )));
        }
        let mut grads = tape.backward(loss)?;
        let g = vars
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.dims())))
            .collect();
        Ok((value, g))
    }

    pub fn train_step(&mut self, clips: &[TrainClip]) -> Result<TrainStepOutput> {
        let lens: Vec<usize> = clips.iter().map(|c| c.frames.len()).collect();
        let spec = sample_clip(&lens, self.cfg.frames, &self.cfg.intervals, &mut self.rng, &mut self.report)?;
        let (z0, bundle) = self.prepare(clips, spec)?;
        let t = 1 + self.rng.below(self.schedule.t_max());
        let (h, w, c) = z0[0].dims();
        let eps: Vec<LatentGrid> = (0..z0.len())
            .map(|_| LatentGrid::gaussian(h, w, c, &mut self.rng))
            .collect();
        let prompt = if self.rng.chance(self.cfg.prompt_dropout) {
            self.conditioner.prompts.unconditional()
        } else {
            bundle.prompt.clone()
        };
        let (loss, grads) = self.gradients(&z0, &eps, t, &bundle, &prompt)?;
        self.opt.step(&mut self.params, &grads)?;
        let step = self.losses.len() + 1;
        self.losses.push((step, loss));
        Ok(TrainStepOutput {
            step,
            loss,
            t,
            sample: spec,
        })
    }

    pub fn train(&mut self, clips: &[TrainClip], steps: usize) -> Result<()> {
        for _ in 0..steps {
            let out = self.train_step(clips)?;
            if out.step % 100 == 0 {
                log::info!("step {} loss {:.5}", out.step, out.loss);
            }
        }
        Ok(())
    }

    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (step, loss) in &self.losses {
            writeln!(s, "{step},{loss}").unwrap();
        }
        s
    }

    /// Mean loss over a window of steps, for convergence checks.
    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let xs = &self.losses[range];
        xs.iter().map(|(_, l)| l).sum::<f64>() / xs.len() as f64
    }

    /// Parameters, model config and `extra` keys in `dir`.
    pub fn save_checkpoint(&self, dir: impl AsRef<Path>, extra: &KeyValues) -> Result<()> {
        save_checkpoint(dir, &self.params, &self.model, extra)
    }
}

pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    params: &DenoiserParams,
    model: &ModelConfig,
    extra: &KeyValues,
) -> Result<()> {
    let dir = dir.as_ref();
    params.save(dir)?;
    let mut kv = model.to_kv();
    kv.extend(extra);
    kv.save(dir.join("model.txt"))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(DenoiserParams, ModelConfig, KeyValues)> {
    let dir = dir.as_ref();
    let kv = KeyValues::load(dir.join("model.txt"))?;
    let model = ModelConfig::from_kv(&kv)?;
    let params = DenoiserParams::load(dir, &model)?;
    Ok((params, model, kv))
}
