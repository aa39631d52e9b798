use std::path::{Path, PathBuf};

use clap::Args;
use flowvid_core::denoiser::ModelConfig;
use flowvid_core::diffusion::DEFAULT_CFG_SCALE;
use flowvid_core::editprop::{CalibrationMode, Editor};
use flowvid_core::manifest::KeyValues;
use flowvid_core::spatialcond::ConditionKind;
use flowvid_core::synth::SceneKind;
use flowvid_core::{Error, Result};

/// Flags shared by every subcommand. Each subcommand reads the ones it
/// needs; values given on the command line override the `--config` file.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// Input clip directory. `train` accepts it several times.
    #[arg(long)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Reference clip for `metrics`.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Spatial control: canny or depth.
    #[arg(long)]
    pub control: Option<String>,
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Key frame interval.
    #[arg(long)]
    pub interval: Option<usize>,
    /// Key frames per batch.
    #[arg(long)]
    pub batch_frames: Option<usize>,
    #[arg(long)]
    pub batches: Option<usize>,
    /// Training steps for `train`, DDIM steps otherwise.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub cfg_scale: Option<f64>,
    #[arg(long)]
    pub no_calibration: bool,
    #[arg(long)]
    pub no_injection: bool,
    /// identity, colormap or file:<path>.
    #[arg(long)]
    pub editor: Option<String>,
    /// key=value file; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Scene for `synth`: translating-square, panning or static.
    #[arg(long)]
    pub scene: Option<String>,
    #[arg(long)]
    pub frames: Option<usize>,
    /// Train without flow, first-frame and occlusion inputs.
    #[arg(long)]
    pub spatial_only: bool,
}

/// Fully resolved settings of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: String,
    pub inputs: Vec<PathBuf>,
    pub output: Option<PathBuf>,
    pub model_dir: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub control: ConditionKind,
    pub prompt: Option<String>,
    pub seed: u64,
    pub interval: usize,
    pub batch_frames: usize,
    pub batches: usize,
    pub steps: usize,
    pub cfg_scale: f64,
    pub calibration: bool,
    pub calibration_mode: CalibrationMode,
    pub injection: bool,
    pub editor: Editor,
    pub scene: SceneKind,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub canny_low: f32,
    pub canny_high: f32,
    pub canny_sigma: f32,
    pub fb_a: f64,
    pub fb_b: f64,
    pub train_frames: usize,
    pub learning_rate: f64,
    pub model: ModelConfig,
}

const FILE_KEYS: [&str; 27] = [
    "input",
    "output",
    "model",
    "reference",
    "control",
    "prompt",
    "seed",
    "interval",
    "batch_frames",
    "batches",
    "steps",
    "cfg_scale",
    "calibration",
    "calibration_mode",
    "injection",
    "editor",
    "scene",
    "frames",
    "frame_width",
    "frame_height",
    "canny_low",
    "canny_high",
    "canny_sigma",
    "fb_a",
    "fb_b",
    "train_frames",
    "learning_rate",
];

fn parse_with<T>(kv: &KeyValues, key: &str, f: impl FnOnce(&str) -> Result<T>) -> Result<Option<T>> {
    kv.get(key).map(f).transpose()
}

fn default_steps(command: &str) -> usize {
    match command {
        "train" => 500,
        _ => flowvid_core::diffusion::DEFAULT_STEPS,
    }
}

impl RunConfig {
    pub fn resolve(command: &str, flags: &Flags) -> Result<Self> {
        let kv = match &flags.config {
            Some(p) => KeyValues::load(p)?,
            None => KeyValues::default(),
        };
        // `command` is written to config.txt so the file can be fed back;
        // the subcommand given on the command line wins.
        let mut allowed: Vec<&str> = vec!["command"];
        allowed.extend(FILE_KEYS);
        allowed.extend(ModelConfig::keys());
        kv.reject_unknown(&allowed)?;

        let mut model = ModelConfig::from_kv(&kv)?;
        if flags.spatial_only {
            model = ModelConfig {
                use_flow: false,
                use_first_frame: false,
                use_occlusion: false,
                ..model
            };
        }

        let inputs = if flags.input.is_empty() {
            kv.get("input")
                .map(|s| s.split(',').filter(|p| !p.trim().is_empty()).map(|p| PathBuf::from(p.trim())).collect())
                .unwrap_or_default()
        } else {
            flags.input.clone()
        };
        let path = |flag: &Option<PathBuf>, key| flag.clone().or_else(|| kv.get(key).map(PathBuf::from));
        let control = match &flags.control {
            Some(s) => s.parse()?,
            None => parse_with(&kv, "control", |s| s.parse())?.unwrap_or(ConditionKind::Edge),
        };
        let editor = match &flags.editor {
            Some(s) => s.parse()?,
            None => parse_with(&kv, "editor", |s| s.parse())?.unwrap_or(Editor::Identity),
        };
        let scene = match &flags.scene {
            Some(s) => s.parse()?,
            None => parse_with(&kv, "scene", |s| s.parse())?.unwrap_or(SceneKind::TranslatingSquare),
        };
        let cfg = Self {
            command: command.to_string(),
            inputs,
            output: path(&flags.output, "output"),
            model_dir: path(&flags.model, "model"),
            reference: path(&flags.reference, "reference"),
            control,
            prompt: flags.prompt.clone().or_else(|| kv.get("prompt").map(str::to_string)),
            seed: flags.seed.map_or_else(|| kv.parse_or("seed", 0), Ok)?,
            interval: flags.interval.map_or_else(|| kv.parse_or("interval", 4), Ok)?,
            batch_frames: flags.batch_frames.map_or_else(|| kv.parse_or("batch_frames", 16), Ok)?,
            batches: flags.batches.map_or_else(|| kv.parse_or("batches", 1), Ok)?,
            steps: flags.steps.map_or_else(|| kv.parse_or("steps", default_steps(command)), Ok)?,
            cfg_scale: flags.cfg_scale.map_or_else(|| kv.parse_or("cfg_scale", DEFAULT_CFG_SCALE), Ok)?,
            calibration: !flags.no_calibration && kv.parse_or("calibration", true)?,
            calibration_mode: kv.parse_or("calibration_mode", CalibrationMode::PerChannel)?,
            injection: !flags.no_injection && kv.parse_or("injection", true)?,
            editor,
            scene,
            frames: flags.frames.map_or_else(|| kv.parse_or("frames", 12), Ok)?,
            width: kv.parse_or("frame_width", 64)?,
            height: kv.parse_or("frame_height", 64)?,
            canny_low: kv.parse_or("canny_low", 0.1)?,
            canny_high: kv.parse_or("canny_high", 0.2)?,
            canny_sigma: kv.parse_or("canny_sigma", 1.4)?,
            fb_a: kv.parse_or("fb_a", 0.01)?,
            fb_b: kv.parse_or("fb_b", 0.5)?,
            train_frames: kv.parse_or("train_frames", 4)?,
            learning_rate: kv.parse_or("learning_rate", 1e-3)?,
            model,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("--steps must be positive".into()));
        }
        if !(self.cfg_scale.is_finite() && self.cfg_scale >= 1.0) {
            return Err(Error::Config(format!("--cfg-scale must be >= 1, got {}", self.cfg_scale)));
        }
        if self.canny_low > self.canny_high {
            return Err(Error::Config("canny_low exceeds canny_high".into()));
        }
        Ok(())
    }

    pub fn output(&self) -> Result<&Path> {
        self.output
            .as_deref()
            .ok_or_else(|| Error::Config(format!("{} needs --output", self.command)))
    }

    pub fn input(&self) -> Result<&Path> {
        match self.inputs.as_slice() {
            [one] => Ok(one),
            [] => Err(Error::Config(format!("{} needs --input", self.command))),
            _ => Err(Error::Config(format!("{} takes a single --input", self.command))),
        }
    }

    pub fn model_dir(&self) -> Result<&Path> {
        self.model_dir
            .as_deref()
            .ok_or_else(|| Error::Config(format!("{} needs --model", self.command)))
    }

    /// The resolved configuration as written to `config.txt`.
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("command", &self.command);
        if !self.inputs.is_empty() {
            let inputs: Vec<String> = self.inputs.iter().map(|p| p.display().to_string()).collect();
            kv.set("input", inputs.join(","));
        }
        for (key, p) in [("output", &self.output), ("model", &self.model_dir), ("reference", &self.reference)] {
            if let Some(p) = p {
                kv.set(key, p.display());
            }
        }
        kv.set("control", self.control);
        if let Some(p) = &self.prompt {
            kv.set("prompt", p);
        }
        kv.set("seed", self.seed);
        kv.set("interval", self.interval);
        kv.set("batch_frames", self.batch_frames);
        kv.set("batches", self.batches);
        kv.set("steps", self.steps);
        kv.set("cfg_scale", self.cfg_scale);
        kv.set("calibration", self.calibration);
        kv.set("calibration_mode", self.calibration_mode);
        kv.set("injection", self.injection);
        kv.set("editor", &self.editor);
        kv.set("scene", self.scene);
        kv.set("frames", self.frames);
        kv.set("frame_width", self.width);
        kv.set("frame_height", self.height);
        kv.set("canny_low", self.canny_low);
        kv.set("canny_high", self.canny_high);
        kv.set("canny_sigma", self.canny_sigma);
        kv.set("fb_a", self.fb_a);
        kv.set("fb_b", self.fb_b);
        kv.set("train_frames", self.train_frames);
        kv.set("learning_rate", self.learning_rate);
        kv.extend(&self.model.to_kv());
        kv
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_and_unknown_keys_fail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.txt");
        std::fs::write(&p, "seed=3\ninterval=2\nframe_width=32\n").unwrap();
        let flags = Flags {
            config: Some(p.clone()),
            seed: Some(9),
            ..Flags::default()
        };
        let cfg = RunConfig::resolve("generate", &flags).unwrap();
        assert_eq!((cfg.seed, cfg.interval, cfg.width), (9, 2, 32));
        assert_eq!(cfg.steps, 20);

        std::fs::write(&p, "sead=3\n").unwrap();
        assert!(matches!(RunConfig::resolve("generate", &flags), Err(Error::Config(_))));
    }

    #[test]
    fn resolved_config_round_trips() {
        let flags = Flags {
            editor: Some("colormap".into()),
            no_injection: true,
            spatial_only: true,
            ..Flags::default()
        };
        let cfg = RunConfig::resolve("train", &flags).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("config.txt");
        let kv = cfg.to_kv();
        kv.save(&p).unwrap();
        let again = RunConfig::resolve(
            "train",
            &Flags {
                config: Some(p),
                ..Flags::default()
            },
        )
        .unwrap();
        assert_eq!(again, cfg);
    }
}
