//! Toy inflated U-Net that predicts `v` for a clip of latents, its
//! control branch, and the training loop.

mod bundle;
mod model;
mod params;
mod prompt;
mod train;

pub use bundle::{grids_to_tensor, tensor_to_grids, ConditionBundle, Conditioner};
pub use model::{forward, AttentionTrace, Denoiser, ForwardOptions};
pub use params::{DenoiserParams, CTRL_IN, MAIN_IN};
pub use prompt::{PromptEmbedding, PromptTable, MAX_TOKENS, VOCAB};
pub use train::{
    load_checkpoint, sample_clip, save_checkpoint, v_loss, AdamW, SampleReport, SampleSpec, TrainClip,
    TrainConfig, TrainStepOutput, Trainer,
};

use crate::error::{Error, Result};
use crate::manifest::KeyValues;

/// Architecture and ablation switches. Disabled inputs are fed as zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub width: usize,
    pub groups: usize,
    pub d_txt: usize,
    pub temb_dim: usize,
    pub use_flow: bool,
    pub use_first_frame: bool,
    pub use_occlusion: bool,
    pub use_control: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 32,
            groups: 8,
            d_txt: 32,
            temb_dim: 64,
            use_flow: true,
            use_first_frame: true,
            use_occlusion: true,
            use_control: true,
            seed: 0,
        }
    }
}

const CONFIG_KEYS: [&str; 9] = [
    "width",
    "groups",
    "d_txt",
    "temb_dim",
    "use_flow",
    "use_first_frame",
    "use_occlusion",
    "use_control",
    "model_seed",
];

impl ModelConfig {
    /// Spatial condition only: no flow, first-frame or occlusion inputs.
    pub fn spatial_only(seed: u64) -> Self {
        Self {
            use_flow: false,
            use_first_frame: false,
            use_occlusion: false,
            seed,
            ..Self::default()
        }
    }

    pub(crate) fn temb_freq_dim(&self) -> usize {
        self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.groups == 0 || self.width % self.groups != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of groups {}",
                self.width, self.groups
            )));
        }
        if self.width % 2 != 0 || self.d_txt == 0 || self.temb_dim == 0 {
            return Err(Error::Config("width must be even; d_txt and temb_dim positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("width", self.width);
        kv.set("groups", self.groups);
        kv.set("d_txt", self.d_txt);
        kv.set("temb_dim", self.temb_dim);
        kv.set("use_flow", self.use_flow);
        kv.set("use_first_frame", self.use_first_frame);
        kv.set("use_occlusion", self.use_occlusion);
        kv.set("use_control", self.use_control);
        kv.set("model_seed", self.seed);
        kv
    }

    /// Reads the model keys of `kv`; other keys are left to the caller.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            width: kv.parse_or("width", d.width)?,
            groups: kv.parse_or("groups", d.groups)?,
            d_txt: kv.parse_or("d_txt", d.d_txt)?,
            temb_dim: kv.parse_or("temb_dim", d.temb_dim)?,
            use_flow: kv.parse_or("use_flow", d.use_flow)?,
            use_first_frame: kv.parse_or("use_first_frame", d.use_first_frame)?,
            use_occlusion: kv.parse_or("use_occlusion", d.use_occlusion)?,
            use_control: kv.parse_or("use_control", d.use_control)?,
            seed: kv.parse_or("model_seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn keys() -> &'static [&'static str] {
        &CONFIG_KEYS
    }
}
