use std::collections::HashMap;
use std::path::Path;

use super::ModelConfig;
use crate::codec::LATENT_CHANNELS;
use crate::error::{Error, Result};
use crate::manifest::KeyValues;
use crate::media;
use crate::rng::SeededRng;
use crate::tensorad::Tensor;

/// Input channels of the main branch: `z_t`, flow latent, first-frame
/// latent and the one-channel occlusion grid.
pub const MAIN_IN: usize = 3 * LATENT_CHANNELS + 1;
/// Input channels of the control branch: `z_t` and the flow latent.
pub const CTRL_IN: usize = 2 * LATENT_CHANNELS;
const COND_HIDDEN: usize = 16;

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

struct Init<'a> {
    rng: &'a mut SeededRng,
    out: Vec<(String, Tensor)>,
}

impl Init<'_> {
    fn push(&mut self, name: String, t: Tensor) {
        self.out.push((name, t));
    }

    fn uniform(&mut self, dims: &[usize], bound: f64) -> Tensor {
        let rng = &mut *self.rng;
        Tensor::from_fn(dims, |_| rng.uniform(-bound, bound))
    }

    /// Kaiming-uniform `[cout, cin, k, k]` kernel and zero bias.
    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) {
        let bound = (6.0 / (cin * k * k) as f64).sqrt();
        let w = self.uniform(&[cout, cin, k, k], bound);
        self.push(format!("{name}.w"), w);
        self.push(format!("{name}.b"), Tensor::zeros(&[cout]));
    }

    fn zero_conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) {
        self.push(format!("{name}.w"), Tensor::zeros(&[cout, cin, k, k]));
        self.push(format!("{name}.b"), Tensor::zeros(&[cout]));
    }

    /// Xavier-uniform `[fan_in, fan_out]` matrix.
    fn proj(&mut self, name: String, fan_in: usize, fan_out: usize) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = self.uniform(&[fan_in, fan_out], bound);
        self.push(name, w);
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        self.proj(format!("{name}.w"), fan_in, fan_out);
        self.push(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.push(format!("{name}.g"), Tensor::full(&[c], 1.0));
        self.push(format!("{name}.b"), Tensor::zeros(&[c]));
    }

    fn resblock(&mut self, p: &str, c: usize, temb: usize) {
        self.norm(&format!("{p}.gn1"), c);
        self.conv(&format!("{p}.conv1"), c, c, 3);
        self.linear(&format!("{p}.temb"), temb, c);
        self.norm(&format!("{p}.gn2"), c);
        self.conv(&format!("{p}.conv2"), c, c, 3);
    }

    fn attention(&mut self, p: &str, c: usize, ctx: usize) {
        self.norm(&format!("{p}.gn"), c);
        self.proj(format!("{p}.q"), c, c);
        self.proj(format!("{p}.k"), ctx, c);
        self.proj(format!("{p}.v"), ctx, c);
        self.proj(format!("{p}.o"), c, c);
    }

    fn transformer(&mut self, p: &str, c: usize, d_txt: usize, temporal: bool) {
        self.attention(&format!("{p}.st"), c, c);
        self.attention(&format!("{p}.cross"), c, d_txt);
        if temporal {
            self.attention(&format!("{p}.temp"), c, c);
        }
        self.norm(&format!("{p}.ff.gn"), c);
        self.linear(&format!("{p}.ff.l1"), c, 2 * c);
        self.linear(&format!("{p}.ff.l2"), 2 * c, c);
    }
}

impl DenoiserParams {
    fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut index = HashMap::new();
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        for (i, (n, t)) in entries.into_iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate parameter {n}")));
            }
            names.push(n);
            tensors.push(t);
        }
        Ok(Self {
            names,
            tensors,
            index,
        })
    }

    /// Fresh parameters. Augmentation input channels and every connection
    /// out of the control branch start at exactly zero; the control
    /// encoder starts as a copy of the main encoder.
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut rng = SeededRng::derive(cfg.seed, "denoiser-init");
        let mut ini = Init {
            rng: &mut rng,
            out: Vec::new(),
        };
        let (c, te, dt) = (cfg.width, cfg.temb_dim, cfg.d_txt);
        ini.linear("time.l1", cfg.temb_freq_dim(), te);
        ini.linear("time.l2", te, te);

        ini.conv("main.conv_in", c, MAIN_IN, 3);
        ini.resblock("main.res0", c, te);
        ini.transformer("main.tf0", c, dt, true);
        ini.conv("main.down", c, c, 3);
        ini.resblock("main.res1", c, te);
        ini.transformer("main.tf1", c, dt, true);
        ini.conv("main.up", c, 2 * c, 3);
        ini.resblock("main.res2", c, te);
        ini.norm("main.out_gn", c);
        ini.conv("main.conv_out", LATENT_CHANNELS, c, 3);

        ini.conv("ctrl.cond1", COND_HIDDEN, LATENT_CHANNELS, 3);
        ini.zero_conv("ctrl.cond2", c, COND_HIDDEN, 3);
        ini.zero_conv("ctrl.zero0", c, c, 1);
        ini.zero_conv("ctrl.zero1", c, c, 1);
        let mut entries = ini.out;

        // Zero the augmentation channels of the main input conv.
        {
            let w = &mut entries
                .iter_mut()
                .find(|(n, _)| n == "main.conv_in.w")
                .expect("conv_in present")
                .1;
            let per_in = 9;
            let data = w.data_mut();
            for o in 0..c {
                for i in LATENT_CHANNELS..MAIN_IN {
                    let base = (o * MAIN_IN + i) * per_in;
                    data[base..base + per_in].fill(0.0);
                }
            }
        }

        // Control encoder: copies of the main encoder blocks, minus the
        // temporal layers. Its input conv copies the first CTRL_IN channels.
        let lookup: HashMap<String, Tensor> = entries.iter().cloned().collect();
        let mut copies = Vec::new();
        {
            let w = &lookup["main.conv_in.w"];
            let src = w.data();
            let mut data = Vec::with_capacity(c * CTRL_IN * 9);
            for o in 0..c {
                data.extend_from_slice(&src[o * MAIN_IN * 9..(o * MAIN_IN + CTRL_IN) * 9]);
            }
            copies.push(("ctrl.conv_in.w".to_string(), Tensor::new(vec![c, CTRL_IN, 3, 3], data).unwrap()));
            copies.push(("ctrl.conv_in.b".to_string(), lookup["main.conv_in.b"].clone()));
        }
        for (name, t) in &entries {
            for block in ["res0", "tf0", "down", "res1", "tf1"] {
                let prefix = format!("main.{block}.");
                if let Some(rest) = name.strip_prefix(&prefix) {
                    if !rest.starts_with("temp.") {
                        copies.push((format!("ctrl.{block}.{rest}"), t.clone()));
                    }
                }
            }
        }
        entries.extend(copies);
        Self::from_entries(entries).expect("unique names")
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub(crate) fn index(&self) -> &HashMap<String, usize> {
        &self.index
    }

    /// `params.txt` maps names to FVT1 files in `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut kv = KeyValues::default();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            let file = format!("{n}.fvt");
            media::save_fvt1(&t.to_raw(), dir.join(&file))?;
            kv.set(n, file);
        }
        kv.save(dir.join("params.txt"))
    }

    /// Loads a checkpoint and checks it against the architecture of `cfg`.
    pub fn load(dir: impl AsRef<Path>, cfg: &ModelConfig) -> Result<Self> {
        let dir = dir.as_ref();
        let kv = KeyValues::load(dir.join("params.txt"))?;
        let reference = Self::init(cfg);
        let mut entries = Vec::with_capacity(reference.len());
        for (name, want) in reference.names.iter().zip(&reference.tensors) {
            let file = kv.require(name)?;
            let t = Tensor::from_raw(&media::load_fvt1(dir.join(file))?)?;
            if t.dims() != want.dims() {
                return Err(Error::Shape(format!(
                    "checkpoint {name} is {:?}, architecture wants {:?}",
                    t.dims(),
                    want.dims()
                )));
            }
            entries.push((name.clone(), t));
        }
        let known: Vec<&str> = reference.names.iter().map(String::as_str).collect();
        kv.reject_unknown(&known)?;
        Self::from_entries(entries)
    }

    /// Rounds every value through f32, as a save/load cycle would.
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        for t in &mut out.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        out
    }
}
