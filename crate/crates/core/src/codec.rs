//! Fixed linear stand-in for an image autoencoder: 8×8 space-to-depth
//! followed by a 192→4 projection. Deliberately lossy.

use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::OcclusionMask;
use crate::manifest::KeyValues;
use crate::media::{self, Frame, RawTensor, VideoClip};
use crate::rng::SeededRng;

pub const PATCH: usize = 8;
pub const PATCH_DIM: usize = PATCH * PATCH * 3;
pub const LATENT_CHANNELS: usize = 4;
pub const DEFAULT_CODEC_SEED: u64 = 0x5eed_c0dec;

/// Latent-resolution grid, channel-last `[h][w][c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl LatentGrid {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 || data.len() != h * w * c {
            return Err(Error::Shape(format!(
                "latent {h}x{w}x{c} with {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite latent value".into()));
        }
        Ok(Self { h, w, c, data })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self::filled(h, w, c, 0.0)
    }

    pub fn filled(h: usize, w: usize, c: usize, v: f64) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![v; h * w * c],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.h, self.w, self.c)
    }

    /// Seeded standard-normal grid.
    pub fn gaussian(h: usize, w: usize, c: usize, rng: &mut SeededRng) -> Self {
        Self {
            h,
            w,
            c,
            data: rng.normals(h * w * c),
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    pub fn same_shape(&self, other: &LatentGrid) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "latent {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// `a·self + b·other`, elementwise.
    pub fn axpby(&self, a: f64, other: &LatentGrid, b: f64) -> Result<Self> {
        self.same_shape(other)?;
        Ok(Self {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&x, &y)| a * x + b * y)
                .collect(),
            ..*self
        })
    }

    pub fn max_abs_diff(&self, other: &LatentGrid) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// The two projection matrices, both stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecParams {
    /// `[192, 4]`.
    pub forward_proj: Vec<f64>,
    /// `[4, 192]`.
    pub backward_proj: Vec<f64>,
    pub seed: u64,
}

impl Default for CodecParams {
    fn default() -> Self {
        Self::new(DEFAULT_CODEC_SEED)
    }
}

impl CodecParams {
    /// Column 0 is the normalised all-ones vector; columns 1..4 are seeded
    /// Gaussian vectors made orthonormal by Gram–Schmidt. With orthonormal
    /// columns the pseudo-inverse is the transpose.
    pub fn new(seed: u64) -> Self {
        let mut rng = SeededRng::derive(seed, "codec");
        let mut cols: Vec<Vec<f64>> = vec![vec![1.0 / (PATCH_DIM as f64).sqrt(); PATCH_DIM]];
        while cols.len() < LATENT_CHANNELS {
            let mut v = rng.normals(PATCH_DIM);
            // Two passes keep the basis orthonormal to round-off.
            for _ in 0..2 {
                for c in &cols {
                    let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
                }
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 1e-6 {
                cols.push(v.into_iter().map(|a| a / n).collect());
            }
        }
        let mut forward_proj = vec![0.0; PATCH_DIM * LATENT_CHANNELS];
        let mut backward_proj = vec![0.0; LATENT_CHANNELS * PATCH_DIM];
        for (j, col) in cols.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                forward_proj[i * LATENT_CHANNELS + j] = v;
                backward_proj[j * PATCH_DIM + i] = v;
            }
        }
        Self {
            forward_proj,
            backward_proj,
            seed,
        }
    }

    /// Writes `codec_forward.fvt`, `codec_backward.fvt` and `codec.txt`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let f = RawTensor::new(
            vec![PATCH_DIM, LATENT_CHANNELS],
            self.forward_proj.iter().map(|&v| v as f32).collect(),
        )?;
        let b = RawTensor::new(
            vec![LATENT_CHANNELS, PATCH_DIM],
            self.backward_proj.iter().map(|&v| v as f32).collect(),
        )?;
        media::save_fvt1(&f, dir.join("codec_forward.fvt"))?;
        media::save_fvt1(&b, dir.join("codec_backward.fvt"))?;
        let mut kv = KeyValues::default();
        kv.set("codec_seed", self.seed);
        kv.set("forward", "codec_forward.fvt");
        kv.set("backward", "codec_backward.fvt");
        kv.save(dir.join("codec.txt"))
    }

    /// Rebuilds from the recorded seed; the FVT1 files are informational.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let kv = KeyValues::load(dir.as_ref().join("codec.txt"))?;
        Ok(Self::new(kv.parse("codec_seed")?))
    }

    fn patch(frame: &Frame, by: usize, bx: usize, out: &mut [f64; PATCH_DIM]) {
        let mut i = 0;
        for dy in 0..PATCH {
            for dx in 0..PATCH {
                let p = frame.pixel(by * PATCH + dy, bx * PATCH + dx);
                for v in p {
                    out[i] = v as f64;
                    i += 1;
                }
            }
        }
    }

    pub fn encode(&self, frame: &Frame) -> Result<LatentGrid> {
        let (h, w) = frame.dims();
        media::validate_dims(h, w)?;
        let (lh, lw) = (h / PATCH, w / PATCH);
        let mut data = vec![0.0; lh * lw * LATENT_CHANNELS];
        let mut p = [0.0; PATCH_DIM];
        for by in 0..lh {
            for bx in 0..lw {
                Self::patch(frame, by, bx, &mut p);
                let z = &mut data[(by * lw + bx) * LATENT_CHANNELS..][..LATENT_CHANNELS];
                for (i, &pv) in p.iter().enumerate() {
                    let row = &self.forward_proj[i * LATENT_CHANNELS..][..LATENT_CHANNELS];
                    for (zj, &f) in z.iter_mut().zip(row) {
                        *zj += pv * f;
                    }
                }
            }
        }
        LatentGrid::new(lh, lw, LATENT_CHANNELS, data)
    }

    /// Pixel values before clamping, `[H][W][3]`.
    pub fn decode_raw(&self, z: &LatentGrid) -> Result<Vec<f64>> {
        if z.c != LATENT_CHANNELS {
            return Err(Error::Shape(format!(
                "decoder expects {LATENT_CHANNELS} channels, got {}",
                z.c
            )));
        }
        let (h, w) = (z.h * PATCH, z.w * PATCH);
        let mut out = vec![0.0; h * w * 3];
        for by in 0..z.h {
            for bx in 0..z.w {
                for j in 0..LATENT_CHANNELS {
                    let zj = z.get(by, bx, j);
                    let row = &self.backward_proj[j * PATCH_DIM..][..PATCH_DIM];
                    for (i, &b) in row.iter().enumerate() {
                        let (dy, rest) = (i / (PATCH * 3), i % (PATCH * 3));
                        let (dx, c) = (rest / 3, rest % 3);
                        out[((by * PATCH + dy) * w + bx * PATCH + dx) * 3 + c] += zj * b;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn decode(&self, z: &LatentGrid) -> Result<Frame> {
        let raw = self.decode_raw(z)?;
        Frame::new(
            z.h * PATCH,
            z.w * PATCH,
            raw.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
        )
    }

    pub fn encode_clip(&self, clip: &VideoClip) -> Result<Vec<LatentGrid>> {
        clip.frames.iter().map(|f| self.encode(f)).collect()
    }

    pub fn decode_all(&self, zs: &[LatentGrid]) -> Result<Vec<Frame>> {
        zs.iter().map(|z| self.decode(z)).collect()
    }
}

/// Per-channel affine map between codec latents and the diffusion space:
/// `z' = (z − shift)·scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentNorm {
    pub shift: [f64; LATENT_CHANNELS],
    pub scale: [f64; LATENT_CHANNELS],
}

impl Default for LatentNorm {
    fn default() -> Self {
        // Channel 0 carries the patch mean times √192; mid-gray maps to 0.
        // Scales bring synthetic-scene latents to roughly unit spread.
        let gray = 0.5 * (PATCH_DIM as f64).sqrt();
        Self {
            shift: [gray, 0.0, 0.0, 0.0],
            scale: [0.8, 6.0, 6.0, 6.0],
        }
    }
}

impl LatentNorm {
    pub fn identity() -> Self {
        Self {
            shift: [0.0; LATENT_CHANNELS],
            scale: [1.0; LATENT_CHANNELS],
        }
    }

    pub fn apply(&self, z: &LatentGrid) -> LatentGrid {
        self.per_channel(z, |v, c| (v - self.shift[c]) * self.scale[c])
    }

    pub fn invert(&self, z: &LatentGrid) -> LatentGrid {
        self.per_channel(z, |v, c| v / self.scale[c] + self.shift[c])
    }

    fn per_channel(&self, z: &LatentGrid, f: impl Fn(f64, usize) -> f64) -> LatentGrid {
        let data = z
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i % z.c;
                if c < LATENT_CHANNELS { f(v, c) } else { v }
            })
            .collect();
        LatentGrid { data, ..*z }
    }
}

/// How a full-resolution occlusion mask is brought to latent resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskPooling {
    /// Fraction of occluded pixels per 8×8 cell.
    #[default]
    Average,
    /// The pixel nearest the cell centre, as 0 or 1.
    Nearest,
}

impl std::str::FromStr for MaskPooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Self::Average),
            "nearest" => Ok(Self::Nearest),
            _ => Err(Error::Config(format!("unknown mask pooling {s:?}"))),
        }
    }
}

impl std::fmt::Display for MaskPooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Average => "average",
            Self::Nearest => "nearest",
        })
    }
}

/// One-channel latent-resolution occlusion grid with values in [0,1].
pub fn pool_mask(mask: &OcclusionMask, mode: MaskPooling) -> Result<LatentGrid> {
    let (w, h) = (mask.width(), mask.height());
    if w % PATCH != 0 || h % PATCH != 0 {
        return Err(Error::Dimension(format!("mask {w}x{h} not divisible by {PATCH}")));
    }
    let (lh, lw) = (h / PATCH, w / PATCH);
    let mut data = Vec::with_capacity(lh * lw);
    for by in 0..lh {
        for bx in 0..lw {
            let v = match mode {
                MaskPooling::Average => {
                    let mut n = 0usize;
                    for dy in 0..PATCH {
                        for dx in 0..PATCH {
                            n += mask.get(bx * PATCH + dx, by * PATCH + dy) as usize;
                        }
                    }
                    n as f64 / (PATCH * PATCH) as f64
                }
                MaskPooling::Nearest => {
                    mask.get(bx * PATCH + PATCH / 2, by * PATCH + PATCH / 2) as u8 as f64
                }
            };
            data.push(v);
        }
    }
    LatentGrid::new(lh, lw, 1, data)
}
