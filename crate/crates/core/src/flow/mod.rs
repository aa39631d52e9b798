//! Dense optical flow, forward-backward occlusion masks and warping of the
//! first frame onto every other frame of a clip.
//!
//! Convention: a backward field `F_{i→1}` lives on frame `i`'s pixel grid
//! and maps `p` in frame `i` to `p + F(p)` in frame 1. A forward field
//! `F_{1→i}` lives on frame 1's grid and maps the other way.

mod consistency;
mod estimate;
mod warp;

pub use consistency::{fb_occlusion, ConsistencyParams};
pub use estimate::{estimate_flow, FlowParams};
pub use warp::{warp_clip, warp_first_frame, warp_frame, WarpedFrame};

use std::path::Path;

use crate::error::{Error, Result};
use crate::imgproc::bilinear_taps;
use crate::media::{self, Frame, GrayImage, VideoClip};

#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    /// `u, v` interleaved per pixel, row-major.
    uv: Vec<f32>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, uv: Vec<f32>) -> Result<Self> {
        if uv.len() != width * height * 2 {
            return Err(Error::Dimension(format!(
                "flow {width}x{height} needs {} values, got {}",
                width * height * 2,
                uv.len()
            )));
        }
        for p in uv.chunks_exact(2) {
            if !p[0].is_finite() || !p[1].is_finite() {
                return Err(Error::Numeric("non-finite flow vector".into()));
            }
            if p[0].abs() >= width as f32 || p[1].abs() >= height as f32 {
                return Err(Error::Format(format!(
                    "flow vector ({}, {}) exceeds the {width}x{height} grid",
                    p[0], p[1]
                )));
            }
        }
        Ok(Self { height, width, uv })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            height,
            width,
            uv: vec![0.0; width * height * 2],
        }
    }

    pub fn constant(width: usize, height: usize, u: f32, v: f32) -> Result<Self> {
        Self::new(
            width,
            height,
            (0..width * height).flat_map(|_| [u, v]).collect(),
        )
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> (f32, f32),
    ) -> Result<Self> {
        let mut uv = Vec::with_capacity(width * height * 2);
        for y in 0..height {
            for x in 0..width {
                let (u, v) = f(x, y);
                uv.push(u);
                uv.push(v);
            }
        }
        Self::new(width, height, uv)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn uv(&self) -> &[f32] {
        &self.uv
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (f32, f32) {
        let i = (y * self.width + x) * 2;
        (self.uv[i], self.uv[i + 1])
    }

    /// Bilinear lookup with clamp-to-edge.
    pub fn sample(&self, x: f32, y: f32) -> (f32, f32) {
        let (x0, x1, fx) = bilinear_taps(x, self.width);
        let (y0, y1, fy) = bilinear_taps(y, self.height);
        let lerp = |c: usize| {
            let g = |xx: usize, yy: usize| self.uv[(yy * self.width + xx) * 2 + c];
            let top = g(x0, y0) * (1.0 - fx) + g(x1, y0) * fx;
            let bot = g(x0, y1) * (1.0 - fx) + g(x1, y1) * fx;
            top * (1.0 - fy) + bot * fy
        };
        (lerp(0), lerp(1))
    }

    pub fn same_dims(&self, other: &FlowField) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::Dimension(format!(
                "flow {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn matches_frame(&self, f: &Frame) -> Result<()> {
        if (self.height, self.width) != f.dims() {
            return Err(Error::Dimension(format!(
                "flow {}x{} vs frame {}x{}",
                self.width,
                self.height,
                f.width(),
                f.height()
            )));
        }
        Ok(())
    }

    pub fn negated(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            uv: self.uv.iter().map(|v| -v).collect(),
        }
    }

    pub fn scaled(&self, s: f32) -> Self {
        Self {
            height: self.height,
            width: self.width,
            uv: self.uv.iter().map(|v| v * s).collect(),
        }
    }

    pub fn mean_uv(&self) -> (f64, f64) {
        let n = (self.width * self.height) as f64;
        let (mut su, mut sv) = (0.0, 0.0);
        for p in self.uv.chunks_exact(2) {
            su += p[0] as f64;
            sv += p[1] as f64;
        }
        (su / n, sv / n)
    }

    /// Mean endpoint error against `other`, skipping pixels set in `skip`.
    pub fn mean_epe(&self, other: &FlowField, skip: Option<&OcclusionMask>) -> Result<f64> {
        self.same_dims(other)?;
        if let Some(m) = skip {
            m.matches_flow(self)?;
        }
        let (mut sum, mut n) = (0.0f64, 0usize);
        for (i, (a, b)) in self.uv.chunks_exact(2).zip(other.uv.chunks_exact(2)).enumerate() {
            if skip.is_some_and(|m| m.bits()[i]) {
                continue;
            }
            sum += ((a[0] - b[0]) as f64).hypot((a[1] - b[1]) as f64);
            n += 1;
        }
        if n == 0 {
            return Err(Error::Contract("no pixels left to compare".into()));
        }
        Ok(sum / n as f64)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (w, h, uv) = media::load_flo(path)?;
        Self::new(w, h, uv)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        media::save_flo(self.width, self.height, &self.uv, path)
    }
}

/// Per-pixel occlusion flags; `true` means the pixel has no valid
/// correspondence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OcclusionMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl OcclusionMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Dimension(format!(
                "mask {width}x{height} needs {} bits, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.bits.len() as f64
    }

    pub fn matches_flow(&self, f: &FlowField) -> Result<()> {
        if (self.width, self.height) != (f.width, f.height) {
            return Err(Error::Dimension(format!(
                "mask {}x{} vs flow {}x{}",
                self.width, self.height, f.width, f.height
            )));
        }
        Ok(())
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        }
    }

    /// Reads a P5 mask: 0 = visible, anything ≥ 128 = occluded.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let g = media::load_pgm(path)?;
        Self::new(g.width, g.height, g.pixels.iter().map(|&p| p >= 128).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        media::save_pgm(&self.to_gray(), path)
    }
}

/// Flows and masks relating the first frame of a clip to every frame.
/// Index 0 holds the identity (zero flow, empty masks).
#[derive(Debug, Clone)]
pub struct FirstFrameFlows {
    pub fwd: Vec<FlowField>,
    pub bwd: Vec<FlowField>,
    pub fwd_occ: Vec<OcclusionMask>,
    pub bwd_occ: Vec<OcclusionMask>,
}

impl FirstFrameFlows {
    pub fn estimate(
        clip: &VideoClip,
        params: &FlowParams,
        consistency: &ConsistencyParams,
    ) -> Result<Self> {
        let (h, w) = clip.dims();
        let first = &clip.frames[0];
        let mut out = Self {
            fwd: vec![FlowField::zeros(w, h)],
            bwd: vec![FlowField::zeros(w, h)],
            fwd_occ: vec![OcclusionMask::empty(w, h)],
            bwd_occ: vec![OcclusionMask::empty(w, h)],
        };
        for frame in &clip.frames[1..] {
            let fwd = estimate_flow(first, frame, params)?;
            let bwd = estimate_flow(frame, first, params)?;
            let (fo, bo) = fb_occlusion(&fwd, &bwd, consistency)?;
            out.fwd.push(fwd);
            out.bwd.push(bwd);
            out.fwd_occ.push(fo);
            out.bwd_occ.push(bo);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.bwd.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bwd.is_empty()
    }
}

/// Backward flows `F_{i+1→i}` and their occlusion masks for each adjacent
/// pair of a clip.
#[derive(Debug, Clone)]
pub struct AdjacentFlows {
    pub fwd: Vec<FlowField>,
    pub bwd: Vec<FlowField>,
    pub bwd_occ: Vec<OcclusionMask>,
}

impl AdjacentFlows {
    pub fn estimate(
        clip: &VideoClip,
        params: &FlowParams,
        consistency: &ConsistencyParams,
    ) -> Result<Self> {
        let mut out = Self {
            fwd: Vec::new(),
            bwd: Vec::new(),
            bwd_occ: Vec::new(),
        };
        for pair in clip.frames.windows(2) {
            let fwd = estimate_flow(&pair[0], &pair[1], params)?;
            let bwd = estimate_flow(&pair[1], &pair[0], params)?;
            let (_, bo) = fb_occlusion(&fwd, &bwd, consistency)?;
            out.fwd.push(fwd);
            out.bwd.push(bwd);
            out.bwd_occ.push(bo);
        }
        Ok(out)
    }
}
