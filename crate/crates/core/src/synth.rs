//! Procedural test scenes with exact ground-truth flow, occlusion and depth.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::flow::{FlowField, OcclusionMask};
use crate::media::{self, Frame, RawTensor, VideoClip};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    /// A textured square moving with constant integer velocity over a
    /// static textured background.
    TranslatingSquare,
    /// The whole image translating with constant integer velocity.
    Panning,
    /// No motion at all.
    Static,
}

impl SceneKind {
    pub const ALL: [SceneKind; 3] = [Self::TranslatingSquare, Self::Panning, Self::Static];

    pub fn name(self) -> &'static str {
        match self {
            Self::TranslatingSquare => "translating-square",
            Self::Panning => "panning",
            Self::Static => "static",
        }
    }
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scene {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub seed: u64,
    /// Per-frame displacement in pixels; `None` picks one from the seed.
    pub velocity: Option<(i32, i32)>,
}

impl SceneSpec {
    pub fn new(kind: SceneKind, frames: usize, seed: u64) -> Self {
        Self {
            kind,
            width: 64,
            height: 64,
            frames,
            seed,
            velocity: None,
        }
    }
}

/// Smooth colourful texture: a few random plane waves per channel.
#[derive(Debug, Clone)]
struct Texture {
    waves: [[(f32, f32, f32, f32); 3]; 3],
    base: [f32; 3],
}

impl Texture {
    fn random(rng: &mut SeededRng) -> Self {
        let mut waves = [[(0.0, 0.0, 0.0, 0.0); 3]; 3];
        for ch in waves.iter_mut() {
            for w in ch.iter_mut() {
                let freq = rng.uniform(0.08, 0.3) as f32;
                let ang = rng.uniform(0.0, std::f64::consts::TAU) as f32;
                *w = (
                    freq * ang.cos(),
                    freq * ang.sin(),
                    rng.uniform(0.0, std::f64::consts::TAU) as f32,
                    rng.uniform(0.04, 0.1) as f32,
                );
            }
        }
        let base = [
            rng.uniform(0.25, 0.75) as f32,
            rng.uniform(0.25, 0.75) as f32,
            rng.uniform(0.25, 0.75) as f32,
        ];
        Self { waves, base }
    }

    fn eval(&self, x: f32, y: f32) -> [f32; 3] {
        let mut out = self.base;
        for (c, o) in out.iter_mut().enumerate() {
            for &(kx, ky, ph, amp) in &self.waves[c] {
                *o += amp * (kx * x + ky * y + ph).sin();
            }
            *o = o.clamp(0.0, 1.0);
        }
        out
    }
}

/// A generated clip with its ground truth. Index 0 of every per-frame
/// vector refers to the first frame (identity flow, empty masks).
#[derive(Debug, Clone)]
pub struct SynthClip {
    pub spec: SceneSpec,
    pub clip: VideoClip,
    /// `F_{1→i}` on frame 1's grid.
    pub fwd: Vec<FlowField>,
    /// `F_{i→1}` on frame i's grid.
    pub bwd: Vec<FlowField>,
    pub fwd_occ: Vec<OcclusionMask>,
    pub bwd_occ: Vec<OcclusionMask>,
    /// Per-frame depth, near = 1, far = 0, row-major `[H, W]`.
    pub depth: Vec<Vec<f32>>,
    pub prompt: String,
}

struct Geometry {
    size: usize,
    start: (i32, i32),
    vel: (i32, i32),
}

impl Geometry {
    fn origin(&self, k: usize) -> (i32, i32) {
        (
            self.start.0 + self.vel.0 * k as i32,
            self.start.1 + self.vel.1 * k as i32,
        )
    }

    fn inside(&self, k: usize, x: usize, y: usize) -> bool {
        let (ox, oy) = self.origin(k);
        let (x, y) = (x as i32, y as i32);
        x >= ox && y >= oy && x < ox + self.size as i32 && y < oy + self.size as i32
    }
}

const COLOR_WORDS: [&str; 6] = ["red", "green", "blue", "orange", "purple", "teal"];

pub fn generate(spec: &SceneSpec) -> Result<SynthClip> {
    media::validate_dims(spec.height, spec.width)?;
    if spec.frames == 0 {
        return Err(Error::Config("a scene needs at least one frame".into()));
    }
    let (w, h, n) = (spec.width, spec.height, spec.frames);
    let mut rng = SeededRng::derive(spec.seed, spec.kind.name());
    let bg = Texture::random(&mut rng);
    let fg = Texture::random(&mut rng);
    let color = COLOR_WORDS[rng.below(COLOR_WORDS.len())];

    let span = n.saturating_sub(1) as i32;
    let (frames, fwd, bwd, fwd_occ, bwd_occ, depth, prompt) = match spec.kind {
        SceneKind::TranslatingSquare => {
            let size = (w.min(h) / 4).max(4);
            let vel = spec.velocity.unwrap_or_else(|| {
                let vx = 1 + rng.below(2) as i32;
                let vy = rng.below(2) as i32;
                (vx, vy)
            });
            let travel = (vel.0.abs() * span, vel.1.abs() * span);
            if travel.0 + size as i32 > w as i32 || travel.1 + size as i32 > h as i32 {
                return Err(Error::Config(format!(
                    "square moving {vel:?} for {n} frames leaves a {w}x{h} image"
                )));
            }
            let free = (w as i32 - size as i32 - travel.0, h as i32 - size as i32 - travel.1);
            let pick = |rng: &mut SeededRng, free: i32, v: i32, travel: i32| {
                let lo = rng.below(free as usize + 1) as i32;
                if v < 0 {
                    lo + travel
                } else {
                    lo
                }
            };
            let start = (
                pick(&mut rng, free.0, vel.0, travel.0),
                pick(&mut rng, free.1, vel.1, travel.1),
            );
            let g = Geometry { size, start, vel };
            let frames = (0..n)
                .map(|k| {
                    let (ox, oy) = g.origin(k);
                    Frame::from_fn(h, w, |y, x, c| {
                        if g.inside(k, x, y) {
                            fg.eval((x as i32 - ox) as f32, (y as i32 - oy) as f32)[c]
                        } else {
                            bg.eval(x as f32, y as f32)[c]
                        }
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut fwd = Vec::new();
            let mut bwd = Vec::new();
            let mut fwd_occ = Vec::new();
            let mut bwd_occ = Vec::new();
            for k in 0..n {
                let d = ((vel.0 * k as i32) as f32, (vel.1 * k as i32) as f32);
                fwd.push(FlowField::from_fn(w, h, |x, y| {
                    if g.inside(0, x, y) { d } else { (0.0, 0.0) }
                })?);
                bwd.push(FlowField::from_fn(w, h, |x, y| {
                    if g.inside(k, x, y) { (-d.0, -d.1) } else { (0.0, 0.0) }
                })?);
                let moved = k > 0 && vel != (0, 0);
                let mut fo = Vec::with_capacity(w * h);
                let mut bo = Vec::with_capacity(w * h);
                for y in 0..h {
                    for x in 0..w {
                        fo.push(moved && !g.inside(0, x, y) && g.inside(k, x, y));
                        bo.push(moved && !g.inside(k, x, y) && g.inside(0, x, y));
                    }
                }
                fwd_occ.push(OcclusionMask::new(w, h, fo)?);
                bwd_occ.push(OcclusionMask::new(w, h, bo)?);
            }
            let depth = (0..n)
                .map(|k| {
                    (0..h)
                        .flat_map(|y| (0..w).map(move |x| (x, y)))
                        .map(|(x, y)| if g.inside(k, x, y) { 1.0 } else { 0.0 })
                        .collect()
                })
                .collect();
            let prompt = format!("a {color} square moving over a textured wall");
            (frames, fwd, bwd, fwd_occ, bwd_occ, depth, prompt)
        }
        SceneKind::Panning | SceneKind::Static => {
            let vel = if spec.kind == SceneKind::Static {
                (0, 0)
            } else {
                spec.velocity.unwrap_or((1, 0))
            };
            if (vel.0.abs() * span) as usize >= w || (vel.1.abs() * span) as usize >= h {
                return Err(Error::Config(format!(
                    "pan {vel:?} over {n} frames exceeds the image"
                )));
            }
            // Frame k shows the texture displaced by k·vel.
            let frames = (0..n)
                .map(|k| {
                    let (dx, dy) = ((vel.0 * k as i32) as f32, (vel.1 * k as i32) as f32);
                    Frame::from_fn(h, w, |y, x, c| bg.eval(x as f32 - dx, y as f32 - dy)[c])
                })
                .collect::<Result<Vec<_>>>()?;
            let mut fwd = Vec::new();
            let mut bwd = Vec::new();
            let mut fwd_occ = Vec::new();
            let mut bwd_occ = Vec::new();
            for k in 0..n {
                let d = ((vel.0 * k as i32) as f32, (vel.1 * k as i32) as f32);
                fwd.push(FlowField::constant(w, h, d.0, d.1)?);
                bwd.push(FlowField::constant(w, h, -d.0, -d.1)?);
                let out = |x: usize, y: usize, s: f32| {
                    let qx = x as f32 + s * d.0;
                    let qy = y as f32 + s * d.1;
                    qx < 0.0 || qy < 0.0 || qx > (w - 1) as f32 || qy > (h - 1) as f32
                };
                let mut fo = Vec::with_capacity(w * h);
                let mut bo = Vec::with_capacity(w * h);
                for y in 0..h {
                    for x in 0..w {
                        fo.push(out(x, y, 1.0));
                        bo.push(out(x, y, -1.0));
                    }
                }
                fwd_occ.push(OcclusionMask::new(w, h, fo)?);
                bwd_occ.push(OcclusionMask::new(w, h, bo)?);
            }
            // Depth: a tilted plane that moves with the content.
            let depth = (0..n)
                .map(|k| {
                    let (dx, dy) = ((vel.0 * k as i32) as f32, (vel.1 * k as i32) as f32);
                    let diag = (w + h) as f32;
                    (0..h)
                        .flat_map(|y| (0..w).map(move |x| (x, y)))
                        .map(|(x, y)| ((x as f32 - dx + y as f32 - dy) / diag + 0.5).clamp(0.0, 1.0))
                        .collect()
                })
                .collect();
            let prompt = if spec.kind == SceneKind::Static {
                format!("a still {color} pattern")
            } else {
                format!("a {color} pattern sliding sideways")
            };
            (frames, fwd, bwd, fwd_occ, bwd_occ, depth, prompt)
        }
    };

    Ok(SynthClip {
        spec: spec.clone(),
        clip: VideoClip::new(frames, 30, 1)?,
        fwd,
        bwd,
        fwd_occ,
        bwd_occ,
        depth,
        prompt,
    })
}

pub fn depth_file_name(index: usize) -> String {
    format!("depth_{:04}.fvt", index + 1)
}

/// Writes the clip plus `gt/` flows and masks and `depth/` maps.
pub fn save_synth(s: &SynthClip, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    media::save_clip(&s.clip, dir)?;
    let gt = dir.join("gt");
    let depth = dir.join("depth");
    for d in [&gt, &depth] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let (h, w) = s.clip.dims();
    for i in 0..s.clip.len() {
        let tag = format!("{:04}", i + 1);
        s.fwd[i].save(gt.join(format!("flow_fwd_{tag}.flo")))?;
        s.bwd[i].save(gt.join(format!("flow_bwd_{tag}.flo")))?;
        s.fwd_occ[i].save(gt.join(format!("occ_fwd_{tag}.pgm")))?;
        s.bwd_occ[i].save(gt.join(format!("occ_bwd_{tag}.pgm")))?;
        let raw = RawTensor::new(vec![h, w], s.depth[i].clone())?;
        media::save_fvt1(&raw, depth.join(depth_file_name(i)))?;
    }
    let mut kv = crate::manifest::KeyValues::default();
    kv.set("scene", s.spec.kind);
    kv.set("seed", s.spec.seed);
    kv.set("width", s.spec.width);
    kv.set("height", s.spec.height);
    kv.set("frames", s.spec.frames);
    kv.set("prompt", &s.prompt);
    kv.save(dir.join("scene.txt"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{fb_occlusion, ConsistencyParams};

    #[test]
    fn deterministic_and_sized() {
        let spec = SceneSpec::new(SceneKind::TranslatingSquare, 12, 3);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.clip, b.clip);
        assert_eq!(a.clip.len(), 12);
        assert_eq!(a.bwd.len(), 12);
        assert_eq!(a.depth.len(), 12);
    }

    #[test]
    fn gt_flow_consistency_matches_gt_occlusion() {
        for kind in SceneKind::ALL {
            let s = generate(&SceneSpec::new(kind, 6, 11)).unwrap();
            for i in 0..6 {
                let (fo, bo) = fb_occlusion(&s.fwd[i], &s.bwd[i], &ConsistencyParams::default()).unwrap();
                assert_eq!(bo, s.bwd_occ[i], "{kind} frame {i} bwd");
                assert_eq!(fo, s.fwd_occ[i], "{kind} frame {i} fwd");
            }
        }
    }

    #[test]
    fn square_depth_is_binary() {
        let s = generate(&SceneSpec::new(SceneKind::TranslatingSquare, 2, 5)).unwrap();
        let ones = s.depth[0].iter().filter(|&&d| d == 1.0).count();
        assert_eq!(ones, 16 * 16);
        assert!(s.depth[0].iter().all(|&d| d == 0.0 || d == 1.0));
    }

    #[test]
    fn scene_names_parse() {
        for k in SceneKind::ALL {
            assert_eq!(k.name().parse::<SceneKind>().unwrap(), k);
        }
        assert!("nope".parse::<SceneKind>().is_err());
    }
}
