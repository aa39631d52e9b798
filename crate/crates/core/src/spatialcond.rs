//! Per-frame spatial condition images: Canny edge maps and depth maps.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::codec::{CodecParams, LatentGrid};
use crate::error::{Error, Result};
use crate::imgproc::{gaussian_blur, Plane};
use crate::media::{self, Frame, VideoClip};
use crate::synth::{self, SceneSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionKind {
    Edge,
    Depth,
}

impl ConditionKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Edge => "canny",
            Self::Depth => "depth",
        }
    }
}

impl fmt::Display for ConditionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConditionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "canny" | "edge" => Ok(Self::Edge),
            "depth" => Ok(Self::Depth),
            _ => Err(Error::Config(format!("unknown control {s:?}; expected canny or depth"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionImage {
    pub kind: ConditionKind,
    /// Edge: 0/1 replicated over channels. Depth: [0,1], near = 1.
    pub frame: Frame,
    /// Set when the source had zero depth range and was mapped to 0.5.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CannyParams {
    pub low: f32,
    pub high: f32,
    pub sigma: f32,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self {
            low: 0.1,
            high: 0.2,
            sigma: 1.4,
        }
    }
}

fn gray_frame(h: usize, w: usize, values: &[f32]) -> Result<Frame> {
    Frame::new(h, w, values.iter().flat_map(|&v| [v; 3]).collect())
}

/// Raw Sobel response on the [0,1] blurred luma, borders replicated.
fn sobel(p: &Plane) -> (Vec<f32>, Vec<f32>) {
    let (w, h) = (p.width, p.height);
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let a = |dx: isize, dy: isize| p.at_clamped(x + dx, y + dy);
            let i = y as usize * w + x as usize;
            gx[i] = (a(1, -1) + 2.0 * a(1, 0) + a(1, 1)) - (a(-1, -1) + 2.0 * a(-1, 0) + a(-1, 1));
            gy[i] = (a(-1, 1) + 2.0 * a(0, 1) + a(1, 1)) - (a(-1, -1) + 2.0 * a(0, -1) + a(1, -1));
        }
    }
    (gx, gy)
}

pub fn canny_edges(frame: &Frame, params: &CannyParams) -> Result<ConditionImage> {
    let CannyParams { low, high, sigma } = *params;
    if !(low > 0.0 && low < high) {
        return Err(Error::Config(format!(
            "canny thresholds need 0 < low < high, got {low} and {high}"
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("canny sigma must be positive, got {sigma}")));
    }
    let (h, w) = frame.dims();
    let blurred = gaussian_blur(&Plane::luma(frame), sigma);
    let (gx, gy) = sobel(&blurred);
    let mag: Vec<f32> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    let at = |x: isize, y: isize| {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };

    // Non-maximum suppression along the quantised gradient direction. A
    // pixel survives if it is >= the neighbour behind and > the one ahead,
    // so a symmetric two-pixel ridge keeps exactly one pixel.
    let mut thin = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let m = mag[i];
            if m < low {
                continue;
            }
            let angle = gy[i].atan2(gx[i]).to_degrees().rem_euclid(180.0);
            let (dx, dy) = if !(22.5..157.5).contains(&angle) {
                (1, 0)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (0, 1)
            } else {
                (-1, 1)
            };
            let (xi, yi) = (x as isize, y as isize);
            if m >= at(xi - dx, yi - dy) && m > at(xi + dx, yi + dy) {
                thin[i] = m;
            }
        }
    }

    // Hysteresis: grow strong pixels through 8-connected weak ones.
    let mut edge = vec![0.0f32; w * h];
    let mut queue: VecDeque<usize> = thin
        .iter()
        .enumerate()
        .filter(|(_, &m)| m >= high)
        .map(|(i, _)| i)
        .collect();
    for &i in &queue {
        edge[i] = 1.0;
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if edge[j] == 0.0 && thin[j] >= low {
                    edge[j] = 1.0;
                    queue.push_back(j);
                }
            }
        }
    }
    Ok(ConditionImage {
        kind: ConditionKind::Edge,
        frame: gray_frame(h, w, &edge)?,
        degenerate: false,
    })
}

/// Min-max normalisation; a zero range maps to 0.5 and reports `true`.
pub fn normalize_depth(values: &[f32]) -> (Vec<f32>, bool) {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return (vec![0.5; values.len()], true);
    }
    (values.iter().map(|&v| (v - lo) / range).collect(), false)
}

#[derive(Debug, Clone)]
pub enum DepthSource<'a> {
    /// P5 image or rank-2 FVT1 tensor.
    File(&'a Path),
    /// Ground-truth depth of frame `frame` (0-based) of a procedural scene.
    Synthetic { spec: &'a SceneSpec, frame: usize },
}

pub fn load_or_synthesize_depth(source: DepthSource<'_>) -> Result<ConditionImage> {
    let (h, w, raw) = match source {
        DepthSource::File(path) => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            if bytes.starts_with(b"P5") {
                let g = media::load_pgm(path)?;
                (g.height, g.width, g.pixels.iter().map(|&p| p as f32).collect::<Vec<_>>())
            } else if bytes.starts_with(b"FVT1") {
                let t = media::decode_fvt1(&bytes)?;
                match t.dims[..] {
                    [h, w] | [h, w, 1] => (h, w, t.data),
                    _ => {
                        return Err(Error::Format(format!(
                            "depth tensor must be [H, W], got {:?}",
                            t.dims
                        )))
                    }
                }
            } else {
                return Err(Error::Format(format!(
                    "{}: depth must be P5 or FVT1",
                    path.display()
                )));
            }
        }
        DepthSource::Synthetic { spec, frame } => {
            let s = synth::generate(spec)?;
            let d = s.depth.get(frame).ok_or_else(|| {
                Error::Config(format!("scene has {} frames, asked for {frame}", s.depth.len()))
            })?;
            (spec.height, spec.width, d.clone())
        }
    };
    let (norm, degenerate) = normalize_depth(&raw);
    if degenerate {
        log::warn!("depth map has zero range; using 0.5 everywhere");
    }
    Ok(ConditionImage {
        kind: ConditionKind::Depth,
        frame: gray_frame(h, w, &norm)?,
        degenerate,
    })
}

/// Condition images for every frame of a clip. Depth needs one file per
/// frame in `depth_dir` (named as the scene generator writes them).
pub fn clip_conditions(
    clip: &VideoClip,
    kind: ConditionKind,
    canny: &CannyParams,
    depth_dir: Option<&Path>,
) -> Result<Vec<ConditionImage>> {
    match kind {
        ConditionKind::Edge => clip.frames.iter().map(|f| canny_edges(f, canny)).collect(),
        ConditionKind::Depth => {
            let dir = depth_dir.ok_or_else(|| {
                Error::Config("depth control needs a depth directory next to the clip".into())
            })?;
            (0..clip.len())
                .map(|i| {
                    let c = load_or_synthesize_depth(DepthSource::File(&dir.join(synth::depth_file_name(i))))?;
                    if c.frame.dims() != clip.dims() {
                        return Err(Error::Dimension(format!(
                            "depth {i} is {:?}, clip is {:?}",
                            c.frame.dims(),
                            clip.dims()
                        )));
                    }
                    Ok(c)
                })
                .collect()
        }
    }
}

/// Latent `c` for the control branch: the condition image through the
/// codec. The learned part of the condition encoder lives in the denoiser.
pub fn encode_condition(cond: &ConditionImage, codec: &CodecParams) -> Result<LatentGrid> {
    codec.encode(&cond.frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::{save_pgm, GrayImage, RawTensor};
    use crate::rng::SeededRng;
    use crate::synth::SceneKind;

    fn step(k: usize) -> Frame {
        Frame::from_fn(16, 16, |_, x, _| if x >= k { 1.0 } else { 0.0 }).unwrap()
    }

    fn noise(seed: u64) -> Frame {
        let mut rng = SeededRng::new(seed);
        Frame::from_fn(64, 64, |_, _, _| rng.uniform(0.0, 1.0) as f32).unwrap()
    }

    fn edge_bits(c: &ConditionImage) -> Vec<bool> {
        c.frame.data().chunks_exact(3).map(|p| p[0] == 1.0).collect()
    }

    #[test]
    fn constant_has_no_edges() {
        let c = canny_edges(&Frame::filled(16, 16, 0.4).unwrap(), &CannyParams::default()).unwrap();
        assert!(c.frame.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_gives_one_column() {
        for k in [5, 8, 11] {
            let c = canny_edges(&step(k), &CannyParams::default()).unwrap();
            let bits = edge_bits(&c);
            for y in 0..16 {
                let cols: Vec<usize> = (0..16).filter(|&x| bits[y * 16 + x]).collect();
                assert_eq!(cols.len(), 1, "row {y}: {cols:?}");
                assert!(cols[0].abs_diff(k) <= 1, "row {y}: {cols:?} vs {k}");
            }
        }
    }

    #[test]
    fn threshold_order_checked() {
        let f = step(8);
        let bad = CannyParams { low: 0.3, high: 0.2, sigma: 1.4 };
        assert!(matches!(canny_edges(&f, &bad), Err(Error::Config(_))));
        let bad = CannyParams { low: 0.0, ..CannyParams::default() };
        assert!(canny_edges(&f, &bad).is_err());
    }

    #[test]
    fn noise_edge_density_in_band() {
        for seed in 0..4 {
            let c = canny_edges(&noise(seed), &CannyParams::default()).unwrap();
            let bits = edge_bits(&c);
            let d = bits.iter().filter(|&&b| b).count() as f64 / bits.len() as f64;
            assert!(d > 0.0 && d < 0.5, "density {d}");
        }
    }

    #[test]
    fn depth_from_files() {
        let dir = tempfile::tempdir().unwrap();
        let p5 = dir.path().join("d.pgm");
        save_pgm(&GrayImage { width: 16, height: 16, pixels: vec![128; 256] }, &p5).unwrap();
        let c = load_or_synthesize_depth(DepthSource::File(&p5)).unwrap();
        assert!(c.degenerate);
        assert!(c.frame.data().iter().all(|&v| v == 0.5));

        let fvt = dir.path().join("d.fvt");
        let mut data = vec![6.0f32; 256];
        data[0] = 2.0;
        data[1] = 10.0;
        media::save_fvt1(&RawTensor::new(vec![16, 16], data).unwrap(), &fvt).unwrap();
        let c = load_or_synthesize_depth(DepthSource::File(&fvt)).unwrap();
        assert!(!c.degenerate);
        assert_eq!(c.frame.get(5, 5, 0), 0.5);
        assert_eq!(c.frame.get(0, 0, 0), 0.0);
        assert_eq!(c.frame.get(0, 1, 2), 1.0);

        assert!(matches!(
            load_or_synthesize_depth(DepthSource::File(&dir.path().join("missing.pgm"))),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn synthetic_square_depth() {
        let spec = SceneSpec::new(SceneKind::TranslatingSquare, 3, 4);
        let s = synth::generate(&spec).unwrap();
        let c = load_or_synthesize_depth(DepthSource::Synthetic { spec: &spec, frame: 2 }).unwrap();
        let (h, w) = c.frame.dims();
        for y in 0..h {
            for x in 0..w {
                let want = if s.depth[2][y * w + x] == 1.0 { 1.0 } else { 0.0 };
                assert_eq!(c.frame.get(y, x, 0), want);
            }
        }
    }

    #[test]
    fn condition_latents() {
        let codec = CodecParams::default();
        let f = step(8);
        let c = canny_edges(&f, &CannyParams::default()).unwrap();
        let a = encode_condition(&c, &codec).unwrap();
        assert_eq!(a.dims(), (2, 2, 4));
        assert_eq!(a, encode_condition(&c, &codec).unwrap());
        let zero = ConditionImage { kind: ConditionKind::Edge, frame: Frame::filled(16, 16, 0.0).unwrap(), degenerate: false };
        assert!(encode_condition(&zero, &codec).unwrap().data.iter().all(|&v| v == 0.0));
    }

    proptest::proptest! {
        #[test]
        fn edges_binary_and_shift_invariant(seed in 0u64..200, shift in -0.3f32..0.3) {
            let f = noise(seed).map(|v| v * 0.5 + 0.25);
            let a = canny_edges(&f, &CannyParams::default()).unwrap();
            proptest::prop_assert!(a.frame.data().iter().all(|&v| v == 0.0 || v == 1.0));
            let g = f.map(|v| v + shift);
            let b = canny_edges(&g, &CannyParams::default()).unwrap();
            // Equal up to float rounding of near-tie comparisons.
            let diff = edge_bits(&a).iter().zip(edge_bits(&b)).filter(|(x, y)| **x != *y).count();
            proptest::prop_assert!(diff <= 2, "{diff} pixels differ");
        }
    }
}
