use super::{FlowField, OcclusionMask};
use crate::error::{Error, Result};
use crate::imgproc::sample_frame;
use crate::media::{Frame, VideoClip};

/// The first frame re-rendered at another frame's geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpedFrame {
    pub frame: Frame,
    /// 1-based index of the frame the pixels came from; always 1.
    pub source_index: usize,
    pub fill_value: f32,
}

/// Pulls `src` through a backward field: output `p` samples `src` at
/// `p + flow(p)` (bilinear, clamp-to-edge). Occluded pixels get `fill`.
pub fn warp_frame(
    src: &Frame,
    flow: &FlowField,
    occ: Option<&OcclusionMask>,
    fill: f32,
) -> Result<Frame> {
    flow.matches_frame(src)?;
    if let Some(m) = occ {
        m.matches_flow(flow)?;
    }
    let (h, w) = src.dims();
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            if occ.is_some_and(|m| m.get(x, y)) {
                data.extend_from_slice(&[fill; 3]);
                continue;
            }
            let (u, v) = flow.get(x, y);
            data.extend_from_slice(&sample_frame(src, x as f32 + u, y as f32 + v));
        }
    }
    Frame::new(h, w, data)
}

pub fn warp_first_frame(
    first: &Frame,
    bwd: &FlowField,
    occ: &OcclusionMask,
    fill: f32,
) -> Result<WarpedFrame> {
    Ok(WarpedFrame {
        frame: warp_frame(first, bwd, Some(occ), fill)?,
        source_index: 1,
        fill_value: fill,
    })
}

/// Flow-warped video: frame `i` is `first` warped with `bwd[i]`, `occ[i]`.
/// Index 0 is expected to carry the identity flow and an empty mask.
pub fn warp_clip(
    first: &Frame,
    bwd: &[FlowField],
    occ: &[OcclusionMask],
    fill: f32,
    fps: u32,
    interval: u32,
) -> Result<VideoClip> {
    if bwd.len() != occ.len() || bwd.is_empty() {
        return Err(Error::Contract(format!(
            "warp_clip got {} flows and {} masks",
            bwd.len(),
            occ.len()
        )));
    }
    let frames = bwd
        .iter()
        .zip(occ)
        .map(|(f, m)| warp_first_frame(first, f, m, fill).map(|w| w.frame))
        .collect::<Result<Vec<_>>>()?;
    VideoClip::new(frames, fps, interval)
}
