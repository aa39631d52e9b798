use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::media::{frame_stats, Frame, FrameStats};

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
/// Standard deviations at or below this count as zero.
const MIN_STD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CalibrationMode {
    /// Match mean and std of each RGB channel.
    #[default]
    PerChannel,
    /// Match the luma moments with one affine map shared by all channels.
    Luminance,
}

impl FromStr for CalibrationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-channel" | "channel" => Ok(Self::PerChannel),
            "luminance" | "luma" => Ok(Self::Luminance),
            _ => Err(Error::Config(format!("unknown calibration mode {s:?}"))),
        }
    }
}

impl fmt::Display for CalibrationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PerChannel => "per-channel",
            Self::Luminance => "luminance",
        })
    }
}

/// Reference moments, usually of the first edited frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefStats {
    pub channels: FrameStats,
    pub luma_mean: f64,
    pub luma_std: f64,
}

impl RefStats {
    pub fn of(frame: &Frame) -> Self {
        let (luma_mean, luma_std) = luma_moments(frame);
        Self {
            channels: frame_stats(frame),
            luma_mean,
            luma_std,
        }
    }
}

fn luma_moments(frame: &Frame) -> (f64, f64) {
    let l: Vec<f64> = frame
        .data()
        .chunks_exact(3)
        .map(|p| (0..3).map(|c| LUMA[c] * p[c] as f64).sum())
        .collect();
    let n = l.len() as f64;
    let m = l.iter().sum::<f64>() / n;
    let v = l.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Mean of the luma plane in f64.
pub fn mean_luminance(frame: &Frame) -> f64 {
    luma_moments(frame).0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibrated {
    /// Before clamping; its moments equal the reference.
    pub unclamped: Frame,
    pub frame: Frame,
    /// Channels left unchanged because their std was zero. In luminance
    /// mode a flat luma plane reports all three.
    pub zero_std: Vec<usize>,
}

/// Maps `frame` so its moments match `reference`, then clamps to [0,1].
pub fn color_calibrate(frame: &Frame, reference: &RefStats, mode: CalibrationMode) -> Result<Calibrated> {
    let mut gain = [1.0f64; 3];
    let mut offset = [0.0f64; 3];
    let mut zero_std = Vec::new();
    match mode {
        CalibrationMode::PerChannel => {
            let s = frame_stats(frame);
            for c in 0..3 {
                if s.std[c] <= MIN_STD {
                    zero_std.push(c);
                    continue;
                }
                gain[c] = reference.channels.std[c] / s.std[c];
                offset[c] = reference.channels.mean[c] - s.mean[c] * gain[c];
            }
        }
        CalibrationMode::Luminance => {
            let (m, s) = luma_moments(frame);
            if s <= MIN_STD {
                zero_std.extend(0..3);
            } else {
                let g = reference.luma_std / s;
                gain = [g; 3];
                offset = [reference.luma_mean - m * g; 3];
            }
        }
    }
    let data: Vec<f32> = frame
        .data()
        .chunks_exact(3)
        .flat_map(|p| (0..3).map(move |c| (p[c] as f64 * gain[c] + offset[c]) as f32))
        .collect();
    let (h, w) = frame.dims();
    let unclamped = Frame::new(h, w, data)
        .map_err(|e| Error::Numeric(format!("calibration produced invalid pixels: {e}")))?;
    Ok(Calibrated {
        frame: unclamped.clamped(),
        unclamped,
        zero_std,
    })
}
