//! Frames, clips and the on-disk formats the pipeline reads and writes:
//! binary PPM (P6 colour, P5 grey), the `FVT1` raw tensor container, the
//! Middlebury `PIEH` flow file and clip directories with a text manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::manifest::KeyValues;

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// H×W×3 image, row-major, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

pub fn validate_dims(height: usize, width: usize) -> Result<()> {
    if height < 16 || width < 16 {
        return Err(Error::Dimension(format!(
            "frame {width}x{height} is smaller than 16x16"
        )));
    }
    if height % 8 != 0 || width % 8 != 0 {
        return Err(Error::Dimension(format!(
            "frame {width}x{height} is not divisible by 8"
        )));
    }
    Ok(())
}

impl Frame {
    /// Builds a frame from channel-last data. Values must be finite; the
    /// [0, 1] range is only enforced by the loaders, so intermediate results
    /// such as uncalibrated colour statistics can be represented.
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        validate_dims(height, width)?;
        if data.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "expected {} values for {width}x{height}x3, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite pixel value {v}")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * 3])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamped(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Luma plane (Rec. 601 weights) in row-major order.
    pub fn luma(&self) -> Vec<f32> {
        self.data
            .chunks_exact(3)
            .map(|p| (LUMA[0] * p[0] as f64 + LUMA[1] * p[1] as f64 + LUMA[2] * p[2] as f64) as f32)
            .collect()
    }

    pub fn mean_luma(&self) -> f64 {
        let l = self.luma();
        l.iter().map(|&v| v as f64).sum::<f64>() / l.len() as f64
    }

    pub fn same_dims(&self, other: &Frame) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Dimension(format!(
                "frame dims {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }
}

/// Mean squared error over all values of two same-sized frames.
pub fn mse(a: &Frame, b: &Frame) -> Result<f64> {
    a.same_dims(b)?;
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.data.len() as f64)
}

pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / m).log10()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<Frame>,
    pub fps: u32,
    pub frame_interval: u32,
}

impl VideoClip {
    pub fn new(frames: Vec<Frame>, fps: u32, frame_interval: u32) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::Contract("a clip needs at least one frame".into()));
        };
        if frame_interval == 0 {
            return Err(Error::Contract("frame interval must be positive".into()));
        }
        for f in &frames[1..] {
            first.same_dims(f)?;
        }
        Ok(Self {
            frames,
            fps,
            frame_interval,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }

    /// Sub-clip of the frames at `indices`, with the stride recorded.
    pub fn select(&self, indices: &[usize], interval: u32) -> Result<Self> {
        let frames = indices
            .iter()
            .map(|&i| {
                self.frames.get(i).cloned().ok_or_else(|| {
                    Error::Contract(format!("frame index {i} out of range ({})", self.len()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(frames, self.fps, interval.max(1))
    }
}

/// Per-channel population moments of one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

pub fn frame_stats(frame: &Frame) -> FrameStats {
    let n = (frame.height * frame.width) as f64;
    let mut sum = [0.0f64; 3];
    for p in frame.data.chunks_exact(3) {
        for c in 0..3 {
            sum[c] += p[c] as f64;
        }
    }
    let mean = sum.map(|s| s / n);
    let mut var = [0.0f64; 3];
    for p in frame.data.chunks_exact(3) {
        for c in 0..3 {
            let d = p[c] as f64 - mean[c];
            var[c] += d * d;
        }
    }
    FrameStats {
        mean,
        std: var.map(|v| (v / n).sqrt()),
    }
}

// ---------------------------------------------------------------------------
// PPM

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_ws_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_ws_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format("expected a number in PNM header".into()));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("bad number in PNM header".into()))
    }
}

/// Parses a binary PNM (`P5` or `P6`, maxval 255). Returns
/// `(width, height, channels, pixels)`.
fn parse_pnm(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::Format("missing PNM magic".into()));
    }
    let channels = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        m => {
            return Err(Error::Format(format!(
                "unsupported PNM magic P{}",
                m as char
            )))
        }
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number()?;
    let height = cur.number()?;
    let maxval = cur.number()?;
    if maxval != 255 {
        return Err(Error::Format(format!("maxval {maxval} unsupported")));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(Error::Format("PNM header not terminated".into())),
    }
    let n = width * height * channels;
    let payload = &bytes[cur.pos..];
    if payload.len() < n {
        return Err(Error::Format(format!(
            "PNM payload truncated: {} of {n} bytes",
            payload.len()
        )));
    }
    Ok((width, height, channels, &payload[..n]))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

#[inline]
fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Loads a P6 PPM or a rank-3 `[H, W, 3]` FVT1 tensor.
pub fn load_frame(path: impl AsRef<Path>) -> Result<Frame> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    if bytes.starts_with(FVT1_MAGIC) {
        let t = decode_fvt1(&bytes)?;
        if t.dims.len() != 3 || t.dims[2] != 3 {
            return Err(Error::Format(format!(
                "FVT1 frame must have dims [H, W, 3], got {:?}",
                t.dims
            )));
        }
        if t.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Format("FVT1 frame values outside [0, 1]".into()));
        }
        return Frame::new(t.dims[0], t.dims[1], t.data);
    }
    let (w, h, ch, px) = parse_pnm(&bytes)?;
    if ch != 3 {
        return Err(Error::Format("expected a colour (P6) image".into()));
    }
    validate_dims(h, w)?;
    Frame::new(h, w, px.iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn encode_ppm(frame: &Frame) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend(frame.data.iter().map(|&v| quantize(v)));
    out
}

pub fn save_frame(frame: &Frame, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_ppm(frame))
}

/// Single-channel 8-bit image as stored in a P5 file.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let (width, height, ch, px) = parse_pnm(&bytes)?;
    if ch != 1 {
        return Err(Error::Format("expected a grey (P5) image".into()));
    }
    Ok(GrayImage {
        width,
        height,
        pixels: px.to_vec(),
    })
}

pub fn save_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    write_bytes(path.as_ref(), &out)
}

// ---------------------------------------------------------------------------
// FVT1

pub const FVT1_MAGIC: &[u8; 4] = b"FVT1";

/// Dense f32 tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("truncated header".into()))
}

pub fn encode_fvt1(t: &RawTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.dims.len() + 4 * t.data.len());
    out.extend_from_slice(FVT1_MAGIC);
    out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    for &d in &t.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_fvt1(bytes: &[u8]) -> Result<RawTensor> {
    if !bytes.starts_with(FVT1_MAGIC) {
        return Err(Error::Format("missing FVT1 magic".into()));
    }
    let rank = read_u32(bytes, 4)? as usize;
    if rank > 16 {
        return Err(Error::Format(format!("implausible FVT1 rank {rank}")));
    }
    let dims = (0..rank)
        .map(|i| read_u32(bytes, 8 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("FVT1 dims overflow".into()))?;
    let start = 8 + 4 * rank;
    let payload = &bytes[start.min(bytes.len())..];
    if payload.len() != 4 * n {
        return Err(Error::Format(format!(
            "FVT1 payload holds {} bytes, dims {dims:?} need {}",
            payload.len(),
            4 * n
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("FVT1 payload contains NaN/Inf".into()));
    }
    Ok(RawTensor { dims, data })
}

pub fn load_fvt1(path: impl AsRef<Path>) -> Result<RawTensor> {
    decode_fvt1(&read_bytes(path.as_ref())?)
}

pub fn save_fvt1(t: &RawTensor, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_fvt1(t))
}

// ---------------------------------------------------------------------------
// Middlebury .flo

pub const FLO_MAGIC: &[u8; 4] = b"PIEH";

/// Returns `(width, height, uv)` with `u, v` interleaved per pixel.
pub fn decode_flo(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    if !bytes.starts_with(FLO_MAGIC) {
        return Err(Error::Format("missing PIEH magic".into()));
    }
    let w = read_u32(bytes, 4)? as usize;
    let h = read_u32(bytes, 8)? as usize;
    let payload = &bytes[12..];
    if payload.len() != w * h * 8 {
        return Err(Error::Format(format!(
            "flow payload holds {} bytes, {w}x{h} needs {}",
            payload.len(),
            w * h * 8
        )));
    }
    let uv: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if uv.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("flow contains NaN/Inf".into()));
    }
    Ok((w, h, uv))
}

pub fn encode_flo(width: usize, height: usize, uv: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + uv.len() * 4);
    out.extend_from_slice(FLO_MAGIC);
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    for &v in uv {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn load_flo(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f32>)> {
    decode_flo(&read_bytes(path.as_ref())?)
}

pub fn save_flo(width: usize, height: usize, uv: &[f32], path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_flo(width, height, uv))
}

// ---------------------------------------------------------------------------
// Clip directories

pub const CLIP_MANIFEST: &str = "clip.txt";

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{:04}.ppm", index + 1)
}

pub fn save_clip(clip: &VideoClip, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in clip.frames.iter().enumerate() {
        save_frame(f, dir.join(frame_file_name(i)))?;
    }
    let mut kv = KeyValues::default();
    kv.set("fps", clip.fps);
    kv.set("interval", clip.frame_interval);
    kv.set("frames", clip.len());
    kv.save(dir.join(CLIP_MANIFEST))
}

pub fn load_clip(dir: impl AsRef<Path>) -> Result<VideoClip> {
    let dir = dir.as_ref();
    let kv = KeyValues::load(dir.join(CLIP_MANIFEST))?;
    kv.reject_unknown(&["fps", "interval", "frames"])?;
    let fps: u32 = kv.parse("fps")?;
    let interval: u32 = kv.parse("interval")?;
    let n: usize = kv.parse("frames")?;
    let frames = (0..n)
        .map(|i| load_frame(dir.join(frame_file_name(i))))
        .collect::<Result<Vec<_>>>()?;
    VideoClip::new(frames, fps, interval)
}

pub fn clip_frame_paths(dir: &Path, n: usize) -> Vec<PathBuf> {
    (0..n).map(|i| dir.join(frame_file_name(i))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ppm_bytes(w: usize, h: usize, byte: u8) -> Vec<u8> {
        let mut b = format!("P6\n{w} {h}\n255\n").into_bytes();
        b.extend(std::iter::repeat(byte).take(w * h * 3));
        b
    }

    fn write_tmp(name: &str, bytes: &[u8]) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(name);
        fs::write(&p, bytes).unwrap();
        (dir, p)
    }

    #[test]
    fn load_zero_and_saturated_ppm() {
        let (_d, p) = write_tmp("z.ppm", &ppm_bytes(16, 16, 0));
        assert!(load_frame(&p).unwrap().data().iter().all(|&v| v == 0.0));
        let (_d, p) = write_tmp("s.ppm", &ppm_bytes(16, 16, 255));
        assert!(load_frame(&p).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn load_mid_byte_maps_by_255() {
        let (_d, p) = write_tmp("m.ppm", &ppm_bytes(16, 16, 128));
        let f = load_frame(&p).unwrap();
        let expected = 128.0f32 / 255.0;
        assert!(f.data().iter().all(|&v| v == expected));
        assert!((expected - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut b = b"P6\n# made by hand\n16 16\n255\n".to_vec();
        b.extend(std::iter::repeat(7u8).take(16 * 16 * 3));
        let (_d, p) = write_tmp("c.ppm", &b);
        assert_eq!(load_frame(&p).unwrap().dims(), (16, 16));
    }

    #[test]
    fn malformed_magic_and_bad_dims() {
        let (_d, p) = write_tmp("bad.ppm", b"P3\n16 16\n255\n");
        assert!(matches!(load_frame(&p), Err(Error::Format(_))));
        let (_d, p) = write_tmp("odd.ppm", &ppm_bytes(20, 16, 0));
        assert!(matches!(load_frame(&p), Err(Error::Dimension(_))));
        let (_d, p) = write_tmp("short.ppm", &ppm_bytes(16, 16, 0)[..100]);
        assert!(matches!(load_frame(&p), Err(Error::Format(_))));
    }

    #[test]
    fn save_load_uniform_half() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.ppm");
        let f = Frame::filled(16, 24, 0.5).unwrap();
        save_frame(&f, &p).unwrap();
        let g = load_frame(&p).unwrap();
        // floor(0.5 * 255 + 0.5) / 255 = 128 / 255
        for &v in g.data() {
            assert!((v - 0.5).abs() <= 1.0 / 510.0 + 1e-7);
            assert_eq!(v, 128.0 / 255.0);
        }
        let z = Frame::filled(16, 16, 0.0).unwrap();
        save_frame(&z, &p).unwrap();
        assert_eq!(load_frame(&p).unwrap(), z);
    }

    #[test]
    fn quantization_error_bound_over_all_levels() {
        // Brute force: every byte level and the midpoints between them.
        for b in 0..=255u32 {
            for off in [-0.49f32, 0.0, 0.49] {
                let v = ((b as f32 + off) / 255.0).clamp(0.0, 1.0);
                let back = quantize(v) as f32 / 255.0;
                assert!((back - v).abs() <= 1.0 / 510.0 + 1e-7, "b={b} off={off}");
            }
        }
    }

    #[test]
    fn stats_constant_and_two_point() {
        let f = Frame::filled(16, 16, 0.3).unwrap();
        let s = frame_stats(&f);
        for c in 0..3 {
            assert!((s.mean[c] - 0.3).abs() < 1e-7);
            assert!(s.std[c] < 1e-7);
        }
        let half = Frame::from_fn(16, 16, |y, _, _| if y < 8 { 0.0 } else { 1.0 }).unwrap();
        let s = frame_stats(&half);
        assert_eq!(s.mean, [0.5; 3]);
        assert_eq!(s.std, [0.5; 3]);
        let checker =
            Frame::from_fn(16, 16, |y, x, _| ((x + y) % 2) as f32).unwrap();
        let s = frame_stats(&checker);
        assert_eq!(s.mean, [0.5; 3]);
        assert_eq!(s.std, [0.5; 3]);
    }

    #[test]
    fn fvt1_and_flo_headers() {
        let t = RawTensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bytes = encode_fvt1(&t);
        assert_eq!(&bytes[..4], b"FVT1");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(decode_fvt1(&bytes).unwrap(), t);
        assert!(decode_fvt1(&bytes[..bytes.len() - 1]).is_err());

        let flo = encode_flo(2, 1, &[0.5, -1.0, 2.0, 3.0]);
        assert_eq!(&flo[..4], b"PIEH");
        assert_eq!(flo.len(), 12 + 16);
        assert_eq!(decode_flo(&flo).unwrap(), (2, 1, vec![0.5, -1.0, 2.0, 3.0]));

        let mut nan = encode_flo(1, 1, &[0.0, 0.0]);
        nan[12..16].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode_flo(&nan).is_err());
    }

    #[test]
    fn fvt1_frame_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.fvt");
        let t = RawTensor::new(vec![16, 16, 3], vec![0.25; 768]).unwrap();
        save_fvt1(&t, &p).unwrap();
        assert_eq!(load_frame(&p).unwrap(), Frame::filled(16, 16, 0.25).unwrap());
    }

    #[test]
    fn clip_dir_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let frames = (0..3)
            .map(|i| Frame::filled(16, 16, i as f32 / 255.0).unwrap())
            .collect();
        let clip = VideoClip::new(frames, 30, 2).unwrap();
        save_clip(&clip, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(CLIP_MANIFEST)).unwrap();
        assert!(text.contains("fps=30") && text.contains("interval=2") && text.contains("frames=3"));
        assert_eq!(load_clip(dir.path()).unwrap(), clip);
    }

    proptest::proptest! {
        #[test]
        fn save_load_within_half_level(seed in 0u64..1000) {
            let mut rng = crate::rng::SeededRng::new(seed);
            let f = Frame::from_fn(16, 16, |_, _, _| rng.uniform(0.0, 1.0) as f32).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("r.ppm");
            save_frame(&f, &p).unwrap();
            let g = load_frame(&p).unwrap();
            for (a, b) in f.data().iter().zip(g.data()) {
                proptest::prop_assert!((a - b).abs() <= 1.0 / 510.0 + 1e-7);
            }
        }

        #[test]
        fn stats_affine(a in -3.0f64..3.0, b in -2.0f64..2.0, seed in 0u64..100) {
            let mut rng = crate::rng::SeededRng::new(seed);
            let f = Frame::from_fn(16, 16, |_, _, _| rng.uniform(0.0, 1.0) as f32).unwrap();
            let g = f.map(|v| (a * v as f64 + b) as f32);
            let (sf, sg) = (frame_stats(&f), frame_stats(&g));
            for c in 0..3 {
                proptest::prop_assert!((sg.mean[c] - (a * sf.mean[c] + b)).abs() < 1e-5);
                proptest::prop_assert!((sg.std[c] - a.abs() * sf.std[c]).abs() < 1e-5);
            }
        }
    }
}
