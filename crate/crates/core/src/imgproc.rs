//! Single-channel float planes and the small filters shared by the flow
//! estimator, the edge detector and the interpolator.

use crate::media::Frame;

#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height, "plane data length");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::new(width, height, vec![0.0; width * height])
    }

    pub fn luma(frame: &Frame) -> Self {
        Self::new(frame.width(), frame.height(), frame.luma())
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Value at integer coordinates clamped to the plane.
    #[inline]
    pub fn at_clamped(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.data[y * self.width + x]
    }

    /// Bilinear sample with clamp-to-edge.
    pub fn sample(&self, x: f32, y: f32) -> f32 {
        let (x0, x1, fx) = bilinear_taps(x, self.width);
        let (y0, y1, fy) = bilinear_taps(y, self.height);
        let top = self.at(x0, y0) * (1.0 - fx) + self.at(x1, y0) * fx;
        let bot = self.at(x0, y1) * (1.0 - fx) + self.at(x1, y1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    pub fn scaled(&self, s: f32) -> Self {
        Self::new(self.width, self.height, self.data.iter().map(|v| v * s).collect())
    }
}

/// Integer taps and fractional weight for bilinear sampling along one axis,
/// with the coordinate clamped to `[0, n-1]`. Integer coordinates yield a
/// zero weight so the sample reproduces the source value exactly.
#[inline]
pub fn bilinear_taps(c: f32, n: usize) -> (usize, usize, f32) {
    let c = c.clamp(0.0, (n - 1) as f32);
    let c0 = c.floor();
    let i0 = c0 as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, c - c0)
}

/// Bilinear sample of one channel of a frame, clamp-to-edge.
pub fn sample_frame(frame: &Frame, x: f32, y: f32) -> [f32; 3] {
    let (x0, x1, fx) = bilinear_taps(x, frame.width());
    let (y0, y1, fy) = bilinear_taps(y, frame.height());
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let top = frame.get(y0, x0, c) * (1.0 - fx) + frame.get(y0, x1, c) * fx;
        let bot = frame.get(y1, x0, c) * (1.0 - fx) + frame.get(y1, x1, c) * fx;
        *o = top * (1.0 - fy) + bot * fy;
    }
    out
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(p: &Plane, sigma: f32) -> Plane {
    if sigma <= 0.0 {
        return p.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = Plane::zeros(p.width, p.height);
    for y in 0..p.height {
        for x in 0..p.width {
            let mut s = 0.0;
            for (i, &w) in k.iter().enumerate() {
                s += w * p.at_clamped(x as isize + i as isize - r, y as isize);
            }
            tmp.data[y * p.width + x] = s;
        }
    }
    let mut out = Plane::zeros(p.width, p.height);
    for y in 0..p.height {
        for x in 0..p.width {
            let mut s = 0.0;
            for (i, &w) in k.iter().enumerate() {
                s += w * tmp.at_clamped(x as isize, y as isize + i as isize - r);
            }
            out.data[y * p.width + x] = s;
        }
    }
    out
}

/// 2×2 box downsampling (dimensions rounded down).
pub fn downsample2(p: &Plane) -> Plane {
    let (w, h) = (p.width / 2, p.height / 2);
    let mut out = Plane::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            out.data[y * w + x] = 0.25
                * (p.at(2 * x, 2 * y)
                    + p.at(2 * x + 1, 2 * y)
                    + p.at(2 * x, 2 * y + 1)
                    + p.at(2 * x + 1, 2 * y + 1));
        }
    }
    out
}

/// Bilinear resize to `width × height` using pixel-centre alignment.
pub fn resize(p: &Plane, width: usize, height: usize) -> Plane {
    let sx = p.width as f32 / width as f32;
    let sy = p.height as f32 / height as f32;
    let mut out = Plane::zeros(width, height);
    for y in 0..height {
        for x in 0..width {
            let fx = (x as f32 + 0.5) * sx - 0.5;
            let fy = (y as f32 + 0.5) * sy - 0.5;
            out.data[y * width + x] = p.sample(fx, fy);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_samples_are_exact() {
        let p = Plane::new(4, 3, (0..12).map(|i| (i as f32 * 0.731).sin()).collect());
        for y in 0..3 {
            for x in 0..4 {
                assert_eq!(p.sample(x as f32, y as f32), p.at(x, y));
            }
        }
        assert_eq!(p.sample(-5.0, 10.0), p.at(0, 2));
    }

    #[test]
    fn blur_preserves_constant() {
        let p = Plane::new(8, 8, vec![0.3; 64]);
        let b = gaussian_blur(&p, 1.4);
        assert!(b.data.iter().all(|v| (v - 0.3).abs() < 1e-6));
    }
}
