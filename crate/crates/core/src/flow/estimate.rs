use super::FlowField;
use crate::error::{Error, Result};
use crate::imgproc::{downsample2, gaussian_blur, Plane};
use crate::media::Frame;

/// Coarse-to-fine Horn–Schunck settings.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowParams {
    /// Pyramid levels including full resolution.
    pub levels: usize,
    /// Jacobi iterations per level, split evenly across the warps.
    pub iters: usize,
    /// Smoothness weight (the Horn–Schunck α²) on intensities scaled to 0..255.
    pub lambda: f64,
    /// Re-linearisations per level.
    pub warps: usize,
    /// Gaussian pre-smoothing applied to every pyramid level.
    pub presmooth: f32,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            levels: 3,
            iters: 100,
            lambda: 15.0,
            warps: 2,
            presmooth: 1.0,
        }
    }
}

fn pyramid(frame: &Frame, levels: usize, sigma: f32) -> Vec<Plane> {
    let base = Plane::luma(frame).scaled(255.0);
    let mut out = vec![base];
    while out.len() < levels {
        let last = out.last().unwrap();
        if last.width < 16 || last.height < 16 {
            break;
        }
        out.push(downsample2(&gaussian_blur(last, 1.0)));
    }
    out.into_iter().map(|p| gaussian_blur(&p, sigma)).collect()
}

/// Horn–Schunck neighbourhood average (1/6 edge, 1/12 diagonal) with
/// replicated borders.
fn hs_average(f: &[f64], w: usize, h: usize, out: &mut [f64]) {
    let at = |x: isize, y: isize| {
        let x = x.clamp(0, w as isize - 1) as usize;
        let y = y.clamp(0, h as isize - 1) as usize;
        f[y * w + x]
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            let edge = at(x - 1, y) + at(x + 1, y) + at(x, y - 1) + at(x, y + 1);
            let diag = at(x - 1, y - 1) + at(x + 1, y - 1) + at(x - 1, y + 1) + at(x + 1, y + 1);
            out[y as usize * w + x as usize] = edge / 6.0 + diag / 12.0;
        }
    }
}

fn central_dx(p: &Plane, x: usize, y: usize) -> f64 {
    0.5 * (p.at_clamped(x as isize + 1, y as isize) - p.at_clamped(x as isize - 1, y as isize)) as f64
}

fn central_dy(p: &Plane, x: usize, y: usize) -> f64 {
    0.5 * (p.at_clamped(x as isize, y as isize + 1) - p.at_clamped(x as isize, y as isize - 1)) as f64
}

/// Dense flow from `a` to `b`: `a(p) ≈ b(p + F(p))`.
pub fn estimate_flow(a: &Frame, b: &Frame, params: &FlowParams) -> Result<FlowField> {
    a.same_dims(b)?;
    if params.levels == 0 || params.iters == 0 || params.warps == 0 {
        return Err(Error::Config("flow levels, iters and warps must be >= 1".into()));
    }
    if !(params.lambda.is_finite() && params.lambda >= 0.0) {
        return Err(Error::Config(format!("invalid flow lambda {}", params.lambda)));
    }
    let pa = pyramid(a, params.levels, params.presmooth);
    let pb = pyramid(b, params.levels, params.presmooth);
    let iters_per_warp = params.iters.div_ceil(params.warps);

    let coarsest = pa.last().unwrap();
    let (mut w, mut h) = (coarsest.width, coarsest.height);
    let mut u = vec![0.0f64; w * h];
    let mut v = vec![0.0f64; w * h];

    for level in (0..pa.len()).rev() {
        let (la, lb) = (&pa[level], &pb[level]);
        if la.width != w || la.height != h {
            // Upsample the coarser estimate; displacements double.
            let coarse_u = Plane::new(w, h, u.iter().map(|&x| x as f32).collect());
            let coarse_v = Plane::new(w, h, v.iter().map(|&x| x as f32).collect());
            let (nw, nh) = (la.width, la.height);
            let sx = w as f32 / nw as f32;
            let sy = h as f32 / nh as f32;
            u = vec![0.0; nw * nh];
            v = vec![0.0; nw * nh];
            for y in 0..nh {
                for x in 0..nw {
                    let fx = (x as f32 + 0.5) * sx - 0.5;
                    let fy = (y as f32 + 0.5) * sy - 0.5;
                    u[y * nw + x] = coarse_u.sample(fx, fy) as f64 / sx as f64;
                    v[y * nw + x] = coarse_v.sample(fx, fy) as f64 / sy as f64;
                }
            }
            w = nw;
            h = nh;
        }

        let mut ubar = vec![0.0; w * h];
        let mut vbar = vec![0.0; w * h];
        for _ in 0..params.warps {
            let mut bw = Plane::zeros(w, h);
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    bw.data[i] = lb.sample(x as f32 + u[i] as f32, y as f32 + v[i] as f32);
                }
            }
            let n = w * h;
            let mut ix = vec![0.0; n];
            let mut iy = vec![0.0; n];
            let mut it = vec![0.0; n];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    ix[i] = 0.5 * (central_dx(la, x, y) + central_dx(&bw, x, y));
                    iy[i] = 0.5 * (central_dy(la, x, y) + central_dy(&bw, x, y));
                    it[i] = (bw.data[i] - la.data[i]) as f64;
                }
            }
            let (u0, v0) = (u.clone(), v.clone());
            for _ in 0..iters_per_warp {
                hs_average(&u, w, h, &mut ubar);
                hs_average(&v, w, h, &mut vbar);
                for i in 0..n {
                    let r = ix[i] * (ubar[i] - u0[i]) + iy[i] * (vbar[i] - v0[i]) + it[i];
                    let d = params.lambda + ix[i] * ix[i] + iy[i] * iy[i];
                    let s = if d > 0.0 { r / d } else { 0.0 };
                    u[i] = ubar[i] - ix[i] * s;
                    v[i] = vbar[i] - iy[i] * s;
                }
            }
        }
    }

    let (fw, fh) = (a.width(), a.height());
    let lim_u = (fw - 1) as f64;
    let lim_v = (fh - 1) as f64;
    FlowField::from_fn(fw, fh, |x, y| {
        let i = y * fw + x;
        (
            u[i].clamp(-lim_u, lim_u) as f32,
            v[i].clamp(-lim_v, lim_v) as f32,
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(x: f32, y: f32) -> f32 {
        0.5 + 0.2 * (x * 0.31).sin() * (y * 0.23).cos() + 0.15 * ((x + 2.0 * y) * 0.17).sin()
    }

    fn frame_shifted(dx: f32, dy: f32) -> Frame {
        Frame::from_fn(64, 64, |y, x, c| {
            pattern(x as f32 - dx, y as f32 - dy) * [1.0, 0.9, 0.8][c]
        })
        .unwrap()
    }

    fn interior_mean(f: &FlowField) -> (f64, f64) {
        let (w, h) = (f.width(), f.height());
        let (x0, y0) = (w / 10, h / 10);
        let (mut su, mut sv, mut n) = (0.0, 0.0, 0.0);
        for y in y0..h - y0 {
            for x in x0..w - x0 {
                let (u, v) = f.get(x, y);
                su += u as f64;
                sv += v as f64;
                n += 1.0;
            }
        }
        (su / n, sv / n)
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let a = frame_shifted(0.0, 0.0);
        let f = estimate_flow(&a, &a, &FlowParams::default()).unwrap();
        assert!(f.uv().iter().all(|v| v.abs() <= 1e-3));
    }

    #[test]
    fn recovers_two_pixel_translation() {
        // b is a moved 2 px right, so a(p) = b(p + (2, 0)).
        let a = frame_shifted(0.0, 0.0);
        let b = frame_shifted(2.0, 0.0);
        let f = estimate_flow(&a, &b, &FlowParams::default()).unwrap();
        let (mu, mv) = interior_mean(&f);
        assert!((mu - 2.0).abs() < 0.3, "mean u {mu}");
        assert!(mv.abs() < 0.3, "mean v {mv}");
    }

    #[test]
    fn huge_lambda_gives_constant_field() {
        let a = frame_shifted(0.0, 0.0);
        let b = frame_shifted(2.0, 0.0);
        let p = FlowParams {
            lambda: 1e12,
            ..FlowParams::default()
        };
        let f = estimate_flow(&a, &b, &p).unwrap();
        let (mu, mv) = f.mean_uv();
        let n = (f.width() * f.height()) as f64;
        let var: f64 = f
            .uv()
            .chunks_exact(2)
            .map(|p| (p[0] as f64 - mu).powi(2) + (p[1] as f64 - mv).powi(2))
            .sum::<f64>()
            / n;
        assert!(var < 1e-3, "variance {var}");
    }

    #[test]
    fn mismatched_frames_rejected() {
        let a = Frame::filled(16, 16, 0.0).unwrap();
        let b = Frame::filled(16, 24, 0.0).unwrap();
        assert!(estimate_flow(&a, &b, &FlowParams::default()).is_err());
    }
}
