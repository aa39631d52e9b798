//! Raw dense kernels shared by the tape ops. All reductions run in a fixed
//! sequential order so results are bitwise reproducible.

/// `c[m,n] (+)= op(a) · op(b)` where `op` optionally transposes.
///
/// Layouts: `a` is `[m,k]` (or `[k,m]` when `trans_a`), `b` is `[k,n]` (or
/// `[n,k]` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub fn matmul_into(
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    match (trans_a, trans_b) {
        (false, false) => {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut s = 0.0;
                    for (&x, &y) in arow.iter().zip(brow) {
                        s += x * y;
                    }
                    c[i * n + j] += s;
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let av = a[p * m + i];
                    if av == 0.0 {
                        continue;
                    }
                    let crow = &mut c[i * n..(i + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += a[p * m + i] * b[j * k + p];
                    }
                    c[i * n + j] += s;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub frames: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.frames * self.oh * self.ow
    }
}

/// Unfolds `x[T,Cin,H,W]` into `[Cin·K·K, T·OH·OW]` with zero padding.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncol = g.cols();
    let mut cols = vec![0.0; g.rows() * ncol];
    let plane = g.oh * g.ow;
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &mut cols[r * ncol..(r + 1) * ncol];
                for t in 0..g.frames {
                    let src = &x[(t * g.cin + ci) * g.h * g.w..(t * g.cin + ci + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst = &mut row[t * plane + oy * g.ow..t * plane + (oy + 1) * g.ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates columns back into `gx[T,Cin,H,W]`.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, gx: &mut [f64]) {
    let ncol = g.cols();
    let plane = g.oh * g.ow;
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &cols[r * ncol..(r + 1) * ncol];
                for t in 0..g.frames {
                    let base = (t * g.cin + ci) * g.h * g.w;
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                gx[base + iy as usize * g.w + ix as usize] +=
                                    row[t * plane + oy * g.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Per-frame 2D convolution of `x[T,Cin,H,W]` with `w[Cout,Cin,K,K]`.
/// Returns `[T,Cout,OH,OW]` data.
pub fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    dims: [usize; 4],
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let [frames, cin, h, wd] = dims;
    let g = ConvGeom {
        frames,
        cin,
        h,
        w: wd,
        cout,
        k,
        stride,
        pad,
        oh: (h + 2 * pad - k) / stride + 1,
        ow: (wd + 2 * pad - k) / stride + 1,
    };
    conv_geom_forward(x, w, bias, &g)
}

pub(crate) fn conv_geom_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let cols = im2col(x, g);
    let ncol = g.cols();
    let mut outm = vec![0.0; g.cout * ncol];
    matmul_into(w, &cols, &mut outm, g.cout, g.rows(), ncol, false, false);
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; g.frames * g.cout * plane];
    for co in 0..g.cout {
        let b = bias.map_or(0.0, |b| b[co]);
        for t in 0..g.frames {
            let src = &outm[co * ncol + t * plane..co * ncol + (t + 1) * plane];
            let dst = &mut out[(t * g.cout + co) * plane..(t * g.cout + co + 1) * plane];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn all_transpose_variants_agree() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
            let mut c = vec![0.0; m * n];
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            matmul_into(aa, bb, &mut c, m, k, n, ta, tb);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12, "{ta} {tb}");
            }
        }
    }

    #[test]
    fn conv_matches_direct_loops() {
        let (t, cin, h, w, cout, k) = (2, 3, 5, 6, 4, 3);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let x: Vec<f64> = (0..t * cin * h * w).map(|i| (i as f64 * 0.13).sin()).collect();
            let wt: Vec<f64> = (0..cout * cin * k * k).map(|i| (i as f64 * 0.7).cos()).collect();
            let bias = [0.1, -0.2, 0.3, 0.0];
            let got = conv2d_forward(&x, &wt, Some(&bias), [t, cin, h, w], cout, k, stride, pad);
            let oh = (h + 2 * pad - k) / stride + 1;
            let ow = (w + 2 * pad - k) / stride + 1;
            for ti in 0..t {
                for co in 0..cout {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut s = bias[co];
                            for ci in 0..cin {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                            s += wt[((co * cin + ci) * k + ky) * k + kx]
                                                * x[((ti * cin + ci) * h + iy as usize) * w + ix as usize];
                                        }
                                    }
                                }
                            }
                            let g = got[((ti * cout + co) * oh + oy) * ow + ox];
                            assert!((g - s).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }
}
