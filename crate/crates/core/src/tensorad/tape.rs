use std::collections::BTreeMap;

use super::kernels::{col2im, conv_geom_forward, im2col, matmul_into, ConvGeom};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Softmax(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Upsample2x(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations in execution order. Single owner; one backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of the loss with respect to every `requires_grad` leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    by_leaf: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_leaf.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.by_leaf.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

/// For each flat index of `out_dims`, the flat index into a tensor laid out
/// with `src_strides` (already permuted / zeroed for broadcasting).
fn index_map(out_dims: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let n: usize = out_dims.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_dims.len()];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..out_dims.len()).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_dims[d] {
                break;
            }
            off -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn bcast_map(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() || a.iter().zip(b).any(|(&x, &y)| y != x && y != 1) {
        return Err(shape_err!("cannot broadcast {b:?} onto {a:?}"));
    }
    let bs = strides(b);
    let zeroed: Vec<usize> = b
        .iter()
        .zip(&bs)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    Ok(index_map(a, &zeroed))
}

fn permute_map(dims: &[usize], perm: &[usize]) -> Vec<usize> {
    let s = strides(dims);
    let out_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
    let src: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    index_map(&out_dims, &src)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn split_axis(dims: &[usize], axis: usize) -> (usize, usize) {
    (
        dims[..axis].iter().product(),
        dims[axis + 1..].iter().product(),
    )
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Gradients are returned for it iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.dims
    }

    fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    fn tensor(dims: &[usize], data: Vec<f64>) -> Tensor {
        Tensor {
            dims: dims.to_vec(),
            data,
            requires_grad: false,
        }
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(shape_err!("shape {:?} vs {:?}", self.dims(a), self.dims(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Self::tensor(self.dims(a), data);
        Ok(self.push(t, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `a + b` where `b` has the rank of `a` and size 1 along broadcast axes.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = bcast_map(self.dims(a), self.dims(b))?;
        let bd = self.data(b);
        let data = self.data(a).iter().zip(&map).map(|(&x, &j)| x + bd[j]).collect();
        let t = Self::tensor(self.dims(a), data);
        Ok(self.push(t, Op::AddBcast(a, b), &[a, b]))
    }

    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = bcast_map(self.dims(a), self.dims(b))?;
        let bd = self.data(b);
        let data = self.data(a).iter().zip(&map).map(|(&x, &j)| x * bd[j]).collect();
        let t = Self::tensor(self.dims(a), data);
        Ok(self.push(t, Op::MulBcast(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data = self.data(a).iter().map(|&x| x * s).collect();
        let t = Self::tensor(self.dims(a), data);
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| x * sigmoid(x)).collect();
        let t = Self::tensor(self.dims(a), data);
        self.push(t, Op::Silu(a), &[a])
    }

    /// `[m,k]·[k,n]`, or `[m,k]·[n,k]ᵀ` when `trans_b`.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ad, bd) = (self.dims(a), self.dims(b));
        if ad.len() != 2 || bd.len() != 2 {
            return Err(shape_err!("matmul needs rank-2 operands, got {ad:?} and {bd:?}"));
        }
        let (m, k) = (ad[0], ad[1]);
        let (kb, n) = if trans_b { (bd[1], bd[0]) } else { (bd[0], bd[1]) };
        if k != kb {
            return Err(shape_err!("matmul inner dims {ad:?} x {bd:?} (trans_b={trans_b})"));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.data(a), self.data(b), &mut out, m, k, n, false, trans_b);
        let t = Self::tensor(&[m, n], out);
        Ok(self.push(
            t,
            Op::MatMul {
                a,
                b,
                batch: 1,
                m,
                k,
                n,
                trans_b,
            },
            &[a, b],
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false)
    }

    /// Batched product of `[B,m,k]` with `[B,k,n]` (or `[B,n,k]` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ad, bd) = (self.dims(a), self.dims(b));
        if ad.len() != 3 || bd.len() != 3 || ad[0] != bd[0] {
            return Err(shape_err!("bmm needs [B,..] operands, got {ad:?} and {bd:?}"));
        }
        let (batch, m, k) = (ad[0], ad[1], ad[2]);
        let (kb, n) = if trans_b { (bd[2], bd[1]) } else { (bd[1], bd[2]) };
        if k != kb {
            return Err(shape_err!("bmm inner dims {ad:?} x {bd:?} (trans_b={trans_b})"));
        }
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..batch {
            matmul_into(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
                false,
                trans_b,
            );
        }
        let t = Self::tensor(&[batch, m, n], out);
        Ok(self.push(
            t,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            &[a, b],
        ))
    }

    /// Softmax over the last axis with max subtraction. NaN inputs
    /// propagate NaN to their row.
    pub fn softmax_lastdim(&mut self, a: Var) -> Var {
        let dims = self.dims(a).to_vec();
        let n = *dims.last().expect("rank >= 1");
        let mut out = self.data(a).to_vec();
        for row in out.chunks_exact_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Self::tensor(&dims, out);
        self.push(t, Op::Softmax(a), &[a])
    }

    /// Pseudo-3D convolution: `x[T,Cin,H,W]` convolved per frame with
    /// `w[Cout,Cin,K,K]`, optional bias `[Cout]`, zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xd, wd) = (self.dims(x), self.dims(w));
        if xd.len() != 4 || wd.len() != 4 || wd[2] != wd[3] || xd[1] != wd[1] || stride == 0 {
            return Err(shape_err!("conv2d input {xd:?} with kernel {wd:?}"));
        }
        let (k, cout) = (wd[2], wd[0]);
        if xd[2] + 2 * pad < k || xd[3] + 2 * pad < k {
            return Err(shape_err!("kernel {k} does not fit padded input {xd:?}"));
        }
        if let Some(b) = b {
            if self.dims(b) != [cout] {
                return Err(shape_err!("conv bias {:?}, expected [{cout}]", self.dims(b)));
            }
        }
        let geom = ConvGeom {
            frames: xd[0],
            cin: xd[1],
            h: xd[2],
            w: xd[3],
            cout,
            k,
            stride,
            pad,
            oh: (xd[2] + 2 * pad - k) / stride + 1,
            ow: (xd[3] + 2 * pad - k) / stride + 1,
        };
        let out = conv_geom_forward(
            self.data(x),
            self.data(w),
            b.map(|b| self.data(b)),
            &geom,
        );
        let t = Self::tensor(&[geom.frames, cout, geom.oh, geom.ow], out);
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, &parents))
    }

    /// Group normalisation of `x[T,C,...]` over each (frame, channel group),
    /// followed by the per-channel affine `gamma`, `beta` (`[C]`).
    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if dims.len() < 2 {
            return Err(shape_err!("group_norm needs [T,C,..], got {dims:?}"));
        }
        let (t, c) = (dims[0], dims[1]);
        if groups == 0 || c % groups != 0 {
            return Err(shape_err!("{c} channels not divisible into {groups} groups"));
        }
        if self.dims(gamma) != [c] || self.dims(beta) != [c] {
            return Err(shape_err!("group_norm affine params must be [{c}]"));
        }
        let spatial: usize = dims[2..].iter().product();
        let cpg = c / groups;
        let glen = cpg * spatial;
        let xd = self.data(x);
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut out = vec![0.0; xd.len()];
        let mut means = Vec::with_capacity(t * groups);
        let mut rstds = Vec::with_capacity(t * groups);
        for ti in 0..t {
            for g in 0..groups {
                let base = (ti * c + g * cpg) * spatial;
                let seg = &xd[base..base + glen];
                let mean = seg.iter().sum::<f64>() / glen as f64;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / glen as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                for ci in 0..cpg {
                    let ch = g * cpg + ci;
                    for s in 0..spatial {
                        let i = base + ci * spatial + s;
                        out[i] = (xd[i] - mean) * rstd * gd[ch] + bd[ch];
                    }
                }
                means.push(mean);
                rstds.push(rstd);
            }
        }
        let tt = Self::tensor(&dims, out);
        Ok(self.push(
            tt,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: means,
                rstd: rstds,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        if dims.iter().product::<usize>() != self.value(a).numel() {
            return Err(shape_err!("cannot reshape {:?} to {dims:?}", self.dims(a)));
        }
        let t = Self::tensor(dims, self.data(a).to_vec());
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let dims = self.dims(a).to_vec();
        let mut seen = vec![false; dims.len()];
        if perm.len() != dims.len() || perm.iter().any(|&p| p >= dims.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err!("bad permutation {perm:?} for {dims:?}"));
        }
        let map = permute_map(&dims, perm);
        let src = self.data(a);
        let data = map.iter().map(|&i| src[i]).collect();
        let out_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
        let t = Self::tensor(&out_dims, data);
        Ok(self.push(
            t,
            Op::Permute {
                x: a,
                perm: perm.to_vec(),
            },
            &[a],
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .dims(*parts.first().ok_or_else(|| shape_err!("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err!("concat axis {axis} for {first:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let d = self.dims(p);
            if d.len() != first.len()
                || d.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err!("concat {d:?} with {first:?} on axis {axis}"));
            }
            total += d[axis];
        }
        let (outer, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.dims(p)[axis] * inner;
                data.extend_from_slice(&self.data(p)[o * len..(o + 1) * len]);
            }
        }
        let mut dims = first;
        dims[axis] = total;
        let t = Self::tensor(&dims, data);
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let dims = self.dims(a).to_vec();
        if axis >= dims.len() || len == 0 || start + len > dims[axis] {
            return Err(shape_err!("slice {start}..{} on axis {axis} of {dims:?}", start + len));
        }
        let (outer, inner) = split_axis(&dims, axis);
        let src = self.data(a);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dims[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_dims = dims;
        out_dims[axis] = len;
        let t = Self::tensor(&out_dims, data);
        Ok(self.push(t, Op::Slice { x: a, axis, start }, &[a]))
    }

    /// Nearest-neighbour 2× upsampling of the last two axes.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let dims = self.dims(a).to_vec();
        if dims.len() < 2 {
            return Err(shape_err!("upsample needs rank >= 2, got {dims:?}"));
        }
        let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
        let planes = self.value(a).numel() / (h * w);
        let src = self.data(a);
        let mut data = vec![0.0; planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    data[(p * 2 * h + y) * 2 * w + x] = src[(p * h + y / 2) * w + x / 2];
                }
            }
        }
        let mut out_dims = dims;
        let r = out_dims.len();
        out_dims[r - 2] *= 2;
        out_dims[r - 1] *= 2;
        let t = Self::tensor(&out_dims, data);
        Ok(self.push(t, Op::Upsample2x(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Reverse pass from a scalar. Consumes the tape: a second call fails.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Contract("backward already ran on this tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.dims(loss)
            )));
        }
        self.consumed = true;
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
            if !nodes[v.0].needs_grad {
                return;
            }
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.data.len()]);
            f(g);
        }

        for i in (0..nodes.len()).rev() {
            if !nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let val = |v: Var| -> &[f64] { &nodes[v.0].value.data };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, &nodes, *a, |ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                    acc(&mut grads, &nodes, *b, |gb| gb.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, &nodes, *a, |ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                    acc(&mut grads, &nodes, *b, |gb| gb.iter_mut().zip(&g).for_each(|(x, y)| *x -= y));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    acc(&mut grads, &nodes, *a, |ga| {
                        for j in 0..g.len() {
                            ga[j] += g[j] * bv[j];
                        }
                    });
                    acc(&mut grads, &nodes, *b, |gb| {
                        for j in 0..g.len() {
                            gb[j] += g[j] * av[j];
                        }
                    });
                }
                Op::AddBcast(a, b) => {
                    let map = bcast_map(&nodes[a.0].value.dims, &nodes[b.0].value.dims)?;
                    acc(&mut grads, &nodes, *a, |ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                    acc(&mut grads, &nodes, *b, |gb| {
                        for (j, &m) in map.iter().enumerate() {
                            gb[m] += g[j];
                        }
                    });
                }
                Op::MulBcast(a, b) => {
                    let map = bcast_map(&nodes[a.0].value.dims, &nodes[b.0].value.dims)?;
                    let (av, bv) = (val(*a), val(*b));
                    acc(&mut grads, &nodes, *a, |ga| {
                        for (j, &m) in map.iter().enumerate() {
                            ga[j] += g[j] * bv[m];
                        }
                    });
                    acc(&mut grads, &nodes, *b, |gb| {
                        for (j, &m) in map.iter().enumerate() {
                            gb[m] += g[j] * av[j];
                        }
                    });
                }
                Op::Scale(a, s) => {
                    acc(&mut grads, &nodes, *a, |ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += s * y));
                }
                Op::Silu(a) => {
                    let av = val(*a);
                    acc(&mut grads, &nodes, *a, |ga| {
                        for j in 0..g.len() {
                            let s = sigmoid(av[j]);
                            ga[j] += g[j] * s * (1.0 + av[j] * (1.0 - s));
                        }
                    });
                }
                Op::MatMul {
                    a,
                    b,
                    batch,
                    m,
                    k,
                    n,
                    trans_b,
                } => {
                    let (m, k, n) = (*m, *k, *n);
                    let (av, bv) = (val(*a), val(*b));
                    acc(&mut grads, &nodes, *a, |ga| {
                        for bi in 0..*batch {
                            let gs = &g[bi * m * n..(bi + 1) * m * n];
                            let bs = &bv[bi * k * n..(bi + 1) * k * n];
                            let gas = &mut ga[bi * m * k..(bi + 1) * m * k];
                            // dA = G·Bᵀ, with B stored [k,n] or [n,k]
                            matmul_into(gs, bs, gas, m, n, k, false, !*trans_b);
                        }
                    });
                    acc(&mut grads, &nodes, *b, |gb| {
                        for bi in 0..*batch {
                            let gs = &g[bi * m * n..(bi + 1) * m * n];
                            let as_ = &av[bi * m * k..(bi + 1) * m * k];
                            let gbs = &mut gb[bi * k * n..(bi + 1) * k * n];
                            if *trans_b {
                                // dB[n,k] = Gᵀ·A
                                matmul_into(gs, as_, gbs, n, m, k, true, false);
                            } else {
                                // dB[k,n] = Aᵀ·G
                                matmul_into(as_, gs, gbs, k, m, n, true, false);
                            }
                        }
                    });
                }
                Op::Softmax(a) => {
                    let y = &node.value.data;
                    let n = *node.value.dims.last().unwrap();
                    acc(&mut grads, &nodes, *a, |ga| {
                        for r in 0..y.len() / n {
                            let (ys, gs) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                            let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                            for j in 0..n {
                                ga[r * n + j] += ys[j] * (gs[j] - dot);
                            }
                        }
                    });
                }
                Op::Conv2d { x, w, b, geom } => {
                    let ncol = geom.cols();
                    let plane = geom.oh * geom.ow;
                    // Output gradient rearranged to [Cout, T·OH·OW].
                    let mut gm = vec![0.0; geom.cout * ncol];
                    for t in 0..geom.frames {
                        for co in 0..geom.cout {
                            gm[co * ncol + t * plane..co * ncol + (t + 1) * plane]
                                .copy_from_slice(&g[(t * geom.cout + co) * plane..(t * geom.cout + co + 1) * plane]);
                        }
                    }
                    if let Some(b) = b {
                        acc(&mut grads, &nodes, *b, |gb| {
                            for co in 0..geom.cout {
                                gb[co] += gm[co * ncol..(co + 1) * ncol].iter().sum::<f64>();
                            }
                        });
                    }
                    let need_w = nodes[w.0].needs_grad;
                    let need_x = nodes[x.0].needs_grad;
                    if need_w {
                        let cols = im2col(val(*x), geom);
                        acc(&mut grads, &nodes, *w, |gw| {
                            matmul_into(&gm, &cols, gw, geom.cout, ncol, geom.rows(), false, true);
                        });
                    }
                    if need_x {
                        let mut gcols = vec![0.0; geom.rows() * ncol];
                        matmul_into(val(*w), &gm, &mut gcols, geom.rows(), geom.cout, ncol, true, false);
                        acc(&mut grads, &nodes, *x, |gx| col2im(&gcols, geom, gx));
                    }
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    mean,
                    rstd,
                } => {
                    let dims = &nodes[x.0].value.dims;
                    let (t, c) = (dims[0], dims[1]);
                    let spatial: usize = dims[2..].iter().product();
                    let cpg = c / groups;
                    let glen = (cpg * spatial) as f64;
                    let (xv, gv) = (val(*x), val(*gamma));
                    let xhat = |i: usize, gi: usize| (xv[i] - mean[gi]) * rstd[gi];
                    acc(&mut grads, &nodes, *beta, |gb| {
                        for ti in 0..t {
                            for ch in 0..c {
                                let base = (ti * c + ch) * spatial;
                                gb[ch] += g[base..base + spatial].iter().sum::<f64>();
                            }
                        }
                    });
                    acc(&mut grads, &nodes, *gamma, |gg| {
                        for ti in 0..t {
                            for ch in 0..c {
                                let gi = ti * groups + ch / cpg;
                                let base = (ti * c + ch) * spatial;
                                for s in 0..spatial {
                                    gg[ch] += g[base + s] * xhat(base + s, gi);
                                }
                            }
                        }
                    });
                    acc(&mut grads, &nodes, *x, |gx| {
                        for ti in 0..t {
                            for gr in 0..*groups {
                                let gi = ti * groups + gr;
                                let base = (ti * c + gr * cpg) * spatial;
                                let (mut s1, mut s2) = (0.0, 0.0);
                                for ci in 0..cpg {
                                    let ch = gr * cpg + ci;
                                    for s in 0..spatial {
                                        let i = base + ci * spatial + s;
                                        let dxh = g[i] * gv[ch];
                                        s1 += dxh;
                                        s2 += dxh * xhat(i, gi);
                                    }
                                }
                                let (m1, m2) = (s1 / glen, s2 / glen);
                                for ci in 0..cpg {
                                    let ch = gr * cpg + ci;
                                    for s in 0..spatial {
                                        let i = base + ci * spatial + s;
                                        let dxh = g[i] * gv[ch];
                                        gx[i] += rstd[gi] * (dxh - m1 - xhat(i, gi) * m2);
                                    }
                                }
                            }
                        }
                    });
                }
                Op::Reshape(a) => {
                    acc(&mut grads, &nodes, *a, |ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                }
                Op::Permute { x, perm } => {
                    let map = permute_map(&nodes[x.0].value.dims, perm);
                    acc(&mut grads, &nodes, *x, |gx| {
                        for (o, &src) in map.iter().enumerate() {
                            gx[src] += g[o];
                        }
                    });
                }
                Op::Concat { parts, axis } => {
                    let dims = &node.value.dims;
                    let (outer, inner) = split_axis(dims, *axis);
                    let total = dims[*axis] * inner;
                    let mut off = 0;
                    for &p in parts {
                        let len = nodes[p.0].value.dims[*axis] * inner;
                        acc(&mut grads, &nodes, p, |gp| {
                            for o in 0..outer {
                                for j in 0..len {
                                    gp[o * len + j] += g[o * total + off + j];
                                }
                            }
                        });
                        off += len;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let src_dims = &nodes[x.0].value.dims;
                    let (outer, inner) = split_axis(src_dims, *axis);
                    let len = node.value.dims[*axis] * inner;
                    let full = src_dims[*axis] * inner;
                    acc(&mut grads, &nodes, *x, |gx| {
                        for o in 0..outer {
                            for j in 0..len {
                                gx[o * full + start * inner + j] += g[o * len + j];
                            }
                        }
                    });
                }
                Op::Upsample2x(a) => {
                    let d = &nodes[a.0].value.dims;
                    let (h, w) = (d[d.len() - 2], d[d.len() - 1]);
                    acc(&mut grads, &nodes, *a, |ga| {
                        let planes = ga.len() / (h * w);
                        for p in 0..planes {
                            for y in 0..2 * h {
                                for x in 0..2 * w {
                                    ga[(p * h + y / 2) * w + x / 2] += g[(p * 2 * h + y) * 2 * w + x];
                                }
                            }
                        }
                    });
                }
                Op::Sum(a) => {
                    acc(&mut grads, &nodes, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
                }
                Op::Mean(a) => {
                    let n = nodes[a.0].value.data.len() as f64;
                    acc(&mut grads, &nodes, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
                }
            }
        }

        let mut out = Gradients::default();
        for (i, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad {
                let data = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.data.len()]);
                out.by_leaf.insert(Var(i), Self::tensor(&node.value.dims, data));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut tape = Tape::new();
        let eye = tape.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let x = tape.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());

        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2, 1], &[1., 1.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3., 7.]);
        assert!(tape.matmul(a, x).is_err());
    }

    #[test]
    fn matmul_grad_of_sum_is_two() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::full(&[2, 2], 1.0).with_grad());
        let b = tape.constant(Tensor::full(&[2, 2], 1.0));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[2.0; 4]);
    }

    #[test]
    fn softmax_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[0.0, 3f64.ln(), 5.0, 5.0]));
        let y = tape.softmax_lastdim(x);
        let d = tape.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 0.75).abs() < 1e-12);
        assert!((d[2] - 0.5).abs() < 1e-12 && (d[3] - 0.5).abs() < 1e-12);
        let nan = tape.constant(t(&[1, 2], &[f64::NAN, 0.0]));
        let z = tape.softmax_lastdim(nan);
        assert!(tape.value(z).data().iter().all(|v| v.is_nan()));
    }

    #[test]
    fn conv_identity_and_average() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 1, 4, 4], |i| i as f64));
        let w = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());

        let c = tape.constant(Tensor::full(&[1, 1, 6, 6], 0.7));
        let avg = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0));
        let y = tape.conv2d(c, avg, None, 1, 1).unwrap();
        let d = tape.value(y).data();
        for yy in 1..5 {
            for xx in 1..5 {
                assert!((d[yy * 6 + xx] - 0.7).abs() < 1e-12);
            }
        }
        // Corners see 4 of 9 taps through the zero padding.
        assert!((d[0] - 0.7 * 4.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn group_norm_closed_forms() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(Tensor::full(&[1, 2, 2, 2], 3.0));
        let y = tape.group_norm(x, 1, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let eps = 1e-5;
        let x = tape.constant(t(&[1, 2, 1, 1], &[-1.0, 1.0]));
        let y = tape.group_norm(x, 1, g, b, eps).unwrap();
        let s = 1.0 / (1.0 + eps).sqrt();
        let d = tape.value(y).data();
        assert!((d[0] + s).abs() < 1e-12 && (d[1] - s).abs() < 1e-12);
        assert!(tape.group_norm(x, 3, g, b, eps).is_err());
    }

    #[test]
    fn backward_contract() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 3.0]).with_grad());
        let unused = tape.leaf(Tensor::full(&[2], 5.0).with_grad());
        let sq = tape.mul(x, x).unwrap();
        assert!(matches!(tape.backward(sq), Err(Error::Contract(_))));
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
        assert_eq!(g.get(unused).unwrap().data(), &[0.0, 0.0]);
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
    }

    #[test]
    fn permute_concat_slice_upsample() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let p = tape.permute(x, &[1, 0]).unwrap();
        assert_eq!(tape.value(p).data(), &[0., 3., 1., 4., 2., 5.]);
        let c = tape.concat(&[x, x], 1).unwrap();
        assert_eq!(tape.dims(c), &[2, 6]);
        assert_eq!(tape.value(c).data(), &[0., 1., 2., 0., 1., 2., 3., 4., 5., 3., 4., 5.]);
        let s = tape.slice(c, 1, 2, 2).unwrap();
        assert_eq!(tape.value(s).data(), &[2., 0., 5., 3.]);
        let u = tape.constant(t(&[1, 1, 1, 2], &[1.0, 2.0]));
        let up = tape.upsample2x(u).unwrap();
        assert_eq!(tape.value(up).data(), &[1., 1., 2., 2., 1., 1., 2., 2.]);
    }

    #[test]
    fn broadcast_ops() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 2, 1, 1], |i| i as f64));
        let b = tape.constant(t(&[1, 2, 1, 1], &[10.0, 20.0]));
        let y = tape.add_bcast(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[10., 21., 12., 23.]);
        let z = tape.mul_bcast(x, b).unwrap();
        assert_eq!(tape.value(z).data(), &[0., 20., 20., 60.]);
        let bad = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.add_bcast(x, bad).is_err());
    }
}
