//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Every operation evaluates eagerly and records enough to run its adjoint.
//! [`Tape::backward`] walks the tape once in reverse and returns gradients
//! only for nodes created with [`Tape::param`]. All loops run in a fixed
//! order, so results are bitwise reproducible.

use super::gemm::gemm;
use super::tensor::Tensor;

const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(usize),
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Silu(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Add(Var, Var),
    AddChannelBias {
        x: Var,
        bias: Var,
    },
    Concat(Var, Var),
    AvgPool2(Var),
    Upsample2(Var),
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    SoftmaxRows(Var),
    Scale(Var, f64),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Unfolds a zero-padded `kernel^3` neighbourhood of every voxel into the
/// columns of a `(channels * kernel^3) x voxels` matrix.
fn im2col(x: &[f64], channels: usize, dims: [usize; 3], kernel: usize, cols: &mut [f64]) {
    let [dd, hh, ww] = dims;
    let n = dd * hh * ww;
    let pad = (kernel / 2) as isize;
    let mut row = 0;
    for c in 0..channels {
        let src = &x[c * n..(c + 1) * n];
        for kd in 0..kernel {
            let od = kd as isize - pad;
            for kh in 0..kernel {
                let oh = kh as isize - pad;
                for kw in 0..kernel {
                    let ow = kw as isize - pad;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    let w_lo = (-ow).max(0) as usize;
                    let w_hi = (ww as isize - ow).min(ww as isize).max(0) as usize;
                    for d in 0..dd {
                        let sd = d as isize + od;
                        for h in 0..hh {
                            let out = &mut dst[(d * hh + h) * ww..(d * hh + h + 1) * ww];
                            let sh = h as isize + oh;
                            if sd < 0 || sd >= dd as isize || sh < 0 || sh >= hh as isize || w_lo >= w_hi {
                                out.fill(0.0);
                                continue;
                            }
                            let base = (sd as usize * hh + sh as usize) * ww;
                            out[..w_lo].fill(0.0);
                            out[w_hi..].fill(0.0);
                            let s0 = (base as isize + w_lo as isize + ow) as usize;
                            out[w_lo..w_hi].copy_from_slice(&src[s0..s0 + (w_hi - w_lo)]);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto voxels.
fn col2im(cols: &[f64], channels: usize, dims: [usize; 3], kernel: usize, dx: &mut [f64]) {
    let [dd, hh, ww] = dims;
    let n = dd * hh * ww;
    let pad = (kernel / 2) as isize;
    let mut row = 0;
    for c in 0..channels {
        let dst = &mut dx[c * n..(c + 1) * n];
        for kd in 0..kernel {
            let od = kd as isize - pad;
            for kh in 0..kernel {
                let oh = kh as isize - pad;
                for kw in 0..kernel {
                    let ow = kw as isize - pad;
                    let src = &cols[row * n..(row + 1) * n];
                    let w_lo = (-ow).max(0) as usize;
                    let w_hi = (ww as isize - ow).min(ww as isize).max(0) as usize;
                    for d in 0..dd {
                        let sd = d as isize + od;
                        if sd < 0 || sd >= dd as isize {
                            continue;
                        }
                        for h in 0..hh {
                            let sh = h as isize + oh;
                            if sh < 0 || sh >= hh as isize || w_lo >= w_hi {
                                continue;
                            }
                            let base = (sd as usize * hh + sh as usize) * ww;
                            let s0 = (base as isize + w_lo as isize + ow) as usize;
                            let g = &src[(d * hh + h) * ww + w_lo..(d * hh + h) * ww + w_hi];
                            add_into(&mut dst[s0..s0 + (w_hi - w_lo)], g);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Leaf whose gradient is reported by [`Tape::backward`] under `index`.
    pub fn param(&mut self, index: usize, value: Tensor) -> Var {
        self.push(value, Op::Param(index))
    }

    /// Same-padded, stride-1 3D convolution. `w` is `[out, in, k, k, k]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xt = self.value(x);
        let wt = self.value(w);
        let (cin, n) = xt.split_first();
        let dims = xt.spatial();
        let cout = wt.shape()[0];
        let kernel = wt.shape()[2];
        assert_eq!(wt.shape()[1], cin, "conv3d: input channels");
        let rows = cin * kernel * kernel * kernel;
        let mut out = vec![0.0; cout * n];
        if kernel == 1 {
            gemm(
                cout,
                rows,
                n,
                1.0,
                wt.data(),
                false,
                xt.data(),
                false,
                0.0,
                &mut out,
            );
        } else {
            let mut cols = vec![0.0; rows * n];
            im2col(xt.data(), cin, dims, kernel, &mut cols);
            gemm(cout, rows, n, 1.0, wt.data(), false, &cols, false, 0.0, &mut out);
        }
        let bias = self.value(b).data();
        for (o, chunk) in out.chunks_mut(n).enumerate() {
            let bo = bias[o];
            chunk.iter_mut().for_each(|v| *v += bo);
        }
        let value = Tensor::new(vec![cout, dims[0], dims[1], dims[2]], out).expect("conv3d shape");
        self.push(value, Op::Conv3d { x, w, b, kernel })
    }

    /// `w @ x + b` for a vector `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xt = self.value(x);
        let wt = self.value(w);
        let (out_dim, in_dim) = (wt.shape()[0], wt.shape()[1]);
        assert_eq!(xt.len(), in_dim, "linear: input size");
        let mut out = self.value(b).data().to_vec();
        gemm(
            out_dim,
            in_dim,
            1,
            1.0,
            wt.data(),
            false,
            xt.data(),
            false,
            1.0,
            &mut out,
        );
        self.push(
            Tensor::new(vec![out_dim], out).expect("linear shape"),
            Op::Linear { x, w, b },
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let data = xt.data().iter().map(|&v| v * sigmoid(v)).collect();
        let value = Tensor::new(xt.shape().to_vec(), data).expect("silu shape");
        self.push(value, Op::Silu(x))
    }

    /// Group normalization over `[channels, ...]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xt = self.value(x);
        let (c, n) = xt.split_first();
        assert_eq!(c % groups, 0, "group_norm: channels not divisible by groups");
        let per = c / groups;
        let g_scale = self.value(gamma).data();
        let g_shift = self.value(beta).data();
        let mut out = vec![0.0; xt.len()];
        let mut means = Vec::with_capacity(groups);
        let mut rstds = Vec::with_capacity(groups);
        let count = (per * n) as f64;
        for g in 0..groups {
            let span = &xt.data()[g * per * n..(g + 1) * per * n];
            let mean = span.iter().sum::<f64>() / count;
            let var = span.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            let rstd = 1.0 / (var + GROUP_NORM_EPS).sqrt();
            for ci in 0..per {
                let ch = g * per + ci;
                let (s, b) = (g_scale[ch], g_shift[ch]);
                let src = &xt.data()[ch * n..(ch + 1) * n];
                let dst = &mut out[ch * n..(ch + 1) * n];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o = (v - mean) * rstd * s + b;
                }
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let value = Tensor::new(xt.shape().to_vec(), out).expect("group_norm shape");
        self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: means,
                rstd: rstds,
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (at, bt) = (self.value(a), self.value(b));
        assert_eq!(at.shape(), bt.shape(), "add: shapes");
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(at.shape().to_vec(), data).expect("add shape");
        self.push(value, Op::Add(a, b))
    }

    /// Adds `bias[c]` to every element of channel `c`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let xt = self.value(x);
        let bt = self.value(bias);
        let (c, n) = xt.split_first();
        assert_eq!(bt.len(), c, "add_channel_bias: channels");
        let mut data = xt.data().to_vec();
        for (ch, chunk) in data.chunks_mut(n).enumerate() {
            let b = bt.data()[ch];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let value = Tensor::new(xt.shape().to_vec(), data).expect("bias shape");
        self.push(value, Op::AddChannelBias { x, bias })
    }

    /// Concatenates along the leading (channel) dimension.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (at, bt) = (self.value(a), self.value(b));
        assert_eq!(at.shape()[1..], bt.shape()[1..], "concat: trailing dims");
        let mut shape = at.shape().to_vec();
        shape[0] += bt.shape()[0];
        let mut data = Vec::with_capacity(at.len() + bt.len());
        data.extend_from_slice(at.data());
        data.extend_from_slice(bt.data());
        self.push(Tensor::new(shape, data).expect("concat shape"), Op::Concat(a, b))
    }

    /// 2x average pooling of every spatial axis.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let (c, _) = xt.split_first();
        let [d, h, w] = xt.spatial();
        let (od, oh, ow) = (d / 2, h / 2, w / 2);
        let mut out = vec![0.0; c * od * oh * ow];
        let src = xt.data();
        for ch in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    for x_ in 0..ow {
                        let mut s = 0.0;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    s += src[((ch * d + 2 * z + dz) * h + 2 * y + dy) * w + 2 * x_ + dx];
                                }
                            }
                        }
                        out[((ch * od + z) * oh + y) * ow + x_] = s * 0.125;
                    }
                }
            }
        }
        let value = Tensor::new(vec![c, od, oh, ow], out).expect("pool shape");
        self.push(value, Op::AvgPool2(x))
    }

    /// 2x nearest-neighbour upsampling of every spatial axis.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let (c, _) = xt.split_first();
        let [d, h, w] = xt.spatial();
        let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
        let mut out = vec![0.0; c * od * oh * ow];
        let src = xt.data();
        for ch in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    let row = &mut out[((ch * od + z) * oh + y) * ow..((ch * od + z) * oh + y + 1) * ow];
                    let srow =
                        &src[((ch * d + z / 2) * h + y / 2) * w..((ch * d + z / 2) * h + y / 2 + 1) * w];
                    for (x_, o) in row.iter_mut().enumerate() {
                        *o = srow[x_ / 2];
                    }
                }
            }
        }
        let value = Tensor::new(vec![c, od, oh, ow], out).expect("upsample shape");
        self.push(value, Op::Upsample2(x))
    }

    /// Matrix product of two 2D tensors, optionally transposing either.
    pub fn matmul(&mut self, a: Var, trans_a: bool, b: Var, trans_b: bool) -> Var {
        let (at, bt) = (self.value(a), self.value(b));
        let (m, k) = if trans_a {
            (at.shape()[1], at.shape()[0])
        } else {
            (at.shape()[0], at.shape()[1])
        };
        let (kb, n) = if trans_b {
            (bt.shape()[1], bt.shape()[0])
        } else {
            (bt.shape()[0], bt.shape()[1])
        };
        assert_eq!(k, kb, "matmul: inner dimensions");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            at.data(),
            trans_a,
            bt.data(),
            trans_b,
            0.0,
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out).expect("matmul shape");
        self.push(
            value,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                m,
                k,
                n,
            },
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let (r, c) = (xt.shape()[0], xt.shape()[1]);
        let mut out = xt.data().to_vec();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let value = Tensor::new(vec![r, c], out).expect("softmax shape");
        self.push(value, Op::SoftmaxRows(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xt = self.value(x);
        let data = xt.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(xt.shape().to_vec(), data).expect("scale shape");
        self.push(value, Op::Scale(x, factor))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let data = self.value(x).data().to_vec();
        let value = Tensor::new(shape, data).expect("reshape: element count");
        self.push(value, Op::Reshape(x))
    }

    /// Back-propagates `seed` (the gradient with respect to `output`) and
    /// returns `(param index, gradient)` for every parameter leaf reached.
    pub fn backward(&self, output: Var, seed: Tensor) -> Vec<(usize, Tensor)> {
        assert_eq!(seed.shape(), self.value(output).shape(), "backward: seed shape");
        let mut grads: Vec<Option<Vec<f64>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(seed.into_data());
        let mut params = Vec::new();

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
            match &mut grads[v.0] {
                Some(existing) => add_into(existing, &g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(p) => {
                    let t = Tensor::new(node.value.shape().to_vec(), gy).expect("param grad");
                    params.push((*p, t));
                }
                Op::Conv3d { x, w, b, kernel } => {
                    let xt = self.value(*x);
                    let wt = self.value(*w);
                    let (cin, n) = xt.split_first();
                    let dims = xt.spatial();
                    let cout = wt.shape()[0];
                    let rows = cin * kernel * kernel * kernel;

                    let db: Vec<f64> = gy.chunks(n).map(|c| c.iter().sum()).collect();
                    acc(&mut grads, *b, db);

                    let mut dw = vec![0.0; cout * rows];
                    let mut dcols = vec![0.0; rows * n];
                    if *kernel == 1 {
                        gemm(cout, n, rows, 1.0, &gy, false, xt.data(), true, 0.0, &mut dw);
                        gemm(rows, cout, n, 1.0, wt.data(), true, &gy, false, 0.0, &mut dcols);
                        acc(&mut grads, *w, dw);
                        acc(&mut grads, *x, dcols);
                    } else {
                        let mut cols = vec![0.0; rows * n];
                        im2col(xt.data(), cin, dims, *kernel, &mut cols);
                        gemm(cout, n, rows, 1.0, &gy, false, &cols, true, 0.0, &mut dw);
                        gemm(rows, cout, n, 1.0, wt.data(), true, &gy, false, 0.0, &mut dcols);
                        let mut dx = vec![0.0; cin * n];
                        col2im(&dcols, cin, dims, *kernel, &mut dx);
                        acc(&mut grads, *w, dw);
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::Linear { x, w, b } => {
                    let xt = self.value(*x);
                    let wt = self.value(*w);
                    let (out_dim, in_dim) = (wt.shape()[0], wt.shape()[1]);
                    let mut dw = vec![0.0; out_dim * in_dim];
                    gemm(
                        out_dim,
                        1,
                        in_dim,
                        1.0,
                        &gy,
                        false,
                        xt.data(),
                        false,
                        0.0,
                        &mut dw,
                    );
                    let mut dx = vec![0.0; in_dim];
                    gemm(in_dim, out_dim, 1, 1.0, wt.data(), true, &gy, false, 0.0, &mut dx);
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *b, gy);
                }
                Op::Silu(x) => {
                    let xt = self.value(*x);
                    let dx = xt
                        .data()
                        .iter()
                        .zip(&gy)
                        .map(|(&v, &g)| {
                            let s = sigmoid(v);
                            g * s * (1.0 + v * (1.0 - s))
                        })
                        .collect();
                    acc(&mut grads, *x, dx);
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    mean,
                    rstd,
                } => {
                    let xt = self.value(*x);
                    let (c, n) = xt.split_first();
                    let per = c / groups;
                    let scale = self.value(*gamma).data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut dx = vec![0.0; xt.len()];
                    let count = (per * n) as f64;
                    for g in 0..*groups {
                        let (mu, rs) = (mean[g], rstd[g]);
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for ch in g * per..(g + 1) * per {
                            let xs = &xt.data()[ch * n..(ch + 1) * n];
                            let gs = &gy[ch * n..(ch + 1) * n];
                            for (&v, &gv) in xs.iter().zip(gs) {
                                let xhat = (v - mu) * rs;
                                dgamma[ch] += gv * xhat;
                                dbeta[ch] += gv;
                                let dxhat = gv * scale[ch];
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                            }
                        }
                        let mean_dxhat = sum_dxhat / count;
                        let mean_dxhat_xhat = sum_dxhat_xhat / count;
                        for ch in g * per..(g + 1) * per {
                            for i in ch * n..(ch + 1) * n {
                                let xhat = (xt.data()[i] - mu) * rs;
                                let dxhat = gy[i] * scale[ch];
                                dx[i] = rs * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                            }
                        }
                    }
                    acc(&mut grads, *gamma, dgamma);
                    acc(&mut grads, *beta, dbeta);
                    acc(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, gy.clone());
                    acc(&mut grads, *b, gy);
                }
                Op::AddChannelBias { x, bias } => {
                    let (_, n) = node.value.split_first();
                    let db = gy.chunks(n).map(|c| c.iter().sum()).collect();
                    acc(&mut grads, *bias, db);
                    acc(&mut grads, *x, gy);
                }
                Op::Concat(a, b) => {
                    let split = self.value(*a).len();
                    let mut ga = gy;
                    let gb = ga.split_off(split);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AvgPool2(x) => {
                    let xt = self.value(*x);
                    let (c, _) = xt.split_first();
                    let [d, h, w] = xt.spatial();
                    let (od, oh, ow) = (d / 2, h / 2, w / 2);
                    let mut dx = vec![0.0; xt.len()];
                    for ch in 0..c {
                        for z in 0..d {
                            for y in 0..h {
                                for x_ in 0..w {
                                    let (pz, py, px) = (z / 2, y / 2, x_ / 2);
                                    if pz < od && py < oh && px < ow {
                                        dx[((ch * d + z) * h + y) * w + x_] =
                                            0.125 * gy[((ch * od + pz) * oh + py) * ow + px];
                                    }
                                }
                            }
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Upsample2(x) => {
                    let xt = self.value(*x);
                    let (c, _) = xt.split_first();
                    let [d, h, w] = xt.spatial();
                    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
                    let mut dx = vec![0.0; xt.len()];
                    for ch in 0..c {
                        for z in 0..od {
                            for y in 0..oh {
                                let row =
                                    &gy[((ch * od + z) * oh + y) * ow..((ch * od + z) * oh + y + 1) * ow];
                                let base = ((ch * d + z / 2) * h + y / 2) * w;
                                for (x_, g) in row.iter().enumerate() {
                                    dx[base + x_ / 2] += g;
                                }
                            }
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::MatMul {
                    a,
                    b,
                    trans_a,
                    trans_b,
                    m,
                    k,
                    n,
                } => {
                    let (at, bt) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (*m, *k, *n);
                    // C = A' B'; dA' = dC B'^T, dB' = A'^T dC.
                    let mut da = vec![0.0; m * k];
                    if *trans_a {
                        // dA = B' dC^T, stored k x m.
                        gemm(k, n, m, 1.0, bt.data(), *trans_b, &gy, true, 0.0, &mut da);
                    } else {
                        gemm(m, n, k, 1.0, &gy, false, bt.data(), !*trans_b, 0.0, &mut da);
                    }
                    let mut db = vec![0.0; k * n];
                    if *trans_b {
                        // dB = dC^T A', stored n x k.
                        gemm(n, m, k, 1.0, &gy, true, at.data(), *trans_a, 0.0, &mut db);
                    } else {
                        gemm(k, m, n, 1.0, at.data(), !*trans_a, &gy, false, 0.0, &mut db);
                    }
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::SoftmaxRows(x) => {
                    let y = node.value.data();
                    let c = node.value.shape()[1];
                    let mut dx = vec![0.0; y.len()];
                    for ((yr, gr), dr) in y.chunks(c).zip(gy.chunks(c)).zip(dx.chunks_mut(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - dot);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Scale(x, f) => {
                    let dx = gy.iter().map(|g| g * f).collect();
                    acc(&mut grads, *x, dx);
                }
                Op::Reshape(x) => acc(&mut grads, *x, gy),
            }
        }
        params
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks every parameter gradient of `build` against central differences
    /// of the weighted sum `sum(out * weights)`.
    fn check<F>(params: Vec<Tensor>, build: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let eval = |ps: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ps
                .iter()
                .enumerate()
                .map(|(i, p)| tape.param(i, p.clone()))
                .collect();
            let out = build(&mut tape, &vars);
            (tape, out)
        };
        let (tape, out) = eval(&params);
        let shape = tape.value(out).shape().to_vec();
        let weights: Vec<f64> = (0..tape.value(out).len())
            .map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4)
            .collect();
        let loss = |ps: &[Tensor]| {
            let (t, o) = eval(ps);
            t.value(o)
                .data()
                .iter()
                .zip(&weights)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let grads = tape.backward(out, Tensor::new(shape, weights.clone()).unwrap());
        for (pi, g) in grads {
            for j in 0..params[pi].len() {
                let h = 1e-5;
                let mut plus = params.clone();
                plus[pi].data_mut()[j] += h;
                let mut minus = params.clone();
                minus[pi].data_mut()[j] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = g.data()[j];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs().max(an.abs())),
                    "param {pi}[{j}]: fd={fd} analytic={an}"
                );
            }
        }
    }

    #[test]
    fn conv3d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [1, 3] {
            let params = vec![
                rand_tensor(&mut rng, vec![2, 3, 4, 5]),
                rand_tensor(&mut rng, vec![3, 2, k, k, k]),
                rand_tensor(&mut rng, vec![3]),
            ];
            check(params, |t, v| t.conv3d(v[0], v[1], v[2]));
        }
    }

    #[test]
    fn conv3d_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, vec![2, 3, 4, 5]);
        let w = rand_tensor(&mut rng, vec![2, 2, 3, 3, 3]);
        let b = rand_tensor(&mut rng, vec![2]);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (
            tape.constant(x.clone()),
            tape.constant(w.clone()),
            tape.constant(b.clone()),
        );
        let y = tape.conv3d(xv, wv, bv);
        let out = tape.value(y);
        let (d, h, ww) = (3usize, 4usize, 5usize);
        for o in 0..2 {
            for z in 0..d {
                for yy in 0..h {
                    for xx in 0..ww {
                        let mut s = b.data()[o];
                        for c in 0..2 {
                            for kd in 0..3 {
                                for kh in 0..3 {
                                    for kw in 0..3 {
                                        let (sz, sy, sx) =
                                            (z as isize + kd - 1, yy as isize + kh - 1, xx as isize + kw - 1);
                                        if sz < 0
                                            || sy < 0
                                            || sx < 0
                                            || sz >= d as isize
                                            || sy >= h as isize
                                            || sx >= ww as isize
                                        {
                                            continue;
                                        }
                                        let xi = ((c * d + sz as usize) * h + sy as usize) * ww + sx as usize;
                                        let wi = (((o * 2 + c) * 3 + kd as usize) * 3 + kh as usize) * 3
                                            + kw as usize;
                                        s += x.data()[xi] * w.data()[wi];
                                    }
                                }
                            }
                        }
                        let got = out.data()[((o * d + z) * h + yy) * ww + xx];
                        assert!((got - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn norm_activation_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = vec![
            rand_tensor(&mut rng, vec![4, 2, 2, 3]),
            rand_tensor(&mut rng, vec![4]),
            rand_tensor(&mut rng, vec![4]),
        ];
        check(params, |t, v| {
            let n = t.group_norm(v[0], v[1], v[2], 2);
            t.silu(n)
        });
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = vec![
            rand_tensor(&mut rng, vec![2, 4, 2, 4]),
            rand_tensor(&mut rng, vec![3, 2, 1, 2]),
            rand_tensor(&mut rng, vec![5]),
        ];
        check(params, |t, v| {
            let p = t.avg_pool2(v[0]);
            let c = t.concat(p, v[1]);
            let u = t.upsample2(c);
            let b = t.add_channel_bias(u, v[2]);
            let s = t.scale(b, 0.7);
            t.add(s, u)
        });
    }

    #[test]
    fn attention_style_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = vec![
            rand_tensor(&mut rng, vec![3, 5]),
            rand_tensor(&mut rng, vec![3, 5]),
            rand_tensor(&mut rng, vec![4, 5]),
        ];
        check(params, |t, v| {
            let s = t.matmul(v[0], true, v[1], false);
            let s = t.scale(s, 0.5);
            let a = t.softmax_rows(s);
            let o = t.matmul(v[2], false, a, true);
            let r = t.reshape(o, vec![20]);
            t.silu(r)
        });
        let params = vec![
            rand_tensor(&mut rng, vec![3, 4]),
            rand_tensor(&mut rng, vec![2, 4]),
        ];
        check(params, |t, v| t.matmul(v[0], false, v[1], true));
        let params = vec![
            rand_tensor(&mut rng, vec![4, 3]),
            rand_tensor(&mut rng, vec![2, 4]),
        ];
        check(params, |t, v| t.matmul(v[0], true, v[1], true));
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = vec![
            rand_tensor(&mut rng, vec![4]),
            rand_tensor(&mut rng, vec![3, 4]),
            rand_tensor(&mut rng, vec![3]),
        ];
        check(params, |t, v| {
            let y = t.linear(v[0], v[1], v[2]);
            t.silu(y)
        });
    }

    #[test]
    fn unreached_params_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(0, Tensor::zeros(vec![2]));
        let _unused = tape.param(1, Tensor::zeros(vec![2]));
        let y = tape.scale(a, 2.0);
        let grads = tape.backward(y, Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].1.data(), &[2.0, 2.0]);
    }
}
