//! The computation tape.
//!
//! Nodes are appended in evaluation order, so the tape is already a topological
//! order: [`Graph::backward`] walks it once in reverse, visiting each record
//! exactly once and adding every contribution into the input gradients.

use super::conv::{self, ConvDims};
use super::gru::{self, DirCache, DirWeights, GruDims};
use super::tensor::{matmul, Mat, Real, Tensor};
use crate::error::{ensure, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Weights of one GRU direction as graph variables.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
}

impl GruVars {
    fn all(&self) -> [Var; 4] {
        [self.w_ih, self.w_hh, self.b_ih, self.b_hh]
    }
}

/// Per-channel statistics computed by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    /// Unbiased variance, for running-average updates.
    pub var: Vec<S>,
}

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    MulConst(Var, Vec<S>),
    Sum(Var),
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        dims: ConvDims,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
        batch_stats: bool,
    },
    AvgPool2(Var),
    MeanLast(Var),
    SwapLast2(Var),
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    RepeatAxis1 {
        x: Var,
        factor: usize,
    },
    PadEdge {
        x: Var,
        axis: usize,
        after: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    BiGru {
        x: Var,
        fwd: GruVars,
        bwd: GruVars,
        dims: GruDims,
        caches: Box<[DirCache<S>; 2]>,
    },
    Bce {
        pred: Var,
        target: Vec<S>,
    },
    MaskedMae {
        pred: Var,
        target: Vec<S>,
        mask: Vec<S>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    needs_grad: bool,
    op: Op<S>,
}

/// Reverse-mode tape over tensors of element type `S`.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Real> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Shape as `[outer, axis, inner]` around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) const BCE_CLAMP: f64 = 1e-7;

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input tensor. Gradients are kept for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad: requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure!(
            self.shape(a) == self.shape(b),
            Shape,
            "add of {:?} and {:?}",
            self.shape(a),
            self.shape(b)
        );
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure!(
            self.shape(a) == self.shape(b),
            Shape,
            "mul of {:?} and {:?}",
            self.shape(a),
            self.shape(b)
        );
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let data = self.data(x).iter().map(|&v| v * c).collect();
        let t = Tensor::new(self.shape(x), data).expect("same shape");
        self.push(t, Op::Scale(x, c), &[x])
    }

    /// Elementwise product with a constant of the same length.
    pub fn mul_const(&mut self, x: Var, c: &[S]) -> Result<Var> {
        ensure!(
            c.len() == self.value(x).len(),
            Shape,
            "constant has {} values, tensor {}",
            c.len(),
            self.value(x).len()
        );
        let data = self.data(x).iter().zip(c).map(|(&v, &k)| v * k).collect();
        let t = Tensor::new(self.shape(x), data)?;
        Ok(self.push(t, Op::MulConst(x, c.to_vec()), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: S = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self
            .data(x)
            .iter()
            .map(|&v| if v > S::zero() { v } else { S::zero() })
            .collect();
        let t = Tensor::new(self.shape(x), data).expect("same shape");
        self.push(t, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self
            .data(x)
            .iter()
            .map(|&v| {
                // split by sign so exp never overflows
                if v >= S::zero() {
                    S::one() / (S::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (S::one() + e)
                }
            })
            .collect();
        let t = Tensor::new(self.shape(x), data).expect("same shape");
        self.push(t, Op::Sigmoid(x), &[x])
    }

    /// 3x3 convolution, stride 1, zero padding 1. `x: [B, Ci, H, W]`, `w: [Co, Ci, 3, 3]`, `b: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        ensure!(xs.len() == 4, Shape, "conv2d input must be 4-D, got {xs:?}");
        ensure!(
            ws.len() == 4 && ws[2] == conv::K && ws[3] == conv::K,
            Shape,
            "conv2d kernel must be [Co, Ci, 3, 3], got {ws:?}"
        );
        ensure!(
            ws[1] == xs[1],
            Shape,
            "conv2d kernel expects {} input channels, input has {}",
            ws[1],
            xs[1]
        );
        ensure!(
            bs == [ws[0]],
            Shape,
            "conv2d bias {bs:?} for {} outputs",
            ws[0]
        );
        let dims = ConvDims {
            batch: xs[0],
            c_in: xs[1],
            c_out: ws[0],
            h: xs[2],
            w: xs[3],
        };
        let out = conv::forward(self.data(x), self.data(w), self.data(b), dims);
        let t = Tensor::new(&[dims.batch, dims.c_out, dims.h, dims.w], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, dims }, &[x, w, b]))
    }

    /// Batch norm over axis 1 of `[B, C, ...]` with batch statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<S>)> {
        let (c, per) = self.bn_layout(x, gamma, beta)?;
        let xs = self.data(x);
        let count = xs.len() / c;
        let mut mean = vec![S::zero(); c];
        let mut var = vec![S::zero(); c];
        for (ch, m) in mean.iter_mut().enumerate() {
            let acc: f64 = channel_blocks(xs, c, per, ch)
                .map(|b| lane_sum(b, |v| v))
                .sum();
            *m = S::of(acc / count as f64);
        }
        for (ch, vr) in var.iter_mut().enumerate() {
            let m = mean[ch].as_f64();
            let acc: f64 = channel_blocks(xs, c, per, ch)
                .map(|b| lane_sum(b, |v| (v - m) * (v - m)))
                .sum();
            *vr = S::of(acc / count as f64);
        }
        let inv_std: Vec<S> = var
            .iter()
            .map(|&v| S::one() / (v + S::of(eps)).sqrt())
            .collect();
        let unbiased = var
            .iter()
            .map(|&v| {
                if count > 1 {
                    v * S::of(count as f64 / (count - 1) as f64)
                } else {
                    v
                }
            })
            .collect();
        let y = self.bn_apply(x, gamma, beta, &mean, inv_std, per, true)?;
        Ok((
            y,
            BatchStats {
                mean,
                var: unbiased,
            },
        ))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[S],
        running_var: &[S],
        eps: f64,
    ) -> Result<Var> {
        let (c, per) = self.bn_layout(x, gamma, beta)?;
        ensure!(
            running_mean.len() == c && running_var.len() == c,
            Shape,
            "running statistics sized for {} channels, input has {c}",
            running_mean.len()
        );
        let inv_std = running_var
            .iter()
            .map(|&v| S::one() / (v + S::of(eps)).sqrt())
            .collect();
        self.bn_apply(x, gamma, beta, running_mean, inv_std, per, false)
    }

    fn bn_layout(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let xs = self.shape(x);
        ensure!(
            xs.len() >= 2,
            Shape,
            "batch norm input {xs:?} needs [B, C, ...]"
        );
        let c = xs[1];
        ensure!(
            self.shape(gamma) == [c] && self.shape(beta) == [c],
            Shape,
            "batch norm affine parameters must be [{c}]"
        );
        Ok((c, xs[2..].iter().product()))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[S],
        inv_std: Vec<S>,
        per: usize,
        batch_stats: bool,
    ) -> Result<Var> {
        let c = mean.len();
        let xs = self.data(x);
        let (g, bt) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![S::zero(); xs.len()];
        let mut out = vec![S::zero(); xs.len()];
        for (blk, (src, (xh, o))) in xs
            .chunks(per)
            .zip(xhat.chunks_mut(per).zip(out.chunks_mut(per)))
            .enumerate()
        {
            let ch = blk % c;
            for ((&v, h), y) in src.iter().zip(xh.iter_mut()).zip(o.iter_mut()) {
                *h = (v - mean[ch]) * inv_std[ch];
                *y = g[ch] * *h + bt[ch];
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        ))
    }

    /// Non-overlapping 2x2 mean over the last two axes of `[B, C, H, W]`.
    pub fn avg_pool_2x2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure!(s.len() == 4, Shape, "avg pool input must be 4-D, got {s:?}");
        ensure!(
            s[2] % 2 == 0 && s[3] % 2 == 0,
            Shape,
            "avg pool needs even spatial dims, got {}x{}",
            s[2],
            s[3]
        );
        let (h, w) = (s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xs = self.data(x);
        let quarter = S::of(0.25);
        let mut out = Vec::with_capacity(xs.len() / 4);
        for plane in xs.chunks(h * w) {
            for y in 0..ho {
                for xx in 0..wo {
                    let a = plane[2 * y * w + 2 * xx];
                    let b = plane[2 * y * w + 2 * xx + 1];
                    let c = plane[(2 * y + 1) * w + 2 * xx];
                    let d = plane[(2 * y + 1) * w + 2 * xx + 1];
                    out.push((a + b + c + d) * quarter);
                }
            }
        }
        let t = Tensor::new(&[s[0], s[1], ho, wo], out)?;
        Ok(self.push(t, Op::AvgPool2(x), &[x]))
    }

    /// Mean over the last axis: `[..., F] -> [...]`.
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure!(
            !s.is_empty() && s[s.len() - 1] > 0,
            Shape,
            "mean over empty last axis of {s:?}"
        );
        let f = s[s.len() - 1];
        let inv = S::one() / S::of(f as f64);
        let out = self
            .data(x)
            .chunks(f)
            .map(|r| r.iter().copied().sum::<S>() * inv)
            .collect();
        let t = Tensor::new(&s[..s.len() - 1], out)?;
        Ok(self.push(t, Op::MeanLast(x), &[x]))
    }

    /// `[B, P, Q] -> [B, Q, P]`.
    pub fn swap_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure!(
            s.len() == 3,
            Shape,
            "swap_last2 needs a 3-D input, got {s:?}"
        );
        let (b, p, q) = (s[0], s[1], s[2]);
        let out = transpose_batched(self.data(x), b, p, q);
        let t = Tensor::new(&[b, q, p], out)?;
        Ok(self.push(t, Op::SwapLast2(x), &[x]))
    }

    /// Affine map over the last axis: `x [..., D]`, `w [K, D]`, `b [K]` -> `[..., K]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        ensure!(
            ws.len() == 2,
            Shape,
            "dense weight must be [K, D], got {ws:?}"
        );
        let (k, d) = (ws[0], ws[1]);
        ensure!(
            xs.last() == Some(&d),
            Shape,
            "dense expects last dim {d}, input is {xs:?}"
        );
        ensure!(self.shape(b) == [k], Shape, "dense bias must be [{k}]");
        let rows = self.value(x).len() / d;
        let mut out = Vec::with_capacity(rows * k);
        for _ in 0..rows {
            out.extend_from_slice(self.data(b));
        }
        matmul(
            Mat::new(self.data(x), rows, d),
            Mat::t(self.data(w), d, k),
            &mut out,
            true,
        );
        let mut shape = xs;
        *shape.last_mut().expect("nonempty") = k;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Dense { x, w, b }, &[x, w, b]))
    }

    /// Nearest-neighbor repeat along axis 1: `[B, T, ...] -> [B, T * factor, ...]`.
    pub fn repeat_axis1(&mut self, x: Var, factor: usize) -> Result<Var> {
        ensure!(
            factor >= 1,
            InvalidArgument,
            "upsampling factor must be at least 1"
        );
        let s = self.shape(x).to_vec();
        ensure!(
            s.len() >= 2,
            Shape,
            "repeat needs at least 2 axes, got {s:?}"
        );
        let (outer, t_len, inner) = split_at_axis(&s, 1);
        let xs = self.data(x);
        let mut out = Vec::with_capacity(xs.len() * factor);
        for o in 0..outer {
            for t in 0..t_len {
                let row = &xs[(o * t_len + t) * inner..][..inner];
                for _ in 0..factor {
                    out.extend_from_slice(row);
                }
            }
        }
        let mut shape = s;
        shape[1] *= factor;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::RepeatAxis1 { x, factor }, &[x]))
    }

    /// Appends `after` copies of the last slice along `axis`.
    pub fn pad_edge(&mut self, x: Var, axis: usize, after: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure!(
            axis < s.len() && s[axis] > 0,
            Shape,
            "cannot edge-pad axis {axis} of {s:?}"
        );
        let (outer, n, inner) = split_at_axis(&s, axis);
        let xs = self.data(x);
        let mut out = Vec::with_capacity(outer * (n + after) * inner);
        for o in 0..outer {
            let blk = &xs[o * n * inner..(o + 1) * n * inner];
            out.extend_from_slice(blk);
            let last = &blk[(n - 1) * inner..];
            for _ in 0..after {
                out.extend_from_slice(last);
            }
        }
        let mut shape = s;
        shape[axis] += after;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::PadEdge { x, axis, after }, &[x]))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure!(
            axis < s.len() && start + len <= s[axis],
            Shape,
            "narrow [{start}, {}) out of range for axis {axis} of {s:?}",
            start + len
        );
        let (outer, n, inner) = split_at_axis(&s, axis);
        let xs = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xs[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Bidirectional single-layer GRU, zero initial state: `[B, T, D] -> [B, T, 2H]`.
    pub fn bigru(&mut self, x: Var, fwd: GruVars, bwd: GruVars) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        ensure!(
            xs.len() == 3,
            Shape,
            "GRU input must be [B, T, D], got {xs:?}"
        );
        let d_in = xs[2];
        ensure!(d_in % 2 == 0, Shape, "GRU width {d_in} must be even");
        let hid = d_in / 2;
        for dir in [&fwd, &bwd] {
            ensure!(
                self.shape(dir.w_ih) == [3 * hid, d_in]
                    && self.shape(dir.w_hh) == [3 * hid, hid]
                    && self.shape(dir.b_ih) == [3 * hid]
                    && self.shape(dir.b_hh) == [3 * hid],
                Shape,
                "GRU weights inconsistent with input width {d_in} and hidden size {hid}"
            );
        }
        let dims = GruDims {
            batch: xs[0],
            steps: xs[1],
            input: d_in,
            hidden: hid,
        };
        let width = 2 * hid;
        let mut out = vec![S::zero(); dims.batch * dims.steps * width];
        let caches = {
            let weights = |v: &GruVars| DirWeights {
                w_ih: self.data(v.w_ih),
                w_hh: self.data(v.w_hh),
                b_ih: self.data(v.b_ih),
                b_hh: self.data(v.b_hh),
            };
            let xd = self.data(x);
            let cf = gru::forward_dir(xd, &weights(&fwd), dims, false, &mut out, width, 0);
            let cb = gru::forward_dir(xd, &weights(&bwd), dims, true, &mut out, width, hid);
            Box::new([cf, cb])
        };
        let t = Tensor::new(&[dims.batch, dims.steps, width], out)?;
        let mut inputs = vec![x];
        inputs.extend(fwd.all());
        inputs.extend(bwd.all());
        Ok(self.push(
            t,
            Op::BiGru {
                x,
                fwd,
                bwd,
                dims,
                caches,
            },
            &inputs,
        ))
    }

    /// Mean binary cross-entropy of probabilities clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce_loss(&mut self, pred: Var, target: &[S]) -> Result<Var> {
        ensure!(
            self.value(pred).len() == target.len(),
            Shape,
            "bce prediction has {} values, target {}",
            self.value(pred).len(),
            target.len()
        );
        ensure!(
            target.iter().all(|&t| t == S::zero() || t == S::one()),
            InvalidArgument,
            "bce targets must be 0 or 1"
        );
        let (lo, hi) = (S::of(BCE_CLAMP), S::one() - S::of(BCE_CLAMP));
        let n = target.len().max(1);
        let total: f64 = self
            .data(pred)
            .iter()
            .zip(target)
            .map(|(&p, &t)| {
                let p = p.max(lo).min(hi).as_f64();
                let t = t.as_f64();
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let t = Tensor::scalar(S::of(total / n as f64));
        Ok(self.push(
            t,
            Op::Bce {
                pred,
                target: target.to_vec(),
            },
            &[pred],
        ))
    }

    /// `sum mask * (|d_azi| + |d_ele|) / (2 * sum mask)` over `[..., N, 2]` predictions
    /// and `[..., N]` mask; zero when the mask is empty.
    pub fn masked_mae_loss(&mut self, pred: Var, target: &[S], mask: &[S]) -> Result<Var> {
        let n = self.value(pred).len();
        ensure!(
            target.len() == n && mask.len() * 2 == n,
            Shape,
            "masked MAE: prediction {n}, target {}, mask {}",
            target.len(),
            mask.len()
        );
        ensure!(
            mask.iter().all(|&m| m == S::zero() || m == S::one()),
            InvalidArgument,
            "mask must be binary"
        );
        let active: S = mask.iter().copied().sum();
        let loss = if active > S::zero() {
            let p = self.data(pred);
            let mut acc = S::zero();
            for (k, &m) in mask.iter().enumerate() {
                if m > S::zero() {
                    acc +=
                        (p[2 * k] - target[2 * k]).abs() + (p[2 * k + 1] - target[2 * k + 1]).abs();
                }
            }
            acc / (S::of(2.0) * active)
        } else {
            S::zero()
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MaskedMae {
                pred,
                target: target.to_vec(),
                mask: mask.to_vec(),
            },
            &[pred],
        ))
    }

    /// Hash of which side of every non-differentiable point the graph is on: ReLU input
    /// signs, absolute-error signs and BCE clamp states. Two evaluations with equal
    /// signatures lie on one smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut fold = |bit: bool| {
            h ^= bit as u64 + 1;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        let (lo, hi) = (S::of(BCE_CLAMP), S::one() - S::of(BCE_CLAMP));
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => self.data(*x).iter().for_each(|&v| fold(v > S::zero())),
                Op::MaskedMae { pred, target, mask } => {
                    let p = self.data(*pred);
                    for (k, &m) in mask.iter().enumerate() {
                        if m > S::zero() {
                            fold(p[2 * k] > target[2 * k]);
                            fold(p[2 * k + 1] > target[2 * k + 1]);
                        }
                    }
                }
                Op::Bce { pred, .. } => self
                    .data(*pred)
                    .iter()
                    .for_each(|&v| fold(v < lo || v > hi)),
                _ => {}
            }
        }
        h
    }

    /// Reverse pass from the scalar `loss`. Leaf gradients accumulate; intermediate
    /// gradients are released once propagated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        ensure!(
            self.value(loss).len() == 1,
            Shape,
            "backward needs a scalar, got {:?}",
            self.shape(loss)
        );
        if !self.needs(loss) {
            return Ok(());
        }
        accumulate(&mut self.nodes[loss.0].grad, vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            for (v, dg) in self.local_backward(i, &g)? {
                if self.nodes[v.0].needs_grad {
                    accumulate(&mut self.nodes[v.0].grad, dg);
                }
            }
        }
        Ok(())
    }

    fn local_backward(&self, i: usize, g: &[S]) -> Result<Vec<(Var, Vec<S>)>> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Mul(a, b) => {
                out.push((
                    *a,
                    g.iter().zip(self.data(*b)).map(|(&d, &v)| d * v).collect(),
                ));
                out.push((
                    *b,
                    g.iter().zip(self.data(*a)).map(|(&d, &v)| d * v).collect(),
                ));
            }
            Op::Scale(x, c) => out.push((*x, g.iter().map(|&v| v * *c).collect())),
            Op::MulConst(x, c) => out.push((*x, g.iter().zip(c).map(|(&d, &k)| d * k).collect())),
            Op::Sum(x) => out.push((*x, vec![g[0]; self.value(*x).len()])),
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Relu(x) => {
                let dx = self
                    .data(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &d)| if v > S::zero() { d } else { S::zero() })
                    .collect();
                out.push((*x, dx));
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                out.push((
                    *x,
                    y.iter()
                        .zip(g)
                        .map(|(&s, &d)| d * s * (S::one() - s))
                        .collect(),
                ));
            }
            Op::Conv2d { x, w, b, dims } => {
                let grads = conv::backward(self.data(*x), self.data(*w), g, *dims, self.needs(*x));
                if let Some(dx) = grads.dx {
                    out.push((*x, dx));
                }
                out.push((*w, grads.dw));
                out.push((*b, grads.db));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let per: usize = self.shape(*x)[2..].iter().product();
                let count = (xhat.len() / c) as f64;
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                for (blk, (gb, hb)) in g.chunks(per).zip(xhat.chunks(per)).enumerate() {
                    let ch = blk % c;
                    for (&d, &h) in gb.iter().zip(hb) {
                        dgamma[ch] += d * h;
                        dbeta[ch] += d;
                    }
                }
                if self.needs(*x) {
                    let gam = self.data(*gamma);
                    let mut dx = vec![S::zero(); g.len()];
                    for (blk, ((gb, hb), db)) in g
                        .chunks(per)
                        .zip(xhat.chunks(per))
                        .zip(dx.chunks_mut(per))
                        .enumerate()
                    {
                        let ch = blk % c;
                        let scale = gam[ch] * inv_std[ch];
                        if *batch_stats {
                            let (mb, mg) = (dbeta[ch] / S::of(count), dgamma[ch] / S::of(count));
                            for ((&d, &h), o) in gb.iter().zip(hb).zip(db.iter_mut()) {
                                *o = scale * (d - mb - h * mg);
                            }
                        } else {
                            for (&d, o) in gb.iter().zip(db.iter_mut()) {
                                *o = scale * d;
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let (ho, wo) = (h / 2, w / 2);
                let quarter = S::of(0.25);
                let mut dx = vec![S::zero(); self.value(*x).len()];
                for (plane, gp) in dx.chunks_mut(h * w).zip(g.chunks(ho * wo)) {
                    for y in 0..ho {
                        for xx in 0..wo {
                            let v = gp[y * wo + xx] * quarter;
                            plane[2 * y * w + 2 * xx] = v;
                            plane[2 * y * w + 2 * xx + 1] = v;
                            plane[(2 * y + 1) * w + 2 * xx] = v;
                            plane[(2 * y + 1) * w + 2 * xx + 1] = v;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::MeanLast(x) => {
                let s = self.shape(*x);
                let f = s[s.len() - 1];
                let inv = S::one() / S::of(f as f64);
                let dx = g
                    .iter()
                    .flat_map(|&d| std::iter::repeat(d * inv).take(f))
                    .collect();
                out.push((*x, dx));
            }
            Op::SwapLast2(x) => {
                let s = self.shape(*x);
                out.push((*x, transpose_batched(g, s[0], s[2], s[1])));
            }
            Op::Dense { x, w, b } => {
                let ws = self.shape(*w);
                let (k, d) = (ws[0], ws[1]);
                let rows = g.len() / k;
                let mut dw = vec![S::zero(); k * d];
                matmul(
                    Mat::t(g, k, rows),
                    Mat::new(self.data(*x), rows, d),
                    &mut dw,
                    false,
                );
                let mut db = vec![S::zero(); k];
                for r in g.chunks(k) {
                    db.iter_mut().zip(r).for_each(|(a, &v)| *a += v);
                }
                if self.needs(*x) {
                    let mut dx = vec![S::zero(); rows * d];
                    matmul(
                        Mat::new(g, rows, k),
                        Mat::new(self.data(*w), k, d),
                        &mut dx,
                        false,
                    );
                    out.push((*x, dx));
                }
                out.push((*w, dw));
                out.push((*b, db));
            }
            Op::RepeatAxis1 { x, factor } => {
                let (outer, t_len, inner) = split_at_axis(self.shape(*x), 1);
                let mut dx = vec![S::zero(); self.value(*x).len()];
                for o in 0..outer {
                    for t in 0..t_len {
                        let dst = &mut dx[(o * t_len + t) * inner..][..inner];
                        for r in 0..*factor {
                            let src = &g[((o * t_len + t) * factor + r) * inner..][..inner];
                            dst.iter_mut().zip(src).for_each(|(a, &v)| *a += v);
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::PadEdge { x, axis, after } => {
                let (outer, n, inner) = split_at_axis(self.shape(*x), *axis);
                let m = n + after;
                let mut dx = vec![S::zero(); self.value(*x).len()];
                for o in 0..outer {
                    let src = &g[o * m * inner..(o + 1) * m * inner];
                    let dst = &mut dx[o * n * inner..(o + 1) * n * inner];
                    dst.copy_from_slice(&src[..n * inner]);
                    let last = &mut dst[(n - 1) * inner..];
                    for r in 0..*after {
                        let extra = &src[(n + r) * inner..(n + r + 1) * inner];
                        last.iter_mut().zip(extra).for_each(|(a, &v)| *a += v);
                    }
                }
                out.push((*x, dx));
            }
            Op::Narrow { x, axis, start } => {
                let (outer, n, inner) = split_at_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![S::zero(); self.value(*x).len()];
                for o in 0..outer {
                    dx[(o * n + start) * inner..(o * n + start + len) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, dx));
            }
            Op::BiGru {
                x,
                fwd,
                bwd,
                dims,
                caches,
            } => {
                let width = 2 * dims.hidden;
                let mut dx = self
                    .needs(*x)
                    .then(|| vec![S::zero(); self.value(*x).len()]);
                for (k, (vars, reverse)) in [(fwd, false), (bwd, true)].into_iter().enumerate() {
                    let weights = DirWeights {
                        w_ih: self.data(vars.w_ih),
                        w_hh: self.data(vars.w_hh),
                        b_ih: self.data(vars.b_ih),
                        b_hh: self.data(vars.b_hh),
                    };
                    let grads = gru::backward_dir(
                        self.data(*x),
                        &weights,
                        &caches[k],
                        *dims,
                        reverse,
                        g,
                        width,
                        k * dims.hidden,
                        dx.as_deref_mut(),
                    );
                    out.push((vars.w_ih, grads.w_ih));
                    out.push((vars.w_hh, grads.w_hh));
                    out.push((vars.b_ih, grads.b_ih));
                    out.push((vars.b_hh, grads.b_hh));
                }
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
            }
            Op::Bce { pred, target } => {
                let n = S::of(target.len().max(1) as f64);
                let (lo, hi) = (S::of(BCE_CLAMP), S::one() - S::of(BCE_CLAMP));
                let dx = self
                    .data(*pred)
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| {
                        if p < lo || p > hi {
                            S::zero()
                        } else {
                            g[0] * (-t / p + (S::one() - t) / (S::one() - p)) / n
                        }
                    })
                    .collect();
                out.push((*pred, dx));
            }
            Op::MaskedMae { pred, target, mask } => {
                let active: S = mask.iter().copied().sum();
                let mut dx = vec![S::zero(); target.len()];
                if active > S::zero() {
                    let scale = g[0] / (S::of(2.0) * active);
                    let p = self.data(*pred);
                    for (k, &m) in mask.iter().enumerate() {
                        if m > S::zero() {
                            for c in [2 * k, 2 * k + 1] {
                                dx[c] = sign(p[c] - target[c]) * scale;
                            }
                        }
                    }
                }
                out.push((*pred, dx));
            }
        }
        if let Some((v, _)) = out.iter().find(|(v, d)| d.len() != self.value(*v).len()) {
            return Err(Error::Shape(format!(
                "internal: gradient size mismatch for node {}",
                v.0
            )));
        }
        Ok(out)
    }
}

fn sign<S: Real>(v: S) -> S {
    if v > S::zero() {
        S::one()
    } else if v < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

fn accumulate<S: Real>(slot: &mut Option<Vec<S>>, dg: Vec<S>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(dg).for_each(|(a, v)| *a += v),
        None => *slot = Some(dg),
    }
}

fn channel_blocks<S: Real>(
    xs: &[S],
    c: usize,
    per: usize,
    ch: usize,
) -> impl Iterator<Item = &[S]> {
    xs.chunks(per).skip(ch).step_by(c)
}

/// Sum of `f(v)` in f64 over eight interleaved lanes.
fn lane_sum<S: Real>(xs: &[S], f: impl Fn(f64) -> f64) -> f64 {
    let mut lanes = [0.0f64; 8];
    let mut it = xs.chunks_exact(8);
    for blk in &mut it {
        for (l, &v) in lanes.iter_mut().zip(blk) {
            *l += f(v.as_f64());
        }
    }
    let tail: f64 = it.remainder().iter().map(|&v| f(v.as_f64())).sum();
    lanes.iter().sum::<f64>() + tail
}

fn transpose_batched<S: Real>(x: &[S], b: usize, p: usize, q: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for n in 0..b {
        let src = &x[n * p * q..(n + 1) * p * q];
        let dst = &mut out[n * p * q..(n + 1) * p * q];
        for i in 0..p {
            for j in 0..q {
                dst[j * p + i] = src[i * q + j];
            }
        }
    }
    out
}
