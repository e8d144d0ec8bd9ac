//! Reverse-mode differentiation on a dynamic tape.
//!
//! Every op appends a node holding its output value and enough saved state to
//! run its backward rule. [`Tape::backward`] replays the nodes in reverse and
//! leaves gradients on the leaves.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::directionmax::{self, Direction};
use crate::error::{Error, Result};
use crate::ops::conv;
use crate::ops::resize;
use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Relu,
    Sigmoid,
    Neg,
    Add(Var),
    Mul(Var),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        transposed: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Neg(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    UpNearest2(Var),
    MaxPool2 {
        x: Var,
        src: Vec<u32>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    DirectionMax {
        x: Var,
        src: Vec<u32>,
    },
    /// `scale * sum(residual^2)` with masked entries already zeroed.
    MaskedSse {
        pred: Var,
        residual: Vec<f64>,
        scale: f64,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        let mut value = value;
        value.zero_grad();
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on `v` by the last [`Tape::backward`]; only leaves
    /// keep theirs.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = conv::conv2d(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        Ok(self.push(
            out,
            Op::Conv {
                x,
                w,
                bias,
                stride,
                pad,
                transposed: false,
            },
        ))
    }

    pub fn transposed_conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = conv::transposed_conv2d(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        Ok(self.push(
            out,
            Op::Conv {
                x,
                w,
                bias,
                stride,
                pad,
                transposed: true,
            },
        ))
    }

    pub fn elementwise(&mut self, x: Var, mode: Elementwise) -> Result<Var> {
        match mode {
            Elementwise::Relu => Ok(self.relu(x)),
            Elementwise::Sigmoid => Ok(self.sigmoid(x)),
            Elementwise::Neg => Ok(self.neg(x)),
            Elementwise::Add(y) => self.add(x, y),
            Elementwise::Mul(y) => self.mul(x, y),
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        // NaN passes through so non-finite activations stay visible downstream.
        let out = self.value(x).map(|v| if v <= 0.0 { 0.0 } else { v });
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| -v);
        self.push(out, Op::Neg(x))
    }

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa,
                rhs: sb,
            });
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Tensor::from_vec(shape, data)?, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Tensor::from_vec(shape, data)?, Op::Mul(a, b)))
    }

    /// Left-to-right sum of equally shaped terms.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or(Error::EmptyInput { op: "add_all" })?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let &first = xs.first().ok_or(Error::EmptyInput {
            op: "concat_channels",
        })?;
        let s0 = self.shape(first);
        for &x in &xs[1..] {
            let s = self.shape(x);
            if !s.same_spatial(&s0) {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    lhs: s0,
                    rhs: s,
                });
            }
        }
        let c: usize = xs.iter().map(|&x| self.shape(x).c).sum();
        let p = s0.plane();
        let mut data = Vec::with_capacity(s0.n * c * p);
        for n in 0..s0.n {
            for &x in xs {
                let t = self.value(x);
                let cx = t.shape().c;
                data.extend_from_slice(&t.data()[n * cx * p..(n + 1) * cx * p]);
            }
        }
        Ok(self.push(
            Tensor::from_vec(s0.with_c(c), data)?,
            Op::Concat(xs.to_vec()),
        ))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_channels(start, len)?;
        Ok(self.push(out, Op::SliceChannels { x, start }))
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Concatenation along the batch axis (also the output-channel axis of
    /// convolution weights).
    pub fn concat_batch(&mut self, xs: &[Var]) -> Result<Var> {
        let &first = xs.first().ok_or(Error::EmptyInput { op: "concat_batch" })?;
        let s0 = self.shape(first);
        let mut flat = Vec::with_capacity(xs.len());
        let mut n = 0;
        for &x in xs {
            let s = self.shape(x);
            if (s.c, s.h, s.w) != (s0.c, s0.h, s0.w) {
                return Err(Error::ShapeMismatch {
                    op: "concat_batch",
                    lhs: s0,
                    rhs: s,
                });
            }
            n += s.n;
            flat.push(self.reshape(x, Shape::new(1, s.n * s.c, s.h, s.w))?);
        }
        let cat = self.concat_channels(&flat)?;
        self.reshape(cat, Shape::new(n, s0.c, s0.h, s0.w))
    }

    /// Samples `start..start + len` along the batch axis.
    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        let flat = self.reshape(x, Shape::new(1, s.n * s.c, s.h, s.w))?;
        let part = self.slice_channels(flat, start * s.c, len * s.c)?;
        self.reshape(part, Shape::new(len, s.c, s.h, s.w))
    }

    pub fn resize(&mut self, x: Var, mode: resize::Resize) -> Result<Var> {
        match mode {
            resize::Resize::NearestUp2 => {
                let out = resize::nearest_up2(self.value(x));
                Ok(self.push(out, Op::UpNearest2(x)))
            }
            resize::Resize::MaxPoolDown2 => {
                let (out, src) = resize::maxpool_down2_with_sources(self.value(x))?;
                Ok(self.push(out, Op::MaxPool2 { x, src }))
            }
        }
    }

    /// Normalizes with batch statistics (biased variance).
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let s = self.shape(x);
        self.check_channels("batch_norm", x, gamma, beta)?;
        let m = (s.n * s.plane()) as f64;
        let xv = self.value(x);
        let mut mean = vec![0.0; s.c];
        let mut var = vec![0.0; s.c];
        for n in 0..s.n {
            for c in 0..s.c {
                mean[c] += xv.plane(n, c).iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for n in 0..s.n {
            for c in 0..s.c {
                var[c] += xv
                    .plane(n, c)
                    .iter()
                    .map(|v| (v - mean[c]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (out, xhat) = self.affine_normalize(x, gamma, beta, &mean, &inv_std);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        Ok((v, BatchStats { mean, var }))
    }

    /// Normalizes with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        self.check_channels("batch_norm", x, gamma, beta)?;
        if mean.len() != self.shape(x).c || var.len() != mean.len() {
            return Err(Error::InvalidArgument(format!(
                "batch_norm running statistics have {} channels, input has {}",
                mean.len(),
                self.shape(x).c
            )));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (out, xhat) = self.affine_normalize(x, gamma, beta, mean, &inv_std);
        Ok(self.push(
            out,
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    fn check_channels(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<()> {
        let c = self.shape(x).c;
        for p in [gamma, beta] {
            if self.value(p).numel() != c {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: self.shape(x),
                    rhs: self.shape(p),
                });
            }
        }
        Ok(())
    }

    fn affine_normalize(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
    ) -> (Tensor, Vec<f64>) {
        let xv = self.value(x);
        let s = xv.shape();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Tensor::zeros(s);
        let mut xhat = vec![0.0; xv.numel()];
        let p = s.plane();
        for n in 0..s.n {
            for c in 0..s.c {
                let base = (n * s.c + c) * p;
                for i in base..base + p {
                    let h = (xv.data()[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out.data_mut()[i] = g[c] * h + b[c];
                }
            }
        }
        (out, xhat)
    }

    pub fn directionmax(&mut self, x: Var, dir: Direction) -> Var {
        let (out, src) = directionmax::forward_with_sources(self.value(x), dir);
        self.push(out, Op::DirectionMax { x, src })
    }

    /// `(1/n) * sum over unmasked (sample, channel) planes of (pred - target)^2`.
    /// `mask` holds one flag per (sample, channel); `true` means supervised.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor, mask: &[bool]) -> Result<Var> {
        let s = self.shape(pred);
        if s != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "mse_loss",
                lhs: s,
                rhs: target.shape(),
            });
        }
        if mask.len() != s.n * s.c {
            return Err(Error::InvalidArgument(format!(
                "mse_loss mask has {} flags, expected {}",
                mask.len(),
                s.n * s.c
            )));
        }
        let p = s.plane();
        let mut residual: Vec<f64> = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| a - b)
            .collect();
        for (plane, &keep) in residual.chunks_exact_mut(p).zip(mask) {
            if !keep {
                plane.fill(0.0);
            }
        }
        let scale = 1.0 / s.n as f64;
        let loss = scale * residual.iter().map(|r| r * r).sum::<f64>();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MaskedSse {
                pred,
                residual,
                scale,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    /// Hash of every piecewise-linear branch decision on the tape (relu active
    /// sets, pooling sources). Two evaluations with equal signatures lie on
    /// the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(x) => {
                    i.hash(&mut h);
                    for v in self.value(*x).data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool2 { src, .. } | Op::DirectionMax { src, .. } => {
                    i.hash(&mut h);
                    src.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse replay from the scalar `loss`. Intermediate gradients are
    /// released as soon as they have been propagated; leaf gradients remain.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let s = self.shape(loss);
        if s.numel() != 1 {
            return Err(Error::NonScalar(s));
        }
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
        self.nodes[loss.0].value.accumulate_grad(&[1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].value.take_grad() else {
                continue;
            };
            for (target, contrib) in self.backward_node(i, g)? {
                self.nodes[target.0].value.accumulate_grad_owned(contrib);
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: Vec<f64>) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv {
                x,
                w,
                bias,
                stride,
                pad,
                transposed,
            } => {
                let grads = if *transposed {
                    conv::transposed_conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        *stride,
                        *pad,
                    )?
                } else {
                    conv::conv2d_backward(self.value(*x), self.value(*w), &g, *stride, *pad)?
                };
                let mut v = vec![(*x, grads.x.into_data()), (*w, grads.w.into_data())];
                if let Some(b) = bias {
                    v.push((*b, grads.bias.into_data()));
                }
                v
            }
            Op::Relu(x) => {
                let mut g = g;
                for (g, &v) in g.iter_mut().zip(self.value(*x).data()) {
                    if !(v > 0.0) {
                        *g = 0.0;
                    }
                }
                vec![(*x, g)]
            }
            Op::Sigmoid(x) => {
                let mut g = g;
                g.iter_mut()
                    .zip(out.data())
                    .for_each(|(g, y)| *g *= y * (1.0 - y));
                vec![(*x, g)]
            }
            Op::Neg(x) => {
                let mut g = g;
                g.iter_mut().for_each(|v| *v = -*v);
                vec![(*x, g)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g)],
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                vec![
                    (*a, g.iter().zip(bv).map(|(g, b)| g * b).collect()),
                    (*b, g.iter().zip(av).map(|(g, a)| g * a).collect()),
                ]
            }
            Op::Concat(xs) => {
                let s = out.shape();
                let p = s.plane();
                let mut parts: Vec<Vec<f64>> = xs
                    .iter()
                    .map(|&x| Vec::with_capacity(self.value(x).numel()))
                    .collect();
                for n in 0..s.n {
                    let mut off = (n * s.c) * p;
                    for (k, &x) in xs.iter().enumerate() {
                        let len = self.shape(x).c * p;
                        parts[k].extend_from_slice(&g[off..off + len]);
                        off += len;
                    }
                }
                xs.iter().copied().zip(parts).collect()
            }
            Op::SliceChannels { x, start } => {
                let xs = self.shape(*x);
                let len = out.shape().c;
                let p = xs.plane();
                let mut gx = vec![0.0; xs.numel()];
                for n in 0..xs.n {
                    let dst = (n * xs.c + start) * p;
                    gx[dst..dst + len * p].copy_from_slice(&g[n * len * p..(n + 1) * len * p]);
                }
                vec![(*x, gx)]
            }
            Op::Reshape(x) => vec![(*x, g)],
            Op::UpNearest2(x) => vec![(*x, resize::nearest_up2_backward(self.shape(*x), &g))],
            Op::MaxPool2 { x, src } => {
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (gv, &s) in g.iter().zip(src) {
                    gx[s as usize] += gv;
                }
                vec![(*x, gx)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = out.shape();
                let p = s.plane();
                let m = (s.n * p) as f64;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; s.c];
                let mut dbeta = vec![0.0; s.c];
                for n in 0..s.n {
                    for c in 0..s.c {
                        let base = (n * s.c + c) * p;
                        for j in base..base + p {
                            dgamma[c] += g[j] * xhat[j];
                            dbeta[c] += g[j];
                        }
                    }
                }
                let mut gx = vec![0.0; g.len()];
                for n in 0..s.n {
                    for c in 0..s.c {
                        let base = (n * s.c + c) * p;
                        // sum(dxhat) = gamma*dbeta, sum(dxhat*xhat) = gamma*dgamma
                        let k = gam[c] * inv_std[c] / m;
                        for j in base..base + p {
                            gx[j] = k * (m * g[j] - dbeta[c] - xhat[j] * dgamma[c]);
                        }
                    }
                }
                vec![(*x, gx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = out.shape();
                let p = s.plane();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; s.c];
                let mut dbeta = vec![0.0; s.c];
                let mut gx = vec![0.0; g.len()];
                for n in 0..s.n {
                    for c in 0..s.c {
                        let base = (n * s.c + c) * p;
                        for j in base..base + p {
                            dgamma[c] += g[j] * xhat[j];
                            dbeta[c] += g[j];
                            gx[j] = g[j] * gam[c] * inv_std[c];
                        }
                    }
                }
                vec![(*x, gx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::DirectionMax { x, src } => {
                let xs = self.shape(*x);
                let mut gx = vec![0.0; xs.numel()];
                directionmax::route(src, xs.plane(), &g, &mut gx);
                vec![(*x, gx)]
            }
            Op::MaskedSse {
                pred,
                residual,
                scale,
            } => {
                let k = 2.0 * scale * g[0];
                vec![(*pred, residual.iter().map(|r| k * r).collect())]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).numel()])],
        })
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
