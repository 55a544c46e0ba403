//! Reverse-mode differentiation over an append-only tape.
//!
//! Values live on the [`Tape`]; operations take and return [`Var`] handles.
//! A node only ever references handles smaller than its own, so the node
//! list is already in topological order and [`Tape::backward`] is a single
//! reverse sweep.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    MeanStack(Vec<Var>),
    MaxStack {
        inputs: Vec<Var>,
        winners: Vec<u32>,
    },
    Relu(Var),
    Mask {
        input: Var,
        mask: Tensor,
        scale: f64,
    },
    Conv2d {
        input: Var,
        kernels: Var,
        geom: ConvGeom,
    },
    AddBias(Var, Var),
    Sum(Var),
    WeightedSum {
        input: Var,
        weights: Tensor,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> &Tensor {
        &self.grads[v.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Inputs and parameters both enter the tape as leaves.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose2()?;
        Ok(self.push(Op::Transpose(a), out))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape(a), out))
    }

    fn check_stack(&self, xs: &[Var], op: &'static str) -> Result<()> {
        let first = xs
            .first()
            .ok_or_else(|| Error::arg(format!("{op} needs at least one input")))?;
        let shape = self.value(*first).shape();
        for &x in &xs[1..] {
            if self.value(x).shape() != shape {
                return Err(Error::dim(op, shape, self.value(x).shape()));
            }
        }
        Ok(())
    }

    /// Smallest distance of any relu input from 0 or any max_stack runner-up
    /// from its winner; `INFINITY` when the tape has neither. Finite
    /// differences with steps below this never cross a kink.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.value(*x).data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::MaxStack { inputs, .. } if inputs.len() > 1 => {
                    for (i, &best) in node.value.data().iter().enumerate() {
                        let runner_up = inputs
                            .iter()
                            .map(|&x| self.value(x).data()[i])
                            .filter(|&v| v < best)
                            .fold(f64::NEG_INFINITY, f64::max);
                        let ties = inputs
                            .iter()
                            .filter(|&&x| self.value(x).data()[i] == best)
                            .count();
                        margin = margin.min(if ties > 1 { 0.0 } else { best - runner_up });
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Elementwise mean of `m` equally shaped tensors.
    pub fn mean_stack(&mut self, xs: &[Var]) -> Result<Var> {
        self.check_stack(xs, "mean_stack")?;
        let mut out = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            out.add_assign(self.value(x))?;
        }
        let out = out.scale(1.0 / xs.len() as f64);
        Ok(self.push(Op::MeanStack(xs.to_vec()), out))
    }

    /// Elementwise max of `m` equally shaped tensors. Ties go to the lowest
    /// replica index, and only the winner receives gradient.
    pub fn max_stack(&mut self, xs: &[Var]) -> Result<Var> {
        self.check_stack(xs, "max_stack")?;
        let mut out = self.value(xs[0]).clone();
        let mut winners = vec![0u32; out.len()];
        for (r, &x) in xs.iter().enumerate().skip(1) {
            for ((o, w), &v) in out
                .data_mut()
                .iter_mut()
                .zip(&mut winners)
                .zip(self.value(x).data())
            {
                if v > *o {
                    *o = v;
                    *w = r as u32;
                }
            }
        }
        Ok(self.push(
            Op::MaxStack {
                inputs: xs.to_vec(),
                winners,
            },
            out,
        ))
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu(x), out)
    }

    /// `x * mask * scale` with a constant 0/1 mask.
    pub fn apply_mask(&mut self, x: Var, mask: Tensor, scale: f64) -> Result<Var> {
        self.value(x).check_same_shape(&mask, "apply_mask")?;
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::arg("mask entries must be 0 or 1"));
        }
        let out = self
            .value(x)
            .zip_with(&mask, "apply_mask", |a, m| a * m * scale)?;
        Ok(self.push(
            Op::Mask {
                input: x,
                mask,
                scale,
            },
            out,
        ))
    }

    /// Direct cross-correlation. `input` is `c_in×h×w` or `batch×c_in×h×w`,
    /// `kernels` is `c_out×c_in×kh×kw`; the output keeps the input's rank.
    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize, pad: usize) -> Result<Var> {
        let ishape = self.value(input).shape().to_vec();
        let kshape = self.value(kernels).shape().to_vec();
        let (batch, c_in, h, w) = match ishape.as_slice() {
            [c, h, w] => (1, *c, *h, *w),
            [b, c, h, w] => (*b, *c, *h, *w),
            _ => return Err(Error::dim("conv2d", &ishape, &kshape)),
        };
        let &[c_out, kc, kh, kw] = kshape.as_slice() else {
            return Err(Error::dim("conv2d", &ishape, &kshape));
        };
        if kc != c_in || stride == 0 {
            return Err(Error::dim("conv2d", &ishape, &kshape));
        }
        let span_h = h + 2 * pad;
        let span_w = w + 2 * pad;
        if span_h < kh || span_w < kw || (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0
        {
            return Err(Error::dim("conv2d", &ishape, &kshape));
        }
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            oh: (span_h - kh) / stride + 1,
            ow: (span_w - kw) / stride + 1,
        };
        let mut out = vec![0.0; batch * c_out * geom.oh * geom.ow];
        let x = self.value(input).data();
        let k = self.value(kernels).data();
        conv_visit(&geom, |o_idx, i_idx, k_idx| {
            out[o_idx] += x[i_idx] * k[k_idx]
        });
        let shape: Vec<usize> = if ishape.len() == 3 {
            vec![c_out, geom.oh, geom.ow]
        } else {
            vec![batch, c_out, geom.oh, geom.ow]
        };
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(
            Op::Conv2d {
                input,
                kernels,
                geom,
            },
            out,
        ))
    }

    /// Adds `bias[c]` to every element whose index along axis 1 is `c`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        let bs = self.value(bias).shape();
        if xs.len() < 2 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(Error::dim("add_bias", xs, bs));
        }
        let inner: usize = xs[2..].iter().product();
        let channels = xs[1];
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b[(i / inner) % channels];
        }
        Ok(self.push(Op::AddBias(x, bias), out))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    /// `Σ x ⊙ weights` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let s = self
            .value(x)
            .zip_with(&weights, "weighted_sum", |a, b| a * b)?
            .sum();
        Ok(self.push(Op::WeightedSum { input: x, weights }, Tensor::scalar(s)))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        let &[batch, classes] = z.shape() else {
            return Err(Error::dim(
                "softmax_cross_entropy",
                z.shape(),
                &[labels.len()],
            ));
        };
        if labels.len() != batch {
            return Err(Error::dim(
                "softmax_cross_entropy",
                z.shape(),
                &[labels.len()],
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::arg(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut probs = z.clone();
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &mut probs.data_mut()[i * classes..(i + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = math::exp(*v - max);
                total += *v;
            }
            let logit = z.data()[i * classes + label];
            loss += max + math::ln(total) - logit;
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let loss = Tensor::scalar(loss / batch as f64);
        Ok(self.push(
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            loss,
        ))
    }

    /// Accumulates d(loss)/d(node) for every node in one reverse sweep.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Tensor> = self.nodes[..=loss.0]
            .iter()
            .map(|n| Tensor::zeros(n.value.shape()))
            .collect();
        grads[loss.0].data_mut()[0] = 1.0;
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = core::mem::replace(&mut grads[id], Tensor::scalar(0.0));
            self.backprop_node(node, &g, &mut grads)?;
            grads[id] = g;
        }
        grads.extend(
            self.nodes[loss.0 + 1..]
                .iter()
                .map(|n| Tensor::zeros(n.value.shape())),
        );
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Tensor]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                grads[a.0].add_assign(&g.matmul(&bv.transpose2()?)?)?;
                grads[b.0].add_assign(&av.transpose2()?.matmul(g)?)?;
            }
            Op::Transpose(a) => grads[a.0].add_assign(&g.transpose2()?)?,
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                grads[a.0].add_assign(&g.reshape(&shape)?)?;
            }
            Op::MeanStack(xs) => {
                let share = g.scale(1.0 / xs.len() as f64);
                for x in xs {
                    grads[x.0].add_assign(&share)?;
                }
            }
            Op::MaxStack { inputs, winners } => {
                for (i, (&w, &gv)) in winners.iter().zip(g.data()).enumerate() {
                    grads[inputs[w as usize].0].data_mut()[i] += gv;
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                for ((d, &gv), &v) in grads[x.0].data_mut().iter_mut().zip(g.data()).zip(xv) {
                    if v > 0.0 {
                        *d += gv;
                    }
                }
            }
            Op::Mask { input, mask, scale } => {
                for ((d, &gv), &m) in grads[input.0]
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(mask.data())
                {
                    *d += gv * m * scale;
                }
            }
            Op::Conv2d {
                input,
                kernels,
                geom,
            } => {
                let x = self.value(*input).data();
                let k = self.value(*kernels).data();
                let gd = g.data();
                let mut dx = vec![0.0; x.len()];
                let mut dk = vec![0.0; k.len()];
                conv_visit(geom, |o_idx, i_idx, k_idx| {
                    dx[i_idx] += gd[o_idx] * k[k_idx];
                    dk[k_idx] += gd[o_idx] * x[i_idx];
                });
                add_slice(grads[input.0].data_mut(), &dx);
                add_slice(grads[kernels.0].data_mut(), &dk);
            }
            Op::AddBias(x, b) => {
                grads[x.0].add_assign(g)?;
                let shape = self.value(*x).shape();
                let inner: usize = shape[2..].iter().product();
                let channels = shape[1];
                let db = grads[b.0].data_mut();
                for (i, &gv) in g.data().iter().enumerate() {
                    db[(i / inner) % channels] += gv;
                }
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                for d in grads[x.0].data_mut() {
                    *d += s;
                }
            }
            Op::WeightedSum { input, weights } => {
                let s = g.data()[0];
                for (d, &w) in grads[input.0].data_mut().iter_mut().zip(weights.data()) {
                    *d += s * w;
                }
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let s = g.data()[0];
                let classes = probs.shape()[1];
                let batch = labels.len() as f64;
                let d = grads[logits.0].data_mut();
                for (i, &label) in labels.iter().enumerate() {
                    for c in 0..classes {
                        let onehot = if c == label { 1.0 } else { 0.0 };
                        d[i * classes + c] += s * (probs.data()[i * classes + c] - onehot) / batch;
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_slice(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Calls `f(out_index, in_index, kernel_index)` for every multiply-add of
/// the convolution, skipping padded positions.
fn conv_visit(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    for b in 0..g.batch {
        for o in 0..g.c_out {
            for i in 0..g.oh {
                for j in 0..g.ow {
                    let o_idx = ((b * g.c_out + o) * g.oh + i) * g.ow + j;
                    for c in 0..g.c_in {
                        for p in 0..g.kh {
                            let ii = (i * g.stride + p) as isize - g.pad as isize;
                            if ii < 0 || ii >= g.h as isize {
                                continue;
                            }
                            for q in 0..g.kw {
                                let jj = (j * g.stride + q) as isize - g.pad as isize;
                                if jj < 0 || jj >= g.w as isize {
                                    continue;
                                }
                                let i_idx =
                                    ((b * g.c_in + c) * g.h + ii as usize) * g.w + jj as usize;
                                let k_idx = ((o * g.c_in + c) * g.kh + p) * g.kw + q;
                                f(o_idx, i_idx, k_idx);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Compares an analytic gradient against central differences
/// `(f(θ+h·eᵢ) − f(θ−h·eᵢ)) / 2h` and returns the largest relative error
/// `|a − n| / max(|a|, |n|, 1e-12)` over coordinates.
pub fn finite_diff_check<F>(mut f: F, theta: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::arg("finite-difference step must be positive"));
    }
    if theta.len() != analytic.len() {
        return Err(Error::dim(
            "finite_diff_check",
            &[theta.len()],
            &[analytic.len()],
        ));
    }
    let mut probe = theta.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let up = f(&probe);
        probe[i] = theta[i] - h;
        let down = f(&probe);
        probe[i] = theta[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "objective not finite at coordinate {i}"
            )));
        }
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
