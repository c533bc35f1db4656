//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends one node holding its output value. `backward`
//! walks the list once, from the loss node towards the leaves, so each
//! recorded operation is visited at most once and strictly in reverse
//! execution order.

use super::kernels::{self, ConvDims, TConvDims, Window};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const BN_EPS: f64 = 1e-5;

/// Class label for softmax cross-entropy: `0` background, `1` foreground,
/// [`IGNORE`] excluded from the loss.
pub const IGNORE: i8 = -1;

#[derive(Clone, Debug)]
pub enum BnMode<'a> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with stored running mean/variance.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel batch statistics produced by a train-mode batchnorm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, dims: ConvDims },
    TConv2d { x: Var, w: Var, b: Var, dims: TConvDims },
    BatchNorm { x: Var, scale: Var, shift: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Concat { parts: Vec<Var> },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Resize { x: Var },
    Linear { x: Var, w: Var, b: Var },
    Reshape { x: Var },
    Sum { x: Var },
    Scale { x: Var, factor: f64 },
    SoftmaxCe { logits: Var, probs: Vec<f64>, labels: Vec<i8>, weights: Vec<f64>, count: usize },
    SmoothL1 { pred: Var, diff: Vec<f64>, weights: Vec<f64>, norm: f64 },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records operations for a single reverse pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn expect4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    t.dims4().map_err(|_| Error::Shape(format!("{what}: expected 4-D input, got {:?}", t.shape())))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`; zeros when
    /// `v` is unreachable from the loss.
    pub fn grad(&self, v: Var) -> Tensor {
        let shape = self.nodes[v.0].value.shape().to_vec();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    /// `input: B×C×H×W`, `kernel: O×C×k×k`, `bias: O`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (bs, c, h, wd) = expect4(self.value(x), "conv2d")?;
        let (o, kc, kh, kw) = expect4(self.value(w), "conv2d kernel")?;
        if kc != c {
            return Err(Error::Shape(format!(
                "conv2d: input has {c} channels but kernel expects {kc} (kernel shape {:?})",
                self.value(w).shape()
            )));
        }
        if kh == 0 || kw == 0 || !(1..=2).contains(&stride) {
            return Err(Error::InvalidArgument(format!(
                "conv2d: kernel {kh}×{kw} with stride {stride} is unsupported"
            )));
        }
        if self.value(b).numel() != o {
            return Err(Error::Shape(format!("conv2d: bias has {} values for {o} outputs", self.value(b).numel())));
        }
        let (oh, ow) = match (
            kernels::conv_out_extent(h, kh, stride, padding),
            kernels::conv_out_extent(wd, kw, stride, padding),
        ) {
            (Some(a), Some(bb)) => (a, bb),
            _ => {
                return Err(Error::Shape(format!(
                    "conv2d: kernel {kh}×{kw} does not fit input {h}×{wd} with padding {padding}"
                )))
            }
        };
        let win = Window {
            channels: c,
            height: h,
            width: wd,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: oh,
            out_w: ow,
        };
        let dims = ConvDims { batch: bs, out_channels: o, win };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &dims,
        );
        let value = Tensor::from_parts(vec![bs, o, oh, ow], out);
        Ok(self.push(value, Op::Conv2d { x, w, b, dims }, &[x, w, b]))
    }

    /// Fractionally strided 2× up-sampling convolution.
    /// `input: B×Cin×H×W`, `kernel: Cin×Cout×k×k`, `bias: Cout`; output is `B×Cout×2H×2W`.
    pub fn tconv2d(&mut self, x: Var, w: Var, b: Var, padding: usize) -> Result<Var> {
        const UP: usize = 2;
        let (bs, c, h, wd) = expect4(self.value(x), "tconv2d")?;
        let (kc, o, kh, kw) = expect4(self.value(w), "tconv2d kernel")?;
        if kc != c {
            return Err(Error::Shape(format!(
                "tconv2d: input has {c} channels but kernel expects {kc}"
            )));
        }
        if self.value(b).numel() != o {
            return Err(Error::Shape(format!("tconv2d: bias has {} values for {o} outputs", self.value(b).numel())));
        }
        let out_extent = |n: usize, k: usize| ((n - 1) * UP + k).checked_sub(2 * padding);
        let (oh, ow) = (out_extent(h, kh), out_extent(wd, kw));
        if oh != Some(UP * h) || ow != Some(UP * wd) {
            return Err(Error::Shape(format!(
                "tconv2d: kernel {kh}×{kw} with padding {padding} maps {h}×{wd} to {:?}×{:?}, not an exact 2× doubling",
                oh, ow
            )));
        }
        let win = Window {
            channels: o,
            height: UP * h,
            width: UP * wd,
            kernel_h: kh,
            kernel_w: kw,
            stride: UP,
            padding,
            out_h: h,
            out_w: wd,
        };
        let dims = TConvDims { batch: bs, in_channels: c, win };
        let out = kernels::tconv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &dims,
        );
        let value = Tensor::from_parts(vec![bs, o, UP * h, UP * wd], out);
        Ok(self.push(value, Op::TConv2d { x, w, b, dims }, &[x, w, b]))
    }

    /// Per-channel normalization followed by an affine `scale·x̂ + shift`.
    /// In train mode the returned statistics are the batch moments used.
    pub fn batchnorm(&mut self, x: Var, scale: Var, shift: Var, mode: BnMode<'_>) -> Result<(Var, Option<BatchStats>)> {
        let (bs, c, h, w) = expect4(self.value(x), "batchnorm")?;
        if self.value(scale).numel() != c || self.value(shift).numel() != c {
            return Err(Error::Shape(format!(
                "batchnorm: {c} channels but scale/shift have {}/{} entries",
                self.value(scale).numel(),
                self.value(shift).numel()
            )));
        }
        let hw = h * w;
        let (mean, var, stats, train) = match mode {
            BnMode::Train => {
                let (m, v) = kernels::channel_moments(self.value(x).data(), bs, c, hw);
                let stats = BatchStats { mean: m.clone(), var: v.clone() };
                (m, v, Some(stats), true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Shape("batchnorm: running statistics length mismatch".into()));
                }
                (mean.to_vec(), var.to_vec(), None, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let xs = self.value(x).data();
        let gamma = self.value(scale).data();
        let beta = self.value(shift).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for bi in 0..bs {
            for ch in 0..c {
                let r = (bi * c + ch) * hw..(bi * c + ch + 1) * hw;
                for i in r {
                    let n = (xs[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = n;
                    out[i] = gamma[ch] * n + beta[ch];
                }
            }
        }
        let value = Tensor::from_parts(vec![bs, c, h, w], out);
        let v = self.push(value, Op::BatchNorm { x, scale, shift, xhat, inv_std, train }, &[x, scale, shift]);
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "add: operand shapes differ: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// Concatenate 4-D tensors along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let (bs, _, h, w) = expect4(self.value(first), "concat")?;
        let mut total_c = 0;
        for &p in parts {
            let (pb, pc, ph, pw) = expect4(self.value(p), "concat")?;
            if (pb, ph, pw) != (bs, h, w) {
                return Err(Error::Shape(format!(
                    "concat: operand {:?} does not match {:?} outside the channel axis",
                    self.value(p).shape(),
                    self.value(first).shape()
                )));
            }
            total_c += pc;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(bs * total_c * hw);
        for bi in 0..bs {
            for &p in parts {
                let t = self.value(p);
                let pc = t.shape()[1];
                data.extend_from_slice(&t.data()[bi * pc * hw..(bi + 1) * pc * hw]);
            }
        }
        let value = Tensor::from_parts(vec![bs, total_c, h, w], data);
        Ok(self.push(value, Op::Concat { parts: parts.to_vec() }, parts))
    }

    /// 2×2 max pooling with stride 2; extents must be even.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (bs, c, h, w) = expect4(self.value(x), "max_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("max_pool2: extents {h}×{w} are not even")));
        }
        let (out, argmax) = kernels::max_pool2(self.value(x).data(), bs, c, h, w);
        let value = Tensor::from_parts(vec![bs, c, h / 2, w / 2], out);
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, &[x]))
    }

    /// Half-pixel bilinear resampling to `out_h × out_w`.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (bs, c, h, w) = expect4(self.value(x), "resize_bilinear")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::Shape("resize_bilinear: empty output".into()));
        }
        let out = kernels::resize_bilinear(self.value(x).data(), bs * c, h, w, out_h, out_w);
        let value = Tensor::from_parts(vec![bs, c, out_h, out_w], out);
        Ok(self.push(value, Op::Resize { x }, &[x]))
    }

    /// `x: B×F`, `w: O×F`, `b: O` → `B×O`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.value(b).numel() != ws[0] {
            return Err(Error::Shape(format!(
                "linear: input {:?}, weight {:?}, bias {:?} do not conform",
                xs,
                ws,
                self.value(b).shape()
            )));
        }
        let (bs, f, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; bs * o];
        for row in out.chunks_mut(o) {
            row.copy_from_slice(self.value(b).data());
        }
        kernels::gemm(bs, f, o, 1.0, self.value(x).data(), false, self.value(w).data(), true, 1.0, &mut out);
        let value = Tensor::from_parts(vec![bs, o], out);
        Ok(self.push(value, Op::Linear { x, w, b }, &[x, w, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum { x }, &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    /// Two-way softmax cross-entropy over channel pairs.
    ///
    /// `logits` is `B×2G×H×W`; channels `2g` and `2g+1` hold the background
    /// and foreground logits of group `g`. `labels` and `weights` are indexed
    /// `(b, g, y, x)`. The loss is `Σ w·nll / n` over the `n` non-ignored
    /// entries, and exactly zero (with zero gradient) when `n = 0`.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[i8], weights: &[f64]) -> Result<Var> {
        let (bs, c2, h, w) = expect4(self.value(logits), "softmax_ce")?;
        if c2 % 2 != 0 {
            return Err(Error::Shape(format!("softmax_ce: channel count {c2} is odd")));
        }
        let groups = c2 / 2;
        let n = bs * groups * h * w;
        if labels.len() != n || weights.len() != n {
            return Err(Error::Shape(format!(
                "softmax_ce: {} labels / {} weights for {n} predictions",
                labels.len(),
                weights.len()
            )));
        }
        let hw = h * w;
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n];
        let mut total = 0.0;
        let mut count = 0;
        for bi in 0..bs {
            for g in 0..groups {
                for p in 0..hw {
                    let i = (bi * groups + g) * hw + p;
                    let z0 = z[(bi * c2 + 2 * g) * hw + p];
                    let z1 = z[(bi * c2 + 2 * g + 1) * hw + p];
                    let m = z0.max(z1);
                    let lse = m + ((z0 - m).exp() + (z1 - m).exp()).ln();
                    probs[i] = (z1 - lse).exp();
                    match labels[i] {
                        0 => total += weights[i] * (lse - z0),
                        1 => total += weights[i] * (lse - z1),
                        _ => continue,
                    }
                    count += 1;
                }
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let op = Op::SoftmaxCe {
            logits,
            probs,
            labels: labels.to_vec(),
            weights: weights.to_vec(),
            count,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// `Σ wᵢ·smoothL1(predᵢ − targetᵢ) / norm` with transition at 1.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor, weights: &[f64], norm: f64) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() || weights.len() != p.numel() {
            return Err(Error::Shape(format!(
                "smooth_l1: prediction {:?}, target {:?}, {} weights",
                p.shape(),
                target.shape(),
                weights.len()
            )));
        }
        if norm <= 0.0 {
            return Err(Error::InvalidArgument("smooth_l1: normalizer must be positive".into()));
        }
        let diff: Vec<f64> = p.data().iter().zip(target.data()).map(|(a, b)| a - b).collect();
        let total: f64 = diff
            .iter()
            .zip(weights)
            .map(|(&d, &w)| if w == 0.0 { 0.0 } else { w * smooth_l1(d) })
            .sum();
        let op = Op::SmoothL1 { pred, diff, weights: weights.to_vec(), norm };
        Ok(self.push(Tensor::scalar(total / norm), op, &[pred]))
    }

    /// Populate gradients of every node reachable from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_seeded(loss, &Tensor::scalar(1.0))
    }

    /// Vector-Jacobian product: propagate `seed` (shaped like `out`) back
    /// through the tape.
    pub fn backward_seeded(&mut self, out: Var, seed: &Tensor) -> Result<()> {
        if seed.numel() != self.nodes[out.0].value.numel() {
            return Err(Error::Shape(format!(
                "backward: seed {:?} does not match output {:?}",
                seed.shape(),
                self.nodes[out.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[out.0].requires_grad {
            grads[out.0] = Some(seed.data().to_vec());
        }
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Gradient slot of input `v`, allocated on first use; `None` when `v` needs no gradient.
        let slot = |v: Var, grads: &mut [Option<Vec<f64>>]| -> bool {
            if !nodes[v.0].requires_grad {
                return false;
            }
            if grads[v.0].is_none() {
                grads[v.0] = Some(vec![0.0; nodes[v.0].value.numel()]);
            }
            true
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, dims } => {
                let (want_x, want_w, want_b) = (slot(*x, grads), slot(*w, grads), slot(*b, grads));
                let mut gx = want_x.then(|| grads[x.0].take().unwrap());
                let mut gw = want_w.then(|| grads[w.0].take().unwrap());
                let mut gb = want_b.then(|| grads[b.0].take().unwrap());
                kernels::conv2d_backward(
                    nodes[x.0].value.data(),
                    nodes[w.0].value.data(),
                    g,
                    dims,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                grads[x.0] = gx.or(grads[x.0].take());
                grads[w.0] = gw.or(grads[w.0].take());
                grads[b.0] = gb.or(grads[b.0].take());
            }
            Op::TConv2d { x, w, b, dims } => {
                let (want_x, want_w, want_b) = (slot(*x, grads), slot(*w, grads), slot(*b, grads));
                let mut gx = want_x.then(|| grads[x.0].take().unwrap());
                let mut gw = want_w.then(|| grads[w.0].take().unwrap());
                let mut gb = want_b.then(|| grads[b.0].take().unwrap());
                kernels::tconv2d_backward(
                    nodes[x.0].value.data(),
                    nodes[w.0].value.data(),
                    g,
                    dims,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                grads[x.0] = gx.or(grads[x.0].take());
                grads[w.0] = gw.or(grads[w.0].take());
                grads[b.0] = gb.or(grads[b.0].take());
            }
            Op::BatchNorm { x, scale, shift, xhat, inv_std, train } => {
                let (bs, c, h, w) = nodes[x.0].value.dims4().unwrap();
                let hw = h * w;
                let n = (bs * hw) as f64;
                let gamma = nodes[scale.0].value.data();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for bi in 0..bs {
                    for ch in 0..c {
                        for j in (bi * c + ch) * hw..(bi * c + ch + 1) * hw {
                            sum_dy[ch] += g[j];
                            sum_dy_xhat[ch] += g[j] * xhat[j];
                        }
                    }
                }
                if slot(*scale, grads) {
                    add_into(grads[scale.0].as_mut().unwrap(), &sum_dy_xhat);
                }
                if slot(*shift, grads) {
                    add_into(grads[shift.0].as_mut().unwrap(), &sum_dy);
                }
                if slot(*x, grads) {
                    let gx = grads[x.0].as_mut().unwrap();
                    for bi in 0..bs {
                        for ch in 0..c {
                            let k = gamma[ch] * inv_std[ch];
                            for j in (bi * c + ch) * hw..(bi * c + ch + 1) * hw {
                                gx[j] += if *train {
                                    k * (g[j] - sum_dy[ch] / n - xhat[j] * sum_dy_xhat[ch] / n)
                                } else {
                                    k * g[j]
                                };
                            }
                        }
                    }
                }
            }
            Op::Relu { x } => {
                if slot(*x, grads) {
                    let xv = nodes[x.0].value.data();
                    let gx = grads[x.0].as_mut().unwrap();
                    for ((d, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if slot(v, grads) {
                        add_into(grads[v.0].as_mut().unwrap(), g);
                    }
                }
            }
            Op::Concat { parts } => {
                let (bs, total_c, h, w) = nodes[i].value.dims4().unwrap();
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = nodes[p.0].value.shape()[1];
                    if slot(p, grads) {
                        let gp = grads[p.0].as_mut().unwrap();
                        for bi in 0..bs {
                            let src = &g[(bi * total_c + offset) * hw..(bi * total_c + offset + pc) * hw];
                            add_into(&mut gp[bi * pc * hw..(bi + 1) * pc * hw], src);
                        }
                    }
                    offset += pc;
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if slot(*x, grads) {
                    let gx = grads[x.0].as_mut().unwrap();
                    for (&src, &gi) in argmax.iter().zip(g) {
                        gx[src] += gi;
                    }
                }
            }
            Op::Resize { x } => {
                if slot(*x, grads) {
                    let (bs, c, h, w) = nodes[x.0].value.dims4().unwrap();
                    let (_, _, oh, ow) = nodes[i].value.dims4().unwrap();
                    kernels::resize_bilinear_backward(g, bs * c, h, w, oh, ow, grads[x.0].as_mut().unwrap());
                }
            }
            Op::Linear { x, w, b } => {
                let (bs, f) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                let o = nodes[w.0].value.shape()[0];
                if slot(*b, grads) {
                    let gb = grads[b.0].as_mut().unwrap();
                    for row in g.chunks(o) {
                        add_into(gb, row);
                    }
                }
                if slot(*w, grads) {
                    let gw = grads[w.0].as_mut().unwrap();
                    kernels::gemm(o, bs, f, 1.0, g, true, nodes[x.0].value.data(), false, 1.0, gw);
                }
                if slot(*x, grads) {
                    let gx = grads[x.0].as_mut().unwrap();
                    kernels::gemm(bs, o, f, 1.0, g, false, nodes[w.0].value.data(), false, 1.0, gx);
                }
            }
            Op::Reshape { x } => {
                if slot(*x, grads) {
                    add_into(grads[x.0].as_mut().unwrap(), g);
                }
            }
            Op::Sum { x } => {
                if slot(*x, grads) {
                    grads[x.0].as_mut().unwrap().iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Scale { x, factor } => {
                if slot(*x, grads) {
                    let gx = grads[x.0].as_mut().unwrap();
                    gx.iter_mut().zip(g).for_each(|(d, gi)| *d += factor * gi);
                }
            }
            Op::SoftmaxCe { logits, probs, labels, weights, count } => {
                if *count == 0 || !slot(*logits, grads) {
                    return;
                }
                let (bs, c2, h, w) = nodes[logits.0].value.dims4().unwrap();
                let (groups, hw) = (c2 / 2, h * w);
                let scale = g[0] / *count as f64;
                let gl = grads[logits.0].as_mut().unwrap();
                for bi in 0..bs {
                    for gr in 0..groups {
                        for p in 0..hw {
                            let k = (bi * groups + gr) * hw + p;
                            let target = match labels[k] {
                                0 => 0.0,
                                1 => 1.0,
                                _ => continue,
                            };
                            let d1 = scale * weights[k] * (probs[k] - target);
                            gl[(bi * c2 + 2 * gr + 1) * hw + p] += d1;
                            gl[(bi * c2 + 2 * gr) * hw + p] -= d1;
                        }
                    }
                }
            }
            Op::SmoothL1 { pred, diff, weights, norm } => {
                if slot(*pred, grads) {
                    let gp = grads[pred.0].as_mut().unwrap();
                    for ((d, &df), &w) in gp.iter_mut().zip(diff).zip(weights) {
                        if w != 0.0 {
                            *d += g[0] * w * smooth_l1_grad(df) / norm;
                        }
                    }
                }
            }
        }
    }
}

pub fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}
