//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. Nodes are only ever appended, so walking the
//! tape from the loss towards index zero visits them in reverse topological
//! order. A [`Var`] is a handle into the tape that created it.
//!
//! Gradients accumulate across repeated [`Tape::backward`] calls until
//! [`Tape::zero_grad`] is called.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output extent `ceil(n / stride)`, zero padding split as evenly as
    /// possible with the extra row/column at the bottom/right.
    Same,
    /// No padding.
    Valid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad_top: usize,
        pad_left: usize,
    },
    Relu(Var),
    MinChannel {
        input: Var,
        argmin: Vec<u32>,
    },
    Hadamard {
        a: Var,
        b: Var,
    },
    AddChannelwise {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: Var,
    },
    ChannelNorm {
        input: Var,
        sigma: Vec<f64>,
        eps: f64,
    },
    GlobalAvgPool(Var),
    FullyConnected {
        x: Var,
        weight: Var,
        bias: Var,
    },
    Softmax(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Sum(Var),
    MeanSquaredError {
        a: Var,
        b: Var,
    },
    TaskLoss {
        estimate: Var,
        target: Var,
        confidence: Var,
    },
    NegLog(Var),
    AddScaled {
        a: Var,
        b: Var,
        weight: f64,
    },
    CosineLoss {
        a: Var,
        b: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shapes_broadcast_channel(a: &[usize], b: &[usize]) -> bool {
    !a.is_empty()
        && a.len() == b.len()
        && a[..a.len() - 1] == b[..b.len() - 1]
        && (a[a.len() - 1] == 1 || b[b.len() - 1] == 1)
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

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    // ---------------------------------------------------------------------
    // Forward operations
    // ---------------------------------------------------------------------

    /// Cross-correlation of an `H x W x C` map with `kh x kw x C x K` kernels.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        let (h, w, c) = self.value(input).dims3()?;
        let kshape = self.value(kernel).shape().to_vec();
        let [kh, kw, kc, k] = *kshape.as_slice() else {
            return Err(Error::contract(OP, "kernel must be rank 4 (kh, kw, C, K)"));
        };
        if kc != c {
            return Err(Error::shape(OP, &[kh, kw, c, k], &kshape));
        }
        if self.value(bias).shape() != [k] {
            return Err(Error::shape(OP, &[k], self.value(bias).shape()));
        }
        if stride == 0 {
            return Err(Error::contract(OP, "stride must be positive"));
        }
        let (oh, ow, pad_top, pad_left) = match padding {
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let pad_h = ((oh - 1) * stride + kh).saturating_sub(h);
                let pad_w = ((ow - 1) * stride + kw).saturating_sub(w);
                (oh, ow, pad_h / 2, pad_w / 2)
            }
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::contract(
                        OP,
                        alloc::format!("kernel {kh}x{kw} larger than input {h}x{w}"),
                    ));
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
        };
        let x = self.value(input).data();
        let kd = self.value(kernel).data();
        let bd = self.value(bias).data();
        let mut out = vec![0.0; oh * ow * k];
        for oy in 0..oh {
            for ox in 0..ow {
                let o = &mut out[(oy * ow + ox) * k..][..k];
                o.copy_from_slice(bd);
                for dy in 0..kh {
                    let Some(iy) = (oy * stride + dy).checked_sub(pad_top) else {
                        continue;
                    };
                    if iy >= h {
                        continue;
                    }
                    for dx in 0..kw {
                        let Some(ix) = (ox * stride + dx).checked_sub(pad_left) else {
                            continue;
                        };
                        if ix >= w {
                            continue;
                        }
                        let px = &x[(iy * w + ix) * c..][..c];
                        let kbase = (dy * kw + dx) * c * k;
                        for (ci, &v) in px.iter().enumerate() {
                            let krow = &kd[kbase + ci * k..][..k];
                            for (acc, &kv) in o.iter_mut().zip(krow) {
                                *acc += v * kv;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[oh, ow, k], out)?;
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad_top,
                pad_left,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Relu(x))
    }

    /// Per-pixel minimum over the channel axis. Ties go to the lowest index.
    pub fn min_channel(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = self.value(x).dims3()?;
        if c == 0 {
            return Err(Error::contract("min_channel", "need at least one channel"));
        }
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(h * w);
        let mut argmin = Vec::with_capacity(h * w);
        for px in data.chunks_exact(c) {
            let mut best = 0;
            for (i, &v) in px.iter().enumerate().skip(1) {
                if v < px[best] {
                    best = i;
                }
            }
            out.push(px[best]);
            argmin.push(best as u32);
        }
        let value = Tensor::new(&[h, w, 1], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::MinChannel { input: x, argmin }))
    }

    /// Elementwise product. Either side may be a 1-channel map that is
    /// broadcast across the other's trailing channel axis.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let value = if sa == sb {
            let d = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x * y)
                .collect();
            Tensor::new(sa, d)?
        } else if shapes_broadcast_channel(sa, sb) {
            let (big, small) = if sa[sa.len() - 1] == 1 { (b, a) } else { (a, b) };
            let bv = self.value(big);
            let c = bv.shape()[bv.rank() - 1];
            let sv = self.value(small).data();
            let d = bv
                .data()
                .chunks_exact(c)
                .zip(sv)
                .flat_map(|(px, &s)| px.iter().map(move |v| v * s))
                .collect();
            Tensor::new(bv.shape(), d)?
        } else {
            return Err(Error::shape("hadamard", sa, sb));
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::Hadamard { a, b }))
    }

    /// Adds a length-K vector to every pixel of an `H x W x K` map.
    pub fn add_channelwise(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, _, k) = self.value(x).dims3()?;
        if self.value(bias).shape() != [k] {
            return Err(Error::shape("add_channelwise", &[k], self.value(bias).shape()));
        }
        let b = self.value(bias).data();
        let xv = self.value(x);
        let d = xv
            .data()
            .chunks_exact(k)
            .flat_map(|px| px.iter().zip(b).map(|(p, t)| p + t))
            .collect();
        let value = Tensor::new(xv.shape(), d)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, rg, Op::AddChannelwise { x, bias }))
    }

    /// Multiplies every element of `x` by the single-element tensor `factor`.
    pub fn scale(&mut self, x: Var, factor: Var) -> Result<Var> {
        if self.value(factor).len() != 1 {
            return Err(Error::shape("scale", &[1], self.value(factor).shape()));
        }
        let f = self.value(factor).item();
        let value = self.value(x).map(|v| v * f);
        let rg = self.rg(&[x, factor]);
        Ok(self.push(value, rg, Op::Scale { x, factor }))
    }

    /// Per-pixel standardization over the channel axis:
    /// `(p - mean) / (std + eps)` with the population standard deviation.
    pub fn channel_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (h, w, k) = self.value(x).dims3()?;
        if k < 2 {
            return Err(Error::contract(
                "channel_normalize",
                "needs at least 2 channels; the per-pixel deviation is degenerate for one",
            ));
        }
        let mut out = Vec::with_capacity(h * w * k);
        let mut sigma = Vec::with_capacity(h * w);
        for px in self.value(x).data().chunks_exact(k) {
            let mean = px.iter().sum::<f64>() / k as f64;
            let var = px.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / k as f64;
            let s = libm::sqrt(var);
            let inv = 1.0 / (s + eps);
            out.extend(px.iter().map(|p| (p - mean) * inv));
            sigma.push(s);
        }
        let value = Tensor::new(&[h, w, k], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            rg,
            Op::ChannelNorm {
                input: x,
                sigma,
                eps,
            },
        ))
    }

    /// Spatial mean per channel: `H x W x C` to a length-C vector.
    pub fn global_average_pool(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = self.value(x).dims3()?;
        if h == 0 || w == 0 {
            return Err(Error::contract("global_average_pool", "empty spatial extent"));
        }
        let mut out = vec![0.0; c];
        for px in self.value(x).data().chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(px) {
                *o += v;
            }
        }
        let n = (h * w) as f64;
        out.iter_mut().for_each(|o| *o /= n);
        let value = Tensor::new(&[c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::GlobalAvgPool(x)))
    }

    /// `y = x W + b` for `x: [N]`, `W: [N, M]`, `b: [M]`.
    pub fn fully_connected(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        const OP: &str = "fully_connected";
        let n = self.value(x).len();
        let ws = self.value(weight).shape();
        let [wn, m] = *ws else {
            return Err(Error::contract(OP, "weight must be rank 2 (N, M)"));
        };
        if wn != n {
            return Err(Error::shape(OP, &[n, m], ws));
        }
        if self.value(bias).shape() != [m] {
            return Err(Error::shape(OP, &[m], self.value(bias).shape()));
        }
        let mut out = self.value(bias).data().to_vec();
        let wd = self.value(weight).data();
        for (xi, row) in self.value(x).data().iter().zip(wd.chunks_exact(m)) {
            for (o, wv) in out.iter_mut().zip(row) {
                *o += xi * wv;
            }
        }
        let value = Tensor::new(&[m], out)?;
        let rg = self.rg(&[x, weight, bias]);
        Ok(self.push(value, rg, Op::FullyConnected { x, weight, bias }))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let max = xv.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut e: Vec<f64> = xv.data().iter().map(|v| libm::exp(v - max)).collect();
        let s: f64 = e.iter().sum();
        e.iter_mut().for_each(|v| *v /= s);
        let value = Tensor::new(xv.shape(), e).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Softmax(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Sigmoid(x))
    }

    /// Concatenates tensors into one flat vector.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut d = Vec::new();
        for p in parts {
            d.extend_from_slice(self.value(*p).data());
        }
        let value = Tensor::vector(&d);
        let rg = self.rg(parts);
        self.push(value, rg, Op::Concat(parts.to_vec()))
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// scales survivors by `1 / (1 - rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::contract("dropout", "rate must lie in [0, 1)"));
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let xv = self.value(x);
        let d = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(xv.shape(), d)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Dropout { x, mask }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Sum(x))
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("mse", va.shape(), vb.shape()));
        }
        let s: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let value = Tensor::scalar(s / va.len() as f64);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::MeanSquaredError { a, b }))
    }

    /// `c^2 * ||target - estimate||^2`, the squared distance between the
    /// target and the estimate interpolated towards it by `1 - c`.
    pub fn task_loss(&mut self, estimate: Var, target: Var, confidence: Var) -> Result<Var> {
        let (ve, vt) = (self.value(estimate), self.value(target));
        if ve.shape() != vt.shape() {
            return Err(Error::shape("task_loss", vt.shape(), ve.shape()));
        }
        if self.value(confidence).len() != 1 {
            return Err(Error::shape("task_loss", &[1], self.value(confidence).shape()));
        }
        let c = self.value(confidence).item();
        let d2: f64 = vt
            .data()
            .iter()
            .zip(ve.data())
            .map(|(t, e)| {
                let adjusted = c * e + (1.0 - c) * t;
                (t - adjusted) * (t - adjusted)
            })
            .sum();
        let value = Tensor::scalar(d2);
        let rg = self.rg(&[estimate, target, confidence]);
        Ok(self.push(
            value,
            rg,
            Op::TaskLoss {
                estimate,
                target,
                confidence,
            },
        ))
    }

    /// `-ln(x)` of a positive single-element tensor.
    pub fn neg_log(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.len() != 1 {
            return Err(Error::shape("neg_log", &[1], v.shape()));
        }
        if v.item().is_nan() || v.item() <= 0.0 {
            return Err(Error::contract("neg_log", "argument must be positive"));
        }
        let value = Tensor::scalar(-libm::log(v.item()));
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::NegLog(x)))
    }

    /// `a + weight * b` for same-shaped tensors.
    pub fn add_scaled(&mut self, a: Var, b: Var, weight: f64) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add_scaled", va.shape(), vb.shape()));
        }
        let d = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + weight * y)
            .collect();
        let value = Tensor::new(va.shape(), d)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::AddScaled { a, b, weight }))
    }

    /// `1 - cos(a, b)`.
    pub fn cosine_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("cosine_loss", va.shape(), vb.shape()));
        }
        let (dot, na, nb) = dot_norms(va.data(), vb.data());
        if na == 0.0 || nb == 0.0 {
            return Err(Error::contract("cosine_loss", "zero-length vector"));
        }
        let value = Tensor::scalar(1.0 - dot / (na * nb));
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::CosineLoss { a, b }))
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Propagates d(loss)/d(node) to every node that requires a gradient and
    /// adds the result to the accumulated gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut work: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        work[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = work[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut work);
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], work: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad_top,
                pad_left,
            } => {
                let (h, w, c) = nodes[input.0].value.dims3().expect("checked in forward");
                let ks = nodes[kernel.0].value.shape();
                let (kh, kw, k) = (ks[0], ks[1], ks[3]);
                let (oh, ow, _) = node.value.dims3().expect("checked in forward");
                if let Some(gb) = slot(nodes, work, *bias) {
                    for go in g.chunks_exact(k) {
                        gb.iter_mut().zip(go).for_each(|(a, b)| *a += b);
                    }
                }
                let x = val(*input);
                let kd = val(*kernel);
                let need_k = nodes[kernel.0].requires_grad;
                let need_x = nodes[input.0].requires_grad;
                let mut gk = if need_k { vec![0.0; kd.len()] } else { Vec::new() };
                let mut gx = if need_x { vec![0.0; x.len()] } else { Vec::new() };
                for oy in 0..oh {
                    for ox in 0..ow {
                        let go = &g[(oy * ow + ox) * k..][..k];
                        for dy in 0..kh {
                            let Some(iy) = (oy * stride + dy).checked_sub(*pad_top) else {
                                continue;
                            };
                            if iy >= h {
                                continue;
                            }
                            for dx in 0..kw {
                                let Some(ix) = (ox * stride + dx).checked_sub(*pad_left) else {
                                    continue;
                                };
                                if ix >= w {
                                    continue;
                                }
                                let pbase = (iy * w + ix) * c;
                                let kbase = (dy * kw + dx) * c * k;
                                for ci in 0..c {
                                    let krange = kbase + ci * k..kbase + (ci + 1) * k;
                                    if need_k {
                                        let xv = x[pbase + ci];
                                        for (a, b) in gk[krange.clone()].iter_mut().zip(go) {
                                            *a += xv * b;
                                        }
                                    }
                                    if need_x {
                                        let mut s = 0.0;
                                        for (a, b) in kd[krange].iter().zip(go) {
                                            s += a * b;
                                        }
                                        gx[pbase + ci] += s;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(t) = slot(nodes, work, *kernel) {
                    t.iter_mut().zip(&gk).for_each(|(a, b)| *a += b);
                }
                if let Some(t) = slot(nodes, work, *input) {
                    t.iter_mut().zip(&gx).for_each(|(a, b)| *a += b);
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                if let Some(t) = slot(nodes, work, *x) {
                    for ((a, gi), xi) in t.iter_mut().zip(g).zip(xv) {
                        if *xi > 0.0 {
                            *a += gi;
                        }
                    }
                }
            }
            Op::MinChannel { input, argmin } => {
                let c = nodes[input.0].value.shape()[2];
                if let Some(t) = slot(nodes, work, *input) {
                    for (p, (&am, gi)) in argmin.iter().zip(g).enumerate() {
                        t[p * c + am as usize] += gi;
                    }
                }
            }
            Op::Hadamard { a, b } => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                if sa == sb {
                    let (av, bv) = (val(*a), val(*b));
                    if let Some(t) = slot(nodes, work, *a) {
                        for ((s, gi), y) in t.iter_mut().zip(g).zip(bv) {
                            *s += gi * y;
                        }
                    }
                    if let Some(t) = slot(nodes, work, *b) {
                        for ((s, gi), x) in t.iter_mut().zip(g).zip(av) {
                            *s += gi * x;
                        }
                    }
                } else {
                    let (big, small) = if sa[sa.len() - 1] == 1 { (*b, *a) } else { (*a, *b) };
                    let c = nodes[big.0].value.shape().last().copied().unwrap_or(1);
                    let (bv, sv) = (val(big), val(small));
                    if let Some(t) = slot(nodes, work, big) {
                        for (p, &s) in sv.iter().enumerate() {
                            for j in p * c..(p + 1) * c {
                                t[j] += g[j] * s;
                            }
                        }
                    }
                    if let Some(t) = slot(nodes, work, small) {
                        for (p, s) in t.iter_mut().enumerate() {
                            let r = p * c..(p + 1) * c;
                            *s += g[r.clone()].iter().zip(&bv[r]).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
            }
            Op::AddChannelwise { x, bias } => {
                let k = nodes[bias.0].value.len();
                if let Some(t) = slot(nodes, work, *x) {
                    t.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if let Some(t) = slot(nodes, work, *bias) {
                    for px in g.chunks_exact(k) {
                        t.iter_mut().zip(px).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Scale { x, factor } => {
                let f = val(*factor)[0];
                let xv = val(*x);
                if let Some(t) = slot(nodes, work, *x) {
                    t.iter_mut().zip(g).for_each(|(a, b)| *a += b * f);
                }
                if let Some(t) = slot(nodes, work, *factor) {
                    t[0] += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            Op::ChannelNorm { input, sigma, eps } => {
                let k = node.value.shape()[2];
                let y = node.value.data();
                if let Some(t) = slot(nodes, work, *input) {
                    for (p, &s) in sigma.iter().enumerate() {
                        let r = p * k..(p + 1) * k;
                        let (gp, yp) = (&g[r.clone()], &y[r.clone()]);
                        let gmean = gp.iter().sum::<f64>() / k as f64;
                        let gy: f64 = gp.iter().zip(yp).map(|(a, b)| a * b).sum();
                        let inv = 1.0 / (s + eps);
                        let coupling = if s > 0.0 { gy / (k as f64 * s) } else { 0.0 };
                        for ((o, gi), yi) in t[r].iter_mut().zip(gp).zip(yp) {
                            *o += (gi - gmean) * inv - yi * coupling;
                        }
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let (h, w, c) = nodes[x.0].value.dims3().expect("checked in forward");
                let n = (h * w) as f64;
                if let Some(t) = slot(nodes, work, *x) {
                    for px in t.chunks_exact_mut(c) {
                        px.iter_mut().zip(g).for_each(|(a, b)| *a += b / n);
                    }
                }
            }
            Op::FullyConnected { x, weight, bias } => {
                let m = g.len();
                let (xv, wv) = (val(*x), val(*weight));
                if let Some(t) = slot(nodes, work, *bias) {
                    t.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if let Some(t) = slot(nodes, work, *weight) {
                    for (row, xi) in t.chunks_exact_mut(m).zip(xv) {
                        row.iter_mut().zip(g).for_each(|(a, b)| *a += xi * b);
                    }
                }
                if let Some(t) = slot(nodes, work, *x) {
                    for (o, row) in t.iter_mut().zip(wv.chunks_exact(m)) {
                        *o += row.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let gy: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                if let Some(t) = slot(nodes, work, *x) {
                    for ((o, gi), yi) in t.iter_mut().zip(g).zip(y) {
                        *o += yi * (gi - gy);
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(t) = slot(nodes, work, *x) {
                    for ((o, gi), yi) in t.iter_mut().zip(g).zip(y) {
                        *o += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = nodes[p.0].value.len();
                    if let Some(t) = slot(nodes, work, *p) {
                        t.iter_mut().zip(&g[off..off + n]).for_each(|(a, b)| *a += b);
                    }
                    off += n;
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(t) = slot(nodes, work, *x) {
                    for ((o, gi), m) in t.iter_mut().zip(g).zip(mask) {
                        *o += gi * m;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(t) = slot(nodes, work, *x) {
                    t.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::MeanSquaredError { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let s = 2.0 * g[0] / av.len() as f64;
                if let Some(t) = slot(nodes, work, *a) {
                    for ((o, x), y) in t.iter_mut().zip(av).zip(bv) {
                        *o += s * (x - y);
                    }
                }
                if let Some(t) = slot(nodes, work, *b) {
                    for ((o, x), y) in t.iter_mut().zip(av).zip(bv) {
                        *o -= s * (x - y);
                    }
                }
            }
            Op::TaskLoss {
                estimate,
                target,
                confidence,
            } => {
                let (ev, tv) = (val(*estimate), val(*target));
                let c = val(*confidence)[0];
                let s = 2.0 * g[0] * c * c;
                if let Some(t) = slot(nodes, work, *estimate) {
                    for ((o, e), tt) in t.iter_mut().zip(ev).zip(tv) {
                        *o += s * (e - tt);
                    }
                }
                if let Some(t) = slot(nodes, work, *target) {
                    for ((o, e), tt) in t.iter_mut().zip(ev).zip(tv) {
                        *o += s * (tt - e);
                    }
                }
                if let Some(t) = slot(nodes, work, *confidence) {
                    let d2: f64 = ev.iter().zip(tv).map(|(e, tt)| (e - tt) * (e - tt)).sum();
                    t[0] += g[0] * 2.0 * c * d2;
                }
            }
            Op::NegLog(x) => {
                let xv = val(*x)[0];
                if let Some(t) = slot(nodes, work, *x) {
                    t[0] -= g[0] / xv;
                }
            }
            Op::AddScaled { a, b, weight } => {
                if let Some(t) = slot(nodes, work, *a) {
                    t.iter_mut().zip(g).for_each(|(o, gi)| *o += gi);
                }
                if let Some(t) = slot(nodes, work, *b) {
                    t.iter_mut().zip(g).for_each(|(o, gi)| *o += weight * gi);
                }
            }
            Op::CosineLoss { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let (dot, na, nb) = dot_norms(av, bv);
                let cos = dot / (na * nb);
                // d(1 - cos)/da = -(b / (|a||b|) - cos * a / |a|^2)
                if let Some(t) = slot(nodes, work, *a) {
                    for ((o, x), y) in t.iter_mut().zip(av).zip(bv) {
                        *o -= g[0] * (y / (na * nb) - cos * x / (na * na));
                    }
                }
                if let Some(t) = slot(nodes, work, *b) {
                    for ((o, x), y) in t.iter_mut().zip(av).zip(bv) {
                        *o -= g[0] * (x / (na * nb) - cos * y / (nb * nb));
                    }
                }
            }
        }
    }
}

/// Gradient buffer for `v`, or None when `v` needs no gradient.
fn slot<'a>(nodes: &[Node], work: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(work[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]))
}

fn dot_norms(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum());
    (dot, na, nb)
}

/// Logistic function in a form that cannot overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn conv_scalar_product() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[1, 1, 1], vec![2.0]).unwrap());
        let k = t.constant(Tensor::new(&[1, 1, 1, 1], vec![3.0]).unwrap());
        let b = t.constant(Tensor::vector(&[0.0]));
        let y = t.conv2d(x, k, b, 1, Padding::Same).unwrap();
        assert_eq!(t.value(y).data(), &[6.0]);
    }

    #[test]
    fn conv_valid_sum_of_ones() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[3, 3, 1], 1.0));
        let k = t.constant(Tensor::full(&[3, 3, 1, 1], 1.0));
        let b = t.constant(Tensor::vector(&[0.0]));
        let y = t.conv2d(x, k, b, 1, Padding::Valid).unwrap();
        assert_eq!(t.value(y).shape(), &[1, 1, 1]);
        assert_eq!(t.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_same_extents_with_stride() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[7, 8, 3]));
        let k = t.constant(Tensor::zeros(&[3, 3, 3, 5]));
        let b = t.constant(Tensor::zeros(&[5]));
        let y = t.conv2d(x, k, b, 2, Padding::Same).unwrap();
        assert_eq!(t.value(y).shape(), &[4, 4, 5]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[4, 4, 3]));
        let k = t.constant(Tensor::zeros(&[3, 3, 2, 5]));
        let b = t.constant(Tensor::zeros(&[5]));
        assert!(matches!(
            t.conv2d(x, k, b, 1, Padding::Same),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn conv_rejects_oversized_valid_kernel() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[2, 2, 1]));
        let k = t.constant(Tensor::zeros(&[3, 3, 1, 1]));
        let b = t.constant(Tensor::zeros(&[1]));
        assert!(t.conv2d(x, k, b, 1, Padding::Valid).is_err());
    }

    #[test]
    fn relu_values_and_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(&[-1.0, 0.0, 2.0]));
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);

        let mut t = Tape::new();
        let x = t.param(Tensor::vector(&[-1.0, 2.0]));
        let y = t.relu(x);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 1.0]);

        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[2, 2, 2], -3.0));
        let y = t.relu(x);
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn min_channel_picks_minimum_and_first_tie() {
        let mut t = Tape::new();
        let x = t.param(Tensor::new(&[1, 2, 3], vec![3.0, -1.0, 2.0, 1.0, 0.0, 0.0]).unwrap());
        let y = t.min_channel(x).unwrap();
        assert_eq!(t.value(y).data(), &[-1.0, 0.0]);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn min_channel_single_channel_is_identity() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_fn(&[2, 2, 1], |i| i as f64 - 1.5));
        let y = t.min_channel(x).unwrap();
        assert_eq!(t.value(y).data(), t.value(x).data());
    }

    #[test]
    fn hadamard_elementwise_and_broadcast() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(&[1.0, 2.0, 3.0]));
        let b = t.constant(Tensor::vector(&[4.0, 5.0, 6.0]));
        let y = t.hadamard(a, b).unwrap();
        assert_eq!(t.value(y).data(), &[4.0, 10.0, 18.0]);

        let m = t.constant(Tensor::from_fn(&[2, 2, 3], |i| i as f64));
        let ones = t.constant(Tensor::full(&[2, 2, 1], 1.0));
        let y = t.hadamard(ones, m).unwrap();
        assert_eq!(t.value(y), t.value(m));

        let bad = t.constant(Tensor::zeros(&[2, 3, 1]));
        assert!(t.hadamard(bad, m).is_err());
    }

    #[test]
    fn gap_means() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = t.global_average_pool(x).unwrap();
        assert_eq!(t.value(y).data(), &[2.5]);
        for size in [64, 224] {
            let x = t.constant(Tensor::full(&[size, size, 3], 0.7));
            let y = t.global_average_pool(x).unwrap();
            assert_eq!(t.value(y).shape(), &[3]);
            for v in t.value(y).data() {
                assert_relative_eq!(*v, 0.7, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn fully_connected_affine() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(&[1.0, 1.0]));
        let w = t.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.constant(Tensor::vector(&[0.0, 0.0]));
        let y = t.fully_connected(x, w, b).unwrap();
        assert_eq!(t.value(y).data(), &[4.0, 6.0]);

        let x = t.constant(Tensor::vector(&[0.3, -2.0, 5.0]));
        let eye = t.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let z = t.constant(Tensor::zeros(&[3]));
        let y = t.fully_connected(x, eye, z).unwrap();
        assert_eq!(t.value(y).data(), t.value(x).data());

        assert!(t.fully_connected(x, w, b).is_err());
    }

    #[test]
    fn softmax_and_sigmoid() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(&[0.0, 0.0, 0.0]));
        let y = t.softmax(x);
        for v in t.value(y).data() {
            assert_relative_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let x = t.constant(Tensor::vector(&[1000.0, 0.0, 0.0]));
        let y = t.softmax(x);
        assert!(t.value(y).is_finite());
        assert_relative_eq!(t.value(y).data()[0], 1.0, epsilon = 1e-15);
        assert!(t.value(y).data()[1] >= 0.0);

        let x = t.constant(Tensor::scalar(0.0));
        let y = t.sigmoid(x);
        assert_eq!(t.value(y).item(), 0.5);
        assert!(sigmoid(-1000.0) >= 0.0 && sigmoid(1000.0) <= 1.0);
    }

    #[test]
    fn backward_sum_and_square() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(&[1.0, -2.0, 3.0, 0.5, 9.0]));
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 5]);

        let mut t = Tape::new();
        let x = t.param(Tensor::vector(&[1.0, 2.0]));
        let sq = t.hadamard(x, x).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(&[1.0, 2.0]));
        let sq = t.hadamard(x, x).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4.0, 8.0]);
        t.zero_grad();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(&[1.0, 2.0]));
        let y = t.relu(x);
        assert!(matches!(t.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(&[1.0, 2.0]));
        let c = t.constant(Tensor::vector(&[3.0, 4.0]));
        let y = t.hadamard(x, c).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(t.grad(c).is_none());
    }

    #[test]
    fn dropout_is_inverted_and_seeded() {
        let mut t = Tape::new();
        let x = t.param(Tensor::full(&[1000], 1.0));
        let mut rng = crate::rng::seeded(3);
        let y = t.dropout(x, 0.2, &mut rng).unwrap();
        let kept = t.value(y).data().iter().filter(|&&v| v > 0.0).count();
        assert!((750..850).contains(&kept));
        for v in t.value(y).data() {
            assert!(*v == 0.0 || (*v - 1.25).abs() < 1e-15);
        }
        let mut rng = crate::rng::seeded(3);
        let y2 = t.dropout(x, 0.2, &mut rng).unwrap();
        assert_eq!(t.value(y), t.value(y2));
    }
}
