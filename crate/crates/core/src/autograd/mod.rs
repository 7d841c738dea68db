//! Tape-based reverse-mode automatic differentiation over dense 4-D tensors.
//!
//! A [`Graph`] is an append-only list of nodes. Each operation appends one
//! node holding its forward value plus whatever it needs for the backward
//! pass, so inputs always precede their consumers and [`Graph::backward`]
//! simply walks the list in reverse.
//!
//! Gradients of leaves accumulate: calling `backward` twice on the same graph
//! doubles every leaf gradient. Intermediate gradients are scratch and are
//! rebuilt on every call.
//!
//! ```
//! use ucloudnet_core::autograd::Graph;
//! use ucloudnet_core::tensor::{Shape, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.leaf(Tensor::full(Shape::new(1, 1, 2, 2), 3.0));
//! let y = g.add(x, x).unwrap();
//! let loss = g.sum(y);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[2.0; 4]);
//! ```

mod kernels;
mod param;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

pub use param::{Param, ParamId};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};
use kernels::ConvGeometry;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The differentiable primitives, used for diagnostics and grad-check reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Primitive {
    Conv2d,
    MaxPool2d,
    Upsample,
    BatchNorm,
    Relu6,
    Sigmoid,
    Concat,
    Add,
    Bce,
}

impl Primitive {
    pub const ALL: [Primitive; 9] = [
        Primitive::Conv2d,
        Primitive::MaxPool2d,
        Primitive::Upsample,
        Primitive::BatchNorm,
        Primitive::Relu6,
        Primitive::Sigmoid,
        Primitive::Concat,
        Primitive::Add,
        Primitive::Bce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Conv2d => "conv2d",
            Primitive::MaxPool2d => "maxpool2d",
            Primitive::Upsample => "upsample",
            Primitive::BatchNorm => "batchnorm",
            Primitive::Relu6 => "relu6",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Concat => "concat",
            Primitive::Add => "add",
            Primitive::Bce => "bce",
        }
    }

    pub fn parse(s: &str) -> Option<Primitive> {
        Primitive::ALL.into_iter().find(|p| p.name() == s)
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Running statistics of a batch-norm layer, one entry per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Element> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }
}

/// Batch-norm hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct BnConfig<T> {
    pub momentum: T,
    pub eps: T,
    pub training: bool,
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry },
    MaxPool2d { input: Var, argmax: Vec<usize> },
    Upsample2x { input: Var },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, training: bool },
    Relu6 { input: Var },
    Sigmoid { input: Var },
    Concat { a: Var, b: Var },
    Add { a: Var, b: Var },
    Scale { input: Var, factor: T },
    Sum { input: Var },
    Dot { input: Var, weights: Vec<T> },
    Bce { p: Var, target: Vec<T>, eps: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only computation graph.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
    bindings: Vec<(ParamId, Var)>,
    fault: Option<Primitive>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), leaf_grads: Vec::new(), bindings: Vec::new(), fault: None }
    }

    /// Builds a graph whose backward rule for `primitive` is deliberately
    /// wrong. Only meant for exercising the gradient checker.
    #[doc(hidden)]
    pub fn with_fault(primitive: Primitive) -> Self {
        Graph { fault: Some(primitive), ..Self::new() }
    }

    #[doc(hidden)]
    pub fn fault(&self) -> Option<Primitive> {
        self.fault
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input that never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that accumulates a gradient during [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a trainable parameter as a gradient-carrying leaf.
    pub fn param(&mut self, p: &Param<T>) -> Var {
        let v = self.leaf(p.value().clone());
        self.bindings.push((p.id(), v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads[v.0].as_deref()
    }

    /// Gradient of a parameter summed over every place it was bound.
    pub fn param_grad(&self, id: ParamId) -> Option<Vec<T>> {
        let mut out: Option<Vec<T>> = None;
        for &(pid, v) in &self.bindings {
            if pid != id {
                continue;
            }
            if let Some(g) = self.grad(v) {
                match out.as_mut() {
                    None => out = Some(g.to_vec()),
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                }
            }
        }
        out
    }

    /// Cross-correlation with optional bias. `weight` is `(Cout, Cin, kH, kW)`
    /// and `bias` holds `Cout` values.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        let [cout, cin, kh, kw] = ws.0;
        if cin != xs.c() {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs} has {} channels but weight {ws} expects {cin}", xs.c()),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        if let Some(b) = bias {
            if self.value(b).numel() != cout {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias has {} values for {cout} output channels", self.value(b).numel()),
                ));
            }
        }
        let span = |extent: usize, k: usize| -> Result<usize> {
            let padded = extent + 2 * padding;
            if padded < k || !(padded - k).is_multiple_of(stride) {
                return Err(Error::shape(
                    "conv2d",
                    format!("extent {extent} with kernel {k}, padding {padding}, stride {stride} gives a non-integer output size"),
                ));
            }
            Ok((padded - k) / stride + 1)
        };
        let oh = span(xs.h(), kh)?;
        let ow = span(xs.w(), kw)?;
        let geom = ConvGeometry { cin, h: xs.h(), w: xs.w(), kh, kw, stride, pad: padding, oh, ow };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            xs.n(),
            &geom,
            self.value(weight).data(),
            cout,
            bias.map(|b| self.value(b).data()),
        );
        let rg = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        let value = Tensor::new(Shape::new(xs.n(), cout, oh, ow), out)?;
        Ok(self.push(value, Op::Conv2d { input, weight, bias, geom }, rg))
    }

    /// 2x2 max pooling with stride 2.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        if !s.h().is_multiple_of(2) || !s.w().is_multiple_of(2) {
            return Err(Error::shape("maxpool2d", format!("spatial size of {s} must be even")));
        }
        let (out, argmax) = kernels::maxpool2x2_forward(self.value(input).data(), s);
        let value = Tensor::new(Shape::new(s.n(), s.c(), s.h() / 2, s.w() / 2), out)?;
        let rg = self.needs(input);
        Ok(self.push(value, Op::MaxPool2d { input, argmax }, rg))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample_nearest2x(&mut self, input: Var) -> Var {
        let s = self.shape(input);
        let out = kernels::upsample2x_forward(self.value(input).data(), s);
        let value = Tensor::from_parts(Shape::new(s.n(), s.c(), 2 * s.h(), 2 * s.w()), out);
        let rg = self.needs(input);
        self.push(value, Op::Upsample2x { input }, rg)
    }

    /// Batch normalization. In training mode the batch statistics are used and
    /// `stats` is updated in place; otherwise `stats` normalizes.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        cfg: BnConfig<T>,
    ) -> Result<Var> {
        let s = self.shape(input);
        let c = s.c();
        for (what, len) in [
            ("gamma", self.value(gamma).numel()),
            ("beta", self.value(beta).numel()),
            ("running_mean", stats.mean.len()),
            ("running_var", stats.var.len()),
        ] {
            if len != c {
                return Err(Error::shape("batchnorm2d", format!("{what} has {len} entries for {c} channels")));
            }
        }
        let (mean, var) = if cfg.training {
            if s.n() * s.plane() < 2 {
                return Err(Error::shape(
                    "batchnorm2d",
                    format!("training needs at least two values per channel, got input {s}"),
                ));
            }
            let (mean, var) = kernels::channel_moments(self.value(input).data(), s);
            let keep = T::one() - cfg.momentum;
            for ch in 0..c {
                stats.mean[ch] = keep * stats.mean[ch] + cfg.momentum * mean[ch];
                stats.var[ch] = keep * stats.var[ch] + cfg.momentum * var[ch];
            }
            (mean, var)
        } else {
            (stats.mean.clone(), stats.var.clone())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + cfg.eps).sqrt()).collect();
        let x = self.value(input).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); s.numel()];
        let mut out = vec![T::zero(); s.numel()];
        for n in 0..s.n() {
            for ch in 0..c {
                let lo = s.offset(n, ch, 0, 0);
                for i in lo..lo + s.plane() {
                    let h = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gv[ch] * h + bv[ch];
                }
            }
        }
        let rg = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let value = Tensor::new(s, out)?;
        Ok(self.push(value, Op::BatchNorm { input, gamma, beta, xhat, inv_std, training: cfg.training }, rg))
    }

    /// Elementwise `min(max(x, 0), 6)`.
    pub fn relu6(&mut self, input: Var) -> Var {
        let six = T::from_f64(6.0);
        let x = self.value(input);
        let value = Tensor::from_fn(x.shape(), |i| x.data()[i].max(T::zero()).min(six));
        let rg = self.needs(input);
        self.push(value, Op::Relu6 { input }, rg)
    }

    /// Elementwise logistic function, evaluated without overflow for any finite input.
    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let value = Tensor::from_fn(x.shape(), |i| sigmoid(x.data()[i]));
        let rg = self.needs(input);
        self.push(value, Op::Sigmoid { input }, rg)
    }

    /// Channel concatenation: `a` fills channels `[0, Ca)`, `b` fills `[Ca, Ca+Cb)`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if (sa.n(), sa.h(), sa.w()) != (sb.n(), sb.h(), sb.w()) {
            return Err(Error::shape("concat_channels", format!("cannot concatenate {sa} with {sb}")));
        }
        let out_shape = Shape::new(sa.n(), sa.c() + sb.c(), sa.h(), sa.w());
        let (pa, pb) = (sa.c() * sa.plane(), sb.c() * sb.plane());
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..sa.n() {
            data.extend_from_slice(&self.value(a).data()[n * pa..(n + 1) * pa]);
            data.extend_from_slice(&self.value(b).data()[n * pb..(n + 1) * pb]);
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Concat { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("add", format!("cannot add {sa} and {sb}")));
        }
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let value = Tensor::from_fn(sa, |i| xa[i] + xb[i]);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let x = self.value(input);
        let value = Tensor::from_fn(x.shape(), |i| x.data()[i] * factor);
        let rg = self.needs(input);
        self.push(value, Op::Scale { input, factor }, rg)
    }

    /// Sum of all elements as a `(1,1,1,1)` tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let acc = kernels::sum(self.value(input).data().iter().copied());
        let rg = self.needs(input);
        self.push(Tensor::scalar(acc), Op::Sum { input }, rg)
    }

    /// `sum(x * weights)` for a constant weight tensor of the same shape.
    pub fn dot(&mut self, input: Var, weights: &Tensor<T>) -> Result<Var> {
        let s = self.shape(input);
        if s != weights.shape() {
            return Err(Error::shape("dot", format!("cannot contract {s} with {}", weights.shape())));
        }
        let acc = kernels::sum(self.value(input).data().iter().zip(weights.data()).map(|(&a, &b)| a * b));
        let rg = self.needs(input);
        Ok(self.push(Tensor::scalar(acc), Op::Dot { input, weights: weights.data().to_vec() }, rg))
    }

    /// Mean binary cross-entropy of probabilities `p` against a constant
    /// target, with `p` clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, p: Var, target: &Tensor<T>, eps: T) -> Result<Var> {
        let s = self.shape(p);
        if s != target.shape() {
            return Err(Error::shape("bce", format!("prediction {s} does not match target {}", target.shape())));
        }
        let hi = T::one() - eps;
        let acc = kernels::sum(self.value(p).data().iter().zip(target.data()).map(|(&pv, &y)| {
            let pc = pv.max(eps).min(hi);
            y * pc.portable_ln() + (T::one() - y) * (T::one() - pc).portable_ln()
        }));
        let loss = -acc / T::from_f64(s.numel() as f64);
        let rg = self.needs(p);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { p, target: target.data().to_vec(), eps }, rg))
    }

    /// Every discrete branch the forward pass took: the ReLU6 region of each
    /// input, each max-pool winner and each clamped BCE prediction. Two
    /// evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> Vec<u32> {
        let six = T::from_f64(6.0);
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu6 { input } => sig.extend(self.value(*input).data().iter().map(|&x| {
                    if x <= T::zero() {
                        0
                    } else if x >= six {
                        2
                    } else {
                        1
                    }
                })),
                Op::MaxPool2d { argmax, .. } => sig.extend(argmax.iter().map(|&a| a as u32)),
                Op::Bce { p, eps, .. } => {
                    let hi = T::one() - *eps;
                    sig.extend(self.value(*p).data().iter().map(|&v| (v < *eps) as u32 + 2 * (v > hi) as u32))
                }
                _ => {}
            }
        }
        sig
    }

    /// Reverse-mode sweep from a `(1,1,1,1)` loss. Leaf gradients accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::invalid("backward from a node outside this graph"));
        }
        let ls = self.shape(loss);
        if !ls.is_scalar() {
            return Err(Error::shape("backward", format!("loss must be 1x1x1x1, got {ls}")));
        }
        let mut scratch: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        scratch[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = scratch[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                let slot = self.leaf_grads[id].get_or_insert_with(|| vec![T::zero(); g.len()]);
                slot.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
                continue;
            }
            for (target, contrib) in self.local_grads(id, &g) {
                match &mut scratch[target.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn corrupt(&self, p: Primitive, mut grads: Vec<(Var, Vec<T>)>) -> Vec<(Var, Vec<T>)> {
        if self.fault == Some(p) {
            let k = T::from_f64(1.01);
            for (_, g) in grads.iter_mut() {
                g.iter_mut().for_each(|v| *v *= k);
            }
        }
        grads
    }

    /// Gradient contributions of node `id` to its inputs, given its own gradient.
    fn local_grads(&self, id: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[id];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                let xs = self.shape(*input);
                let cout = self.shape(*weight).n();
                let need = (self.needs(*input), self.needs(*weight), bias.is_some_and(|b| self.needs(b)));
                let gr = kernels::conv2d_backward(
                    self.value(*input).data(),
                    xs.n(),
                    geom,
                    self.value(*weight).data(),
                    cout,
                    g,
                    need,
                );
                if let Some(dx) = gr.input {
                    out.push((*input, dx));
                }
                if let Some(dw) = gr.weight {
                    out.push((*weight, dw));
                }
                if let (Some(b), Some(db)) = (bias, gr.bias) {
                    out.push((*b, db));
                }
                return self.corrupt(Primitive::Conv2d, out);
            }
            Op::MaxPool2d { input, argmax } => {
                let mut dx = vec![T::zero(); self.shape(*input).numel()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
                out.push((*input, dx));
                return self.corrupt(Primitive::MaxPool2d, out);
            }
            Op::Upsample2x { input } => {
                out.push((*input, kernels::upsample2x_backward(g, self.shape(*input))));
                return self.corrupt(Primitive::Upsample, out);
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, training } => {
                let s = self.shape(*input);
                let gv = self.value(*gamma).data();
                let m = T::from_f64((s.n() * s.plane()) as f64);
                let mut dgamma = vec![T::zero(); s.c()];
                let mut dbeta = vec![T::zero(); s.c()];
                for n in 0..s.n() {
                    for c in 0..s.c() {
                        let lo = s.offset(n, c, 0, 0);
                        for i in lo..lo + s.plane() {
                            dgamma[c] += g[i] * xhat[i];
                            dbeta[c] += g[i];
                        }
                    }
                }
                if self.needs(*input) {
                    let mut dx = vec![T::zero(); s.numel()];
                    for n in 0..s.n() {
                        for c in 0..s.c() {
                            let lo = s.offset(n, c, 0, 0);
                            for i in lo..lo + s.plane() {
                                dx[i] = if *training {
                                    // dxhat = g * gamma; sums over the channel are gamma * (dbeta, dgamma)
                                    gv[c] * inv_std[c] / m * (m * g[i] - dbeta[c] - xhat[i] * dgamma[c])
                                } else {
                                    g[i] * gv[c] * inv_std[c]
                                };
                            }
                        }
                    }
                    out.push((*input, dx));
                }
                if self.needs(*gamma) {
                    out.push((*gamma, dgamma));
                }
                if self.needs(*beta) {
                    out.push((*beta, dbeta));
                }
                return self.corrupt(Primitive::BatchNorm, out);
            }
            Op::Relu6 { input } => {
                let six = T::from_f64(6.0);
                let x = self.value(*input).data();
                let dx =
                    g.iter().zip(x).map(|(&gv, &xv)| if xv > T::zero() && xv < six { gv } else { T::zero() }).collect();
                out.push((*input, dx));
                return self.corrupt(Primitive::Relu6, out);
            }
            Op::Sigmoid { input } => {
                let y = node.value.data();
                let dx = g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (T::one() - yv)).collect();
                out.push((*input, dx));
                return self.corrupt(Primitive::Sigmoid, out);
            }
            Op::Concat { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (pa, pb) = (sa.c() * sa.plane(), sb.c() * sb.plane());
                let mut da = Vec::with_capacity(sa.numel());
                let mut db = Vec::with_capacity(sb.numel());
                for n in 0..sa.n() {
                    let lo = n * (pa + pb);
                    da.extend_from_slice(&g[lo..lo + pa]);
                    db.extend_from_slice(&g[lo + pa..lo + pa + pb]);
                }
                if self.needs(*a) {
                    out.push((*a, da));
                }
                if self.needs(*b) {
                    out.push((*b, db));
                }
                return self.corrupt(Primitive::Concat, out);
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        out.push((v, g.to_vec()));
                    }
                }
                return self.corrupt(Primitive::Add, out);
            }
            Op::Scale { input, factor } => {
                out.push((*input, g.iter().map(|&v| v * *factor).collect()));
            }
            Op::Sum { input } => {
                out.push((*input, vec![g[0]; self.shape(*input).numel()]));
            }
            Op::Dot { input, weights } => {
                out.push((*input, weights.iter().map(|&w| w * g[0]).collect()));
            }
            Op::Bce { p, target, eps } => {
                let hi = T::one() - *eps;
                let n = T::from_f64(target.len() as f64);
                let dp = self
                    .value(*p)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&pv, &y)| {
                        if pv < *eps || pv > hi {
                            T::zero()
                        } else {
                            -(y / pv - (T::one() - y) / (T::one() - pv)) / n * g[0]
                        }
                    })
                    .collect();
                out.push((*p, dp));
                return self.corrupt(Primitive::Bce, out);
            }
        }
        out
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).portable_exp())
    } else {
        let e = x.portable_exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests;
