//! Parameterized layers: plain convolution, batch norm and the
//! conv → ReLU6 → batch-norm unit used throughout the network.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BnConfig, Graph, Param, ParamId, RunningStats, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Parameter initialization rule.
///
/// Convolution weights are drawn from `U(-b, b)` with `b = sqrt(6 / fan_in)`,
/// biases start at zero, batch-norm scale at one and shift at zero, running
/// mean at zero and running variance at one.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct InitSpec;

impl InitSpec {
    pub fn conv_bound(&self, fan_in: usize) -> f64 {
        num_traits::Float::sqrt(6.0 / fan_in as f64)
    }
}

/// Hands out parameters in construction order with sequential ids and seeded
/// initial values.
pub struct ParamFactory {
    spec: InitSpec,
    rng: ChaCha8Rng,
    next: usize,
}

impl ParamFactory {
    pub fn new(spec: InitSpec, seed: u64) -> Self {
        ParamFactory { spec, rng: ChaCha8Rng::seed_from_u64(seed), next: 0 }
    }

    fn id(&mut self) -> ParamId {
        self.next += 1;
        ParamId(self.next - 1)
    }

    pub fn conv_weight<T: Element>(&mut self, name: String, cout: usize, cin: usize, k: usize) -> Result<Param<T>> {
        let fan_in = cin * k * k;
        if fan_in == 0 {
            return Err(Error::invalid(format!("{name}: fan-in must be positive")));
        }
        let bound = self.spec.conv_bound(fan_in);
        let dist = Uniform::new_inclusive(-bound, bound);
        let rng = &mut self.rng;
        let value = Tensor::from_fn(Shape::new(cout, cin, k, k), |_| T::from_f64(dist.sample(rng)));
        let id = self.id();
        Ok(Param::new(id, name, value))
    }

    pub fn constant<T: Element>(&mut self, name: String, channels: usize, v: f64) -> Param<T> {
        let id = self.id();
        Param::new(id, name, Tensor::full(Shape::new(1, channels, 1, 1), T::from_f64(v)))
    }
}

/// Anything that owns trainable parameters and non-trainable buffers.
pub trait Module<T: Element> {
    fn parameters(&self) -> Vec<&Param<T>>;
    fn parameters_mut(&mut self) -> Vec<&mut Param<T>>;
    /// Non-trainable state (batch-norm running statistics) by name.
    fn buffers(&self) -> Vec<(String, &Vec<T>)>;
    fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<T>)>;

    fn zero_grad(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }

    /// Pulls the gradients recorded on `g` into the parameters' grad buffers.
    fn absorb_grads(&mut self, g: &Graph<T>) {
        for p in self.parameters_mut() {
            if let Some(grad) = g.param_grad(p.id()) {
                p.accumulate_grad(&grad);
            }
        }
    }

    fn num_trainable(&self) -> usize {
        self.parameters().iter().map(|p| p.value().numel()).sum()
    }
}

/// Plain convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    padding: usize,
}

impl<T: Element> Conv2d<T> {
    pub fn new(f: &mut ParamFactory, name: &str, cin: usize, cout: usize, kernel: usize) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::invalid(format!("{name}: kernel size must be odd, got {kernel}")));
        }
        Ok(Conv2d {
            weight: f.conv_weight(format!("{name}.weight"), cout, cin, kernel)?,
            bias: f.constant(format!("{name}.bias"), cout, 0.0),
            padding: kernel / 2,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value().shape().c()
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value().shape().n()
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        g.conv2d(x, w, Some(b), 1, self.padding)
    }
}

impl<T: Element> Module<T> for Conv2d<T> {
    fn parameters(&self) -> Vec<&Param<T>> {
        alloc::vec![&self.weight, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Param<T>> {
        alloc::vec![&mut self.weight, &mut self.bias]
    }

    fn buffers(&self) -> Vec<(String, &Vec<T>)> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        Vec::new()
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    name: String,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub stats: RunningStats<T>,
}

impl<T: Element> BatchNorm2d<T> {
    pub fn new(f: &mut ParamFactory, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            name: name.into(),
            gamma: f.constant(format!("{name}.gamma"), channels, 1.0),
            beta: f.constant(format!("{name}.beta"), channels, 0.0),
            stats: RunningStats::new(channels),
        }
    }

    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, training: bool) -> Result<Var> {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        let cfg = BnConfig { momentum: T::from_f64(BN_MOMENTUM), eps: T::from_f64(BN_EPS), training };
        g.batchnorm2d(x, gamma, beta, &mut self.stats, cfg)
    }
}

impl<T: Element> Module<T> for BatchNorm2d<T> {
    fn parameters(&self) -> Vec<&Param<T>> {
        alloc::vec![&self.gamma, &self.beta]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Param<T>> {
        alloc::vec![&mut self.gamma, &mut self.beta]
    }

    fn buffers(&self) -> Vec<(String, &Vec<T>)> {
        alloc::vec![
            (format!("{}.running_mean", self.name), &self.stats.mean),
            (format!("{}.running_var", self.name), &self.stats.var),
        ]
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        alloc::vec![
            (format!("{}.running_mean", self.name), &mut self.stats.mean),
            (format!("{}.running_var", self.name), &mut self.stats.var),
        ]
    }
}

/// 3x3 (or 1x1) convolution, ReLU6, then batch norm.
#[derive(Debug, Clone)]
pub struct BasicConv2d<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

impl<T: Element> BasicConv2d<T> {
    pub fn new(f: &mut ParamFactory, name: &str, cin: usize, cout: usize, kernel: usize) -> Result<Self> {
        let conv = Conv2d::new(f, &format!("{name}.conv"), cin, cout, kernel)?;
        let bn = BatchNorm2d::new(f, &format!("{name}.bn"), cout);
        Ok(BasicConv2d { conv, bn })
    }

    pub fn in_channels(&self) -> usize {
        self.conv.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }

    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, training: bool) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = g.relu6(y);
        self.bn.forward(g, y, training)
    }
}

impl<T: Element> Module<T> for BasicConv2d<T> {
    fn parameters(&self) -> Vec<&Param<T>> {
        let mut v = self.conv.parameters();
        v.extend(self.bn.parameters());
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.conv.parameters_mut();
        v.extend(self.bn.parameters_mut());
        v
    }

    fn buffers(&self) -> Vec<(String, &Vec<T>)> {
        self.bn.buffers()
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        self.bn.buffers_mut()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(cin: usize, cout: usize, seed: u64) -> BasicConv2d<f64> {
        BasicConv2d::new(&mut ParamFactory::new(InitSpec, seed), "l", cin, cout, 3).unwrap()
    }

    fn input(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Uniform::new(0.0, 1.0);
        Tensor::from_fn(shape, |_| d.sample(&mut rng))
    }

    #[test]
    fn basic_conv_preserves_spatial_size() {
        let mut l = layer(3, 8, 1);
        let mut g = Graph::new();
        let x = g.input(input(Shape::new(2, 3, 32, 32), 2));
        let y = l.forward(&mut g, x, true).unwrap();
        assert_eq!(g.shape(y), Shape::new(2, 8, 32, 32));
    }

    #[test]
    fn training_output_is_channel_centered() {
        let mut l = layer(3, 8, 3);
        let mut g = Graph::new();
        let x = g.input(input(Shape::new(2, 3, 16, 16), 4));
        let y = l.forward(&mut g, x, true).unwrap();
        let out = g.value(y);
        let s = out.shape();
        for c in 0..s.c() {
            let mut acc = 0.0;
            for n in 0..s.n() {
                for i in 0..s.h() {
                    for j in 0..s.w() {
                        acc += out.get(n, c, i, j);
                    }
                }
            }
            assert!((acc / (s.n() * s.plane()) as f64).abs() < 1e-5, "channel {c}");
        }
    }

    #[test]
    fn eval_forward_is_pure() {
        let mut l = layer(3, 4, 5);
        let x = input(Shape::new(1, 3, 8, 8), 6);
        let run = |l: &mut BasicConv2d<f64>| {
            let mut g = Graph::new();
            let v = g.input(x.clone());
            let y = l.forward(&mut g, v, false).unwrap();
            g.value(y).clone()
        };
        let a = run(&mut l);
        let b = run(&mut l);
        assert!(a.bit_eq(&b));
        assert_eq!(l.bn.stats, RunningStats::new(4));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut l = layer(4, 4, 1);
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(Shape::new(1, 3, 8, 8)));
        assert!(matches!(l.forward(&mut g, x, false), Err(Error::Shape { op: "conv2d", .. })));
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let bound = InitSpec.conv_bound(4 * 9);
        assert!((bound - 0.408_248_290_463_863).abs() < 1e-12);
        let l = layer(4, 16, 9);
        assert!(l.conv.weight.value().data().iter().all(|w| w.abs() <= bound));
        assert!(l.conv.bias.value().data().iter().all(|&b| b == 0.0));
        assert!(l.bn.gamma.value().data().iter().all(|&v| v == 1.0));
        assert!(l.bn.beta.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = layer(4, 8, 11);
        let b = layer(4, 8, 11);
        let c = layer(4, 8, 12);
        assert!(a.conv.weight.value().bit_eq(b.conv.weight.value()));
        assert!(!a.conv.weight.value().bit_eq(c.conv.weight.value()));
    }
}
