//! Central finite-difference verification of analytic gradients (64-bit).
//!
//! Two checkers share one error metric,
//! `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`:
//!
//! * [`grad_check`] differentiates a graph-building closure with respect to
//!   explicit input tensors, probing every element;
//! * [`probe_check`] perturbs a random sample of parameter elements of a
//!   module (used for composed blocks and the whole network).
//!
//! [`run_suite`] runs both over every primitive and composed block.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec::Vec;

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BnConfig, Graph, Param, Primitive, RunningStats, Var};
use crate::error::{Error, Result};
use crate::layers::{InitSpec, Module, ParamFactory};
use crate::loss::{self, LossConfig};
use crate::model::{EncoderDcb, UCloudNet};
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
    pub skipped: usize,
}

impl CheckReport {
    fn merge(self, other: CheckReport) -> CheckReport {
        CheckReport {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            probes: self.probes + other.probes,
            skipped: self.skipped + other.skipped,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

fn scalar_of(g: &Graph<f64>, v: Var, what: &str) -> Result<f64> {
    let t = g.value(v);
    if !t.shape().is_scalar() {
        return Err(Error::shape("grad_check", format!("{what} must produce a scalar, got {}", t.shape())));
    }
    let x = t.item();
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("{what} evaluated to {x}")));
    }
    Ok(x)
}

/// Compares analytic and central-difference gradients of `f` with respect to
/// every element of every input. `skip(input, element, value)` excludes
/// points where the function is not differentiable.
pub fn grad_check<F, S>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    fault: Option<Primitive>,
    skip: S,
) -> Result<CheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    S: Fn(usize, usize, f64) -> bool,
{
    let new_graph = || match fault {
        Some(p) => Graph::with_fault(p),
        None => Graph::new(),
    };
    let mut g = new_graph();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out, "function")?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| alloc::vec![0.0; t.numel()]))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out, "perturbed function")
    };

    let mut report = CheckReport { max_rel_error: 0.0, probes: 0, skipped: 0 };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for (ei, &x0) in t.data().iter().enumerate() {
            if skip(ti, ei, x0) {
                report.skipped += 1;
                continue;
            }
            work[ti].data_mut()[ei] = x0 + eps;
            let up = eval(&work)?;
            work[ti].data_mut()[ei] = x0 - eps;
            let down = eval(&work)?;
            work[ti].data_mut()[ei] = x0;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[ti][ei];
            if !a.is_finite() {
                return Err(Error::NonFinite(format!("analytic gradient of input {ti} element {ei} is {a}")));
            }
            report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric));
            report.probes += 1;
        }
    }
    Ok(report)
}

/// A module together with the data needed to evaluate a scalar loss.
pub trait ProbeTarget {
    fn params_mut(&mut self) -> Vec<&mut Param<f64>>;
    fn loss(&mut self, g: &mut Graph<f64>) -> Result<Var>;
}

/// Spot-checks `probes` randomly chosen parameter elements of `target`.
/// A draw whose perturbed evaluations take a different branch (see
/// [`Graph::branch_signature`]) is skipped and replaced, up to `4 * probes`
/// draws in total.
pub fn probe_check<P: ProbeTarget>(
    target: &mut P,
    probes: usize,
    seed: u64,
    eps: f64,
    fault: Option<Primitive>,
) -> Result<CheckReport> {
    let mut g = match fault {
        Some(p) => Graph::with_fault(p),
        None => Graph::new(),
    };
    let out = target.loss(&mut g)?;
    scalar_of(&g, out, "loss")?;
    g.backward(out)?;
    let base = g.branch_signature();
    let sizes: Vec<(usize, usize)> = target.params_mut().iter().map(|p| (p.id().0, p.value().numel())).collect();
    let total: usize = sizes.iter().map(|s| s.1).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CheckReport { max_rel_error: 0.0, probes: 0, skipped: 0 };
    while report.probes < probes && report.probes + report.skipped < 4 * probes {
        let mut flat = rng.gen_range(0..total);
        let mut pi = 0;
        while flat >= sizes[pi].1 {
            flat -= sizes[pi].1;
            pi += 1;
        }
        let id = target.params_mut()[pi].id();
        let analytic = g.param_grad(id).map_or(0.0, |gr| gr[flat]);
        let x0 = target.params_mut()[pi].value().data()[flat];
        let mut at = |v: f64| -> Result<(f64, Vec<u32>)> {
            target.params_mut()[pi].value_mut().data_mut()[flat] = v;
            let mut g = Graph::new();
            let out = target.loss(&mut g)?;
            Ok((scalar_of(&g, out, "perturbed loss")?, g.branch_signature()))
        };
        let (up, sig_up) = at(x0 + eps)?;
        let (down, sig_down) = at(x0 - eps)?;
        at(x0)?;
        if sig_up != base || sig_down != base {
            report.skipped += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * eps);
        report.max_rel_error = report.max_rel_error.max(relative_error(analytic, numeric));
        report.probes += 1;
    }
    if report.probes < probes {
        return Err(Error::invalid(alloc::format!(
            "only {} of {probes} probes landed on smooth pieces ({} skipped)",
            report.probes,
            report.skipped
        )));
    }
    Ok(report)
}

/// Result of one suite entry.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: CheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    let d = Uniform::new(lo, hi);
    Tensor::from_fn(shape, |_| d.sample(rng))
}

fn never(_: usize, _: usize, _: f64) -> bool {
    false
}

/// Scalarizes `v` as `sum(v * w)` with fixed random weights `w`.
fn project(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let w = uniform(&mut rng, g.shape(v), -1.0, 1.0);
    g.dot(v, &w)
}

/// Gradient check of a single primitive for one seed.
pub fn check_primitive(p: Primitive, seed: u64, eps: f64, fault: Option<Primitive>) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match p {
        Primitive::Conv2d => {
            let x = uniform(&mut rng, Shape::new(2, 3, 8, 8), -1.0, 1.0);
            let w = uniform(&mut rng, Shape::new(4, 3, 3, 3), -0.5, 0.5);
            let b = uniform(&mut rng, Shape::new(1, 4, 1, 1), -0.5, 0.5);
            let pointwise = uniform(&mut rng, Shape::new(2, 3, 1, 1), -0.5, 0.5);
            let r3 = grad_check(
                |g, v| {
                    let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                    project(g, y, seed)
                },
                &[x.clone(), w, b],
                eps,
                fault,
                never,
            )?;
            let r1 = grad_check(
                |g, v| {
                    let y = g.conv2d(v[0], v[1], None, 1, 0)?;
                    project(g, y, seed)
                },
                &[x, pointwise],
                eps,
                fault,
                never,
            )?;
            Ok(r3.merge(r1))
        }
        Primitive::MaxPool2d => {
            // distinct values 0.05 apart so no perturbation changes a window's argmax
            let mut order: Vec<usize> = (0..36).collect();
            order.shuffle(&mut rng);
            let x = Tensor::from_fn(Shape::new(1, 1, 6, 6), |i| order[i] as f64 * 0.05 - 0.9);
            grad_check(
                |g, v| {
                    let y = g.maxpool2d(v[0])?;
                    project(g, y, seed)
                },
                &[x],
                eps,
                fault,
                never,
            )
        }
        Primitive::Upsample => {
            let x = uniform(&mut rng, Shape::new(1, 2, 3, 3), -1.0, 1.0);
            grad_check(
                |g, v| {
                    let y = g.upsample_nearest2x(v[0]);
                    project(g, y, seed)
                },
                &[x],
                eps,
                fault,
                never,
            )
        }
        Primitive::BatchNorm => {
            let x = uniform(&mut rng, Shape::new(2, 3, 4, 4), -2.0, 2.0);
            let gamma = uniform(&mut rng, Shape::new(1, 3, 1, 1), 0.5, 1.5);
            let beta = uniform(&mut rng, Shape::new(1, 3, 1, 1), -0.5, 0.5);
            grad_check(
                |g, v| {
                    let mut stats = RunningStats::new(3);
                    let cfg = BnConfig { momentum: 0.1, eps: 1e-5, training: true };
                    let y = g.batchnorm2d(v[0], v[1], v[2], &mut stats, cfg)?;
                    project(g, y, seed)
                },
                &[x, gamma, beta],
                eps,
                fault,
                never,
            )
        }
        Primitive::Relu6 => {
            let x = uniform(&mut rng, Shape::new(1, 2, 5, 5), -2.0, 8.0);
            grad_check(
                |g, v| {
                    let y = g.relu6(v[0]);
                    project(g, y, seed)
                },
                &[x],
                eps,
                fault,
                |_, _, v| v.abs() < 10.0 * eps || (v - 6.0).abs() < 10.0 * eps,
            )
        }
        Primitive::Sigmoid => {
            let x = uniform(&mut rng, Shape::new(1, 2, 4, 4), -6.0, 6.0);
            grad_check(
                |g, v| {
                    let y = g.sigmoid(v[0]);
                    project(g, y, seed)
                },
                &[x],
                eps,
                fault,
                never,
            )
        }
        Primitive::Concat => {
            let a = uniform(&mut rng, Shape::new(2, 2, 3, 3), -1.0, 1.0);
            let b = uniform(&mut rng, Shape::new(2, 1, 3, 3), -1.0, 1.0);
            grad_check(
                |g, v| {
                    let y = g.concat_channels(v[0], v[1])?;
                    project(g, y, seed)
                },
                &[a, b],
                eps,
                fault,
                never,
            )
        }
        Primitive::Add => {
            let a = uniform(&mut rng, Shape::new(1, 2, 3, 3), -1.0, 1.0);
            let b = uniform(&mut rng, Shape::new(1, 2, 3, 3), -1.0, 1.0);
            grad_check(
                |g, v| {
                    let y = g.add(v[0], v[1])?;
                    project(g, y, seed)
                },
                &[a, b],
                eps,
                fault,
                never,
            )
        }
        Primitive::Bce => {
            let p = uniform(&mut rng, Shape::new(1, 1, 4, 4), 0.05, 0.95);
            let y = Tensor::from_fn(Shape::new(1, 1, 4, 4), |_| rng.gen_bool(0.5) as u8 as f64);
            grad_check(|g, v| loss::bce(g, v[0], &y, loss::CLAMP_EPS), &[p], eps, fault, never)
        }
    }
}

struct BlockProbe {
    block: EncoderDcb<f64>,
    x: Tensor<f64>,
    w: Tensor<f64>,
}

impl ProbeTarget for BlockProbe {
    fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        self.block.parameters_mut()
    }

    fn loss(&mut self, g: &mut Graph<f64>) -> Result<Var> {
        let x = g.input(self.x.clone());
        let y = self.block.forward(g, x, true)?;
        g.dot(y, &self.w)
    }
}

/// The whole network with a fixed input and target, scored by the
/// deep-supervision loss in training mode.
pub struct NetworkProbe {
    pub net: UCloudNet<f64>,
    pub x: Tensor<f64>,
    pub y: Tensor<f64>,
}

impl NetworkProbe {
    pub fn random(k: usize, size: usize, seed: u64) -> Result<Self> {
        let net = UCloudNet::build(k, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let x = uniform(&mut rng, Shape::new(1, 3, size, size), 0.0, 1.0);
        let y = Tensor::from_fn(Shape::new(1, 1, size, size), |_| rng.gen_bool(0.5) as u8 as f64);
        Ok(NetworkProbe { net, x, y })
    }
}

impl ProbeTarget for NetworkProbe {
    fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        self.net.parameters_mut()
    }

    fn loss(&mut self, g: &mut Graph<f64>) -> Result<Var> {
        let x = g.input(self.x.clone());
        let out = self.net.forward(g, x, true, true)?;
        Ok(loss::total_loss(g, &out, &self.y, &LossConfig::new(true))?.total)
    }
}

/// Spot probes through an encoder block with a 1x1 projection shortcut.
pub fn check_encoder_block(seed: u64, eps: f64, fault: Option<Primitive>) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = EncoderDcb::new(&mut ParamFactory::new(InitSpec, seed), "enc", 3, 4)?;
    let x = uniform(&mut rng, Shape::new(2, 3, 8, 8), -1.0, 1.0);
    let w = uniform(&mut rng, Shape::new(2, 4, 8, 8), -1.0, 1.0);
    probe_check(&mut BlockProbe { block, x, w }, 20, seed, eps, fault)
}

/// Ten spot probes through the full network at `k = 1` on a 32x32 input.
pub fn check_network(seed: u64, eps: f64, fault: Option<Primitive>) -> Result<CheckReport> {
    probe_check(&mut NetworkProbe::random(1, 32, seed)?, 10, seed, eps, fault)
}

/// Runs every primitive plus the composed checks over `seeds` seeds and
/// reports the worst error of each.
pub fn run_suite(seeds: u64, eps: f64, fault: Option<Primitive>) -> Result<Vec<SuiteEntry>> {
    type Check = Box<dyn Fn(u64) -> Result<CheckReport>>;
    let mut checks: Vec<(&'static str, Check)> = Primitive::ALL
        .into_iter()
        .map(|p| (p.name(), Box::new(move |s| check_primitive(p, s, eps, fault)) as Check))
        .collect();
    checks.push(("encoder_dcb", Box::new(move |s| check_encoder_block(s, eps, fault))));
    checks.push(("ucloudnet_k1", Box::new(move |s| check_network(s, eps, fault))));
    let mut out = Vec::with_capacity(checks.len());
    for (name, check) in checks {
        let mut report = CheckReport { max_rel_error: 0.0, probes: 0, skipped: 0 };
        for seed in 0..seeds {
            report = report.merge(check(seed)?);
        }
        out.push(SuiteEntry { name, report });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_fn(Shape::new(1, 1, 3, 3), |i| i as f64 * 0.3 - 1.0);
        let r = grad_check(
            |g, v| {
                let y = g.scale(v[0], 2.0);
                Ok(g.sum(y))
            },
            &[x],
            DEFAULT_EPS,
            None,
            never,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn sigmoid_chain_is_tight() {
        let x = Tensor::from_fn(Shape::new(1, 1, 2, 4), |i| i as f64 * 0.7 - 2.5);
        let r = grad_check(
            |g, v| {
                let a = g.sigmoid(v[0]);
                let b = g.scale(a, 3.0);
                let c = g.sigmoid(b);
                project(g, c, 3)
            },
            &[x],
            DEFAULT_EPS,
            None,
            never,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn relu6_kinks_are_skipped() {
        let x = Tensor::new(Shape::new(1, 1, 1, 4), alloc::vec![0.0, 6.0, 3.0, -1.0]).unwrap();
        let r = grad_check(
            |g, v| {
                let y = g.relu6(v[0]);
                Ok(g.sum(y))
            },
            &[x],
            DEFAULT_EPS,
            None,
            |_, _, v| v.abs() < 1e-4 || (v - 6.0).abs() < 1e-4,
        )
        .unwrap();
        assert_eq!((r.probes, r.skipped), (2, 2));
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn non_finite_values_fail() {
        let x = Tensor::full(Shape::new(1, 1, 1, 1), 1.0);
        let r = grad_check(
            |g, v| {
                let y = g.scale(v[0], f64::INFINITY);
                Ok(g.sum(y))
            },
            &[x],
            DEFAULT_EPS,
            None,
            never,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn every_primitive_passes() {
        for p in Primitive::ALL {
            for seed in 0..3 {
                let r = check_primitive(p, seed, DEFAULT_EPS, None).unwrap();
                assert!(r.max_rel_error < TOLERANCE, "{p} seed {seed}: {r:?}");
                assert!(r.probes > 0);
            }
        }
    }

    #[test]
    fn injected_fault_is_detected() {
        for p in Primitive::ALL {
            let r = check_primitive(p, 0, DEFAULT_EPS, Some(p)).unwrap();
            assert!(r.max_rel_error > TOLERANCE, "{p} fault went unnoticed");
        }
    }
}
