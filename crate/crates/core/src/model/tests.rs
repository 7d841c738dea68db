use super::*;
use crate::tensor::{Shape, Tensor};

fn input(n: usize, size: usize) -> Tensor<f64> {
    Tensor::from_fn(Shape::new(n, 3, size, size), |i| ((i * 31) % 17) as f64 / 17.0)
}

/// Independent tally of the architecture: (cin, cout, kernel, has_bn) per conv.
fn conv_table(k: usize) -> Vec<(usize, usize, usize, bool)> {
    let mut v = Vec::new();
    // encoders
    v.push((3, k, 3, true));
    v.push((k, k, 3, true));
    if k != 3 {
        v.push((3, k, 1, false));
    }
    for c in [2 * k, 4 * k, 8 * k] {
        v.push((c, c, 3, true));
        v.push((c, c, 3, true));
    }
    // downs
    for (a, b) in [(k, 2 * k), (2 * k, 4 * k), (4 * k, 8 * k), (8 * k, 16 * k)] {
        v.push((a, b, 3, true));
    }
    // ups
    for (a, b) in [(16 * k, 16 * k), (8 * k, 8 * k), (4 * k, 4 * k), (2 * k, 2 * k)] {
        v.push((a, b, 3, true));
    }
    // decoders: up output + skip
    for (a, b) in [(16 * k + 8 * k, 8 * k), (8 * k + 4 * k, 4 * k), (4 * k + 2 * k, 2 * k), (2 * k + k, k)] {
        v.push((a, b, 3, true));
        v.push((b, b, 3, true));
    }
    // heads
    for c in [k, 2 * k, 4 * k] {
        v.push((c, 1, 1, false));
    }
    v
}

fn oracle_counts(k: usize) -> (usize, usize) {
    let mut trainable = 0;
    let mut state = 0;
    for (cin, cout, ks, bn) in conv_table(k) {
        let conv = cout * cin * ks * ks + cout;
        trainable += conv + if bn { 2 * cout } else { 0 };
        state += conv + if bn { 4 * cout } else { 0 };
    }
    (trainable, state)
}

#[test]
fn output_shapes() {
    let mut net = UCloudNet::<f64>::build(2, 0).unwrap();
    let mut g = Graph::new();
    let x = g.input(input(2, 64));
    let o = net.forward(&mut g, x, true, true).unwrap();
    assert_eq!(g.shape(o.main), Shape::new(2, 1, 64, 64));
    assert_eq!(g.shape(o.aux2.unwrap()), Shape::new(2, 1, 32, 32));
    assert_eq!(g.shape(o.aux4.unwrap()), Shape::new(2, 1, 16, 16));
    for v in [o.main, o.aux2.unwrap(), o.aux4.unwrap()] {
        assert!(g.value(v).data().iter().all(|&p| p > 0.0 && p < 1.0));
    }
}

#[test]
fn zeroed_head_gives_one_half() {
    let mut net = UCloudNet::<f64>::build(1, 4).unwrap();
    net.head_main.weight.value_mut().data_mut().fill(0.0);
    let mut g = Graph::new();
    let x = g.input(input(1, 32));
    let o = net.forward(&mut g, x, false, false).unwrap();
    assert!(g.value(o.main).data().iter().all(|&p| p == 0.5));
}

#[test]
fn channel_plan_tables() {
    let p = ChannelPlan::new(4).unwrap();
    assert_eq!((0..4).map(|s| p.encoder(s)).collect::<Vec<_>>(), [4, 8, 16, 32]);
    assert_eq!((0..4).map(|s| p.down(s)).collect::<Vec<_>>(), [8, 16, 32, 64]);
    assert_eq!((0..4).map(|s| p.up(s)).collect::<Vec<_>>(), [64, 32, 16, 8]);
    assert_eq!((0..4).map(|s| p.decoder(s)).collect::<Vec<_>>(), [32, 16, 8, 4]);
    let p = ChannelPlan::new(2).unwrap();
    assert_eq!((0..4).map(|s| p.encoder(s)).collect::<Vec<_>>(), [2, 4, 8, 16]);
    assert!(ChannelPlan::new(0).is_err());
    assert!(UCloudNet::<f32>::build(0, 0).is_err());
}

#[test]
fn channel_continuity() {
    for k in [1, 2, 4, 8] {
        let net = UCloudNet::<f32>::build(k, 0).unwrap();
        for s in 1..STAGES {
            assert_eq!(net.encoders[s].conv1.in_channels(), net.downs[s - 1].conv.out_channels());
        }
        for s in 0..STAGES {
            assert_eq!(net.downs[s].conv.in_channels(), net.encoders[s].conv2.out_channels());
            let prev = if s == 0 { net.downs[3].conv.out_channels() } else { net.decoders[s - 1].conv2.out_channels() };
            assert_eq!(net.ups[s].conv.in_channels(), prev);
            assert_eq!(
                net.decoders[s].conv1.in_channels(),
                net.ups[s].conv.out_channels() + net.encoders[3 - s].conv2.out_channels()
            );
        }
        assert_eq!(net.head_main.in_channels(), net.decoders[3].conv2.out_channels());
        assert_eq!(net.head_aux2.in_channels(), net.decoders[2].conv2.out_channels());
        assert_eq!(net.head_aux4.in_channels(), net.decoders[1].conv2.out_channels());
    }
}

#[test]
fn parameter_counts_match_enumeration() {
    for k in [1, 2, 3, 4, 8] {
        let net = UCloudNet::<f32>::build(k, 0).unwrap();
        let (trainable, state) = oracle_counts(k);
        assert_eq!(net.num_trainable(), trainable, "k={k}");
        assert_eq!(net.num_state_values(), state, "k={k}");
    }
}

#[test]
fn projection_shortcut_cost() {
    let f = &mut ParamFactory::new(InitSpec, 0);
    let with = EncoderDcb::<f32>::new(f, "a", 3, 4).unwrap();
    let without = EncoderDcb::<f32>::new(f, "b", 4, 4).unwrap();
    assert!(with.shortcut.is_some() && without.shortcut.is_none());
    let plain =
        with.conv1.parameters().iter().chain(with.conv2.parameters().iter()).map(|p| p.value().numel()).sum::<usize>();
    assert_eq!(with.num_trainable() - plain, 4 * 3 + 4);
}

#[test]
fn zeroed_block_is_identity_in_eval() {
    let f = &mut ParamFactory::new(InitSpec, 1);
    let mut block = EncoderDcb::<f64>::new(f, "e", 4, 4).unwrap();
    for conv in [&mut block.conv1.conv, &mut block.conv2.conv] {
        conv.weight.value_mut().data_mut().fill(0.0);
        conv.bias.value_mut().data_mut().fill(0.0);
    }
    let mut g = Graph::new();
    let xt = Tensor::from_fn(Shape::new(1, 4, 8, 8), |i| i as f64 * 0.01 - 1.0);
    let x = g.input(xt.clone());
    let y = block.forward(&mut g, x, false).unwrap();
    assert!(g.value(y).bit_eq(&xt));
}

fn input_grad(residual: bool, training: bool, probe: &dyn Fn(usize) -> f64) -> Vec<f64> {
    let f = &mut ParamFactory::new(InitSpec, 2);
    let mut block = EncoderDcb::<f64>::new(f, "e", 4, 4).unwrap();
    block.residual = residual;
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_fn(Shape::new(2, 4, 8, 8), |i| ((i * 13) % 7) as f64 * 0.2 - 0.5));
    let y = block.forward(&mut g, x, training).unwrap();
    let w = Tensor::from_fn(g.shape(y), probe);
    let d = g.dot(y, &w).unwrap();
    g.backward(d).unwrap();
    g.grad(x).unwrap().to_vec()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

#[test]
fn shortcut_adds_the_upstream_gradient() {
    let probe = |i: usize| ((i * 11) % 5) as f64 - 2.0;
    for training in [true, false] {
        let with = input_grad(true, training, &probe);
        let without = input_grad(false, training, &probe);
        for (i, (a, b)) in with.iter().zip(&without).enumerate() {
            assert!((a - b - probe(i)).abs() < 1e-9);
        }
    }
}

#[test]
fn residual_gradient_dominates_on_uniform_probe() {
    for training in [true, false] {
        let with = input_grad(true, training, &|_| 1.0);
        let without = input_grad(false, training, &|_| 1.0);
        assert!(norm(&with) >= norm(&without), "{} < {}", norm(&with), norm(&without));
    }
}

#[test]
fn rejects_bad_inputs() {
    let mut net = UCloudNet::<f64>::build(1, 0).unwrap();
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(Shape::new(1, 3, 24, 32)));
    assert!(net.forward(&mut g, x, false, false).is_err());
    let x = g.input(Tensor::zeros(Shape::new(1, 1, 32, 32)));
    assert!(net.forward(&mut g, x, false, false).is_err());
}

#[test]
fn aux_heads_do_not_change_main() {
    let mut net = UCloudNet::<f64>::build(1, 5).unwrap();
    let run = |net: &mut UCloudNet<f64>, aux| {
        let mut g = Graph::new();
        let x = g.input(input(1, 32));
        let o = net.forward(&mut g, x, false, aux).unwrap();
        assert_eq!(o.aux2.is_some(), aux);
        g.value(o.main).clone()
    };
    let a = run(&mut net, true);
    let b = run(&mut net, false);
    assert!(a.bit_eq(&b));
}

#[test]
fn names_are_unique_and_stable() {
    let net = UCloudNet::<f32>::build(2, 0).unwrap();
    let names = net.parameter_names();
    let mut sorted = names.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), names.len());
    assert_eq!(names, UCloudNet::<f32>::build(2, 9).unwrap().parameter_names());
    assert_eq!(names[0], "encoder.0.conv1.conv.weight");
    assert_eq!(names.last().unwrap(), "head.aux4.bias");
    let buffers: Vec<String> = net.buffers().into_iter().map(|(n, _)| n).collect();
    assert_eq!(buffers[0], "encoder.0.conv1.bn.running_mean");
}

#[test]
fn seeded_init_is_reproducible() {
    let a = UCloudNet::<f32>::build(1, 11).unwrap();
    let b = UCloudNet::<f32>::build(1, 11).unwrap();
    let c = UCloudNet::<f32>::build(1, 12).unwrap();
    let same = |x: &UCloudNet<f32>, y: &UCloudNet<f32>| {
        x.parameters().iter().zip(y.parameters()).all(|(p, q)| p.value().bit_eq(q.value()))
    };
    assert!(same(&a, &b));
    assert!(!same(&a, &c));
}
