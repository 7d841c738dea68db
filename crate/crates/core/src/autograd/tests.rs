use super::*;

fn t(shape: [usize; 4], data: &[f64]) -> Tensor<f64> {
    Tensor::new(Shape(shape), data.to_vec()).unwrap()
}

fn bn_cfg(training: bool) -> BnConfig<f64> {
    BnConfig { momentum: 0.1, eps: 1e-5, training }
}

#[test]
fn delta_kernel_is_identity() {
    let mut g = Graph::<f64>::new();
    let xs: Vec<f64> = (0..16).map(|i| i as f64 * 0.5 - 3.0).collect();
    let x = g.input(t([1, 1, 4, 4], &xs));
    let mut k = [0.0; 9];
    k[4] = 1.0;
    let w = g.leaf(t([1, 1, 3, 3], &k));
    let y = g.conv2d(x, w, None, 1, 1).unwrap();
    assert_eq!(g.value(y).data(), &xs[..]);
}

#[test]
fn pointwise_conv_sums_channels() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::ones(Shape::new(1, 2, 2, 2)));
    let w = g.leaf(Tensor::ones(Shape::new(1, 2, 1, 1)));
    let b = g.leaf(t([1, 1, 1, 1], &[0.5]));
    let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(g.shape(y), Shape::new(1, 1, 2, 2));
    assert!(g.value(y).data().iter().all(|&v| v == 2.5));
}

#[test]
fn conv_rejects_bad_geometry() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::ones(Shape::new(1, 2, 5, 5)));
    let w = g.leaf(Tensor::ones(Shape::new(1, 3, 3, 3)));
    assert!(matches!(g.conv2d(x, w, None, 1, 1), Err(Error::Shape { .. })));
    let w = g.leaf(Tensor::ones(Shape::new(1, 2, 2, 2)));
    assert!(g.conv2d(x, w, None, 2, 0).is_err());
}

#[test]
fn maxpool_values_and_ties() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = g.maxpool2d(x).unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);

    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::full(Shape::new(1, 2, 4, 4), 7.0));
    let y = g.maxpool2d(x).unwrap();
    let l = g.sum(y);
    g.backward(l).unwrap();
    let grad = g.grad(x).unwrap();
    assert_eq!(grad.iter().sum::<f64>(), 8.0);
    for c in 0..2 {
        for wy in 0..2 {
            for wx in 0..2 {
                let mut n = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let v = grad[c * 16 + (2 * wy + dy) * 4 + 2 * wx + dx];
                        assert!(v == 0.0 || v == 1.0);
                        n += (v == 1.0) as usize;
                    }
                }
                assert_eq!(n, 1);
            }
        }
    }

    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::<f64>::ones(Shape::new(1, 1, 3, 4)));
    assert!(g.maxpool2d(x).is_err());
}

#[test]
fn upsample_pattern_and_pool_inverse() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = g.upsample_nearest2x(x);
    #[rustfmt::skip]
    let expected = [
        1.0, 1.0, 2.0, 2.0,
        1.0, 1.0, 2.0, 2.0,
        3.0, 3.0, 4.0, 4.0,
        3.0, 3.0, 4.0, 4.0,
    ];
    assert_eq!(g.value(y).data(), &expected);
    let z = g.maxpool2d(y).unwrap();
    assert!(g.value(z).bit_eq(g.value(x)));
    let l = g.sum(y);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[4.0; 4]);
}

#[test]
fn batchnorm_training_normalizes() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_fn(Shape::new(2, 3, 4, 4), |i| ((i * 37) % 11) as f64 * 0.3 + (i / 32) as f64));
    let gamma = g.leaf(Tensor::ones(Shape::new(1, 3, 1, 1)));
    let beta = g.leaf(Tensor::zeros(Shape::new(1, 3, 1, 1)));
    let mut stats = RunningStats::new(3);
    let y = g.batchnorm2d(x, gamma, beta, &mut stats, bn_cfg(true)).unwrap();
    let v = g.value(y);
    for c in 0..3 {
        let vals: Vec<f64> =
            (0..2).flat_map(|n| (0..16).map(move |i| (n, i))).map(|(n, i)| v.data()[(n * 3 + c) * 16 + i]).collect();
        let mean = vals.iter().sum::<f64>() / 32.0;
        let var = vals.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-3);
    }
    assert!(stats.mean.iter().all(|&m| m != 0.0));
}

#[test]
fn batchnorm_eval_with_default_stats_is_near_identity() {
    let mut g = Graph::<f64>::new();
    let data: Vec<f64> = (0..8).map(|i| i as f64 - 4.0).collect();
    let x = g.input(t([1, 2, 2, 2], &data));
    let gamma = g.leaf(Tensor::ones(Shape::new(1, 2, 1, 1)));
    let beta = g.leaf(Tensor::zeros(Shape::new(1, 2, 1, 1)));
    let mut stats = RunningStats::new(2);
    let before = stats.clone();
    let y = g.batchnorm2d(x, gamma, beta, &mut stats, bn_cfg(false)).unwrap();
    for (a, b) in g.value(y).data().iter().zip(&data) {
        assert!((a - b / (1.0f64 + 1e-5).sqrt()).abs() < 1e-12);
    }
    assert_eq!(stats, before);

    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::ones(Shape::new(1, 2, 1, 1)));
    let gamma = g.leaf(Tensor::ones(Shape::new(1, 2, 1, 1)));
    let beta = g.leaf(Tensor::zeros(Shape::new(1, 2, 1, 1)));
    assert!(g.batchnorm2d(x, gamma, beta, &mut stats, bn_cfg(true)).is_err());
}

#[test]
fn relu6_clamps_and_masks() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t([1, 1, 1, 5], &[-1.0, 0.5, 3.0, 6.5, 10.0]));
    let y = g.relu6(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.5, 3.0, 6.0, 6.0]);
    let l = g.sum(y);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 1.0, 0.0, 0.0]);
}

#[test]
fn sigmoid_is_stable() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t([1, 1, 1, 3], &[0.0, 40.0, -40.0]));
    let y = g.sigmoid(x);
    let v = g.value(y).data();
    assert_eq!(v[0], 0.5);
    assert!(v.iter().all(|a| a.is_finite()));
    assert!(v[1] <= 1.0 && v[2] >= 0.0 && v[2] < 1e-17);
    assert!(sigmoid(-1000.0f32).is_finite() && sigmoid(1000.0f32) == 1.0);
}

#[test]
fn concat_orders_and_splits() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(Tensor::from_fn(Shape::new(2, 2, 2, 2), |i| i as f64));
    let b = g.leaf(Tensor::from_fn(Shape::new(2, 1, 2, 2), |i| 100.0 + i as f64));
    let c = g.concat_channels(a, b).unwrap();
    let v = g.value(c).clone();
    assert_eq!(v.shape(), Shape::new(2, 3, 2, 2));
    assert!(v.slice_channels(0..2).unwrap().bit_eq(g.value(a)));
    assert!(v.slice_channels(2..3).unwrap().bit_eq(g.value(b)));
    assert_eq!(v.get(1, 2, 0, 0), 104.0);

    let e = g.leaf(Tensor::zeros(Shape::new(2, 0, 2, 2)));
    let c2 = g.concat_channels(a, e).unwrap();
    assert!(g.value(c2).bit_eq(g.value(a)));
    let bad = g.leaf(Tensor::zeros(Shape::new(2, 1, 4, 4)));
    assert!(g.concat_channels(a, bad).is_err());
}

#[test]
fn add_identity_and_errors() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(Tensor::from_fn(Shape::new(1, 2, 2, 2), |i| i as f64));
    let z = g.input(Tensor::zeros(Shape::new(1, 2, 2, 2)));
    let s = g.add(a, z).unwrap();
    assert!(g.value(s).bit_eq(g.value(a)));
    let other = g.input(Tensor::zeros(Shape::new(1, 1, 2, 2)));
    assert!(g.add(a, other).is_err());
}

#[test]
fn backward_accumulates() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_fn(Shape::new(1, 1, 2, 3), |i| i as f64));
    let l = g.sum(x);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0; 6]);

    // fan-out: x used twice
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::ones(Shape::new(1, 1, 2, 2)));
    let y = g.add(x, x).unwrap();
    let l = g.sum(y);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0; 4]);
    assert!(g.backward(y).is_err());
}

#[test]
fn scale_and_dot() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t([1, 1, 1, 3], &[1.0, 2.0, 3.0]));
    let s = g.scale(x, 2.0);
    let d = g.dot(s, &t([1, 1, 1, 3], &[1.0, 0.0, -1.0])).unwrap();
    assert_eq!(g.value(d).item(), -4.0);
    g.backward(d).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 0.0, -2.0]);
}

#[test]
fn bce_zero_gradient_outside_clamp() {
    let mut g = Graph::<f64>::new();
    let p = g.leaf(t([1, 1, 1, 2], &[0.0, 0.5]));
    let l = g.bce(p, &t([1, 1, 1, 2], &[1.0, 1.0]), 1e-7).unwrap();
    let expected = (-(1e-7f64).ln() + 2f64.ln()) / 2.0;
    assert!((g.value(l).item() - expected).abs() < 1e-12);
    g.backward(l).unwrap();
    let grad = g.grad(p).unwrap();
    assert_eq!(grad[0], 0.0);
    assert!((grad[1] - (-1.0)).abs() < 1e-12);
}

fn small_net(g: &mut Graph<f64>) -> (Var, Var) {
    let x = g.input(Tensor::from_fn(Shape::new(2, 2, 4, 4), |i| ((i * 7) % 13) as f64 / 13.0));
    let w = g.leaf(Tensor::from_fn(Shape::new(3, 2, 3, 3), |i| ((i * 5) % 9) as f64 / 9.0 - 0.4));
    let gamma = g.leaf(Tensor::ones(Shape::new(1, 3, 1, 1)));
    let beta = g.leaf(Tensor::zeros(Shape::new(1, 3, 1, 1)));
    let mut stats = RunningStats::new(3);
    let y = g.conv2d(x, w, None, 1, 1).unwrap();
    let y = g.relu6(y);
    let y = g.batchnorm2d(y, gamma, beta, &mut stats, bn_cfg(true)).unwrap();
    let y = g.maxpool2d(y).unwrap();
    let y = g.upsample_nearest2x(y);
    let y = g.sigmoid(y);
    let l = g.sum(y);
    (w, l)
}

#[test]
fn deterministic_replay() {
    let mut g1 = Graph::<f64>::new();
    let (w1, l1) = small_net(&mut g1);
    g1.backward(l1).unwrap();
    let mut g2 = Graph::<f64>::new();
    let (w2, l2) = small_net(&mut g2);
    g2.backward(l2).unwrap();
    assert_eq!(g1.value(l1).item().to_bits(), g2.value(l2).item().to_bits());
    let (a, b) = (g1.grad(w1).unwrap(), g2.grad(w2).unwrap());
    assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn primitive_names_round_trip() {
    for p in Primitive::ALL {
        assert_eq!(Primitive::parse(p.name()), Some(p));
    }
    assert_eq!(Primitive::parse("nope"), None);
}

#[test]
fn branch_signature_tracks_kinks_and_winners() {
    let sig = |v: [f64; 4]| {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(Shape::new(1, 1, 2, 2), v.to_vec()).unwrap());
        let y = g.relu6(x);
        g.maxpool2d(y).unwrap();
        g.branch_signature()
    };
    assert_eq!(sig([-1.0, 3.0, 7.0, 2.0]), [0, 1, 2, 1, 2]);
    assert_eq!(sig([-1.0, 3.0, 7.0, 2.0]), sig([-0.5, 3.5, 6.5, 2.5]));
    assert_ne!(sig([1.0, 3.0, 2.0, 0.5]), sig([1.0, 2.0, 3.0, 0.5]));
}
