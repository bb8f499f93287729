use super::reference::conv3d_direct;
use super::*;
use crate::gradcheck::check_layer;

fn ctx(rng: &mut Rng, training: bool) -> ForwardCtx<'_> {
    ForwardCtx { training, keep_cache: true, rng }
}

#[test]
fn identity_kernel_reproduces_input() {
    let mut rng = Rng::new(1, 1);
    let spec = Conv3dSpec::cubic(1, 1, 1, 1, 0);
    let w = Tensor::<f32>::new(&[1, 1, 1, 1, 1], 1.0).unwrap();
    let b = Tensor::<f32>::zeros(&[1]).unwrap();
    let x = Tensor::<f32>::rand_normal(&[2, 1, 3, 4, 5], 0.0, 1.0, &mut rng).unwrap();
    assert_eq!(conv3d_forward(&x, &w, &b, &spec).unwrap(), x);
}

#[test]
fn conv_matches_direct_reference() {
    let mut rng = Rng::new(2, 2);
    let spec = Conv3dSpec::cubic(2, 3, 3, 1, 1);
    let layer = Layer::<f32>::new("c", LayerSpec::Conv3d(spec.clone()), &mut rng).unwrap();
    let x = Tensor::<f32>::rand_normal(&[1, 2, 4, 4, 4], 0.0, 1.0, &mut rng).unwrap();
    let fast = conv3d_forward(&x, &layer.params()[0].value, &layer.params()[1].value, &spec).unwrap();
    let slow = conv3d_direct(&x, &layer.params()[0].value, &layer.params()[1].value, &spec).unwrap();
    assert!(fast.max_abs_diff(&slow).unwrap() < 1e-5);
}

#[test]
fn strided_grouped_conv_matches_reference() {
    let mut rng = Rng::new(3, 3);
    let spec = Conv3dSpec {
        in_channels: 4,
        out_channels: 6,
        kernel: [2, 3, 1],
        stride: [2, 1, 3],
        padding: [1, 0, 2],
        groups: 2,
    };
    let layer = Layer::<f64>::new("c", LayerSpec::Conv3d(spec.clone()), &mut rng).unwrap();
    let x = Tensor::<f64>::rand_normal(&[2, 4, 5, 6, 7], 0.0, 1.0, &mut rng).unwrap();
    let (w, b) = (&layer.params()[0].value, &layer.params()[1].value);
    let fast = conv3d_forward(&x, w, b, &spec).unwrap();
    let slow = conv3d_direct(&x, w, b, &spec).unwrap();
    assert_eq!(fast.shape(), slow.shape());
    assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);
}

#[test]
fn linear_weight_gradient_by_hand() {
    // x = [[1, 2], [3, 4]], loss = sum(y): dW[o][i] = sum_b x[b][i] = [4, 6] per row.
    let mut rng = Rng::new(0, 0);
    let mut layer =
        Layer::<f64>::new("fc", LayerSpec::Linear { in_features: 2, out_features: 2 }, &mut rng).unwrap();
    let x = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = layer.forward(&x, &mut ctx(&mut rng, true)).unwrap();
    layer.backward(&Tensor::new(y.shape(), 1.0).unwrap()).unwrap();
    assert_eq!(layer.params()[0].grad.data(), &[4.0, 6.0, 4.0, 6.0]);
    assert_eq!(layer.params()[1].grad.data(), &[2.0, 2.0]);
}

#[test]
fn relu_backward_subgradient() {
    let mut rng = Rng::new(0, 0);
    let mut layer = Layer::<f32>::new("r", LayerSpec::Relu, &mut rng).unwrap();
    let x = Tensor::from_vec(&[2], vec![-1.0, 2.0]).unwrap();
    layer.forward(&x, &mut ctx(&mut rng, true)).unwrap();
    let g = layer.backward(&Tensor::new(&[2], 1.0).unwrap()).unwrap();
    assert_eq!(g.data(), &[0.0, 1.0]);

    let x = Tensor::from_vec(&[3], vec![-3.0, 0.0, 5.0]).unwrap();
    let y = layer.forward(&x, &mut ctx(&mut rng, false)).unwrap();
    assert_eq!(y.data(), &[0.0, 0.0, 5.0]);
    let g = layer.backward(&Tensor::new(&[3], 1.0).unwrap()).unwrap();
    assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn backward_without_forward_is_state_error() {
    let mut rng = Rng::new(0, 0);
    let mut layer = Layer::<f32>::new("r", LayerSpec::Gelu, &mut rng).unwrap();
    let err = layer.backward(&Tensor::new(&[2], 1.0).unwrap()).unwrap_err();
    assert!(matches!(err.kind(), crate::ErrorKind::Data));
    assert!(err.to_string().contains("without a cached forward"));
}

#[test]
fn activation_values() {
    assert_eq!(sigmoid(0.0f64), 0.5);
    assert!((gelu(1.0f64) - 0.841_344_746).abs() < 1e-8);
    assert!(sigmoid(100.0f32) < 1.0);
    assert!(sigmoid(-200.0f32) > 0.0);
    assert!(sigmoid(40.0f64) < 1.0);
}

#[test]
fn nan_is_never_masked() {
    assert!(sigmoid(f32::NAN).is_nan());
    let mut rng = Rng::new(0, 0);
    for spec in [LayerSpec::Relu, LayerSpec::GlobalMaxPool] {
        let mut layer = Layer::<f32>::new("l", spec, &mut rng).unwrap();
        let x = Tensor::from_vec(&[1, 1, 1, 1, 3], vec![1.0, f32::NAN, -2.0]).unwrap();
        let y = layer.forward(&x, &mut ctx(&mut rng, false)).unwrap();
        assert!(!y.all_finite());
    }
}

#[test]
fn batchnorm_constant_channel_gives_shift() {
    let mut rng = Rng::new(0, 0);
    let mut layer = Layer::<f64>::new("bn", LayerSpec::Batchnorm3d { channels: 2 }, &mut rng).unwrap();
    layer.params_mut()[1].value = Tensor::from_vec(&[2], vec![0.25, -1.5]).unwrap();
    let x = Tensor::new(&[2, 2, 2, 2, 2], 3.0).unwrap();
    let y = layer.forward(&x, &mut ctx(&mut rng, true)).unwrap();
    for b in 0..2 {
        for c in 0..2 {
            let expect = [0.25, -1.5][c];
            for i in 0..8 {
                assert_eq!(y.data()[(b * 2 + c) * 8 + i], expect);
            }
        }
    }
}

#[test]
fn batchnorm_training_normalizes() {
    let mut rng = Rng::new(4, 4);
    let mut layer = Layer::<f64>::new("bn", LayerSpec::Batchnorm3d { channels: 3 }, &mut rng).unwrap();
    let x = Tensor::<f64>::rand_normal(&[2, 3, 3, 4, 5], 2.0, 3.0, &mut rng).unwrap();
    let y = layer.forward(&x, &mut ctx(&mut rng, true)).unwrap();
    let s = 60;
    for c in 0..3 {
        let vals: Vec<f64> = (0..2).flat_map(|b| y.data()[(b * 3 + c) * s..(b * 3 + c + 1) * s].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-3);
    }
    // running stats moved away from their initial values
    assert!(layer.buffers()[0].value.data().iter().all(|&m| m != 0.0));
}

#[test]
fn batchnorm_inference_is_pure() {
    let mut rng = Rng::new(5, 5);
    let mut layer = Layer::<f32>::new("bn", LayerSpec::Batchnorm3d { channels: 2 }, &mut rng).unwrap();
    let x = Tensor::<f32>::rand_normal(&[1, 2, 2, 3, 3], 0.0, 1.0, &mut rng).unwrap();
    layer.forward(&x, &mut ctx(&mut rng, true)).unwrap();
    let stats = layer.buffers()[0].value.clone();
    let a = layer.forward(&x, &mut ctx(&mut rng, false)).unwrap();
    let b = layer.forward(&x, &mut ctx(&mut rng, false)).unwrap();
    assert_eq!(a, b);
    assert_eq!(layer.buffers()[0].value, stats);
}

#[test]
fn batchnorm_rejects_singleton_batch_in_training() {
    let mut rng = Rng::new(0, 0);
    let mut layer = Layer::<f32>::new("bn", LayerSpec::Batchnorm3d { channels: 1 }, &mut rng).unwrap();
    let x = Tensor::new(&[1, 1, 1, 1, 1], 1.0).unwrap();
    let err = layer.forward(&x, &mut ctx(&mut rng, true)).unwrap_err();
    assert_eq!(err.kind(), crate::ErrorKind::Numeric);
    assert!(layer.forward(&x, &mut ctx(&mut rng, false)).is_ok());
}

#[test]
fn dropout_modes() {
    let mut rng = Rng::new(6, 6);
    let x = Tensor::<f32>::rand_normal(&[100], 0.0, 1.0, &mut rng).unwrap();
    let mut zero = Layer::<f32>::new("d", LayerSpec::Dropout { rate: 0.0 }, &mut rng).unwrap();
    assert_eq!(zero.forward(&x, &mut ctx(&mut rng, true)).unwrap(), x);
    assert_eq!(zero.forward(&x, &mut ctx(&mut rng, false)).unwrap(), x);
    let mut high = Layer::<f32>::new("d", LayerSpec::Dropout { rate: 0.7 }, &mut rng).unwrap();
    assert_eq!(high.forward(&x, &mut ctx(&mut rng, false)).unwrap(), x);
    assert!(Layer::<f32>::new("d", LayerSpec::Dropout { rate: 1.0 }, &mut rng).is_err());
}

#[test]
fn dropout_statistics() {
    let mut rng = Rng::new(7, 7);
    let mut layer = Layer::<f64>::new("d", LayerSpec::Dropout { rate: 0.7 }, &mut rng).unwrap();
    let x = Tensor::new(&[100_000], 1.0).unwrap();
    let y = layer.forward(&x, &mut ctx(&mut rng, true)).unwrap();
    let zeros = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
    assert!((y.mean() - 1.0).abs() < 0.02, "mean {}", y.mean());
    assert!((zeros - 0.7).abs() < 0.01, "zero fraction {zeros}");
}

#[test]
fn global_pool_examples() {
    let mut rng = Rng::new(0, 0);
    let mut maxp = Layer::<f64>::new("p", LayerSpec::GlobalMaxPool, &mut rng).unwrap();
    let mut avgp = Layer::<f64>::new("p", LayerSpec::GlobalAvgPool, &mut rng).unwrap();
    let c = Tensor::new(&[1, 1, 2, 3, 4], 2.5).unwrap();
    assert_eq!(maxp.forward(&c, &mut ctx(&mut rng, false)).unwrap().data(), &[2.5]);
    assert_eq!(avgp.forward(&c, &mut ctx(&mut rng, false)).unwrap().data(), &[2.5]);
    let mut one_hot = Tensor::zeros(&[1, 1, 2, 3, 4]).unwrap();
    one_hot.set(&[0, 0, 1, 2, 0], 9.0);
    assert_eq!(maxp.forward(&one_hot, &mut ctx(&mut rng, false)).unwrap().data(), &[9.0]);
    let avg = avgp.forward(&one_hot, &mut ctx(&mut rng, false)).unwrap().data()[0];
    assert!((avg - 9.0 / 24.0).abs() < 1e-15);
}

#[test]
fn global_pool_matches_scan() {
    let mut rng = Rng::new(8, 8);
    let x = Tensor::<f32>::rand_normal(&[2, 3, 2, 3, 4], 0.0, 1.0, &mut rng).unwrap();
    let mut maxp = Layer::<f32>::new("p", LayerSpec::GlobalMaxPool, &mut rng).unwrap();
    let y = maxp.forward(&x, &mut ctx(&mut rng, false)).unwrap();
    for (i, chunk) in x.data().chunks(24).enumerate() {
        let mut best = f32::NEG_INFINITY;
        for &v in chunk {
            if v > best {
                best = v;
            }
        }
        assert_eq!(y.data()[i], best);
    }
}

#[test]
fn layer_param_counts() {
    let conv = LayerSpec::Conv3d(Conv3dSpec::cubic(3, 16, 3, 1, 1));
    assert_eq!(count_layer_params(&conv), 1312);
    assert_eq!(count_layer_params(&LayerSpec::Linear { in_features: 64, out_features: 1 }), 65);
    assert_eq!(count_layer_params(&LayerSpec::Relu), 0);
    assert_eq!(count_layer_params(&LayerSpec::Batchnorm3d { channels: 8 }), 16);
    let dw = LayerSpec::Conv3d(Conv3dSpec::cubic(8, 8, 3, 1, 1).with_groups(8));
    assert_eq!(count_layer_params(&dw), 8 * 27 + 8);
}

#[test]
fn instantiated_params_match_closed_form() {
    let mut rng = Rng::new(0, 0);
    for spec in [
        LayerSpec::Conv3d(Conv3dSpec::cubic(4, 6, 3, 2, 1).with_groups(2)),
        LayerSpec::Linear { in_features: 7, out_features: 3 },
        LayerSpec::LayernormCh { channels: 5 },
        LayerSpec::Batchnorm3d { channels: 5 },
        LayerSpec::Sigmoid,
    ] {
        let layer = Layer::<f32>::new("l", spec.clone(), &mut rng).unwrap();
        let n: usize = layer.params().iter().map(|p| p.value.len()).sum();
        assert_eq!(n, count_layer_params(&spec));
    }
}

#[test]
fn layernorm_normalizes_over_channels() {
    let mut rng = Rng::new(9, 9);
    let mut layer = Layer::<f64>::new("ln", LayerSpec::LayernormCh { channels: 4 }, &mut rng).unwrap();
    let x = Tensor::<f64>::rand_normal(&[2, 4, 2, 2, 3], 1.0, 2.0, &mut rng).unwrap();
    let y = layer.forward(&x, &mut ctx(&mut rng, true)).unwrap();
    let s = 12;
    for b in 0..2 {
        for p in 0..s {
            let vals: Vec<f64> = (0..4).map(|c| y.data()[(b * 4 + c) * s + p]).collect();
            let mean = vals.iter().sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
        }
    }
}

fn away_from_zero(t: Tensor<f64>, margin: f64) -> Tensor<f64> {
    t.map(|v| if v.abs() < margin { v.signum() * margin + v } else { v })
}

#[test]
fn gradients_match_finite_differences_f64() {
    let mut rng = Rng::new(10, 10);
    let cases: Vec<(LayerSpec, Vec<usize>)> = vec![
        (LayerSpec::Conv3d(Conv3dSpec::cubic(2, 3, 3, 2, 1)), vec![2, 2, 4, 5, 3]),
        (LayerSpec::Conv3d(Conv3dSpec::cubic(4, 4, 3, 1, 1).with_groups(4)), vec![1, 4, 3, 3, 3]),
        (LayerSpec::Batchnorm3d { channels: 3 }, vec![2, 3, 2, 2, 2]),
        (LayerSpec::LayernormCh { channels: 3 }, vec![2, 3, 2, 1, 2]),
        (LayerSpec::Relu, vec![3, 4]),
        (LayerSpec::Gelu, vec![3, 4]),
        (LayerSpec::Sigmoid, vec![3, 4]),
        (LayerSpec::Dropout { rate: 0.5 }, vec![3, 4]),
        (LayerSpec::Linear { in_features: 5, out_features: 3 }, vec![4, 5]),
        (LayerSpec::GlobalMaxPool, vec![2, 3, 2, 2, 2]),
        (LayerSpec::GlobalAvgPool, vec![2, 3, 2, 2, 2]),
    ];
    for (i, (spec, shape)) in cases.into_iter().enumerate() {
        let mut layer = Layer::<f64>::new("l", spec.clone(), &mut rng).unwrap();
        let x = away_from_zero(Tensor::rand_normal(&shape, 0.0, 1.0, &mut rng).unwrap(), 1e-3);
        let report = check_layer(&mut layer, &x, true, i as u64, 1e-6).unwrap();
        assert!(report.max_error() < 1e-5, "{spec:?}: {:?}", report.entries);
    }
}

#[test]
fn two_channel_layernorm_matches_closed_form() {
    // With d = x0 - x1: xhat0 = (d/2) / sqrt(d^2/4 + eps) = -xhat1, so
    // dxhat0/dx0 = (eps/2) / (d^2/4 + eps)^(3/2).
    let mut rng = Rng::new(12, 1);
    for _ in 0..200 {
        let mut layer = Layer::<f64>::new("ln", LayerSpec::LayernormCh { channels: 2 }, &mut rng).unwrap();
        let x = Tensor::<f64>::rand_normal(&[1, 2, 1, 1, 1], 0.0, 1.0, &mut rng).unwrap();
        let r = Tensor::<f64>::rand_normal(&[1, 2, 1, 1, 1], 0.0, 1.0, &mut rng).unwrap();
        layer.forward(&x, &mut ctx(&mut rng, true)).unwrap();
        let dx = layer.backward(&r).unwrap();
        let g = layer.params()[0].value.data();
        let d = x.data()[0] - x.data()[1];
        let k = (LAYERNORM_EPS / 2.0) / (d * d / 4.0 + LAYERNORM_EPS).powf(1.5);
        let e0 = (r.data()[0] * g[0] - r.data()[1] * g[1]) * k;
        let err = (dx.data()[0] - e0).hypot(dx.data()[1] + e0) / (2.0f64.sqrt() * e0.abs());
        assert!(err < 1e-6, "relative error {err}");
    }
}

#[test]
fn batchnorm_inference_gradient() {
    let mut rng = Rng::new(11, 11);
    let mut layer = Layer::<f64>::new("bn", LayerSpec::Batchnorm3d { channels: 2 }, &mut rng).unwrap();
    layer.buffers_mut()[0].value = Tensor::from_vec(&[2], vec![0.3, -0.2]).unwrap();
    layer.buffers_mut()[1].value = Tensor::from_vec(&[2], vec![1.7, 0.4]).unwrap();
    let x = Tensor::rand_normal(&[1, 2, 2, 2, 2], 0.0, 1.0, &mut rng).unwrap();
    let report = check_layer(&mut layer, &x, false, 3, 1e-6).unwrap();
    assert!(report.max_error() < 1e-6, "{:?}", report.entries);
}
