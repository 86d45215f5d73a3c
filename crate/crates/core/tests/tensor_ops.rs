use cfuseg::tensor::{
    batchnorm, concat, conv3x3, maxpool2, relu, softmax_channels, upsample2, Mode, Tensor,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;

use common::{conv_and_pool_oracle_sweep, conv_oracle, maxpool_oracle};

fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    common::random_tensor(shape, rng)
}

#[test]
fn conv_and_maxpool_match_loop_oracles() {
    let (worst, argmax_ok) = conv_and_pool_oracle_sweep(150, 1);
    assert!(worst < 1e-6, "max deviation {worst}");
    assert!(argmax_ok);
}

#[test]
fn f32_conv_stays_within_accumulation_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let x = random([2, 3, 7, 5], &mut rng);
        let k = random([4, 3, 3, 3], &mut rng);
        let b = random([4, 1, 1, 1], &mut rng);
        let got = conv3x3(&x, &k, &b).unwrap();
        for (g, e) in got.data().iter().zip(conv_oracle(&x, &k, &b)) {
            assert!((*g as f64 - e).abs() < 1e-5);
        }
    }
}

#[test]
fn conv_1x1x4x4_with_two_filters() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random([1, 1, 4, 4], &mut rng);
    let k = random([2, 1, 3, 3], &mut rng);
    let b = Tensor::zeros([2, 1, 1, 1]);
    let got = conv3x3(&x, &k, &b).unwrap();
    for (g, e) in got.data().iter().zip(conv_oracle(&x, &k, &b)) {
        assert!((*g as f64 - e).abs() < 1e-6);
    }
}

#[test]
fn maxpool_1x1x6x6_matches_window_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random([1, 1, 6, 6], &mut rng);
    let (y, argmax) = maxpool2(&x).unwrap();
    let (vals, idx) = maxpool_oracle(&x);
    assert_eq!(y.data(), &vals[..]);
    assert_eq!(argmax, idx);
}

#[test]
fn maxpool_picks_bottom_right_of_ascending_window() {
    let x = Tensor::new([1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
    let (y, argmax) = maxpool2(&x).unwrap();
    assert_eq!(y.data(), &[4.0]);
    assert_eq!(argmax, vec![3]);
    let c = Tensor::full([1, 2, 4, 6], 0.7f32);
    assert!(maxpool2(&c).unwrap().0.data().iter().all(|&v| v == 0.7));
}

#[test]
fn upsample_matches_index_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random([2, 3, 5, 4], &mut rng);
    let y = upsample2(&x);
    assert_eq!(y.shape(), [2, 3, 10, 8]);
    for s in 0..2 {
        for c in 0..3 {
            for yy in 0..10 {
                for xx in 0..8 {
                    assert_eq!(y.at(s, c, yy, xx), x.at(s, c, yy / 2, xx / 2));
                }
            }
        }
    }
}

#[test]
fn concat_rejects_spatial_mismatch() {
    let a = Tensor::<f32>::zeros([1, 2, 4, 4]);
    let b = Tensor::<f32>::zeros([1, 2, 4, 2]);
    assert!(concat(&a, &b).is_err());
}

#[test]
fn batchnorm_infer_uses_running_stats() {
    let x = Tensor::new([2, 1, 1, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
    let scale = Tensor::full([1, 1, 1, 1], 2.0f32);
    let shift = Tensor::full([1, 1, 1, 1], 0.5f32);
    let mut mean = Tensor::full([1, 1, 1, 1], 1.0f32);
    let mut var = Tensor::full([1, 1, 1, 1], 4.0f32);
    let (y, _) = batchnorm(&x, &scale, &shift, &mut mean, &mut var, Mode::Infer).unwrap();
    let denom = (4.0f32 + 1e-5).sqrt();
    for (a, v) in y.data().iter().zip([1.0f32, 2.0, 3.0, 4.0]) {
        assert!((a - (2.0 * (v - 1.0) / denom + 0.5)).abs() < 1e-6);
    }
    assert_eq!(mean.data(), &[1.0]);

    // Train mode moves the running stats towards the batch statistics.
    let (_, _) = batchnorm(&x, &scale, &shift, &mut mean, &mut var, Mode::Train).unwrap();
    assert!((mean.data()[0] - (0.9 * 1.0 + 0.1 * 2.5)).abs() < 1e-6);
    assert!((var.data()[0] - (0.9 * 4.0 + 0.1 * 1.25)).abs() < 1e-6);
}

fn shape_strategy() -> impl Strategy<Value = [usize; 4]> {
    (1usize..3, 1usize..4, 1usize..7, 1usize..7).prop_map(|(n, c, h, w)| [n, c, h, w])
}

fn tensor_strategy() -> impl Strategy<Value = Tensor<f32>> {
    shape_strategy().prop_flat_map(|shape| {
        let len: usize = shape.iter().product();
        prop::collection::vec(-10.0f32..10.0, len).prop_map(move |d| Tensor::new(shape, d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_is_linear(
        seed in any::<u64>(),
        alpha in -2.0f32..2.0,
        beta in -2.0f32..2.0,
        shape in shape_strategy(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(shape, &mut rng);
        let y = random(shape, &mut rng);
        let co = 2;
        let k = random([co, shape[1], 3, 3], &mut rng);
        let zero = Tensor::zeros([co, 1, 1, 1]);
        let mix = Tensor::new(shape, x.data().iter().zip(y.data()).map(|(a, b)| alpha * a + beta * b).collect()).unwrap();
        let lhs = conv3x3(&mix, &k, &zero).unwrap();
        let (cx, cy) = (conv3x3(&x, &k, &zero).unwrap(), conv3x3(&y, &k, &zero).unwrap());
        for ((l, a), b) in lhs.data().iter().zip(cx.data()).zip(cy.data()) {
            prop_assert!((l - (alpha * a + beta * b)).abs() < 1e-4);
        }
    }

    #[test]
    fn softmax_is_a_distribution(x in tensor_strategy()) {
        let p = softmax_channels(&x);
        let [n, c, h, w] = x.shape();
        for s in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let sum: f32 = (0..c).map(|ch| p.at(s, ch, y, xx)).sum();
                    prop_assert!((sum - 1.0).abs() < 1e-5);
                    prop_assert!((0..c).all(|ch| p.at(s, ch, y, xx) > 0.0));
                }
            }
        }
    }

    #[test]
    fn upsample_then_maxpool_is_identity(x in tensor_strategy()) {
        let (back, _) = maxpool2(&upsample2(&x)).unwrap();
        prop_assert_eq!(back, x);
    }

    #[test]
    fn forward_ops_keep_finite(x in tensor_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = x.shape()[1];
        let k = random([3, c, 3, 3], &mut rng);
        let b = random([3, 1, 1, 1], &mut rng);
        prop_assert!(conv3x3(&x, &k, &b).unwrap().is_finite());
        prop_assert!(relu(&x).is_finite());
        prop_assert!(softmax_channels(&x.map(|v| v * 100.0)).is_finite());
        let mut m = Tensor::zeros([c, 1, 1, 1]);
        let mut v = Tensor::full([c, 1, 1, 1], 1.0);
        let (y, _) = batchnorm(&x, &Tensor::full([c, 1, 1, 1], 1.0), &Tensor::zeros([c, 1, 1, 1]), &mut m, &mut v, Mode::Train).unwrap();
        prop_assert!(y.is_finite());
    }
}
