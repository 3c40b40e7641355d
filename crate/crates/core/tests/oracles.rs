//! Production kernels against independent brute-force implementations on
//! randomized small instances.

#[path = "support/oracle.rs"]
mod oracle;

use defunet::autodiff::{GradMap, ParamId};
use defunet::data::dilate_mask;
use defunet::metrics::auc_roc;
use defunet::optim::{Adam, AdamConfig};
use defunet::tensor::{conv2d_with, ConvAlgo, ConvSpec};
use defunet::{Shape, Tensor};
use oracle::{bool_vec, conv_input, conv_spec, random};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: usize = 120;

#[test]
fn conv2d_matches_definition() {
    assert_eq!(oracle::check_conv_forward(INSTANCES), INSTANCES);
}

#[test]
fn conv2d_backward_is_the_adjoint() {
    oracle::check_conv_backward(INSTANCES);
}

#[test]
fn pooling_matches_definition() {
    oracle::check_pooling(INSTANCES);
}

#[test]
fn dilation_matches_definition() {
    oracle::check_dilation(INSTANCES);
}

#[test]
fn confusion_counts_match_definition() {
    oracle::check_confusion(INSTANCES);
}

#[test]
fn auc_matches_pairwise_count() {
    assert_eq!(oracle::check_auc(INSTANCES), INSTANCES);
}

#[test]
fn adam_follows_reference_recurrence() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = AdamConfig {
        lr: 0.01,
        ..Default::default()
    };
    let mut adam = Adam::<f64>::new(cfg);
    let id: ParamId = 0;
    let mut w = random(&mut rng, [1, 1, 2, 3]);
    let mut reference = w.data().to_vec();
    let (mut m, mut v) = (vec![0.0; 6], vec![0.0; 6]);
    for t in 1..=50 {
        let g = random(&mut rng, [1, 1, 2, 3]);
        let mut grads = GradMap::default();
        grads.insert(id, g.clone());
        adam.step([(id, &mut w)], &grads).unwrap();
        for k in 0..6 {
            m[k] = 0.9 * m[k] + 0.1 * g.data()[k];
            v[k] = 0.999 * v[k] + 0.001 * g.data()[k] * g.data()[k];
            let mh = m[k] / (1.0 - 0.9f64.powi(t));
            let vh = v[k] / (1.0 - 0.999f64.powi(t));
            reference[k] -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        for (got, want) in w.data().iter().zip(&reference) {
            assert!((got - want).abs() < 1e-12, "step {t}");
        }
    }
    assert_eq!(adam.steps(), 50);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn same_padding_output_is_ceil_of_input_over_stride(
        h in 1usize..20, w in 1usize..20, sh in 1usize..4, sw in 1usize..4,
        kh in 1usize..4, kw in 1usize..4, dh in 1usize..4, dw in 1usize..4,
    ) {
        let spec = ConvSpec::new(1, 1, (kh, kw)).stride(sh, sw).dilation(dh, dw);
        let out = spec.output_shape(Shape::new(1, 1, h, w)).unwrap();
        prop_assert_eq!((out.h, out.w), (h.div_ceil(sh), w.div_ceil(sw)));
    }

    #[test]
    fn conv_is_linear_in_the_input(seed in any::<u64>(), a in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = conv_spec(&mut rng, 1000);
        let x1 = conv_input(&mut rng, &spec);
        let x2 = random(&mut rng, x1.shape());
        let w = random(&mut rng, spec.weight_shape());
        let b = Tensor::zeros(Shape::vector(spec.out_channels));
        let mix = x1.zip_map(&x2, |p, q| a * p + q).unwrap();
        let lhs = conv2d_with(&mix, &w, &b, &spec, ConvAlgo::Im2col).unwrap();
        let y1 = conv2d_with(&x1, &w, &b, &spec, ConvAlgo::Im2col).unwrap();
        let y2 = conv2d_with(&x2, &w, &b, &spec, ConvAlgo::Im2col).unwrap();
        let rhs = y1.zip_map(&y2, |p, q| a * p + q).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn dilation_is_monotone_and_extensive(bits in proptest::collection::vec(any::<bool>(), 36), radius in 0usize..3) {
        let m = Tensor::<f32>::from_vec([1, 1, 6, 6], bits.iter().map(|&b| b as u8 as f32).collect()).unwrap();
        let d = dilate_mask(&m, radius, 1);
        for (a, b) in m.data().iter().zip(d.data()) {
            prop_assert!(b >= a);
            prop_assert!(*b == 0.0 || *b == 1.0);
        }
        let dd = dilate_mask(&d, radius, 1);
        prop_assert_eq!(dd, dilate_mask(&m, radius, 2));
    }

    #[test]
    fn auc_is_invariant_to_monotone_rescaling(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gt = bool_vec(&mut rng, 30, 0.5);
        gt[0] = true;
        gt[1] = false;
        let scores: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..1.0)).collect();
        let squashed: Vec<f64> = scores.iter().map(|s| s * s * 0.5 + 0.1).collect();
        prop_assert!((auc_roc(&gt, &scores).unwrap() - auc_roc(&gt, &squashed).unwrap()).abs() < 1e-12);
    }
}
