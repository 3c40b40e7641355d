//! Brute-force reference implementations and randomized comparisons
//! against the production kernels. Each check panics on the first
//! mismatch and returns the number of instances compared.

use defunet::data::dilate_mask;
use defunet::metrics::{auc_roc, confusion_metrics, ConfusionCounts};
use defunet::tensor::{avgpool2d, conv2d_backward, conv2d_with, maxpool2d, ConvAlgo, ConvSpec, Padding};
use defunet::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(rng: &mut ChaCha8Rng, shape: impl Into<Shape>) -> Tensor<f64> {
    let shape = shape.into();
    Tensor::from_vec(shape, (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Zero-padded cross-correlation written straight from the definition.
pub fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, spec: &ConvSpec) -> Tensor<f64> {
    let s = x.shape();
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (dh, dw) = spec.dilation;
    let eh = dh * (kh - 1) + 1;
    let ew = dw * (kw - 1) + 1;
    let (oh, ow, pt, pl) = match spec.padding {
        Padding::Same => {
            let oh = s.h.div_ceil(sh);
            let ow = s.w.div_ceil(sw);
            let th = ((oh - 1) * sh + eh).saturating_sub(s.h);
            let tw = ((ow - 1) * sw + ew).saturating_sub(s.w);
            (oh, ow, th / 2, tw / 2)
        }
        Padding::Valid => ((s.h - eh) / sh + 1, (s.w - ew) / sw + 1, 0, 0),
    };
    let mut out = Tensor::zeros([s.n, spec.out_channels, oh, ow]);
    for n in 0..s.n {
        for o in 0..spec.out_channels {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.data()[o];
                    for c in 0..s.c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * sh + i * dh) as i64 - pt as i64;
                                let ix = (xx * sw + j * dw) as i64 - pl as i64;
                                if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                                    acc += w.at(o, c, i, j) * x.at(n, c, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out.set(n, o, y, xx, acc);
                }
            }
        }
    }
    out
}

/// The specs the network uses, plus random ones.
pub fn conv_spec(rng: &mut ChaCha8Rng, i: usize) -> ConvSpec {
    let cin = rng.random_range(1..4);
    let cout = rng.random_range(1..4);
    let fixed = [
        ConvSpec::new(cin, cout, (3, 3)),
        ConvSpec::new(cin, cout, (1, 1)),
        ConvSpec::new(cin, cout, (1, 1)).stride(2, 2),
        ConvSpec::new(cin, cout, (3, 3)).stride(2, 2),
        ConvSpec::new(cin, cout, (3, 3)).stride(2, 2).dilation(3, 1),
        ConvSpec::new(cin, cout, (3, 3)).stride(2, 2).dilation(1, 2),
    ];
    if i < fixed.len() * 8 {
        return fixed[i % fixed.len()];
    }
    let mut spec = ConvSpec::new(cin, cout, (rng.random_range(1..4), rng.random_range(1..4)))
        .stride(rng.random_range(1..3), rng.random_range(1..3))
        .dilation(rng.random_range(1..4), rng.random_range(1..4));
    if rng.random_bool(0.25) {
        spec = spec.padding(Padding::Valid);
    }
    spec
}

pub fn conv_input(rng: &mut ChaCha8Rng, spec: &ConvSpec) -> Tensor<f64> {
    let (eh, ew) = spec.effective_kernel();
    let h = rng.random_range(eh.max(2)..eh.max(2) + 6);
    let w = rng.random_range(ew.max(2)..ew.max(2) + 6);
    let n = rng.random_range(1..3);
    random(rng, [n, spec.in_channels, h, w])
}

pub fn check_conv_forward(instances: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..instances {
        let spec = conv_spec(&mut rng, i);
        let x = conv_input(&mut rng, &spec);
        let w = random(&mut rng, spec.weight_shape());
        let b = random(&mut rng, Shape::vector(spec.out_channels));
        let want = conv_oracle(&x, &w, &b, &spec);
        for algo in [ConvAlgo::Im2col, ConvAlgo::Direct] {
            let got = conv2d_with(&x, &w, &b, &spec, algo).unwrap();
            assert_eq!(got.shape(), want.shape(), "{spec:?}");
            assert!(got.max_abs_diff(&want) < 1e-12, "{spec:?} {algo:?}");
        }
        let got32 = conv2d_with(&x.cast::<f32>(), &w.cast(), &b.cast(), &spec, ConvAlgo::Im2col).unwrap();
        assert!(got32.cast::<f64>().max_abs_diff(&want) < 1e-4, "{spec:?} f32");
    }
    instances
}

pub fn check_conv_backward(instances: usize) -> usize {
    // <conv(x), g> is linear in x and in w, so its gradients can be read
    // off by probing the oracle with unit tensors.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..instances {
        let spec = conv_spec(&mut rng, i);
        let x = conv_input(&mut rng, &spec);
        let w = random(&mut rng, spec.weight_shape());
        let zero_b = Tensor::zeros(Shape::vector(spec.out_channels));
        let out_shape = spec.output_shape(x.shape()).unwrap();
        let g = random(&mut rng, out_shape);
        let grads = conv2d_backward(&x, &w, &g, &spec).unwrap();
        let dot = |a: &Tensor<f64>| a.data().iter().zip(g.data()).map(|(p, q)| p * q).sum::<f64>();
        for k in 0..x.len() {
            let mut e = Tensor::zeros(x.shape());
            e.data_mut()[k] = 1.0;
            let want = dot(&conv_oracle(&e, &w, &zero_b, &spec));
            assert!((grads.input.data()[k] - want).abs() < 1e-12, "{spec:?} dx[{k}]");
        }
        for k in 0..w.len() {
            let mut e = Tensor::zeros(w.shape());
            e.data_mut()[k] = 1.0;
            let want = dot(&conv_oracle(&x, &e, &zero_b, &spec));
            assert!((grads.weight.data()[k] - want).abs() < 1e-12, "{spec:?} dw[{k}]");
        }
        for o in 0..spec.out_channels {
            let want: f64 = (0..out_shape.n)
                .flat_map(|n| (0..out_shape.h).flat_map(move |y| (0..out_shape.w).map(move |xx| (n, y, xx))))
                .map(|(n, y, xx)| g.at(n, o, y, xx))
                .sum();
            assert!((grads.bias.data()[o] - want).abs() < 1e-12);
        }
    }
    instances
}

pub fn check_pooling(instances: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..instances {
        let (n, c) = (rng.random_range(1..3), rng.random_range(1..3));
        let (h, w) = (2 * rng.random_range(1..5), 2 * rng.random_range(1..5));
        let x = random(&mut rng, [n, c, h, w]);
        let (mp, idx) = maxpool2d(&x).unwrap();
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h / 2 {
                    for xx in 0..w / 2 {
                        let cands =
                            [(0, 0), (0, 1), (1, 0), (1, 1)].map(|(dy, dx)| x.at(b, ch, 2 * y + dy, 2 * xx + dx));
                        let m = cands.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        assert_eq!(mp.at(b, ch, y, xx), m);
                        assert_eq!(x.data()[idx[mp.shape().index(b, ch, y, xx)]], m);
                    }
                }
            }
        }

        let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
        let x = random(&mut rng, [n, c, h, w]);
        let ap = avgpool2d(&x, 3, 2).unwrap();
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        assert_eq!(ap.shape(), Shape::new(n, c, oh, ow));
        let pt = ((oh - 1) * 2 + 3).saturating_sub(h) / 2;
        let pl = ((ow - 1) * 2 + 3).saturating_sub(w) / 2;
        for b in 0..n {
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for i in 0..3 {
                            for j in 0..3 {
                                let (iy, ix) = ((y * 2 + i) as i64 - pt as i64, (xx * 2 + j) as i64 - pl as i64);
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x.at(b, ch, iy as usize, ix as usize);
                                }
                            }
                        }
                        assert!((ap.at(b, ch, y, xx) - acc / 9.0).abs() < 1e-12);
                    }
                }
            }
        }
    }
    instances
}

pub fn check_dilation(instances: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..instances {
        let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
        let m = Tensor::<f32>::from_fn([1, 1, h, w], |_, _, _, _| if rng.random_bool(0.15) { 1.0 } else { 0.0 });
        let radius = rng.random_range(0..3);
        let iterations = rng.random_range(0..3);
        let got = dilate_mask(&m, radius, iterations);
        // k passes of a (2r+1) square = one pass of a (2kr+1) square.
        let reach = (radius * iterations) as i64;
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut hit = false;
                for yy in (y - reach).max(0)..=(y + reach).min(h as i64 - 1) {
                    for xx in (x - reach).max(0)..=(x + reach).min(w as i64 - 1) {
                        hit |= m.at(0, 0, yy as usize, xx as usize) == 1.0;
                    }
                }
                assert_eq!(got.at(0, 0, y as usize, x as usize), if hit { 1.0 } else { 0.0 });
            }
        }
    }
    instances
}

pub fn bool_vec(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<bool> {
    (0..n).map(|_| rng.random_bool(p)).collect()
}

pub fn check_confusion(instances: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..instances {
        let n = rng.random_range(1..60);
        let p = rng.random_range(0.0..1.0);
        let gt = bool_vec(&mut rng, n, p);
        let probs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let thr = rng.random_range(0.1..0.9);
        let s = confusion_metrics(&gt, &probs, thr).unwrap();
        let mut c = ConfusionCounts::default();
        for i in 0..n {
            let p = probs[i] >= thr;
            c.tp += (gt[i] && p) as u64;
            c.tn += (!gt[i] && !p) as u64;
            c.fp += (!gt[i] && p) as u64;
            c.fn_ += (gt[i] && !p) as u64;
        }
        assert_eq!(s.counts, c);
        assert!((s.accuracy - (c.tp + c.tn) as f64 / n as f64).abs() < 1e-12);
        if c.tp + c.fp > 0 {
            assert!((s.precision - c.tp as f64 / (c.tp + c.fp) as f64).abs() < 1e-12);
        }
        if c.tp + c.fn_ > 0 {
            assert!((s.recall - c.tp as f64 / (c.tp + c.fn_) as f64).abs() < 1e-12);
        }
        if c.tp > 0 {
            let f1 = 2.0 * c.tp as f64 / (2 * c.tp + c.fp + c.fn_) as f64;
            assert!((s.f1 - f1).abs() < 1e-12);
        }
    }
    instances
}

/// Probability that a random positive outscores a random negative, ties
/// counting half: every pair enumerated.
pub fn auc_oracle(gt: &[bool], scores: &[f64]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &gi) in gt.iter().enumerate() {
        for (j, &gj) in gt.iter().enumerate() {
            if gi && !gj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// AUC against [`auc_oracle`]; degenerate labels must be rejected.
pub fn check_auc(instances: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut checked = 0;
    while checked < instances {
        let n = rng.random_range(2..50);
        let gt = bool_vec(&mut rng, n, 0.4);
        if gt.iter().all(|&g| g) || gt.iter().all(|&g| !g) {
            assert!(auc_roc(&gt, &vec![0.5; n]).is_err());
            continue;
        }
        // Coarse scores force plenty of ties.
        let levels = rng.random_range(2..8);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
            .collect();
        let got = auc_roc(&gt, &scores).unwrap();
        assert!((got - auc_oracle(&gt, &scores)).abs() < 1e-12);
        checked += 1;
    }
    checked
}
