use super::{Element, Shape, Tensor};
use crate::error::{Axis, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running estimates.
    #[default]
    Train,
    /// Normalize with the running estimates.
    Eval,
}

/// Per-channel running mean and variance, each `(1, C, 1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<E> {
    pub mean: Tensor<E>,
    pub var: Tensor<E>,
}

impl<E: Element> RunningStats<E> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(Shape::vector(channels)),
            var: Tensor::ones(Shape::vector(channels)),
        }
    }
}

/// Values kept from the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormSaved<E> {
    pub normalized: Tensor<E>,
    pub inv_std: Vec<E>,
    pub mode: BnMode,
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads<E> {
    pub input: Tensor<E>,
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
}

fn check_vector<E: Element>(t: &Tensor<E>, channels: usize) -> Result<()> {
    if t.shape() != Shape::vector(channels) {
        return Err(Error::dim("batchnorm", Axis::Channel, channels, t.shape().c));
    }
    Ok(())
}

/// Per-channel batch normalization over the `N x H x W` axes.
///
/// Statistics are computed in two passes (mean, then biased variance) with
/// fixed-order accumulation. In train mode the running estimates move by
/// `momentum` toward the batch mean and the unbiased batch variance.
pub fn batchnorm<E: Element>(
    input: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    running: &mut RunningStats<E>,
    mode: BnMode,
    momentum: E,
    eps: E,
) -> Result<(Tensor<E>, BatchNormSaved<E>)> {
    let s = input.shape();
    check_vector(gamma, s.c)?;
    check_vector(beta, s.c)?;
    check_vector(&running.mean, s.c)?;
    check_vector(&running.var, s.c)?;

    let plane = s.plane();
    let count = s.n * plane;
    let count_e = E::from_usize(count).expect("count");
    let x = input.data();

    let mut mean = vec![E::zero(); s.c];
    let mut var = vec![E::zero(); s.c];
    match mode {
        BnMode::Train => {
            for c in 0..s.c {
                let mut acc = E::zero();
                for n in 0..s.n {
                    let off = (n * s.c + c) * plane;
                    acc = x[off..off + plane].iter().fold(acc, |a, &v| a + v);
                }
                let m = acc / count_e;
                let mut sq = E::zero();
                for n in 0..s.n {
                    let off = (n * s.c + c) * plane;
                    sq = x[off..off + plane].iter().fold(sq, |a, &v| a + (v - m) * (v - m));
                }
                mean[c] = m;
                var[c] = sq / count_e;
            }
            let one = E::one();
            for c in 0..s.c {
                let unbiased = if count > 1 {
                    var[c] * count_e / (count_e - one)
                } else {
                    var[c]
                };
                let rm = &mut running.mean.data_mut()[c];
                *rm = (one - momentum) * *rm + momentum * mean[c];
                let rv = &mut running.var.data_mut()[c];
                *rv = (one - momentum) * *rv + momentum * unbiased;
            }
        }
        BnMode::Eval => {
            mean.copy_from_slice(running.mean.data());
            var.copy_from_slice(running.var.data());
        }
    }

    let inv_std: Vec<E> = var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
    let normalized = Tensor::from_fn(s, |n, c, h, w| {
        (x[((n * s.c + c) * s.h + h) * s.w + w] - mean[c]) * inv_std[c]
    });
    let g = gamma.data();
    let b = beta.data();
    let mut out = normalized.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let off = (n * s.c + c) * plane;
            out.data_mut()[off..off + plane]
                .iter_mut()
                .for_each(|v| *v = g[c] * *v + b[c]);
        }
    }
    Ok((
        out,
        BatchNormSaved {
            normalized,
            inv_std,
            mode,
        },
    ))
}

/// Backward pass. In train mode the gradient flows through the batch
/// mean and variance; in eval mode the statistics are constants.
pub fn batchnorm_backward<E: Element>(
    grad_out: &Tensor<E>,
    gamma: &Tensor<E>,
    saved: &BatchNormSaved<E>,
) -> BatchNormGrads<E> {
    let s = grad_out.shape();
    assert_eq!(s, saved.normalized.shape(), "batchnorm gradient shape");
    let plane = s.plane();
    let count_e = E::from_usize(s.n * plane).expect("count");
    let dy = grad_out.data();
    let xh = saved.normalized.data();
    let g = gamma.data();

    let mut d_gamma = vec![E::zero(); s.c];
    let mut d_beta = vec![E::zero(); s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let off = (n * s.c + c) * plane;
            for i in off..off + plane {
                d_beta[c] = d_beta[c] + dy[i];
                d_gamma[c] = d_gamma[c] + dy[i] * xh[i];
            }
        }
    }

    let mut dx = Tensor::zeros(s);
    let d = dx.data_mut();
    for n in 0..s.n {
        for c in 0..s.c {
            let off = (n * s.c + c) * plane;
            let k = g[c] * saved.inv_std[c];
            match saved.mode {
                BnMode::Train => {
                    let scale = k / count_e;
                    for i in off..off + plane {
                        d[i] = scale * (count_e * dy[i] - d_beta[c] - xh[i] * d_gamma[c]);
                    }
                }
                BnMode::Eval => {
                    for i in off..off + plane {
                        d[i] = k * dy[i];
                    }
                }
            }
        }
    }
    BatchNormGrads {
        input: dx,
        gamma: Tensor::from_vec(Shape::vector(s.c), d_gamma).expect("vector"),
        beta: Tensor::from_vec(Shape::vector(s.c), d_beta).expect("vector"),
    }
}
