use super::{Element, Shape, Tensor};
use crate::error::{Axis, Error, Result};

/// Negative-side slope used when none is configured.
pub const LEAKY_RELU_ALPHA: f64 = 0.01;

/// Elementwise sum. Shapes must be identical; there is no broadcasting.
pub fn add<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (sa, sb) = (a.shape(), b.shape());
    for (axis, x, y) in [
        (Axis::Batch, sa.n, sb.n),
        (Axis::Channel, sa.c, sb.c),
        (Axis::Height, sa.h, sb.h),
        (Axis::Width, sa.w, sb.w),
    ] {
        if x != y {
            return Err(Error::dim("add", axis, x, y));
        }
    }
    a.zip_map(b, |x, y| x + y)
}

pub fn leaky_relu<E: Element>(input: &Tensor<E>, alpha: E) -> Tensor<E> {
    input.map(|v| if v > E::zero() { v } else { alpha * v })
}

pub fn leaky_relu_backward<E: Element>(input: &Tensor<E>, grad_out: &Tensor<E>, alpha: E) -> Tensor<E> {
    input
        .zip_map(grad_out, |x, g| if x > E::zero() { g } else { alpha * g })
        .expect("leaky_relu gradient shape")
}

#[inline]
fn sigmoid_scalar<E: Element>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid<E: Element>(input: &Tensor<E>) -> Tensor<E> {
    input.map(sigmoid_scalar)
}

/// Backward from the saved forward output `y`: `dy * y * (1 - y)`.
pub fn sigmoid_backward<E: Element>(output: &Tensor<E>, grad_out: &Tensor<E>) -> Tensor<E> {
    output
        .zip_map(grad_out, |y, g| g * y * (E::one() - y))
        .expect("sigmoid gradient shape")
}

/// Nearest-neighbour 2x upsampling: each element becomes a 2x2 block.
pub fn upsample_nearest2x<E: Element>(input: &Tensor<E>) -> Tensor<E> {
    let s = input.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, s.h * 2, s.w * 2), |n, c, h, w| {
        input.at(n, c, h / 2, w / 2)
    })
}

pub fn upsample_nearest2x_backward<E: Element>(grad_out: &Tensor<E>) -> Tensor<E> {
    let s = grad_out.shape();
    assert!(s.h % 2 == 0 && s.w % 2 == 0, "upsample gradient must have even extent");
    Tensor::from_fn(Shape::new(s.n, s.c, s.h / 2, s.w / 2), |n, c, h, w| {
        grad_out.at(n, c, 2 * h, 2 * w)
            + grad_out.at(n, c, 2 * h, 2 * w + 1)
            + grad_out.at(n, c, 2 * h + 1, 2 * w)
            + grad_out.at(n, c, 2 * h + 1, 2 * w + 1)
    })
}

/// Concatenates along the channel axis, preserving part order.
pub fn concat_channels<E: Element>(parts: &[&Tensor<E>]) -> Result<Tensor<E>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat_channels", "no tensors to concatenate"))?
        .shape();
    let mut channels = 0;
    for p in parts {
        let s = p.shape();
        for (axis, x, y) in [
            (Axis::Batch, first.n, s.n),
            (Axis::Height, first.h, s.h),
            (Axis::Width, first.w, s.w),
        ] {
            if x != y {
                return Err(Error::dim("concat_channels", axis, x, y));
            }
        }
        channels += s.c;
    }
    let out_shape = Shape::new(first.n, channels, first.h, first.w);
    let mut data = Vec::with_capacity(out_shape.len());
    for n in 0..first.n {
        for p in parts {
            data.extend_from_slice(p.batch_item(n));
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Inverse of [`concat_channels`]: splits into parts with the given
/// channel counts.
pub fn split_channels<E: Element>(input: &Tensor<E>, channels: &[usize]) -> Result<Vec<Tensor<E>>> {
    let s = input.shape();
    let total: usize = channels.iter().sum();
    if total != s.c {
        return Err(Error::dim("split_channels", Axis::Channel, total, s.c));
    }
    let plane = s.plane();
    let mut parts: Vec<Vec<E>> = channels.iter().map(|&c| Vec::with_capacity(s.n * c * plane)).collect();
    for n in 0..s.n {
        let item = input.batch_item(n);
        let mut off = 0;
        for (part, &c) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&item[off * plane..(off + c) * plane]);
            off += c;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(data, &c)| Tensor::from_vec(Shape::new(s.n, c, s.h, s.w), data))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_zeros_and_self() {
        let a = Tensor::<f32>::from_fn([1, 2, 3, 3], |_, c, h, w| (c * 9 + h * 3 + w) as f32 - 5.0);
        assert_eq!(add(&a, &Tensor::zeros(a.shape())).unwrap(), a);
        assert_eq!(add(&a, &a).unwrap(), a.scale(2.0));
    }

    #[test]
    fn add_rejects_mismatch() {
        let a = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let b = Tensor::<f32>::zeros([1, 3, 4, 4]);
        assert!(matches!(
            add(&a, &b).unwrap_err(),
            Error::Dimension {
                axis: Axis::Channel,
                expected: 2,
                actual: 3,
                ..
            }
        ));
    }

    #[test]
    fn leaky_relu_values() {
        let x = Tensor::<f64>::from_vec([1, 1, 1, 3], vec![1.0, -2.0, 0.0]).unwrap();
        let y = leaky_relu(&x, 0.01);
        assert_eq!(y.data()[0], 1.0);
        assert!((y.data()[1] + 0.02).abs() < 1e-15);
        assert_eq!(y.data()[2], 0.0);
    }

    #[test]
    fn sigmoid_saturates_without_overflow() {
        let x = Tensor::<f64>::from_vec([1, 1, 1, 4], vec![0.0, 40.0, -800.0, 800.0]).unwrap();
        let y = sigmoid(&x);
        assert_eq!(y.data()[0], 0.5);
        assert!((y.data()[1] - 1.0).abs() < 1e-12);
        assert_eq!(y.data()[2], 0.0);
        assert_eq!(y.data()[3], 1.0);
        assert!(y.all_finite());
    }

    #[test]
    fn upsample_single_value() {
        let x = Tensor::<f32>::scalar(7.0);
        let y = upsample_nearest2x(&x);
        assert_eq!(y, Tensor::full([1, 1, 2, 2], 7.0));
        assert_eq!(
            upsample_nearest2x(&Tensor::<f32>::zeros([2, 3, 4, 4])).shape(),
            Shape::new(2, 3, 8, 8)
        );
    }

    #[test]
    fn concat_shapes_and_errors() {
        let a = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let b = Tensor::<f32>::ones([1, 3, 4, 4]);
        assert_eq!(concat_channels(&[&a, &b]).unwrap().shape(), Shape::new(1, 5, 4, 4));
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
        let c = Tensor::<f32>::zeros([1, 1, 4, 2]);
        assert!(matches!(
            concat_channels(&[&a, &c]).unwrap_err(),
            Error::Dimension { axis: Axis::Width, .. }
        ));
    }
}
