use super::{Element, Shape, Tensor};
use crate::error::{Axis, Error, Result};

pub const AVGPOOL_KERNEL: usize = 3;
pub const AVGPOOL_STRIDE: usize = 2;

/// 2x2 max pooling with stride 2.
///
/// Returns the pooled tensor and, per output element, the flat input index
/// of the winning value. Ties resolve to the first position in scan order.
pub fn maxpool2d<E: Element>(input: &Tensor<E>) -> Result<(Tensor<E>, Vec<usize>)> {
    let s = input.shape();
    if s.h % 2 != 0 {
        return Err(Error::dim("maxpool2d", Axis::Height, s.h + 1, s.h));
    }
    if s.w % 2 != 0 {
        return Err(Error::dim("maxpool2d", Axis::Width, s.w + 1, s.w));
    }
    let (oh, ow) = (s.h / 2, s.w / 2);
    let out_shape = Shape::new(s.n, s.c, oh, ow);
    let x = input.data();
    let mut out = Vec::with_capacity(out_shape.len());
    let mut indices = Vec::with_capacity(out_shape.len());
    for plane in 0..s.n * s.c {
        let base = plane * s.h * s.w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * s.w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * s.w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                indices.push(best);
            }
        }
    }
    Ok((Tensor::from_vec(out_shape, out)?, indices))
}

/// Routes each output gradient to the recorded argmax position.
pub fn maxpool2d_backward<E: Element>(input_shape: Shape, indices: &[usize], grad_out: &Tensor<E>) -> Tensor<E> {
    assert_eq!(indices.len(), grad_out.len(), "maxpool index count mismatch");
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in indices.iter().zip(grad_out.data()) {
        d[i] = d[i] + g;
    }
    dx
}

fn avg_geometry(extent: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = extent.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(extent);
    (out, total / 2)
}

/// Average pooling with `Same` zero padding. Border windows divide by the
/// full window size (padding counts toward the mean).
pub fn avgpool2d<E: Element>(input: &Tensor<E>, kernel: usize, stride: usize) -> Result<Tensor<E>> {
    if kernel == 0 || stride == 0 {
        return Err(Error::Config("avgpool2d kernel and stride must be >= 1".into()));
    }
    let s = input.shape();
    let (oh, pt) = avg_geometry(s.h, kernel, stride);
    let (ow, pl) = avg_geometry(s.w, kernel, stride);
    let norm = E::from_usize(kernel * kernel).expect("window size");
    let x = input.data();
    let out = Tensor::from_fn(Shape::new(s.n, s.c, oh, ow), |n, c, oy, ox| {
        let base = (n * s.c + c) * s.h * s.w;
        let mut acc = E::zero();
        for ky in 0..kernel {
            let iy = (oy * stride + ky) as isize - pt as isize;
            if iy < 0 || iy as usize >= s.h {
                continue;
            }
            for kx in 0..kernel {
                let ix = (ox * stride + kx) as isize - pl as isize;
                if ix < 0 || ix as usize >= s.w {
                    continue;
                }
                acc = acc + x[base + iy as usize * s.w + ix as usize];
            }
        }
        acc / norm
    });
    Ok(out)
}

pub fn avgpool2d_backward<E: Element>(
    input_shape: Shape,
    grad_out: &Tensor<E>,
    kernel: usize,
    stride: usize,
) -> Tensor<E> {
    let s = input_shape;
    let (oh, pt) = avg_geometry(s.h, kernel, stride);
    let (ow, pl) = avg_geometry(s.w, kernel, stride);
    assert_eq!(grad_out.shape(), Shape::new(s.n, s.c, oh, ow), "avgpool gradient shape");
    let norm = E::from_usize(kernel * kernel).expect("window size");
    let mut dx = Tensor::zeros(s);
    let d = dx.data_mut();
    let g = grad_out.data();
    for plane in 0..s.n * s.c {
        let base = plane * s.h * s.w;
        for oy in 0..oh {
            for ox in 0..ow {
                let share = g[(plane * oh + oy) * ow + ox] / norm;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - pt as isize;
                    if iy < 0 || iy as usize >= s.h {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - pl as isize;
                        if ix < 0 || ix as usize >= s.w {
                            continue;
                        }
                        let i = base + iy as usize * s.w + ix as usize;
                        d[i] = d[i] + share;
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_picks_window_max() {
        let x = Tensor::<f32>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, idx) = maxpool2d(&x).unwrap();
        assert_eq!(y.item(), 4.0);
        assert_eq!(idx, vec![3]);
    }

    #[test]
    fn maxpool_constant_input() {
        let x = Tensor::<f32>::full([2, 3, 4, 6], 2.5);
        let (y, idx) = maxpool2d(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 3, 2, 3));
        assert!(y.data().iter().all(|&v| v == 2.5));
        // ties go to the top-left element of each window
        assert_eq!(idx[0], 0);
        assert_eq!(idx[1], 2);
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let x = Tensor::<f32>::zeros([1, 1, 3, 4]);
        assert!(matches!(
            maxpool2d(&x).unwrap_err(),
            Error::Dimension { axis: Axis::Height, .. }
        ));
        let x = Tensor::<f32>::zeros([1, 1, 4, 5]);
        assert!(matches!(
            maxpool2d(&x).unwrap_err(),
            Error::Dimension { axis: Axis::Width, .. }
        ));
    }

    #[test]
    fn avgpool_constant_interior_and_zeros() {
        let x = Tensor::<f64>::full([1, 2, 6, 6], 3.0);
        let y = avgpool2d(&x, 3, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 3, 3));
        // output (1,1) reads rows 2..=4, cols 2..=4: fully interior
        assert_eq!(y.at(0, 0, 1, 1), 3.0);
        // bottom-right window overhangs the border by one row and column
        assert_eq!(y.at(0, 0, 2, 2), 3.0 * 4.0 / 9.0);
        let z = avgpool2d(&Tensor::<f64>::zeros([1, 1, 5, 5]), 3, 2).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn avgpool_odd_input_size() {
        let y = avgpool2d(&Tensor::<f32>::ones([1, 1, 5, 7]), 3, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 3, 4));
    }
}
