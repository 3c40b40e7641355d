//! 2-D cross-correlation with per-axis stride and dilation.
//!
//! Two forward paths exist: [`ConvAlgo::Direct`] loops over every tap, and
//! [`ConvAlgo::Im2col`] lowers each batch item to a patch matrix and runs one
//! matrix product. In `f64` the patch path accumulates in the same order as
//! the direct loops and the two agree bit-for-bit.

use super::{Element, Shape, Tensor};
use crate::error::{Axis, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    /// Zero padding; output extent is `ceil(input / stride)`, odd leftover
    /// padding goes to the bottom/right.
    #[default]
    Same,
    /// No padding; the dilated kernel must fit inside the input.
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvAlgo {
    Direct,
    #[default]
    Im2col,
}

/// Spatial extent covered by a kernel of `kernel` taps spaced `dilation`
/// apart: `(dilation - 1) * (kernel - 1) + kernel`.
pub const fn effective_extent(kernel: usize, dilation: usize) -> usize {
    (dilation - 1) * (kernel - 1) + kernel
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: Padding,
}

impl ConvSpec {
    /// Stride 1, no dilation, `Same` padding.
    pub fn new(in_channels: usize, out_channels: usize, kernel: (usize, usize)) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: (1, 1),
            dilation: (1, 1),
            padding: Padding::Same,
        }
    }

    pub fn stride(mut self, sh: usize, sw: usize) -> Self {
        self.stride = (sh, sw);
        self
    }

    pub fn dilation(mut self, dh: usize, dw: usize) -> Self {
        self.dilation = (dh, dw);
        self
    }

    pub fn padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_channels, self.kernel.0, self.kernel.1)
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().len() + self.out_channels
    }

    /// Effective (dilated) kernel extent as `(height, width)`.
    pub fn effective_kernel(&self) -> (usize, usize) {
        (
            effective_extent(self.kernel.0, self.dilation.0),
            effective_extent(self.kernel.1, self.dilation.1),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.in_channels >= 1
            && self.out_channels >= 1
            && self.kernel.0 >= 1
            && self.kernel.1 >= 1
            && self.stride.0 >= 1
            && self.stride.1 >= 1
            && self.dilation.0 >= 1
            && self.dilation.1 >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid convolution spec {self:?}")))
        }
    }

    fn axis_geometry(
        &self,
        input: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        axis: Axis,
    ) -> Result<(usize, usize)> {
        let eff = effective_extent(kernel, dilation);
        match self.padding {
            Padding::Same => {
                let out = input.div_ceil(stride);
                let total = ((out - 1) * stride + eff).saturating_sub(input);
                Ok((out, total / 2))
            }
            Padding::Valid => {
                if input < eff {
                    return Err(Error::dim("conv2d", axis, eff, input));
                }
                Ok(((input - eff) / stride + 1, 0))
            }
        }
    }

    /// Output spatial size and leading (top, left) padding for an input of
    /// `h x w`.
    pub fn geometry(&self, h: usize, w: usize) -> Result<Geometry> {
        let (oh, pt) = self.axis_geometry(h, self.kernel.0, self.stride.0, self.dilation.0, Axis::Height)?;
        let (ow, pl) = self.axis_geometry(w, self.kernel.1, self.stride.1, self.dilation.1, Axis::Width)?;
        Ok(Geometry {
            in_h: h,
            in_w: w,
            out_h: oh,
            out_w: ow,
            pad_top: pt,
            pad_left: pl,
        })
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let g = self.geometry(input.h, input.w)?;
        Ok(Shape::new(input.n, self.out_channels, g.out_h, g.out_w))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl Geometry {
    /// Input coordinate read by output row `o` at kernel tap `k`, if inside.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, dilation: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * stride + k * dilation) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

fn check_operands<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    spec: &ConvSpec,
) -> Result<()> {
    spec.validate()?;
    let s = input.shape();
    if s.c != spec.in_channels {
        return Err(Error::dim("conv2d", Axis::Channel, spec.in_channels, s.c));
    }
    let ws = weight.shape();
    let expected = spec.weight_shape();
    for (axis, e, a) in [
        (Axis::Batch, expected.n, ws.n),
        (Axis::Channel, expected.c, ws.c),
        (Axis::Height, expected.h, ws.h),
        (Axis::Width, expected.w, ws.w),
    ] {
        if e != a {
            return Err(Error::Shape {
                op: "conv2d",
                message: format!("weight {axis} axis expected {e}, got {a}"),
            });
        }
    }
    if let Some(b) = bias {
        if b.shape() != Shape::vector(spec.out_channels) {
            return Err(Error::dim("conv2d", Axis::Channel, spec.out_channels, b.shape().c));
        }
    }
    Ok(())
}

/// Lowers one batch item to a `(C*kh*kw) x (out_h*out_w)` patch matrix.
fn im2col<E: Element>(x: &[E], channels: usize, spec: &ConvSpec, g: &Geometry, cols: &mut [E]) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (dh, dw) = spec.dilation;
    let p = g.out_h * g.out_w;
    let plane = g.in_h * g.in_w;
    for ci in 0..channels {
        let xc = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = Geometry::src(oy, ky, sh, dh, g.pad_top, g.in_h);
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    match iy {
                        None => line.iter_mut().for_each(|v| *v = E::zero()),
                        Some(iy) => {
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match Geometry::src(ox, kx, sw, dw, g.pad_left, g.in_w) {
                                    Some(ix) => xc[iy * g.in_w + ix],
                                    None => E::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch-matrix gradient back onto one batch item.
fn col2im<E: Element>(cols: &[E], channels: usize, spec: &ConvSpec, g: &Geometry, dx: &mut [E]) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (dh, dw) = spec.dilation;
    let p = g.out_h * g.out_w;
    let plane = g.in_h * g.in_w;
    for ci in 0..channels {
        let dxc = &mut dx[ci * plane..(ci + 1) * plane];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let Some(iy) = Geometry::src(oy, ky, sh, dh, g.pad_top, g.in_h) else {
                        continue;
                    };
                    for ox in 0..g.out_w {
                        if let Some(ix) = Geometry::src(ox, kx, sw, dw, g.pad_left, g.in_w) {
                            let d = &mut dxc[iy * g.in_w + ix];
                            *d = *d + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution using the default (patch-matrix) algorithm.
pub fn conv2d<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
    spec: &ConvSpec,
) -> Result<Tensor<E>> {
    conv2d_with(input, weight, bias, spec, ConvAlgo::Im2col)
}

pub fn conv2d_direct<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
    spec: &ConvSpec,
) -> Result<Tensor<E>> {
    conv2d_with(input, weight, bias, spec, ConvAlgo::Direct)
}

pub fn conv2d_with<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
    spec: &ConvSpec,
    algo: ConvAlgo,
) -> Result<Tensor<E>> {
    check_operands(input, weight, Some(bias), spec)?;
    let s = input.shape();
    let g = spec.geometry(s.h, s.w)?;
    let out_shape = Shape::new(s.n, spec.out_channels, g.out_h, g.out_w);
    let mut out = Tensor::zeros(out_shape);
    match algo {
        ConvAlgo::Direct => direct_forward(input, weight, bias, spec, &g, &mut out),
        ConvAlgo::Im2col => im2col_forward(input, weight, bias, spec, &g, &mut out),
    }
    Ok(out)
}

fn direct_forward<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
    spec: &ConvSpec,
    g: &Geometry,
    out: &mut Tensor<E>,
) {
    let s = input.shape();
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (dh, dw) = spec.dilation;
    let x = input.data();
    let wt = weight.data();
    let b = bias.data();
    let o = out.data_mut();
    let mut idx = 0;
    for n in 0..s.n {
        for oc in 0..spec.out_channels {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = E::zero();
                    for ci in 0..s.c {
                        for ky in 0..kh {
                            let Some(iy) = Geometry::src(oy, ky, sh, dh, g.pad_top, g.in_h) else {
                                continue;
                            };
                            for kx in 0..kw {
                                let Some(ix) = Geometry::src(ox, kx, sw, dw, g.pad_left, g.in_w) else {
                                    continue;
                                };
                                let xv = x[((n * s.c + ci) * s.h + iy) * s.w + ix];
                                let wv = wt[((oc * s.c + ci) * kh + ky) * kw + kx];
                                acc = acc + xv * wv;
                            }
                        }
                    }
                    o[idx] = acc + b[oc];
                    idx += 1;
                }
            }
        }
    }
}

fn im2col_forward<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
    spec: &ConvSpec,
    g: &Geometry,
    out: &mut Tensor<E>,
) {
    let s = input.shape();
    let k = s.c * spec.kernel.0 * spec.kernel.1;
    let p = g.out_h * g.out_w;
    let oc = spec.out_channels;
    let mut cols = if spec.is_pointwise() {
        Vec::new()
    } else {
        vec![E::zero(); k * p]
    };
    let b = bias.data();
    for n in 0..s.n {
        let x = input.batch_item(n);
        let patches: &[E] = if spec.is_pointwise() {
            x
        } else {
            im2col(x, s.c, spec, g, &mut cols);
            &cols
        };
        let dst = &mut out.data_mut()[n * oc * p..(n + 1) * oc * p];
        E::gemm(oc, k, p, weight.data(), k, 1, patches, p, 1, dst, p, false);
        for (row, &bv) in dst.chunks_mut(p).zip(b) {
            row.iter_mut().for_each(|v| *v = *v + bv);
        }
    }
}

/// Gradients of a convolution with respect to its three operands.
#[derive(Debug, Clone)]
pub struct ConvGrads<E> {
    pub input: Tensor<E>,
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

pub fn conv2d_backward<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    grad_out: &Tensor<E>,
    spec: &ConvSpec,
) -> Result<ConvGrads<E>> {
    check_operands(input, weight, None, spec)?;
    let s = input.shape();
    let g = spec.geometry(s.h, s.w)?;
    let expected = Shape::new(s.n, spec.out_channels, g.out_h, g.out_w);
    if grad_out.shape() != expected {
        return Err(Error::shape(
            "conv2d_backward",
            format!("gradient shape {} does not match output {}", grad_out.shape(), expected),
        ));
    }
    let k = s.c * spec.kernel.0 * spec.kernel.1;
    let p = g.out_h * g.out_w;
    let oc = spec.out_channels;
    let pointwise = spec.is_pointwise();

    let mut d_input = Tensor::zeros(s);
    let mut d_weight = Tensor::zeros(weight.shape());
    let mut d_bias = Tensor::zeros(Shape::vector(oc));
    let mut cols = if pointwise { Vec::new() } else { vec![E::zero(); k * p] };
    let mut d_cols = if pointwise { Vec::new() } else { vec![E::zero(); k * p] };
    let item = s.c * s.h * s.w;

    for n in 0..s.n {
        let x = input.batch_item(n);
        let dy = grad_out.batch_item(n);

        for (db, row) in d_bias.data_mut().iter_mut().zip(dy.chunks(p)) {
            *db = row.iter().fold(*db, |acc, &v| acc + v);
        }

        let patches: &[E] = if pointwise {
            x
        } else {
            im2col(x, s.c, spec, &g, &mut cols);
            &cols
        };
        // dW (oc x k) += dY (oc x p) * patches^T (p x k)
        E::gemm(oc, p, k, dy, p, 1, patches, 1, p, d_weight.data_mut(), k, true);

        let dx = &mut d_input.data_mut()[n * item..(n + 1) * item];
        if pointwise {
            // dX (k x p) = W^T (k x oc) * dY (oc x p)
            E::gemm(k, oc, p, weight.data(), 1, k, dy, p, 1, dx, p, false);
        } else {
            E::gemm(k, oc, p, weight.data(), 1, k, dy, p, 1, &mut d_cols, p, false);
            col2im(&d_cols, s.c, spec, &g, dx);
        }
    }
    Ok(ConvGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_output_is_ceil() {
        let spec = ConvSpec::new(1, 1, (3, 3)).stride(2, 2);
        let g = spec.geometry(7, 8).unwrap();
        assert_eq!((g.out_h, g.out_w), (4, 4));
        // total padding along height: (4-1)*2 + 3 - 7 = 2 → 1 before, 1 after
        assert_eq!(g.pad_top, 1);
        // along width: (4-1)*2 + 3 - 8 = 1 → 0 before, 1 after
        assert_eq!(g.pad_left, 0);
    }

    #[test]
    fn valid_padding_rejects_small_input() {
        let spec = ConvSpec::new(1, 1, (3, 3)).dilation(3, 1).padding(Padding::Valid);
        let err = spec.geometry(6, 3).unwrap_err();
        assert!(matches!(
            err,
            Error::Dimension {
                axis: Axis::Height,
                expected: 7,
                actual: 6,
                ..
            }
        ));
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = Tensor::<f32>::from_fn([2, 3, 4, 5], |n, c, h, w| (n + c * 7 + h * 3 + w) as f32 * 0.1);
        let spec = ConvSpec::new(3, 3, (1, 1));
        let w = Tensor::from_fn(spec.weight_shape(), |o, i, _, _| if o == i { 1.0 } else { 0.0 });
        let b = Tensor::zeros(Shape::vector(3));
        assert_eq!(conv2d(&x, &w, &b, &spec).unwrap(), x);
        assert_eq!(conv2d_direct(&x, &w, &b, &spec).unwrap(), x);
    }

    #[test]
    fn dilated_kernel_covers_exact_effective_input() {
        let x = Tensor::<f64>::ones([1, 1, 7, 3]);
        let spec = ConvSpec::new(1, 1, (3, 3)).dilation(3, 1).padding(Padding::Valid);
        let w = Tensor::ones(spec.weight_shape());
        let b = Tensor::zeros(Shape::vector(1));
        let y = conv2d(&x, &w, &b, &spec).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn channel_mismatch_names_axis() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let spec = ConvSpec::new(3, 1, (3, 3));
        let w = Tensor::zeros(spec.weight_shape());
        let b = Tensor::zeros(Shape::vector(1));
        let err = conv2d(&x, &w, &b, &spec).unwrap_err();
        assert!(matches!(
            err,
            Error::Dimension {
                axis: Axis::Channel,
                expected: 3,
                actual: 2,
                ..
            }
        ));
        assert!(err.to_string().contains("channel"));
    }

    #[test]
    fn bad_weight_shape_is_rejected() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let spec = ConvSpec::new(2, 1, (3, 3));
        let w = Tensor::zeros([1, 2, 3, 1]);
        let b = Tensor::zeros(Shape::vector(1));
        assert!(conv2d(&x, &w, &b, &spec).is_err());
    }
}
