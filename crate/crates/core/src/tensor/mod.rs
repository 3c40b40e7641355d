//! Dense 4-D tensors in batch-channel-height-width layout and the forward
//! numeric primitives built on them.
//!
//! Every value flowing through the network is a [`Tensor`]. Vectors such as
//! biases or batch-norm scales are stored as `(1, C, 1, 1)` tensors and
//! scalars as `(1, 1, 1, 1)`.
//!
//! The element type is generic over [`Element`], implemented for `f32`
//! (training and inference) and `f64` (gradient checking). In `f64` mode all
//! reductions run in a fixed order so results are reproducible bit-for-bit.

mod conv;
mod elementwise;
mod norm;
mod pool;

use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Axis, Error, Result};

pub use conv::{
    conv2d, conv2d_backward, conv2d_direct, conv2d_with, effective_extent, ConvAlgo, ConvGrads, ConvSpec, Padding,
};
pub use elementwise::{
    add, concat_channels, leaky_relu, leaky_relu_backward, sigmoid, sigmoid_backward, split_channels,
    upsample_nearest2x, upsample_nearest2x_backward, LEAKY_RELU_ALPHA,
};
pub use norm::{batchnorm, batchnorm_backward, BatchNormGrads, BatchNormSaved, BnMode, RunningStats};
pub use pool::{avgpool2d, avgpool2d_backward, maxpool2d, maxpool2d_backward, AVGPOOL_KERNEL, AVGPOOL_STRIDE};

/// Storage tag for an element type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => f.write_str("f32"),
            DType::F64 => f.write_str("f64"),
        }
    }
}

/// Floating-point element type of a tensor.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Default + fmt::Debug + fmt::Display + Send + Sync + std::iter::Sum + 'static
{
    const DTYPE: DType;

    /// `c = a * b` (or `c += a * b` when `accumulate`) for an `m x k` by
    /// `k x n` product with arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        c: &mut [Self],
        rsc: usize,
        accumulate: bool,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn from_f64_lossy(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

fn check_gemm_bounds<T>(rows: usize, cols: usize, rs: usize, cs: usize, buf: &[T], what: &str) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * rs + (cols - 1) * cs;
    assert!(last < buf.len(), "gemm operand {what} out of bounds");
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        rsa: usize,
        csa: usize,
        b: &[f32],
        rsb: usize,
        csb: usize,
        c: &mut [f32],
        rsc: usize,
        accumulate: bool,
    ) {
        check_gemm_bounds(m, k, rsa, csa, a, "a");
        check_gemm_bounds(k, n, rsb, csb, b, "b");
        check_gemm_bounds(m, n, rsc, 1, c, "c");
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: operand extents were bounds-checked above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                beta,
                c.as_mut_ptr(),
                rsc as isize,
                1,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    /// Fixed-order product: every output accumulates its `k` terms in
    /// ascending order starting from zero, matching the direct convolution
    /// loops exactly.
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        rsa: usize,
        csa: usize,
        b: &[f64],
        rsb: usize,
        csb: usize,
        c: &mut [f64],
        rsc: usize,
        accumulate: bool,
    ) {
        check_gemm_bounds(m, k, rsa, csa, a, "a");
        check_gemm_bounds(k, n, rsb, csb, b, "b");
        check_gemm_bounds(m, n, rsc, 1, c, "c");
        let mut row = vec![0.0f64; n];
        for i in 0..m {
            row.iter_mut().for_each(|v| *v = 0.0);
            for p in 0..k {
                let av = a[i * rsa + p * csa];
                let boff = p * rsb;
                for (j, acc) in row.iter_mut().enumerate() {
                    *acc += av * b[boff + j * csb];
                }
            }
            let crow = &mut c[i * rsc..i * rsc + n];
            if accumulate {
                crow.iter_mut().zip(&row).for_each(|(c, r)| *c += *r);
            } else {
                crow.copy_from_slice(&row);
            }
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Tensor extent as `(batch, channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    /// `(1, c, 1, 1)`, the layout used for per-channel vectors.
    pub const fn vector(c: usize) -> Self {
        Shape::new(1, c, 1, 1)
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(n < self.n && c < self.c && h < self.h && w < self.w);
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    fn validate(&self) -> Result<()> {
        for (axis, v) in [
            (Axis::Batch, self.n),
            (Axis::Channel, self.c),
            (Axis::Height, self.h),
            (Axis::Width, self.w),
        ] {
            if v == 0 {
                return Err(Error::shape("tensor", format!("{axis} extent must be >= 1")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

impl From<[usize; 4]> for Shape {
    fn from(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }
}

/// Contiguous row-major NCHW tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Shape,
    data: Vec<E>,
}

impl<E> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("dtype", &std::any::type_name::<E>())
            .finish()
    }
}

impl<E: Element> Tensor<E> {
    pub fn from_vec(shape: impl Into<Shape>, data: Vec<E>) -> Result<Self> {
        let shape = shape.into();
        shape.validate()?;
        if shape.len() != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape} needs {} values, got {}", shape.len(), data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: impl Into<Shape>, value: E) -> Self {
        let shape = shape.into();
        shape.validate().expect("tensor extents must be >= 1");
        Tensor {
            data: vec![value; shape.len()],
            shape,
        }
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::full(shape, E::zero())
    }

    pub fn ones(shape: impl Into<Shape>) -> Self {
        Self::full(shape, E::one())
    }

    pub fn scalar(value: E) -> Self {
        Self::full(Shape::scalar(), value)
    }

    /// Builds a tensor by evaluating `f(n, c, h, w)` in storage order.
    pub fn from_fn(shape: impl Into<Shape>, mut f: impl FnMut(usize, usize, usize, usize) -> E) -> Self {
        let shape = shape.into();
        shape.validate().expect("tensor extents must be >= 1");
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<E> {
        self.data
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> E {
        self.data[self.shape.index(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: E) {
        let i = self.shape.index(n, c, h, w);
        self.data[i] = value;
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor {}", self.shape);
        self.data[0]
    }

    pub fn reshape(self, shape: impl Into<Shape>) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(E, E) -> E) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", format!("{} vs {}", self.shape, other.shape)));
        }
        Ok(Tensor {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scale(&self, k: E) -> Self {
        self.map(|v| v * k)
    }

    /// In-place `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a = *a + b);
    }

    /// Sum of all elements, accumulated in storage order.
    pub fn sum(&self) -> E {
        self.data.iter().fold(E::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> E {
        self.sum() / E::from_usize(self.len()).expect("len fits")
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| F::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    /// Contiguous data for one batch item.
    pub fn batch_item(&self, n: usize) -> &[E] {
        let stride = self.shape.c * self.shape.plane();
        &self.data[n * stride..(n + 1) * stride]
    }

    /// Copies batch item `n` out as a `(1, C, H, W)` tensor.
    pub fn select_batch(&self, n: usize) -> Self {
        let s = self.shape;
        Tensor {
            shape: Shape::new(1, s.c, s.h, s.w),
            data: self.batch_item(n).to_vec(),
        }
    }

    /// Stacks tensors along the batch axis.
    pub fn stack_batch(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("stack_batch", "no tensors to stack"))?
            .shape;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            let s = p.shape;
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(Error::shape("stack_batch", format!("{} does not match {}", s, first)));
            }
            n += s.n;
            data.extend_from_slice(&p.data);
        }
        Tensor::from_vec(Shape::new(n, first.c, first.h, first.w), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_extent() {
        assert!(Tensor::<f32>::from_vec([1, 0, 2, 2], vec![]).is_err());
    }

    #[test]
    fn rejects_length_mismatch() {
        assert!(Tensor::<f32>::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn indexing_is_row_major_nchw() {
        let t = Tensor::<f64>::from_fn([2, 3, 4, 5], |n, c, h, w| (n * 1000 + c * 100 + h * 10 + w) as f64);
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
        assert_eq!(t.data()[t.shape().index(1, 2, 3, 4)], 1234.0);
        assert_eq!(t.data()[1], 1.0);
    }

    #[test]
    fn gemm_f64_matches_f32_on_small_product() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3x4
        let mut c64 = vec![0.0; 8];
        f64::gemm(2, 3, 4, &a, 3, 1, &b, 4, 1, &mut c64, 4, false);
        let a32: Vec<f32> = a.iter().map(|&v| v as f32).collect();
        let b32: Vec<f32> = b.iter().map(|&v| v as f32).collect();
        let mut c32 = vec![0.0f32; 8];
        f32::gemm(2, 3, 4, &a32, 3, 1, &b32, 4, 1, &mut c32, 4, false);
        for (x, y) in c64.iter().zip(&c32) {
            assert!((x - *y as f64).abs() < 1e-5);
        }
        // row 0 of a = [0,1,2], col 0 of b = [0, 2, 4] → 0 + 2 + 8
        assert_eq!(c64[0], 10.0);
    }

    #[test]
    fn gemm_transposed_strides() {
        // a^T where a is stored 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 1.0, 1.0];
        let mut c = [0.0f64; 2];
        f64::gemm(2, 3, 1, &a, 1, 2, &b, 1, 1, &mut c, 1, false);
        assert_eq!(c, [9.0, 12.0]);
    }

    #[test]
    fn stack_and_select_round_trip() {
        let a = Tensor::<f32>::from_fn([1, 2, 2, 2], |_, c, h, w| (c * 4 + h * 2 + w) as f32);
        let b = a.scale(-1.0);
        let s = Tensor::stack_batch(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), Shape::new(2, 2, 2, 2));
        assert_eq!(s.select_batch(0), a);
        assert_eq!(s.select_batch(1), b);
    }
}
