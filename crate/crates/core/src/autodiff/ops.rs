use super::Operation;
use crate::error::{Error, Result};
use crate::tensor::{self, BatchNormSaved, BnMode, ConvAlgo, ConvSpec, Element, RunningStats, Shape, Tensor};

/// Names of every primitive with a gradient rule, in registry order.
pub const PRIMITIVES: &[&str] = &[
    "add",
    "mul",
    "scale",
    "sum",
    "conv2d",
    "maxpool2d",
    "avgpool2d",
    "upsample_nearest2x",
    "batchnorm",
    "leaky_relu",
    "sigmoid",
    "concat_channels",
    "dice_loss",
];

pub struct AddOp;

impl<E: Element> Operation<E> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>]) -> Result<Tensor<E>> {
        tensor::add(inputs[0], inputs[1])
    }

    fn backward(
        &self,
        _: &[&Tensor<E>],
        _: &Tensor<E>,
        grad: &Tensor<E>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        Ok(needs.iter().map(|&n| n.then(|| grad.clone())).collect())
    }
}

/// Elementwise product of two same-shape tensors.
pub struct MulOp;

impl<E: Element> Operation<E> for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>]) -> Result<Tensor<E>> {
        inputs[0].zip_map(inputs[1], |a, b| a * b)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _: &Tensor<E>,
        grad: &Tensor<E>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        let ga = needs[0].then(|| grad.zip_map(inputs[1], |g, b| g * b)).transpose()?;
        let gb = needs[1].then(|| grad.zip_map(inputs[0], |g, a| g * a)).transpose()?;
        Ok(vec![ga, gb])
    }
}

pub struct ScaleOp<E> {
    factor: E,
}

impl<E> ScaleOp<E> {
    pub fn new(factor: E) -> Self {
        ScaleOp { factor }
    }
}

impl<E: Element> Operation<E> for ScaleOp<E> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>]) -> Result<Tensor<E>> {
        Ok(inputs[0].scale(self.factor))
    }

    fn backward(
        &self,
        _: &[&Tensor<E>],
        _: &Tensor<E>,
        grad: &Tensor<E>,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        Ok(vec![Some(grad.scale(self.factor))])
    }
}

/// Sum of all elements to a `(1, 1, 1, 1)` scalar.
pub struct SumOp;

impl<E: Element> Operation<E> for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>]) -> Result<Tensor<E>> {
        Ok(Tensor::scalar(inputs[0].sum()))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _: &Tensor<E>,
        grad: &Tensor<E>,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        Ok(vec![Some(Tensor::full(inputs[0].shape(), grad.item()))])
    }
}

pub struct Conv2dOp {
    spec: ConvSpec,
    algo: ConvAlgo,
}

impl Conv2dOp {
    pub fn new(spec: ConvSpec) -> Self {
        Conv2dOp {
            spec,
            algo: ConvAlgo::default(),
        }
    }

    pub fn algo(mut self, algo: ConvAlgo) -> Self {
        self.algo = algo;
        self
    }
}

impl<E: Element> Operation<E> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>]) -> Result<Tensor<E>> {
        tensor::conv2d_with(inputs[0], inputs[1], inputs[2], &self.spec, self.algo)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _: &Tensor<E>,
        grad: &Tensor<E>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        let g = tensor::conv2d_backward(inputs[0], inputs[1], grad, &self.spec)?;
        Ok(vec![
            needs[0].then_some(g.input),
            needs[1].then_some(g.weight),
            needs[2].then_some(g.bias),
        ])
    }
}

#[derive(Default)]
pub struct MaxPoolOp {
    indices: Vec<usize>,
}

impl<E: Element> Operation<E> for MaxPoolOp {
    fn name(&self) -> &'static str {
        "maxpool2d"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>]) -> Result<Tensor<E>> {
        let (out, indices) = tensor::maxpool2d(inputs[0])?;
        self.indices = indices;
        Ok(out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _: &Tensor<E>,
        grad: &Tensor<E>,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        Ok(vec![Some(tensor::maxpool2d_backward(
            inputs[0].shape(),
            &self.indices,
            grad,
        ))])
    }
}

pub struct AvgPoolOp {
    pub kernel: usize,
    pub stride: usize,
}

impl<E: Element> Operation<E> for AvgPoolOp {
    fn name(&self) -> &'static str {
        "avgpool2d"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>]) -> Result<Tensor<E>> {
        tensor::avgpool2d(inputs[0], self.kernel, self.stride)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _: &Tensor<E>,
        grad: &Tensor<E>,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        Ok(vec![Some(tensor::avgpool2d_backward(
            inputs[0].shape(),
            grad,
            self.kernel,
            self.stride,
        ))])
    }
}

pub struct UpsampleOp;

impl<E: Element> Operation<E> for UpsampleOp {
    fn name(&self) -> &'static str {
        "upsample_nearest2x"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>]) -> Result<Tensor<E>> {
        Ok(tensor::upsample_nearest2x(inputs[0]))
    }

    fn backward(
        &self,
        _: &[&Tensor<E>],
        _: &Tensor<E>,
        grad: &Tensor<E>,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        Ok(vec![Some(tensor::upsample_nearest2x_backward(grad))])
    }
}

pub struct LeakyReluOp<E> {
    pub alpha: E,
}

impl<E: Element> Operation<E> for LeakyReluOp<E> {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>]) -> Result<Tensor<E>> {
        Ok(tensor::leaky_relu(inputs[0], self.alpha))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _: &Tensor<E>,
        grad: &Tensor<E>,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        Ok(vec![Some(tensor::leaky_relu_backward(inputs[0], grad, self.alpha))])
    }
}

pub struct SigmoidOp;

impl<E: Element> Operation<E> for SigmoidOp {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>]) -> Result<Tensor<E>> {
        Ok(tensor::sigmoid(inputs[0]))
    }

    fn backward(
        &self,
        _: &[&Tensor<E>],
        output: &Tensor<E>,
        grad: &Tensor<E>,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        Ok(vec![Some(tensor::sigmoid_backward(output, grad))])
    }
}

#[derive(Default)]
pub struct ConcatOp {
    channels: Vec<usize>,
}

impl<E: Element> Operation<E> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>]) -> Result<Tensor<E>> {
        self.channels = inputs.iter().map(|t| t.shape().c).collect();
        tensor::concat_channels(inputs)
    }

    fn backward(
        &self,
        _: &[&Tensor<E>],
        _: &Tensor<E>,
        grad: &Tensor<E>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        let parts = tensor::split_channels(grad, &self.channels)?;
        Ok(parts.into_iter().zip(needs).map(|(p, &n)| n.then_some(p)).collect())
    }
}

/// Batch normalization. Inputs are `[x, gamma, beta]`.
pub struct BatchNormOp<E> {
    pub(super) running: RunningStats<E>,
    mode: BnMode,
    momentum: E,
    eps: E,
    saved: Option<BatchNormSaved<E>>,
}

impl<E: Element> BatchNormOp<E> {
    pub fn new(running: RunningStats<E>, mode: BnMode, momentum: E, eps: E) -> Self {
        BatchNormOp {
            running,
            mode,
            momentum,
            eps,
            saved: None,
        }
    }

    pub fn running(&self) -> &RunningStats<E> {
        &self.running
    }
}

impl<E: Element> Operation<E> for BatchNormOp<E> {
    fn name(&self) -> &'static str {
        "batchnorm"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>]) -> Result<Tensor<E>> {
        let (out, saved) = tensor::batchnorm(
            inputs[0],
            inputs[1],
            inputs[2],
            &mut self.running,
            self.mode,
            self.momentum,
            self.eps,
        )?;
        self.saved = Some(saved);
        Ok(out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _: &Tensor<E>,
        grad: &Tensor<E>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        let saved = self
            .saved
            .as_ref()
            .ok_or_else(|| Error::Contract("batchnorm backward before forward".into()))?;
        let g = tensor::batchnorm_backward(grad, inputs[1], saved);
        debug_assert_eq!(g.gamma.shape(), Shape::vector(inputs[0].shape().c));
        Ok(vec![
            needs[0].then_some(g.input),
            needs[1].then_some(g.gamma),
            needs[2].then_some(g.beta),
        ])
    }
}
