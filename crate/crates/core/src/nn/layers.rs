use rand_distr::{Distribution, Normal};

use super::{BufferId, Ctx, InitRng, NnConfig, ParamStore};
use crate::autodiff::{ParamId, Var};
use crate::error::Result;
use crate::tensor::{BnMode, ConvSpec, Element, Shape, Tensor};

/// Convolution with He (fan-in) normal weights and zero bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv2d {
    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, spec: ConvSpec, rng: &mut InitRng) -> Result<Self> {
        spec.validate()?;
        let fan_in = spec.in_channels * spec.kernel.0 * spec.kernel.1;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let shape = spec.weight_shape();
        let data = (0..shape.len())
            .map(|_| E::from_f64_lossy(normal.sample(rng)))
            .collect();
        let weight = store.add(format!("{name}.weight"), Tensor::from_vec(shape, data)?)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(Shape::vector(spec.out_channels)))?;
        Ok(Conv2d { spec, weight, bias })
    }

    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: &Var<E>) -> Result<Var<E>> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.tape.conv2d(x, &w, &b, self.spec)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BufferId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, channels: usize, cfg: &NnConfig) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(Shape::vector(channels)))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(Shape::vector(channels)))?,
            stats: store.add_stats(name, channels)?,
            momentum: cfg.bn_momentum,
            eps: cfg.bn_eps,
        })
    }

    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: &Var<E>) -> Result<Var<E>> {
        self.forward_with_stats(ctx, x, self.stats)
    }

    /// Normalizes with the affine parameters of this layer but the running
    /// statistics in `stats`.
    pub fn forward_with_stats<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: &Var<E>, stats: BufferId) -> Result<Var<E>> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        let momentum = E::from_f64_lossy(self.momentum);
        let eps = E::from_f64_lossy(self.eps);
        let tape = ctx.tape;
        match ctx.mode {
            BnMode::Train => {
                let running = ctx.stats_mut(stats)?;
                tape.batchnorm(x, &g, &b, running, BnMode::Train, momentum, eps)
            }
            BnMode::Eval => {
                let mut running = ctx.store().stats(stats).clone();
                tape.batchnorm(x, &g, &b, &mut running, BnMode::Eval, momentum, eps)
            }
        }
    }
}

/// Convolution, optional batch normalization, LeakyReLU.
#[derive(Debug, Clone)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: Option<BatchNorm2d>,
    pub alpha: f64,
}

impl ConvBnAct {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        spec: ConvSpec,
        batchnorm: bool,
        cfg: &NnConfig,
        rng: &mut InitRng,
    ) -> Result<Self> {
        let conv = Conv2d::new(store, &format!("{name}.conv"), spec, rng)?;
        let bn = batchnorm
            .then(|| BatchNorm2d::new(store, &format!("{name}.bn"), spec.out_channels, cfg))
            .transpose()?;
        Ok(ConvBnAct {
            conv,
            bn,
            alpha: cfg.alpha,
        })
    }

    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: &Var<E>) -> Result<Var<E>> {
        let mut y = self.conv.forward(ctx, x)?;
        if let Some(bn) = &self.bn {
            y = bn.forward(ctx, &y)?;
        }
        ctx.tape.leaky_relu(&y, E::from_f64_lossy(self.alpha))
    }
}

/// 1x1 convolution followed by LeakyReLU: the channel bottleneck.
#[derive(Debug, Clone)]
pub struct Pointwise {
    pub conv: Conv2d,
    pub alpha: f64,
}

impl Pointwise {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        cfg: &NnConfig,
        rng: &mut InitRng,
    ) -> Result<Self> {
        let spec = ConvSpec::new(in_channels, out_channels, (1, 1));
        Ok(Pointwise {
            conv: Conv2d::new(store, name, spec, rng)?,
            alpha: cfg.alpha,
        })
    }

    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: &Var<E>) -> Result<Var<E>> {
        let y = self.conv.forward(ctx, x)?;
        ctx.tape.leaky_relu(&y, E::from_f64_lossy(self.alpha))
    }
}
