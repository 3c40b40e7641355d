//! The dual-encoder fusion network, a plain U-Net baseline, and checkpoint
//! files.
//!
//! Encoder recursion, with `D` a DCRC block after max pooling and `E` an
//! inception block:
//!
//! ```text
//! X1 = DCRC1(input)      Y1 = X1      skip1 = X1
//! X(n+1) = D(n)(Xn)      Y(n+1) = E(n)(skip_n)      skip(n+1) = X(n+1) + Y(n+1)
//! ```
//!
//! The decoder upsamples (nearest neighbour), concatenates the skip of the
//! matching level and applies a DCRC block; a 1x1 convolution and a
//! sigmoid produce the probability map.

mod checkpoint;
mod config;

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Axis, Error, Result};
use crate::nn::{
    init_rng, Conv2d, Ctx, DcrcBlock, DoubleConvBlock, InceptionDilationBlock, InitRng, NnConfig, ParamStore,
};
use crate::tensor::{BnMode, ConvSpec, Element, Tensor};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC,
};
pub use config::{Arch, ModelConfig};

/// Encoder or decoder stage.
#[derive(Debug, Clone)]
pub enum Stage {
    Dcrc(DcrcBlock),
    Double(DoubleConvBlock),
}

impl Stage {
    #[allow(clippy::too_many_arguments)]
    fn build<E: Element>(
        arch: Arch,
        store: &mut ParamStore<E>,
        name: &str,
        in_channels: usize,
        channels: usize,
        config: &ModelConfig,
        nn: &NnConfig,
        rng: &mut InitRng,
    ) -> Result<Self> {
        Ok(match arch {
            Arch::Defunet => Stage::Dcrc(DcrcBlock::new(
                store,
                name,
                in_channels,
                channels,
                config.units,
                config.recurrence,
                nn,
                rng,
            )?),
            Arch::Unet => Stage::Double(DoubleConvBlock::new(store, name, in_channels, channels, nn, rng)?),
        })
    }

    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: &Var<E>) -> Result<Var<E>> {
        match self {
            Stage::Dcrc(b) => b.forward(ctx, x),
            Stage::Double(b) => b.forward(ctx, x),
        }
    }
}

/// Encoder features of one level, as recorded by [`Model::fusion_trace`].
#[derive(Debug, Clone)]
pub struct FusionLevel<E> {
    /// Output of the level's encoder block.
    pub x: Arc<Tensor<E>>,
    /// Output of the inception path (equal to `x` at the first level and
    /// for the baseline).
    pub y: Arc<Tensor<E>>,
    /// What the decoder concatenates at this level.
    pub skip: Arc<Tensor<E>>,
}

#[derive(Debug, Clone)]
pub struct Model<E> {
    config: ModelConfig,
    pub store: ParamStore<E>,
    encoders: Vec<Stage>,
    /// `inceptions[n]` maps level `n` to level `n + 1`; empty for the
    /// baseline.
    inceptions: Vec<InceptionDilationBlock>,
    /// `decoders[n]` produces level `n` features.
    decoders: Vec<Stage>,
    head: Conv2d,
}

impl<E: Element> Model<E> {
    /// Builds and initializes a network; the same seed gives identical
    /// weights.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let filters = config.filter_schedule()?;
        let nn = config.nn();
        let arch = config.arch;
        let levels = config.levels;
        let mut rng = init_rng(seed);
        let mut store = ParamStore::new();

        let mut encoders = Vec::with_capacity(levels);
        for n in 0..levels {
            let input = if n == 0 { config.in_channels } else { filters[n - 1] };
            encoders.push(Stage::build(
                arch,
                &mut store,
                &format!("enc{}", n + 1),
                input,
                filters[n],
                config,
                &nn,
                &mut rng,
            )?);
        }
        let mut inceptions = Vec::new();
        if arch == Arch::Defunet {
            for n in 0..levels - 1 {
                inceptions.push(InceptionDilationBlock::new(
                    &mut store,
                    &format!("inc{}", n + 1),
                    filters[n],
                    filters[n + 1],
                    &nn,
                    &mut rng,
                )?);
            }
        }
        let mut decoders = Vec::with_capacity(levels - 1);
        for n in 0..levels - 1 {
            decoders.push(Stage::build(
                arch,
                &mut store,
                &format!("dec{}", n + 1),
                filters[n + 1] + filters[n],
                filters[n],
                config,
                &nn,
                &mut rng,
            )?);
        }
        let head = Conv2d::new(
            &mut store,
            "head",
            ConvSpec::new(filters[0], config.out_channels, (1, 1)),
            &mut rng,
        )?;
        Ok(Model {
            config: config.clone(),
            store,
            encoders,
            inceptions,
            decoders,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn count_params(&self) -> usize {
        self.store.count()
    }

    pub fn inception(&self, level: usize) -> Option<&InceptionDilationBlock> {
        self.inceptions.get(level)
    }

    pub fn encoder(&self, level: usize) -> Option<&Stage> {
        self.encoders.get(level)
    }

    pub fn decoder(&self, level: usize) -> Option<&Stage> {
        self.decoders.get(level)
    }

    /// Checks channel count and that height and width are multiples of
    /// `2^(levels - 1)`.
    pub fn check_input(&self, x: &Tensor<E>) -> Result<()> {
        let s = x.shape();
        if s.c != self.config.in_channels {
            return Err(Error::dim("model", Axis::Channel, self.config.in_channels, s.c));
        }
        let d = self.config.divisor();
        if s.h % d != 0 || s.w % d != 0 {
            return Err(Error::Indivisible {
                height: s.h,
                width: s.w,
                divisor: d,
            });
        }
        Ok(())
    }

    /// Forward pass recorded on `tape`. Train mode updates batch-norm
    /// running statistics.
    pub fn forward(&mut self, tape: &Tape<E>, x: &Var<E>, mode: BnMode) -> Result<Var<E>> {
        self.check_input(x.value())?;
        let store = &mut self.store;
        let mut ctx = Ctx::new(tape, store, mode);
        forward_inner(
            &self.encoders,
            &self.inceptions,
            &self.decoders,
            &self.head,
            &self.config,
            &mut ctx,
            x,
            None,
        )
    }

    /// Forward pass through `ctx`, whose store must be this model's store
    /// or a copy of it.
    pub fn forward_with(&self, ctx: &mut Ctx<'_, E>, x: &Var<E>) -> Result<Var<E>> {
        self.check_input(x.value())?;
        forward_inner(
            &self.encoders,
            &self.inceptions,
            &self.decoders,
            &self.head,
            &self.config,
            ctx,
            x,
            None,
        )
    }

    /// Eval-mode forward over a shared model.
    pub fn forward_eval(&self, tape: &Tape<E>, x: &Var<E>) -> Result<Var<E>> {
        self.check_input(x.value())?;
        let mut ctx = Ctx::eval(tape, &self.store);
        forward_inner(
            &self.encoders,
            &self.inceptions,
            &self.decoders,
            &self.head,
            &self.config,
            &mut ctx,
            x,
            None,
        )
    }

    /// Eval-mode probabilities without recording gradients.
    pub fn predict(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let tape = Tape::no_grad();
        let input = tape.constant(x.clone());
        let y = self.forward_eval(&tape, &input)?;
        Ok(y.value().clone())
    }

    /// Eval-mode forward that also returns every level's encoder features.
    pub fn fusion_trace(&self, x: &Tensor<E>) -> Result<(Tensor<E>, Vec<FusionLevel<E>>)> {
        self.check_input(x)?;
        let tape = Tape::no_grad();
        let input = tape.constant(x.clone());
        let mut ctx = Ctx::eval(&tape, &self.store);
        let mut trace = Vec::with_capacity(self.config.levels);
        let y = forward_inner(
            &self.encoders,
            &self.inceptions,
            &self.decoders,
            &self.head,
            &self.config,
            &mut ctx,
            &input,
            Some(&mut trace),
        )?;
        Ok((y.value().clone(), trace))
    }

    /// Same network with every tensor converted to another element type.
    pub fn cast<F: Element>(&self) -> Model<F> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            encoders: self.encoders.clone(),
            inceptions: self.inceptions.clone(),
            decoders: self.decoders.clone(),
            head: self.head.clone(),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn forward_inner<E: Element>(
    encoders: &[Stage],
    inceptions: &[InceptionDilationBlock],
    decoders: &[Stage],
    head: &Conv2d,
    config: &ModelConfig,
    ctx: &mut Ctx<'_, E>,
    input: &Var<E>,
    mut trace: Option<&mut Vec<FusionLevel<E>>>,
) -> Result<Var<E>> {
    let levels = config.levels;
    let fused = !inceptions.is_empty();
    let mut skips: Vec<Var<E>> = Vec::with_capacity(levels);
    let mut x = encoders[0].forward(ctx, input)?;
    let mut y = x.clone();
    let mut bottom_plain = x.clone();
    for n in 0..levels {
        if n > 0 {
            let pooled = ctx.tape.maxpool2d(&x)?;
            x = encoders[n].forward(ctx, &pooled)?;
            y = if fused {
                inceptions[n - 1].forward(ctx, &skips[n - 1])?
            } else {
                x.clone()
            };
        }
        let skip = if n == 0 || !fused {
            x.clone()
        } else {
            ctx.tape.add(&x, &y)?
        };
        if let Some(t) = trace.as_deref_mut() {
            t.push(FusionLevel {
                x: x.shared(),
                y: y.shared(),
                skip: skip.shared(),
            });
        }
        skips.push(skip);
        bottom_plain = x.clone();
    }

    let mut d = if config.fuse_bottom {
        skips[levels - 1].clone()
    } else {
        bottom_plain
    };
    for n in (0..levels - 1).rev() {
        let up = ctx.tape.upsample2x(&d)?;
        let cat = ctx.tape.concat(&[&up, &skips[n]])?;
        d = decoders[n].forward(ctx, &cat)?;
    }
    let logits = head.forward(ctx, &d)?;
    ctx.tape.sigmoid(&logits)
}
