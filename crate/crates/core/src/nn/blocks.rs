use super::{BatchNorm2d, BufferId, Conv2d, ConvBnAct, Ctx, InitRng, NnConfig, ParamStore, Pointwise};
use crate::autodiff::Var;
use crate::error::{Axis, Error, Result};
use crate::tensor::{ConvSpec, Element, Shape, AVGPOOL_KERNEL, AVGPOOL_STRIDE};

fn check_channels(op: &'static str, expected: usize, x: &Var<impl Element>) -> Result<()> {
    let c = x.shape().c;
    if c != expected {
        return Err(Error::dim(op, Axis::Channel, expected, c));
    }
    Ok(())
}

/// Recurrent convolutional unit.
///
/// One 3x3 convolution and one batch norm are applied `steps + 1` times,
/// re-adding the unit input before every step after the first:
///
/// ```text
/// z0 = act(bn(conv(x)))
/// zk = act(bn(conv(x + z(k-1))))   k = 1..=steps
/// ```
///
/// Every step shares `gamma` and `beta` but keeps its own running
/// statistics, since the activations of different steps have different
/// distributions.
#[derive(Debug, Clone)]
pub struct RecurrentConvUnit {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    /// Running-statistics buffers for steps `1..=steps`; step 0 uses the
    /// layer's own.
    pub step_stats: Vec<BufferId>,
    pub steps: usize,
    pub alpha: f64,
    pub channels: usize,
}

impl RecurrentConvUnit {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        channels: usize,
        steps: usize,
        cfg: &NnConfig,
        rng: &mut InitRng,
    ) -> Result<Self> {
        let spec = ConvSpec::new(channels, channels, (3, 3));
        let conv = Conv2d::new(store, &format!("{name}.conv"), spec, rng)?;
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), channels, cfg)?;
        let step_stats = (1..=steps)
            .map(|k| store.add_stats(format!("{name}.bn.step{k}"), channels))
            .collect::<Result<_>>()?;
        Ok(RecurrentConvUnit {
            conv,
            bn,
            step_stats,
            steps,
            alpha: cfg.alpha,
            channels,
        })
    }

    fn step<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: &Var<E>, k: usize) -> Result<Var<E>> {
        let y = self.conv.forward(ctx, x)?;
        let stats = if k == 0 { self.bn.stats } else { self.step_stats[k - 1] };
        let y = self.bn.forward_with_stats(ctx, &y, stats)?;
        ctx.tape.leaky_relu(&y, E::from_f64_lossy(self.alpha))
    }

    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: &Var<E>) -> Result<Var<E>> {
        check_channels("recurrent_conv_unit", self.channels, x)?;
        let mut z = self.step(ctx, x, 0)?;
        for k in 1..=self.steps {
            let acc = ctx.tape.add(x, &z)?;
            z = self.step(ctx, &acc, k)?;
        }
        Ok(z)
    }
}

/// Channel bookkeeping recorded by [`DcrcBlock::forward_traced`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DcrcTrace {
    /// Shape of the dense concatenation fed to each bottleneck, then to the
    /// output projection (last entry).
    pub concat_shapes: Vec<Shape>,
}

/// Densely connected recurrent convolution block.
///
/// Keeps a feature list `F = [x]`. Each recurrent unit reads the 1x1
/// bottleneck of `concat(F)` (the first unit reads `x` directly, or through
/// an entry 1x1 when the channel count changes) and appends its output to
/// `F`. A final 1x1 + LeakyReLU maps `concat(F)`, with
/// `in_channels + units * channels` channels, to `channels`.
#[derive(Debug, Clone)]
pub struct DcrcBlock {
    pub in_channels: usize,
    pub channels: usize,
    pub entry: Option<Pointwise>,
    pub units: Vec<RecurrentConvUnit>,
    /// Bottlenecks ahead of units `1..units`.
    pub bottlenecks: Vec<Pointwise>,
    pub output: Pointwise,
}

impl DcrcBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        in_channels: usize,
        channels: usize,
        units: usize,
        steps: usize,
        cfg: &NnConfig,
        rng: &mut InitRng,
    ) -> Result<Self> {
        if units == 0 {
            return Err(Error::Config(format!("{name}: a DCRC block needs at least one unit")));
        }
        let entry = (in_channels != channels)
            .then(|| Pointwise::new(store, &format!("{name}.entry"), in_channels, channels, cfg, rng))
            .transpose()?;
        let mut unit_list = Vec::with_capacity(units);
        let mut bottlenecks = Vec::with_capacity(units - 1);
        for k in 0..units {
            if k > 0 {
                bottlenecks.push(Pointwise::new(
                    store,
                    &format!("{name}.bottleneck{k}"),
                    in_channels + k * channels,
                    channels,
                    cfg,
                    rng,
                )?);
            }
            unit_list.push(RecurrentConvUnit::new(
                store,
                &format!("{name}.unit{k}"),
                channels,
                steps,
                cfg,
                rng,
            )?);
        }
        let output = Pointwise::new(
            store,
            &format!("{name}.output"),
            in_channels + units * channels,
            channels,
            cfg,
            rng,
        )?;
        Ok(DcrcBlock {
            in_channels,
            channels,
            entry,
            units: unit_list,
            bottlenecks,
            output,
        })
    }

    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: &Var<E>) -> Result<Var<E>> {
        self.forward_inner(ctx, x, None)
    }

    pub fn forward_traced<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: &Var<E>) -> Result<(Var<E>, DcrcTrace)> {
        let mut trace = DcrcTrace::default();
        let y = self.forward_inner(ctx, x, Some(&mut trace))?;
        Ok((y, trace))
    }

    fn forward_inner<E: Element>(
        &self,
        ctx: &mut Ctx<'_, E>,
        x: &Var<E>,
        mut trace: Option<&mut DcrcTrace>,
    ) -> Result<Var<E>> {
        check_channels("dcrc_block", self.in_channels, x)?;
        let mut features = vec![x.clone()];
        for (k, unit) in self.units.iter().enumerate() {
            let reduced = if k == 0 {
                match &self.entry {
                    Some(entry) => entry.forward(ctx, x)?,
                    None => x.clone(),
                }
            } else {
                let refs: Vec<&Var<E>> = features.iter().collect();
                let dense = ctx.tape.concat(&refs)?;
                if let Some(t) = trace.as_deref_mut() {
                    t.concat_shapes.push(dense.shape());
                }
                self.bottlenecks[k - 1].forward(ctx, &dense)?
            };
            features.push(unit.forward(ctx, &reduced)?);
        }
        let refs: Vec<&Var<E>> = features.iter().collect();
        let dense = ctx.tape.concat(&refs)?;
        if let Some(t) = trace {
            t.concat_shapes.push(dense.shape());
        }
        self.output.forward(ctx, &dense)
    }
}

/// Branch names of [`InceptionDilationBlock`], in concatenation order.
pub const INCEPTION_BRANCHES: [&str; 5] = [
    "pointwise_s2",
    "conv3x3_s2",
    "avgpool_pointwise",
    "dilated_3x1",
    "dilated_1x2",
];

/// Downsampling inception block with anisotropic dilation.
///
/// Five branches each halve the resolution and produce `channels` maps:
/// 1x1 stride 2; 3x3 stride 2; 3x3 average pool stride 2 then 1x1; 3x3
/// stride 2 dilated (3, 1) (a 7x3 footprint); 3x3 stride 2 dilated (1, 2)
/// (a 3x5 footprint). Their concatenation is projected back to `channels`
/// by a 1x1 convolution.
#[derive(Debug, Clone)]
pub struct InceptionDilationBlock {
    pub in_channels: usize,
    pub channels: usize,
    pub branches: [ConvBnAct; 5],
    pub projection: ConvBnAct,
}

impl InceptionDilationBlock {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        in_channels: usize,
        channels: usize,
        cfg: &NnConfig,
        rng: &mut InitRng,
    ) -> Result<Self> {
        let bn = cfg.inception_batchnorm;
        let specs = [
            ConvSpec::new(in_channels, channels, (1, 1)).stride(2, 2),
            ConvSpec::new(in_channels, channels, (3, 3)).stride(2, 2),
            ConvSpec::new(in_channels, channels, (1, 1)),
            ConvSpec::new(in_channels, channels, (3, 3)).stride(2, 2).dilation(3, 1),
            ConvSpec::new(in_channels, channels, (3, 3)).stride(2, 2).dilation(1, 2),
        ];
        let mut built = Vec::with_capacity(5);
        for (spec, branch) in specs.into_iter().zip(INCEPTION_BRANCHES) {
            built.push(ConvBnAct::new(store, &format!("{name}.{branch}"), spec, bn, cfg, rng)?);
        }
        let projection = ConvBnAct::new(
            store,
            &format!("{name}.projection"),
            ConvSpec::new(5 * channels, channels, (1, 1)),
            bn,
            cfg,
            rng,
        )?;
        Ok(InceptionDilationBlock {
            in_channels,
            channels,
            branches: built.try_into().expect("five branches"),
            projection,
        })
    }

    fn branch<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: &Var<E>, index: usize) -> Result<Var<E>> {
        let input = if index == 2 {
            ctx.tape.avgpool2d(x, AVGPOOL_KERNEL, AVGPOOL_STRIDE)?
        } else {
            x.clone()
        };
        self.branches[index].forward(ctx, &input)
    }

    fn check_input<E: Element>(&self, x: &Var<E>) -> Result<()> {
        check_channels("inception_dilation", self.in_channels, x)?;
        let s = x.shape();
        if s.h < 2 {
            return Err(Error::dim("inception_dilation", Axis::Height, 2, s.h));
        }
        if s.w < 2 {
            return Err(Error::dim("inception_dilation", Axis::Width, 2, s.w));
        }
        Ok(())
    }

    /// Per-branch outputs, evaluated in `order` but returned in
    /// [`INCEPTION_BRANCHES`] order.
    pub fn branch_outputs<E: Element>(
        &self,
        ctx: &mut Ctx<'_, E>,
        x: &Var<E>,
        order: [usize; 5],
    ) -> Result<Vec<Var<E>>> {
        self.check_input(x)?;
        let mut outs: [Option<Var<E>>; 5] = Default::default();
        for i in order {
            outs[i] = Some(self.branch(ctx, x, i)?);
        }
        outs.into_iter()
            .enumerate()
            .map(|(i, o)| o.ok_or_else(|| Error::Contract(format!("branch {i} missing from evaluation order"))))
            .collect()
    }

    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: &Var<E>) -> Result<Var<E>> {
        self.forward_ordered(ctx, x, [0, 1, 2, 3, 4])
    }

    pub fn forward_ordered<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: &Var<E>, order: [usize; 5]) -> Result<Var<E>> {
        let outs = self.branch_outputs(ctx, x, order)?;
        let first = outs[0].shape();
        for (o, name) in outs.iter().zip(INCEPTION_BRANCHES) {
            if o.shape() != first {
                return Err(Error::shape(
                    "inception_dilation",
                    format!("branch {name} produced {} but {} was expected", o.shape(), first),
                ));
            }
        }
        let refs: Vec<&Var<E>> = outs.iter().collect();
        let cat = ctx.tape.concat(&refs)?;
        self.projection.forward(ctx, &cat)
    }
}

/// Two 3x3 conv + batch norm + LeakyReLU layers: the plain U-Net block.
#[derive(Debug, Clone)]
pub struct DoubleConvBlock {
    pub in_channels: usize,
    pub channels: usize,
    pub first: ConvBnAct,
    pub second: ConvBnAct,
}

impl DoubleConvBlock {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        in_channels: usize,
        channels: usize,
        cfg: &NnConfig,
        rng: &mut InitRng,
    ) -> Result<Self> {
        Ok(DoubleConvBlock {
            in_channels,
            channels,
            first: ConvBnAct::new(
                store,
                &format!("{name}.first"),
                ConvSpec::new(in_channels, channels, (3, 3)),
                true,
                cfg,
                rng,
            )?,
            second: ConvBnAct::new(
                store,
                &format!("{name}.second"),
                ConvSpec::new(channels, channels, (3, 3)),
                true,
                cfg,
                rng,
            )?,
        })
    }

    pub fn forward<E: Element>(&self, ctx: &mut Ctx<'_, E>, x: &Var<E>) -> Result<Var<E>> {
        check_channels("double_conv", self.in_channels, x)?;
        let y = self.first.forward(ctx, x)?;
        self.second.forward(ctx, &y)
    }
}
