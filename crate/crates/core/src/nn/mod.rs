//! Parameter storage, basic layers and the composite segmentation blocks:
//! the recurrent convolutional unit, the densely connected recurrent
//! convolution (DCRC) block and the inception block with dilation.

mod blocks;
mod layers;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_difference_check_at, GradCheckReport, ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{BnMode, Element, RunningStats, Shape, Tensor};

pub use blocks::{
    DcrcBlock, DcrcTrace, DoubleConvBlock, InceptionDilationBlock, RecurrentConvUnit, INCEPTION_BRANCHES,
};
pub use layers::{BatchNorm2d, Conv2d, ConvBnAct, Pointwise};

/// Effective extent of a `kernel`-tap kernel at dilation `rate`:
/// `(rate - 1) * (kernel - 1) + kernel`.
pub const fn effective_kernel(kernel: usize, rate: usize) -> usize {
    crate::tensor::effective_extent(kernel, rate)
}

/// Random source used for weight initialization.
pub type InitRng = ChaCha8Rng;

pub fn init_rng(seed: u64) -> InitRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Hyper-parameters shared by every block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NnConfig {
    /// Negative slope of every LeakyReLU.
    pub alpha: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Batch normalization after each inception branch and projection.
    pub inception_batchnorm: bool,
}

impl Default for NnConfig {
    fn default() -> Self {
        NnConfig {
            alpha: crate::tensor::LEAKY_RELU_ALPHA,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            inception_batchnorm: true,
        }
    }
}

/// Index of a batch-norm running-statistics buffer.
pub type BufferId = usize;

#[derive(Debug, Clone)]
pub struct Param<E> {
    pub name: String,
    pub value: Arc<Tensor<E>>,
}

#[derive(Debug, Clone)]
pub struct StatsBuffer<E> {
    pub name: String,
    pub stats: RunningStats<E>,
}

/// Named trainable tensors plus batch-norm running statistics, in
/// registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<E> {
    params: Vec<Param<E>>,
    buffers: Vec<StatsBuffer<E>>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<E>) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.params.push(Param {
            name,
            value: Arc::new(value),
        });
        Ok(self.params.len() - 1)
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> Result<BufferId> {
        let name = name.into();
        if self.buffers.iter().any(|b| b.name == name) {
            return Err(Error::Config(format!("duplicate buffer name `{name}`")));
        }
        self.buffers.push(StatsBuffer {
            name,
            stats: RunningStats::new(channels),
        });
        Ok(self.buffers.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn params(&self) -> &[Param<E>] {
        &self.params
    }

    pub fn buffers(&self) -> &[StatsBuffer<E>] {
        &self.buffers
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.params[id].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn shared(&self, id: ParamId) -> Arc<Tensor<E>> {
        Arc::clone(&self.params[id].value)
    }

    /// Mutable access; clones the tensor if a tape still holds it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        Arc::make_mut(&mut self.params[id].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<E>) -> Result<()> {
        let current = self.params[id].value.shape();
        if value.shape() != current {
            return Err(Error::shape(
                "set_param",
                format!("`{}` expects {}, got {}", self.params[id].name, current, value.shape()),
            ));
        }
        self.params[id].value = Arc::new(value);
        Ok(())
    }

    pub fn stats(&self, id: BufferId) -> &RunningStats<E> {
        &self.buffers[id].stats
    }

    pub fn stats_mut(&mut self, id: BufferId) -> &mut RunningStats<E> {
        &mut self.buffers[id].stats
    }

    pub fn shapes(&self) -> impl Iterator<Item = (ParamId, Shape)> + '_ {
        self.params.iter().enumerate().map(|(i, p)| (i, p.value.shape()))
    }

    /// `(id, &mut value)` pairs for an optimizer step.
    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor<E>)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (i, Arc::make_mut(&mut p.value)))
    }

    /// Converts every tensor to another element type.
    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: Arc::new(p.value.cast()),
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| StatsBuffer {
                    name: b.name.clone(),
                    stats: RunningStats {
                        mean: b.stats.mean.cast(),
                        var: b.stats.var.cast(),
                    },
                })
                .collect(),
        }
    }
}

enum StoreAccess<'a, E> {
    Shared(&'a ParamStore<E>),
    Exclusive(&'a mut ParamStore<E>),
}

/// State threaded through a forward pass.
///
/// Train mode needs exclusive access to the store because batch norm
/// updates its running statistics; eval mode only reads.
pub struct Ctx<'a, E: Element> {
    pub tape: &'a Tape<E>,
    pub mode: BnMode,
    store: StoreAccess<'a, E>,
}

impl<'a, E: Element> Ctx<'a, E> {
    pub fn new(tape: &'a Tape<E>, store: &'a mut ParamStore<E>, mode: BnMode) -> Self {
        Ctx {
            tape,
            mode,
            store: StoreAccess::Exclusive(store),
        }
    }

    /// Eval-mode context over a shared store.
    pub fn eval(tape: &'a Tape<E>, store: &'a ParamStore<E>) -> Self {
        Ctx {
            tape,
            mode: BnMode::Eval,
            store: StoreAccess::Shared(store),
        }
    }

    pub fn store(&self) -> &ParamStore<E> {
        match &self.store {
            StoreAccess::Shared(s) => s,
            StoreAccess::Exclusive(s) => s,
        }
    }

    /// Registers a parameter on the tape.
    pub fn param(&self, id: ParamId) -> Var<E> {
        self.tape.param(id, self.store().shared(id))
    }

    pub(crate) fn stats_mut(&mut self, id: BufferId) -> Result<&mut RunningStats<E>> {
        match &mut self.store {
            StoreAccess::Exclusive(s) => Ok(s.stats_mut(id)),
            StoreAccess::Shared(_) => Err(Error::Contract(
                "train-mode batch norm needs exclusive access to the parameter store".into(),
            )),
        }
    }
}

/// Analytic gradients of `f` with respect to its input and every
/// parameter of `store` (in registration order), batch norm in train mode.
pub fn analytic_grads<E, F>(store: &ParamStore<E>, input: &Tensor<E>, f: F) -> Result<Vec<Tensor<E>>>
where
    E: Element,
    F: Fn(&mut Ctx<'_, E>, &Var<E>) -> Result<Var<E>>,
{
    let mut work = store.clone();
    let tape = Tape::new();
    let x = tape.input(input.clone());
    let out = {
        let mut ctx = Ctx::new(&tape, &mut work, BnMode::Train);
        f(&mut ctx, &x)?
    };
    let grads = tape.backward(&out)?;
    let mut analytic = vec![grads.get(&x).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()))];
    for (id, shape) in store.shapes() {
        analytic.push(grads.params().get(id).cloned().unwrap_or_else(|| Tensor::zeros(shape)));
    }
    Ok(analytic)
}

/// Every input coordinate plus up to `per_param` coordinates of each
/// parameter tensor (all of them when `None`), drawn with `seed`.
pub fn check_coordinates<E: Element>(
    store: &ParamStore<E>,
    input: &Tensor<E>,
    per_param: Option<usize>,
    seed: u64,
) -> Vec<(usize, usize)> {
    use rand::seq::index::sample;
    let mut rng = init_rng(seed);
    let mut coords: Vec<(usize, usize)> = (0..input.len()).map(|j| (0, j)).collect();
    for (id, p) in store.params().iter().enumerate() {
        let n = p.value.len();
        match per_param {
            Some(k) if k < n => {
                let mut picked = sample(&mut rng, n, k).into_vec();
                picked.sort_unstable();
                coords.extend(picked.into_iter().map(|j| (id + 1, j)));
            }
            _ => coords.extend((0..n).map(|j| (id + 1, j))),
        }
    }
    coords
}

/// Central-difference loss of `f` for the input and parameter values in
/// `vals`, evaluated on a fresh copy of `store` so running statistics
/// never leak between evaluations.
pub fn perturbed_loss<E, F>(store: &ParamStore<E>, vals: &[Tensor<E>], f: &F) -> Result<E>
where
    E: Element,
    F: Fn(&mut Ctx<'_, E>, &Var<E>) -> Result<Var<E>>,
{
    let mut work = store.clone();
    for (id, v) in vals[1..].iter().enumerate() {
        work.set(id, v.clone())?;
    }
    let tape = Tape::no_grad();
    let x = Var::constant(vals[0].clone());
    let mut ctx = Ctx::new(&tape, &mut work, BnMode::Train);
    Ok(f(&mut ctx, &x)?.value().item())
}

/// Gradient check of `f` with respect to its input and the parameters of
/// `store`, with batch norm in train mode. `per_param` limits how many
/// coordinates of each parameter tensor are perturbed.
pub fn param_grad_check<E, F>(
    store: &ParamStore<E>,
    input: &Tensor<E>,
    eps: f64,
    per_param: Option<usize>,
    f: F,
) -> Result<GradCheckReport>
where
    E: Element,
    F: Fn(&mut Ctx<'_, E>, &Var<E>) -> Result<Var<E>>,
{
    let analytic = analytic_grads(store, input, &f)?;
    let coords = check_coordinates(store, input, per_param, 0);
    let mut values = vec![input.clone()];
    values.extend(store.params().iter().map(|p| (*p.value).clone()));
    finite_difference_check_at(&mut values, &analytic, &coords, eps, |vals| {
        perturbed_loss(store, vals, &f)
    })
}
