//! Finite-difference gradient suite over every primitive, every block and
//! the full model.

use std::fmt::Write as _;

use defunet::autodiff::{
    finite_difference_check_at, grad_check, Conv2dOp, GradCheckReport, Operation, Tape, Var, PRIMITIVES,
};
use defunet::metrics::dice_loss_var;
use defunet::model::{Model, ModelConfig};
use defunet::nn::{
    analytic_grads, check_coordinates, init_rng, param_grad_check, perturbed_loss, Ctx, DcrcBlock,
    InceptionDilationBlock, NnConfig, ParamStore, RecurrentConvUnit,
};
use defunet::tensor::{BnMode, ConvSpec, Padding, RunningStats, Shape, Tensor};
use defunet::{Element, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Tolerance on the relative error of 64-bit checks.
pub const F64_TOLERANCE: f64 = 1e-6;
/// Tolerance of the 32-bit end-to-end check.
pub const F32_TOLERANCE: f64 = 1e-3;
const EPS: f64 = 1e-6;
/// Parameter coordinates sampled per tensor in the full-model checks.
const MODEL_COORDS_PER_PARAM: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coordinates: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SuiteOptions {
    /// Replace the convolution backward with a wrong one (negative
    /// control; the suite must then fail).
    pub corrupt_conv: bool,
}

fn rng(seed: u64) -> ChaCha8Rng {
    init_rng(seed)
}

fn uniform(shape: impl Into<Shape>, lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let shape = shape.into();
    Tensor::from_vec(shape, (0..shape.len()).map(|_| r.random_range(lo..hi)).collect()).expect("shape")
}

/// `sum(out * R)` for a fixed random `R`: a scalar whose gradient probes
/// every output coordinate differently.
fn project(tape: &Tape<f64>, out: &Var<f64>) -> Result<Var<f64>> {
    let r = tape.constant(uniform(out.shape(), -1.0, 1.0, 0x5eed + out.shape().len() as u64));
    let p = tape.mul(out, &r)?;
    tape.sum(&p)
}

/// Convolution whose weight gradient is scaled by 1.1.
struct CorruptConv(Conv2dOp);

impl<E: Element> Operation<E> for CorruptConv {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>]) -> Result<Tensor<E>> {
        Operation::<E>::forward(&mut self.0, inputs)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        output: &Tensor<E>,
        grad: &Tensor<E>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        let mut g = self.0.backward(inputs, output, grad, needs)?;
        if let Some(w) = g[1].as_mut() {
            *w = w.scale(E::from_f64_lossy(1.1));
        }
        Ok(g)
    }
}

fn primitive(name: &str, opts: SuiteOptions) -> Result<GradCheckReport> {
    let report = match name {
        "add" => grad_check(
            |t, v| project(t, &t.add(&v[0], &v[1])?),
            &[uniform([1, 2, 3, 3], -1.0, 1.0, 1), uniform([1, 2, 3, 3], -1.0, 1.0, 2)],
            EPS,
        )?,
        "mul" => grad_check(
            |t, v| project(t, &t.mul(&v[0], &v[1])?),
            &[uniform([1, 2, 3, 3], -1.0, 1.0, 3), uniform([1, 2, 3, 3], -1.0, 1.0, 4)],
            EPS,
        )?,
        "scale" => grad_check(
            |t, v| project(t, &t.scale(&v[0], 1.7)?),
            &[uniform([1, 2, 3, 3], -1.0, 1.0, 5)],
            EPS,
        )?,
        "sum" => grad_check(
            |t, v| {
                let sq = t.mul(&v[0], &v[0])?;
                t.sum(&sq)
            },
            &[uniform([2, 2, 3, 3], -1.0, 1.0, 6)],
            EPS,
        )?,
        "conv2d" => {
            let specs = [
                ConvSpec::new(2, 3, (3, 3)),
                ConvSpec::new(2, 3, (3, 3)).stride(2, 2),
                ConvSpec::new(2, 3, (1, 1)).stride(2, 2),
                ConvSpec::new(2, 3, (3, 3)).stride(2, 2).dilation(3, 1),
                ConvSpec::new(2, 3, (3, 3)).stride(2, 2).dilation(1, 2),
                ConvSpec::new(2, 3, (3, 3)).padding(Padding::Valid),
                ConvSpec::new(2, 3, (1, 1)),
            ];
            let mut worst: Option<GradCheckReport> = None;
            for (i, spec) in specs.into_iter().enumerate() {
                let seed = 100 + 3 * i as u64;
                let inputs = [
                    uniform([2, 2, 9, 8], -1.0, 1.0, seed),
                    uniform(spec.weight_shape(), -1.0, 1.0, seed + 1),
                    uniform(Shape::vector(3), -1.0, 1.0, seed + 2),
                ];
                let r = grad_check(
                    |t, v| {
                        let y = if opts.corrupt_conv {
                            t.record(CorruptConv(Conv2dOp::new(spec)), &[&v[0], &v[1], &v[2]])?
                        } else {
                            t.conv2d(&v[0], &v[1], &v[2], spec)?
                        };
                        project(t, &y)
                    },
                    &inputs,
                    EPS,
                )?;
                worst = Some(match worst {
                    Some(w) if w.max_rel_error >= r.max_rel_error => GradCheckReport {
                        coordinates: w.coordinates + r.coordinates,
                        ..w
                    },
                    Some(w) => GradCheckReport {
                        coordinates: w.coordinates + r.coordinates,
                        ..r
                    },
                    None => r,
                });
            }
            worst.expect("at least one spec")
        }
        "maxpool2d" => {
            // Distinct values spaced far wider than the perturbation.
            let base = uniform([1, 2, 8, 6], 0.0, 1.0, 7);
            let mut order: Vec<usize> = (0..base.len()).collect();
            order.sort_by(|&a, &b| base.data()[a].total_cmp(&base.data()[b]));
            let mut x = base.clone();
            for (rank, &i) in order.iter().enumerate() {
                x.data_mut()[i] = rank as f64 * 0.05 - 1.0;
            }
            grad_check(|t, v| project(t, &t.maxpool2d(&v[0])?), &[x], EPS)?
        }
        "avgpool2d" => grad_check(
            |t, v| project(t, &t.avgpool2d(&v[0], 3, 2)?),
            &[uniform([1, 2, 7, 6], -1.0, 1.0, 8)],
            EPS,
        )?,
        "upsample_nearest2x" => grad_check(
            |t, v| project(t, &t.upsample2x(&v[0])?),
            &[uniform([1, 2, 3, 4], -1.0, 1.0, 9)],
            EPS,
        )?,
        "batchnorm" => grad_check(
            |t, v| {
                let mut running = RunningStats::new(3);
                let y = t.batchnorm(&v[0], &v[1], &v[2], &mut running, BnMode::Train, 0.1, 1e-5)?;
                project(t, &y)
            },
            &[
                uniform([2, 3, 4, 4], -1.0, 1.0, 10),
                uniform(Shape::vector(3), 0.5, 1.5, 11),
                uniform(Shape::vector(3), -0.5, 0.5, 12),
            ],
            EPS,
        )?,
        "leaky_relu" => {
            // Keep every input well away from the kink at zero.
            let x = uniform([1, 2, 4, 4], -1.0, 1.0, 13).map(|v| v.signum() * (0.1 + v.abs()));
            grad_check(|t, v| project(t, &t.leaky_relu(&v[0], 0.01)?), &[x], EPS)?
        }
        "sigmoid" => grad_check(
            |t, v| project(t, &t.sigmoid(&v[0])?),
            &[uniform([1, 2, 4, 4], -3.0, 3.0, 14)],
            EPS,
        )?,
        "concat_channels" => grad_check(
            |t, v| project(t, &t.concat(&[&v[0], &v[1]])?),
            &[
                uniform([2, 2, 3, 3], -1.0, 1.0, 15),
                uniform([2, 3, 3, 3], -1.0, 1.0, 16),
            ],
            EPS,
        )?,
        "dice_loss" => {
            let target = uniform([1, 1, 6, 6], 0.0, 1.0, 17).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
            grad_check(
                |t, v| dice_loss_var(t, &v[0], &target),
                &[uniform([1, 1, 6, 6], 0.05, 0.95, 18)],
                EPS,
            )?
        }
        other => {
            return Err(defunet::Error::Contract(format!(
                "no gradient check for primitive `{other}`"
            )))
        }
    };
    Ok(report)
}

fn block_checks() -> Result<Vec<(String, GradCheckReport)>> {
    let cfg = NnConfig::default();
    let input = uniform([1, 4, 8, 8], -1.0, 1.0, 20);
    let mut out = Vec::new();

    let mut store = ParamStore::<f64>::new();
    let rcu = RecurrentConvUnit::new(&mut store, "rcu", 4, 2, &cfg, &mut init_rng(21))?;
    let r = param_grad_check(&store, &input, EPS, None, |ctx, x| {
        project(ctx.tape, &rcu.forward(ctx, x)?)
    })?;
    out.push(("recurrent_conv_unit".to_string(), r));

    let mut store = ParamStore::<f64>::new();
    let dcrc = DcrcBlock::new(&mut store, "dcrc", 4, 6, 2, 2, &cfg, &mut init_rng(22))?;
    let r = param_grad_check(&store, &input, EPS, None, |ctx, x| {
        project(ctx.tape, &dcrc.forward(ctx, x)?)
    })?;
    out.push(("dcrc_block".to_string(), r));

    let mut store = ParamStore::<f64>::new();
    let inc = InceptionDilationBlock::new(&mut store, "inc", 4, 4, &cfg, &mut init_rng(23))?;
    let r = param_grad_check(&store, &input, EPS, None, |ctx, x| {
        project(ctx.tape, &inc.forward(ctx, x)?)
    })?;
    out.push(("inception_dilation".to_string(), r));
    Ok(out)
}

/// The small five-level network used by the end-to-end checks.
pub fn check_model_config() -> ModelConfig {
    ModelConfig::default().with_base_filters(2)
}

fn model_input() -> (Tensor<f64>, Tensor<f64>) {
    let x = uniform([1, 1, 16, 16], 0.0, 1.0, 30);
    let target = Tensor::from_fn([1, 1, 16, 16], |_, _, h, w| {
        let (dy, dx) = (h as f64 - 7.5, w as f64 - 7.5);
        if dy * dy / 36.0 + dx * dx / 16.0 <= 1.0 {
            1.0
        } else {
            0.0
        }
    });
    (x, target)
}

fn model_loss<'m, E: Element>(
    model: &'m Model<E>,
    target: &Tensor<E>,
) -> impl Fn(&mut Ctx<'_, E>, &Var<E>) -> Result<Var<E>> + 'm {
    let target = target.clone();
    move |ctx, x| {
        let p = model.forward_with(ctx, x)?;
        dice_loss_var(ctx.tape, &p, &target)
    }
}

/// Moves every batch-norm shift off zero. A normalization over a single
/// value outputs exactly its shift, which at zero sits on the leaky ReLU
/// kink where central differences are meaningless.
pub fn offset_shifts<E: Element>(store: &mut ParamStore<E>, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store
        .params()
        .iter()
        .filter(|p| p.name.ends_with(".beta"))
        .map(|p| store.find(&p.name).expect("registered"))
        .collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            let m: f64 = r.random_range(0.1..0.5);
            *v = E::from_f64_lossy(if r.random_bool(0.5) { m } else { -m });
        }
    }
}

/// Full model with dice loss, 64-bit.
pub fn model_check_f64() -> Result<GradCheckReport> {
    let mut model = Model::<f64>::build(&check_model_config(), 31)?;
    offset_shifts(&mut model.store, 33);
    let (x, target) = model_input();
    let f = model_loss(&model, &target);
    param_grad_check(&model.store, &x, EPS, Some(MODEL_COORDS_PER_PARAM), f)
}

/// Full model with dice loss: 32-bit analytic gradients against 64-bit
/// central differences of the same network.
pub fn model_check_f32() -> Result<GradCheckReport> {
    let mut m32 = Model::<f32>::build(&check_model_config(), 32)?;
    offset_shifts(&mut m32.store, 34);
    let m64 = m32.cast::<f64>();
    let (x, target) = model_input();
    let analytic = analytic_grads(&m32.store, &x.cast(), model_loss(&m32, &target.cast()))?;
    let coords = check_coordinates(&m64.store, &x, Some(MODEL_COORDS_PER_PARAM), 1);
    let mut values = vec![x];
    values.extend(m64.store.params().iter().map(|p| (*p.value).clone()));
    let f = model_loss(&m64, &target);
    finite_difference_check_at(&mut values, &analytic, &coords, EPS, |vals| {
        perturbed_loss(&m64.store, vals, &f)
    })
}

fn result(name: &str, r: GradCheckReport, tolerance: f64) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        max_rel_error: r.max_rel_error,
        tolerance,
        coordinates: r.coordinates,
    }
}

/// Runs every check: one per registered primitive, the three blocks, and
/// the full model in 64 and 32 bits.
pub fn run_suite(opts: SuiteOptions) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for name in PRIMITIVES {
        out.push(result(name, primitive(name, opts)?, F64_TOLERANCE));
    }
    for (name, r) in block_checks()? {
        out.push(result(&name, r, F64_TOLERANCE));
    }
    out.push(result("model_dice_f64", model_check_f64()?, F64_TOLERANCE));
    out.push(result("model_dice_f32", model_check_f32()?, F32_TOLERANCE));
    Ok(out)
}

pub fn format_report(results: &[CheckResult]) -> String {
    let mut s = String::new();
    for r in results {
        writeln!(
            s,
            "{:<22} max rel err {:.3e}  tol {:.0e}  coords {:>6}  {}",
            r.name,
            r.max_rel_error,
            r.tolerance,
            r.coordinates,
            if r.passed() { "ok" } else { "FAIL" }
        )
        .unwrap();
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    writeln!(s, "{} checks, {} failed", results.len(), failed).unwrap();
    s
}
