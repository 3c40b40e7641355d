use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compares `analytic[i]` against central differences of `loss` taken by
/// perturbing each coordinate of `values[i]` by `±eps`. Every value is
/// restored exactly after its perturbation.
pub fn finite_difference_check<E: Element>(
    values: &mut [Tensor<E>],
    analytic: &[Tensor<E>],
    eps: f64,
    loss: impl FnMut(&[Tensor<E>]) -> Result<E>,
) -> Result<GradCheckReport> {
    let coords: Vec<(usize, usize)> = values
        .iter()
        .enumerate()
        .flat_map(|(i, v)| (0..v.len()).map(move |j| (i, j)))
        .collect();
    finite_difference_check_at(values, analytic, &coords, eps, loss)
}

/// [`finite_difference_check`] restricted to the `(input, index)` pairs in
/// `coords`.
pub fn finite_difference_check_at<E: Element, A: Element>(
    values: &mut [Tensor<E>],
    analytic: &[Tensor<A>],
    coords: &[(usize, usize)],
    eps: f64,
    mut loss: impl FnMut(&[Tensor<E>]) -> Result<E>,
) -> Result<GradCheckReport> {
    if values.len() != analytic.len() {
        return Err(Error::Contract(format!(
            "{} values but {} gradients",
            values.len(),
            analytic.len()
        )));
    }
    for (i, (v, a)) in values.iter().zip(analytic).enumerate() {
        if v.shape() != a.shape() {
            return Err(Error::Contract(format!(
                "gradient {} has shape {} but value has {}",
                i,
                a.shape(),
                v.shape()
            )));
        }
    }
    let step = E::from_f64_lossy(eps);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        coordinates: 0,
    };
    for &(i, j) in coords {
        let original = values[i].data()[j];
        values[i].data_mut()[j] = original + step;
        let plus = loss(values)?.as_f64();
        values[i].data_mut()[j] = original - step;
        let minus = loss(values)?.as_f64();
        values[i].data_mut()[j] = original;

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i].data()[j].as_f64();
        let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        if !rel.is_finite() {
            return Err(Error::Contract(format!(
                "non-finite gradient comparison at input {i} index {j}"
            )));
        }
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_input = i;
            report.worst_index = j;
        }
        report.coordinates += 1;
    }
    Ok(report)
}

/// Gradient check of a scalar function of tensors built on a tape.
///
/// `f` receives the tape and one tracked leaf per input and must return a
/// scalar. The analytic gradient comes from [`Tape::backward`]; the numeric
/// one from central differences on untracked tapes.
pub fn grad_check<E, F>(f: F, inputs: &[Tensor<E>], eps: f64) -> Result<GradCheckReport>
where
    E: Element,
    F: Fn(&Tape<E>, &[Var<E>]) -> Result<Var<E>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<E>> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(&out)?;
    let analytic: Vec<Tensor<E>> = vars
        .iter()
        .map(|v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();
    drop(grads);
    drop(vars);

    let mut values = inputs.to_vec();
    finite_difference_check(&mut values, &analytic, eps, |vals| {
        let tape = Tape::no_grad();
        let vars: Vec<Var<E>> = vals.iter().map(|t| Var::constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    })
}
