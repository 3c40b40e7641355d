//! Tape-based reverse-mode differentiation.
//!
//! Forward values are computed eagerly as operations are recorded. A
//! [`Tape`] keeps, for every value that depends on a tracked leaf, the
//! operation that produced it and the inputs it read. [`Tape::backward`]
//! walks the tape once in reverse insertion order, which is a valid
//! topological order because inputs are always recorded before their
//! consumers.
//!
//! ```
//! use defunet::autodiff::Tape;
//! use defunet::tensor::Tensor;
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.input(Tensor::full([1, 1, 2, 2], 3.0));
//! let sq = tape.mul(&x, &x).unwrap();
//! let loss = tape.sum(&sq).unwrap();
//! let grads = tape.backward(&loss).unwrap();
//! assert_eq!(grads.get(&x).unwrap().data(), &[6.0; 4]);
//! ```

mod check;
mod ops;

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{BnMode, ConvAlgo, ConvSpec, Element, RunningStats, Shape, Tensor};

pub use check::{finite_difference_check, finite_difference_check_at, grad_check, GradCheckReport};
pub use ops::{
    AddOp, AvgPoolOp, BatchNormOp, ConcatOp, Conv2dOp, LeakyReluOp, MaxPoolOp, MulOp, ScaleOp, SigmoidOp, SumOp,
    UpsampleOp, PRIMITIVES,
};

pub type NodeId = usize;

/// Index of a trainable parameter in its owning store.
pub type ParamId = usize;

/// A value produced on (or fed into) a tape.
///
/// `node` is `None` for constants: values no tracked leaf depends on.
#[derive(Clone)]
pub struct Var<E> {
    value: Arc<Tensor<E>>,
    node: Option<NodeId>,
}

impl<E: Element> Var<E> {
    /// An untracked value.
    pub fn constant(value: Tensor<E>) -> Self {
        Var {
            value: Arc::new(value),
            node: None,
        }
    }

    pub fn value(&self) -> &Tensor<E> {
        &self.value
    }

    pub fn shared(&self) -> Arc<Tensor<E>> {
        Arc::clone(&self.value)
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }
}

impl<E: Element> std::fmt::Debug for Var<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.value.shape())
            .field("node", &self.node)
            .finish()
    }
}

/// A differentiable primitive.
///
/// `forward` runs once when the operation is recorded and may stash
/// whatever the backward pass needs in `self`.
pub trait Operation<E: Element> {
    fn name(&self) -> &'static str;

    fn forward(&mut self, inputs: &[&Tensor<E>]) -> Result<Tensor<E>>;

    /// Gradients with respect to each input, given the gradient of the
    /// output. Entries whose `needs` flag is false may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        output: &Tensor<E>,
        grad_out: &Tensor<E>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        let _ = (inputs, output, grad_out, needs);
        Err(Error::UnsupportedOp(self.name()))
    }

    /// Whether [`Operation::backward`] is implemented. Recording an
    /// operation without a gradient rule on tracked inputs fails.
    fn has_gradient(&self) -> bool {
        true
    }
}

enum Producer<E> {
    Leaf { param: Option<ParamId> },
    Op(Box<dyn Operation<E>>),
}

struct Node<E> {
    producer: Producer<E>,
    inputs: Vec<Option<NodeId>>,
    input_values: Vec<Arc<Tensor<E>>>,
    value: Arc<Tensor<E>>,
}

/// Records operations for reverse-mode differentiation.
pub struct Tape<E: Element> {
    nodes: RefCell<Vec<Node<E>>>,
    grad_enabled: bool,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that tracks nothing: every value is a constant and
    /// intermediates are freed as soon as they go out of scope.
    pub fn no_grad() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn leaf(&self, value: Arc<Tensor<E>>, param: Option<ParamId>) -> Var<E> {
        if !self.grad_enabled {
            return Var { value, node: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            producer: Producer::Leaf { param },
            inputs: Vec::new(),
            input_values: Vec::new(),
            value: Arc::clone(&value),
        });
        Var { value, node: Some(id) }
    }

    /// A tracked leaf whose gradient is reported by [`Gradients::get`].
    pub fn input(&self, value: Tensor<E>) -> Var<E> {
        self.leaf(Arc::new(value), None)
    }

    /// A tracked trainable parameter. The same parameter may be registered
    /// more than once; its gradient contributions are summed.
    pub fn param(&self, id: ParamId, value: Arc<Tensor<E>>) -> Var<E> {
        self.leaf(value, Some(id))
    }

    pub fn constant(&self, value: Tensor<E>) -> Var<E> {
        Var::constant(value)
    }

    /// Evaluates `op` on `inputs` and records it if any input is tracked.
    pub fn record<O: Operation<E> + 'static>(&self, op: O, inputs: &[&Var<E>]) -> Result<Var<E>> {
        self.record_inspect(op, inputs, |_| ())
    }

    /// Like [`Tape::record`], handing the operation to `inspect` after its
    /// forward pass (used to read side outputs such as updated statistics).
    pub fn record_inspect<O: Operation<E> + 'static>(
        &self,
        mut op: O,
        inputs: &[&Var<E>],
        inspect: impl FnOnce(&O),
    ) -> Result<Var<E>> {
        let values: Vec<&Tensor<E>> = inputs.iter().map(|v| v.value()).collect();
        let tracked = self.grad_enabled && inputs.iter().any(|v| v.requires_grad());
        if tracked && !op.has_gradient() {
            return Err(Error::UnsupportedOp(op.name()));
        }
        let out = op.forward(&values)?;
        inspect(&op);
        let value = Arc::new(out);
        if !tracked {
            return Ok(Var { value, node: None });
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            producer: Producer::Op(Box::new(op)),
            inputs: inputs.iter().map(|v| v.node).collect(),
            input_values: inputs.iter().map(|v| v.shared()).collect(),
            value: Arc::clone(&value),
        });
        Ok(Var { value, node: Some(id) })
    }

    pub fn add(&self, a: &Var<E>, b: &Var<E>) -> Result<Var<E>> {
        self.record(AddOp, &[a, b])
    }

    pub fn mul(&self, a: &Var<E>, b: &Var<E>) -> Result<Var<E>> {
        self.record(MulOp, &[a, b])
    }

    pub fn scale(&self, a: &Var<E>, k: E) -> Result<Var<E>> {
        self.record(ScaleOp::new(k), &[a])
    }

    pub fn sum(&self, a: &Var<E>) -> Result<Var<E>> {
        self.record(SumOp, &[a])
    }

    pub fn conv2d(&self, x: &Var<E>, weight: &Var<E>, bias: &Var<E>, spec: ConvSpec) -> Result<Var<E>> {
        self.record(Conv2dOp::new(spec), &[x, weight, bias])
    }

    pub fn conv2d_with(
        &self,
        x: &Var<E>,
        weight: &Var<E>,
        bias: &Var<E>,
        spec: ConvSpec,
        algo: ConvAlgo,
    ) -> Result<Var<E>> {
        self.record(Conv2dOp::new(spec).algo(algo), &[x, weight, bias])
    }

    pub fn maxpool2d(&self, x: &Var<E>) -> Result<Var<E>> {
        self.record(MaxPoolOp::default(), &[x])
    }

    pub fn avgpool2d(&self, x: &Var<E>, kernel: usize, stride: usize) -> Result<Var<E>> {
        self.record(AvgPoolOp { kernel, stride }, &[x])
    }

    pub fn upsample2x(&self, x: &Var<E>) -> Result<Var<E>> {
        self.record(UpsampleOp, &[x])
    }

    pub fn leaky_relu(&self, x: &Var<E>, alpha: E) -> Result<Var<E>> {
        self.record(LeakyReluOp { alpha }, &[x])
    }

    pub fn sigmoid(&self, x: &Var<E>) -> Result<Var<E>> {
        self.record(SigmoidOp, &[x])
    }

    pub fn concat(&self, parts: &[&Var<E>]) -> Result<Var<E>> {
        self.record(ConcatOp::default(), parts)
    }

    /// Batch normalization; in train mode `running` is updated in place.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &self,
        x: &Var<E>,
        gamma: &Var<E>,
        beta: &Var<E>,
        running: &mut RunningStats<E>,
        mode: BnMode,
        momentum: E,
        eps: E,
    ) -> Result<Var<E>> {
        let op = BatchNormOp::new(running.clone(), mode, momentum, eps);
        self.record_inspect(op, &[x, gamma, beta], |op| *running = op.running.clone())
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: &Var<E>) -> Result<Gradients<E>> {
        if loss.shape() != Shape::scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {}",
                loss.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut result = Gradients {
            leaves: HashMap::new(),
            params: GradMap::default(),
        };
        // Every registered parameter gets an entry, zero if unreachable.
        for node in nodes.iter() {
            if let Producer::Leaf { param: Some(p) } = node.producer {
                result
                    .params
                    .0
                    .entry(p)
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        let Some(root) = loss.node else {
            return Ok(result);
        };

        let mut grads: Vec<Option<Tensor<E>>> = Vec::new();
        grads.resize_with(root + 1, || None);
        grads[root] = Some(Tensor::ones(Shape::scalar()));

        for id in (0..=root).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            match &node.producer {
                Producer::Leaf { param } => {
                    if let Some(p) = param {
                        result.params.0.get_mut(p).expect("parameter entry").add_assign(&grad);
                    }
                    match result.leaves.get_mut(&id) {
                        Some(g) => g.add_assign(&grad),
                        None => {
                            result.leaves.insert(id, grad);
                        }
                    }
                }
                Producer::Op(op) => {
                    let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
                    let values: Vec<&Tensor<E>> = node.input_values.iter().map(|v| v.as_ref()).collect();
                    let input_grads = op.backward(&values, &node.value, &grad, &needs)?;
                    for ((src, g), value) in node.inputs.iter().zip(input_grads).zip(&values) {
                        let (Some(src), Some(g)) = (src, g) else {
                            continue;
                        };
                        if g.shape() != value.shape() {
                            return Err(Error::Contract(format!(
                                "{} produced gradient {} for input {}",
                                op.name(),
                                g.shape(),
                                value.shape()
                            )));
                        }
                        match &mut grads[*src] {
                            Some(acc) => acc.add_assign(&g),
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
            }
        }
        Ok(result)
    }
}

/// Parameter gradients keyed by [`ParamId`], in ascending id order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradMap<E>(BTreeMap<ParamId, Tensor<E>>);

impl<E: Element> GradMap<E> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<E>> {
        self.0.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor<E>) {
        self.0.insert(id, grad);
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<E>)> {
        self.0.iter().map(|(k, v)| (*k, v))
    }

    /// Adds zero entries for any of `shapes` not already present.
    pub fn fill_missing(&mut self, shapes: impl IntoIterator<Item = (ParamId, Shape)>) {
        for (id, shape) in shapes {
            self.0.entry(id).or_insert_with(|| Tensor::zeros(shape));
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<E> {
    leaves: HashMap<NodeId, Tensor<E>>,
    params: GradMap<E>,
}

impl<E: Element> Gradients<E> {
    /// Gradient of a tracked leaf (input or parameter registration).
    pub fn get(&self, var: &Var<E>) -> Option<&Tensor<E>> {
        var.node.and_then(|id| self.leaves.get(&id))
    }

    pub fn params(&self) -> &GradMap<E> {
        &self.params
    }

    pub fn into_params(self) -> GradMap<E> {
        self.params
    }
}
