//! Minimal tape-based reverse-mode automatic differentiation.
//!
//! Parameters live in a [`ParamStore`]. A [`Graph`] borrows the store,
//! records operations as they are applied, and [`Graph::backward`] walks the
//! tape in reverse to produce [`Gradients`] keyed by parameter. The store is
//! never mutated by a graph, so any number of graphs may evaluate the same
//! parameters concurrently.
//!
//! Every op checks its output for NaN/Inf and fails with
//! [`TensorError::NonFinite`] rather than letting it propagate.

mod ops;

use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::LinalgScalar;
use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ops::Op;

/// Real number type the engine computes in (`f32` by default, `f64` for
/// gradient checks).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("{op}: invalid argument: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss does not depend on any parameter")]
    Detached,
    #[error("invalid dropout probability {0}")]
    InvalidProbability(f64),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

/// Dense row-major tensor value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "from_vec",
                left: shape.to_vec(),
                right: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(x: F) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![x],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| G::from_f64(x.to_f64().unwrap_or(0.0)).unwrap_or_else(G::zero))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, ParamId>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: &str, tensor: Tensor<F>) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Result<ParamId, TensorError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<F>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }
}

/// Per-parameter gradient buffers produced by [`Graph::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn new(param_count: usize) -> Self {
        Gradients {
            grads: vec![None; param_count],
        }
    }

    /// Gradient for a parameter; `None` if it did not take part in the loss.
    pub fn get(&self, id: ParamId) -> Option<&[F]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[F])> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Vec<F>)> {
        self.grads
            .iter_mut()
            .enumerate()
            .filter_map(|(i, g)| g.as_mut().map(|g| (ParamId(i), g)))
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &[F]) {
        match &mut self.grads[id.0] {
            Some(buf) => buf.iter_mut().zip(grad).for_each(|(b, &g)| *b += g),
            slot @ None => *slot = Some(grad.to_vec()),
        }
    }

    pub(crate) fn accumulate_owned(&mut self, id: ParamId, grad: Vec<F>) {
        match &mut self.grads[id.0] {
            Some(buf) => buf.iter_mut().zip(&grad).for_each(|(b, &g)| *b += g),
            slot @ None => *slot = Some(grad),
        }
    }

    /// Adds another gradient set into this one.
    pub fn merge(&mut self, other: &Gradients<F>) {
        for (id, g) in other.iter() {
            self.accumulate(id, g);
        }
    }

    /// Like [`Gradients::merge`] but reuses `other`'s buffers.
    pub fn merge_owned(&mut self, other: Gradients<F>) {
        for (i, g) in other.grads.into_iter().enumerate() {
            if let Some(g) = g {
                self.accumulate_owned(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, factor: F) {
        for (_, g) in self.iter_mut() {
            g.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// Euclidean norm over all gradient entries.
    pub fn global_norm(&self) -> F {
        self.iter()
            .flat_map(|(_, g)| g.iter())
            .map(|&x| x * x)
            .sum::<F>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|(_, g)| g.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<F> {
    Owned(Vec<F>),
    Param(ParamId),
}

struct Node<F> {
    shape: Vec<usize>,
    value: Value<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Recording of one forward pass.
pub struct Graph<'p, F: Scalar> {
    params: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_vars: HashMap<ParamId, Var>,
    mode: Mode,
}

impl<'p, F: Scalar> Graph<'p, F> {
    pub fn new(params: &'p ParamStore<F>, mode: Mode) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            mode,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[F] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self.params.get(*id).data(),
        }
    }

    /// Copies a recorded value out as a tensor.
    pub fn tensor(&self, v: Var) -> Tensor<F> {
        Tensor {
            shape: self.shape(v).to_vec(),
            data: self.value(v).to_vec(),
        }
    }

    /// Scalar value of a one-element node.
    pub fn scalar_value(&self, v: Var) -> F {
        self.value(v)[0]
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let shape = self.params.get(id).shape().to_vec();
        let v = self.push_node(shape, Value::Param(id), Op::Leaf, true);
        self.param_vars.insert(id, v);
        v
    }

    /// Untracked constant leaf.
    pub fn constant(&mut self, tensor: Tensor<F>) -> Var {
        self.push_node(tensor.shape, Value::Owned(tensor.data), Op::Leaf, false)
    }

    fn push_node(&mut self, shape: Vec<usize>, value: Value<F>, op: Op<F>, rg: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<F>,
        op: Op<F>,
    ) -> Result<Var, TensorError> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if !data.iter().all(|x| x.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let rg = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_node(shape, Value::Owned(data), op, rg))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>, TensorError> {
        let node = &self.nodes[loss.0];
        if node.shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(node.shape.clone()));
        }
        if !node.requires_grad {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![F::one()]);
        let mut out = Gradients::new(self.params.len());

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let (Op::Leaf, Value::Param(id)) = (&node.op, &node.value) {
                out.accumulate_owned(*id, g);
                continue;
            }
            self.backprop(idx, &g, &mut grads);
        }
        if !out.all_finite() {
            return Err(TensorError::NonFinite { op: "backward" });
        }
        Ok(out)
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<F>>], v: Var) -> Option<&'g mut Vec<F>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
    }
}
