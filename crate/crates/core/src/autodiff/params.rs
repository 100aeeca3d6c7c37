use crate::error::{LavoError, Result};
use crate::tensor::Tensor2D;

/// Handle to a [`Parameter`] inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named tensor with a gradient accumulator of the same shape.
#[derive(Debug, Clone)]
pub struct Parameter {
    name: String,
    value: Tensor2D,
    grad: Tensor2D,
    trainable: bool,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor2D {
        &self.value
    }

    pub fn grad(&self) -> &Tensor2D {
        &self.grad
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }
}

/// Owns every parameter of a model, in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor2D, trainable: bool) -> ParamId {
        let grad = Tensor2D::zeros(value.rows(), value.cols());
        self.params.push(Parameter { name: name.into(), value, grad, trainable });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor2D {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor2D {
        &self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Replaces a value; the shape must not change.
    pub fn set_value(&mut self, id: ParamId, value: Tensor2D) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(LavoError::Shape { op: "set_value", left: p.value.shape(), right: value.shape() });
        }
        p.value = value;
        Ok(())
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor2D {
        &mut self.params[id.0].value
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor2D) -> Result<()> {
        self.params[id.0].grad.add_assign(g)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}
